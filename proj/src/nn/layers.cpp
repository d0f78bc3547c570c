#include "ensembledown/nn/layers.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "ensembledown/errors.hpp"

namespace ensembledown::nn {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void he_init(std::vector<T>& w, size_t fan_in, RngStream& rng) {
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = static_cast<T>(scale * rng.normal());
}

}  // namespace

int norm_groups_for(int channels) {
    int g = std::min(8, channels);
    while (channels % g != 0) --g;
    return g;
}

// ---------------------------------------------------------------------- conv

template <typename T>
void Conv3x3<T>::init(int c_in, int c_out, RngStream& rng, bool zero_init) {
    c_in_ = c_in;
    c_out_ = c_out;
    w_.assign(static_cast<size_t>(c_out) * c_in * 9, T(0));
    b_.assign(c_out, T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
    if (!zero_init) he_init(w_, static_cast<size_t>(c_in) * 9, rng);
}

template <typename T>
void Conv3x3<T>::forward(const Tens<T>& in, Tens<T>& out) {
    if (in.c != c_in_) throw NumericError("conv3x3: channel mismatch");
    saved_in_ = in;
    out.resize(in.b, c_out_, in.h, in.w);
    const int h = in.h, w = in.w;
    const size_t plane = in.plane();
    cols_.resize(static_cast<size_t>(c_in_) * 9 * plane);
    for (int s = 0; s < in.b; ++s) {
        // im2col with circular padding
        for (int c = 0; c < c_in_; ++c) {
            const T* src = in.chan(s, c);
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    T* dst = &cols_[(static_cast<size_t>(c) * 9 + ky * 3 + kx) * plane];
                    for (int y = 0; y < h; ++y) {
                        const int sy = (y + ky - 1 + h) % h;
                        const T* row = src + static_cast<size_t>(sy) * w;
                        T* drow = dst + static_cast<size_t>(y) * w;
                        for (int x = 0; x < w; ++x) {
                            const int sx = (x + kx - 1 + w) % w;
                            drow[x] = row[sx];
                        }
                    }
                }
        }
        ConstMatMap<T> wm(w_.data(), c_out_, c_in_ * 9);
        ConstMatMap<T> cm(cols_.data(), c_in_ * 9, static_cast<Eigen::Index>(plane));
        MatMap<T> om(out.sample(s), c_out_, static_cast<Eigen::Index>(plane));
        om.noalias() = wm * cm;
        for (int c = 0; c < c_out_; ++c) om.row(c).array() += b_[c];
    }
}

template <typename T>
void Conv3x3<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& in = saved_in_;
    grad_in.resize(in.b, in.c, in.h, in.w);
    const int h = in.h, w = in.w;
    const size_t plane = in.plane();
    std::vector<T> gcols(static_cast<size_t>(c_in_) * 9 * plane);
    for (int s = 0; s < in.b; ++s) {
        // rebuild the im2col matrix for this sample (cheaper than caching all)
        for (int c = 0; c < c_in_; ++c) {
            const T* src = in.chan(s, c);
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    T* dst = &cols_[(static_cast<size_t>(c) * 9 + ky * 3 + kx) * plane];
                    for (int y = 0; y < h; ++y) {
                        const int sy = (y + ky - 1 + h) % h;
                        const T* row = src + static_cast<size_t>(sy) * w;
                        T* drow = dst + static_cast<size_t>(y) * w;
                        for (int x = 0; x < w; ++x) drow[x] = row[(x + kx - 1 + w) % w];
                    }
                }
        }
        ConstMatMap<T> go(grad_out.sample(s), c_out_, static_cast<Eigen::Index>(plane));
        ConstMatMap<T> cm(cols_.data(), c_in_ * 9, static_cast<Eigen::Index>(plane));
        MatMap<T> gwm(gw_.data(), c_out_, c_in_ * 9);
        gwm.noalias() += go * cm.transpose();
        // sequential bias sum: vectorized reductions regroup terms based on
        // the buffer's runtime alignment, which would make results depend on
        // where the allocator placed the tensor
        for (int c = 0; c < c_out_; ++c) {
            const T* row = grad_out.chan(s, c);
            double acc = 0;
            for (size_t i = 0; i < plane; ++i) acc += row[i];
            gb_[c] += static_cast<T>(acc);
        }

        ConstMatMap<T> wm(w_.data(), c_out_, c_in_ * 9);
        MatMap<T> gc(gcols.data(), c_in_ * 9, static_cast<Eigen::Index>(plane));
        gc.noalias() = wm.transpose() * go;
        // col2im scatter with circular wrap
        T* gi = grad_in.sample(s);
        std::fill(gi, gi + grad_in.sample_size(), T(0));
        for (int c = 0; c < c_in_; ++c) {
            T* dst = gi + static_cast<size_t>(c) * plane;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const T* src = &gcols[(static_cast<size_t>(c) * 9 + ky * 3 + kx) * plane];
                    for (int y = 0; y < h; ++y) {
                        const int sy = (y + ky - 1 + h) % h;
                        T* drow = dst + static_cast<size_t>(sy) * w;
                        const T* srow = src + static_cast<size_t>(y) * w;
                        for (int x = 0; x < w; ++x) drow[(x + kx - 1 + w) % w] += srow[x];
                    }
                }
        }
    }
}

template <typename T>
void Conv3x3<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &w_, &gw_});
    out.push_back({prefix + ".bias", &b_, &gb_});
}

// ---------------------------------------------------------------------- 1x1

template <typename T>
void Conv1x1<T>::init(int c_in, int c_out, RngStream& rng) {
    c_in_ = c_in;
    c_out_ = c_out;
    w_.assign(static_cast<size_t>(c_out) * c_in, T(0));
    b_.assign(c_out, T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
    he_init(w_, c_in, rng);
}

template <typename T>
void Conv1x1<T>::forward(const Tens<T>& in, Tens<T>& out) {
    if (in.c != c_in_) throw NumericError("conv1x1: channel mismatch");
    saved_in_ = in;
    out.resize(in.b, c_out_, in.h, in.w);
    const size_t plane = in.plane();
    for (int s = 0; s < in.b; ++s) {
        ConstMatMap<T> im(in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        ConstMatMap<T> wm(w_.data(), c_out_, c_in_);
        MatMap<T> om(out.sample(s), c_out_, static_cast<Eigen::Index>(plane));
        om.noalias() = wm * im;
        for (int c = 0; c < c_out_; ++c) om.row(c).array() += b_[c];
    }
}

template <typename T>
void Conv1x1<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& in = saved_in_;
    grad_in.resize(in.b, in.c, in.h, in.w);
    const size_t plane = in.plane();
    for (int s = 0; s < in.b; ++s) {
        ConstMatMap<T> go(grad_out.sample(s), c_out_, static_cast<Eigen::Index>(plane));
        ConstMatMap<T> im(in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        MatMap<T> gwm(gw_.data(), c_out_, c_in_);
        gwm.noalias() += go * im.transpose();
        // sequential bias sum; see Conv3x3::backward for why
        for (int c = 0; c < c_out_; ++c) {
            const T* row = grad_out.chan(s, c);
            double acc = 0;
            for (size_t i = 0; i < plane; ++i) acc += row[i];
            gb_[c] += static_cast<T>(acc);
        }
        ConstMatMap<T> wm(w_.data(), c_out_, c_in_);
        MatMap<T> gi(grad_in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        gi.noalias() = wm.transpose() * go;
    }
}

template <typename T>
void Conv1x1<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &w_, &gw_});
    out.push_back({prefix + ".bias", &b_, &gb_});
}

// -------------------------------------------------------------------- convT

template <typename T>
void ConvT2x2<T>::init(int c_in, int c_out, RngStream& rng) {
    c_in_ = c_in;
    c_out_ = c_out;
    w_.assign(static_cast<size_t>(c_out) * 4 * c_in, T(0));
    b_.assign(c_out, T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
    he_init(w_, c_in, rng);
}

template <typename T>
void ConvT2x2<T>::forward(const Tens<T>& in, Tens<T>& out) {
    if (in.c != c_in_) throw NumericError("convT2x2: channel mismatch");
    saved_in_ = in;
    out.resize(in.b, c_out_, in.h * 2, in.w * 2);
    const size_t plane = in.plane();
    std::vector<T> m(static_cast<size_t>(c_out_) * 4 * plane);
    for (int s = 0; s < in.b; ++s) {
        ConstMatMap<T> im(in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        ConstMatMap<T> wm(w_.data(), c_out_ * 4, c_in_);
        MatMap<T> mm(m.data(), c_out_ * 4, static_cast<Eigen::Index>(plane));
        mm.noalias() = wm * im;
        for (int c = 0; c < c_out_; ++c) {
            T* dst = out.chan(s, c);
            for (int k = 0; k < 4; ++k) {
                const int dy = k / 2, dx = k % 2;
                const T* src = &m[(static_cast<size_t>(c) * 4 + k) * plane];
                for (int y = 0; y < in.h; ++y)
                    for (int x = 0; x < in.w; ++x)
                        dst[static_cast<size_t>(2 * y + dy) * out.w + (2 * x + dx)] =
                            src[static_cast<size_t>(y) * in.w + x] + b_[c];
            }
        }
    }
}

template <typename T>
void ConvT2x2<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& in = saved_in_;
    grad_in.resize(in.b, in.c, in.h, in.w);
    const size_t plane = in.plane();
    std::vector<T> gm(static_cast<size_t>(c_out_) * 4 * plane);
    for (int s = 0; s < in.b; ++s) {
        for (int c = 0; c < c_out_; ++c) {
            const T* src = grad_out.chan(s, c);
            T bacc = T(0);
            for (int k = 0; k < 4; ++k) {
                const int dy = k / 2, dx = k % 2;
                T* dst = &gm[(static_cast<size_t>(c) * 4 + k) * plane];
                for (int y = 0; y < in.h; ++y)
                    for (int x = 0; x < in.w; ++x) {
                        T g = src[static_cast<size_t>(2 * y + dy) * grad_out.w + (2 * x + dx)];
                        dst[static_cast<size_t>(y) * in.w + x] = g;
                        bacc += g;
                    }
            }
            gb_[c] += bacc;
        }
        ConstMatMap<T> gmm(gm.data(), c_out_ * 4, static_cast<Eigen::Index>(plane));
        ConstMatMap<T> im(in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        MatMap<T> gwm(gw_.data(), c_out_ * 4, c_in_);
        gwm.noalias() += gmm * im.transpose();
        ConstMatMap<T> wm(w_.data(), c_out_ * 4, c_in_);
        MatMap<T> gi(grad_in.sample(s), c_in_, static_cast<Eigen::Index>(plane));
        gi.noalias() = wm.transpose() * gmm;
    }
}

template <typename T>
void ConvT2x2<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &w_, &gw_});
    out.push_back({prefix + ".bias", &b_, &gb_});
}

// --------------------------------------------------------------------- pool

template <typename T>
void AvgPool2<T>::forward(const Tens<T>& in, Tens<T>& out) {
    b_ = in.b;
    c_ = in.c;
    h_ = in.h;
    w_ = in.w;
    out.resize(in.b, in.c, in.h / 2, in.w / 2);
    for (int s = 0; s < in.b; ++s)
        for (int c = 0; c < in.c; ++c) {
            const T* src = in.chan(s, c);
            T* dst = out.chan(s, c);
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x) {
                    const T* p = src + static_cast<size_t>(2 * y) * in.w + 2 * x;
                    dst[static_cast<size_t>(y) * out.w + x] =
                        (p[0] + p[1] + p[in.w] + p[in.w + 1]) * T(0.25);
                }
        }
}

template <typename T>
void AvgPool2<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    grad_in.resize(b_, c_, h_, w_);
    for (int s = 0; s < b_; ++s)
        for (int c = 0; c < c_; ++c) {
            const T* src = grad_out.chan(s, c);
            T* dst = grad_in.chan(s, c);
            for (int y = 0; y < grad_out.h; ++y)
                for (int x = 0; x < grad_out.w; ++x) {
                    const T g = src[static_cast<size_t>(y) * grad_out.w + x] * T(0.25);
                    T* p = dst + static_cast<size_t>(2 * y) * w_ + 2 * x;
                    p[0] = g;
                    p[1] = g;
                    p[w_] = g;
                    p[w_ + 1] = g;
                }
        }
}

// ----------------------------------------------------------------- groupnorm

template <typename T>
void GroupNorm<T>::init(int channels, int groups) {
    channels_ = channels;
    groups_ = groups;
    if (channels % groups != 0) throw NumericError("groupnorm: channels % groups != 0");
    gamma_.assign(channels, T(1));
    beta_.assign(channels, T(0));
    ggamma_.assign(channels, T(0));
    gbeta_.assign(channels, T(0));
}

template <typename T>
void GroupNorm<T>::forward(const Tens<T>& in, Tens<T>& out) {
    if (in.c != channels_) throw NumericError("groupnorm: channel mismatch");
    constexpr double eps = 1e-5;
    out.resize(in.b, in.c, in.h, in.w);
    saved_xhat_.resize(in.b, in.c, in.h, in.w);
    saved_inv_std_.assign(static_cast<size_t>(in.b) * groups_, T(0));
    const int cpg = channels_ / groups_;
    const size_t gsize = static_cast<size_t>(cpg) * in.plane();
    for (int s = 0; s < in.b; ++s)
        for (int g = 0; g < groups_; ++g) {
            const T* src = in.chan(s, g * cpg);
            double mean = 0;
            for (size_t i = 0; i < gsize; ++i) mean += src[i];
            mean /= static_cast<double>(gsize);
            double var = 0;
            for (size_t i = 0; i < gsize; ++i) {
                const double d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            const T inv_std = static_cast<T>(1.0 / std::sqrt(var + eps));
            saved_inv_std_[static_cast<size_t>(s) * groups_ + g] = inv_std;
            T* xh = saved_xhat_.chan(s, g * cpg);
            T* dst = out.chan(s, g * cpg);
            for (int c = 0; c < cpg; ++c) {
                const T ga = gamma_[g * cpg + c], be = beta_[g * cpg + c];
                for (size_t i = 0; i < in.plane(); ++i) {
                    const size_t j = static_cast<size_t>(c) * in.plane() + i;
                    xh[j] = static_cast<T>((src[j] - mean) * inv_std);
                    dst[j] = ga * xh[j] + be;
                }
            }
        }
}

template <typename T>
void GroupNorm<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& xh = saved_xhat_;
    grad_in.resize(xh.b, xh.c, xh.h, xh.w);
    const int cpg = channels_ / groups_;
    const size_t plane = xh.plane();
    const size_t gsize = static_cast<size_t>(cpg) * plane;
    for (int s = 0; s < xh.b; ++s)
        for (int g = 0; g < groups_; ++g) {
            const T* go = grad_out.chan(s, g * cpg);
            const T* xhat = xh.chan(s, g * cpg);
            // per-channel parameter grads plus the two group reductions
            double sum_gg = 0, sum_ggx = 0;
            for (int c = 0; c < cpg; ++c) {
                const T ga = gamma_[g * cpg + c];
                double c_gb = 0, c_gg = 0;
                for (size_t i = 0; i < plane; ++i) {
                    const size_t j = static_cast<size_t>(c) * plane + i;
                    c_gb += go[j];
                    c_gg += static_cast<double>(go[j]) * xhat[j];
                    sum_gg += static_cast<double>(ga) * go[j];
                    sum_ggx += static_cast<double>(ga) * go[j] * xhat[j];
                }
                gbeta_[g * cpg + c] += static_cast<T>(c_gb);
                ggamma_[g * cpg + c] += static_cast<T>(c_gg);
            }
            const double inv_n = 1.0 / static_cast<double>(gsize);
            const T inv_std = saved_inv_std_[static_cast<size_t>(s) * groups_ + g];
            T* gi = grad_in.chan(s, g * cpg);
            for (int c = 0; c < cpg; ++c) {
                const T ga = gamma_[g * cpg + c];
                for (size_t i = 0; i < plane; ++i) {
                    const size_t j = static_cast<size_t>(c) * plane + i;
                    const double term = static_cast<double>(ga) * go[j] - sum_gg * inv_n -
                                        static_cast<double>(xhat[j]) * sum_ggx * inv_n;
                    gi[j] = static_cast<T>(term * inv_std);
                }
            }
        }
}

template <typename T>
void GroupNorm<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma_, &ggamma_});
    out.push_back({prefix + ".beta", &beta_, &gbeta_});
}

// --------------------------------------------------------------------- silu

template <typename T>
void SiLU<T>::forward(const Tens<T>& in, Tens<T>& out) {
    saved_in_ = in;
    out.resize(in.b, in.c, in.h, in.w);
    for (size_t i = 0; i < in.size(); ++i) {
        const T x = in.v[i];
        out.v[i] = x / (T(1) + std::exp(-x));
    }
}

template <typename T>
void SiLU<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& in = saved_in_;
    grad_in.resize(in.b, in.c, in.h, in.w);
    for (size_t i = 0; i < in.size(); ++i) {
        const T x = in.v[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        grad_in.v[i] = grad_out.v[i] * (s * (T(1) + x * (T(1) - s)));
    }
}

// ------------------------------------------------------------------- linear

template <typename T>
void Linear<T>::init(int d_in, int d_out, RngStream& rng, bool zero_init) {
    d_in_ = d_in;
    d_out_ = d_out;
    w_.assign(static_cast<size_t>(d_out) * d_in, T(0));
    b_.assign(d_out, T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
    if (!zero_init) he_init(w_, d_in, rng);
}

template <typename T>
void Linear<T>::forward(const Tens<T>& in, Tens<T>& out) {
    if (in.c != d_in_ || in.h != 1 || in.w != 1) throw NumericError("linear: shape mismatch");
    saved_in_ = in;
    out.resize(in.b, d_out_, 1, 1);
    ConstMatMap<T> im(in.v.data(), in.b, d_in_);
    ConstMatMap<T> wm(w_.data(), d_out_, d_in_);
    MatMap<T> om(out.v.data(), in.b, d_out_);
    om.noalias() = im * wm.transpose();
    for (int s = 0; s < in.b; ++s)
        for (int c = 0; c < d_out_; ++c) out.v[static_cast<size_t>(s) * d_out_ + c] += b_[c];
}

template <typename T>
void Linear<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_in) {
    const Tens<T>& in = saved_in_;
    grad_in.resize(in.b, d_in_, 1, 1);
    ConstMatMap<T> go(grad_out.v.data(), in.b, d_out_);
    ConstMatMap<T> im(in.v.data(), in.b, d_in_);
    MatMap<T> gwm(gw_.data(), d_out_, d_in_);
    gwm.noalias() += go.transpose() * im;
    for (int s = 0; s < in.b; ++s)
        for (int c = 0; c < d_out_; ++c) gb_[c] += go(s, c);
    ConstMatMap<T> wm(w_.data(), d_out_, d_in_);
    MatMap<T> gi(grad_in.v.data(), in.b, d_in_);
    gi.noalias() = go * wm;
}

template <typename T>
void Linear<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &w_, &gw_});
    out.push_back({prefix + ".bias", &b_, &gb_});
}

// ------------------------------------------------------------------- concat

template <typename T>
void concat_channels(const Tens<T>& a, const Tens<T>& b, Tens<T>& out) {
    out.resize(a.b, a.c + b.c, a.h, a.w);
    for (int s = 0; s < a.b; ++s) {
        std::copy_n(a.sample(s), a.sample_size(), out.sample(s));
        std::copy_n(b.sample(s), b.sample_size(), out.sample(s) + a.sample_size());
    }
}

template <typename T>
void split_channels(const Tens<T>& grad_out, Tens<T>& grad_a, Tens<T>& grad_b) {
    for (int s = 0; s < grad_out.b; ++s) {
        std::copy_n(grad_out.sample(s), grad_a.sample_size(), grad_a.sample(s));
        std::copy_n(grad_out.sample(s) + grad_a.sample_size(), grad_b.sample_size(),
                    grad_b.sample(s));
    }
}

// explicit instantiations
template class Conv3x3<float>;
template class Conv3x3<double>;
template class Conv1x1<float>;
template class Conv1x1<double>;
template class ConvT2x2<float>;
template class ConvT2x2<double>;
template class AvgPool2<float>;
template class AvgPool2<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class SiLU<float>;
template class SiLU<double>;
template class Linear<float>;
template class Linear<double>;
template void concat_channels(const Tens<float>&, const Tens<float>&, Tens<float>&);
template void concat_channels(const Tens<double>&, const Tens<double>&, Tens<double>&);
template void split_channels(const Tens<float>&, Tens<float>&, Tens<float>&);
template void split_channels(const Tens<double>&, Tens<double>&, Tens<double>&);

}  // namespace ensembledown::nn
