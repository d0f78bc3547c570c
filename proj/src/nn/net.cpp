#include "ensembledown/nn/net.hpp"

#include <cmath>

#include <json.hpp>

#include "ensembledown/errors.hpp"

namespace ensembledown::nn {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ------------------------------------------------------------------ helpers

template <typename T>
std::vector<T> make_coord_channels(int ny, int nx) {
    std::vector<T> out(static_cast<size_t>(kCoordChannels) * ny * nx);
    const size_t plane = static_cast<size_t>(ny) * nx;
    int ch = 0;
    for (int f = 1; f <= 2; ++f) {
        for (int mode = 0; mode < 4; ++mode) {
            T* dst = out.data() + (ch++) * plane;
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x) {
                    double phase = (mode < 2)
                                       ? 2.0 * kPi * f * static_cast<double>(y) / ny
                                       : 2.0 * kPi * f * static_cast<double>(x) / nx;
                    double v = (mode % 2 == 0) ? std::sin(phase) : std::cos(phase);
                    dst[static_cast<size_t>(y) * nx + x] = static_cast<T>(v);
                }
        }
    }
    return out;
}

template <typename T>
void sinusoidal_embedding(const std::vector<int>& t, int dim, double t_scale, Tens<T>& out) {
    if (dim % 2 != 0) throw NumericError("sinusoidal_embedding: dim must be even");
    const int half = dim / 2;
    out.resize(static_cast<int>(t.size()), dim, 1, 1);
    for (size_t s = 0; s < t.size(); ++s) {
        const double tt = static_cast<double>(t[s]) * t_scale;
        for (int i = 0; i < half; ++i) {
            const double omega = std::exp(-std::log(10000.0) * i / half);
            out.v[s * dim + 2 * i] = static_cast<T>(std::sin(tt * omega));
            out.v[s * dim + 2 * i + 1] = static_cast<T>(std::cos(tt * omega));
        }
    }
}

// ----------------------------------------------------------------- ResBlock

template <typename T>
void ResBlock<T>::init(int c_in, int c_out, int time_hidden, RngStream& rng) {
    c_in_ = c_in;
    c_out_ = c_out;
    time_hidden_ = time_hidden;
    gn1_.init(c_in, norm_groups_for(c_in));
    conv1_.init(c_in, c_out, rng);
    if (time_hidden > 0) proj_.init(time_hidden, c_out, rng);
    gn2_.init(c_out, norm_groups_for(c_out));
    conv2_.init(c_out, c_out, rng);
    has_skip_ = (c_in != c_out);
    if (has_skip_) skip_.init(c_in, c_out, rng);
}

template <typename T>
void ResBlock<T>::forward(const Tens<T>& x, const Tens<T>* e, Tens<T>& out) {
    gn1_.forward(x, h1_);
    act1_.forward(h1_, a1_);
    conv1_.forward(a1_, c1_);
    if (e) {
        if (time_hidden_ == 0) throw NumericError("resblock: unexpected time input");
        proj_in_ = *e;
        proj_.forward(proj_in_, proj_out_);
        const size_t plane = c1_.plane();
        for (int s = 0; s < c1_.b; ++s)
            for (int c = 0; c < c1_.c; ++c) {
                const T bias = proj_out_.v[static_cast<size_t>(s) * c_out_ + c];
                T* dst = c1_.chan(s, c);
                for (size_t i = 0; i < plane; ++i) dst[i] += bias;
            }
    }
    gn2_.forward(c1_, h2_);
    act2_.forward(h2_, a2_);
    conv2_.forward(a2_, c2_);
    if (has_skip_) {
        skip_.forward(x, r_);
    } else {
        r_ = x;
    }
    out.resize(x.b, c_out_, x.h, x.w);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = r_.v[i] + c2_.v[i];
}

template <typename T>
void ResBlock<T>::backward(const Tens<T>& grad_out, Tens<T>& grad_x, Tens<T>* grad_e) {
    Tens<T> g_a2, g_h2, g_c1, g_a1, g_h1, g_main;
    conv2_.backward(grad_out, g_a2);
    act2_.backward(g_a2, g_h2);
    gn2_.backward(g_h2, g_c1);
    if (time_hidden_ > 0 && grad_e) {
        // the bias enters every pixel of its channel: reduce over the plane
        Tens<T> g_proj(g_c1.b, c_out_, 1, 1);
        const size_t plane = g_c1.plane();
        for (int s = 0; s < g_c1.b; ++s)
            for (int c = 0; c < c_out_; ++c) {
                const T* src = g_c1.chan(s, c);
                T acc = T(0);
                for (size_t i = 0; i < plane; ++i) acc += src[i];
                g_proj.v[static_cast<size_t>(s) * c_out_ + c] = acc;
            }
        Tens<T> g_e_local;
        proj_.backward(g_proj, g_e_local);
        for (size_t i = 0; i < grad_e->size(); ++i) grad_e->v[i] += g_e_local.v[i];
    }
    conv1_.backward(g_c1, g_a1);
    act1_.backward(g_a1, g_h1);
    gn1_.backward(g_h1, g_main);
    grad_x.resize(g_main.b, g_main.c, g_main.h, g_main.w);
    if (has_skip_) {
        Tens<T> g_skip;
        skip_.backward(grad_out, g_skip);
        for (size_t i = 0; i < grad_x.size(); ++i) grad_x.v[i] = g_main.v[i] + g_skip.v[i];
    } else {
        for (size_t i = 0; i < grad_x.size(); ++i) grad_x.v[i] = g_main.v[i] + grad_out.v[i];
    }
}

template <typename T>
void ResBlock<T>::params(ParamRefs<T>& out, const std::string& prefix) {
    gn1_.params(out, prefix + ".gn1");
    conv1_.params(out, prefix + ".conv1");
    if (time_hidden_ > 0) proj_.params(out, prefix + ".proj");
    gn2_.params(out, prefix + ".gn2");
    conv2_.params(out, prefix + ".conv2");
    if (has_skip_) skip_.params(out, prefix + ".skip");
}

// ------------------------------------------------------------ DenoiserConfig

void DenoiserConfig::validate() const {
    if (channels < 1) throw ConfigError("denoiser: channels must be >= 1");
    if (ny < 4 || nx < 4) throw ConfigError("denoiser: grid too small");
    if (width < 4) throw ConfigError("denoiser: width must be >= 4");
    if (depth < 0 || depth > 3) throw ConfigError("denoiser: depth must lie in [0, 3]");
    const int div = 1 << depth;
    if (ny % div != 0 || nx % div != 0)
        throw ConfigError("denoiser: grid dims must be divisible by 2^depth");
    const int td = time_dim == 0 ? 2 * width : time_dim;
    if (td % 2 != 0) throw ConfigError("denoiser: time_dim must be even");
    if (schedule_T < 1) throw ConfigError("denoiser: schedule_T must be >= 1");
}

std::string DenoiserConfig::to_json() const {
    nlohmann::json j = {
        {"kind", "denoiser"},     {"channels", channels}, {"ny", ny},
        {"nx", nx},               {"width", width},       {"depth", depth},
        {"time_dim", time_dim},   {"schedule_T", schedule_T},
        {"coords", coords},       {"pos_embed", pos_embed},
    };
    return j.dump();
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("kind", "") != "denoiser")
        throw DataError("denoiser config: wrong or missing kind");
    DenoiserConfig c;
    c.channels = j.at("channels").get<int>();
    c.ny = j.at("ny").get<int>();
    c.nx = j.at("nx").get<int>();
    c.width = j.at("width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.schedule_T = j.at("schedule_T").get<int>();
    c.coords = j.at("coords").get<bool>();
    c.pos_embed = j.at("pos_embed").get<bool>();
    c.validate();
    return c;
}

// -------------------------------------------------------------- DenoiserNet

template <typename T>
int DenoiserNet<T>::level_width(int level) const {
    return config_.width * (level == 0 ? 1 : 2);
}

template <typename T>
void DenoiserNet<T>::init(const DenoiserConfig& config, uint64_t seed) {
    config.validate();
    config_ = config;
    if (config_.time_dim == 0) config_.time_dim = 2 * config_.width;
    time_hidden_ = 2 * config_.time_dim;
    RngStream rng(derive_seed(seed, "denoiser-init"));

    const int in_ch = config_.channels + (config_.coords ? kCoordChannels : 0);
    in_conv_.init(in_ch, config_.width, rng);
    if (config_.coords) coords_ = make_coord_channels<T>(config_.ny, config_.nx);
    if (config_.pos_embed) {
        pos_.assign(static_cast<size_t>(config_.width) * config_.ny * config_.nx, T(0));
        gpos_.assign(pos_.size(), T(0));
    }
    time_lin1_.init(config_.time_dim, time_hidden_, rng);
    time_lin2_.init(time_hidden_, time_hidden_, rng);

    const int depth = config_.depth;
    enc_.resize(depth + 1);
    pools_.resize(depth);
    enc_[0].init(config_.width, level_width(0), time_hidden_, rng);
    for (int i = 1; i <= depth; ++i)
        enc_[i].init(level_width(i - 1), level_width(i), time_hidden_, rng);
    mid_.init(level_width(depth), level_width(depth), time_hidden_, rng);
    ups_.resize(depth);
    dec_.resize(depth);
    for (int i = depth; i >= 1; --i) {
        ups_[i - 1].init(level_width(i), level_width(i - 1), rng);
        dec_[i - 1].init(2 * level_width(i - 1), level_width(i - 1), time_hidden_, rng);
    }
    out_norm_.init(config_.width, norm_groups_for(config_.width));
    out_conv_.init(config_.width, config_.channels, rng, /*zero_init=*/true);
}

template <typename T>
void DenoiserNet<T>::forward(const Tens<T>& x, const std::vector<int>& t, Tens<T>& eps) {
    if (x.c != config_.channels || x.h != config_.ny || x.w != config_.nx)
        throw NumericError("denoiser: input shape mismatch");
    if (static_cast<int>(t.size()) != x.b)
        throw NumericError("denoiser: one schedule step per sample required");
    const int B = x.b;
    const size_t plane = x.plane();

    if (config_.coords) {
        xin_.resize(B, x.c + kCoordChannels, x.h, x.w);
        for (int s = 0; s < B; ++s) {
            std::copy_n(x.sample(s), x.sample_size(), xin_.sample(s));
            std::copy_n(coords_.data(), coords_.size(), xin_.sample(s) + x.sample_size());
        }
    } else {
        xin_ = x;
    }
    in_conv_.forward(xin_, h0_);
    if (config_.pos_embed)
        for (int s = 0; s < B; ++s) {
            T* dst = h0_.sample(s);
            for (size_t i = 0; i < pos_.size(); ++i) dst[i] += pos_[i];
        }

    sinusoidal_embedding(t, config_.time_dim, 1000.0 / config_.schedule_T, e0_);
    time_lin1_.forward(e0_, e1_);
    time_act_.forward(e1_, e2_);
    time_lin2_.forward(e2_, e_);

    const int depth = config_.depth;
    skips_.resize(depth + 1);
    downs_.resize(std::max(depth, 1));
    enc_[0].forward(h0_, &e_, skips_[0]);
    for (int i = 1; i <= depth; ++i) {
        pools_[i - 1].forward(skips_[i - 1], downs_[i - 1]);
        enc_[i].forward(downs_[i - 1], &e_, skips_[i]);
    }
    mid_.forward(skips_[depth], &e_, mid_out_);

    upouts_.resize(std::max(depth, 1));
    cats_.resize(std::max(depth, 1));
    if (static_cast<int>(dec_outs_cache_.size()) != std::max(depth, 1))
        dec_outs_cache_.resize(std::max(depth, 1));
    const Tens<T>* cur = &mid_out_;
    for (int i = depth; i >= 1; --i) {
        ups_[i - 1].forward(*cur, upouts_[i - 1]);
        concat_channels(upouts_[i - 1], skips_[i - 1], cats_[i - 1]);
        dec_[i - 1].forward(cats_[i - 1], &e_, dec_outs_cache_[i - 1]);
        cur = &dec_outs_cache_[i - 1];
    }
    out_norm_.forward(*cur, head_norm_);
    out_act_.forward(head_norm_, head_act_);
    out_conv_.forward(head_act_, eps);
    (void)plane;
}

template <typename T>
void DenoiserNet<T>::backward(const Tens<T>& grad_eps) {
    const int depth = config_.depth;
    const int B = grad_eps.b;
    Tens<T> g_head_act, g_head_norm, g_cur;
    out_conv_.backward(grad_eps, g_head_act);
    out_act_.backward(g_head_act, g_head_norm);
    out_norm_.backward(g_head_norm, g_cur);

    Tens<T> ge(B, time_hidden_, 1, 1);
    std::vector<Tens<T>> g_skips(depth + 1);
    for (int i = 0; i <= depth; ++i)
        g_skips[i].resize(skips_[i].b, skips_[i].c, skips_[i].h, skips_[i].w);

    Tens<T> g_mid_out;
    if (depth == 0) {
        g_mid_out = g_cur;
    } else {
        // walk the decoder back up: g_cur starts at dec_[0]'s output
        for (int i = 1; i <= depth; ++i) {
            Tens<T> g_cat, g_up, g_below;
            dec_[i - 1].backward(g_cur, g_cat, &ge);
            g_up.resize(upouts_[i - 1].b, upouts_[i - 1].c, upouts_[i - 1].h,
                        upouts_[i - 1].w);
            Tens<T> g_skip_part(skips_[i - 1].b, skips_[i - 1].c, skips_[i - 1].h,
                                skips_[i - 1].w);
            split_channels(g_cat, g_up, g_skip_part);
            for (size_t j = 0; j < g_skip_part.size(); ++j)
                g_skips[i - 1].v[j] += g_skip_part.v[j];
            ups_[i - 1].backward(g_up, g_below);
            if (i < depth)
                g_cur = g_below;
            else
                g_mid_out = g_below;
        }
    }

    Tens<T> g_sdepth;
    mid_.backward(g_mid_out, g_sdepth, &ge);
    for (size_t j = 0; j < g_sdepth.size(); ++j) g_skips[depth].v[j] += g_sdepth.v[j];

    for (int i = depth; i >= 1; --i) {
        Tens<T> g_down, g_pool_in;
        enc_[i].backward(g_skips[i], g_down, &ge);
        pools_[i - 1].backward(g_down, g_pool_in);
        for (size_t j = 0; j < g_pool_in.size(); ++j) g_skips[i - 1].v[j] += g_pool_in.v[j];
    }
    Tens<T> g_h0, g_xin;
    enc_[0].backward(g_skips[0], g_h0, &ge);
    if (config_.pos_embed)
        for (int s = 0; s < B; ++s) {
            const T* src = g_h0.sample(s);
            for (size_t i = 0; i < gpos_.size(); ++i) gpos_[i] += src[i];
        }
    in_conv_.backward(g_h0, g_xin);

    Tens<T> g_e2, g_e1, g_e0;
    time_lin2_.backward(ge, g_e2);
    time_act_.backward(g_e2, g_e1);
    time_lin1_.backward(g_e1, g_e0);
}

template <typename T>
ParamRefs<T> DenoiserNet<T>::params() {
    ParamRefs<T> out;
    in_conv_.params(out, "in_conv");
    if (config_.pos_embed) out.push_back({"pos_embed", &pos_, &gpos_});
    time_lin1_.params(out, "time.lin1");
    time_lin2_.params(out, "time.lin2");
    for (size_t i = 0; i < enc_.size(); ++i)
        enc_[i].params(out, "enc" + std::to_string(i));
    mid_.params(out, "mid");
    for (size_t i = 0; i < ups_.size(); ++i) {
        ups_[i].params(out, "up" + std::to_string(i) + ".convt");
        dec_[i].params(out, "dec" + std::to_string(i));
    }
    out_norm_.params(out, "out.norm");
    out_conv_.params(out, "out.conv");
    return out;
}

template <typename T>
size_t DenoiserNet<T>::n_params() {
    return total_params(params());
}

// ---------------------------------------------------------- RegressionConfig

void RegressionConfig::validate() const {
    if (channels < 1) throw ConfigError("downscaler: channels must be >= 1");
    if (coarse_ny < 4 || coarse_nx < 4) throw ConfigError("downscaler: coarse grid too small");
    if (width < 4) throw ConfigError("downscaler: width must be >= 4");
    if (factor < 2 || (factor & (factor - 1)) != 0)
        throw ConfigError("downscaler: factor must be a power of two >= 2");
}

std::string RegressionConfig::to_json() const {
    nlohmann::json j = {
        {"kind", "regression"}, {"channels", channels}, {"coarse_ny", coarse_ny},
        {"coarse_nx", coarse_nx}, {"factor", factor},   {"width", width},
        {"coords", coords},     {"out_bias", out_bias},
    };
    return j.dump();
}

RegressionConfig RegressionConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("kind", "") != "regression")
        throw DataError("regression config: wrong or missing kind");
    RegressionConfig c;
    c.channels = j.at("channels").get<int>();
    c.coarse_ny = j.at("coarse_ny").get<int>();
    c.coarse_nx = j.at("coarse_nx").get<int>();
    c.factor = j.at("factor").get<int>();
    c.width = j.at("width").get<int>();
    c.coords = j.at("coords").get<bool>();
    c.out_bias = j.at("out_bias").get<bool>();
    c.validate();
    return c;
}

// ------------------------------------------------------------ RegressionNet

template <typename T>
void RegressionNet<T>::init(const RegressionConfig& config, uint64_t seed) {
    config.validate();
    config_ = config;
    n_stages_ = 0;
    for (int f = config.factor; f > 1; f /= 2) ++n_stages_;
    RngStream rng(derive_seed(seed, "regression-init"));

    const int in_ch = config_.channels + (config_.coords ? kCoordChannels : 0);
    if (config_.coords) coords_ = make_coord_channels<T>(config_.coarse_ny, config_.coarse_nx);
    in_conv_.init(in_ch, config_.width, rng);
    rb0_.init(config_.width, config_.width, 0, rng);
    ups_.resize(n_stages_);
    stage_rbs_.resize(n_stages_);
    for (int k = 0; k < n_stages_; ++k) {
        ups_[k].init(config_.width, config_.width, rng);
        stage_rbs_[k].init(config_.width, config_.width, 0, rng);
    }
    out_norm_.init(config_.width, norm_groups_for(config_.width));
    out_conv_.init(config_.width, config_.channels, rng, /*zero_init=*/true);
    if (config_.out_bias) {
        out_bias_.assign(
            static_cast<size_t>(config_.channels) * config_.fine_ny() * config_.fine_nx(),
            T(0));
        gout_bias_.assign(out_bias_.size(), T(0));
    }
}

template <typename T>
void RegressionNet<T>::forward(const Tens<T>& coarse, Tens<T>& fine) {
    if (coarse.c != config_.channels || coarse.h != config_.coarse_ny ||
        coarse.w != config_.coarse_nx)
        throw NumericError("downscaler: input shape mismatch");
    const int B = coarse.b;
    if (config_.coords) {
        xin_.resize(B, coarse.c + kCoordChannels, coarse.h, coarse.w);
        for (int s = 0; s < B; ++s) {
            std::copy_n(coarse.sample(s), coarse.sample_size(), xin_.sample(s));
            std::copy_n(coords_.data(), coords_.size(), xin_.sample(s) + coarse.sample_size());
        }
    } else {
        xin_ = coarse;
    }
    in_conv_.forward(xin_, h0_);
    rb0_.forward(h0_, nullptr, rb0_out_);
    stage_in_.resize(n_stages_);
    stage_out_.resize(n_stages_);
    const Tens<T>* cur = &rb0_out_;
    for (int k = 0; k < n_stages_; ++k) {
        ups_[k].forward(*cur, stage_in_[k]);
        stage_rbs_[k].forward(stage_in_[k], nullptr, stage_out_[k]);
        cur = &stage_out_[k];
    }
    out_norm_.forward(*cur, head_norm_);
    out_act_.forward(head_norm_, head_act_);
    out_conv_.forward(head_act_, fine);
    if (config_.out_bias)
        for (int s = 0; s < B; ++s) {
            T* dst = fine.sample(s);
            for (size_t i = 0; i < out_bias_.size(); ++i) dst[i] += out_bias_[i];
        }
}

template <typename T>
void RegressionNet<T>::backward(const Tens<T>& grad_fine) {
    const int B = grad_fine.b;
    if (config_.out_bias)
        for (int s = 0; s < B; ++s) {
            const T* src = grad_fine.sample(s);
            for (size_t i = 0; i < gout_bias_.size(); ++i) gout_bias_[i] += src[i];
        }
    Tens<T> g_head_act, g_head_norm, g_cur;
    out_conv_.backward(grad_fine, g_head_act);
    out_act_.backward(g_head_act, g_head_norm);
    out_norm_.backward(g_head_norm, g_cur);
    for (int k = n_stages_ - 1; k >= 0; --k) {
        Tens<T> g_stage_in;
        stage_rbs_[k].backward(g_cur, g_stage_in, nullptr);
        ups_[k].backward(g_stage_in, g_cur);
    }
    Tens<T> g_h0, g_xin;
    rb0_.backward(g_cur, g_h0, nullptr);
    in_conv_.backward(g_h0, g_xin);
}

template <typename T>
ParamRefs<T> RegressionNet<T>::params() {
    ParamRefs<T> out;
    in_conv_.params(out, "in_conv");
    rb0_.params(out, "rb0");
    for (int k = 0; k < n_stages_; ++k) {
        ups_[k].params(out, "up" + std::to_string(k) + ".convt");
        stage_rbs_[k].params(out, "stage" + std::to_string(k));
    }
    out_norm_.params(out, "out.norm");
    out_conv_.params(out, "out.conv");
    if (config_.out_bias) out.push_back({"out.bias_map", &out_bias_, &gout_bias_});
    return out;
}

template <typename T>
size_t RegressionNet<T>::n_params() {
    return total_params(params());
}

// explicit instantiation
template class ResBlock<float>;
template class ResBlock<double>;
template class DenoiserNet<float>;
template class DenoiserNet<double>;
template class RegressionNet<float>;
template class RegressionNet<double>;
template std::vector<float> make_coord_channels<float>(int, int);
template std::vector<double> make_coord_channels<double>(int, int);
template void sinusoidal_embedding(const std::vector<int>&, int, double, Tens<float>&);
template void sinusoidal_embedding(const std::vector<int>&, int, double, Tens<double>&);

}  // namespace ensembledown::nn
