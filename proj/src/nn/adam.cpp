#include "ensembledown/nn/adam.hpp"

#include <cmath>

#include "ensembledown/errors.hpp"

namespace ensembledown::nn {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

template <typename T>
Adam<T>::Adam(ParamRefs<T> refs, double lr, double beta1, double beta2, double eps)
    : refs_(std::move(refs)), lr0_(lr), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ConfigError("adam: learning rate must be > 0");
    m_.resize(refs_.size());
    v_.resize(refs_.size());
    for (size_t i = 0; i < refs_.size(); ++i) {
        m_[i].assign(refs_[i].value->size(), 0.0);
        v_[i].assign(refs_[i].value->size(), 0.0);
    }
}

template <typename T>
void Adam<T>::set_cosine_schedule(double period_epochs, double floor_frac) {
    if (period_epochs <= 0.0) throw ConfigError("adam: cosine period must be > 0");
    if (floor_frac < 0.0 || floor_frac > 1.0)
        throw ConfigError("adam: cosine floor fraction must lie in [0, 1]");
    period_epochs_ = period_epochs;
    floor_frac_ = floor_frac;
}

template <typename T>
void Adam<T>::begin_epoch(double epoch) {
    if (period_epochs_ <= 0.0) return;
    const double frac = std::fmod(epoch, period_epochs_) / period_epochs_;
    const double lo = floor_frac_ * lr0_;
    lr_ = lo + (lr0_ - lo) * 0.5 * (1.0 + std::cos(kPi * frac));
}

template <typename T>
void Adam<T>::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < refs_.size(); ++i) {
        std::vector<T>& p = *refs_[i].value;
        const std::vector<T>& g = *refs_[i].grad;
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
            const double update = lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
        }
    }
}

template <typename T>
void Adam<T>::zero_grads() {
    for (auto& r : refs_) std::fill(r.grad->begin(), r.grad->end(), T(0));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace ensembledown::nn
