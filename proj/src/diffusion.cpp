#include "ensembledown/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "ensembledown/errors.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/nn/adam.hpp"

namespace ensembledown {

// ---------------------------------------------------------------- forward

template <typename T>
std::vector<T> forward_perturb(const NoiseSchedule& sched, int t, const std::vector<T>& x0,
                               const std::vector<T>& noise) {
    if (t < 0 || t > sched.T) throw ConfigError("forward_perturb: t outside [0, T]");
    if (x0.size() != noise.size())
        throw DataError("forward_perturb: noise shape must match state shape");
    const T a = static_cast<T>(sched.alpha[t]);
    const T s = static_cast<T>(sched.sigma[t]);
    std::vector<T> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * noise[i];
    return out;
}

template std::vector<float> forward_perturb(const NoiseSchedule&, int, const std::vector<float>&,
                                            const std::vector<float>&);
template std::vector<double> forward_perturb(const NoiseSchedule&, int,
                                             const std::vector<double>&,
                                             const std::vector<double>&);

// ---------------------------------------------------------------- dsm loss

template <typename T>
double dsm_loss_from_prediction(const nn::Tens<T>& eps_hat, const nn::Tens<T>& eps) {
    if (!eps_hat.same_shape(eps)) throw DataError("dsm_loss: prediction shape mismatch");
    if (eps.b == 0) throw DataError("dsm_loss: empty batch");
    double acc = 0.0;
    for (size_t i = 0; i < eps.size(); ++i) {
        const double d = static_cast<double>(eps_hat.v[i]) - static_cast<double>(eps.v[i]);
        acc += d * d;
    }
    return acc / eps.b;
}

template double dsm_loss_from_prediction(const nn::Tens<float>&, const nn::Tens<float>&);
template double dsm_loss_from_prediction(const nn::Tens<double>&, const nn::Tens<double>&);

template <typename T>
void draw_dsm(const NoiseSchedule& sched, int batch, int sample_elems, RngStream& rng,
              std::vector<int>& t, nn::Tens<T>& eps) {
    t.resize(batch);
    eps.resize(batch, 1, 1, sample_elems);  // shape only carries the element count
    for (int s = 0; s < batch; ++s) {
        t[s] = 1 + static_cast<int>(rng.uniform_index(static_cast<size_t>(sched.T)));
        T* dst = eps.sample(s);
        for (int j = 0; j < sample_elems; ++j) dst[j] = static_cast<T>(rng.normal());
    }
}

template void draw_dsm(const NoiseSchedule&, int, int, RngStream&, std::vector<int>&,
                       nn::Tens<float>&);
template void draw_dsm(const NoiseSchedule&, int, int, RngStream&, std::vector<int>&,
                       nn::Tens<double>&);

template <typename T>
double dsm_loss_fixed(nn::DenoiserNet<T>& net, const NoiseSchedule& sched,
                      const nn::Tens<T>& x0, const std::vector<int>& t,
                      const nn::Tens<T>& eps, bool do_backward) {
    if (static_cast<int>(t.size()) != x0.b)
        throw DataError("dsm_loss: one step per sample required");
    if (eps.size() != x0.size()) throw DataError("dsm_loss: noise shape mismatch");
    const auto& cfg = net.config();
    nn::Tens<T> xt(x0.b, cfg.channels, cfg.ny, cfg.nx);
    for (int s = 0; s < x0.b; ++s) {
        if (t[s] < 1 || t[s] > sched.T) throw ConfigError("dsm_loss: t outside [1, T]");
        const T a = static_cast<T>(sched.alpha[t[s]]);
        const T sg = static_cast<T>(sched.sigma[t[s]]);
        const T* xs = x0.sample(s);
        const T* es = eps.v.data() + static_cast<size_t>(s) * x0.sample_size();
        T* dst = xt.sample(s);
        for (size_t j = 0; j < x0.sample_size(); ++j) dst[j] = a * xs[j] + sg * es[j];
    }
    nn::Tens<T> eps_hat;
    net.forward(xt, t, eps_hat);
    double acc = 0.0;
    for (int s = 0; s < x0.b; ++s) {
        const T* ph = eps_hat.sample(s);
        const T* es = eps.v.data() + static_cast<size_t>(s) * x0.sample_size();
        for (size_t j = 0; j < x0.sample_size(); ++j) {
            const double d = static_cast<double>(ph[j]) - static_cast<double>(es[j]);
            if (!std::isfinite(d))
                throw NumericError("dsm_loss: non-finite model output at sample " +
                                   std::to_string(s) + ", step t=" + std::to_string(t[s]));
            acc += d * d;
        }
    }
    const double loss = acc / x0.b;
    if (do_backward) {
        nn::Tens<T> grad(eps_hat.b, eps_hat.c, eps_hat.h, eps_hat.w);
        const T scale = static_cast<T>(2.0 / x0.b);
        for (size_t i = 0; i < grad.size(); ++i)
            grad.v[i] = scale * (eps_hat.v[i] - eps.v[i]);
        net.backward(grad);
    }
    return loss;
}

template double dsm_loss_fixed(nn::DenoiserNet<float>&, const NoiseSchedule&,
                               const nn::Tens<float>&, const std::vector<int>&,
                               const nn::Tens<float>&, bool);
template double dsm_loss_fixed(nn::DenoiserNet<double>&, const NoiseSchedule&,
                               const nn::Tens<double>&, const std::vector<int>&,
                               const nn::Tens<double>&, bool);

template <typename T>
double dsm_loss(nn::DenoiserNet<T>& net, const NoiseSchedule& sched, const nn::Tens<T>& x0,
                RngStream& rng) {
    std::vector<int> t;
    nn::Tens<T> eps;
    draw_dsm(sched, x0.b, static_cast<int>(x0.sample_size()), rng, t, eps);
    return dsm_loss_fixed(net, sched, x0, t, eps, false);
}

template double dsm_loss(nn::DenoiserNet<float>&, const NoiseSchedule&, const nn::Tens<float>&,
                         RngStream&);
template double dsm_loss(nn::DenoiserNet<double>&, const NoiseSchedule&,
                         const nn::Tens<double>&, RngStream&);

// ------------------------------------------------------------------ oracle

struct GaussianScoreOracle::Impl {
    int dim = 0;
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    const NoiseSchedule* sched = nullptr;
    // one Cholesky factor of (alpha_t^2 Sigma + sigma_t^2 I) per touched t
    mutable std::vector<std::unique_ptr<Eigen::LLT<Eigen::MatrixXd>>> cache;

    const Eigen::LLT<Eigen::MatrixXd>& factor(int t) const {
        if (t < 0 || t > sched->T) throw ConfigError("oracle: t outside [0, T]");
        if (!cache[t]) {
            const double a = sched->alpha[t];
            const double s = sched->sigma[t];
            Eigen::MatrixXd m = a * a * sigma;
            m.diagonal().array() += s * s;
            auto llt = std::make_unique<Eigen::LLT<Eigen::MatrixXd>>(m);
            if (llt->info() != Eigen::Success)
                throw NumericError("oracle: perturbed covariance not positive definite");
            cache[t] = std::move(llt);
        }
        return *cache[t];
    }
};

GaussianScoreOracle::GaussianScoreOracle(std::vector<double> mu, std::vector<double> sigma,
                                         const NoiseSchedule& sched)
    : impl_(std::make_unique<Impl>()) {
    const int d = static_cast<int>(mu.size());
    if (d < 1 || d > 64) throw ConfigError("oracle: dimension must lie in [1, 64]");
    if (sigma.size() != static_cast<size_t>(d) * d)
        throw DataError("oracle: covariance must be dim x dim");
    impl_->dim = d;
    impl_->mu = Eigen::Map<Eigen::VectorXd>(mu.data(), d);
    impl_->sigma = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                            Eigen::RowMajor>>(sigma.data(), d, d);
    if (!impl_->sigma.isApprox(impl_->sigma.transpose(), 1e-12))
        throw DataError("oracle: covariance must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(impl_->sigma);
    if (llt.info() != Eigen::Success)
        throw NumericError("oracle: covariance not positive definite");
    sched.validate();
    impl_->sched = &sched;
    impl_->cache.resize(sched.T + 1);
}

GaussianScoreOracle::~GaussianScoreOracle() = default;

int GaussianScoreOracle::dim() const { return impl_->dim; }

void GaussianScoreOracle::predict_noise(const std::vector<double>& x, const std::vector<int>& t,
                                        int n, std::vector<double>& eps) {
    const int d = impl_->dim;
    if (x.size() != static_cast<size_t>(n) * d) throw DataError("oracle: batch size mismatch");
    eps.resize(x.size());
    for (int s = 0; s < n; ++s) {
        const auto& llt = impl_->factor(t[s]);
        const double a = impl_->sched->alpha[t[s]];
        const double sg = impl_->sched->sigma[t[s]];
        Eigen::Map<const Eigen::VectorXd> xs(x.data() + static_cast<size_t>(s) * d, d);
        Eigen::VectorXd v = xs - a * impl_->mu;
        Eigen::VectorXd z = llt.solve(v);
        Eigen::Map<Eigen::VectorXd>(eps.data() + static_cast<size_t>(s) * d, d) = sg * z;
    }
}

std::vector<double> GaussianScoreOracle::score(const std::vector<double>& x, int t) const {
    const int d = impl_->dim;
    if (x.size() != static_cast<size_t>(d)) throw DataError("oracle: state size mismatch");
    const auto& llt = impl_->factor(t);
    const double a = impl_->sched->alpha[t];
    Eigen::Map<const Eigen::VectorXd> xs(x.data(), d);
    Eigen::VectorXd v = xs - a * impl_->mu;
    Eigen::VectorXd z = -llt.solve(v);
    return std::vector<double>(z.data(), z.data() + d);
}

std::vector<double> GaussianScoreOracle::sample_data(RngStream& rng) const {
    const int d = impl_->dim;
    // factor(0) is the Cholesky decomposition of Sigma itself
    const Eigen::MatrixXd L = impl_->factor(0).matrixL();
    Eigen::VectorXd z(d);
    for (int i = 0; i < d; ++i) z[i] = rng.normal();
    Eigen::VectorXd x = impl_->mu + L * z;
    return std::vector<double>(x.data(), x.data() + d);
}

std::vector<double> GaussianScoreOracle::mean() const {
    return std::vector<double>(impl_->mu.data(), impl_->mu.data() + impl_->dim);
}

// ----------------------------------------------------------- reverse chain

void reverse_step(ScoreSource& src, const NoiseSchedule& sched, int t, std::vector<double>& x,
                  int n, const std::vector<double>& noise, double x0_clip) {
    if (t < 1 || t > sched.T) throw ConfigError("reverse_step: t outside [1, T]");
    const size_t d = static_cast<size_t>(src.dim());
    if (x.size() != d * n) throw DataError("reverse_step: batch size mismatch");
    const ReverseCoeffs rc = posterior_coeffs(sched, t);
    const double a = sched.alpha[t];
    const double sg = sched.sigma[t];
    std::vector<int> ts(n, t);
    std::vector<double> eps;
    src.predict_noise(x, ts, n, eps);
    const bool stochastic = rc.post_std > 0.0;
    if (stochastic && noise.size() != x.size())
        throw DataError("reverse_step: noise batch size mismatch");
    for (size_t i = 0; i < x.size(); ++i) {
        double x0_hat = (x[i] - sg * eps[i]) / a;
        if (x0_clip > 0.0) x0_hat = std::clamp(x0_hat, -x0_clip, x0_clip);
        double next = rc.mean_x0 * x0_hat + rc.mean_xt * x[i];
        if (stochastic) next += rc.post_std * noise[i];
        if (!std::isfinite(next))
            throw NumericError("reverse_step: non-finite state at step t=" + std::to_string(t));
        x[i] = next;
    }
}

void run_reverse_chain(ScoreSource& src, const NoiseSchedule& sched, int t_start,
                       std::vector<double>& x, int n, std::vector<RngStream>& streams,
                       double x0_clip) {
    if (t_start < 0 || t_start > sched.T)
        throw ConfigError("reverse_chain: t_start outside [0, T]");
    if (static_cast<int>(streams.size()) != n)
        throw DataError("reverse_chain: one RNG stream per member required");
    const size_t d = static_cast<size_t>(src.dim());
    std::vector<double> noise(d * static_cast<size_t>(n));
    for (int t = t_start; t >= 1; --t) {
        const bool stochastic = posterior_coeffs(sched, t).post_std > 0.0;
        if (stochastic)
            for (int m = 0; m < n; ++m) {
                double* dst = noise.data() + static_cast<size_t>(m) * d;
                for (size_t j = 0; j < d; ++j) dst[j] = streams[m].normal();
            }
        reverse_step(src, sched, t, x, n, noise, x0_clip);
    }
}

// ------------------------------------------------------------------- model

void DiffusionModel::validate() const {
    if (variables.empty() || levels.empty()) throw ConfigError("model: empty channel layout");
    const int ch = static_cast<int>(variables.size() * levels.size());
    if (arch.channels != ch)
        throw ConfigError("model: architecture channels != variables x levels");
    schedule.validate();
    if (schedule.T != arch.schedule_T)
        throw ConfigError("model: schedule length != architecture schedule_T");
    stats.validate();
    for (const auto& var : variables)
        for (const auto& lev : levels)
            if (stats.find(channel_name(var, lev)) < 0)
                throw DataError("model: missing normalization stats for " +
                                channel_name(var, lev));
}

NetScoreSource::NetScoreSource(DiffusionModel& model, int max_batch)
    : model_(model), max_batch_(max_batch) {
    if (max_batch < 1) throw ConfigError("score source: max_batch must be >= 1");
    model.validate();
}

int NetScoreSource::dim() const {
    return model_.arch.channels * model_.arch.ny * model_.arch.nx;
}

void NetScoreSource::predict_noise(const std::vector<double>& x, const std::vector<int>& t,
                                   int n, std::vector<double>& eps) {
    const size_t d = static_cast<size_t>(dim());
    if (x.size() != d * n) throw DataError("score source: batch size mismatch");
    eps.resize(x.size());
    // One net evaluation per sample. Batched evaluation is faster, but the
    // matrix backend's summation order depends on total matrix shape, so a
    // member's values would depend on which batch it happened to share —
    // breaking bit-exact member isolation. Per-sample calls make every
    // member a pure function of (weights, state, t).
    for (int off = 0; off < n; ++off) {
        xf_.resize(1, model_.arch.channels, model_.arch.ny, model_.arch.nx);
        const double* src = x.data() + static_cast<size_t>(off) * d;
        for (size_t i = 0; i < d; ++i) xf_.v[i] = static_cast<float>(src[i]);
        std::vector<int> ts(1, t[off]);
        model_.net.forward(xf_, ts, ef_);
        double* dst = eps.data() + static_cast<size_t>(off) * d;
        for (size_t i = 0; i < d; ++i) dst[i] = static_cast<double>(ef_.v[i]);
    }
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train: learning rate must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch < 1) throw ConfigError("train: batch size must be >= 1");
    if (holdout_frac <= 0.0 || holdout_frac >= 0.5)
        throw ConfigError("train: holdout fraction must lie in (0, 0.5)");
    if (cosine_period_epochs <= 0.0) throw ConfigError("train: cosine period must be > 0");
    if (lr_floor_frac < 0.0 || lr_floor_frac > 1.0)
        throw ConfigError("train: lr floor fraction must lie in [0, 1]");
}

TrainStats train_prior(DiffusionModel& model, const std::vector<float>& samples, int n,
                       const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    const size_t d = static_cast<size_t>(model.arch.channels) * model.arch.ny * model.arch.nx;
    if (n < 100) throw DataError("train: need at least 100 samples");
    if (samples.size() != d * static_cast<size_t>(n))
        throw DataError("train: sample block size mismatch");

    const int n_hold = std::max(1, static_cast<int>(std::lround(n * cfg.holdout_frac)));
    const int n_train = n - n_hold;

    // fixed held-out evaluation draws: the per-epoch comparison is then a
    // low-variance paired measurement
    nn::Tens<float> hold_x0(n_hold, model.arch.channels, model.arch.ny, model.arch.nx);
    std::copy_n(samples.data() + static_cast<size_t>(n_train) * d, d * n_hold,
                hold_x0.v.data());
    RngStream hold_rng(derive_seed(cfg.seed, "holdout-draws"));
    std::vector<int> hold_t;
    nn::Tens<float> hold_eps;
    draw_dsm(model.schedule, n_hold, static_cast<int>(d), hold_rng, hold_t, hold_eps);

    auto refs = model.net.params();
    nn::Adam<float> opt(refs, cfg.lr);
    opt.set_cosine_schedule(cfg.cosine_period_epochs, cfg.lr_floor_frac);

    TrainStats stats;
    const int batches = (n_train + cfg.batch - 1) / cfg.batch;
    std::vector<size_t> order(n_train);
    std::iota(order.begin(), order.end(), size_t(0));
    nn::Tens<float> x0;
    std::vector<int> t;
    nn::Tens<float> eps;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngStream epoch_rng(derive_seed(derive_seed(cfg.seed, "epoch"), epoch));
        for (size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[epoch_rng.uniform_index(i)]);
        double epoch_loss = 0.0;
        for (int b = 0; b < batches; ++b) {
            opt.begin_epoch(epoch + static_cast<double>(b) / batches);
            const int lo = b * cfg.batch;
            const int m = std::min(cfg.batch, n_train - lo);
            x0.resize(m, model.arch.channels, model.arch.ny, model.arch.nx);
            for (int s = 0; s < m; ++s)
                std::copy_n(samples.data() + order[lo + s] * d, d, x0.sample(s));
            draw_dsm(model.schedule, m, static_cast<int>(d), epoch_rng, t, eps);
            nn::zero_grads(refs);
            double loss;
            try {
                loss = dsm_loss_fixed(model.net, model.schedule, x0, t, eps, true);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + "; training diverged, last finite epoch " +
                                   std::to_string(epoch));
            }
            if (!std::isfinite(loss))
                throw NumericError("train: loss diverged at epoch " + std::to_string(epoch + 1) +
                                   ", last finite epoch " + std::to_string(epoch));
            opt.step();
            epoch_loss += loss * m;
        }
        stats.train_loss.push_back(epoch_loss / n_train);
        stats.holdout_loss.push_back(
            dsm_loss_fixed(model.net, model.schedule, hold_x0, hold_t, hold_eps, false));
        stats.epochs_run = epoch + 1;
    }
    return stats;
}

// ---------------------------------------------------------------- sampling

EnsembleSet sample_prior(DiffusionModel& model, int n, uint64_t seed, int chunk) {
    model.validate();
    if (n < 1) throw ConfigError("sample_prior: need n >= 1");
    if (chunk < 1) throw ConfigError("sample_prior: chunk must be >= 1");
    FieldTensor proto = make_field(model.variables, model.levels, model.arch.ny,
                                   model.arch.nx, model.grid_spacing_km);
    const uint64_t member_root = derive_seed(seed, "member");
    std::vector<uint64_t> seeds(n);
    for (int m = 0; m < n; ++m) seeds[m] = derive_seed(member_root, m);
    EnsembleSet out = make_ensemble(proto, seeds);

    NetScoreSource src(model, std::min(chunk, 256));
    const size_t d = static_cast<size_t>(src.dim());
    const size_t plane = proto.plane_size();
    for (int lo = 0; lo < n; lo += chunk) {
        const int m = std::min(chunk, n - lo);
        std::vector<RngStream> streams;
        streams.reserve(m);
        for (int i = 0; i < m; ++i) streams.emplace_back(seeds[lo + i]);
        std::vector<double> x(d * static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) {
            double* dst = x.data() + static_cast<size_t>(i) * d;
            for (size_t j = 0; j < d; ++j) dst[j] = streams[i].normal();
        }
        run_reverse_chain(src, model.schedule, model.schedule.T, x, m, streams,
                          kNormalizedX0Clip);
        for (int i = 0; i < m; ++i) {
            float* dst = out.member(lo + i);
            const double* sx = x.data() + static_cast<size_t>(i) * d;
            for (size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(sx[j]);
            denormalize_block(dst, model.variables, model.levels, plane, model.stats);
        }
    }
    out.validate();
    return out;
}

// -------------------------------------------------------------- checkpoint

void save_checkpoint(DiffusionModel& model, const std::string& dir) {
    model.validate();
    ArrayBundle bundle;
    for (auto& p : model.net.params()) {
        NamedArray arr;
        arr.name = p.name;
        arr.shape = {p.value->size()};
        arr.data = *p.value;
        bundle.arrays.push_back(std::move(arr));
    }
    bundle.attrs["checkpoint_kind"] = "denoiser";
    bundle.attrs["arch"] = model.arch.to_json();
    bundle.attrs["schedule_kind"] = model.schedule_kind;
    nlohmann::json norm = {{"variables", model.variables},
                           {"levels", model.levels},
                           {"channel_names", model.stats.channel_names},
                           {"mean", model.stats.mean},
                           {"std", model.stats.std_dev},
                           {"grid_spacing_km", model.grid_spacing_km}};
    bundle.attrs["norm"] = norm.dump();
    write_gridpack(dir, bundle);
}

DiffusionModel load_checkpoint(const std::string& dir) {
    ArrayBundle bundle = read_bundle(dir);
    auto kind_it = bundle.attrs.find("checkpoint_kind");
    if (kind_it == bundle.attrs.end() || kind_it->second != "denoiser")
        throw DataError("checkpoint: not a denoiser checkpoint");
    DiffusionModel model;
    model.arch = nn::DenoiserConfig::from_json(bundle.attrs.at("arch"));
    model.schedule_kind = bundle.attrs.at("schedule_kind");
    model.schedule = make_schedule(model.arch.schedule_T, model.schedule_kind);
    nlohmann::json norm = nlohmann::json::parse(bundle.attrs.at("norm"));
    model.variables = norm.at("variables").get<std::vector<std::string>>();
    model.levels = norm.at("levels").get<std::vector<std::string>>();
    model.stats.channel_names = norm.at("channel_names").get<std::vector<std::string>>();
    model.stats.mean = norm.at("mean").get<std::vector<double>>();
    model.stats.std_dev = norm.at("std").get<std::vector<double>>();
    model.grid_spacing_km = norm.at("grid_spacing_km").get<double>();
    model.net.init(model.arch, 0);
    for (auto& p : model.net.params()) {
        const NamedArray& arr = bundle.require(p.name);
        if (arr.data.size() != p.value->size())
            throw DataError("checkpoint: parameter size mismatch for " + p.name);
        *p.value = arr.data;
    }
    model.validate();
    return model;
}

}  // namespace ensembledown
