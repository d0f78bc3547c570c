#include "ensembledown/downscaler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "ensembledown/errors.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/nn/adam.hpp"
#include "ensembledown/rng.hpp"

namespace ensembledown {

// ------------------------------------------------------------------- model

void DownscalerModel::validate() const {
    if (variables.empty() || levels.empty()) throw ConfigError("downscaler: empty layout");
    const int ch = static_cast<int>(variables.size() * levels.size());
    if (arch.channels != ch)
        throw ConfigError("downscaler: architecture channels != variables x levels");
    arch.validate();
    stats.validate();
    for (const auto& var : variables)
        for (const auto& lev : levels)
            if (stats.find(channel_name(var, lev)) < 0)
                throw DataError("downscaler: missing normalization stats for " +
                                channel_name(var, lev));
}

// ---------------------------------------------------------------- training

TrainStats train_downscaler(DownscalerModel& model, const std::vector<float>& coarse,
                            const std::vector<float>& fine, int n, const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    const size_t dc =
        static_cast<size_t>(model.arch.channels) * model.arch.coarse_ny * model.arch.coarse_nx;
    const size_t df =
        static_cast<size_t>(model.arch.channels) * model.arch.fine_ny() * model.arch.fine_nx();
    if (n < 100) throw DataError("train: need at least 100 pairs");
    if (coarse.size() != dc * static_cast<size_t>(n))
        throw DataError("train: coarse block size mismatch");
    if (fine.size() != df * static_cast<size_t>(n))
        throw DataError("train: fine block size mismatch");

    const int n_hold = std::max(1, static_cast<int>(std::lround(n * cfg.holdout_frac)));
    const int n_train = n - n_hold;

    auto refs = model.net.params();
    nn::Adam<float> opt(refs, cfg.lr);
    opt.set_cosine_schedule(cfg.cosine_period_epochs, cfg.lr_floor_frac);

    auto batch_mse = [&](int lo, int m, const std::vector<size_t>* order,
                         bool do_backward) -> double {
        nn::Tens<float> in(m, model.arch.channels, model.arch.coarse_ny, model.arch.coarse_nx);
        for (int s = 0; s < m; ++s) {
            const size_t idx = order ? (*order)[lo + s] : static_cast<size_t>(lo + s);
            std::copy_n(coarse.data() + idx * dc, dc, in.sample(s));
        }
        nn::Tens<float> pred;
        model.net.forward(in, pred);
        double acc = 0.0;
        nn::Tens<float> grad(pred.b, pred.c, pred.h, pred.w);
        const double denom = static_cast<double>(m) * df;
        for (int s = 0; s < m; ++s) {
            const size_t idx = order ? (*order)[lo + s] : static_cast<size_t>(lo + s);
            const float* target = fine.data() + idx * df;
            const float* p = pred.sample(s);
            float* gp = grad.sample(s);
            for (size_t j = 0; j < df; ++j) {
                const double d = static_cast<double>(p[j]) - static_cast<double>(target[j]);
                if (!std::isfinite(d))
                    throw NumericError("train: non-finite prediction at pair " +
                                       std::to_string(idx));
                acc += d * d;
                gp[j] = static_cast<float>(2.0 * d / denom);
            }
        }
        if (do_backward) model.net.backward(grad);
        return acc / denom;
    };

    TrainStats stats;
    const int batches = (n_train + cfg.batch - 1) / cfg.batch;
    std::vector<size_t> order(n_train);
    std::iota(order.begin(), order.end(), size_t(0));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngStream epoch_rng(derive_seed(derive_seed(cfg.seed, "epoch"), epoch));
        for (size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[epoch_rng.uniform_index(i)]);
        double epoch_loss = 0.0;
        for (int b = 0; b < batches; ++b) {
            opt.begin_epoch(epoch + static_cast<double>(b) / batches);
            const int lo = b * cfg.batch;
            const int m = std::min(cfg.batch, n_train - lo);
            nn::zero_grads(refs);
            double loss;
            try {
                loss = batch_mse(lo, m, &order, true);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + "; training diverged at epoch " +
                                   std::to_string(epoch + 1));
            }
            if (!std::isfinite(loss))
                throw NumericError("train: loss diverged at epoch " + std::to_string(epoch + 1));
            opt.step();
            epoch_loss += loss * m;
        }
        stats.train_loss.push_back(epoch_loss / n_train);
        stats.holdout_loss.push_back(batch_mse(n_train, n_hold, nullptr, false));
        stats.epochs_run = epoch + 1;
    }
    return stats;
}

// -------------------------------------------------------------- prediction

void predict_block(DownscalerModel& model, const std::vector<float>& coarse, int n,
                   std::vector<float>& fine) {
    const size_t dc =
        static_cast<size_t>(model.arch.channels) * model.arch.coarse_ny * model.arch.coarse_nx;
    const size_t df =
        static_cast<size_t>(model.arch.channels) * model.arch.fine_ny() * model.arch.fine_nx();
    if (coarse.size() != dc * static_cast<size_t>(n))
        throw DataError("predict: coarse block size mismatch");
    fine.resize(df * static_cast<size_t>(n));
    // per-sample evaluation: keeps each prediction independent of the block
    // it arrived in (matrix-backend summation order varies with batch shape)
    nn::Tens<float> in, out;
    for (int lo = 0; lo < n; ++lo) {
        in.resize(1, model.arch.channels, model.arch.coarse_ny, model.arch.coarse_nx);
        std::copy_n(coarse.data() + static_cast<size_t>(lo) * dc, dc, in.v.data());
        model.net.forward(in, out);
        for (size_t i = 0; i < df; ++i) {
            if (!std::isfinite(out.v[i]))
                throw NumericError("predict: non-finite output value");
            fine[static_cast<size_t>(lo) * df + i] = out.v[i];
        }
    }
}

FieldTensor predict(DownscalerModel& model, const FieldTensor& coarse) {
    model.validate();
    if (coarse.ny != model.arch.coarse_ny || coarse.nx != model.arch.coarse_nx)
        throw DataError("predict: coarse grid dims do not match training dims");
    if (coarse.variable_names != model.variables || coarse.level_labels != model.levels)
        throw DataError("predict: channel layout does not match training layout");
    std::vector<float> norm(coarse.values);
    normalize_block(norm.data(), model.variables, model.levels, coarse.plane_size(),
                    model.stats);
    std::vector<float> fine;
    predict_block(model, norm, 1, fine);
    FieldTensor out = make_field(model.variables, model.levels, model.arch.fine_ny(),
                                 model.arch.fine_nx(), model.grid_spacing_km,
                                 coarse.timestamp);
    std::copy(fine.begin(), fine.end(), out.values.begin());
    denormalize_block(out.values.data(), model.variables, model.levels, out.plane_size(),
                      model.stats);
    out.validate();
    return out;
}

// ----------------------------------------------------------------- bicubic

namespace {

// Catmull-Rom weights for fractional position u in [0, 1)
inline void catmull_rom_weights(double u, double w[4]) {
    const double u2 = u * u, u3 = u2 * u;
    w[0] = 0.5 * (-u3 + 2.0 * u2 - u);
    w[1] = 0.5 * (3.0 * u3 - 5.0 * u2 + 2.0);
    w[2] = 0.5 * (-3.0 * u3 + 4.0 * u2 + u);
    w[3] = 0.5 * (u3 - u2);
}

// coarse series with linear extension past both ends
inline double extended(const float* p, int n, int i) {
    if (i < 0) return p[0] + (static_cast<double>(p[0]) - p[1]) * (-i);
    if (i >= n) return p[n - 1] + (static_cast<double>(p[n - 1]) - p[n - 2]) * (i - n + 1);
    return p[i];
}

}  // namespace

void bicubic_upsample_plane(const float* in, int ny, int nx, int factor, float* out) {
    if (ny < 2 || nx < 2) throw DataError("bicubic: need at least a 2x2 coarse grid");
    if (factor < 1) throw ConfigError("bicubic: factor must be >= 1");
    const int fy = ny * factor, fx = nx * factor;
    // rows first: interpolate along x at every coarse row
    std::vector<double> rowpass(static_cast<size_t>(ny) * fx);
    for (int y = 0; y < ny; ++y) {
        const float* src = in + static_cast<size_t>(y) * nx;
        for (int x = 0; x < fx; ++x) {
            const double u = (x + 0.5) / factor - 0.5;
            const int k = static_cast<int>(std::floor(u));
            double w[4];
            catmull_rom_weights(u - k, w);
            double acc = 0.0;
            for (int a = 0; a < 4; ++a) acc += w[a] * extended(src, nx, k - 1 + a);
            rowpass[static_cast<size_t>(y) * fx + x] = acc;
        }
    }
    // then along y per fine column
    std::vector<float> col(ny);
    for (int x = 0; x < fx; ++x) {
        for (int y = 0; y < ny; ++y)
            col[y] = static_cast<float>(rowpass[static_cast<size_t>(y) * fx + x]);
        for (int y = 0; y < fy; ++y) {
            const double u = (y + 0.5) / factor - 0.5;
            const int k = static_cast<int>(std::floor(u));
            double w[4];
            catmull_rom_weights(u - k, w);
            double acc = 0.0;
            for (int a = 0; a < 4; ++a) acc += w[a] * extended(col.data(), ny, k - 1 + a);
            out[static_cast<size_t>(y) * fx + x] = static_cast<float>(acc);
        }
    }
}

FieldTensor bicubic_baseline(const FieldTensor& coarse, int factor) {
    coarse.validate();
    FieldTensor out = make_field(coarse.variable_names, coarse.level_labels,
                                 coarse.ny * factor, coarse.nx * factor,
                                 coarse.grid_spacing_km / factor, coarse.timestamp);
    const size_t cp = coarse.plane_size();
    const size_t fp = out.plane_size();
    for (int c = 0; c < coarse.n_channels(); ++c)
        bicubic_upsample_plane(coarse.values.data() + c * cp, coarse.ny, coarse.nx, factor,
                               out.values.data() + c * fp);
    return out;
}

// -------------------------------------------------------------- checkpoint

void save_downscaler(DownscalerModel& model, const std::string& dir) {
    model.validate();
    ArrayBundle bundle;
    for (auto& p : model.net.params()) {
        NamedArray arr;
        arr.name = p.name;
        arr.shape = {p.value->size()};
        arr.data = *p.value;
        bundle.arrays.push_back(std::move(arr));
    }
    bundle.attrs["checkpoint_kind"] = "regression";
    bundle.attrs["arch"] = model.arch.to_json();
    nlohmann::json norm = {{"variables", model.variables},
                           {"levels", model.levels},
                           {"channel_names", model.stats.channel_names},
                           {"mean", model.stats.mean},
                           {"std", model.stats.std_dev},
                           {"grid_spacing_km", model.grid_spacing_km}};
    bundle.attrs["norm"] = norm.dump();
    write_gridpack(dir, bundle);
}

DownscalerModel load_downscaler(const std::string& dir) {
    ArrayBundle bundle = read_bundle(dir);
    auto kind_it = bundle.attrs.find("checkpoint_kind");
    if (kind_it == bundle.attrs.end() || kind_it->second != "regression")
        throw DataError("checkpoint: not a regression checkpoint");
    DownscalerModel model;
    model.arch = nn::RegressionConfig::from_json(bundle.attrs.at("arch"));
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
