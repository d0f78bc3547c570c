#include "ensembledown/synthclim.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>

#include <fftw3.h>
#include <json.hpp>

#include "ensembledown/errors.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/rng.hpp"

namespace ensembledown {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLevelMixShared = 0.7;   // weight of the cross-level shared streamfunction
constexpr double kLevelMixLocal = 0.3;    // weight of the per-level component
constexpr double kLevelChainRho = 0.5;    // level-to-level correlation of the local part
constexpr double kTerrainBeta = 3.5;      // spectral slope of the fixed terrain pattern
constexpr double kBiasBeta = 4.0;         // spectral slope of the coarse bias pattern

double t_base(int level) { return 10.0 - 3.0 * level; }

// Unit-variance power-law Gaussian field, double precision, no size guard
// (the coarse-grid bias pattern legitimately runs below the public 16x16
// minimum).  Mode variance ~ r^(-beta) with r the normalized frequency
// radius in units of the shorter axis, matching the radial PSD binning.
std::vector<double> power_law_field(int ny, int nx, double beta, uint64_t seed) {
    const size_t n = static_cast<size_t>(ny) * nx;
    std::vector<std::complex<double>> spec(n, {0.0, 0.0});
    RngStream rng(seed);
    const int min_dim = std::min(ny, nx);
    for (int ky = 0; ky < ny; ++ky) {
        for (int kx = 0; kx < nx; ++kx) {
            if (ky == 0 && kx == 0) continue;  // zero DC
            const int cy = (ny - ky) % ny, cx = (nx - kx) % nx;
            if (cy < ky || (cy == ky && cx < kx)) continue;  // conjugate fills it
            const int kys = ky <= ny / 2 ? ky : ky - ny;
            const int kxs = kx <= nx / 2 ? kx : kx - nx;
            const double fy = static_cast<double>(kys) / ny;
            const double fx = static_cast<double>(kxs) / nx;
            const double r = std::sqrt(fx * fx + fy * fy) * min_dim;
            const double p = std::pow(r, -beta);
            if (cy == ky && cx == kx) {
                spec[static_cast<size_t>(ky) * nx + kx] = std::sqrt(p) * rng.normal();
            } else {
                const double amp = std::sqrt(p / 2.0);
                const double re = amp * rng.normal();
                const double im = amp * rng.normal();
                spec[static_cast<size_t>(ky) * nx + kx] = {re, im};
                spec[static_cast<size_t>(cy) * nx + cx] = {re, -im};
            }
        }
    }
    std::vector<std::complex<double>> out(n);
    fftw_plan plan = fftw_plan_dft_2d(ny, nx, reinterpret_cast<fftw_complex*>(spec.data()),
                                      reinterpret_cast<fftw_complex*>(out.data()),
                                      FFTW_BACKWARD, FFTW_ESTIMATE);
    if (!plan) throw NumericError("power_law_field: FFT planning failed");
    fftw_execute(plan);
    fftw_destroy_plan(plan);

    std::vector<double> field(n);
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
        field[i] = out[i].real() / static_cast<double>(n);
        mean += field[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
        field[i] -= mean;
        var += field[i] * field[i];
    }
    var /= static_cast<double>(n);
    if (var <= 0.0) throw NumericError("power_law_field: degenerate spectrum");
    const double inv_std = 1.0 / std::sqrt(var);
    for (double& v : field) v *= inv_std;
    return field;
}

void check_power_law_args(int ny, int nx, double beta) {
    if (ny < 16 || nx < 16)
        throw ConfigError("spectral_gaussian_field: grid must be at least 16x16");
    if (beta < 1.0 || beta > 5.0)
        throw ConfigError("spectral_gaussian_field: spectral slope must lie in [1, 5]");
}

// centered differences on the periodic grid, spacing 1 grid unit
void centered_gradient(const std::vector<double>& f, int ny, int nx,
                       std::vector<double>& ddy, std::vector<double>& ddx) {
    ddy.resize(f.size());
    ddx.resize(f.size());
    for (int y = 0; y < ny; ++y) {
        const int yp = (y + 1) % ny, ym = (y + ny - 1) % ny;
        for (int x = 0; x < nx; ++x) {
            const int xp = (x + 1) % nx, xm = (x + nx - 1) % nx;
            ddy[static_cast<size_t>(y) * nx + x] =
                0.5 * (f[static_cast<size_t>(yp) * nx + x] - f[static_cast<size_t>(ym) * nx + x]);
            ddx[static_cast<size_t>(y) * nx + x] =
                0.5 * (f[static_cast<size_t>(y) * nx + xp] - f[static_cast<size_t>(y) * nx + xm]);
        }
    }
}

}  // namespace

std::vector<std::string> ClimatologyConfig::levels() const {
    std::vector<std::string> out;
    for (int l = 0; l < n_levels; ++l) out.push_back("L" + std::to_string(l));
    return out;
}

void ClimatologyConfig::validate() const {
    if (grid_ny < 16 || grid_nx < 16)
        throw ConfigError("climatology: grid dims must be >= 16");
    if (n_levels < 1) throw ConfigError("climatology: n_levels must be >= 1");
    if (spectral_slope < 1.0 || spectral_slope > 5.0)
        throw ConfigError("climatology: spectral slope must lie in [1, 5]");
    if (coarsen_factor < 1 || grid_ny % coarsen_factor != 0 || grid_nx % coarsen_factor != 0)
        throw ConfigError("climatology: grid dims must be divisible by coarsen_factor");
    if (diurnal_period_steps < 1)
        throw ConfigError("climatology: diurnal_period_steps must be >= 1");
    if (grid_spacing_km <= 0.0) throw ConfigError("climatology: grid spacing must be > 0");
    if (terrain_amplitude < 0.0 || diurnal_amplitude < 0.0 || noise_amplitude < 0.0)
        throw ConfigError("climatology: amplitudes must be non-negative");
}

std::vector<float> spectral_gaussian_field(int ny, int nx, double beta, uint64_t seed) {
    check_power_law_args(ny, nx, beta);
    auto d = power_law_field(ny, nx, beta, seed);
    return std::vector<float>(d.begin(), d.end());
}

WindFields generate_wind_fields(const ClimatologyConfig& config, uint64_t seed) {
    config.validate();
    const int ny = config.grid_ny, nx = config.grid_nx, nl = config.n_levels;
    const size_t plane = static_cast<size_t>(ny) * nx;
    WindFields out;
    out.ny = ny;
    out.nx = nx;
    out.n_levels = nl;
    out.psi.resize(plane * nl);
    out.u.resize(plane * nl);
    out.v.resize(plane * nl);

    const auto shared =
        power_law_field(ny, nx, config.spectral_slope, derive_seed(seed, "psi-shared"));
    // per-level components form a stationary chain with correlation
    // rho^|dl| between levels, so vertical coherence decays with separation
    std::vector<double> local(plane, 0.0);
    std::vector<double> ddy, ddx;
    for (int l = 0; l < nl; ++l) {
        const auto fresh = power_law_field(ny, nx, config.spectral_slope,
                                           derive_seed(seed, "psi-level-" + std::to_string(l)));
        if (l == 0) {
            local = fresh;
        } else {
            const double keep = kLevelChainRho;
            const double inject = std::sqrt(1.0 - keep * keep);
            for (size_t i = 0; i < plane; ++i) local[i] = keep * local[i] + inject * fresh[i];
        }
        std::vector<double> psi(plane);
        for (size_t i = 0; i < plane; ++i)
            psi[i] = kLevelMixShared * shared[i] + kLevelMixLocal * local[i];
        centered_gradient(psi, ny, nx, ddy, ddx);
        for (size_t i = 0; i < plane; ++i) {
            out.psi[l * plane + i] = psi[i];
            out.u[l * plane + i] = -ddy[i];
            out.v[l * plane + i] = ddx[i];
        }
    }
    return out;
}

std::vector<double> wind_divergence(const double* u, const double* v, int ny, int nx) {
    std::vector<double> div(static_cast<size_t>(ny) * nx);
    for (int y = 0; y < ny; ++y) {
        const int yp = (y + 1) % ny, ym = (y + ny - 1) % ny;
        for (int x = 0; x < nx; ++x) {
            const int xp = (x + 1) % nx, xm = (x + nx - 1) % nx;
            div[static_cast<size_t>(y) * nx + x] =
                0.5 * (u[static_cast<size_t>(y) * nx + xp] - u[static_cast<size_t>(y) * nx + xm]) +
                0.5 * (v[static_cast<size_t>(yp) * nx + x] - v[static_cast<size_t>(ym) * nx + x]);
        }
    }
    return div;
}

std::vector<float> terrain_pattern(const ClimatologyConfig& config) {
    config.validate();
    auto d = power_law_field(config.grid_ny, config.grid_nx, kTerrainBeta,
                             derive_seed(config.master_seed, "terrain"));
    return std::vector<float>(d.begin(), d.end());
}

FieldTensor generate_sample(const ClimatologyConfig& config, int64_t time_index,
                            uint64_t seed) {
    config.validate();
    const int ny = config.grid_ny, nx = config.grid_nx, nl = config.n_levels;
    const size_t plane = static_cast<size_t>(ny) * nx;

    FieldTensor f = make_field(config.variables(), config.levels(), ny, nx,
                               config.grid_spacing_km, time_index);
    const WindFields wf = generate_wind_fields(config, seed);
    const auto terrain = power_law_field(ny, nx, kTerrainBeta,
                                         derive_seed(config.master_seed, "terrain"));
    const double diurnal =
        config.diurnal_amplitude *
        std::sin(2.0 * kPi * static_cast<double>(time_index) / config.diurnal_period_steps);

    RngStream noise_rng(derive_seed(seed, "t-noise"));
    std::vector<double> noise(plane);
    for (int l = 0; l < nl; ++l) {
        float* u_out = f.channel(0, l);
        float* v_out = f.channel(1, l);
        float* t_out = f.channel(2, l);
        for (size_t i = 0; i < plane; ++i) noise[i] = noise_rng.normal();
        const double base = t_base(l);
        for (size_t i = 0; i < plane; ++i) {
            const double u = wf.u[l * plane + i];
            u_out[i] = static_cast<float>(u);
            v_out[i] = static_cast<float>(wf.v[l * plane + i]);
            t_out[i] = static_cast<float>(base + config.coupling * u + diurnal +
                                          config.terrain_amplitude * terrain[i] +
                                          config.noise_amplitude * noise[i]);
        }
    }
    return f;
}

FieldTensor coarsen(const FieldTensor& field, int factor, uint64_t bias_seed,
                    double bias_amplitude, const std::vector<double>* channel_sigma) {
    if (factor < 1) throw ConfigError("coarsen: factor must be >= 1");
    if (field.ny % factor != 0 || field.nx % factor != 0)
        throw DataError("coarsen: grid dims " + std::to_string(field.ny) + "x" +
                        std::to_string(field.nx) + " not divisible by factor " +
                        std::to_string(factor));
    const int cy = field.ny / factor, cx = field.nx / factor;
    const int nc = field.n_channels();
    if (channel_sigma && static_cast<int>(channel_sigma->size()) != nc)
        throw DataError("coarsen: channel_sigma length disagrees with channel count");

    FieldTensor out = make_field(field.variable_names, field.level_labels, cy, cx,
                                 field.grid_spacing_km * factor, field.timestamp);
    out.attrs = field.attrs;
    const double inv_block = 1.0 / (static_cast<double>(factor) * factor);
    for (int c = 0; c < nc; ++c) {
        const float* src = field.values.data() + static_cast<size_t>(c) * field.plane_size();
        float* dst = out.values.data() + static_cast<size_t>(c) * out.plane_size();
        for (int by = 0; by < cy; ++by)
            for (int bx = 0; bx < cx; ++bx) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        acc += src[static_cast<size_t>(by * factor + dy) * field.nx +
                                   (bx * factor + dx)];
                dst[static_cast<size_t>(by) * cx + bx] = static_cast<float>(acc * inv_block);
            }
    }

    if (bias_amplitude != 0.0) {
        const auto bias = power_law_field(cy, cx, kBiasBeta, bias_seed);
        for (int c = 0; c < nc; ++c) {
            double sigma;
            if (channel_sigma) {
                sigma = (*channel_sigma)[c];
            } else {
                const float* src =
                    field.values.data() + static_cast<size_t>(c) * field.plane_size();
                double s = 0, s2 = 0;
                for (size_t i = 0; i < field.plane_size(); ++i) {
                    s += src[i];
                    s2 += static_cast<double>(src[i]) * src[i];
                }
                const double m = s / field.plane_size();
                sigma = std::sqrt(std::max(0.0, s2 / field.plane_size() - m * m));
            }
            float* dst = out.values.data() + static_cast<size_t>(c) * out.plane_size();
            for (size_t i = 0; i < out.plane_size(); ++i)
                dst[i] += static_cast<float>(bias_amplitude * sigma * bias[i]);
        }
    }
    return out;
}

DatasetPaths generate_dataset(const ClimatologyConfig& config, int n_samples,
                              const std::string& out_dir) {
    config.validate();
    if (n_samples < 1) throw ConfigError("generate_dataset: n_samples must be >= 1");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    const auto variables = config.variables();
    const auto levels = config.levels();
    const int nc = static_cast<int>(variables.size() * levels.size());
    const size_t plane = static_cast<size_t>(config.grid_ny) * config.grid_nx;
    const int cy = config.grid_ny / config.coarsen_factor;
    const int cx = config.grid_nx / config.coarsen_factor;
    const size_t cplane = static_cast<size_t>(cy) * cx;
    const uint64_t sample_root = derive_seed(config.master_seed, "sample");

    nlohmann::json cfg_json = {
        {"grid_ny", config.grid_ny},
        {"grid_nx", config.grid_nx},
        {"n_levels", config.n_levels},
        {"spectral_slope", config.spectral_slope},
        {"coupling", config.coupling},
        {"terrain_amplitude", config.terrain_amplitude},
        {"diurnal_amplitude", config.diurnal_amplitude},
        {"diurnal_period_steps", config.diurnal_period_steps},
        {"noise_amplitude", config.noise_amplitude},
        {"coarsen_factor", config.coarsen_factor},
        {"grid_spacing_km", config.grid_spacing_km},
        {"master_seed", config.master_seed},
    };

    DatasetPaths out;
    out.hires = (fs::path(out_dir) / "hires").string();
    out.coarse = (fs::path(out_dir) / "coarse").string();

    // Single generation pass: hi-res fields stream straight to disk while
    // channel moments accumulate and coarse block means stay buffered (the
    // coarse bias needs the dataset sigmas, known only at the end).
    GridPackWriter hi(out.hires, "bundle");
    hi.open_array("fields", {static_cast<size_t>(n_samples), static_cast<size_t>(nc),
                             static_cast<size_t>(config.grid_ny),
                             static_cast<size_t>(config.grid_nx)});
    std::vector<double> sum(nc, 0.0), sum2(nc, 0.0);
    std::vector<float> coarse_means(static_cast<size_t>(n_samples) * nc * cplane);
    const double inv_block =
        1.0 / (static_cast<double>(config.coarsen_factor) * config.coarsen_factor);
    for (int i = 0; i < n_samples; ++i) {
        FieldTensor f = generate_sample(config, i, derive_seed(sample_root, i));
        hi.append(f.values.data(), f.values.size());
        for (int c = 0; c < nc; ++c) {
            const float* src = f.values.data() + static_cast<size_t>(c) * plane;
            for (size_t p = 0; p < plane; ++p) {
                sum[c] += src[p];
                sum2[c] += static_cast<double>(src[p]) * src[p];
            }
            float* dst = &coarse_means[(static_cast<size_t>(i) * nc + c) * cplane];
            for (int by = 0; by < cy; ++by)
                for (int bx = 0; bx < cx; ++bx) {
                    double acc = 0.0;
                    for (int dy = 0; dy < config.coarsen_factor; ++dy)
                        for (int dx = 0; dx < config.coarsen_factor; ++dx)
                            acc += src[static_cast<size_t>(by * config.coarsen_factor + dy) *
                                           config.grid_nx +
                                       (bx * config.coarsen_factor + dx)];
                    dst[static_cast<size_t>(by) * cx + bx] =
                        static_cast<float>(acc * inv_block);
                }
        }
    }
    hi.close_array();

    NormStats stats;
    const double denom = static_cast<double>(n_samples) * plane;
    std::vector<float> mean_arr(nc), std_arr(nc);
    for (int v = 0; v < static_cast<int>(variables.size()); ++v)
        for (int l = 0; l < static_cast<int>(levels.size()); ++l) {
            const int c = v * static_cast<int>(levels.size()) + l;
            const double m = sum[c] / denom;
            const double var = std::max(0.0, sum2[c] / denom - m * m);
            stats.channel_names.push_back(channel_name(variables[v], levels[l]));
            stats.mean.push_back(m);
            stats.std_dev.push_back(std::sqrt(var));
            mean_arr[c] = static_cast<float>(m);
            std_arr[c] = static_cast<float>(std::sqrt(var));
        }
    stats.validate();
    out.stats = stats;

    hi.add_array("norm_mean", {static_cast<size_t>(nc)}, mean_arr.data());
    hi.add_array("norm_std", {static_cast<size_t>(nc)}, std_arr.data());

    auto join = [](const std::vector<std::string>& parts) {
        std::string s;
        for (size_t i = 0; i < parts.size(); ++i) s += (i ? "," : "") + parts[i];
        return s;
    };
    hi.set_attr("variables", join(variables));
    hi.set_attr("levels", join(levels));
    hi.set_attr("grid_spacing_km", std::to_string(config.grid_spacing_km));
    hi.set_attr("n_samples", std::to_string(n_samples));
    hi.set_attr("config", cfg_json.dump());
    hi.finish();

    // fixed bias pattern, scaled by the dataset sigmas so every sample
    // carries the identical systematic error
    const auto bias_pattern =
        power_law_field(cy, cx, kBiasBeta, derive_seed(config.master_seed, "coarse-bias"));
    std::vector<float> bias(static_cast<size_t>(nc) * cplane);
    for (int c = 0; c < nc; ++c)
        for (size_t p = 0; p < cplane; ++p)
            bias[static_cast<size_t>(c) * cplane + p] =
                static_cast<float>(0.1 * stats.std_dev[c] * bias_pattern[p]);
    for (int i = 0; i < n_samples; ++i)
        for (size_t j = 0; j < static_cast<size_t>(nc) * cplane; ++j)
            coarse_means[static_cast<size_t>(i) * nc * cplane + j] += bias[j];

    GridPackWriter co(out.coarse, "bundle");
    co.add_array("fields",
                 {static_cast<size_t>(n_samples), static_cast<size_t>(nc),
                  static_cast<size_t>(cy), static_cast<size_t>(cx)},
                 coarse_means.data());
    co.add_array("bias", {static_cast<size_t>(nc), static_cast<size_t>(cy),
                          static_cast<size_t>(cx)},
                 bias.data());
    co.set_attr("variables", join(variables));
    co.set_attr("levels", join(levels));
    co.set_attr("grid_spacing_km",
                std::to_string(config.grid_spacing_km * config.coarsen_factor));
    co.set_attr("n_samples", std::to_string(n_samples));
    co.set_attr("factor", std::to_string(config.coarsen_factor));
    co.set_attr("config", cfg_json.dump());
    co.finish();
    return out;
}

}  // namespace ensembledown
