#include "ensembledown/verify.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

#include <fftw3.h>

#include "ensembledown/errors.hpp"

namespace ensembledown {

namespace {

void require_same_size(size_t a, size_t b, const char* where) {
    if (a != b) {
        std::ostringstream os;
        os << where << ": size mismatch (" << a << " vs " << b << ")";
        throw DataError(os.str());
    }
    if (a == 0) throw DataError(std::string(where) + ": empty input");
}

void require_same_layout(const FieldTensor& a, const FieldTensor& b, const char* where) {
    if (a.variable_names != b.variable_names || a.level_labels != b.level_labels ||
        a.ny != b.ny || a.nx != b.nx)
        throw DataError(std::string(where) + ": field layouts disagree");
}

}  // namespace

double mae(std::span<const float> pred, std::span<const float> truth) {
    require_same_size(pred.size(), truth.size(), "mae");
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); ++i)
        acc += std::abs(static_cast<double>(pred[i]) - truth[i]);
    return acc / pred.size();
}

double rmse(std::span<const float> pred, std::span<const float> truth) {
    require_same_size(pred.size(), truth.size(), "rmse");
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        double d = static_cast<double>(pred[i]) - truth[i];
        acc += d * d;
    }
    return std::sqrt(acc / pred.size());
}

double mae(const FieldTensor& pred, const FieldTensor& truth) {
    require_same_layout(pred, truth, "mae");
    return mae(std::span<const float>(pred.values), std::span<const float>(truth.values));
}

double rmse(const FieldTensor& pred, const FieldTensor& truth) {
    require_same_layout(pred, truth, "rmse");
    return rmse(std::span<const float>(pred.values), std::span<const float>(truth.values));
}

double capacity_ratio_percent(std::span<const double> pred, std::span<const double> obs,
                              std::span<const double> capacity) {
    require_same_size(pred.size(), obs.size(), "capacity_ratio");
    require_same_size(pred.size(), capacity.size(), "capacity_ratio");
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!(capacity[i] > 0.0))
            throw DataError("capacity_ratio: capacity must be positive (case " +
                            std::to_string(i) + ")");
        double e = (obs[i] - pred[i]) / capacity[i];
        acc += e * e;
    }
    return 100.0 * (1.0 - std::sqrt(acc / pred.size()));
}

// --------------------------------------------------------------------------

namespace {

// CRPS for one observation given a scratch vector that will be sorted.
double crps_sorted_scratch(std::vector<double>& x, double y) {
    const size_t m = x.size();
    std::sort(x.begin(), x.end());
    double term_abs = 0.0;
    for (double v : x) term_abs += std::abs(v - y);
    // sum over ordered pairs |x_i - x_j| = 2 * sum_k x_(k) * (2k - m + 1)
    double pair_sum = 0.0;
    for (size_t k = 0; k < m; ++k)
        pair_sum += x[k] * (2.0 * static_cast<double>(k) - static_cast<double>(m) + 1.0);
    return term_abs / m - pair_sum / (static_cast<double>(m) * m);
}

}  // namespace

double crps_ensemble(std::span<const float> members, double truth) {
    if (members.empty()) throw DataError("crps: empty ensemble");
    std::vector<double> x(members.begin(), members.end());
    return crps_sorted_scratch(x, truth);
}

double crps_field(const float* members, size_t n_members, const float* truth, size_t n) {
    if (n_members == 0) throw DataError("crps: empty ensemble");
    if (n == 0) throw DataError("crps: empty field");
    std::vector<double> x(n_members);
    double acc = 0.0;
    for (size_t p = 0; p < n; ++p) {
        for (size_t m = 0; m < n_members; ++m) x[m] = members[m * n + p];
        acc += crps_sorted_scratch(x, truth[p]);
    }
    return acc / n;
}

double crps_field(const EnsembleSet& ensemble, const FieldTensor& truth) {
    if (ensemble.variable_names != truth.variable_names ||
        ensemble.level_labels != truth.level_labels || ensemble.ny != truth.ny ||
        ensemble.nx != truth.nx)
        throw DataError("crps: ensemble and truth layouts disagree");
    return crps_field(ensemble.members.data(), ensemble.n_members(), truth.values.data(),
                      truth.values.size());
}

SpreadSkill spread_skill(const std::vector<std::pair<const float*, const float*>>& cases,
                         size_t n_members, size_t n) {
    if (cases.size() < 2) throw DataError("spread_skill: need >= 2 cases");
    if (n_members < 2) throw DataError("spread_skill: need >= 2 members");
    if (n == 0) throw DataError("spread_skill: empty fields");
    double var_acc = 0.0;
    double err_acc = 0.0;
    for (const auto& [members, truth] : cases) {
        for (size_t p = 0; p < n; ++p) {
            double sum = 0.0, sum2 = 0.0;
            for (size_t m = 0; m < n_members; ++m) {
                double v = members[m * n + p];
                sum += v;
                sum2 += v * v;
            }
            double mean = sum / n_members;
            double ss = sum2 - sum * sum / static_cast<double>(n_members);
            var_acc += std::max(0.0, ss) / (n_members - 1.0);
            double d = mean - truth[p];
            err_acc += d * d;
        }
    }
    const double denom = static_cast<double>(cases.size()) * n;
    SpreadSkill out;
    out.spread = std::sqrt(var_acc / denom);
    out.skill = std::sqrt(err_acc / denom);
    if (out.skill == 0.0) {
        out.degenerate = true;
        out.ssr = 0.0;
    } else {
        out.ssr = out.spread / out.skill;
    }
    return out;
}

SpreadSkill spread_skill(const std::vector<EnsembleSet>& ensembles,
                         const std::vector<FieldTensor>& truths) {
    if (ensembles.size() != truths.size())
        throw DataError("spread_skill: case counts disagree");
    if (ensembles.empty()) throw DataError("spread_skill: need >= 2 cases");
    const size_t m = ensembles.front().n_members();
    const size_t n = ensembles.front().member_size();
    std::vector<std::pair<const float*, const float*>> cases;
    for (size_t i = 0; i < ensembles.size(); ++i) {
        if (static_cast<size_t>(ensembles[i].n_members()) != m ||
            ensembles[i].member_size() != n || truths[i].values.size() != n)
            throw DataError("spread_skill: inconsistent case shapes");
        cases.emplace_back(ensembles[i].members.data(), truths[i].values.data());
    }
    return spread_skill(cases, m, n);
}

// --------------------------------------------------------------------------

double RadialSpectrum::total_power() const {
    double acc = 0.0;
    for (size_t i = 0; i < power.size(); ++i) acc += power[i] * mode_count[i];
    return acc;
}

RadialSpectrum psd_radial(const float* field, int ny, int nx, double grid_spacing_km) {
    if (ny < 16 || nx < 16)
        throw DataError("psd_radial: grid must be at least 16x16, got " + std::to_string(ny) +
                        "x" + std::to_string(nx));
    const size_t n = static_cast<size_t>(ny) * nx;
    std::vector<double> buf(n);
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += field[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
        buf[i] = field[i] - mean;
        var += buf[i] * buf[i];
    }
    var /= static_cast<double>(n);

    const int nxc = nx / 2 + 1;
    std::vector<std::complex<double>> spec(static_cast<size_t>(ny) * nxc);
    fftw_plan plan = fftw_plan_dft_r2c_2d(
        ny, nx, buf.data(), reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE);
    if (!plan) throw NumericError("psd_radial: FFT planning failed");
    fftw_execute(plan);
    fftw_destroy_plan(plan);

    // Bin by normalized frequency radius, in units of the longer axis' mode
    // spacing, so square grids bin by plain integer |k|.
    const int min_dim = std::min(ny, nx);
    const int rmax = static_cast<int>(std::lround(
        std::sqrt(0.25 + 0.25) * min_dim));  // corner mode at (ny/2, nx/2)
    RadialSpectrum out;
    out.variance = var;
    out.wavelength_km.assign(rmax, 0.0);
    out.power.assign(rmax, 0.0);
    out.mode_count.assign(rmax, 0);
    for (int r = 1; r <= rmax; ++r)
        out.wavelength_km[r - 1] = static_cast<double>(min_dim) * grid_spacing_km / r;

    const double norm = static_cast<double>(n) * static_cast<double>(n);
    for (int ky = 0; ky < ny; ++ky) {
        const int kys = ky <= ny / 2 ? ky : ky - ny;
        for (int kx = 0; kx < nx; ++kx) {
            if (ky == 0 && kx == 0) continue;  // DC removed with the mean
            const int kxs = kx <= nx / 2 ? kx : kx - nx;
            double fy = static_cast<double>(kys) / ny;
            double fx = static_cast<double>(kxs) / nx;
            int r = static_cast<int>(std::lround(std::sqrt(fx * fx + fy * fy) * min_dim));
            if (r < 1) r = 1;
            if (r > rmax) r = rmax;
            // Hermitian lookup: the r2c array keeps kx in [0, nx/2]
            std::complex<double> v;
            if (kx <= nx / 2)
                v = spec[static_cast<size_t>(ky) * nxc + kx];
            else
                v = spec[static_cast<size_t>((ny - ky) % ny) * nxc + (nx - kx)];
            out.power[r - 1] += std::norm(v) / norm;
            out.mode_count[r - 1] += 1;
        }
    }
    // report the per-mode mean in each annulus so a white-noise field reads
    // flat; total_power() re-weights by mode count to recover the variance
    for (int r = 0; r < rmax; ++r)
        if (out.mode_count[r] > 0) out.power[r] /= out.mode_count[r];
    return out;
}

RadialSpectrum psd_radial(const FieldTensor& field, int var, int level) {
    return psd_radial(field.channel(var, level), field.ny, field.nx, field.grid_spacing_km);
}

double fit_loglog_slope(const RadialSpectrum& spectrum, double lambda_min_km,
                        double lambda_max_km) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (size_t i = 0; i < spectrum.power.size(); ++i) {
        double lam = spectrum.wavelength_km[i];
        if (lam < lambda_min_km || lam > lambda_max_km) continue;
        if (spectrum.mode_count[i] == 0 || spectrum.power[i] <= 0.0) continue;
        double x = std::log10(1.0 / lam);  // log wavenumber
        double y = std::log10(spectrum.power[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    if (n < 3) throw DataError("fit_loglog_slope: fewer than 3 usable bins in range");
    double denom = n * sxx - sx * sx;
    if (denom == 0.0) throw NumericError("fit_loglog_slope: degenerate abscissa");
    return (n * sxy - sx * sy) / denom;
}

// --------------------------------------------------------------------------

namespace {

constexpr float kMasked = std::numeric_limits<float>::quiet_NaN();

void require_stack(const SampleStack& stack, size_t min_samples, const char* where) {
    if (!stack.data || stack.plane == 0 || stack.n_channels == 0)
        throw DataError(std::string(where) + ": empty sample stack");
    if (stack.n_samples < min_samples)
        throw DataError(std::string(where) + ": need >= " + std::to_string(min_samples) +
                        " samples, got " + std::to_string(stack.n_samples));
}

}  // namespace

std::vector<float> spatial_corr_map(const SampleStack& stack, size_t chan_a, size_t chan_b) {
    require_stack(stack, 30, "spatial_corr_map");
    if (chan_a >= stack.n_channels || chan_b >= stack.n_channels)
        throw DataError("spatial_corr_map: channel index out of range");
    const size_t n = stack.n_samples;
    std::vector<float> out(stack.plane, kMasked);
    std::vector<double> sa(stack.plane, 0), sb(stack.plane, 0), saa(stack.plane, 0),
        sbb(stack.plane, 0), sab(stack.plane, 0);
    for (size_t i = 0; i < n; ++i) {
        const float* a = stack.at(i, chan_a);
        const float* b = stack.at(i, chan_b);
        for (size_t p = 0; p < stack.plane; ++p) {
            sa[p] += a[p];
            sb[p] += b[p];
            saa[p] += static_cast<double>(a[p]) * a[p];
            sbb[p] += static_cast<double>(b[p]) * b[p];
            sab[p] += static_cast<double>(a[p]) * b[p];
        }
    }
    for (size_t p = 0; p < stack.plane; ++p) {
        double ca = saa[p] - sa[p] * sa[p] / n;
        double cb = sbb[p] - sb[p] * sb[p] / n;
        double cab = sab[p] - sa[p] * sb[p] / n;
        if (ca <= 0.0 || cb <= 0.0) continue;  // masked
        double r = cab / std::sqrt(ca * cb);
        out[p] = static_cast<float>(std::clamp(r, -1.0, 1.0));
    }
    return out;
}

double masked_mean(std::span<const float> map_values) {
    double acc = 0.0;
    size_t n = 0;
    for (float v : map_values) {
        if (std::isnan(v)) continue;
        acc += v;
        ++n;
    }
    if (n == 0) throw DataError("masked_mean: all values masked");
    return acc / static_cast<double>(n);
}

std::vector<double> level_corr_profile(const SampleStack& stack, int n_vars, int n_levels,
                                       int var_a, int var_b) {
    require_stack(stack, 30, "level_corr_profile");
    if (static_cast<size_t>(n_vars) * n_levels != stack.n_channels)
        throw DataError("level_corr_profile: channel layout disagrees with stack");
    if (var_a < 0 || var_a >= n_vars || var_b < 0 || var_b >= n_vars)
        throw DataError("level_corr_profile: variable index out of range");
    std::vector<double> profile(n_levels);
    for (int l = 0; l < n_levels; ++l) {
        auto map = spatial_corr_map(stack, static_cast<size_t>(var_a) * n_levels + l,
                                    static_cast<size_t>(var_b) * n_levels + l);
        profile[l] = masked_mean(map);
    }
    return profile;
}

ClimStats clim_stats(const SampleStack& stack) {
    require_stack(stack, 2, "clim_stats");
    const size_t n = stack.n_samples;
    const size_t cp = stack.n_channels * stack.plane;
    ClimStats out;
    out.n_samples = n;
    out.n_channels = stack.n_channels;
    out.plane = stack.plane;
    out.mean.assign(cp, 0.f);
    out.variance.assign(cp, 0.f);
    out.skewness.assign(cp, kMasked);
    out.vmax.assign(cp, -std::numeric_limits<float>::infinity());
    out.vmin.assign(cp, std::numeric_limits<float>::infinity());

    std::vector<double> s1(cp, 0), s2(cp, 0), s3(cp, 0);
    for (size_t i = 0; i < n; ++i) {
        const float* s = stack.at(i, 0);
        for (size_t j = 0; j < cp; ++j) {
            double v = s[j];
            s1[j] += v;
            s2[j] += v * v;
            s3[j] += v * v * v;
            out.vmax[j] = std::max(out.vmax[j], s[j]);
            out.vmin[j] = std::min(out.vmin[j], s[j]);
        }
    }
    for (size_t j = 0; j < cp; ++j) {
        double m = s1[j] / n;
        double m2 = s2[j] / n - m * m;           // population variance
        double m3 = s3[j] / n - 3.0 * m * m2 - m * m * m;  // population 3rd central moment
        m2 = std::max(0.0, m2);
        out.mean[j] = static_cast<float>(m);
        out.variance[j] = static_cast<float>(m2);
        if (n >= 3 && m2 > 0.0)
            out.skewness[j] = static_cast<float>(m3 / std::pow(m2, 1.5));
    }
    return out;
}

// --------------------------------------------------------------------------

void MetricReport::validate() const {
    for (const auto& [name, v] : scalars)
        if (!std::isfinite(v))
            throw NumericError("metric report: non-finite scalar '" + name + "'");
    for (const auto& [name, vs] : series)
        for (double v : vs)
            if (!std::isfinite(v))
                throw NumericError("metric report: non-finite entry in series '" + name + "'");
}

}  // namespace ensembledown
