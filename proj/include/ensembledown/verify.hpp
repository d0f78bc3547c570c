#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ensembledown/field.hpp"

namespace ensembledown {

// --------------------------------------------------------------------------
// deterministic metrics

double mae(std::span<const float> pred, std::span<const float> truth);
double rmse(std::span<const float> pred, std::span<const float> truth);
double mae(const FieldTensor& pred, const FieldTensor& truth);
double rmse(const FieldTensor& pred, const FieldTensor& truth);

// Capacity-normalized accuracy, in percent:
//   100 * (1 - sqrt(mean_i ((obs_i - pred_i) / capacity_i)^2))
// Throws DataError if any capacity is <= 0 or the lengths disagree.
double capacity_ratio_percent(std::span<const double> pred, std::span<const double> obs,
                              std::span<const double> capacity);

// --------------------------------------------------------------------------
// probabilistic metrics

// CRPS of an M-member ensemble against one scalar observation, energy form:
//   (1/M) sum_m |x_m - y|  -  (1/(2 M^2)) sum_{m,n} |x_m - x_n|
// computed via the sorted O(M log M) identity.
double crps_ensemble(std::span<const float> members, double truth);

// Per-grid-point CRPS averaged over n points; members laid out [M, n]
// (member-major blocks of length n).
double crps_field(const float* members, size_t n_members, const float* truth, size_t n);
double crps_field(const EnsembleSet& ensemble, const FieldTensor& truth);

struct SpreadSkill {
    double spread = 0.0;  // sqrt(mean per-case ensemble variance), divisor M-1
    double skill = 0.0;   // RMSE of the ensemble mean over all cases
    double ssr = 0.0;     // spread / skill; 0 when degenerate
    bool degenerate = false;  // skill == 0 makes the ratio undefined
};

// One case = an ensemble block [M, n] plus a truth block [n]; n and M must be
// common across cases.  Requires >= 2 cases and M >= 2.
SpreadSkill spread_skill(const std::vector<std::pair<const float*, const float*>>& cases,
                         size_t n_members, size_t n);
SpreadSkill spread_skill(const std::vector<EnsembleSet>& ensembles,
                         const std::vector<FieldTensor>& truths);

// --------------------------------------------------------------------------
// spectral diagnostics

struct RadialSpectrum {
    std::vector<double> wavelength_km;  // per bin, decreasing with bin index
    std::vector<double> power;          // mean per-mode spectral power in the annulus
    std::vector<int> mode_count;        // modes contributing to each bin
    double variance = 0.0;              // spatial variance of the (de-meaned) field

    // count-weighted sum over bins; equals variance (Parseval)
    double total_power() const;
};

// Radially binned power spectrum of one 2-D plane.  The field mean is
// removed, each Fourier mode contributes |F_k|^2 / N^2 to the integer-radius
// bin nearest its normalized frequency, and each bin reports the mean
// per-mode power (so white noise reads flat).  The count-weighted bin total
// satisfies Parseval: total_power() == variance to ~1e-6 relative.
// Requires ny, nx >= 16.
RadialSpectrum psd_radial(const float* field, int ny, int nx, double grid_spacing_km);
RadialSpectrum psd_radial(const FieldTensor& field, int var, int level);

// Least-squares slope of log10(power) vs log10(1/wavelength) over bins whose
// wavelength lies in [lambda_min_km, lambda_max_km]; needs >= 3 such bins.
double fit_loglog_slope(const RadialSpectrum& spectrum, double lambda_min_km,
                        double lambda_max_km);

// --------------------------------------------------------------------------
// climatological diagnostics over a stack of samples

// Non-owning view of a sample archive laid out [sample, channel, y*x].
struct SampleStack {
    const float* data = nullptr;
    size_t n_samples = 0;
    size_t n_channels = 0;
    size_t plane = 0;

    const float* at(size_t sample, size_t channel) const {
        return data + (sample * n_channels + channel) * plane;
    }
};

// Pearson r across samples at each grid point between two channels.  Points
// where either channel has zero variance are masked with quiet NaN.
// Requires >= 30 samples.
std::vector<float> spatial_corr_map(const SampleStack& stack, size_t chan_a, size_t chan_b);

// Mean of the unmasked values of a correlation map (NaN-aware helper).
double masked_mean(std::span<const float> map_values);

// Per-level scalar correlation between two variables: the spatial mean of the
// per-point correlation map at each level.  Channels are variable-major, so
// channel(var, level) = var * n_levels + level.
std::vector<double> level_corr_profile(const SampleStack& stack, int n_vars, int n_levels,
                                       int var_a, int var_b);

struct ClimStats {
    size_t n_samples = 0;
    size_t n_channels = 0;
    size_t plane = 0;
    // each vector is [channel, y*x]; skewness is the population estimator
    // m3 / m2^(3/2) and is NaN where the variance vanishes or n < 3
    std::vector<float> mean, variance, skewness, vmax, vmin;
};

ClimStats clim_stats(const SampleStack& stack);

// --------------------------------------------------------------------------
// report container

struct MetricReport {
    std::map<std::string, double> scalars;
    std::map<std::string, std::vector<double>> series;
    std::map<std::string, std::string> meta;  // sample counts, channel names, etc.

    // throws NumericError if any scalar or series element is non-finite
    void validate() const;
};

}  // namespace ensembledown
