#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ensembledown/field.hpp"

namespace ensembledown {

// Configuration of the synthetic high-resolution climatology.  Variables are
// fixed as (u, v, t): streamfunction-derived winds plus a temperature field
// coupled to u, terrain, and a diurnal cycle.
struct ClimatologyConfig {
    int grid_ny = 64;
    int grid_nx = 64;
    int n_levels = 3;
    double spectral_slope = 3.0;    // beta of the |k|^(-beta) streamfunction spectrum
    double coupling = 0.4;          // gamma: temperature-u coupling
    double terrain_amplitude = 0.5; // weight of the fixed terrain pattern in t
    double diurnal_amplitude = 0.15;
    int diurnal_period_steps = 96;  // 15-minute steps per day
    double noise_amplitude = 0.14;  // small-scale white noise in t
    int coarsen_factor = 8;
    double grid_spacing_km = 1.0;
    uint64_t master_seed = 20240601;

    std::vector<std::string> variables() const { return {"u", "v", "t"}; }
    std::vector<std::string> levels() const;

    void validate() const;  // throws ConfigError
};

// Zero-mean, unit-variance Gaussian random field with an isotropic
// |k|^(-beta) power spectrum (independent phases, Hermitian spectrum, zero
// DC, variance renormalized to exactly 1).  Deterministic per seed.
// Requires ny, nx >= 16 and beta in [1, 5].
std::vector<float> spectral_gaussian_field(int ny, int nx, double beta, uint64_t seed);

// Double-precision synthesis core for one sample's dynamical fields, exposed
// so the discrete non-divergence identity can be checked at full precision.
// Each vector holds n_levels concatenated (ny*nx) planes.
struct WindFields {
    std::vector<double> psi, u, v;
    int ny = 0, nx = 0, n_levels = 0;
};
WindFields generate_wind_fields(const ClimatologyConfig& config, uint64_t seed);

// Centered-difference divergence du/dx + dv/dy on the periodic grid, one
// plane; spacing 1 grid unit, matching the wind construction.
std::vector<double> wind_divergence(const double* u, const double* v, int ny, int nx);

// One synthetic state: per level, winds from a streamfunction (70% shared
// across levels, 30% level-specific with correlation decaying in level
// separation) and temperature
//   t = t_base(level) + coupling*u + diurnal + terrain + noise.
// The terrain pattern is fixed per master_seed; everything else is keyed by
// the per-sample seed and time index.
FieldTensor generate_sample(const ClimatologyConfig& config, int64_t time_index,
                            uint64_t seed);

// The fixed terrain pattern of a configuration (unit variance, hi-res grid).
std::vector<float> terrain_pattern(const ClimatologyConfig& config);

// Block-mean coarsening by an integer factor, then addition of a fixed
// smooth bias pattern (power-law field with beta = 4 at coarse resolution,
// keyed by bias_seed) scaled per channel to bias_amplitude * sigma_c.  When
// channel_sigma is null each channel's own standard deviation is used;
// dataset generation passes dataset-level sigmas so the bias is identical
// across samples.  Grid dims must be divisible by factor.
FieldTensor coarsen(const FieldTensor& field, int factor, uint64_t bias_seed,
                    double bias_amplitude = 0.1,
                    const std::vector<double>* channel_sigma = nullptr);

// Paired dataset on disk: hires/ and coarse/ GridPacks under out_dir plus
// the hi-res normalization statistics (also stored in the hires pack).
// Deterministic: identical (config, n_samples) produce byte-identical packs.
struct DatasetPaths {
    std::string hires;
    std::string coarse;
    NormStats stats;
};
DatasetPaths generate_dataset(const ClimatologyConfig& config, int n_samples,
                              const std::string& out_dir);

}  // namespace ensembledown
