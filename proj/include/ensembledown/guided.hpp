#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ensembledown/diffusion.hpp"
#include "ensembledown/downscaler.hpp"
#include "ensembledown/field.hpp"

namespace ensembledown {

// Noise-then-denoise guided sampling around a preliminary prediction.
// Convention: strength s in [0, 1]; s = 0 injects no noise and runs no
// reverse steps (identity), s = 1 perturbs to the terminal step where the
// preliminary is effectively erased and sampling follows the prior.
struct GuidanceConfig {
    double strength = 0.1;
    int members = 100;
    uint64_t seed = 1;

    void validate() const;
};

// t_start = round(s * T); any s > 0 maps to at least step 1 so that injected
// noise is always followed by at least one reverse step.
int start_step(const NoiseSchedule& sched, double s);

// Normalized-space core: perturb each row of x (batch [n, dim]) to t_start
// with noise from its member stream, then run the reverse chain down to 0.
// x0_clip is forwarded to the reverse steps (0 disables clamping).
void sdedit_block(ScoreSource& src, const NoiseSchedule& sched, double s,
                  std::vector<double>& x, int n, std::vector<RngStream>& streams,
                  double x0_clip = 0.0);

// Runs the procedure on two states with identical noise draws (common random
// numbers) from one stream; used by the error-decomposition experiment.
void sdedit_pair_crn(ScoreSource& src, const NoiseSchedule& sched, double s,
                     std::vector<double>& a, std::vector<double>& b, RngStream& stream);

// Physical-units single draw. s = 0 returns the preliminary bit-for-bit.
FieldTensor sdedit(DiffusionModel& model, const FieldTensor& preliminary, double s,
                   uint64_t seed);

// M independent draws; member m's stream is derived from (seed, m) and the
// members share no state, so any member is reproducible in isolation.
EnsembleSet forecast_ensemble(DiffusionModel& model, const FieldTensor& preliminary,
                              const GuidanceConfig& cfg);

// ---------------------------------------------------------------------------
// Noise-strength sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    double s = 0.0;
    double crps = 0.0;  // mean over pairs of field-mean ensemble CRPS
    double rmse = 0.0;  // pooled RMSE of the ensemble mean
    double ssr = 0.0;   // pooled spread-skill ratio
    int n_pairs = 0;
    int members = 0;
};

// For each strength: downscale every coarse field, generate an M-member
// guided ensemble per pair, verify against the matching truth.
std::vector<SweepRow> sweep_strength(DiffusionModel& model, DownscalerModel& down,
                                     const std::vector<FieldTensor>& coarse,
                                     const std::vector<FieldTensor>& truth,
                                     const std::vector<double>& s_grid, int members,
                                     uint64_t seed);

// CSV with header "s,crps,rmse,ssr,n_pairs,members".
std::string sweep_csv(const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------------
// Error-decomposition experiment (Gaussian-oracle setting)
// ---------------------------------------------------------------------------

struct DecompCurve {
    std::vector<double> s_grid;
    std::vector<double> reconstruction;  // E || truth - G(truth, s) ||^2
    std::vector<double> divergence;      // E || G(truth, s) - G(prelim, s) ||^2
    // per-draw values, [s index][draw]; shared draw seeds across s values so
    // adjacent-s comparisons are paired (common random numbers)
    std::vector<std::vector<double>> reconstruction_draws;
    std::vector<std::vector<double>> divergence_draws;

    // standard error of the paired difference curve[i+1] - curve[i]
    double gap_se_reconstruction(size_t i) const;
    double gap_se_divergence(size_t i) const;
};

DecompCurve error_decomposition_curve(GaussianScoreOracle& oracle, const NoiseSchedule& sched,
                                      const std::vector<double>& preliminary,
                                      const std::vector<double>& s_grid, int draws,
                                      uint64_t seed);

struct DecompTerms {
    double term_reconstruction = 0.0;
    double term_divergence = 0.0;
};

DecompTerms error_decomposition(GaussianScoreOracle& oracle, const NoiseSchedule& sched,
                                const std::vector<double>& preliminary, double s, int draws,
                                uint64_t seed);

}  // namespace ensembledown
