#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ensembledown/guided.hpp"
#include "ensembledown/synthclim.hpp"
#include "ensembledown/train.hpp"
#include "ensembledown/windpower.hpp"

namespace ensembledown {

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------
//
// One JSON document drives every stage (see docs/cli.md for the schema and
// configs/ for ready-made files). Parsing is strict: unknown keys anywhere
// are a ConfigError, so typos fail fast instead of silently using defaults.
//
// Seeding: each stage derives its seed as derive_seed(master_seed, stage
// name); whatever further splitting a stage needs (members, cases) hangs off
// that stage seed. No global RNG exists anywhere.

struct PipelineConfig {
    uint64_t master_seed = 1;
    std::string out_root = "runs/out";

    // data generation (climatology.master_seed is derived, not configured)
    ClimatologyConfig clim;
    int n_samples = 3020;

    // diffusion schedule
    int schedule_T = 1000;

    // prior architecture + training
    int prior_width = 32;
    int prior_depth = 2;
    int prior_time_dim = 0;  // 0 -> network default (2 * width)
    bool prior_coords = true;
    bool prior_pos_embed = true;
    TrainConfig prior_train;

    // downscaler architecture + training
    int down_width = 32;
    bool down_coords = true;
    bool down_out_bias = true;
    TrainConfig down_train;

    // guided forecasting
    GuidanceConfig guidance;  // strength + members; seeds are derived

    // evaluation
    int eval_pairs = 20;          // trailing cases excluded from all training
    int eval_members = 50;        // ensemble size for the strength sweep
    std::vector<double> sweep_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                      0.6, 0.7, 0.8, 0.9, 1.0};
    int climatology_samples = 0;  // 0: match the training-split size

    // wind power
    PowerCurve curve;
    FarmSpec farm;
    double extreme_quantile = 0.75;

    void validate() const;

    // canonical form: every field except out_root (a storage location, not
    // part of the experiment), sorted keys, defaults filled in
    std::string canonical_json() const;
    // FNV-1a hash of the canonical form, as fixed-width hex; invariant under
    // relocation of the output tree
    std::string config_hash() const;

    static PipelineConfig from_json_text(const std::string& text);
    static PipelineConfig from_json_file(const std::string& path);
};

// "a:b:step" inclusive range (e.g. "0:1:0.1") or comma list "0,0.3,1".
std::vector<double> parse_strength_grid(const std::string& text);

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------
//
// Every stage writes its outputs plus a stage.json manifest (stage name,
// derived seed, config hash, input/output paths relative to out_root) into
// its directory under out_root and returns that directory. Timing goes to
// stderr only, keeping output trees byte-identical across reruns.

std::string stage_synth_data(const PipelineConfig& cfg);
std::string stage_train_prior(const PipelineConfig& cfg);
std::string stage_train_downscaler(const PipelineConfig& cfg);
// n = 0 draws cfg.guidance.members samples
std::string stage_sample_prior(const PipelineConfig& cfg, int n = 0);
std::string stage_downscale(const PipelineConfig& cfg);
std::string stage_forecast(const PipelineConfig& cfg);
std::string stage_sweep(const PipelineConfig& cfg);
std::string stage_evaluate(const PipelineConfig& cfg);
// n = 0 matches the training-split size (capped by climatology_samples)
std::string stage_climatology(const PipelineConfig& cfg, int n = 0);
std::string stage_power(const PipelineConfig& cfg);

// All stages in dependency order.
void run_pipeline(const PipelineConfig& cfg);

// Times prior sampling at each requested ensemble size; writes
// reports/benchmark/benchmark.json (timings included — this stage is not
// part of the determinism contract). Requires a trained prior checkpoint.
std::string stage_benchmark(const PipelineConfig& cfg, std::vector<int> member_counts);

}  // namespace ensembledown
