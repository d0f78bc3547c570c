#pragma once

#include <string>
#include <vector>

#include "ensembledown/field.hpp"
#include "ensembledown/nn/net.hpp"
#include "ensembledown/train.hpp"

namespace ensembledown {

// Supervised coarse-to-fine regression model: the preliminary prediction that
// guided sampling later refines. Trained and evaluated in normalized space;
// the public predict() is denormalized at the boundary.
struct DownscalerModel {
    nn::RegressionNet<float> net;
    nn::RegressionConfig arch;
    NormStats stats;  // fine-grid channel statistics, used for input and output
    std::vector<std::string> variables;
    std::vector<std::string> levels;
    double grid_spacing_km = 1.0;  // fine-grid spacing

    void validate() const;
};

// Trains model.net on paired normalized blocks: coarse [n, C, cny, cnx] and
// fine [n, C, fny, fnx]. Loss is per-element mean squared error. The held-out
// fold is the trailing holdout_frac of the pairs. Aborts with NumericError on
// divergent loss.
TrainStats train_downscaler(DownscalerModel& model, const std::vector<float>& coarse,
                            const std::vector<float>& fine, int n, const TrainConfig& cfg);

// Deterministic single-field prediction, physical units in and out.
FieldTensor predict(DownscalerModel& model, const FieldTensor& coarse);

// Normalized-space batch prediction used by the pipeline, [n, C, cny, cnx] ->
// [n, C, fny, fnx].
void predict_block(DownscalerModel& model, const std::vector<float>& coarse, int n,
                   std::vector<float>& fine);

// Separable Catmull-Rom bicubic upsampling by an integer factor, channel-wise.
// Coarse samples sit at block centers; boundaries use linear extension.
FieldTensor bicubic_baseline(const FieldTensor& coarse, int factor);

// Raw-plane variant: in [ny, nx] -> out [ny*factor, nx*factor].
void bicubic_upsample_plane(const float* in, int ny, int nx, int factor, float* out);

void save_downscaler(DownscalerModel& model, const std::string& dir);
DownscalerModel load_downscaler(const std::string& dir);

}  // namespace ensembledown
