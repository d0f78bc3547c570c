#pragma once

#include <cstdint>
#include <vector>

namespace ensembledown {

// Shared training hyperparameters: adaptive-moment optimizer with a
// cosine-annealed learning rate (period in epochs, floor as a fraction of the
// initial rate).
struct TrainConfig {
    double lr = 1e-4;
    int batch = 16;
    int epochs = 40;
    uint64_t seed = 1;
    double cosine_period_epochs = 20.0;
    double lr_floor_frac = 0.01;
    double holdout_frac = 0.1;

    void validate() const;
};

struct TrainStats {
    std::vector<double> train_loss;    // per epoch
    std::vector<double> holdout_loss;  // per epoch, fixed draws
    int epochs_run = 0;
};

}  // namespace ensembledown
