#pragma once

#include <cstdint>
#include <vector>

#include "ensembledown/nn/tensor.hpp"

namespace ensembledown::nn {

// Adaptive-moment gradient optimizer. Moment state is kept in double even for
// float parameters so long runs stay numerically stable and reproducible.
// An optional cosine-annealed learning rate cycles between the initial value
// and a floor with a fixed period, restarting at every period boundary.
template <typename T>
class Adam {
public:
    Adam(ParamRefs<T> refs, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    // lr(e) = floor + (lr0 - floor) * 0.5 * (1 + cos(pi * frac)), where frac is
    // the position within the current period; floor = floor_frac * lr0.
    void set_cosine_schedule(double period_epochs, double floor_frac);
    // epoch may be fractional (e.g. epoch + batch/batches) for smooth annealing.
    void begin_epoch(double epoch);

    void step();
    void zero_grads();
    double current_lr() const { return lr_; }

private:
    ParamRefs<T> refs_;
    double lr0_;
    double lr_;
    double beta1_, beta2_, eps_;
    double period_epochs_ = 0.0;  // 0 disables annealing
    double floor_frac_ = 0.0;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace ensembledown::nn
