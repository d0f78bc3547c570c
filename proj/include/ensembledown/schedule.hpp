#pragma once

#include <string>
#include <vector>

namespace ensembledown {

// Discretized variance-preserving noise schedule.  alpha/sigma are indexed
// t = 0..T with alpha[0] = 1, sigma[0] = 0; the forward process at step t is
// x_t = alpha[t] * x0 + sigma[t] * eps with alpha^2 + sigma^2 = 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha;  // size T+1, strictly decreasing
    std::vector<double> sigma;  // size T+1, strictly increasing

    double alpha2(int t) const { return alpha[t] * alpha[t]; }
    double sigma2(int t) const { return sigma[t] * sigma[t]; }

    // throws NumericError if the invariants are violated
    void validate() const;
};

// Ancestral-posterior coefficients for one reverse step t -> t-1, t in [1, T]:
//   mean   = mean_x0 * xhat0 + mean_xt * x_t
//   sample = mean + post_std * z
// post_std is exactly 0 at t = 1 (the final step is deterministic).
struct ReverseCoeffs {
    double mean_x0 = 0.0;
    double mean_xt = 0.0;
    double post_std = 0.0;
};

ReverseCoeffs posterior_coeffs(const NoiseSchedule& schedule, int t);

// kind "cosine-vp": alpha_t = cos((t/T) * pi/2), floored at 1e-4 at the noisy
// end so the terminal marginal stays non-degenerate.  Throws ConfigError for
// T < 10 or an unknown kind.
NoiseSchedule make_schedule(int T, const std::string& kind = "cosine-vp");

}  // namespace ensembledown
