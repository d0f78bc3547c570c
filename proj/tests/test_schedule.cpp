#include <doctest.h>

#include <cmath>

#include "ensembledown/errors.hpp"
#include "ensembledown/schedule.hpp"

using namespace ensembledown;

TEST_CASE("cosine schedule boundary values and invariants") {
    for (int T : {10, 64, 1000}) {
        CAPTURE(T);
        NoiseSchedule s = make_schedule(T);
        CHECK(s.alpha[0] == 1.0);
        CHECK(s.sigma[0] == 0.0);
        CHECK(s.alpha[T] <= 1e-3);
        CHECK(s.alpha[T] >= 1e-4);
        for (int t = 0; t <= T; ++t) {
            CHECK(s.alpha2(t) + s.sigma2(t) == doctest::Approx(1.0).epsilon(1e-9));
            if (t > 0) {
                CHECK(s.alpha[t] < s.alpha[t - 1]);
                CHECK(s.sigma[t] > s.sigma[t - 1]);
            }
        }
    }
}

TEST_CASE("midpoint of the cosine schedule") {
    NoiseSchedule s = make_schedule(1000);
    // cos(pi/4), frozen independently
    CHECK(s.alpha[500] == doctest::Approx(0.70710678118654752).epsilon(1e-12));
    CHECK(s.sigma[500] == doctest::Approx(0.70710678118654752).epsilon(1e-12));
}

TEST_CASE("invalid schedule requests are config errors") {
    CHECK_THROWS_AS(make_schedule(9), ConfigError);
    CHECK_THROWS_AS(make_schedule(64, "linear"), ConfigError);
}

TEST_CASE("posterior coefficients reduce correctly at the final step") {
    NoiseSchedule s = make_schedule(100);
    ReverseCoeffs c = posterior_coeffs(s, 1);
    // sigma_0 = 0 makes the t=1 step collapse onto the denoised estimate
    CHECK(c.mean_x0 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c.mean_xt == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(c.post_std == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_AS(posterior_coeffs(s, 0), ConfigError);
    CHECK_THROWS_AS(posterior_coeffs(s, 101), ConfigError);
}

TEST_CASE("posterior coefficients match the closed-form Gaussian identity") {
    // For x0 fixed, the forward marginals give the exact conditional
    //   E[x_{t-1} | x_t, x0] and Var[x_{t-1} | x_t, x0]
    // via the bivariate Gaussian of (x_{t-1}, x_t); the schedule must agree.
    NoiseSchedule s = make_schedule(200);
    for (int t : {2, 17, 100, 200}) {
        CAPTURE(t);
        const double a_t = s.alpha[t], a_p = s.alpha[t - 1];
        const double v_t = s.sigma2(t), v_p = s.sigma2(t - 1);
        const double step = a_t / a_p;
        // cov(x_{t-1}, x_t | x0) = step * v_p, var(x_t | x0) = v_t
        const double k = step * v_p / v_t;  // regression slope on x_t
        const double mean_x0 = a_p - k * a_t;
        const double var = v_p - k * step * v_p;
        ReverseCoeffs c = posterior_coeffs(s, t);
        CHECK(c.mean_xt == doctest::Approx(k).epsilon(1e-12));
        CHECK(c.mean_x0 == doctest::Approx(mean_x0).epsilon(1e-10));
        CHECK(c.post_std == doctest::Approx(std::sqrt(std::max(0.0, var))).epsilon(1e-9));
    }
}
