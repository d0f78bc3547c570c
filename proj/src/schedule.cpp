#include "ensembledown/schedule.hpp"

#include <cmath>
#include <sstream>

#include "ensembledown/errors.hpp"

namespace ensembledown {

namespace {
constexpr double kAlphaFloor = 1e-4;
constexpr double kPi = 3.14159265358979323846;
}  // namespace

void NoiseSchedule::validate() const {
    if (T < 1 || alpha.size() != static_cast<size_t>(T) + 1 || sigma.size() != alpha.size())
        throw NumericError("schedule: inconsistent array lengths");
    if (alpha[0] != 1.0 || sigma[0] != 0.0)
        throw NumericError("schedule: must start at (alpha, sigma) = (1, 0)");
    if (alpha[T] > 1e-3) throw NumericError("schedule: terminal alpha exceeds 1e-3");
    for (int t = 0; t <= T; ++t) {
        if (alpha[t] < 0.0 || alpha[t] > 1.0 || sigma[t] < 0.0 || sigma[t] > 1.0)
            throw NumericError("schedule: coefficient outside [0, 1]");
        double vp = alpha[t] * alpha[t] + sigma[t] * sigma[t];
        if (std::abs(vp - 1.0) > 1e-9) {
            std::ostringstream os;
            os << "schedule: alpha^2 + sigma^2 = " << vp << " at t = " << t;
            throw NumericError(os.str());
        }
        if (t > 0 && !(alpha[t] < alpha[t - 1]))
            throw NumericError("schedule: alpha not strictly decreasing at t = " +
                               std::to_string(t));
        if (t > 0 && !(sigma[t] > sigma[t - 1]))
            throw NumericError("schedule: sigma not strictly increasing at t = " +
                               std::to_string(t));
    }
}

ReverseCoeffs posterior_coeffs(const NoiseSchedule& s, int t) {
    if (t < 1 || t > s.T)
        throw ConfigError("posterior_coeffs: t = " + std::to_string(t) + " outside [1, " +
                          std::to_string(s.T) + "]");
    const double step = s.alpha[t] / s.alpha[t - 1];  // per-step decay a_t
    const double step2 = step * step;
    const double s2_t = s.sigma2(t);
    const double s2_prev = s.sigma2(t - 1);
    ReverseCoeffs c;
    c.mean_x0 = s.alpha[t - 1] * (1.0 - step2) / s2_t;
    c.mean_xt = step * s2_prev / s2_t;
    c.post_std = std::sqrt(s2_prev * (1.0 - step2) / s2_t);
    return c;
}

NoiseSchedule make_schedule(int T, const std::string& kind) {
    if (T < 10) throw ConfigError("make_schedule: T must be >= 10, got " + std::to_string(T));
    if (kind != "cosine-vp")
        throw ConfigError("make_schedule: unknown schedule kind '" + kind + "'");
    NoiseSchedule s;
    s.T = T;
    s.alpha.resize(T + 1);
    s.sigma.resize(T + 1);
    for (int t = 0; t <= T; ++t) {
        double a = std::cos((static_cast<double>(t) / T) * (kPi / 2.0));
        a = std::max(a, kAlphaFloor);
        s.alpha[t] = a;
        s.sigma[t] = std::sqrt(std::max(0.0, 1.0 - a * a));
    }
    s.alpha[0] = 1.0;
    s.sigma[0] = 0.0;
    s.validate();
    return s;
}

}  // namespace ensembledown
