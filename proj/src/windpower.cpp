#include "ensembledown/windpower.hpp"

#include <algorithm>
#include <cmath>

#include "ensembledown/errors.hpp"
#include "ensembledown/verify.hpp"

namespace ensembledown {

void PowerCurve::validate() const {
    if (!(cut_in > 0.0)) throw ConfigError("power curve: cut-in speed must be > 0");
    if (!(cut_in < rated_speed))
        throw ConfigError("power curve: cut-in must lie below the rated speed");
    if (!(rated_speed < cut_out))
        throw ConfigError("power curve: rated speed must lie below cut-out");
    if (!(rated_power > 0.0)) throw ConfigError("power curve: rated power must be > 0");
}

double power_from_wind(const PowerCurve& curve, double speed) {
    curve.validate();
    if (speed < 0.0) throw DataError("power curve: negative wind speed");
    if (speed < curve.cut_in || speed >= curve.cut_out) return 0.0;
    if (speed >= curve.rated_speed) return curve.rated_power;
    const double ci3 = curve.cut_in * curve.cut_in * curve.cut_in;
    const double r3 = curve.rated_speed * curve.rated_speed * curve.rated_speed;
    const double v3 = speed * speed * speed;
    return curve.rated_power * (v3 - ci3) / (r3 - ci3);
}

void FarmSpec::validate() const {
    if (!(capacity_mw > 0.0)) throw ConfigError("farm: capacity must be > 0");
    if (price_per_mwh < 0.0) throw ConfigError("farm: price must be >= 0");
    if (hub_height_level.empty()) throw ConfigError("farm: hub-height level label is empty");
}

std::vector<double> ensemble_power(const EnsembleSet& ensemble, const PowerCurve& curve,
                                   const FarmSpec& farm) {
    curve.validate();
    farm.validate();
    auto index_of = [](const std::vector<std::string>& names, const std::string& want) {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == want) return static_cast<int>(i);
        return -1;
    };
    const int ui = index_of(ensemble.variable_names, "u");
    const int vi = index_of(ensemble.variable_names, "v");
    const int li = index_of(ensemble.level_labels, farm.hub_height_level);
    if (ui < 0 || vi < 0)
        throw DataError("ensemble power: ensemble lacks u/v wind components");
    if (li < 0)
        throw DataError("ensemble power: hub-height level '" + farm.hub_height_level +
                        "' not present in the ensemble");

    const size_t plane = static_cast<size_t>(ensemble.ny) * ensemble.nx;
    const size_t n_levels = ensemble.level_labels.size();
    std::vector<double> out(ensemble.n_members());
    for (int m = 0; m < ensemble.n_members(); ++m) {
        const float* base = ensemble.member(m);
        const float* up = base + (static_cast<size_t>(ui) * n_levels + li) * plane;
        const float* vp = base + (static_cast<size_t>(vi) * n_levels + li) * plane;
        if (farm.power_of_mean_speed) {
            double mean_speed = 0.0;
            for (size_t j = 0; j < plane; ++j) mean_speed += std::hypot(up[j], vp[j]);
            out[m] = power_from_wind(curve, mean_speed / static_cast<double>(plane));
        } else {
            double mean_power = 0.0;
            for (size_t j = 0; j < plane; ++j)
                mean_power += power_from_wind(curve, std::hypot(up[j], vp[j]));
            out[m] = mean_power / static_cast<double>(plane);
        }
    }
    return out;
}

double quantile_threshold(std::vector<double> obs, double q) {
    if (obs.empty()) throw DataError("quantile: empty series");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile: q must lie in (0, 1)");
    std::sort(obs.begin(), obs.end());
    const auto n = static_cast<double>(obs.size());
    auto rank = static_cast<size_t>(std::ceil(q * n));  // one-based
    rank = std::clamp<size_t>(rank, 1, obs.size());
    return obs[rank - 1];
}

AccuracyReport accuracy_report(const std::vector<double>& pred,
                               const std::vector<double>& obs, const FarmSpec& farm,
                               double extreme_quantile) {
    farm.validate();
    if (pred.size() != obs.size())
        throw DataError("accuracy: prediction/observation length mismatch");
    if (obs.empty()) throw DataError("accuracy: empty series");

    const std::vector<double> caps(obs.size(), farm.capacity_mw);
    AccuracyReport rep;
    rep.overall_c_r = capacity_ratio_percent(pred, obs, caps);
    double abs_sum = 0.0;
    for (size_t i = 0; i < obs.size(); ++i) abs_sum += std::abs(pred[i] - obs[i]);
    rep.overall_mae = abs_sum / static_cast<double>(obs.size());

    rep.threshold_mw = quantile_threshold(obs, extreme_quantile);
    std::vector<double> ep, eo;
    for (size_t i = 0; i < obs.size(); ++i)
        if (obs[i] > rep.threshold_mw) {
            ep.push_back(pred[i]);
            eo.push_back(obs[i]);
        }
    rep.extreme_count = static_cast<int>(eo.size());
    rep.extreme_defined = !eo.empty();
    if (rep.extreme_defined) {
        const std::vector<double> ecaps(eo.size(), farm.capacity_mw);
        rep.extreme_c_r = capacity_ratio_percent(ep, eo, ecaps);
        double esum = 0.0;
        for (size_t i = 0; i < eo.size(); ++i) esum += std::abs(ep[i] - eo[i]);
        rep.extreme_mae = esum / static_cast<double>(eo.size());
    }
    return rep;
}

double economic_gain(double delta_c_r, double capacity_mw, double price_per_mwh,
                     double hours) {
    return delta_c_r * capacity_mw * hours * price_per_mwh;
}

}  // namespace ensembledown
