#pragma once

#include <string>
#include <vector>

#include "ensembledown/field.hpp"

namespace ensembledown {

// ---------------------------------------------------------------------------
// Parametric turbine power curve
// ---------------------------------------------------------------------------

// Piecewise curve: 0 below cut-in, cubic ramp up to rated speed, the rated
// plateau, and a hard drop to 0 at cut-out (the one discontinuity — turbines
// shut down). Speeds in m/s, power in MW.
struct PowerCurve {
    double cut_in = 3.0;
    double rated_speed = 12.0;
    double cut_out = 25.0;
    double rated_power = 0.0;

    // 0 < cut_in < rated_speed < cut_out and rated_power > 0
    void validate() const;
};

// Power at one wind speed:
//   [0, cut_in)            -> 0
//   [cut_in, rated_speed)  -> rated_power * (v^3 - ci^3) / (r^3 - ci^3)
//   [rated_speed, cut_out) -> rated_power
//   [cut_out, inf)         -> 0
// Throws DataError on negative speed.
double power_from_wind(const PowerCurve& curve, double speed);

// ---------------------------------------------------------------------------
// Farm accounting
// ---------------------------------------------------------------------------

struct FarmSpec {
    double capacity_mw = 0.0;
    std::string hub_height_level;  // level label carrying hub-height winds
    double price_per_mwh = 0.0;
    // true: curve applied to the farm-mean wind speed (default);
    // false: per-point powers averaged instead
    bool power_of_mean_speed = true;

    void validate() const;  // capacity > 0, price >= 0, level label non-empty
};

// Per-member farm power. Each member's u/v planes at the hub-height level
// give a point-wise speed field; the farm value is either the curve at the
// grid-mean speed or the grid mean of point powers (see FarmSpec). Throws
// DataError when the ensemble lacks u or v at the hub-height level.
std::vector<double> ensemble_power(const EnsembleSet& ensemble, const PowerCurve& curve,
                                   const FarmSpec& farm);

// ---------------------------------------------------------------------------
// Accuracy and economics
// ---------------------------------------------------------------------------

// Order statistic of obs at one-based rank ceil(q * n) (ascending sort).
// With q = 0.75 the values strictly above the threshold are 25% of the
// series to within one case. Throws on empty obs or q outside (0, 1).
double quantile_threshold(std::vector<double> obs, double q);

struct AccuracyReport {
    double overall_c_r = 0.0;  // capacity-normalized accuracy, percent
    double overall_mae = 0.0;  // MW
    double threshold_mw = 0.0; // extreme-event cutoff (obs quantile)
    int extreme_count = 0;     // cases with obs strictly above the cutoff
    bool extreme_defined = false;  // false when that subset is empty
    double extreme_c_r = 0.0;  // percent; meaningful only when defined
    double extreme_mae = 0.0;  // MW;      meaningful only when defined
};

// Aligned power series (predictions vs observations, MW) scored overall and
// on the extreme subset obs > quantile_threshold(obs, extreme_quantile).
// An empty extreme subset is reported via extreme_defined = false rather
// than as a silent zero.
AccuracyReport accuracy_report(const std::vector<double>& pred,
                               const std::vector<double>& obs, const FarmSpec& farm,
                               double extreme_quantile = 0.75);

// Daily-style benefit of an accuracy change: delta_c_r (fraction, not
// percent) * capacity (MW) * hours * price (per MWh). Linear in every
// argument; a negative delta yields a negative gain (a loss).
double economic_gain(double delta_c_r, double capacity_mw, double price_per_mwh,
                     double hours);

}  // namespace ensembledown
