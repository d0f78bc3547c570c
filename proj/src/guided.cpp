#include "ensembledown/guided.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ensembledown/errors.hpp"
#include "ensembledown/verify.hpp"

namespace ensembledown {

void GuidanceConfig::validate() const {
    if (strength < 0.0 || strength > 1.0)
        throw ConfigError("guidance: strength must lie in [0, 1]");
    if (members < 1) throw ConfigError("guidance: members must be >= 1");
}

int start_step(const NoiseSchedule& sched, double s) {
    if (s < 0.0 || s > 1.0) throw ConfigError("guidance: strength must lie in [0, 1]");
    int t = static_cast<int>(std::lround(s * sched.T));
    if (s > 0.0 && t < 1) t = 1;  // noise injected implies at least one reverse step
    return std::min(t, sched.T);
}

void sdedit_block(ScoreSource& src, const NoiseSchedule& sched, double s,
                  std::vector<double>& x, int n, std::vector<RngStream>& streams,
                  double x0_clip) {
    const int t_start = start_step(sched, s);
    if (t_start == 0) return;
    const size_t d = static_cast<size_t>(src.dim());
    if (x.size() != d * static_cast<size_t>(n))
        throw DataError("sdedit: batch size mismatch");
    if (static_cast<int>(streams.size()) != n)
        throw DataError("sdedit: one RNG stream per member required");
    const double a = sched.alpha[t_start];
    const double sg = sched.sigma[t_start];
    for (int m = 0; m < n; ++m) {
        double* row = x.data() + static_cast<size_t>(m) * d;
        for (size_t j = 0; j < d; ++j) row[j] = a * row[j] + sg * streams[m].normal();
    }
    run_reverse_chain(src, sched, t_start, x, n, streams, x0_clip);
}

void sdedit_pair_crn(ScoreSource& src, const NoiseSchedule& sched, double s,
                     std::vector<double>& a, std::vector<double>& b, RngStream& stream) {
    const int t_start = start_step(sched, s);
    if (t_start == 0) return;
    const size_t d = static_cast<size_t>(src.dim());
    if (a.size() != d || b.size() != d) throw DataError("sdedit: state size mismatch");
    const double al = sched.alpha[t_start];
    const double sg = sched.sigma[t_start];
    std::vector<double> x(2 * d), noise(2 * d);
    for (size_t j = 0; j < d; ++j) {
        const double eps = stream.normal();
        x[j] = al * a[j] + sg * eps;
        x[d + j] = al * b[j] + sg * eps;
    }
    for (int t = t_start; t >= 1; --t) {
        if (posterior_coeffs(sched, t).post_std > 0.0)
            for (size_t j = 0; j < d; ++j) {
                const double z = stream.normal();
                noise[j] = z;
                noise[d + j] = z;
            }
        reverse_step(src, sched, t, x, 2, noise);
    }
    std::copy_n(x.data(), d, a.data());
    std::copy_n(x.data() + d, d, b.data());
}

namespace {

void check_preliminary(const DiffusionModel& model, const FieldTensor& preliminary) {
    if (preliminary.ny != model.arch.ny || preliminary.nx != model.arch.nx)
        throw DataError("sdedit: preliminary grid does not match the prior's grid");
    if (preliminary.variable_names != model.variables ||
        preliminary.level_labels != model.levels)
        throw DataError("sdedit: channel layout does not match the prior's layout");
}

// normalized flattened copy of a field
std::vector<double> to_normalized(const DiffusionModel& model, const FieldTensor& field) {
    std::vector<float> norm(field.values);
    normalize_block(norm.data(), model.variables, model.levels, field.plane_size(),
                    model.stats);
    return std::vector<double>(norm.begin(), norm.end());
}

}  // namespace

FieldTensor sdedit(DiffusionModel& model, const FieldTensor& preliminary, double s,
                   uint64_t seed) {
    model.validate();
    check_preliminary(model, preliminary);
    if (start_step(model.schedule, s) == 0) return preliminary;  // exact identity

    std::vector<double> x = to_normalized(model, preliminary);
    std::vector<RngStream> streams;
    streams.emplace_back(seed);  // callers pass fully derived seeds
    NetScoreSource src(model);
    sdedit_block(src, model.schedule, s, x, 1, streams, kNormalizedX0Clip);

    FieldTensor out = preliminary;
    for (size_t j = 0; j < x.size(); ++j) out.values[j] = static_cast<float>(x[j]);
    denormalize_block(out.values.data(), model.variables, model.levels, out.plane_size(),
                      model.stats);
    out.validate();
    return out;
}

EnsembleSet forecast_ensemble(DiffusionModel& model, const FieldTensor& preliminary,
                              const GuidanceConfig& cfg) {
    cfg.validate();
    model.validate();
    check_preliminary(model, preliminary);

    const uint64_t member_root = derive_seed(cfg.seed, "member");
    std::vector<uint64_t> seeds(cfg.members);
    for (int m = 0; m < cfg.members; ++m) seeds[m] = derive_seed(member_root, m);
    EnsembleSet out = make_ensemble(preliminary, seeds);

    if (start_step(model.schedule, cfg.strength) == 0) {
        // zero strength: every member is the preliminary itself, exactly
        for (int m = 0; m < cfg.members; ++m)
            std::copy(preliminary.values.begin(), preliminary.values.end(), out.member(m));
        out.validate();
        return out;
    }

    const std::vector<double> base = to_normalized(model, preliminary);
    NetScoreSource src(model);
    const size_t d = base.size();
    const size_t plane = preliminary.plane_size();
    const int chunk = 256;
    for (int lo = 0; lo < cfg.members; lo += chunk) {
        const int m = std::min(chunk, cfg.members - lo);
        std::vector<RngStream> streams;
        streams.reserve(m);
        for (int i = 0; i < m; ++i) streams.emplace_back(seeds[lo + i]);
        std::vector<double> x(d * static_cast<size_t>(m));
        for (int i = 0; i < m; ++i)
            std::copy_n(base.data(), d, x.data() + static_cast<size_t>(i) * d);
        sdedit_block(src, model.schedule, cfg.strength, x, m, streams, kNormalizedX0Clip);
        for (int i = 0; i < m; ++i) {
            float* dst = out.member(lo + i);
            const double* sx = x.data() + static_cast<size_t>(i) * d;
            for (size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(sx[j]);
            denormalize_block(dst, model.variables, model.levels, plane, model.stats);
        }
    }
    out.validate();
    return out;
}

// ----------------------------------------------------------------- sweep

std::vector<SweepRow> sweep_strength(DiffusionModel& model, DownscalerModel& down,
                                     const std::vector<FieldTensor>& coarse,
                                     const std::vector<FieldTensor>& truth,
                                     const std::vector<double>& s_grid, int members,
                                     uint64_t seed) {
    if (coarse.empty()) throw DataError("sweep: empty evaluation set");
    if (coarse.size() != truth.size())
        throw DataError("sweep: coarse/truth pair count mismatch");
    if (s_grid.empty()) throw DataError("sweep: empty strength grid");
    if (members < 2) throw ConfigError("sweep: need at least 2 members");

    // preliminaries are strength-independent; compute once
    std::vector<FieldTensor> prelim;
    prelim.reserve(coarse.size());
    for (const auto& c : coarse) prelim.push_back(predict(down, c));

    std::vector<SweepRow> rows;
    for (size_t si = 0; si < s_grid.size(); ++si) {
        const double s = s_grid[si];
        std::vector<EnsembleSet> ensembles;
        ensembles.reserve(prelim.size());
        double crps_sum = 0.0;
        double sq_sum = 0.0;
        size_t sq_count = 0;
        for (size_t p = 0; p < prelim.size(); ++p) {
            GuidanceConfig g;
            g.strength = s;
            g.members = members;
            g.seed = derive_seed(derive_seed(derive_seed(seed, "sweep"), si), p);
            EnsembleSet ens = forecast_ensemble(model, prelim[p], g);
            crps_sum += crps_field(ens, truth[p]);
            const size_t n = ens.member_size();
            for (size_t j = 0; j < n; ++j) {
                double m = 0.0;
                for (int k = 0; k < ens.n_members(); ++k) m += ens.member(k)[j];
                m /= ens.n_members();
                const double dlt = m - truth[p].values[j];
                sq_sum += dlt * dlt;
            }
            sq_count += n;
            ensembles.push_back(std::move(ens));
        }
        SpreadSkill ss = spread_skill(ensembles, truth);
        SweepRow row;
        row.s = s;
        row.crps = crps_sum / static_cast<double>(prelim.size());
        row.rmse = std::sqrt(sq_sum / static_cast<double>(sq_count));
        row.ssr = ss.ssr;
        row.n_pairs = static_cast<int>(prelim.size());
        row.members = members;
        rows.push_back(row);
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "s,crps,rmse,ssr,n_pairs,members\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%.10g,%d,%d\n", r.s, r.crps,
                      r.rmse, r.ssr, r.n_pairs, r.members);
        out += buf;
    }
    return out;
}

// -------------------------------------------------------- decomposition

double DecompCurve::gap_se_reconstruction(size_t i) const {
    const auto& a = reconstruction_draws[i];
    const auto& b = reconstruction_draws[i + 1];
    double m = 0.0;
    for (size_t j = 0; j < a.size(); ++j) m += b[j] - a[j];
    m /= a.size();
    double v = 0.0;
    for (size_t j = 0; j < a.size(); ++j) {
        const double d = (b[j] - a[j]) - m;
        v += d * d;
    }
    v /= (a.size() - 1);
    return std::sqrt(v / a.size());
}

double DecompCurve::gap_se_divergence(size_t i) const {
    const auto& a = divergence_draws[i];
    const auto& b = divergence_draws[i + 1];
    double m = 0.0;
    for (size_t j = 0; j < a.size(); ++j) m += b[j] - a[j];
    m /= a.size();
    double v = 0.0;
    for (size_t j = 0; j < a.size(); ++j) {
        const double d = (b[j] - a[j]) - m;
        v += d * d;
    }
    v /= (a.size() - 1);
    return std::sqrt(v / a.size());
}

DecompCurve error_decomposition_curve(GaussianScoreOracle& oracle, const NoiseSchedule& sched,
                                      const std::vector<double>& preliminary,
                                      const std::vector<double>& s_grid, int draws,
                                      uint64_t seed) {
    const size_t d = static_cast<size_t>(oracle.dim());
    if (preliminary.size() != d) throw DataError("decomposition: preliminary size mismatch");
    if (draws < 2) throw ConfigError("decomposition: need at least 2 draws");
    for (double s : s_grid)
        if (s < 0.0 || s > 1.0) throw ConfigError("decomposition: s outside [0, 1]");

    DecompCurve curve;
    curve.s_grid = s_grid;
    curve.reconstruction_draws.assign(s_grid.size(), {});
    curve.divergence_draws.assign(s_grid.size(), {});
    for (auto& v : curve.reconstruction_draws) v.reserve(draws);
    for (auto& v : curve.divergence_draws) v.reserve(draws);

    const uint64_t truth_root = derive_seed(seed, "truth");
    const uint64_t draw_root = derive_seed(seed, "draw");
    for (int i = 0; i < draws; ++i) {
        RngStream truth_rng(derive_seed(truth_root, i));
        const std::vector<double> truth = oracle.sample_data(truth_rng);
        for (size_t si = 0; si < s_grid.size(); ++si) {
            // one stream per (draw) reused at every s: common random numbers
            RngStream crn(derive_seed(draw_root, i));
            std::vector<double> a = truth;
            std::vector<double> b = preliminary;
            sdedit_pair_crn(oracle, sched, s_grid[si], a, b, crn);
            double rec = 0.0, div = 0.0;
            for (size_t j = 0; j < d; ++j) {
                const double e1 = truth[j] - a[j];
                const double e2 = a[j] - b[j];
                rec += e1 * e1;
                div += e2 * e2;
            }
            curve.reconstruction_draws[si].push_back(rec);
            curve.divergence_draws[si].push_back(div);
        }
    }
    curve.reconstruction.resize(s_grid.size());
    curve.divergence.resize(s_grid.size());
    for (size_t si = 0; si < s_grid.size(); ++si) {
        double r = 0.0, v = 0.0;
        for (int i = 0; i < draws; ++i) {
            r += curve.reconstruction_draws[si][i];
            v += curve.divergence_draws[si][i];
        }
        curve.reconstruction[si] = r / draws;
        curve.divergence[si] = v / draws;
    }
    return curve;
}

DecompTerms error_decomposition(GaussianScoreOracle& oracle, const NoiseSchedule& sched,
                                const std::vector<double>& preliminary, double s, int draws,
                                uint64_t seed) {
    DecompCurve curve =
        error_decomposition_curve(oracle, sched, preliminary, {s}, draws, seed);
    return {curve.reconstruction[0], curve.divergence[0]};
}

}  // namespace ensembledown
