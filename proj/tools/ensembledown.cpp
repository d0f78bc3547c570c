// ensembledown: command-line front end for the diffusion downscaling pipeline.
//
// Every subcommand is driven by one JSON config (see docs/cli.md and
// configs/); flags override individual values. Exit codes: 0 success,
// 2 configuration error, 3 data error, 4 numeric failure, 1 anything else.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ensembledown/diffusion.hpp"
#include "ensembledown/downscaler.hpp"
#include "ensembledown/errors.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/guided.hpp"
#include "ensembledown/pipeline.hpp"
#include "ensembledown/rng.hpp"
#include "ensembledown/verify.hpp"
#include "ensembledown/windpower.hpp"

namespace ed = ensembledown;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// options shared by every subcommand
struct Common {
    std::string config_path;
    std::string out_root;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    int jobs = 1;
};

void add_common(CLI::App* cmd, const std::shared_ptr<Common>& c) {
    cmd->add_option("--config", c->config_path, "pipeline config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", c->out_root, "override the config's output root");
    c->seed_opt = cmd->add_option("--seed", c->seed, "override the config's master seed");
    cmd->add_option("--jobs", c->jobs,
                    "worker cap (the reference kernels are single-threaded, so any "
                    "value runs sequentially)")
        ->check(CLI::Range(1, 4096));
}

ed::PipelineConfig load_config(const Common& c) {
    ed::PipelineConfig cfg = ed::PipelineConfig::from_json_file(c.config_path);
    if (!c.out_root.empty()) cfg.out_root = c.out_root;
    if (c.seed_opt && c.seed_opt->count() > 0) cfg.master_seed = c.seed;
    cfg.validate();
    return cfg;
}

void emit_report(const json& report, const std::string& out_path) {
    const std::string text = report.dump(2) + "\n";
    if (out_path.empty() || out_path == "-") {
        std::fputs(text.c_str(), stdout);
        return;
    }
    fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw ed::DataError("cannot write " + out_path);
    out << text;
    std::printf("%s\n", out_path.c_str());
}

// A forecast argument is either one ensemble GridPack or a directory of them
// (e.g. forecasts/ensembles/case_*); cases come back sorted by name.
std::vector<ed::EnsembleSet> load_forecast_cases(const std::string& path) {
    if (!fs::exists(path)) throw ed::DataError("no such path: " + path);
    if (fs::exists(fs::path(path) / "manifest.json")) return {ed::read_ensemble(path)};
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
            names.push_back(entry.path().string());
    std::sort(names.begin(), names.end());
    std::vector<ed::EnsembleSet> cases;
    for (const auto& name : names) cases.push_back(ed::read_ensemble(name));
    if (cases.empty()) throw ed::DataError("no ensemble packs under " + path);
    return cases;
}

std::vector<std::string> csv_attr(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

// A truth argument is a field GridPack (one case) or a bundle whose "fields"
// array is [n, C, ny, nx] with variables/levels/grid_spacing_km attributes.
std::vector<ed::FieldTensor> load_truth_cases(const std::string& path) {
    const std::string kind = ed::gridpack_kind(path);
    if (kind == "field") return {ed::read_field(path)};
    if (kind != "bundle")
        throw ed::DataError("truth pack must be a field or a bundle, got '" + kind + "'");
    ed::GridPackReader r(path);
    const auto shape = r.array_shape("fields");
    if (shape.size() != 4) throw ed::DataError("bundle 'fields' must be [n, C, ny, nx]");
    const auto& attrs = r.attrs();
    const auto need = [&](const char* k) -> std::string {
        const auto it = attrs.find(k);
        if (it == attrs.end())
            throw ed::DataError(std::string("bundle is missing attribute '") + k + "'");
        return it->second;
    };
    const auto variables = csv_attr(need("variables"));
    const auto levels = csv_attr(need("levels"));
    const double spacing = std::stod(need("grid_spacing_km"));
    std::vector<ed::FieldTensor> cases;
    for (size_t i = 0; i < shape[0]; ++i) {
        ed::FieldTensor f =
            ed::make_field(variables, levels, static_cast<int>(shape[2]),
                           static_cast<int>(shape[3]), spacing, static_cast<int64_t>(i));
        r.read_slice("fields", i * f.values.size(), f.values.size(), f.values.data());
        cases.push_back(std::move(f));
    }
    return cases;
}

// farm.json: the same keys as the config's "power" section
void parse_farm_json(const std::string& path, ed::PowerCurve& curve, ed::FarmSpec& farm,
                     double& extreme_quantile) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ed::ConfigError("cannot open farm file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ed::ConfigError(std::string("farm file: invalid JSON: ") + e.what());
    }
    static const std::set<std::string> allowed = {
        "cut_in",       "rated_speed",      "cut_out",
        "rated_power",  "capacity_mw",      "price_per_mwh",
        "hub_height_level", "power_of_mean_speed", "extreme_quantile"};
    for (const auto& item : j.items())
        if (!allowed.count(item.key()))
            throw ed::ConfigError("farm file: unknown key '" + item.key() + "'");
    const auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    };
    get("cut_in", curve.cut_in);
    get("rated_speed", curve.rated_speed);
    get("cut_out", curve.cut_out);
    get("rated_power", curve.rated_power);
    get("capacity_mw", farm.capacity_mw);
    get("price_per_mwh", farm.price_per_mwh);
    get("hub_height_level", farm.hub_height_level);
    get("power_of_mean_speed", farm.power_of_mean_speed);
    get("extreme_quantile", extreme_quantile);
    curve.validate();
    farm.validate();
    if (!(extreme_quantile > 0.0 && extreme_quantile < 1.0))
        throw ed::ConfigError("farm file: extreme_quantile must lie in (0, 1)");
}

// obs.csv rows are "timestamp,power_mw"; a non-numeric first row is a header
std::vector<double> parse_obs_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ed::DataError("cannot open observations file " + path);
    std::vector<double> obs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.back() == '\r') {
            while (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
        }
        const size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw ed::DataError("observations file: line " + std::to_string(lineno) +
                                " has no comma");
        const std::string value = line.substr(comma + 1);
        try {
            size_t used = 0;
            const double p = std::stod(value, &used);
            obs.push_back(p);
        } catch (const std::exception&) {
            if (lineno == 1) continue;  // header row
            throw ed::DataError("observations file: bad power value on line " +
                                std::to_string(lineno));
        }
    }
    if (obs.empty()) throw ed::DataError("observations file holds no data rows");
    return obs;
}

json accuracy_json(const ed::AccuracyReport& a) {
    json j = {{"c_r_percent", a.overall_c_r},
              {"mae_mw", a.overall_mae},
              {"extreme_threshold_mw", a.threshold_mw},
              {"extreme_count", a.extreme_count},
              {"extreme_defined", a.extreme_defined}};
    if (a.extreme_defined) {
        j["extreme_c_r_percent"] = a.extreme_c_r;
        j["extreme_mae_mw"] = a.extreme_mae;
    }
    return j;
}

// standalone `evaluate --pred ... --truth ...`
json evaluate_packs(const std::vector<ed::EnsembleSet>& preds,
                    const std::vector<ed::FieldTensor>& truths,
                    const std::set<std::string>& metrics) {
    if (preds.size() != truths.size())
        throw ed::DataError("prediction/truth case counts differ (" +
                            std::to_string(preds.size()) + " vs " +
                            std::to_string(truths.size()) + ")");
    const size_t n_cases = preds.size();
    const int members = preds.front().n_members();
    const size_t elems = truths.front().values.size();
    for (size_t i = 0; i < n_cases; ++i)
        if (preds[i].member_size() != truths[i].values.size())
            throw ed::DataError("case " + std::to_string(i) +
                                ": prediction grid does not match the truth grid");

    json rep;
    rep["n_cases"] = n_cases;
    rep["members"] = members;

    std::vector<float> ens_mean(elems);
    double sq = 0.0, ab = 0.0, crps_sum = 0.0;
    for (size_t i = 0; i < n_cases; ++i) {
        const auto& ens = preds[i];
        const auto& truth = truths[i];
        for (size_t j = 0; j < elems; ++j) {
            double m = 0.0;
            for (int k = 0; k < ens.n_members(); ++k) m += ens.member(k)[j];
            ens_mean[j] = static_cast<float>(m / ens.n_members());
            const double d = ens_mean[j] - truth.values[j];
            sq += d * d;
            ab += std::abs(d);
        }
        if (metrics.count("crps")) crps_sum += ed::crps_field(ens, truth);
    }
    const double denom = static_cast<double>(n_cases * elems);
    if (metrics.count("mae")) rep["mae"] = ab / denom;
    if (metrics.count("rmse")) rep["rmse"] = std::sqrt(sq / denom);
    if (metrics.count("crps")) rep["crps"] = crps_sum / static_cast<double>(n_cases);
    if (metrics.count("ssr")) {
        if (n_cases >= 2) {
            const ed::SpreadSkill ss = ed::spread_skill(preds, truths);
            rep["spread"] = ss.spread;
            rep["skill"] = ss.skill;
            rep["ssr"] = ss.ssr;
        } else {
            // single case: same estimator without the multi-case helper
            const auto& ens = preds[0];
            double var_sum = 0.0, err_sum = 0.0;
            for (size_t j = 0; j < elems; ++j) {
                double m = 0.0, s2 = 0.0;
                for (int k = 0; k < ens.n_members(); ++k) m += ens.member(k)[j];
                m /= ens.n_members();
                for (int k = 0; k < ens.n_members(); ++k) {
                    const double d = ens.member(k)[j] - m;
                    s2 += d * d;
                }
                var_sum += s2 / (ens.n_members() - 1);
                const double e = m - truths[0].values[j];
                err_sum += e * e;
            }
            const double spread = std::sqrt(var_sum / static_cast<double>(elems));
            const double skill = std::sqrt(err_sum / static_cast<double>(elems));
            rep["spread"] = spread;
            rep["skill"] = skill;
            rep["ssr"] = skill > 0.0 ? spread / skill : 0.0;
        }
    }
    if (metrics.count("psd")) {
        const auto& proto = truths.front();
        const int nc = proto.n_channels();
        const size_t plane = proto.plane_size();
        const double lam_max =
            static_cast<double>(std::min(proto.ny, proto.nx)) * proto.grid_spacing_km;
        const double lam_min = lam_max / 10.0;
        json spectra = json::array();
        std::vector<float> mean_plane(plane);
        for (int c = 0; c < nc; ++c) {
            ed::RadialSpectrum acc_p, acc_t;
            for (size_t i = 0; i < n_cases; ++i) {
                const auto& ens = preds[i];
                for (size_t j = 0; j < plane; ++j) {
                    double m = 0.0;
                    for (int k = 0; k < ens.n_members(); ++k)
                        m += ens.member(k)[c * plane + j];
                    mean_plane[j] = static_cast<float>(m / ens.n_members());
                }
                ed::RadialSpectrum sp =
                    ed::psd_radial(mean_plane.data(), proto.ny, proto.nx,
                                   proto.grid_spacing_km);
                ed::RadialSpectrum st =
                    ed::psd_radial(truths[i].values.data() + c * plane, proto.ny, proto.nx,
                                   proto.grid_spacing_km);
                if (i == 0) {
                    acc_p = sp;
                    acc_t = st;
                } else {
                    for (size_t b = 0; b < sp.power.size(); ++b) {
                        acc_p.power[b] += sp.power[b];
                        acc_t.power[b] += st.power[b];
                    }
                }
            }
            for (auto& x : acc_p.power) x /= static_cast<double>(n_cases);
            for (auto& x : acc_t.power) x /= static_cast<double>(n_cases);
            const double slope_p = ed::fit_loglog_slope(acc_p, lam_min, lam_max);
            const double slope_t = ed::fit_loglog_slope(acc_t, lam_min, lam_max);
            spectra.push_back({{"channel", c},
                               {"slope_pred", slope_p},
                               {"slope_truth", slope_t},
                               {"slope_diff", std::abs(slope_p - slope_t)}});
        }
        rep["psd"] = spectra;
        rep["psd_fit_wavelengths_km"] = {lam_min, lam_max};
    }
    return rep;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion-based high-resolution ensemble downscaling"};
    app.require_subcommand(1);
    std::function<int()> action;

    // ---- config-only stages ------------------------------------------------
    struct Plain {
        const char* name;
        const char* help;
        std::string (*fn)(const ed::PipelineConfig&);
    };
    static const Plain plain_stages[] = {
        {"synth-data", "generate the paired synthetic dataset", ed::stage_synth_data},
        {"train-prior", "train the diffusion prior", ed::stage_train_prior},
        {"train-downscaler", "train the regression downscaler", ed::stage_train_downscaler},
        {"sweep", "guidance-strength sweep (CSV report)", ed::stage_sweep},
    };
    for (const auto& st : plain_stages) {
        auto* cmd = app.add_subcommand(st.name, st.help);
        auto c = std::make_shared<Common>();
        add_common(cmd, c);
        if (std::string(st.name) == "sweep") {
            auto grid = std::make_shared<std::string>();
            auto members = std::make_shared<int>(0);
            cmd->add_option("--grid", *grid, "strength grid, lo:hi:step or comma list");
            cmd->add_option("--members", *members, "ensemble size per grid point")
                ->check(CLI::Range(2, 100000));
            cmd->callback([&action, c, grid, members, fn = st.fn] {
                action = [c, grid, members, fn] {
                    ed::PipelineConfig cfg = load_config(*c);
                    if (!grid->empty()) cfg.sweep_grid = ed::parse_strength_grid(*grid);
                    if (*members > 0) cfg.eval_members = *members;
                    std::printf("%s\n", fn(cfg).c_str());
                    return 0;
                };
            });
        } else {
            cmd->callback([&action, c, fn = st.fn] {
                action = [c, fn] {
                    std::printf("%s\n", fn(load_config(*c)).c_str());
                    return 0;
                };
            });
        }
    }

    // ---- sample-prior ------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("sample-prior",
                                       "draw unconditional samples from the trained prior");
        auto c = std::make_shared<Common>();
        auto n = std::make_shared<int>(0);
        add_common(cmd, c);
        cmd->add_option("--n", *n, "sample count (default: guidance member count)")
            ->check(CLI::Range(1, 1000000));
        cmd->callback([&action, c, n] {
            action = [c, n] {
                std::printf("%s\n", ed::stage_sample_prior(load_config(*c), *n).c_str());
                return 0;
            };
        });
    }

    // ---- climatology -------------------------------------------------------
    {
        auto* cmd = app.add_subcommand(
            "climatology", "compare prior samples against the training climatology");
        auto c = std::make_shared<Common>();
        auto n = std::make_shared<int>(0);
        add_common(cmd, c);
        cmd->add_option("--n", *n, "samples per side (default: training-split size)")
            ->check(CLI::Range(1, 1000000));
        cmd->callback([&action, c, n] {
            action = [c, n] {
                std::printf("%s\n", ed::stage_climatology(load_config(*c), *n).c_str());
                return 0;
            };
        });
    }

    // ---- downscale ---------------------------------------------------------
    {
        auto* cmd = app.add_subcommand(
            "downscale", "run the regression downscaler (dataset eval split, or --in)");
        auto c = std::make_shared<Common>();
        auto in = std::make_shared<std::string>();
        auto out_pack = std::make_shared<std::string>();
        add_common(cmd, c);
        cmd->add_option("--in", *in, "coarse field GridPack to downscale");
        cmd->add_option("--out-pack", *out_pack,
                        "destination pack for --in (default: "
                        "<out_root>/forecasts/standalone_downscaled)");
        cmd->callback([&action, c, in, out_pack] {
            action = [c, in, out_pack] {
                ed::PipelineConfig cfg = load_config(*c);
                if (in->empty()) {
                    std::printf("%s\n", ed::stage_downscale(cfg).c_str());
                    return 0;
                }
                const fs::path ckpt =
                    fs::path(cfg.out_root) / "models" / "downscaler" / "checkpoint";
                if (!fs::exists(ckpt))
                    throw ed::DataError("downscale: missing downscaler checkpoint (" +
                                        ckpt.string() + ")");
                ed::DownscalerModel model = ed::load_downscaler(ckpt.string());
                ed::FieldTensor fine = ed::predict(model, ed::read_field(*in));
                const std::string dest =
                    out_pack->empty()
                        ? (fs::path(cfg.out_root) / "forecasts" / "standalone_downscaled")
                              .string()
                        : *out_pack;
                ed::write_gridpack(dest, fine);
                std::printf("%s\n", dest.c_str());
                return 0;
            };
        });
    }

    // ---- forecast ----------------------------------------------------------
    {
        auto* cmd = app.add_subcommand(
            "forecast", "guided ensemble forecast (dataset eval split, or --prelim)");
        auto c = std::make_shared<Common>();
        auto prelim = std::make_shared<std::string>();
        auto out_pack = std::make_shared<std::string>();
        auto strength = std::make_shared<double>(-1.0);
        auto members = std::make_shared<int>(0);
        add_common(cmd, c);
        cmd->add_option("--prelim", *prelim, "preliminary field GridPack to refine");
        cmd->add_option("--out-pack", *out_pack,
                        "destination pack for --prelim (default: "
                        "<out_root>/forecasts/standalone)");
        cmd->add_option("--s", *strength, "guidance strength in [0, 1]")
            ->check(CLI::Range(0.0, 1.0));
        cmd->add_option("--members", *members, "ensemble size")
            ->check(CLI::Range(1, 100000));
        cmd->callback([&action, c, prelim, out_pack, strength, members] {
            action = [c, prelim, out_pack, strength, members] {
                ed::PipelineConfig cfg = load_config(*c);
                if (*strength >= 0.0) cfg.guidance.strength = *strength;
                if (*members > 0) cfg.guidance.members = *members;
                if (prelim->empty()) {
                    std::printf("%s\n", ed::stage_forecast(cfg).c_str());
                    return 0;
                }
                const fs::path ckpt =
                    fs::path(cfg.out_root) / "models" / "prior" / "checkpoint";
                if (!fs::exists(ckpt))
                    throw ed::DataError("forecast: missing prior checkpoint (" +
                                        ckpt.string() + ")");
                ed::DiffusionModel model = ed::load_checkpoint(ckpt.string());
                ed::GuidanceConfig g = cfg.guidance;
                g.seed = ed::derive_seed(cfg.master_seed, "forecast");
                ed::EnsembleSet ens =
                    ed::forecast_ensemble(model, ed::read_field(*prelim), g);
                const std::string dest =
                    out_pack->empty()
                        ? (fs::path(cfg.out_root) / "forecasts" / "standalone").string()
                        : *out_pack;
                ed::write_gridpack(dest, ens);
                std::printf("%s\n", dest.c_str());
                return 0;
            };
        });
    }

    // ---- evaluate ----------------------------------------------------------
    {
        auto* cmd = app.add_subcommand(
            "evaluate", "verification metrics (dataset eval split, or --pred/--truth)");
        auto c = std::make_shared<Common>();
        auto pred = std::make_shared<std::string>();
        auto truth = std::make_shared<std::string>();
        auto metrics = std::make_shared<std::string>("mae,rmse,crps,ssr,psd");
        auto report = std::make_shared<std::string>();
        add_common(cmd, c);
        cmd->add_option("--pred", *pred, "ensemble GridPack, or directory of case packs");
        cmd->add_option("--truth", *truth, "field GridPack, or [n,C,ny,nx] bundle");
        cmd->add_option("--metrics", *metrics, "subset of mae,rmse,crps,ssr,psd");
        cmd->add_option("--report", *report, "report destination (default stdout)");
        cmd->callback([&action, c, pred, truth, metrics, report] {
            action = [c, pred, truth, metrics, report] {
                if (pred->empty() != truth->empty())
                    throw ed::ConfigError("evaluate: --pred and --truth go together");
                if (pred->empty()) {
                    std::printf("%s\n", ed::stage_evaluate(load_config(*c)).c_str());
                    return 0;
                }
                std::set<std::string> wanted;
                std::stringstream ss(*metrics);
                std::string tok;
                while (std::getline(ss, tok, ',')) {
                    if (tok != "mae" && tok != "rmse" && tok != "crps" && tok != "ssr" &&
                        tok != "psd")
                        throw ed::ConfigError("evaluate: unknown metric '" + tok + "'");
                    wanted.insert(tok);
                }
                if (wanted.empty()) throw ed::ConfigError("evaluate: empty metric list");
                const json rep = evaluate_packs(load_forecast_cases(*pred),
                                                load_truth_cases(*truth), wanted);
                emit_report(rep, *report);
                return 0;
            };
        });
    }

    // ---- power -------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand(
            "power", "wind power accuracy and economics (dataset eval split, or "
                     "--forecast/--farm/--obs)");
        auto c = std::make_shared<Common>();
        auto forecast_dir = std::make_shared<std::string>();
        auto farm_file = std::make_shared<std::string>();
        auto obs_file = std::make_shared<std::string>();
        auto report = std::make_shared<std::string>();
        add_common(cmd, c);
        cmd->add_option("--forecast", *forecast_dir,
                        "ensemble GridPack, or directory of case packs");
        cmd->add_option("--farm", *farm_file, "farm spec JSON (curve + capacity + price)");
        cmd->add_option("--obs", *obs_file, "observed power CSV: timestamp,power_mw");
        cmd->add_option("--report", *report, "report destination (default stdout)");
        cmd->callback([&action, c, forecast_dir, farm_file, obs_file, report] {
            action = [c, forecast_dir, farm_file, obs_file, report] {
                ed::PipelineConfig cfg = load_config(*c);
                if (forecast_dir->empty() && farm_file->empty() && obs_file->empty()) {
                    std::printf("%s\n", ed::stage_power(cfg).c_str());
                    return 0;
                }
                if (forecast_dir->empty() || obs_file->empty())
                    throw ed::ConfigError(
                        "power: standalone mode needs --forecast and --obs");
                ed::PowerCurve curve = cfg.curve;
                ed::FarmSpec farm = cfg.farm;
                double extreme_q = cfg.extreme_quantile;
                if (!farm_file->empty()) parse_farm_json(*farm_file, curve, farm, extreme_q);
                const auto cases = load_forecast_cases(*forecast_dir);
                const auto obs = parse_obs_csv(*obs_file);
                if (obs.size() != cases.size())
                    throw ed::DataError("power: " + std::to_string(cases.size()) +
                                        " forecast cases but " + std::to_string(obs.size()) +
                                        " observation rows");
                std::vector<double> pred;
                for (const auto& ens : cases) {
                    const auto member_power = ed::ensemble_power(ens, curve, farm);
                    double mean = 0.0;
                    for (double x : member_power) mean += x;
                    pred.push_back(mean / static_cast<double>(member_power.size()));
                }
                json rep;
                rep["n_cases"] = cases.size();
                rep["forecast"] = accuracy_json(ed::accuracy_report(pred, obs, farm,
                                                                    extreme_q));
                emit_report(rep, *report);
                return 0;
            };
        });
    }

    // ---- pipeline ----------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("pipeline", "run every stage in dependency order");
        auto c = std::make_shared<Common>();
        add_common(cmd, c);
        cmd->callback([&action, c] {
            action = [c] {
                ed::PipelineConfig cfg = load_config(*c);
                ed::run_pipeline(cfg);
                std::printf("%s\n", cfg.out_root.c_str());
                return 0;
            };
        });
    }

    // ---- benchmark ---------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("benchmark",
                                       "time prior sampling at several ensemble sizes");
        auto c = std::make_shared<Common>();
        auto members = std::make_shared<std::vector<int>>();
        add_common(cmd, c);
        cmd->add_option("--members", *members, "member counts to time (repeatable)")
            ->check(CLI::Range(1, 100000));
        cmd->callback([&action, c, members] {
            action = [c, members] {
                std::printf("%s\n",
                            ed::stage_benchmark(load_config(*c), *members).c_str());
                return 0;
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad usage is a configuration error
    }

    try {
        return action ? action() : 0;
    } catch (const ed::ConfigError& e) {
        std::fprintf(stderr, "ensembledown: config error: %s\n", e.what());
        return 2;
    } catch (const ed::DataError& e) {
        std::fprintf(stderr, "ensembledown: data error: %s\n", e.what());
        return 3;
    } catch (const ed::NumericError& e) {
        std::fprintf(stderr, "ensembledown: numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ensembledown: %s\n", e.what());
        return 1;
    }
}
