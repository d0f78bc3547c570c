#include "ensembledown/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ensembledown/diffusion.hpp"
#include "ensembledown/downscaler.hpp"
#include "ensembledown/errors.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/rng.hpp"
#include "ensembledown/verify.hpp"

namespace ensembledown {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------- json utils

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError("config: unknown key '" + item.key() + "' in section '" +
                              section + "'");
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config: key '") + key + "' has the wrong type");
    }
}

json train_json(const TrainConfig& t) {
    return {{"lr", t.lr},
            {"batch", t.batch},
            {"epochs", t.epochs},
            {"cosine_period_epochs", t.cosine_period_epochs},
            {"lr_floor_frac", t.lr_floor_frac},
            {"holdout_frac", t.holdout_frac}};
}

// ------------------------------------------------------ stage infrastructure

std::string stage_seed_name(const std::string& stage) { return stage; }

uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage) {
    return derive_seed(cfg.master_seed, stage_seed_name(stage));
}

// stderr progress line; wall time never reaches any output file so reruns
// stay byte-identical
class StageLog {
public:
    explicit StageLog(std::string name) : name_(std::move(name)) {
        start_ = std::chrono::steady_clock::now();
        std::fprintf(stderr, "[%s] started\n", name_.c_str());
    }
    ~StageLog() {
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::fprintf(stderr, "[%s] finished in %.1f s\n", name_.c_str(), sec);
    }

private:
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

void write_text_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("short write to " + path.string());
}

void write_stage_manifest(const PipelineConfig& cfg, const std::string& stage,
                          const fs::path& dir, const std::vector<std::string>& inputs,
                          const std::vector<std::string>& outputs,
                          const json& extra = json::object()) {
    json m = {{"stage", stage},
              {"seed", stage_seed(cfg, stage)},
              {"config_hash", cfg.config_hash()},
              {"inputs", inputs},
              {"outputs", outputs}};
    for (const auto& item : extra.items()) m[item.key()] = item.value();
    write_text_file(dir / "stage.json", m.dump(2) + "\n");
}

void require_input(const fs::path& p, const std::string& stage, const std::string& what) {
    if (!fs::exists(p))
        throw DataError(stage + ": missing input " + what + " (" + p.string() +
                        "); run the producing stage first");
}

// ------------------------------------------------------------ dataset access

struct DatasetView {
    std::vector<std::string> variables;
    std::vector<std::string> levels;
    int n_samples = 0;
    int ny = 0, nx = 0;      // hi-res dims
    int cy = 0, cx = 0;      // coarse dims
    int factor = 1;
    double spacing_km = 1.0;  // hi-res spacing
    NormStats stats;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

const std::string& req_attr(const GridPackReader& pack, const std::string& key) {
    const auto& attrs = pack.attrs();
    const auto it = attrs.find(key);
    if (it == attrs.end()) throw DataError("gridpack is missing attribute '" + key + "'");
    return it->second;
}

DatasetView dataset_view(const PipelineConfig& cfg, GridPackReader& hires,
                         GridPackReader& coarse) {
    DatasetView v;
    v.variables = split_csv(req_attr(hires, "variables"));
    v.levels = split_csv(req_attr(hires, "levels"));
    v.n_samples = std::stoi(req_attr(hires, "n_samples"));
    v.spacing_km = std::stod(req_attr(hires, "grid_spacing_km"));
    v.factor = std::stoi(req_attr(coarse, "factor"));
    const auto fshape = hires.array_shape("fields");
    const auto cshape = coarse.array_shape("fields");
    v.ny = static_cast<int>(fshape[2]);
    v.nx = static_cast<int>(fshape[3]);
    v.cy = static_cast<int>(cshape[2]);
    v.cx = static_cast<int>(cshape[3]);

    const auto mean = hires.read_array("norm_mean");
    const auto sd = hires.read_array("norm_std");
    for (size_t i = 0; i < v.variables.size(); ++i)
        for (size_t l = 0; l < v.levels.size(); ++l) {
            const size_t c = i * v.levels.size() + l;
            v.stats.channel_names.push_back(channel_name(v.variables[i], v.levels[l]));
            v.stats.mean.push_back(mean[c]);
            v.stats.std_dev.push_back(sd[c]);
        }
    v.stats.validate();
    if (cfg.eval_pairs >= v.n_samples)
        throw DataError("dataset smaller than the evaluation split");
    return v;
}

int training_split(const PipelineConfig& cfg, const DatasetView& v) {
    return v.n_samples - cfg.eval_pairs;
}

// one sample slice of a [n, C, ny, nx] bundle as a FieldTensor
FieldTensor field_from_bundle(GridPackReader& pack, const DatasetView& v, int index,
                              bool coarse_pack) {
    const int ny = coarse_pack ? v.cy : v.ny;
    const int nx = coarse_pack ? v.cx : v.nx;
    const double spacing = coarse_pack ? v.spacing_km * v.factor : v.spacing_km;
    FieldTensor f = make_field(v.variables, v.levels, ny, nx, spacing, index);
    const size_t d = f.values.size();
    pack.read_slice("fields", static_cast<size_t>(index) * d, d, f.values.data());
    return f;
}

fs::path root_of(const PipelineConfig& cfg) { return fs::path(cfg.out_root); }

// ------------------------------------------------------------- power helper

std::vector<double> field_power(const FieldTensor& field, const PowerCurve& curve,
                                const FarmSpec& farm) {
    EnsembleSet one = make_ensemble(field, {1});
    std::copy(field.values.begin(), field.values.end(), one.member(0));
    return ensemble_power(one, curve, farm);
}

}  // namespace

// ---------------------------------------------------------------------------
// config parsing / serialization
// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
    clim.validate();
    if (n_samples < 120) throw ConfigError("config: n_samples must be >= 120");
    if (schedule_T < 10) throw ConfigError("config: schedule T must be >= 10");
    if (prior_width < 4 || down_width < 4) throw ConfigError("config: width must be >= 4");
    if (prior_depth < 0) throw ConfigError("config: prior depth must be >= 0");
    prior_train.validate();
    down_train.validate();
    guidance.validate();
    if (eval_pairs < 2 || eval_pairs > 999)
        throw ConfigError("config: eval_pairs must lie in [2, 999]");
    if (eval_members < 2) throw ConfigError("config: eval_members must be >= 2");
    if (sweep_grid.empty()) throw ConfigError("config: sweep grid is empty");
    for (double s : sweep_grid)
        if (s < 0.0 || s > 1.0) throw ConfigError("config: sweep grid value outside [0, 1]");
    if (climatology_samples < 0)
        throw ConfigError("config: climatology_samples must be >= 0");
    curve.validate();
    farm.validate();
    if (!(extreme_quantile > 0.0 && extreme_quantile < 1.0))
        throw ConfigError("config: extreme_quantile must lie in (0, 1)");
    if (n_samples - eval_pairs < 100)
        throw ConfigError("config: fewer than 100 training samples after the eval split");
    bool hub_ok = false;
    for (const auto& l : clim.levels()) hub_ok = hub_ok || l == farm.hub_height_level;
    if (!hub_ok)
        throw ConfigError("config: power.hub_height_level does not name a dataset level");
}

std::string PipelineConfig::canonical_json() const {
    // out_root is deliberately absent: where outputs are stored does not
    // change what they are, so relocated runs keep the same config hash
    json j;
    j["master_seed"] = master_seed;
    j["climatology"] = {{"grid_ny", clim.grid_ny},
                        {"grid_nx", clim.grid_nx},
                        {"n_levels", clim.n_levels},
                        {"spectral_slope", clim.spectral_slope},
                        {"coupling", clim.coupling},
                        {"terrain_amplitude", clim.terrain_amplitude},
                        {"diurnal_amplitude", clim.diurnal_amplitude},
                        {"diurnal_period_steps", clim.diurnal_period_steps},
                        {"noise_amplitude", clim.noise_amplitude},
                        {"coarsen_factor", clim.coarsen_factor},
                        {"grid_spacing_km", clim.grid_spacing_km},
                        {"n_samples", n_samples}};
    j["schedule"] = {{"T", schedule_T}};
    json p = train_json(prior_train);
    p["width"] = prior_width;
    p["depth"] = prior_depth;
    p["time_dim"] = prior_time_dim;
    p["coords"] = prior_coords;
    p["pos_embed"] = prior_pos_embed;
    j["prior"] = p;
    json d = train_json(down_train);
    d["width"] = down_width;
    d["coords"] = down_coords;
    d["out_bias"] = down_out_bias;
    j["downscaler"] = d;
    j["guidance"] = {{"strength", guidance.strength}, {"members", guidance.members}};
    j["evaluation"] = {{"n_pairs", eval_pairs},
                       {"members", eval_members},
                       {"sweep_grid", sweep_grid},
                       {"climatology_samples", climatology_samples}};
    j["power"] = {{"cut_in", curve.cut_in},
                  {"rated_speed", curve.rated_speed},
                  {"cut_out", curve.cut_out},
                  {"rated_power", curve.rated_power},
                  {"capacity_mw", farm.capacity_mw},
                  {"price_per_mwh", farm.price_per_mwh},
                  {"hub_height_level", farm.hub_height_level},
                  {"power_of_mean_speed", farm.power_of_mean_speed},
                  {"extreme_quantile", extreme_quantile}};
    return j.dump(2) + "\n";
}

std::string PipelineConfig::config_hash() const {
    // FNV-1a 64 over the canonical serialization
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : canonical_json()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, "(top level)",
               {"master_seed", "out_root", "climatology", "schedule", "prior", "downscaler",
                "guidance", "evaluation", "power"});

    PipelineConfig cfg;
    cfg.curve.rated_power = 100.0;
    cfg.farm.capacity_mw = 100.0;
    cfg.farm.price_per_mwh = 100.0;
    cfg.farm.hub_height_level = "L0";

    read_opt(j, "master_seed", cfg.master_seed);
    read_opt(j, "out_root", cfg.out_root);

    if (j.contains("climatology")) {
        const json& c = j.at("climatology");
        check_keys(c, "climatology",
                   {"grid_ny", "grid_nx", "n_levels", "spectral_slope", "coupling",
                    "terrain_amplitude", "diurnal_amplitude", "diurnal_period_steps",
                    "noise_amplitude", "coarsen_factor", "grid_spacing_km", "n_samples"});
        read_opt(c, "grid_ny", cfg.clim.grid_ny);
        read_opt(c, "grid_nx", cfg.clim.grid_nx);
        read_opt(c, "n_levels", cfg.clim.n_levels);
        read_opt(c, "spectral_slope", cfg.clim.spectral_slope);
        read_opt(c, "coupling", cfg.clim.coupling);
        read_opt(c, "terrain_amplitude", cfg.clim.terrain_amplitude);
        read_opt(c, "diurnal_amplitude", cfg.clim.diurnal_amplitude);
        read_opt(c, "diurnal_period_steps", cfg.clim.diurnal_period_steps);
        read_opt(c, "noise_amplitude", cfg.clim.noise_amplitude);
        read_opt(c, "coarsen_factor", cfg.clim.coarsen_factor);
        read_opt(c, "grid_spacing_km", cfg.clim.grid_spacing_km);
        read_opt(c, "n_samples", cfg.n_samples);
    }
    if (j.contains("schedule")) {
        check_keys(j.at("schedule"), "schedule", {"T"});
        read_opt(j.at("schedule"), "T", cfg.schedule_T);
    }
    if (j.contains("prior")) {
        const json& p = j.at("prior");
        check_keys(p, "prior",
                   {"width", "depth", "time_dim", "coords", "pos_embed", "lr", "batch",
                    "epochs", "cosine_period_epochs", "lr_floor_frac", "holdout_frac"});
        read_opt(p, "width", cfg.prior_width);
        read_opt(p, "depth", cfg.prior_depth);
        read_opt(p, "time_dim", cfg.prior_time_dim);
        read_opt(p, "coords", cfg.prior_coords);
        read_opt(p, "pos_embed", cfg.prior_pos_embed);
        read_opt(p, "lr", cfg.prior_train.lr);
        read_opt(p, "batch", cfg.prior_train.batch);
        read_opt(p, "epochs", cfg.prior_train.epochs);
        read_opt(p, "cosine_period_epochs", cfg.prior_train.cosine_period_epochs);
        read_opt(p, "lr_floor_frac", cfg.prior_train.lr_floor_frac);
        read_opt(p, "holdout_frac", cfg.prior_train.holdout_frac);
    }
    if (j.contains("downscaler")) {
        const json& d = j.at("downscaler");
        check_keys(d, "downscaler",
                   {"width", "coords", "out_bias", "lr", "batch", "epochs",
                    "cosine_period_epochs", "lr_floor_frac", "holdout_frac"});
        read_opt(d, "width", cfg.down_width);
        read_opt(d, "coords", cfg.down_coords);
        read_opt(d, "out_bias", cfg.down_out_bias);
        read_opt(d, "lr", cfg.down_train.lr);
        read_opt(d, "batch", cfg.down_train.batch);
        read_opt(d, "epochs", cfg.down_train.epochs);
        read_opt(d, "cosine_period_epochs", cfg.down_train.cosine_period_epochs);
        read_opt(d, "lr_floor_frac", cfg.down_train.lr_floor_frac);
        read_opt(d, "holdout_frac", cfg.down_train.holdout_frac);
    }
    if (j.contains("guidance")) {
        check_keys(j.at("guidance"), "guidance", {"strength", "members"});
        read_opt(j.at("guidance"), "strength", cfg.guidance.strength);
        read_opt(j.at("guidance"), "members", cfg.guidance.members);
    }
    if (j.contains("evaluation")) {
        const json& e = j.at("evaluation");
        check_keys(e, "evaluation",
                   {"n_pairs", "members", "sweep_grid", "climatology_samples"});
        read_opt(e, "n_pairs", cfg.eval_pairs);
        read_opt(e, "members", cfg.eval_members);
        read_opt(e, "climatology_samples", cfg.climatology_samples);
        if (e.contains("sweep_grid")) {
            if (e.at("sweep_grid").is_string())
                cfg.sweep_grid = parse_strength_grid(e.at("sweep_grid").get<std::string>());
            else
                read_opt(e, "sweep_grid", cfg.sweep_grid);
        }
    }
    if (j.contains("power")) {
        const json& p = j.at("power");
        check_keys(p, "power",
                   {"cut_in", "rated_speed", "cut_out", "rated_power", "capacity_mw",
                    "price_per_mwh", "hub_height_level", "power_of_mean_speed",
                    "extreme_quantile"});
        read_opt(p, "cut_in", cfg.curve.cut_in);
        read_opt(p, "rated_speed", cfg.curve.rated_speed);
        read_opt(p, "cut_out", cfg.curve.cut_out);
        read_opt(p, "rated_power", cfg.curve.rated_power);
        read_opt(p, "capacity_mw", cfg.farm.capacity_mw);
        read_opt(p, "price_per_mwh", cfg.farm.price_per_mwh);
        read_opt(p, "hub_height_level", cfg.farm.hub_height_level);
        read_opt(p, "power_of_mean_speed", cfg.farm.power_of_mean_speed);
        read_opt(p, "extreme_quantile", cfg.extreme_quantile);
    }
    cfg.validate();
    return cfg;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::vector<double> parse_strength_grid(const std::string& text) {
    std::vector<double> out;
    const size_t c1 = text.find(':');
    try {
        if (c1 != std::string::npos) {
            const size_t c2 = text.find(':', c1 + 1);
            if (c2 == std::string::npos)
                throw ConfigError("strength grid: expected lo:hi:step");
            const double lo = std::stod(text.substr(0, c1));
            const double hi = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
            const double step = std::stod(text.substr(c2 + 1));
            if (step <= 0.0 || hi < lo) throw ConfigError("strength grid: bad range");
            const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
            for (int i = 0; i < n; ++i) out.push_back(lo + step * i);
            // snap a within-rounding endpoint so 0:1:0.1 ends at exactly 1.0
            if (std::abs(out.back() - hi) < 1e-9) out.back() = hi;
        } else {
            for (const auto& tok : split_csv(text)) out.push_back(std::stod(tok));
        }
    } catch (const std::invalid_argument&) {
        throw ConfigError("strength grid: cannot parse '" + text + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("strength grid: value out of range in '" + text + "'");
    }
    if (out.empty()) throw ConfigError("strength grid: empty");
    for (double s : out)
        if (s < 0.0 || s > 1.0) throw ConfigError("strength grid: value outside [0, 1]");
    return out;
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

std::string stage_synth_data(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("synth-data");
    const fs::path dir = root_of(cfg) / "data";
    ClimatologyConfig clim = cfg.clim;
    clim.master_seed = stage_seed(cfg, "synth-data");
    generate_dataset(clim, cfg.n_samples, dir.string());
    write_stage_manifest(cfg, "synth-data", dir, {},
                         {"data/hires", "data/coarse"},
                         {{"n_samples", cfg.n_samples}});
    return dir.string();
}

std::string stage_train_prior(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("train-prior");
    const fs::path data = root_of(cfg) / "data";
    require_input(data / "hires", "train-prior", "hi-res dataset");
    require_input(data / "coarse", "train-prior", "coarse dataset");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    const int n_train = training_split(cfg, v);

    DiffusionModel model;
    model.arch.channels = static_cast<int>(v.variables.size() * v.levels.size());
    model.arch.ny = v.ny;
    model.arch.nx = v.nx;
    model.arch.width = cfg.prior_width;
    model.arch.depth = cfg.prior_depth;
    model.arch.time_dim = cfg.prior_time_dim;
    model.arch.schedule_T = cfg.schedule_T;
    model.arch.coords = cfg.prior_coords;
    model.arch.pos_embed = cfg.prior_pos_embed;
    model.schedule = make_schedule(cfg.schedule_T);
    model.variables = v.variables;
    model.levels = v.levels;
    model.stats = v.stats;
    model.grid_spacing_km = v.spacing_km;
    model.net.init(model.arch, derive_seed(stage_seed(cfg, "train-prior"), "init"));

    const size_t d = static_cast<size_t>(model.arch.channels) * v.ny * v.nx;
    std::vector<float> samples(d * static_cast<size_t>(n_train));
    hires.read_slice("fields", 0, samples.size(), samples.data());
    const size_t plane = static_cast<size_t>(v.ny) * v.nx;
    for (int i = 0; i < n_train; ++i)
        normalize_block(samples.data() + static_cast<size_t>(i) * d, v.variables, v.levels,
                        plane, v.stats);

    TrainConfig tc = cfg.prior_train;
    tc.seed = stage_seed(cfg, "train-prior");
    const TrainStats ts = train_prior(model, samples, n_train, tc);

    const fs::path dir = root_of(cfg) / "models" / "prior";
    save_checkpoint(model, (dir / "checkpoint").string());
    write_stage_manifest(cfg, "train-prior", dir, {"data/hires"},
                         {"models/prior/checkpoint"},
                         {{"n_train", n_train},
                          {"train_loss", ts.train_loss},
                          {"holdout_loss", ts.holdout_loss},
                          {"epochs_run", ts.epochs_run}});
    return dir.string();
}

std::string stage_train_downscaler(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("train-downscaler");
    const fs::path data = root_of(cfg) / "data";
    require_input(data / "hires", "train-downscaler", "hi-res dataset");
    require_input(data / "coarse", "train-downscaler", "coarse dataset");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    const int n_train = training_split(cfg, v);

    DownscalerModel model;
    model.arch.channels = static_cast<int>(v.variables.size() * v.levels.size());
    model.arch.coarse_ny = v.cy;
    model.arch.coarse_nx = v.cx;
    model.arch.factor = v.factor;
    model.arch.width = cfg.down_width;
    model.arch.coords = cfg.down_coords;
    model.arch.out_bias = cfg.down_out_bias;
    model.variables = v.variables;
    model.levels = v.levels;
    model.stats = v.stats;
    model.grid_spacing_km = v.spacing_km;
    model.net.init(model.arch, derive_seed(stage_seed(cfg, "train-downscaler"), "init"));

    const size_t df = static_cast<size_t>(model.arch.channels) * v.ny * v.nx;
    const size_t dc = static_cast<size_t>(model.arch.channels) * v.cy * v.cx;
    std::vector<float> fine(df * static_cast<size_t>(n_train));
    std::vector<float> cors(dc * static_cast<size_t>(n_train));
    hires.read_slice("fields", 0, fine.size(), fine.data());
    coarse.read_slice("fields", 0, cors.size(), cors.data());
    const size_t fplane = static_cast<size_t>(v.ny) * v.nx;
    const size_t cplane = static_cast<size_t>(v.cy) * v.cx;
    for (int i = 0; i < n_train; ++i) {
        normalize_block(fine.data() + static_cast<size_t>(i) * df, v.variables, v.levels,
                        fplane, v.stats);
        normalize_block(cors.data() + static_cast<size_t>(i) * dc, v.variables, v.levels,
                        cplane, v.stats);
    }

    TrainConfig tc = cfg.down_train;
    tc.seed = stage_seed(cfg, "train-downscaler");
    const TrainStats ts = train_downscaler(model, cors, fine, n_train, tc);

    const fs::path dir = root_of(cfg) / "models" / "downscaler";
    save_downscaler(model, (dir / "checkpoint").string());
    write_stage_manifest(cfg, "train-downscaler", dir, {"data/hires", "data/coarse"},
                         {"models/downscaler/checkpoint"},
                         {{"n_train", n_train},
                          {"train_loss", ts.train_loss},
                          {"holdout_loss", ts.holdout_loss},
                          {"epochs_run", ts.epochs_run}});
    return dir.string();
}

std::string stage_sample_prior(const PipelineConfig& cfg, int n) {
    cfg.validate();
    StageLog log("sample-prior");
    if (n <= 0) n = cfg.guidance.members;
    const fs::path ckpt = root_of(cfg) / "models" / "prior" / "checkpoint";
    require_input(ckpt, "sample-prior", "prior checkpoint");
    DiffusionModel model = load_checkpoint(ckpt.string());
    EnsembleSet samples = sample_prior(model, n, stage_seed(cfg, "sample-prior"));
    const fs::path dir = root_of(cfg) / "samples" / "prior";
    write_gridpack((dir / "ensemble").string(), samples);
    write_stage_manifest(cfg, "sample-prior", dir, {"models/prior/checkpoint"},
                         {"samples/prior/ensemble"}, {{"n", n}});
    return dir.string();
}

std::string stage_downscale(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("downscale");
    const fs::path data = root_of(cfg) / "data";
    const fs::path ckpt = root_of(cfg) / "models" / "downscaler" / "checkpoint";
    require_input(data / "coarse", "downscale", "coarse dataset");
    require_input(ckpt, "downscale", "downscaler checkpoint");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    DownscalerModel model = load_downscaler(ckpt.string());

    const fs::path dir = root_of(cfg) / "forecasts" / "preliminary";
    GridPackWriter out((dir / "fields").string(), "bundle");
    out.open_array("fields", {static_cast<size_t>(cfg.eval_pairs),
                              static_cast<size_t>(model.arch.channels),
                              static_cast<size_t>(v.ny), static_cast<size_t>(v.nx)});
    const int first = training_split(cfg, v);
    for (int p = 0; p < cfg.eval_pairs; ++p) {
        FieldTensor c = field_from_bundle(coarse, v, first + p, true);
        FieldTensor fine = predict(model, c);
        out.append(fine.values.data(), fine.values.size());
    }
    out.close_array();
    out.set_attr("variables", req_attr(hires, "variables"));
    out.set_attr("levels", req_attr(hires, "levels"));
    out.set_attr("grid_spacing_km", req_attr(hires, "grid_spacing_km"));
    out.set_attr("first_case_index", std::to_string(first));
    out.set_attr("n_cases", std::to_string(cfg.eval_pairs));
    out.finish();
    write_stage_manifest(cfg, "downscale", dir,
                         {"data/coarse", "models/downscaler/checkpoint"},
                         {"forecasts/preliminary/fields"},
                         {{"first_case_index", first}, {"n_cases", cfg.eval_pairs}});
    return dir.string();
}

std::string stage_forecast(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("forecast");
    const fs::path prelim_pack = root_of(cfg) / "forecasts" / "preliminary" / "fields";
    const fs::path ckpt = root_of(cfg) / "models" / "prior" / "checkpoint";
    require_input(prelim_pack, "forecast", "preliminary predictions");
    require_input(ckpt, "forecast", "prior checkpoint");
    DiffusionModel model = load_checkpoint(ckpt.string());
    GridPackReader prelim(prelim_pack.string());
    const auto shape = prelim.array_shape("fields");
    const int n_cases = static_cast<int>(shape[0]);
    const double spacing = std::stod(req_attr(prelim, "grid_spacing_km"));
    const auto variables = split_csv(req_attr(prelim, "variables"));
    const auto levels = split_csv(req_attr(prelim, "levels"));

    const fs::path dir = root_of(cfg) / "forecasts" / "ensembles";
    const uint64_t root = stage_seed(cfg, "forecast");
    std::vector<std::string> outputs;
    for (int p = 0; p < n_cases; ++p) {
        FieldTensor f = make_field(variables, levels, static_cast<int>(shape[2]),
                                   static_cast<int>(shape[3]), spacing, p);
        prelim.read_slice("fields", static_cast<size_t>(p) * f.values.size(),
                          f.values.size(), f.values.data());
        GuidanceConfig g = cfg.guidance;
        g.seed = derive_seed(root, p);
        EnsembleSet ens = forecast_ensemble(model, f, g);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", p);
        write_gridpack((dir / name).string(), ens);
        outputs.push_back(std::string("forecasts/ensembles/") + name);
    }
    write_stage_manifest(cfg, "forecast", dir,
                         {"forecasts/preliminary/fields", "models/prior/checkpoint"},
                         outputs,
                         {{"members", cfg.guidance.members},
                          {"strength", cfg.guidance.strength},
                          {"n_cases", n_cases}});
    return dir.string();
}

std::string stage_sweep(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("sweep");
    const fs::path data = root_of(cfg) / "data";
    const fs::path prior_ckpt = root_of(cfg) / "models" / "prior" / "checkpoint";
    const fs::path down_ckpt = root_of(cfg) / "models" / "downscaler" / "checkpoint";
    require_input(data / "hires", "sweep", "hi-res dataset");
    require_input(prior_ckpt, "sweep", "prior checkpoint");
    require_input(down_ckpt, "sweep", "downscaler checkpoint");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    DiffusionModel model = load_checkpoint(prior_ckpt.string());
    DownscalerModel down = load_downscaler(down_ckpt.string());

    std::vector<FieldTensor> cfields, truths;
    const int first = training_split(cfg, v);
    for (int p = 0; p < cfg.eval_pairs; ++p) {
        cfields.push_back(field_from_bundle(coarse, v, first + p, true));
        truths.push_back(field_from_bundle(hires, v, first + p, false));
    }
    const auto rows = sweep_strength(model, down, cfields, truths, cfg.sweep_grid,
                                     cfg.eval_members, stage_seed(cfg, "sweep"));
    const fs::path dir = root_of(cfg) / "reports" / "sweep";
    write_text_file(dir / "sweep.csv", sweep_csv(rows));
    write_stage_manifest(cfg, "sweep", dir,
                         {"data/hires", "data/coarse", "models/prior/checkpoint",
                          "models/downscaler/checkpoint"},
                         {"reports/sweep/sweep.csv"},
                         {{"members", cfg.eval_members},
                          {"n_pairs", cfg.eval_pairs},
                          {"grid_points", static_cast<int>(cfg.sweep_grid.size())}});
    return dir.string();
}

std::string stage_evaluate(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("evaluate");
    const fs::path data = root_of(cfg) / "data";
    const fs::path ens_dir = root_of(cfg) / "forecasts" / "ensembles";
    const fs::path prelim_pack = root_of(cfg) / "forecasts" / "preliminary" / "fields";
    require_input(data / "hires", "evaluate", "hi-res dataset");
    require_input(ens_dir / "case_000", "evaluate", "forecast ensembles");
    require_input(prelim_pack, "evaluate", "preliminary predictions");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    GridPackReader prelim(prelim_pack.string());
    const int first = training_split(cfg, v);

    std::vector<EnsembleSet> ensembles;
    std::vector<FieldTensor> truths;
    json per_case = json::array();
    double prelim_sq = 0.0, prelim_abs = 0.0, bicubic_sq = 0.0;
    size_t count = 0;
    for (int p = 0; p < cfg.eval_pairs; ++p) {
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", p);
        EnsembleSet ens = read_ensemble((ens_dir / name).string());
        FieldTensor truth = field_from_bundle(hires, v, first + p, false);
        FieldTensor pf = make_field(v.variables, v.levels, v.ny, v.nx, v.spacing_km, p);
        prelim.read_slice("fields", static_cast<size_t>(p) * pf.values.size(),
                          pf.values.size(), pf.values.data());
        FieldTensor cf = field_from_bundle(coarse, v, first + p, true);
        FieldTensor bic = bicubic_baseline(cf, v.factor);

        const double crps = crps_field(ens, truth);
        double sq = 0.0;
        for (size_t j = 0; j < truth.values.size(); ++j) {
            double m = 0.0;
            for (int k = 0; k < ens.n_members(); ++k) m += ens.member(k)[j];
            m /= ens.n_members();
            const double dlt = m - truth.values[j];
            sq += dlt * dlt;
        }
        const double rmse_mean = std::sqrt(sq / static_cast<double>(truth.values.size()));
        per_case.push_back({{"case", p},
                            {"sample_index", first + p},
                            {"crps", crps},
                            {"rmse_ensemble_mean", rmse_mean}});
        for (size_t j = 0; j < truth.values.size(); ++j) {
            const double dp = static_cast<double>(pf.values[j]) - truth.values[j];
            const double db = static_cast<double>(bic.values[j]) - truth.values[j];
            prelim_sq += dp * dp;
            prelim_abs += std::abs(dp);
            bicubic_sq += db * db;
        }
        count += truth.values.size();
        ensembles.push_back(std::move(ens));
        truths.push_back(std::move(truth));
    }

    double crps_sum = 0.0;
    for (const auto& c : per_case) crps_sum += c.at("crps").get<double>();
    const SpreadSkill ss = spread_skill(ensembles, truths);

    json rep;
    rep["n_pairs"] = cfg.eval_pairs;
    rep["members"] = ensembles.front().n_members();
    rep["crps"] = crps_sum / cfg.eval_pairs;
    rep["spread"] = ss.spread;
    rep["skill"] = ss.skill;
    rep["ssr"] = ss.ssr;
    rep["preliminary_mse"] = prelim_sq / static_cast<double>(count);
    rep["preliminary_mae"] = prelim_abs / static_cast<double>(count);
    rep["bicubic_mse"] = bicubic_sq / static_cast<double>(count);
    rep["downscaler_beats_bicubic"] =
        prelim_sq / static_cast<double>(count) < bicubic_sq / static_cast<double>(count);
    rep["per_case"] = per_case;

    const fs::path dir = root_of(cfg) / "reports" / "evaluation";
    write_text_file(dir / "evaluation.json", rep.dump(2) + "\n");
    write_stage_manifest(cfg, "evaluate", dir,
                         {"data/hires", "data/coarse", "forecasts/ensembles",
                          "forecasts/preliminary/fields"},
                         {"reports/evaluation/evaluation.json"});
    return dir.string();
}

std::string stage_climatology(const PipelineConfig& cfg, int n) {
    cfg.validate();
    StageLog log("climatology");
    const fs::path data = root_of(cfg) / "data";
    const fs::path ckpt = root_of(cfg) / "models" / "prior" / "checkpoint";
    require_input(data / "hires", "climatology", "hi-res dataset");
    require_input(ckpt, "climatology", "prior checkpoint");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    const int n_train = training_split(cfg, v);
    if (n <= 0) n = cfg.climatology_samples > 0 ? cfg.climatology_samples : n_train;
    n = std::min(n, n_train);

    DiffusionModel model = load_checkpoint(ckpt.string());
    EnsembleSet prior = sample_prior(model, n, stage_seed(cfg, "climatology"));

    const int nc = static_cast<int>(v.variables.size() * v.levels.size());
    const size_t plane = static_cast<size_t>(v.ny) * v.nx;
    std::vector<float> train(static_cast<size_t>(n) * nc * plane);
    hires.read_slice("fields", 0, train.size(), train.data());

    SampleStack train_stack{train.data(), static_cast<size_t>(n), static_cast<size_t>(nc),
                            plane};
    SampleStack prior_stack{prior.members.data(), static_cast<size_t>(n),
                            static_cast<size_t>(nc), plane};
    const ClimStats ts = clim_stats(train_stack);
    const ClimStats ps = clim_stats(prior_stack);

    // per-channel domain-averaged moment agreement
    json channels = json::array();
    for (int c = 0; c < nc; ++c) {
        double mean_abs_diff = 0.0, var_t = 0.0, var_p = 0.0;
        for (size_t j = 0; j < plane; ++j) {
            mean_abs_diff += std::abs(static_cast<double>(ps.mean[c * plane + j]) -
                                      ts.mean[c * plane + j]);
            var_t += ts.variance[c * plane + j];
            var_p += ps.variance[c * plane + j];
        }
        mean_abs_diff /= static_cast<double>(plane);
        var_t /= static_cast<double>(plane);
        var_p /= static_cast<double>(plane);
        const double sigma = std::sqrt(var_t);
        channels.push_back({{"channel", v.stats.channel_names[c]},
                            {"mean_abs_diff_sigma", sigma > 0 ? mean_abs_diff / sigma : 0.0},
                            {"variance_ratio", var_t > 0 ? var_p / var_t : 0.0}});
    }

    // radially averaged spectra (mean over samples), one decade slope fit
    const double lam_max = static_cast<double>(std::min(v.ny, v.nx)) * v.spacing_km;
    const double lam_min = lam_max / 10.0;
    json spectra = json::array();
    for (int c = 0; c < nc; ++c) {
        RadialSpectrum acc_t, acc_p;
        for (int i = 0; i < n; ++i) {
            RadialSpectrum st = psd_radial(train_stack.at(i, c), v.ny, v.nx, v.spacing_km);
            RadialSpectrum sp = psd_radial(prior_stack.at(i, c), v.ny, v.nx, v.spacing_km);
            if (i == 0) {
                acc_t = st;
                acc_p = sp;
            } else {
                for (size_t b = 0; b < st.power.size(); ++b) {
                    acc_t.power[b] += st.power[b];
                    acc_p.power[b] += sp.power[b];
                }
            }
        }
        for (auto& x : acc_t.power) x /= n;
        for (auto& x : acc_p.power) x /= n;
        const double slope_t = fit_loglog_slope(acc_t, lam_min, lam_max);
        const double slope_p = fit_loglog_slope(acc_p, lam_min, lam_max);
        spectra.push_back({{"channel", v.stats.channel_names[c]},
                           {"slope_train", slope_t},
                           {"slope_prior", slope_p},
                           {"slope_diff", std::abs(slope_p - slope_t)}});
    }

    // domain-mean u/t spatial correlation per level
    const int iu = static_cast<int>(std::find(v.variables.begin(), v.variables.end(), "u") -
                                    v.variables.begin());
    const int it = static_cast<int>(std::find(v.variables.begin(), v.variables.end(), "t") -
                                    v.variables.begin());
    json corr = json::array();
    // the pointwise correlation estimator needs >= 30 samples to be usable
    if (n >= 30 && iu < static_cast<int>(v.variables.size()) &&
        it < static_cast<int>(v.variables.size())) {
        const auto prof_t = level_corr_profile(train_stack, static_cast<int>(v.variables.size()),
                                               static_cast<int>(v.levels.size()), iu, it);
        const auto prof_p = level_corr_profile(prior_stack, static_cast<int>(v.variables.size()),
                                               static_cast<int>(v.levels.size()), iu, it);
        for (size_t l = 0; l < prof_t.size(); ++l)
            corr.push_back({{"level", v.levels[l]},
                            {"corr_train", prof_t[l]},
                            {"corr_prior", prof_p[l]},
                            {"corr_diff", std::abs(prof_p[l] - prof_t[l])}});
    }

    json rep;
    rep["n_samples"] = n;
    rep["channels"] = channels;
    rep["spectra"] = spectra;
    rep["u_t_correlation"] = corr;
    rep["psd_fit_wavelengths_km"] = {lam_min, lam_max};

    const fs::path dir = root_of(cfg) / "reports" / "climatology";
    write_text_file(dir / "climatology.json", rep.dump(2) + "\n");
    write_stage_manifest(cfg, "climatology", dir,
                         {"data/hires", "models/prior/checkpoint"},
                         {"reports/climatology/climatology.json"}, {{"n_samples", n}});
    return dir.string();
}

std::string stage_power(const PipelineConfig& cfg) {
    cfg.validate();
    StageLog log("power");
    const fs::path data = root_of(cfg) / "data";
    const fs::path ens_dir = root_of(cfg) / "forecasts" / "ensembles";
    const fs::path prelim_pack = root_of(cfg) / "forecasts" / "preliminary" / "fields";
    require_input(data / "hires", "power", "hi-res dataset");
    require_input(ens_dir / "case_000", "power", "forecast ensembles");
    require_input(prelim_pack, "power", "preliminary predictions");
    GridPackReader hires((data / "hires").string());
    GridPackReader coarse((data / "coarse").string());
    const DatasetView v = dataset_view(cfg, hires, coarse);
    GridPackReader prelim(prelim_pack.string());
    const int first = training_split(cfg, v);

    std::vector<double> obs, pred_ens, pred_bicubic;
    json per_case = json::array();
    for (int p = 0; p < cfg.eval_pairs; ++p) {
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", p);
        EnsembleSet ens = read_ensemble((ens_dir / name).string());
        FieldTensor truth = field_from_bundle(hires, v, first + p, false);
        FieldTensor cf = field_from_bundle(coarse, v, first + p, true);
        FieldTensor bic = bicubic_baseline(cf, v.factor);

        const double obs_power = field_power(truth, cfg.curve, cfg.farm)[0];
        const auto member_power = ensemble_power(ens, cfg.curve, cfg.farm);
        double mean_power = 0.0;
        for (double x : member_power) mean_power += x;
        mean_power /= static_cast<double>(member_power.size());
        const double bic_power = field_power(bic, cfg.curve, cfg.farm)[0];

        double spread = 0.0;
        for (double x : member_power) spread += (x - mean_power) * (x - mean_power);
        spread = member_power.size() > 1
                     ? std::sqrt(spread / static_cast<double>(member_power.size() - 1))
                     : 0.0;

        obs.push_back(obs_power);
        pred_ens.push_back(mean_power);
        pred_bicubic.push_back(bic_power);
        per_case.push_back({{"case", p},
                            {"obs_mw", obs_power},
                            {"forecast_mw", mean_power},
                            {"bicubic_mw", bic_power},
                            {"member_spread_mw", spread}});
    }

    const AccuracyReport acc_ens = accuracy_report(pred_ens, obs, cfg.farm,
                                                   cfg.extreme_quantile);
    const AccuracyReport acc_bic = accuracy_report(pred_bicubic, obs, cfg.farm,
                                                   cfg.extreme_quantile);
    const double delta_cr = (acc_ens.overall_c_r - acc_bic.overall_c_r) / 100.0;
    const double daily_gain =
        economic_gain(delta_cr, cfg.farm.capacity_mw, cfg.farm.price_per_mwh, 24.0);

    auto acc_json = [](const AccuracyReport& a) {
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
    };
    json rep;
    rep["n_cases"] = cfg.eval_pairs;
    rep["forecast"] = acc_json(acc_ens);
    rep["bicubic_baseline"] = acc_json(acc_bic);
    rep["delta_c_r_fraction"] = delta_cr;
    rep["daily_gain"] = daily_gain;
    rep["per_case"] = per_case;

    const fs::path dir = root_of(cfg) / "reports" / "power";
    write_text_file(dir / "power.json", rep.dump(2) + "\n");
    write_stage_manifest(cfg, "power", dir,
                         {"data/hires", "data/coarse", "forecasts/ensembles"},
                         {"reports/power/power.json"});
    return dir.string();
}

void run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    stage_synth_data(cfg);
    stage_train_prior(cfg);
    stage_train_downscaler(cfg);
    stage_sample_prior(cfg);
    stage_downscale(cfg);
    stage_forecast(cfg);
    stage_sweep(cfg);
    stage_evaluate(cfg);
    stage_climatology(cfg);
    stage_power(cfg);
}

std::string stage_benchmark(const PipelineConfig& cfg, std::vector<int> member_counts) {
    cfg.validate();
    StageLog log("benchmark");
    if (member_counts.empty()) member_counts = {2, 4};
    for (int m : member_counts)
        if (m < 1) throw ConfigError("benchmark: member counts must be >= 1");
    const fs::path ckpt = root_of(cfg) / "models" / "prior" / "checkpoint";
    require_input(ckpt, "benchmark", "prior checkpoint");
    DiffusionModel model = load_checkpoint(ckpt.string());

    json runs = json::array();
    double per_member_sec = 0.0;
    for (size_t i = 0; i < member_counts.size(); ++i) {
        const int m = member_counts[i];
        const auto t0 = std::chrono::steady_clock::now();
        sample_prior(model, m, stage_seed(cfg, "benchmark"));
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        per_member_sec = sec / m;
        runs.push_back({{"members", m},
                        {"seconds", sec},
                        {"seconds_per_member", per_member_sec}});
        std::fprintf(stderr, "[benchmark] members=%d: %.2f s (%.3f s/member)\n", m, sec,
                     per_member_sec);
    }

    json rep;
    rep["runs"] = runs;
    rep["reverse_steps_full_chain"] = model.schedule.T;
    rep["reverse_steps_at_strength"] = start_step(model.schedule, cfg.guidance.strength);
    rep["projected_seconds"] = {{"members", cfg.guidance.members},
                                {"seconds", per_member_sec * cfg.guidance.members}};
    rep["hardware"] = json::object();
#if defined(__linux__)
    {
        std::ifstream cpu("/proc/cpuinfo");
        std::string line;
        while (std::getline(cpu, line))
            if (line.rfind("model name", 0) == 0) {
                rep["hardware"]["cpu"] = line.substr(line.find(':') + 2);
                break;
            }
    }
#endif
    rep["hardware"]["threads"] = 1;  // kernels run single-threaded for determinism

    const fs::path dir = root_of(cfg) / "reports" / "benchmark";
    write_text_file(dir / "benchmark.json", rep.dump(2) + "\n");
    write_stage_manifest(cfg, "benchmark", dir, {"models/prior/checkpoint"},
                         {"reports/benchmark/benchmark.json"});
    return dir.string();
}

}  // namespace ensembledown
