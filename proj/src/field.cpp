#include "ensembledown/field.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "ensembledown/errors.hpp"

namespace ensembledown {

namespace {

void check_finite(const float* data, size_t n, const char* what) {
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(data[i])) {
            std::ostringstream os;
            os << what << ": non-finite value at flat index " << i;
            throw DataError(os.str());
        }
    }
}

}  // namespace

int FieldTensor::variable_index(const std::string& name) const {
    for (size_t i = 0; i < variable_names.size(); ++i)
        if (variable_names[i] == name) return static_cast<int>(i);
    return -1;
}

int FieldTensor::level_index(const std::string& label) const {
    for (size_t i = 0; i < level_labels.size(); ++i)
        if (level_labels[i] == label) return static_cast<int>(i);
    return -1;
}

void FieldTensor::validate() const {
    if (ny <= 0 || nx <= 0) throw DataError("FieldTensor: grid dims must be positive");
    if (grid_spacing_km <= 0) throw DataError("FieldTensor: grid_spacing_km must be > 0");
    if (variable_names.empty() || level_labels.empty())
        throw DataError("FieldTensor: needs at least one variable and one level");
    size_t expected = variable_names.size() * level_labels.size() * plane_size();
    if (values.size() != expected) {
        std::ostringstream os;
        os << "FieldTensor: values size " << values.size() << " != vars*levels*ny*nx = "
           << expected;
        throw DataError(os.str());
    }
    check_finite(values.data(), values.size(), "FieldTensor");
}

FieldTensor make_field(std::vector<std::string> variables, std::vector<std::string> levels,
                       int ny, int nx, double grid_spacing_km, int64_t timestamp) {
    FieldTensor f;
    f.variable_names = std::move(variables);
    f.level_labels = std::move(levels);
    f.ny = ny;
    f.nx = nx;
    f.grid_spacing_km = grid_spacing_km;
    f.timestamp = timestamp;
    f.values.assign(f.variable_names.size() * f.level_labels.size() *
                        static_cast<size_t>(ny) * nx,
                    0.0f);
    return f;
}

FieldTensor EnsembleSet::member_field(int m) const {
    FieldTensor f;
    f.variable_names = variable_names;
    f.level_labels = level_labels;
    f.ny = ny;
    f.nx = nx;
    f.grid_spacing_km = grid_spacing_km;
    f.timestamp = timestamp;
    f.values.assign(member(m), member(m) + member_size());
    return f;
}

void EnsembleSet::validate() const {
    if (member_seeds.empty()) throw DataError("EnsembleSet: member count must be >= 1");
    std::set<uint64_t> uniq(member_seeds.begin(), member_seeds.end());
    if (uniq.size() != member_seeds.size())
        throw DataError("EnsembleSet: member_seeds must be pairwise distinct");
    if (members.size() != member_seeds.size() * member_size())
        throw DataError("EnsembleSet: members array size mismatch");
    check_finite(members.data(), members.size(), "EnsembleSet");
}

EnsembleSet make_ensemble(const FieldTensor& proto, const std::vector<uint64_t>& seeds) {
    EnsembleSet e;
    e.variable_names = proto.variable_names;
    e.level_labels = proto.level_labels;
    e.ny = proto.ny;
    e.nx = proto.nx;
    e.grid_spacing_km = proto.grid_spacing_km;
    e.timestamp = proto.timestamp;
    e.member_seeds = seeds;
    e.members.assign(seeds.size() * e.member_size(), 0.0f);
    return e;
}

std::string channel_name(const std::string& var, const std::string& level) {
    return var + "@" + level;
}

void NormStats::validate() const {
    if (mean.size() != channel_names.size() || std_dev.size() != channel_names.size())
        throw DataError("NormStats: mean/std/channel sizes disagree");
    for (size_t i = 0; i < std_dev.size(); ++i)
        if (!(std_dev[i] > 0))
            throw DataError("NormStats: std must be > 0 for channel " + channel_names[i]);
}

int NormStats::find(const std::string& name) const {
    for (size_t i = 0; i < channel_names.size(); ++i)
        if (channel_names[i] == name) return static_cast<int>(i);
    return -1;
}

NormStats stats_for_layout(const std::vector<std::string>& variables,
                           const std::vector<std::string>& levels, std::vector<double> mean,
                           std::vector<double> std_dev) {
    NormStats s;
    for (const auto& v : variables)
        for (const auto& l : levels) s.channel_names.push_back(channel_name(v, l));
    s.mean = std::move(mean);
    s.std_dev = std::move(std_dev);
    s.validate();
    return s;
}

namespace {

// Resolve the stats slot for every (variable, level) channel of the layout;
// throws if any channel is missing from the stats.
std::vector<int> resolve_channels(const std::vector<std::string>& variables,
                                  const std::vector<std::string>& levels,
                                  const NormStats& stats) {
    std::vector<int> slots;
    slots.reserve(variables.size() * levels.size());
    for (const auto& v : variables) {
        for (const auto& l : levels) {
            int idx = stats.find(channel_name(v, l));
            if (idx < 0)
                throw DataError("normalize: stats missing channel " + channel_name(v, l));
            slots.push_back(idx);
        }
    }
    return slots;
}

void apply_affine(float* data, const std::vector<int>& slots, size_t plane,
                  const NormStats& stats, bool forward) {
    for (size_t c = 0; c < slots.size(); ++c) {
        const double m = stats.mean[slots[c]];
        const double s = stats.std_dev[slots[c]];
        float* p = data + c * plane;
        if (forward) {
            const double inv = 1.0 / s;
            for (size_t i = 0; i < plane; ++i)
                p[i] = static_cast<float>((p[i] - m) * inv);
        } else {
            for (size_t i = 0; i < plane; ++i)
                p[i] = static_cast<float>(p[i] * s + m);
        }
    }
}

}  // namespace

void normalize_block(float* data, const std::vector<std::string>& variables,
                     const std::vector<std::string>& levels, size_t plane,
                     const NormStats& stats) {
    apply_affine(data, resolve_channels(variables, levels, stats), plane, stats, true);
}

void denormalize_block(float* data, const std::vector<std::string>& variables,
                       const std::vector<std::string>& levels, size_t plane,
                       const NormStats& stats) {
    apply_affine(data, resolve_channels(variables, levels, stats), plane, stats, false);
}

FieldTensor normalize(const FieldTensor& field, const NormStats& stats) {
    FieldTensor out = field;
    normalize_block(out.values.data(), out.variable_names, out.level_labels, out.plane_size(),
                    stats);
    return out;
}

FieldTensor denormalize(const FieldTensor& field, const NormStats& stats) {
    FieldTensor out = field;
    denormalize_block(out.values.data(), out.variable_names, out.level_labels,
                      out.plane_size(), stats);
    return out;
}

}  // namespace ensembledown
