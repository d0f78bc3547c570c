#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ensembledown {

// One multi-variable, multi-level gridded atmospheric state.
// values are stored [variable, level, y, x], row-major, float32.
struct FieldTensor {
    std::vector<float> values;
    std::vector<std::string> variable_names;
    std::vector<std::string> level_labels;
    double grid_spacing_km = 1.0;
    int64_t timestamp = 0;  // minutes since epoch
    int ny = 0;
    int nx = 0;
    std::map<std::string, std::string> attrs;

    int n_vars() const { return static_cast<int>(variable_names.size()); }
    int n_levels() const { return static_cast<int>(level_labels.size()); }
    int n_channels() const { return n_vars() * n_levels(); }
    size_t plane_size() const { return static_cast<size_t>(ny) * nx; }
    size_t size() const { return values.size(); }

    // channel index in variable-major order: (variable, level)
    int channel_index(int var, int level) const { return var * n_levels() + level; }

    float* channel(int var, int level) {
        return values.data() + static_cast<size_t>(channel_index(var, level)) * plane_size();
    }
    const float* channel(int var, int level) const {
        return values.data() + static_cast<size_t>(channel_index(var, level)) * plane_size();
    }

    float& at(int var, int level, int y, int x) {
        return values[((static_cast<size_t>(var) * n_levels() + level) * ny + y) * nx + x];
    }
    float at(int var, int level, int y, int x) const {
        return values[((static_cast<size_t>(var) * n_levels() + level) * ny + y) * nx + x];
    }

    int variable_index(const std::string& name) const;  // -1 if absent
    int level_index(const std::string& label) const;

    // throws DataError on NaN/Inf (names the first offending flat index)
    // or on dimension mismatches
    void validate() const;
};

FieldTensor make_field(std::vector<std::string> variables, std::vector<std::string> levels,
                       int ny, int nx, double grid_spacing_km = 1.0, int64_t timestamp = 0);

// M members sharing one grid/metadata block. members laid out
// [member, variable, level, y, x].
struct EnsembleSet {
    std::vector<float> members;
    std::vector<uint64_t> member_seeds;
    std::vector<std::string> variable_names;
    std::vector<std::string> level_labels;
    double grid_spacing_km = 1.0;
    int64_t timestamp = 0;
    int ny = 0;
    int nx = 0;
    std::map<std::string, std::string> attrs;

    int n_members() const { return static_cast<int>(member_seeds.size()); }
    size_t member_size() const {
        return variable_names.size() * level_labels.size() * static_cast<size_t>(ny) * nx;
    }
    float* member(int m) { return members.data() + m * member_size(); }
    const float* member(int m) const { return members.data() + m * member_size(); }

    FieldTensor member_field(int m) const;

    // member count >= 1, distinct seeds, finite values
    void validate() const;
};

EnsembleSet make_ensemble(const FieldTensor& proto, const std::vector<uint64_t>& seeds);

// Per-channel standardization statistics, channel key = (variable, level),
// flattened variable-major.
struct NormStats {
    std::vector<std::string> channel_names;  // "var@level"
    std::vector<double> mean;
    std::vector<double> std_dev;

    size_t n_channels() const { return channel_names.size(); }
    void validate() const;  // std > 0 for every channel
    int find(const std::string& name) const;
};

std::string channel_name(const std::string& var, const std::string& level);

NormStats stats_for_layout(const std::vector<std::string>& variables,
                           const std::vector<std::string>& levels,
                           std::vector<double> mean, std::vector<double> std_dev);

// out = (in - mean) / std per channel; stats must cover every channel present.
FieldTensor normalize(const FieldTensor& field, const NormStats& stats);
FieldTensor denormalize(const FieldTensor& field, const NormStats& stats);

// In-place variants over a raw [channel, y, x] block with the given layout.
void normalize_block(float* data, const std::vector<std::string>& variables,
                     const std::vector<std::string>& levels, size_t plane, const NormStats& stats);
void denormalize_block(float* data, const std::vector<std::string>& variables,
                       const std::vector<std::string>& levels, size_t plane,
                       const NormStats& stats);

}  // namespace ensembledown
