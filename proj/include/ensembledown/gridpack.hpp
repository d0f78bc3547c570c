#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ensembledown/field.hpp"

namespace ensembledown {

// GridPack: a directory holding manifest.json plus one raw binary file per
// array (float32, little-endian, row-major). The manifest is the canonical
// interchange format of the repo; see docs/formats.md. Serialization is
// deterministic: sorted manifest keys, arrays sorted by name, so two
// writes of the same object produce byte-identical directories.

struct NamedArray {
    std::string name;
    std::vector<size_t> shape;
    std::vector<float> data;

    size_t element_count() const;
};

struct ArrayBundle {
    std::vector<NamedArray> arrays;
    std::map<std::string, std::string> attrs;

    const NamedArray* find(const std::string& name) const;
    const NamedArray& require(const std::string& name) const;
};

using GridPackObject = std::variant<FieldTensor, EnsembleSet, ArrayBundle>;

void write_gridpack(const std::string& path, const FieldTensor& field);
void write_gridpack(const std::string& path, const EnsembleSet& ensemble);
void write_gridpack(const std::string& path, const ArrayBundle& bundle);

GridPackObject read_gridpack(const std::string& path);

// Typed readers; throw DataError if the pack holds a different kind.
FieldTensor read_field(const std::string& path);
EnsembleSet read_ensemble(const std::string& path);
ArrayBundle read_bundle(const std::string& path);

std::string gridpack_kind(const std::string& path);

// Incremental writer for packs too large to assemble in memory. Arrays are
// streamed chunk by chunk; the manifest is emitted on finish(). Output
// bytes are identical to the one-shot writer given the same content.
class GridPackWriter {
public:
    GridPackWriter(std::string path, std::string kind);
    ~GridPackWriter();

    GridPackWriter(const GridPackWriter&) = delete;
    GridPackWriter& operator=(const GridPackWriter&) = delete;

    void add_array(const std::string& name, const std::vector<size_t>& shape,
                   const float* data);
    void open_array(const std::string& name, const std::vector<size_t>& shape);
    void append(const float* data, size_t count);
    void close_array();

    void set_attr(const std::string& key, const std::string& value);
    void set_metadata_json(const std::string& key, const std::string& json_text);

    void finish();

private:
    struct Impl;
    Impl* impl_;
};

// Random-access reader; verifies sizes and checksums on first access.
class GridPackReader {
public:
    explicit GridPackReader(std::string path);
    ~GridPackReader();

    GridPackReader(const GridPackReader&) = delete;
    GridPackReader& operator=(const GridPackReader&) = delete;

    std::string kind() const;
    std::vector<std::string> array_names() const;
    std::vector<size_t> array_shape(const std::string& name) const;
    std::vector<float> read_array(const std::string& name) const;
    void read_slice(const std::string& name, size_t elem_offset, size_t count,
                    float* dst) const;
    const std::map<std::string, std::string>& attrs() const;
    std::string metadata_json(const std::string& key) const;  // "" if absent

private:
    struct Impl;
    Impl* impl_;
};

}  // namespace ensembledown
