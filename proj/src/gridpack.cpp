#include "ensembledown/gridpack.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ensembledown/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ensembledown {

static_assert(std::endian::native == std::endian::little,
              "GridPack writer assumes a little-endian host");

namespace {

constexpr int kFormatVersion = 1;

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

std::string checksum_string(uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string bin_filename(const std::string& name) {
    std::string out;
    out.reserve(name.size() + 4);
    for (char c : name) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                  (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
        out.push_back(ok ? c : '_');
    }
    return out + ".bin";
}

void check_shape(const std::string& name, const std::vector<size_t>& shape) {
    if (shape.empty()) throw DataError("gridpack: array '" + name + "' has empty shape");
    for (size_t d : shape)
        if (d == 0)
            throw DataError("gridpack: array '" + name +
                            "' has a zero dimension (empty arrays are not representable)");
}

void check_finite_chunk(const std::string& name, const float* data, size_t n,
                        size_t base_offset) {
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(data[i])) {
            std::ostringstream os;
            os << "gridpack: array '" << name << "' contains a non-finite value at flat index "
               << (base_offset + i);
            throw DataError(os.str());
        }
    }
}

}  // namespace

size_t NamedArray::element_count() const {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

const NamedArray* ArrayBundle::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const NamedArray& ArrayBundle::require(const std::string& name) const {
    const NamedArray* a = find(name);
    if (!a) throw DataError("gridpack: bundle is missing array '" + name + "'");
    return *a;
}

// ---------------------------------------------------------------------------
// writer

struct GridPackWriter::Impl {
    fs::path dir;
    std::string kind;
    json manifest;

    struct Entry {
        std::string name;
        std::vector<size_t> shape;
        std::string file;
        uint64_t checksum;
    };
    std::vector<Entry> entries;

    // streaming state
    std::ofstream stream;
    std::string open_name;
    std::vector<size_t> open_shape;
    size_t open_expected = 0;
    size_t open_written = 0;
    uint64_t open_checksum = 0xCBF29CE484222325ull;
    bool finished = false;
};

GridPackWriter::GridPackWriter(std::string path, std::string kind) : impl_(new Impl) {
    impl_->dir = path;
    impl_->kind = std::move(kind);
    std::error_code ec;
    fs::create_directories(impl_->dir, ec);
    if (ec || !fs::is_directory(impl_->dir))
        throw DataError("gridpack: cannot create directory " + path);
    // probe writability early so failures carry a clear message
    std::ofstream probe(impl_->dir / ".write_probe", std::ios::binary);
    if (!probe) throw DataError("gridpack: path not writable: " + path);
    probe.close();
    fs::remove(impl_->dir / ".write_probe", ec);
}

GridPackWriter::~GridPackWriter() { delete impl_; }

void GridPackWriter::open_array(const std::string& name, const std::vector<size_t>& shape) {
    if (!impl_->open_name.empty())
        throw DataError("gridpack: open_array while '" + impl_->open_name + "' is open");
    check_shape(name, shape);
    for (const auto& e : impl_->entries)
        if (e.name == name) throw DataError("gridpack: duplicate array name '" + name + "'");
    impl_->open_name = name;
    impl_->open_shape = shape;
    impl_->open_expected = 1;
    for (size_t d : shape) impl_->open_expected *= d;
    impl_->open_written = 0;
    impl_->open_checksum = 0xCBF29CE484222325ull;
    impl_->stream.open(impl_->dir / bin_filename(name), std::ios::binary | std::ios::trunc);
    if (!impl_->stream)
        throw DataError("gridpack: cannot open " + (impl_->dir / bin_filename(name)).string());
}

void GridPackWriter::append(const float* data, size_t count) {
    if (impl_->open_name.empty()) throw DataError("gridpack: append without open array");
    check_finite_chunk(impl_->open_name, data, count, impl_->open_written);
    impl_->stream.write(reinterpret_cast<const char*>(data),
                        static_cast<std::streamsize>(count * sizeof(float)));
    if (!impl_->stream) throw DataError("gridpack: write failure for " + impl_->open_name);
    impl_->open_checksum = fnv1a64(data, count * sizeof(float), impl_->open_checksum);
    impl_->open_written += count;
    if (impl_->open_written > impl_->open_expected)
        throw DataError("gridpack: wrote past the declared shape of " + impl_->open_name);
}

void GridPackWriter::close_array() {
    if (impl_->open_name.empty()) throw DataError("gridpack: close_array without open array");
    if (impl_->open_written != impl_->open_expected) {
        std::ostringstream os;
        os << "gridpack: array '" << impl_->open_name << "' got " << impl_->open_written
           << " elements, shape demands " << impl_->open_expected;
        throw DataError(os.str());
    }
    impl_->stream.close();
    impl_->entries.push_back({impl_->open_name, impl_->open_shape,
                              bin_filename(impl_->open_name), impl_->open_checksum});
    impl_->open_name.clear();
}

void GridPackWriter::add_array(const std::string& name, const std::vector<size_t>& shape,
                               const float* data) {
    open_array(name, shape);
    append(data, impl_->open_expected);
    close_array();
}

void GridPackWriter::set_attr(const std::string& key, const std::string& value) {
    impl_->manifest["attrs"][key] = value;
}

void GridPackWriter::set_metadata_json(const std::string& key, const std::string& json_text) {
    impl_->manifest[key] = json::parse(json_text);
}

void GridPackWriter::finish() {
    if (impl_->finished) return;
    if (!impl_->open_name.empty())
        throw DataError("gridpack: finish with array '" + impl_->open_name + "' still open");

    std::sort(impl_->entries.begin(), impl_->entries.end(),
              [](const auto& a, const auto& b) { return a.name < b.name; });

    json arrays = json::array();
    for (const auto& e : impl_->entries) {
        json a;
        a["name"] = e.name;
        a["shape"] = e.shape;
        a["dtype"] = "float32";
        a["byte_order"] = "little";
        a["layout"] = "row-major";
        a["file"] = e.file;
        a["checksum"] = checksum_string(e.checksum);
        arrays.push_back(a);
    }
    impl_->manifest["format_version"] = kFormatVersion;
    impl_->manifest["kind"] = impl_->kind;
    impl_->manifest["arrays"] = arrays;
    if (!impl_->manifest.contains("attrs")) impl_->manifest["attrs"] = json::object();

    std::ofstream mf(impl_->dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!mf) throw DataError("gridpack: cannot write manifest in " + impl_->dir.string());
    mf << impl_->manifest.dump(2) << "\n";
    if (!mf) throw DataError("gridpack: manifest write failure in " + impl_->dir.string());
    impl_->finished = true;
}

// ---------------------------------------------------------------------------
// reader

struct GridPackReader::Impl {
    fs::path dir;
    json manifest;
    std::map<std::string, std::string> attrs;

    struct Entry {
        std::vector<size_t> shape;
        std::string file;
        std::string checksum;  // empty if absent
        size_t elements = 0;
    };
    std::map<std::string, Entry> entries;
};

GridPackReader::GridPackReader(std::string path) : impl_(new Impl) {
    impl_->dir = path;
    fs::path mpath = impl_->dir / "manifest.json";
    std::ifstream mf(mpath, std::ios::binary);
    if (!mf) throw DataError("gridpack: missing manifest.json in " + path);
    try {
        mf >> impl_->manifest;
    } catch (const json::exception& e) {
        throw DataError("gridpack: malformed manifest.json in " + path + ": " + e.what());
    }
    const json& m = impl_->manifest;
    if (!m.contains("format_version") || !m["format_version"].is_number_integer())
        throw DataError("gridpack: manifest lacks format_version");
    if (m["format_version"].get<int>() != kFormatVersion) {
        std::ostringstream os;
        os << "gridpack: unknown format_version " << m["format_version"]
           << " (reader supports " << kFormatVersion << ")";
        throw DataError(os.str());
    }
    if (!m.contains("kind") || !m.contains("arrays") || !m["arrays"].is_array())
        throw DataError("gridpack: manifest lacks kind/arrays");
    for (const auto& a : m["arrays"]) {
        Impl::Entry e;
        std::string name = a.at("name").get<std::string>();
        e.shape = a.at("shape").get<std::vector<size_t>>();
        check_shape(name, e.shape);
        if (a.at("dtype").get<std::string>() != "float32")
            throw DataError("gridpack: array '" + name + "' has unsupported dtype");
        if (a.at("byte_order").get<std::string>() != "little")
            throw DataError("gridpack: array '" + name + "' has unsupported byte order");
        if (a.at("layout").get<std::string>() != "row-major")
            throw DataError("gridpack: array '" + name + "' has unsupported layout");
        e.file = a.at("file").get<std::string>();
        if (a.contains("checksum")) e.checksum = a["checksum"].get<std::string>();
        e.elements = 1;
        for (size_t d : e.shape) e.elements *= d;
        impl_->entries[name] = e;
    }
    if (m.contains("attrs"))
        for (auto it = m["attrs"].begin(); it != m["attrs"].end(); ++it)
            impl_->attrs[it.key()] = it.value().get<std::string>();
}

GridPackReader::~GridPackReader() { delete impl_; }

std::string GridPackReader::kind() const { return impl_->manifest["kind"].get<std::string>(); }

std::vector<std::string> GridPackReader::array_names() const {
    std::vector<std::string> names;
    for (const auto& [name, e] : impl_->entries) names.push_back(name);
    return names;
}

std::vector<size_t> GridPackReader::array_shape(const std::string& name) const {
    auto it = impl_->entries.find(name);
    if (it == impl_->entries.end())
        throw DataError("gridpack: no array '" + name + "' in " + impl_->dir.string());
    return it->second.shape;
}

std::vector<float> GridPackReader::read_array(const std::string& name) const {
    auto it = impl_->entries.find(name);
    if (it == impl_->entries.end())
        throw DataError("gridpack: no array '" + name + "' in " + impl_->dir.string());
    const auto& e = it->second;
    fs::path file = impl_->dir / e.file;
    std::error_code ec;
    const auto fsize = fs::file_size(file, ec);
    if (ec) throw DataError("gridpack: cannot stat " + file.string() + " for array '" + name +
                            "'");
    if (fsize != e.elements * sizeof(float)) {
        std::ostringstream os;
        os << "gridpack: array '" << name << "' binary is " << fsize << " bytes, expected "
           << e.elements * sizeof(float) << " (shape x 4)";
        throw DataError(os.str());
    }
    std::vector<float> out(e.elements);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("gridpack: cannot open " + file.string());
    in.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(e.elements * sizeof(float)));
    if (!in) throw DataError("gridpack: truncated read of array '" + name + "'");
    if (!e.checksum.empty()) {
        std::string got = checksum_string(fnv1a64(out.data(), e.elements * sizeof(float)));
        if (got != e.checksum)
            throw DataError("gridpack: checksum mismatch for array '" + name + "' (stored " +
                            e.checksum + ", computed " + got + ")");
    }
    return out;
}

void GridPackReader::read_slice(const std::string& name, size_t elem_offset, size_t count,
                                float* dst) const {
    auto it = impl_->entries.find(name);
    if (it == impl_->entries.end())
        throw DataError("gridpack: no array '" + name + "' in " + impl_->dir.string());
    const auto& e = it->second;
    if (elem_offset + count > e.elements)
        throw DataError("gridpack: slice out of range for array '" + name + "'");
    std::ifstream in(impl_->dir / e.file, std::ios::binary);
    if (!in) throw DataError("gridpack: cannot open binary of array '" + name + "'");
    in.seekg(static_cast<std::streamoff>(elem_offset * sizeof(float)));
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw DataError("gridpack: truncated read of array '" + name + "'");
}

const std::map<std::string, std::string>& GridPackReader::attrs() const {
    return impl_->attrs;
}

std::string GridPackReader::metadata_json(const std::string& key) const {
    if (!impl_->manifest.contains(key)) return "";
    return impl_->manifest[key].dump();
}

// ---------------------------------------------------------------------------
// object-level adapters

namespace {

json field_metadata(const FieldTensor& f) {
    json j;
    j["variable_names"] = f.variable_names;
    j["level_labels"] = f.level_labels;
    j["grid_spacing_km"] = f.grid_spacing_km;
    j["timestamp"] = f.timestamp;
    j["channel_order"] = "variable-major";
    return j;
}

void load_field_metadata(const GridPackReader& r, FieldTensor& f) {
    std::string meta = r.metadata_json("field");
    if (meta.empty()) throw DataError("gridpack: field pack lacks 'field' metadata");
    json j = json::parse(meta);
    f.variable_names = j.at("variable_names").get<std::vector<std::string>>();
    f.level_labels = j.at("level_labels").get<std::vector<std::string>>();
    f.grid_spacing_km = j.at("grid_spacing_km").get<double>();
    f.timestamp = j.at("timestamp").get<int64_t>();
}

}  // namespace

void write_gridpack(const std::string& path, const FieldTensor& field) {
    field.validate();
    GridPackWriter w(path, "field");
    w.add_array("values",
                {static_cast<size_t>(field.n_vars()), static_cast<size_t>(field.n_levels()),
                 static_cast<size_t>(field.ny), static_cast<size_t>(field.nx)},
                field.values.data());
    w.set_metadata_json("field", field_metadata(field).dump());
    for (const auto& [k, v] : field.attrs) w.set_attr(k, v);
    w.finish();
}

void write_gridpack(const std::string& path, const EnsembleSet& ensemble) {
    ensemble.validate();
    GridPackWriter w(path, "ensemble");
    w.add_array("members",
                {static_cast<size_t>(ensemble.n_members()),
                 ensemble.variable_names.size(), ensemble.level_labels.size(),
                 static_cast<size_t>(ensemble.ny), static_cast<size_t>(ensemble.nx)},
                ensemble.members.data());
    FieldTensor proto;
    proto.variable_names = ensemble.variable_names;
    proto.level_labels = ensemble.level_labels;
    proto.grid_spacing_km = ensemble.grid_spacing_km;
    proto.timestamp = ensemble.timestamp;
    w.set_metadata_json("field", field_metadata(proto).dump());
    json ens;
    ens["member_seeds"] = ensemble.member_seeds;
    w.set_metadata_json("ensemble", ens.dump());
    for (const auto& [k, v] : ensemble.attrs) w.set_attr(k, v);
    w.finish();
}

void write_gridpack(const std::string& path, const ArrayBundle& bundle) {
    GridPackWriter w(path, "bundle");
    for (const auto& a : bundle.arrays) w.add_array(a.name, a.shape, a.data.data());
    for (const auto& [k, v] : bundle.attrs) w.set_attr(k, v);
    w.finish();
}

std::string gridpack_kind(const std::string& path) {
    GridPackReader r(path);
    return r.kind();
}

FieldTensor read_field(const std::string& path) {
    GridPackReader r(path);
    if (r.kind() != "field")
        throw DataError("gridpack: " + path + " holds kind '" + r.kind() + "', not a field");
    FieldTensor f;
    load_field_metadata(r, f);
    auto shape = r.array_shape("values");
    if (shape.size() != 4)
        throw DataError("gridpack: field 'values' must be rank 4");
    if (shape[0] != f.variable_names.size() || shape[1] != f.level_labels.size())
        throw DataError("gridpack: field 'values' shape disagrees with metadata");
    f.ny = static_cast<int>(shape[2]);
    f.nx = static_cast<int>(shape[3]);
    f.values = r.read_array("values");
    f.attrs = r.attrs();
    f.validate();
    return f;
}

EnsembleSet read_ensemble(const std::string& path) {
    GridPackReader r(path);
    if (r.kind() != "ensemble")
        throw DataError("gridpack: " + path + " holds kind '" + r.kind() +
                        "', not an ensemble");
    EnsembleSet e;
    FieldTensor proto;
    load_field_metadata(r, proto);
    e.variable_names = proto.variable_names;
    e.level_labels = proto.level_labels;
    e.grid_spacing_km = proto.grid_spacing_km;
    e.timestamp = proto.timestamp;
    std::string ens = r.metadata_json("ensemble");
    if (ens.empty()) throw DataError("gridpack: ensemble pack lacks 'ensemble' metadata");
    e.member_seeds = json::parse(ens).at("member_seeds").get<std::vector<uint64_t>>();
    auto shape = r.array_shape("members");
    if (shape.size() != 5) throw DataError("gridpack: ensemble 'members' must be rank 5");
    if (shape[0] != e.member_seeds.size() || shape[1] != e.variable_names.size() ||
        shape[2] != e.level_labels.size())
        throw DataError("gridpack: ensemble 'members' shape disagrees with metadata");
    e.ny = static_cast<int>(shape[3]);
    e.nx = static_cast<int>(shape[4]);
    e.members = r.read_array("members");
    e.attrs = r.attrs();
    e.validate();
    return e;
}

ArrayBundle read_bundle(const std::string& path) {
    GridPackReader r(path);
    ArrayBundle b;
    for (const auto& name : r.array_names()) {
        NamedArray a;
        a.name = name;
        a.shape = r.array_shape(name);
        a.data = r.read_array(name);
        b.arrays.push_back(std::move(a));
    }
    b.attrs = r.attrs();
    return b;
}

GridPackObject read_gridpack(const std::string& path) {
    std::string k = gridpack_kind(path);
    if (k == "field") return read_field(path);
    if (k == "ensemble") return read_ensemble(path);
    if (k == "bundle") return read_bundle(path);
    throw DataError("gridpack: unknown kind '" + k + "' in " + path);
}

}  // namespace ensembledown
