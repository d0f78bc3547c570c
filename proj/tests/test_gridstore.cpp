#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ensembledown/errors.hpp"
#include "ensembledown/field.hpp"
#include "ensembledown/gridpack.hpp"
#include "ensembledown/rng.hpp"

using namespace ensembledown;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("ed_gridstore_" + tag);
    fs::remove_all(p);
    return p;
}

FieldTensor demo_field(uint64_t seed) {
    FieldTensor f = make_field({"u", "v"}, {"L0", "L1", "L2"}, 8, 6, 3.0, 1700000000);
    RngStream rng(seed);
    rng.fill_normal(f.values.data(), f.values.size());
    f.attrs["source"] = "test";
    return f;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("field round-trips bit exactly") {
    auto dir = temp_dir("field_rt");
    FieldTensor f = demo_field(1);
    write_gridpack(dir.string(), f);
    FieldTensor g = read_field(dir.string());
    CHECK(g.variable_names == f.variable_names);
    CHECK(g.level_labels == f.level_labels);
    CHECK(g.ny == f.ny);
    CHECK(g.nx == f.nx);
    CHECK(g.grid_spacing_km == f.grid_spacing_km);
    CHECK(g.timestamp == f.timestamp);
    CHECK(g.values == f.values);  // exact float equality: storage is lossless
    CHECK(g.attrs.at("source") == "test");
    fs::remove_all(dir);
}

TEST_CASE("writing the same object twice yields identical bytes") {
    auto d1 = temp_dir("det_a");
    auto d2 = temp_dir("det_b");
    FieldTensor f = demo_field(2);
    write_gridpack(d1.string(), f);
    write_gridpack(d2.string(), f);
    CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
    CHECK(slurp(d1 / "values.bin") == slurp(d2 / "values.bin"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("ensemble round-trips with member seeds") {
    auto dir = temp_dir("ens_rt");
    FieldTensor proto = demo_field(3);
    EnsembleSet e = make_ensemble(proto, {101, 202, 303});
    RngStream rng(4);
    rng.fill_normal(e.members.data(), e.members.size());
    write_gridpack(dir.string(), e);
    EnsembleSet g = read_ensemble(dir.string());
    CHECK(g.member_seeds == e.member_seeds);
    CHECK(g.members == e.members);
    CHECK(g.variable_names == proto.variable_names);
    CHECK(g.n_members() == 3);
    fs::remove_all(dir);
}

TEST_CASE("bundle round-trips arbitrary named arrays") {
    auto dir = temp_dir("bundle_rt");
    ArrayBundle b;
    b.arrays.push_back({"alpha", {4}, {1.f, 2.f, 3.f, 4.f}});
    b.arrays.push_back({"weights", {2, 3}, {0.f, 1.f, 2.f, 3.f, 4.f, 5.f}});
    b.attrs["purpose"] = "testing";
    write_gridpack(dir.string(), b);
    ArrayBundle g = read_bundle(dir.string());
    CHECK(g.require("alpha").data == b.arrays[0].data);
    CHECK(g.require("weights").shape == std::vector<size_t>{2, 3});
    CHECK(g.attrs.at("purpose") == "testing");
    CHECK(gridpack_kind(dir.string()) == "bundle");
    fs::remove_all(dir);
}

TEST_CASE("kind dispatch via read_gridpack") {
    auto dir = temp_dir("dispatch");
    write_gridpack(dir.string(), demo_field(5));
    GridPackObject obj = read_gridpack(dir.string());
    CHECK(std::holds_alternative<FieldTensor>(obj));
    CHECK_THROWS_AS(read_ensemble(dir.string()), DataError);
    fs::remove_all(dir);
}

TEST_CASE("zero-dimension arrays are rejected at write time") {
    auto dir = temp_dir("zerodim");
    ArrayBundle b;
    b.arrays.push_back({"empty", {0, 3}, {}});
    CHECK_THROWS_AS(write_gridpack(dir.string(), b), DataError);
    fs::remove_all(dir);
}

TEST_CASE("non-finite values are rejected at write time") {
    auto dir = temp_dir("nonfinite");
    ArrayBundle b;
    b.arrays.push_back({"bad", {3}, {1.f, std::numeric_limits<float>::quiet_NaN(), 2.f}});
    try {
        write_gridpack(dir.string(), b);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("bad") != std::string::npos);
        CHECK(std::string(e.what()).find("1") != std::string::npos);  // flat index
    }
    fs::remove_all(dir);
}

TEST_CASE("truncated binary is reported with the array name") {
    auto dir = temp_dir("trunc");
    write_gridpack(dir.string(), demo_field(6));
    fs::resize_file(dir / "values.bin", 10);
    try {
        read_field(dir.string());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("values") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("corrupted payload fails the checksum") {
    auto dir = temp_dir("corrupt");
    write_gridpack(dir.string(), demo_field(7));
    {
        std::fstream f(dir / "values.bin", std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(8);
        char byte = 0x5A;
        f.write(&byte, 1);
    }
    CHECK_THROWS_WITH_AS(read_field(dir.string()),
                         doctest::Contains("checksum mismatch"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("missing and malformed manifests are data errors") {
    auto dir = temp_dir("manifest");
    CHECK_THROWS_AS(read_gridpack((dir / "nowhere").string()), DataError);
    fs::create_directories(dir);
    std::ofstream(dir / "manifest.json") << "{ not json";
    CHECK_THROWS_AS(read_gridpack(dir.string()), DataError);
    std::ofstream(dir / "manifest.json", std::ios::trunc)
        << R"({"format_version": 99, "kind": "field", "arrays": []})";
    CHECK_THROWS_WITH_AS(read_gridpack(dir.string()),
                         doctest::Contains("format_version"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("streaming writer equals one-shot writer byte for byte") {
    auto d1 = temp_dir("stream_a");
    auto d2 = temp_dir("stream_b");
    std::vector<float> data(1000);
    RngStream rng(8);
    rng.fill_normal(data.data(), data.size());

    ArrayBundle b;
    b.arrays.push_back({"x", {10, 100}, data});
    write_gridpack(d1.string(), b);

    GridPackWriter w(d2.string(), "bundle");
    w.open_array("x", {10, 100});
    for (size_t off = 0; off < data.size(); off += 128)
        w.append(data.data() + off, std::min<size_t>(128, data.size() - off));
    w.close_array();
    w.finish();

    CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
    CHECK(slurp(d1 / "x.bin") == slurp(d2 / "x.bin"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("streaming writer rejects element-count mismatches") {
    auto dir = temp_dir("stream_err");
    GridPackWriter w(dir.string(), "bundle");
    w.open_array("x", {4});
    float v[2] = {1.f, 2.f};
    w.append(v, 2);
    CHECK_THROWS_AS(w.close_array(), DataError);  // 2 of 4 elements written
    fs::remove_all(dir);
}

TEST_CASE("read_slice returns the requested window") {
    auto dir = temp_dir("slice");
    std::vector<float> data(64);
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i);
    ArrayBundle b;
    b.arrays.push_back({"x", {8, 8}, data});
    write_gridpack(dir.string(), b);
    GridPackReader r(dir.string());
    std::vector<float> win(8);
    r.read_slice("x", 16, 8, win.data());  // third row
    for (int i = 0; i < 8; ++i) CHECK(win[i] == 16.f + i);
    CHECK_THROWS_AS(r.read_slice("x", 60, 8, win.data()), DataError);
    fs::remove_all(dir);
}
