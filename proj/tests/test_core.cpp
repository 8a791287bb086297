#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"
#include "parbeam/types.hpp"
#include "helpers.hpp"

using namespace parbeam;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "parbeam_core_test";
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("volume indexing is first-index-fastest") {
    Vol3<float> v(Shape3{3, 4, 5}, {4.0, 4.0, 4.0});
    CHECK(v.data.size() == 60);
    CHECK(v.idx(1, 0, 0) == 1);
    CHECK(v.idx(0, 1, 0) == 3);
    CHECK(v.idx(0, 0, 1) == 12);
    v.at(2, 3, 4) = 7.0f;
    CHECK(v.data[59] == 7.0f);
}

TEST_CASE("views indexing is detector-column fastest, view slowest") {
    Views3<float> v(4, 3, {0.1, 0.2});
    CHECK(v.total() == 24);
    CHECK(v.idx(1, 0, 0) == 1);
    CHECK(v.idx(0, 1, 0) == 4);
    CHECK(v.idx(0, 0, 1) == 12);
    CHECK(v.view(1) == v.data.data() + 12);
}

TEST_CASE("psf stack tap layout") {
    PsfStack<float> p(3, 5, 2, 2);
    CHECK(p.kernels.size() == std::size_t(3 * 5 * 2 * 2));
    CHECK(p.kernel_offset(0, 0) == 0);
    CHECK(p.kernel_offset(1, 0) == 15);
    CHECK(p.kernel_offset(0, 1) == 30);
    p.tap(1, 2, 1, 1) = 1.0f;
    CHECK(p.kernels[45 + 1 + 3 * 2] == 1.0f);
}

TEST_CASE("volume validation rejects bad shapes and voxel sizes") {
    Vol3<float> v(Shape3{2, 2, 2}, {4.0, 4.0, 4.0});
    CHECK_NOTHROW(validate_volume(v));
    v.data.pop_back();
    CHECK_THROWS_AS(validate_volume(v), SizeMismatchError);
    Vol3<float> bad(Shape3{2, 2, 2}, {4.0, 5.0, 4.0});
    CHECK_THROWS_AS(validate_volume(bad), FormatError); // in-plane voxels must be square
    Vol3<float> neg(Shape3{2, 2, 2}, {4.0, 4.0, 4.0});
    neg.data[3] = -1.0f;
    CHECK_THROWS_AS(validate_nonnegative(neg), DomainError);
    neg.data[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(validate_finite(neg), DomainError);
}

TEST_CASE("views validation needs one angle per view") {
    Views3<float> v(2, 2, {0.0, 1.0});
    CHECK_NOTHROW(validate_views(v));
    v.angles_rad.push_back(2.0);
    CHECK_THROWS_AS(validate_views(v), SizeMismatchError);
}

TEST_CASE("psf validation enforces odd sizes, symmetry, and sum <= 1") {
    auto good = th::random_symmetric_psf<float>(3, 3, 2, 2, 11);
    CHECK_NOTHROW(validate_psf(good));

    PsfStack<float> even(2, 3, 1, 1);
    CHECK_THROWS_AS(validate_psf(even), ParamError);

    auto asym = good;
    asym.tap(0, 0, 0, 0) += 0.01f;
    CHECK_THROWS_AS(validate_psf(asym), DomainError);

    PsfStack<float> big(3, 3, 1, 1);
    for (auto& t : big.kernels) t = 0.5f; // sums to 4.5
    CHECK_THROWS_AS(validate_psf(big), DomainError);
}

TEST_CASE("cast_volume converts element type, keeps geometry") {
    auto v = th::random_volume<float>(Shape3{2, 3, 2}, 5);
    auto d = cast_volume<double>(v);
    CHECK(d.shape == v.shape);
    for (std::size_t i = 0; i < v.data.size(); ++i) CHECK(d.data[i] == double(v.data[i]));
}

TEST_CASE("volume io round trip is bitwise") {
    auto dir = temp_dir();
    auto v = th::random_volume<float>(Shape3{3, 2, 4}, 17, -1.0, 2.0, {4.0, 4.0, 2.5});
    io::write_volume(v, dir / "vol");
    CHECK(fs::exists(dir / "vol.json"));
    CHECK(fs::exists(dir / "vol.raw"));
    auto r = io::read_volume(dir / "vol");
    CHECK(r.shape == v.shape);
    CHECK(r.voxel_size_mm == v.voxel_size_mm);
    CHECK(r.data == v.data);
    // ".json"/".raw" suffixes are accepted as aliases of the stem
    auto r2 = io::read_volume(dir / "vol.json");
    CHECK(r2.data == v.data);
}

TEST_CASE("reading a missing stem raises an io error") {
    CHECK_THROWS_AS(io::read_volume(temp_dir() / "nope"), IoError);
}

TEST_CASE("truncated payload names actual and expected byte counts") {
    auto dir = temp_dir();
    Vol3<float> v(Shape3{2, 2, 2}, {4.0, 4.0, 4.0});
    io::write_volume(v, dir / "trunc");
    fs::resize_file(dir / "trunc.raw", 31);
    try {
        io::read_volume(dir / "trunc");
        FAIL("expected a size mismatch");
    } catch (const SizeMismatchError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("31") != std::string::npos);
        CHECK(msg.find("32") != std::string::npos);
    }
}

TEST_CASE("corrupt or incomplete headers raise format errors") {
    auto dir = temp_dir();
    { std::ofstream(dir / "garbled.json") << "{ not json"; }
    { std::ofstream(dir / "garbled.raw") << ""; }
    CHECK_THROWS_AS(io::read_volume(dir / "garbled"), FormatError);

    { std::ofstream(dir / "nofield.json") << "{\"dtype\":\"f32le\",\"order\":\"i-fastest\"}"; }
    { std::ofstream(dir / "nofield.raw") << ""; }
    try {
        io::read_volume(dir / "nofield");
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("shape") != std::string::npos);
    }
}

TEST_CASE("write_volume refuses non-finite data") {
    Vol3<float> v(Shape3{2, 2, 1}, {4.0, 4.0, 4.0});
    v.data[1] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(io::write_volume(v, temp_dir() / "bad"), DomainError);
}

TEST_CASE("views io round trip keeps angles") {
    auto dir = temp_dir();
    Views3<float> v(3, 2, {0.1, 0.9, 2.4});
    th::randomize_views(v, 23);
    io::write_views(v, dir / "views");
    auto r = io::read_views(dir / "views");
    CHECK(r.nx == 3);
    CHECK(r.nz == 2);
    CHECK(r.nview == 3);
    CHECK(r.angles_rad == v.angles_rad);
    CHECK(r.data == v.data);
}

TEST_CASE("psf io round trip") {
    auto dir = temp_dir();
    auto p = th::random_symmetric_psf<float>(3, 5, 4, 2, 31);
    io::write_psf(p, dir / "psf");
    auto r = io::read_psf(dir / "psf");
    CHECK(r.px == p.px);
    CHECK(r.pz == p.pz);
    CHECK(r.ny == p.ny);
    CHECK(r.nview == p.nview);
    CHECK(r.kernels == p.kernels);
}

TEST_CASE("label map io round trip") {
    auto dir = temp_dir();
    io::LabelMap m;
    m.shape = Shape3{2, 2, 2};
    m.labels = {0, 1, 0, 2, 0, 0, 1, 2};
    m.legend = {{"lesion", 1}, {"organ", 2}};
    io::write_labels(m, dir / "labels");
    auto r = io::read_labels(dir / "labels");
    CHECK(r.shape == m.shape);
    CHECK(r.labels == m.labels);
    CHECK(r.legend == m.legend);
}
