#include "parbeam/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace parbeam::io {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts unsupported");

std::filesystem::path strip_stem(std::filesystem::path p) {
    auto ext = p.extension();
    if (ext == ".json" || ext == ".raw") p.replace_extension();
    return p;
}

json read_header(const std::filesystem::path& stem) {
    std::ifstream f(stem.string() + ".json");
    if (!f) throw IoError("cannot open header " + stem.string() + ".json");
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw FormatError("corrupt header " + stem.string() + ".json: " + e.what());
    }
    return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& stem, std::size_t expected_count) {
    std::ifstream f(stem.string() + ".raw", std::ios::binary);
    if (!f) throw IoError("cannot open payload " + stem.string() + ".raw");
    f.seekg(0, std::ios::end);
    std::size_t bytes = std::size_t(f.tellg());
    f.seekg(0);
    if (bytes != expected_count * sizeof(T))
        throw SizeMismatchError("payload " + stem.string() + ".raw has " + std::to_string(bytes) +
                                " bytes, expected " + std::to_string(expected_count * sizeof(T)));
    std::vector<T> out(expected_count);
    f.read(reinterpret_cast<char*>(out.data()), std::streamsize(bytes));
    if (!f) throw IoError("read failed: " + stem.string() + ".raw");
    return out;
}

template <typename T>
void write_raw(const std::filesystem::path& stem, const std::vector<T>& data) {
    std::ofstream f(stem.string() + ".raw", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + stem.string() + ".raw for writing");
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(T)));
    if (!f) throw IoError("write failed: " + stem.string() + ".raw");
}

template <typename V>
V get_field(const json& j, const char* key, const std::filesystem::path& stem) {
    if (!j.contains(key))
        throw FormatError("header " + stem.string() + ".json: missing field \"" + key + "\"");
    try {
        return j.at(key).get<V>();
    } catch (const json::exception&) {
        throw FormatError("header " + stem.string() + ".json: bad field \"" + key + "\"");
    }
}

void check_dtype_order(const json& j, const std::filesystem::path& stem) {
    if (get_field<std::string>(j, "dtype", stem) != "f32le")
        throw FormatError("header " + stem.string() + ".json: field \"dtype\" must be \"f32le\"");
    if (get_field<std::string>(j, "order", stem) != "i-fastest")
        throw FormatError("header " + stem.string() + ".json: field \"order\" must be \"i-fastest\"");
}

} // namespace

Volume read_volume(const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    json j = read_header(stem);
    auto shape = get_field<std::vector<long long>>(j, "shape", stem);
    auto voxel = get_field<std::vector<double>>(j, "voxel_size_mm", stem);
    check_dtype_order(j, stem);
    if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
        throw FormatError("header " + stem.string() + ".json: field \"shape\" must be 3 positive ints");
    if (voxel.size() != 3 || !(voxel[0] > 0) || !(voxel[1] > 0) || !(voxel[2] > 0))
        throw FormatError("header " + stem.string() + ".json: field \"voxel_size_mm\" must be 3 positive reals");
    Volume v;
    v.shape = {int(shape[0]), int(shape[1]), int(shape[2])};
    v.voxel_size_mm = {voxel[0], voxel[1], voxel[2]};
    v.data = read_raw<float>(stem, v.shape.total());
    validate_volume(v, stem.string().c_str());
    return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    validate_volume(v, "write_volume");
    validate_finite(v, "write_volume");
    json j;
    j["shape"] = {v.shape.nx, v.shape.ny, v.shape.nz};
    j["voxel_size_mm"] = {v.voxel_size_mm[0], v.voxel_size_mm[1], v.voxel_size_mm[2]};
    j["dtype"] = "f32le";
    j["order"] = "i-fastest";
    write_text(stem.string() + ".json", j.dump(2) + "\n");
    write_raw(stem, v.data);
}

ProjectionViews read_views(const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    json j = read_header(stem);
    auto shape = get_field<std::vector<long long>>(j, "shape", stem);
    auto angles = get_field<std::vector<double>>(j, "angles_rad", stem);
    check_dtype_order(j, stem);
    if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
        throw FormatError("header " + stem.string() + ".json: field \"shape\" must be 3 positive ints");
    if (std::size_t(shape[2]) != angles.size())
        throw FormatError("header " + stem.string() + ".json: angles_rad length != nview");
    ProjectionViews v{int(shape[0]), int(shape[1]), angles};
    v.data = read_raw<float>(stem, v.total());
    validate_views(v, stem.string().c_str());
    return v;
}

void write_views(const ProjectionViews& v, const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    validate_views(v, "write_views");
    for (float x : v.data)
        if (!std::isfinite(x)) throw DomainError("write_views: non-finite entry");
    json j;
    j["shape"] = {v.nx, v.nz, v.nview};
    j["angles_rad"] = v.angles_rad;
    j["dtype"] = "f32le";
    j["order"] = "i-fastest";
    write_text(stem.string() + ".json", j.dump(2) + "\n");
    write_raw(stem, v.data);
}

PsfStack<float> read_psf(const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    json j = read_header(stem);
    auto shape = get_field<std::vector<long long>>(j, "shape", stem);
    check_dtype_order(j, stem);
    if (shape.size() != 4 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1 || shape[3] < 1)
        throw FormatError("header " + stem.string() + ".json: field \"shape\" must be 4 positive ints");
    PsfStack<float> p{int(shape[0]), int(shape[1]), int(shape[2]), int(shape[3])};
    p.kernels = read_raw<float>(stem, p.kernels.size());
    validate_psf(p, stem.string().c_str());
    return p;
}

void write_psf(const PsfStack<float>& p, const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    validate_psf(p, "write_psf");
    json j;
    j["shape"] = {p.px, p.pz, p.ny, p.nview};
    j["dtype"] = "f32le";
    j["order"] = "i-fastest";
    write_text(stem.string() + ".json", j.dump(2) + "\n");
    write_raw(stem, p.kernels);
}

LabelMap read_labels(const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    json j = read_header(stem);
    auto shape = get_field<std::vector<long long>>(j, "shape", stem);
    if (get_field<std::string>(j, "dtype", stem) != "u8")
        throw FormatError("header " + stem.string() + ".json: field \"dtype\" must be \"u8\"");
    if (shape.size() != 3) throw FormatError("header " + stem.string() + ".json: bad shape");
    LabelMap m;
    m.shape = {int(shape[0]), int(shape[1]), int(shape[2])};
    m.labels = read_raw<std::uint8_t>(stem, m.shape.total());
    auto legend = get_field<std::map<std::string, int>>(j, "legend", stem);
    for (auto& [name, value] : legend) m.legend[name] = std::uint8_t(value);
    return m;
}

void write_labels(const LabelMap& m, const std::filesystem::path& path) {
    auto stem = strip_stem(path);
    json j;
    j["shape"] = {m.shape.nx, m.shape.ny, m.shape.nz};
    j["dtype"] = "u8";
    j["order"] = "i-fastest";
    json legend = json::object();
    for (auto& [name, value] : m.legend) legend[name] = int(value);
    j["legend"] = legend;
    write_text(stem.string() + ".json", j.dump(2) + "\n");
    write_raw(stem, m.labels);
}

} // namespace parbeam::io
