#include "parbeam/simulate.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace parbeam::sim {

namespace {

using nlohmann::json;

const json& need(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw FormatError(std::string("phantom spec: missing field \"") + key + "\"");
    return *it;
}

double need_real(const json& j, const char* key) {
    const json& f = need(j, key);
    if (!f.is_number()) throw FormatError(std::string("phantom spec: bad field \"") + key + "\"");
    return f.get<double>();
}

std::array<double, 3> need_triple(const json& j, const char* key) {
    const json& f = need(j, key);
    if (!f.is_array() || f.size() != 3)
        throw FormatError(std::string("phantom spec: bad field \"") + key + "\"");
    std::array<double, 3> out{};
    for (int a = 0; a < 3; ++a) {
        if (!f[std::size_t(a)].is_number())
            throw FormatError(std::string("phantom spec: bad field \"") + key + "\"");
        out[std::size_t(a)] = f[std::size_t(a)].get<double>();
    }
    return out;
}

} // namespace

PhantomSpec phantom_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("phantom spec: ") + e.what());
    }
    if (!j.is_object()) throw FormatError("phantom spec: top level must be a JSON object");

    PhantomSpec spec;
    const auto sh = need_triple(j, "shape");
    for (double s : sh) {
        if (s < 1 || s != std::floor(s))
            throw FormatError("phantom spec: bad field \"shape\"");
    }
    spec.shape = Shape3{int(sh[0]), int(sh[1]), int(sh[2])};
    spec.voxel_size_mm = need_triple(j, "voxel_size_mm");
    for (double v : spec.voxel_size_mm) {
        if (!(v > 0) || !std::isfinite(v))
            throw FormatError("phantom spec: bad field \"voxel_size_mm\"");
    }
    spec.background_attenuation =
        j.contains("background_attenuation_per_mm") ? need_real(j, "background_attenuation_per_mm") : 0.0;
    if (!(spec.background_attenuation >= 0) || !std::isfinite(spec.background_attenuation))
        throw ParamError("phantom spec: background attenuation must be finite and >= 0");
    spec.texture_jitter = j.contains("texture_jitter") ? need_real(j, "texture_jitter") : 0.0;
    if (!(spec.texture_jitter >= 0) || !(spec.texture_jitter < 1))
        throw ParamError("phantom spec: texture jitter must lie in [0, 1)");

    if (j.contains("ellipsoids")) {
        const json& arr = need(j, "ellipsoids");
        if (!arr.is_array()) throw FormatError("phantom spec: bad field \"ellipsoids\"");
        for (const json& je : arr) {
            Ellipsoid e;
            e.center = need_triple(je, "center");
            e.semi_axes = need_triple(je, "semi_axes");
            e.activity = need_real(je, "activity");
            e.attenuation = je.contains("attenuation_per_mm") ? need_real(je, "attenuation_per_mm") : 0.0;
            const json& lbl = need(je, "label");
            if (!lbl.is_string()) throw FormatError("phantom spec: bad field \"label\"");
            e.label = lbl.get<std::string>();
            spec.ellipsoids.push_back(std::move(e));
        }
    }
    return spec;
}

PhantomSpec read_phantom_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return phantom_spec_from_json(buf.str());
}

std::size_t VoiMask::cardinality(const std::string& label) const {
    const int id = detail::legend_id(*this, label, "VoiMask");
    std::size_t n = 0;
    for (std::uint8_t v : labels) n += (int(v) == id);
    return n;
}

std::vector<std::size_t> VoiMask::voxels(const std::string& label) const {
    const int id = detail::legend_id(*this, label, "VoiMask");
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < labels.size(); ++v)
        if (int(labels[v]) == id) out.push_back(v);
    return out;
}

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed) {
    if (spec.shape.nx < 1 || spec.shape.ny < 1 || spec.shape.nz < 1)
        throw ShapeError("make_phantom: grid dimensions must be positive");
    for (double v : spec.voxel_size_mm) {
        if (!(v > 0) || !std::isfinite(v)) throw ParamError("make_phantom: voxel size must be > 0");
    }
    if (!(spec.background_attenuation >= 0))
        throw ParamError("make_phantom: background attenuation must be >= 0");
    std::set<std::string> seen;
    for (const auto& e : spec.ellipsoids) {
        for (double a : e.semi_axes) {
            if (!(a > 0) || !std::isfinite(a))
                throw ParamError("make_phantom: semi-axes must be > 0 (ellipsoid \"" + e.label + "\")");
        }
        if (!(e.activity >= 0) || !std::isfinite(e.activity))
            throw ParamError("make_phantom: activity must be finite and >= 0 (ellipsoid \"" +
                             e.label + "\")");
        if (!(e.attenuation >= 0) || !std::isfinite(e.attenuation))
            throw ParamError("make_phantom: attenuation must be finite and >= 0 (ellipsoid \"" +
                             e.label + "\")");
        if (e.label.empty()) throw ParamError("make_phantom: ellipsoid labels must be non-empty");
        if (!seen.insert(e.label).second)
            throw ParamError("make_phantom: duplicate ellipsoid label \"" + e.label + "\"");
    }
    if (spec.ellipsoids.size() > 255)
        throw ParamError("make_phantom: at most 255 labeled regions fit an 8-bit mask");

    Phantom out{Volume(spec.shape, spec.voxel_size_mm), Volume(spec.shape, spec.voxel_size_mm),
                VoiMask{}};
    out.masks.shape = spec.shape;
    out.masks.labels.assign(spec.shape.total(), 0);
    for (auto& v : out.attenuation.data) v = float(spec.background_attenuation);
    std::vector<int> ids;
    std::vector<std::size_t> hits(spec.ellipsoids.size(), 0);
    for (std::size_t e = 0; e < spec.ellipsoids.size(); ++e) {
        const int id = int(e) + 1;
        ids.push_back(id);
        out.masks.legend[spec.ellipsoids[e].label] = id;
    }

    const auto& es = spec.ellipsoids;
    for (int k = 0; k < spec.shape.nz; ++k) {
        for (int j = 0; j < spec.shape.ny; ++j) {
            for (int i = 0; i < spec.shape.nx; ++i) {
                const std::size_t v = out.activity.idx(i, j, k);
                int last = -1;
                for (std::size_t e = 0; e < es.size(); ++e) {
                    const double di = (double(i) - es[e].center[0]) / es[e].semi_axes[0];
                    const double dj = (double(j) - es[e].center[1]) / es[e].semi_axes[1];
                    const double dk = (double(k) - es[e].center[2]) / es[e].semi_axes[2];
                    if (di * di + dj * dj + dk * dk <= 1.0) {
                        ++hits[e];
                        last = int(e);
                    }
                }
                if (last < 0) continue;
                double act = es[std::size_t(last)].activity;
                if (spec.texture_jitter > 0) {
                    rng::Stream s(seed, 0x706878u ^ (std::uint64_t(v) << 8));
                    act *= 1.0 + spec.texture_jitter * (2.0 * s.uniform() - 1.0);
                }
                out.activity.data[v] = float(act);
                out.attenuation.data[v] = float(es[std::size_t(last)].attenuation);
                out.masks.labels[v] = std::uint8_t(ids[std::size_t(last)]);
            }
        }
    }
    for (std::size_t e = 0; e < es.size(); ++e) {
        if (hits[e] == 0)
            out.masks.warnings.push_back("region \"" + es[e].label + "\" covers no voxel");
    }
    return out;
}

} // namespace parbeam::sim
