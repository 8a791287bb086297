#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "parbeam/errors.hpp"
#include "parbeam/projector.hpp"
#include "parbeam/rng.hpp"
#include "parbeam/types.hpp"

namespace parbeam::sim {

/// Analytic ellipsoid in voxel coordinates; voxels with
/// sum(((p - center)/semi_axes)^2) <= 1 belong to it.
struct Ellipsoid {
    std::array<double, 3> center{};    // voxel units, 0-based
    std::array<double, 3> semi_axes{}; // voxel units, all > 0
    double activity = 0.0;
    double attenuation = 0.0; // mm^-1
    std::string label;
};

/// Declarative phantom: a background attenuation plus a painter's-order
/// list of labeled ellipsoids (later entries override earlier ones).
struct PhantomSpec {
    Shape3 shape{0, 0, 0};
    std::array<double, 3> voxel_size_mm{4.0, 4.0, 4.0};
    double background_attenuation = 0.0; // mm^-1
    double texture_jitter = 0.0;         // relative activity jitter, 0 disables
    std::vector<Ellipsoid> ellipsoids;
};

/// Parse a phantom description from JSON text / a JSON file on disk.
PhantomSpec phantom_spec_from_json(const std::string& text);
PhantomSpec read_phantom_spec(const std::string& path);

/// Label-valued voxel mask: one 8-bit id per voxel (0 = unlabeled) plus a
/// name -> id legend. Ellipsoids that covered no voxel are listed in
/// `warnings` instead of raising an error.
struct VoiMask {
    Shape3 shape{0, 0, 0};
    std::vector<std::uint8_t> labels;
    std::map<std::string, int> legend;
    std::vector<std::string> warnings;

    std::size_t cardinality(const std::string& label) const;
    std::vector<std::size_t> voxels(const std::string& label) const;
};

struct Phantom {
    Volume activity;
    Volume attenuation;
    VoiMask masks;
};

/// Rasterize a phantom description. Deterministic given the seed; the seed
/// only matters when texture_jitter > 0.
Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed = 0);

/// Scale the noise-free projection of x_true so that the expected total
/// count equals total_counts including a spatially uniform background with
/// sum(r_bar) = scatter_fraction * sum(p), then draw y ~ Poisson(p + r_bar)
/// per bin with the counter-based generator (bin order / thread count do
/// not affect the draw). Returns (y, r_bar).
template <typename T>
std::pair<Views3<T>, Views3<T>> simulate_measurements(const Vol3<T>& x_true,
                                                      const proj::SystemModel<T>& model,
                                                      double scatter_fraction, double total_counts,
                                                      std::uint64_t seed) {
    if (!(scatter_fraction >= 0) || !std::isfinite(scatter_fraction))
        throw ParamError("simulate_measurements: scatter fraction must be finite and >= 0");
    if (!(total_counts > 0) || !std::isfinite(total_counts))
        throw ParamError("simulate_measurements: total counts must be finite and > 0");
    validate_nonnegative(x_true, "simulate_measurements x_true");

    Views3<T> p = model.make_views();
    model.forward(x_true, p);
    double sum_p = 0.0;
    for (T v : p.data) sum_p += double(v);
    if (!(sum_p > 0))
        throw DomainError("simulate_measurements: forward projection is identically zero");

    const double alpha = total_counts / (sum_p * (1.0 + scatter_fraction));
    const double n_bins = double(p.total());
    const double r_bin = scatter_fraction * alpha * sum_p / n_bins;

    Views3<T> y = model.make_views();
    Views3<T> r_bar = model.make_views();
    for (std::size_t b = 0; b < p.data.size(); ++b) {
        const double mean = alpha * double(p.data[b]) + r_bin;
        y.data[b] = T(double(rng::poisson_at(seed, std::uint64_t(b), mean)));
        r_bar.data[b] = T(r_bin);
    }
    return {std::move(y), std::move(r_bar)};
}

namespace detail {

/// Scale a copy of the volume so its total is exactly 1.
template <typename T>
std::vector<double> normalize_total(const Vol3<T>& v, const char* what) {
    double total = 0.0;
    for (T x : v.data) total += double(x);
    if (!(total > 0))
        throw DomainError(std::string(what) + ": total activity is not positive, metric undefined");
    std::vector<double> out(v.data.size());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = double(v.data[t]) / total;
    return out;
}

inline const VoiMask& check_mask(const VoiMask& mask, const Shape3& shape, const char* what) {
    if (!(mask.shape == shape) || mask.labels.size() != shape.total())
        throw ShapeError(std::string(what) + ": mask shape does not match the volumes");
    return mask;
}

inline int legend_id(const VoiMask& mask, const std::string& label, const char* what) {
    auto it = mask.legend.find(label);
    if (it == mask.legend.end())
        throw ParamError(std::string(what) + ": unknown VOI label \"" + label + "\"");
    return it->second;
}

} // namespace detail

/// Mean-activity error over the VOI in percent, after rescaling both
/// volumes to unit total activity: |1 - mean(x_hat)/mean(x_true)| * 100.
template <typename T>
double mae(const Vol3<T>& x_hat, const Vol3<T>& x_true, const VoiMask& mask,
           const std::string& label) {
    if (!(x_hat.shape == x_true.shape)) throw ShapeError("mae: volume shapes differ");
    detail::check_mask(mask, x_true.shape, "mae");
    const int id = detail::legend_id(mask, label, "mae");
    const auto h = detail::normalize_total(x_hat, "mae x_hat");
    const auto t = detail::normalize_total(x_true, "mae x_true");
    double sum_h = 0.0, sum_t = 0.0;
    std::size_t n_p = 0;
    for (std::size_t v = 0; v < h.size(); ++v) {
        if (int(mask.labels[v]) != id) continue;
        sum_h += h[v];
        sum_t += t[v];
        ++n_p;
    }
    if (n_p == 0) throw DomainError("mae: VOI \"" + label + "\" is empty");
    if (sum_t == 0) throw DomainError("mae: true mean over the VOI is zero, metric undefined");
    return std::abs(1.0 - sum_h / sum_t) * 100.0;
}

/// Root-mean-square error over the VOI divided by sqrt(square of the VOI
/// total / n_p), in percent, after the same unit-total rescaling. Note the
/// denominator squares the SUM of true activity (not the sum of squares);
/// that is the convention reproduced here even though it differs from the
/// more common per-voxel normalization.
template <typename T>
double nrmse(const Vol3<T>& x_hat, const Vol3<T>& x_true, const VoiMask& mask,
             const std::string& label) {
    if (!(x_hat.shape == x_true.shape)) throw ShapeError("nrmse: volume shapes differ");
    detail::check_mask(mask, x_true.shape, "nrmse");
    const int id = detail::legend_id(mask, label, "nrmse");
    const auto h = detail::normalize_total(x_hat, "nrmse x_hat");
    const auto t = detail::normalize_total(x_true, "nrmse x_true");
    double sq = 0.0, sum_t = 0.0;
    std::size_t n_p = 0;
    for (std::size_t v = 0; v < h.size(); ++v) {
        if (int(mask.labels[v]) != id) continue;
        const double d = h[v] - t[v];
        sq += d * d;
        sum_t += t[v];
        ++n_p;
    }
    if (n_p == 0) throw DomainError("nrmse: VOI \"" + label + "\" is empty");
    if (sum_t == 0) throw DomainError("nrmse: VOI total of the truth is zero, metric undefined");
    const double np = double(n_p);
    return 100.0 * std::sqrt(sq / np) / std::sqrt(sum_t * sum_t / np);
}

} // namespace parbeam::sim
