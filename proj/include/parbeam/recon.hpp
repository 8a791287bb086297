#pragma once

/// Iterative Poisson reconstruction: MLEM, ordered-subset EM, and the
/// regularized EM update used inside the unrolled network.
///
/// Measurements are modeled as y ~ Poisson(A x + r_bar) with a known
/// strictly positive background r_bar.  All updates are multiplicative and
/// preserve nonnegativity; voxels whose sensitivity (adjoint of ones) falls
/// below 1e-12 are outside the field of view and pinned to zero.

#include <cmath>
#include <cstring>
#include <vector>

#include "parbeam/errors.hpp"
#include "parbeam/projector.hpp"
#include "parbeam/types.hpp"

namespace parbeam::recon {

inline constexpr double kSensitivityFloor = 1e-12; // below this a voxel is outside the FOV
inline constexpr double kMeanFloor = 1e-12;        // floor on (Ax + r_bar) before division

/// One reconstruction problem: counts, background means, system operator.
template <typename T>
struct PoissonProblem {
    const Views3<T>& y;
    const Views3<T>& r_bar;
    const proj::SystemModel<T>& model;
};

template <typename T>
void validate_problem(const PoissonProblem<T>& prob, const char* what = "PoissonProblem") {
    const Shape3& s = prob.model.vol_shape();
    if (prob.y.nx != s.nx || prob.y.nz != s.nz || prob.y.nview != prob.model.nview())
        throw ShapeError(std::string(what) + ": counts shape does not match model");
    if (prob.r_bar.nx != s.nx || prob.r_bar.nz != s.nz || prob.r_bar.nview != prob.model.nview())
        throw ShapeError(std::string(what) + ": background shape does not match model");
    for (T v : prob.y.data) {
        if (!(v >= T(0)) || !std::isfinite(double(v)))
            throw DomainError(std::string(what) + ": counts must be finite and >= 0");
    }
    for (T v : prob.r_bar.data) {
        if (!(v > T(0)) || !std::isfinite(double(v)))
            throw DomainError(std::string(what) + ": background means must be finite and > 0");
    }
}

/// Sum over bins of y*log(mean) - mean at mean = A x + r_bar; the objective
/// every EM update monotonically improves.
template <typename T>
double poisson_log_likelihood(const PoissonProblem<T>& prob, const Vol3<T>& x) {
    Views3<T> q = prob.model.make_views();
    prob.model.forward(x, q);
    double ll = 0.0;
    for (std::size_t t = 0; t < q.data.size(); ++t) {
        double mean = double(q.data[t]) + double(prob.r_bar.data[t]);
        if (mean < kMeanFloor) mean = kMeanFloor;
        const double y = double(prob.y.data[t]);
        ll += (y > 0.0 ? y * std::log(mean) : 0.0) - mean;
    }
    return ll;
}

namespace detail {

/// The positive root of beta*t^2 + d*t - c = 0 evaluated without
/// cancellation on either sign of d; at beta = 0 it degenerates to c/d
/// (the plain EM ratio).
inline double stable_em_root(double c, double d, double beta) {
    if (c < 0.0) c = 0.0; // rounding in the adjoint can leave tiny negatives
    const double disc = std::sqrt(d * d + 4.0 * beta * c);
    if (d >= 0.0) {
        const double denom = d + disc;
        return denom > 0.0 ? 2.0 * c / denom : 0.0;
    }
    return (-d + disc) / (2.0 * beta);
}

/// x <- x .* back ./ sens with FOV masking; all buffers full volumes.
template <typename T>
void apply_ratio_update(Vol3<T>& x, const Vol3<T>& back, const Vol3<T>& sens) {
    for (std::size_t t = 0; t < x.data.size(); ++t) {
        const double s = double(sens.data[t]);
        x.data[t] = s < kSensitivityFloor
                        ? T(0)
                        : T(double(x.data[t]) * double(back.data[t]) / s);
    }
}

/// ratio <- y ./ max(q + r_bar, floor) on the listed views only.
template <typename T>
void measurement_ratio(const PoissonProblem<T>& prob, const Views3<T>& q, Views3<T>& ratio,
                       const int* subset, int n_subset) {
    const std::size_t per_view = std::size_t(q.nx) * std::size_t(q.nz);
    for (int t = 0; t < n_subset; ++t) {
        const int l = subset ? subset[t] : t;
        const std::size_t base = per_view * std::size_t(l);
        for (std::size_t b = 0; b < per_view; ++b) {
            double mean = double(q.data[base + b]) + double(prob.r_bar.data[base + b]);
            if (mean < kMeanFloor) mean = kMeanFloor;
            ratio.data[base + b] = T(double(prob.y.data[base + b]) / mean);
        }
    }
}

} // namespace detail

/// Ordered-subset EM.  Subset m holds the views with index = m mod
/// n_subsets; one iteration sweeps all subsets once.  n_subsets must divide
/// the view count.  With a single subset this is exactly MLEM.
template <typename T>
Vol3<T> osem(const PoissonProblem<T>& prob, const Vol3<T>& x0, int n_iter, int n_subsets) {
    validate_problem(prob);
    const auto& model = prob.model;
    if (!(x0.shape == model.vol_shape()))
        throw ShapeError("osem: x0 shape does not match model");
    validate_nonnegative(x0, "osem x0");
    if (n_iter < 0) throw ParamError("osem: iteration count must be >= 0");
    const int nview = model.nview();
    if (n_subsets < 1 || nview % n_subsets != 0)
        throw ParamError("osem: subset count must divide the view count (" +
                         std::to_string(nview) + ")");

    std::vector<std::vector<int>> subsets(static_cast<std::size_t>(n_subsets));
    for (int l = 0; l < nview; ++l) subsets[std::size_t(l % n_subsets)].push_back(l);

    // per-subset sensitivity: adjoint of all-ones views restricted to the subset
    Views3<T> ones = model.make_views();
    for (auto& v : ones.data) v = T(1);
    std::vector<Vol3<T>> sens;
    sens.reserve(std::size_t(n_subsets));
    for (int m = 0; m < n_subsets; ++m) {
        sens.push_back(model.make_volume());
        model.back_subset(ones, sens.back(), subsets[std::size_t(m)].data(),
                          int(subsets[std::size_t(m)].size()));
    }

    Vol3<T> x = x0;
    Views3<T> q = model.make_views();
    Views3<T> ratio = model.make_views();
    Vol3<T> back = model.make_volume();
    for (int it = 0; it < n_iter; ++it) {
        for (int m = 0; m < n_subsets; ++m) {
            const auto& sub = subsets[std::size_t(m)];
            model.forward_subset(x, q, sub.data(), int(sub.size()));
            detail::measurement_ratio(prob, q, ratio, sub.data(), int(sub.size()));
            model.back_subset(ratio, back, sub.data(), int(sub.size()));
            detail::apply_ratio_update(x, back, sens[std::size_t(m)]);
        }
    }
    return x;
}

/// Maximum-likelihood EM: multiplicative update
/// x <- x .* A'(y ./ (A x + r_bar)) ./ A'(1).
template <typename T>
Vol3<T> mlem(const PoissonProblem<T>& prob, const Vol3<T>& x0, int n_iter) {
    return osem(prob, x0, n_iter, 1);
}

/// Inner update of the regularized objective: given the prior image u, each
/// voxel moves to the positive root of beta*t^2 + d*t - x*e = 0 where
/// d = A'(1) - beta*u and e = A'(y ./ (A x + r_bar)).  n_inner repeats the
/// update with d held fixed.  sens, when provided, must equal A'(1) for the
/// full view set (callers that iterate can compute it once).  rel_tol > 0
/// stops the inner loop early once the relative l2 change between successive
/// iterates drops below it; the default of 0 always runs all n_inner passes.
template <typename T>
Vol3<T> regularized_em_update(const Vol3<T>& x_k, const Vol3<T>& u_k, double beta,
                              const PoissonProblem<T>& prob, int n_inner,
                              const Vol3<T>* sens = nullptr, double rel_tol = 0.0) {
    validate_problem(prob);
    const auto& model = prob.model;
    if (!(x_k.shape == model.vol_shape()))
        throw ShapeError("regularized_em_update: x shape does not match model");
    if (!(u_k.shape == x_k.shape))
        throw ShapeError("regularized_em_update: prior image shape does not match x");
    validate_nonnegative(x_k, "regularized_em_update x");
    if (!(beta >= 0)) throw ParamError("regularized_em_update: beta must be >= 0");
    if (n_inner < 1) throw ParamError("regularized_em_update: n_inner must be >= 1");
    if (!(rel_tol >= 0)) throw ParamError("regularized_em_update: rel_tol must be >= 0");

    Vol3<T> sens_local;
    if (!sens) {
        Views3<T> ones = model.make_views();
        for (auto& v : ones.data) v = T(1);
        sens_local = model.make_volume();
        model.back(ones, sens_local);
        sens = &sens_local;
    }

    Vol3<T> x = x_k;
    Views3<T> q = model.make_views();
    Views3<T> ratio = model.make_views();
    Vol3<T> e = model.make_volume();
    for (int it = 0; it < n_inner; ++it) {
        model.forward(x, q);
        detail::measurement_ratio(prob, q, ratio, nullptr, model.nview());
        model.back(ratio, e);
        double diff_sq = 0.0, norm_sq = 0.0;
        for (std::size_t t = 0; t < x.data.size(); ++t) {
            const double s = double(sens->data[t]);
            const double prev = double(x.data[t]);
            if (s < kSensitivityFloor) {
                x.data[t] = T(0);
            } else {
                const double c = prev * double(e.data[t]);
                const double d = s - beta * double(u_k.data[t]);
                x.data[t] = T(detail::stable_em_root(c, d, beta));
            }
            const double dv = double(x.data[t]) - prev;
            diff_sq += dv * dv;
            norm_sq += prev * prev;
        }
        if (rel_tol > 0.0 && diff_sq <= rel_tol * rel_tol * norm_sq) break;
    }
    return x;
}

} // namespace parbeam::recon
