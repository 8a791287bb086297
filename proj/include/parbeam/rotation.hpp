#pragma once

/// In-plane rotation of square image planes with exact adjoints.
///
/// Two back-ends: direct bilinear resampling, and a three-pass shear
/// decomposition (two x-shears around one y-shear) whose residual angle is
/// kept in [-45deg, 45deg] by pre-composing with an exact quarter-turn
/// permutation.  Out-of-plane samples read as zero.  Adjoints scatter the
/// same interpolation weights back to their sources; they are the exact
/// transposes of the forward maps, not rotations by -theta.
///
/// Plane layout: p[i + n*j] with i the in-plane x index (fastest) and j the
/// y index, matching one z-slice of Vol3.  Rotation is about the geometric
/// center ((n-1)/2, (n-1)/2) in 0-based coordinates.

#include <cmath>
#include <cstring>
#include <vector>

#include "parbeam/errors.hpp"

namespace parbeam::rot {

enum class Method { bilinear, three_pass_1d };

/// Square plane owning its storage; data[i + n*j].
template <typename T>
struct Plane {
    int n = 0;
    std::vector<T> data;

    Plane() = default;
    explicit Plane(int n_) : n(n_), data(std::size_t(n_) * std::size_t(n_), T(0)) {
        if (n_ < 1) throw ShapeError("Plane: side must be >= 1");
    }
    T& at(int i, int j) { return data[std::size_t(i) + std::size_t(n) * std::size_t(j)]; }
    const T& at(int i, int j) const { return data[std::size_t(i) + std::size_t(n) * std::size_t(j)]; }
};

namespace detail {

constexpr double kLatticeSnap = 1e-12; // residual under this is an exact quarter-turn

/// Split theta into q quarter turns plus a residual in [-pi/4, pi/4].
inline void split_angle(double theta, int& quarter, double& residual) {
    if (!std::isfinite(theta)) throw DomainError("rotate_plane: non-finite angle");
    double q = std::nearbyint(theta / (M_PI / 2));
    residual = theta - q * (M_PI / 2);
    if (std::abs(residual) < kLatticeSnap) residual = 0.0;
    long long qi = (long long)(q) % 4;
    quarter = int(qi < 0 ? qi + 4 : qi);
}

/// Exact permutation for a content rotation by quarter*90 degrees (gather).
template <typename T>
void quarter_turn(const T* in, T* out, int n, int quarter) {
    auto src = [&](int i, int j) -> const T& {
        switch (quarter) {
            case 1: return in[std::size_t(j) + std::size_t(n) * std::size_t(n - 1 - i)];
            case 2: return in[std::size_t(n - 1 - i) + std::size_t(n) * std::size_t(n - 1 - j)];
            case 3: return in[std::size_t(n - 1 - j) + std::size_t(n) * std::size_t(i)];
            default: return in[std::size_t(i) + std::size_t(n) * std::size_t(j)];
        }
    };
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
            out[std::size_t(i) + std::size_t(n) * std::size_t(j)] = src(i, j);
}

/// Bilinear gather for a content rotation by theta (no lattice special case).
template <typename T>
void bilinear_gather(const T* in, T* out, int n, double theta) {
    const double c = 0.5 * (n - 1);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int j = 0; j < n; ++j) {
        const double yj = j - c;
        for (int i = 0; i < n; ++i) {
            const double xi = i - c;
            const double xs = ct * xi + st * yj + c;
            const double ys = -st * xi + ct * yj + c;
            const int i0 = int(std::floor(xs));
            const int j0 = int(std::floor(ys));
            const double fx = xs - i0, fy = ys - j0;
            double v = 0.0;
            if (unsigned(i0) < unsigned(n)) {
                if (unsigned(j0) < unsigned(n)) v += (1 - fx) * (1 - fy) * double(in[std::size_t(i0) + std::size_t(n) * std::size_t(j0)]);
                if (unsigned(j0 + 1) < unsigned(n)) v += (1 - fx) * fy * double(in[std::size_t(i0) + std::size_t(n) * std::size_t(j0 + 1)]);
            }
            if (unsigned(i0 + 1) < unsigned(n)) {
                if (unsigned(j0) < unsigned(n)) v += fx * (1 - fy) * double(in[std::size_t(i0 + 1) + std::size_t(n) * std::size_t(j0)]);
                if (unsigned(j0 + 1) < unsigned(n)) v += fx * fy * double(in[std::size_t(i0 + 1) + std::size_t(n) * std::size_t(j0 + 1)]);
            }
            out[std::size_t(i) + std::size_t(n) * std::size_t(j)] = T(v);
        }
    }
}

/// Scatter-transpose of bilinear_gather with identical weights.
template <typename T>
void bilinear_scatter(const T* in, T* out, int n, double theta) {
    const double c = 0.5 * (n - 1);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::memset(out, 0, std::size_t(n) * std::size_t(n) * sizeof(T));
    for (int j = 0; j < n; ++j) {
        const double yj = j - c;
        for (int i = 0; i < n; ++i) {
            const double xi = i - c;
            const double xs = ct * xi + st * yj + c;
            const double ys = -st * xi + ct * yj + c;
            const int i0 = int(std::floor(xs));
            const int j0 = int(std::floor(ys));
            const double fx = xs - i0, fy = ys - j0;
            const double v = double(in[std::size_t(i) + std::size_t(n) * std::size_t(j)]);
            if (unsigned(i0) < unsigned(n)) {
                if (unsigned(j0) < unsigned(n)) out[std::size_t(i0) + std::size_t(n) * std::size_t(j0)] += T((1 - fx) * (1 - fy) * v);
                if (unsigned(j0 + 1) < unsigned(n)) out[std::size_t(i0) + std::size_t(n) * std::size_t(j0 + 1)] += T((1 - fx) * fy * v);
            }
            if (unsigned(i0 + 1) < unsigned(n)) {
                if (unsigned(j0) < unsigned(n)) out[std::size_t(i0 + 1) + std::size_t(n) * std::size_t(j0)] += T(fx * (1 - fy) * v);
                if (unsigned(j0 + 1) < unsigned(n)) out[std::size_t(i0 + 1) + std::size_t(n) * std::size_t(j0 + 1)] += T(fx * fy * v);
            }
        }
    }
}

/// Per-row 1D shear along x: out(i,j) = in(i - a*(j-c), j), linear interp.
template <typename T>
void shear_x_gather(const T* in, T* out, int n, double a) {
    const double c = 0.5 * (n - 1);
    for (int j = 0; j < n; ++j) {
        const double s = a * (j - c);
        const T* row = in + std::size_t(n) * std::size_t(j);
        T* orow = out + std::size_t(n) * std::size_t(j);
        for (int i = 0; i < n; ++i) {
            const double x = i - s;
            const int i0 = int(std::floor(x));
            const double f = x - i0;
            double v = 0.0;
            if (unsigned(i0) < unsigned(n)) v += (1 - f) * double(row[i0]);
            if (unsigned(i0 + 1) < unsigned(n)) v += f * double(row[i0 + 1]);
            orow[i] = T(v);
        }
    }
}

template <typename T>
void shear_x_scatter(const T* in, T* out, int n, double a) {
    const double c = 0.5 * (n - 1);
    std::memset(out, 0, std::size_t(n) * std::size_t(n) * sizeof(T));
    for (int j = 0; j < n; ++j) {
        const double s = a * (j - c);
        const T* row = in + std::size_t(n) * std::size_t(j);
        T* orow = out + std::size_t(n) * std::size_t(j);
        for (int i = 0; i < n; ++i) {
            const double x = i - s;
            const int i0 = int(std::floor(x));
            const double f = x - i0;
            const double v = double(row[i]);
            if (unsigned(i0) < unsigned(n)) orow[i0] += T((1 - f) * v);
            if (unsigned(i0 + 1) < unsigned(n)) orow[i0 + 1] += T(f * v);
        }
    }
}

/// Per-column 1D shear along y: out(i,j) = in(i, j - b*(i-c)).
template <typename T>
void shear_y_gather(const T* in, T* out, int n, double b) {
    const double c = 0.5 * (n - 1);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            const double y = j - b * (i - c);
            const int j0 = int(std::floor(y));
            const double f = y - j0;
            double v = 0.0;
            if (unsigned(j0) < unsigned(n)) v += (1 - f) * double(in[std::size_t(i) + std::size_t(n) * std::size_t(j0)]);
            if (unsigned(j0 + 1) < unsigned(n)) v += f * double(in[std::size_t(i) + std::size_t(n) * std::size_t(j0 + 1)]);
            out[std::size_t(i) + std::size_t(n) * std::size_t(j)] = T(v);
        }
    }
}

template <typename T>
void shear_y_scatter(const T* in, T* out, int n, double b) {
    const double c = 0.5 * (n - 1);
    std::memset(out, 0, std::size_t(n) * std::size_t(n) * sizeof(T));
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            const double y = j - b * (i - c);
            const int j0 = int(std::floor(y));
            const double f = y - j0;
            const double v = double(in[std::size_t(i) + std::size_t(n) * std::size_t(j)]);
            if (unsigned(j0) < unsigned(n)) out[std::size_t(i) + std::size_t(n) * std::size_t(j0)] += T((1 - f) * v);
            if (unsigned(j0 + 1) < unsigned(n)) out[std::size_t(i) + std::size_t(n) * std::size_t(j0 + 1)] += T(f * v);
        }
    }
}

} // namespace detail

/// Rotate a square n*n plane by theta radians about its center into out.
/// scratch must hold n*n elements for three_pass_1d; bilinear ignores it
/// (nullptr allowed).  in, out, scratch must not alias.
template <typename T>
void rotate_plane(const T* in, T* out, T* scratch, int n, double theta, Method method) {
    int q;
    double phi;
    detail::split_angle(theta, q, phi);
    if (phi == 0.0) { // lattice angle: exact index permutation for both methods
        detail::quarter_turn(in, out, n, q);
        return;
    }
    if (method == Method::bilinear) {
        detail::bilinear_gather(in, out, n, theta);
        return;
    }
    // three-pass: exact quarter turn, then shear_x, shear_y, shear_x
    const double a = -std::tan(phi / 2);
    const double b = std::sin(phi);
    detail::quarter_turn(in, scratch, n, q);
    detail::shear_x_gather(scratch, out, n, a);
    detail::shear_y_gather(out, scratch, n, b);
    detail::shear_x_gather(scratch, out, n, a);
}

/// Exact transpose of rotate_plane for the same theta and method.
template <typename T>
void rotate_plane_adjoint(const T* in, T* out, T* scratch, int n, double theta, Method method) {
    int q;
    double phi;
    detail::split_angle(theta, q, phi);
    if (phi == 0.0) { // permutations are orthogonal: adjoint = inverse quarter turn
        detail::quarter_turn(in, out, n, (4 - q) % 4);
        return;
    }
    if (method == Method::bilinear) {
        detail::bilinear_scatter(in, out, n, theta);
        return;
    }
    // reverse of quarter-turn, shear_x, shear_y, shear_x
    const double a = -std::tan(phi / 2);
    const double b = std::sin(phi);
    detail::shear_x_scatter(in, scratch, n, a);
    detail::shear_y_scatter(scratch, out, n, b);
    detail::shear_x_scatter(out, scratch, n, a);
    detail::quarter_turn(scratch, out, n, (4 - q) % 4);
}

/// Allocating convenience wrapper over the raw-pointer kernel.
template <typename T>
Plane<T> rotate_plane(const Plane<T>& p, double theta, Method method) {
    if (p.n < 1 || p.data.size() != std::size_t(p.n) * std::size_t(p.n))
        throw ShapeError("rotate_plane: plane must be square");
    Plane<T> out(p.n);
    std::vector<T> scratch(p.data.size());
    rotate_plane(p.data.data(), out.data.data(), scratch.data(), p.n, theta, method);
    return out;
}

/// Allocating convenience wrapper over the raw-pointer adjoint kernel.
template <typename T>
Plane<T> rotate_plane_adjoint(const Plane<T>& p, double theta, Method method) {
    if (p.n < 1 || p.data.size() != std::size_t(p.n) * std::size_t(p.n))
        throw ShapeError("rotate_plane_adjoint: plane must be square");
    Plane<T> out(p.n);
    std::vector<T> scratch(p.data.size());
    rotate_plane_adjoint(p.data.data(), out.data.data(), scratch.data(), p.n, theta, method);
    return out;
}

} // namespace parbeam::rot
