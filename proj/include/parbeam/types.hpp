#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <vector>

#include "parbeam/errors.hpp"

namespace parbeam {

struct Shape3 {
    int nx = 0, ny = 0, nz = 0;

    std::size_t total() const {
        return std::size_t(nx) * std::size_t(ny) * std::size_t(nz);
    }
    bool operator==(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
    std::ostringstream os;
    os << "(" << s.nx << "," << s.ny << "," << s.nz << ")";
    return os.str();
}

/// 3D scalar field (activity or attenuation map).
/// Memory order: first index i fastest, then j, then k.
template <typename T>
struct Vol3 {
    Shape3 shape;
    std::array<double, 3> voxel_size_mm{1.0, 1.0, 1.0};
    std::vector<T> data;

    Vol3() = default;
    Vol3(Shape3 s, std::array<double, 3> voxel)
        : shape(s), voxel_size_mm(voxel), data(s.total(), T(0)) {}

    std::size_t idx(int i, int j, int k) const {
        return std::size_t(i) + std::size_t(shape.nx) * (std::size_t(j) + std::size_t(shape.ny) * std::size_t(k));
    }
    T& at(int i, int j, int k) { return data[idx(i, j, k)]; }
    const T& at(int i, int j, int k) const { return data[idx(i, j, k)]; }
};

/// Stack of 2D detector views over projection angles.
/// Memory order: i fastest, then k, then view l.
template <typename T>
struct Views3 {
    int nx = 0, nz = 0, nview = 0;
    std::vector<double> angles_rad;
    std::vector<T> data;

    Views3() = default;
    Views3(int nx_, int nz_, std::vector<double> angles)
        : nx(nx_), nz(nz_), nview(int(angles.size())), angles_rad(std::move(angles)),
          data(std::size_t(nx_) * std::size_t(nz_) * angles_rad.size(), T(0)) {}

    std::size_t total() const { return std::size_t(nx) * std::size_t(nz) * std::size_t(nview); }
    std::size_t idx(int i, int k, int l) const {
        return std::size_t(i) + std::size_t(nx) * (std::size_t(k) + std::size_t(nz) * std::size_t(l));
    }
    T& at(int i, int k, int l) { return data[idx(i, k, l)]; }
    const T& at(int i, int k, int l) const { return data[idx(i, k, l)]; }
    T* view(int l) { return data.data() + std::size_t(nx) * nz * l; }
    const T* view(int l) const { return data.data() + std::size_t(nx) * nz * l; }
};

/// Depth- and view-dependent point spread kernels, shape (px, pz, ny, nview),
/// px/pz odd, each kernel symmetric about its center in both axes.
template <typename T>
struct PsfStack {
    int px = 0, pz = 0, ny = 0, nview = 0;
    std::vector<T> kernels;

    PsfStack() = default;
    PsfStack(int px_, int pz_, int ny_, int nview_)
        : px(px_), pz(pz_), ny(ny_), nview(nview_),
          kernels(std::size_t(px_) * pz_ * ny_ * nview_, T(0)) {}

    std::size_t kernel_offset(int j, int l) const {
        return std::size_t(px) * pz * (std::size_t(j) + std::size_t(ny) * std::size_t(l));
    }
    T* kernel(int j, int l) { return kernels.data() + kernel_offset(j, l); }
    const T* kernel(int j, int l) const { return kernels.data() + kernel_offset(j, l); }
    T& tap(int a, int b, int j, int l) { return kernels[std::size_t(a) + std::size_t(px) * b + kernel_offset(j, l)]; }
};

// ---- validation ------------------------------------------------------------

template <typename T>
void validate_volume(const Vol3<T>& v, const char* what = "volume") {
    const auto& s = v.shape;
    if (s.nx < 1 || s.ny < 1 || s.nz < 1)
        throw ShapeError(std::string(what) + ": all dimensions must be >= 1, got " + to_string(s));
    if (v.data.size() != s.total())
        throw SizeMismatchError(std::string(what) + ": data size " + std::to_string(v.data.size()) +
                                " != shape total " + std::to_string(s.total()));
    for (double d : v.voxel_size_mm)
        if (!(d > 0.0)) throw FormatError(std::string(what) + ": voxel_size_mm entries must be positive");
    if (v.voxel_size_mm[0] != v.voxel_size_mm[1])
        throw FormatError(std::string(what) + ": transaxial voxels must be square (dx == dy)");
}

template <typename T>
void validate_finite(const Vol3<T>& v, const char* what = "volume") {
    for (const T& x : v.data)
        if (!std::isfinite(double(x)))
            throw DomainError(std::string(what) + ": non-finite entry");
}

template <typename T>
void validate_nonnegative(const Vol3<T>& v, const char* what = "volume") {
    for (const T& x : v.data)
        if (!(x >= T(0))) throw DomainError(std::string(what) + ": negative or NaN entry");
}

template <typename T>
void validate_views(const Views3<T>& v, const char* what = "views") {
    if (v.nview < 1) throw ShapeError(std::string(what) + ": nview must be >= 1");
    if (int(v.angles_rad.size()) != v.nview)
        throw SizeMismatchError(std::string(what) + ": angle count != nview");
    if (v.data.size() != v.total())
        throw SizeMismatchError(std::string(what) + ": data size != nx*nz*nview");
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double prev = -1.0;
    for (double a : v.angles_rad) {
        if (!(a >= 0.0 && a < two_pi)) throw DomainError(std::string(what) + ": angle outside [0, 2pi)");
        if (!(a > prev)) throw DomainError(std::string(what) + ": angles must be strictly increasing");
        prev = a;
    }
}

constexpr double kKernelSumSlack = 1e-5;

template <typename T>
void validate_psf(const PsfStack<T>& p, const char* what = "psf") {
    if (p.px < 1 || p.pz < 1 || p.px % 2 == 0 || p.pz % 2 == 0)
        throw ParamError(std::string(what) + ": kernel dims must be odd and >= 1");
    if (p.ny < 1 || p.nview < 1) throw ShapeError(std::string(what) + ": ny and nview must be >= 1");
    for (int l = 0; l < p.nview; ++l) {
        for (int j = 0; j < p.ny; ++j) {
            const T* k = p.kernel(j, l);
            double sum = 0.0;
            for (int b = 0; b < p.pz; ++b) {
                for (int a = 0; a < p.px; ++a) {
                    double v = double(k[a + std::size_t(p.px) * b]);
                    if (!(v >= 0.0)) throw DomainError(std::string(what) + ": negative kernel tap");
                    sum += v;
                    // symmetry under a -> px-1-a and b -> pz-1-b
                    if (k[a + std::size_t(p.px) * b] != k[(p.px - 1 - a) + std::size_t(p.px) * b] ||
                        k[a + std::size_t(p.px) * b] != k[a + std::size_t(p.px) * (p.pz - 1 - b)])
                        throw DomainError(std::string(what) + ": kernel not symmetric about center");
                }
            }
            if (sum > 1.0 + kKernelSumSlack)
                throw DomainError(std::string(what) + ": kernel sum exceeds 1");
        }
    }
}

// ---- conversions -----------------------------------------------------------

template <typename To, typename From>
Vol3<To> cast_volume(const Vol3<From>& v) {
    Vol3<To> out(v.shape, v.voxel_size_mm);
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = To(v.data[i]);
    return out;
}

template <typename To, typename From>
Views3<To> cast_views(const Views3<From>& v) {
    Views3<To> out(v.nx, v.nz, v.angles_rad);
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = To(v.data[i]);
    return out;
}

template <typename To, typename From>
PsfStack<To> cast_psf(const PsfStack<From>& p) {
    PsfStack<To> out(p.px, p.pz, p.ny, p.nview);
    for (std::size_t i = 0; i < p.kernels.size(); ++i) out.kernels[i] = To(p.kernels[i]);
    return out;
}

using Volume = Vol3<float>;
using ProjectionViews = Views3<float>;

} // namespace parbeam
