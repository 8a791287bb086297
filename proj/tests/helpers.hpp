#pragma once

// Shared builders and independent brute-force oracles for the test suite.
// The oracles deliberately re-derive each result with the plainest possible
// loops (no FFTs, no shears, no running sums) so they can arbitrate the
// optimized implementations.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "parbeam/projector.hpp"
#include "parbeam/psf.hpp"
#include "parbeam/rng.hpp"
#include "parbeam/types.hpp"

namespace th {

using parbeam::PsfStack;
using parbeam::Shape3;
using parbeam::Views3;
using parbeam::Vol3;

inline std::vector<double> angle_set(int nview, double frac = 0.45) {
    std::vector<double> a(static_cast<std::size_t>(nview));
    for (int l = 0; l < nview; ++l)
        a[std::size_t(l)] = (double(l) + frac) * 2.0 * std::numbers::pi / double(nview);
    return a;
}

template <typename T>
Vol3<T> random_volume(Shape3 s, std::uint64_t seed, double lo = 0.0, double hi = 1.0,
                      std::array<double, 3> voxel = {4.0, 4.0, 4.0}) {
    Vol3<T> v(s, voxel);
    parbeam::rng::Stream st(seed, 0x766f6cull);
    for (auto& x : v.data) x = T(lo + (hi - lo) * st.uniform());
    return v;
}

template <typename T>
void randomize_views(Views3<T>& v, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    parbeam::rng::Stream st(seed, 0x76697773ull);
    for (auto& x : v.data) x = T(lo + (hi - lo) * st.uniform());
}

/// Random stack of kernels that satisfy the mirror-symmetry and sum <= 1
/// invariants exactly (values mirrored from one quadrant, normalized).
template <typename T>
PsfStack<T> random_symmetric_psf(int px, int pz, int ny, int nview, std::uint64_t seed) {
    PsfStack<T> p(px, pz, ny, nview);
    parbeam::rng::Stream st(seed, 0x707366ull);
    for (int l = 0; l < nview; ++l) {
        for (int j = 0; j < ny; ++j) {
            std::vector<double> q(std::size_t(px) * std::size_t(pz));
            for (auto& x : q) x = 0.05 + st.uniform();
            double sum = 0.0;
            for (int b = 0; b < pz; ++b) {
                for (int a = 0; a < px; ++a) {
                    const int ma = std::min(a, px - 1 - a), mb = std::min(b, pz - 1 - b);
                    sum += q[std::size_t(ma) + std::size_t(px) * std::size_t(mb)];
                }
            }
            for (int b = 0; b < pz; ++b) {
                for (int a = 0; a < px; ++a) {
                    const int ma = std::min(a, px - 1 - a), mb = std::min(b, pz - 1 - b);
                    p.tap(a, b, j, l) =
                        T(q[std::size_t(ma) + std::size_t(px) * std::size_t(mb)] / (sum * 1.0000001));
                }
            }
        }
    }
    return p;
}

template <typename T>
parbeam::proj::SystemModel<T> random_model(Shape3 s, int nview, std::uint64_t seed,
                                           parbeam::rot::Method method =
                                               parbeam::rot::Method::bilinear,
                                           int threads = 1, int px = 3, int pz = 3,
                                           double mu_hi = 0.02) {
    auto mu = random_volume<T>(s, seed ^ 0x6d75ull, 0.0, mu_hi);
    auto psf = random_symmetric_psf<T>(px, pz, s.ny, nview, seed ^ 0x6b65726eull);
    return parbeam::proj::SystemModel<T>(std::move(mu), std::move(psf), angle_set(nview), method,
                                         threads);
}

/// Same system as random_model but heap-owned (SystemModel is not movable).
template <typename T>
std::shared_ptr<parbeam::proj::SystemModel<T>> random_model_ptr(
    Shape3 s, int nview, std::uint64_t seed,
    parbeam::rot::Method method = parbeam::rot::Method::bilinear, int threads = 1, int px = 3,
    int pz = 3, double mu_hi = 0.02) {
    auto mu = random_volume<T>(s, seed ^ 0x6d75ull, 0.0, mu_hi);
    auto psf = random_symmetric_psf<T>(px, pz, s.ny, nview, seed ^ 0x6b65726eull);
    return std::make_shared<parbeam::proj::SystemModel<T>>(std::move(mu), std::move(psf),
                                                           angle_set(nview), method, threads);
}

template <typename T>
double dot(const std::vector<T>& a, const std::vector<T>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
    return s;
}

template <typename T>
double norm2(const std::vector<T>& a) {
    return std::sqrt(dot(a, a));
}

template <typename T>
double rel_rms_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        num += d * d;
        den += double(b[i]) * double(b[i]);
    }
    return std::sqrt(num) / std::sqrt(den);
}

// ---------------------------------------------------------------------------
// Independent oracles (double precision, plain loops).

/// Textbook bilinear rotation about the center (n-1)/2: each output pixel
/// samples the input at the back-rotated position with hat weights, zero
/// outside.
inline std::vector<double> oracle_rotate_bilinear(const std::vector<double>& in, int n,
                                                  double theta) {
    std::vector<double> out(in.size(), 0.0);
    const double c = 0.5 * double(n - 1);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            const double dx = double(i) - c, dy = double(j) - c;
            const double xs = ct * dx + st * dy + c;
            const double ys = -st * dx + ct * dy + c;
            const int x0 = int(std::floor(xs)), y0 = int(std::floor(ys));
            const double fx = xs - double(x0), fy = ys - double(y0);
            double acc = 0.0;
            for (int b = 0; b < 2; ++b) {
                for (int a = 0; a < 2; ++a) {
                    const int xi = x0 + a, yj = y0 + b;
                    if (xi < 0 || xi >= n || yj < 0 || yj >= n) continue;
                    const double w = (a ? fx : 1.0 - fx) * (b ? fy : 1.0 - fy);
                    acc += w * in[std::size_t(xi) + std::size_t(n) * std::size_t(yj)];
                }
            }
            out[std::size_t(i) + std::size_t(n) * std::size_t(j)] = acc;
        }
    }
    return out;
}

/// Direct per-voxel summation of the accumulated attenuation exponent.
inline std::vector<double> oracle_attenuation(const std::vector<double>& mu, int nx, int ny, int nz,
                                              double dy) {
    std::vector<double> out(mu.size());
    auto at = [&](int i, int j, int k) {
        return mu[std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k))];
    };
    for (int k = 0; k < nz; ++k) {
        for (int j = 0; j < ny; ++j) {
            for (int i = 0; i < nx; ++i) {
                double s = 0.5 * at(i, j, k);
                for (int t = j + 1; t < ny; ++t) s += at(i, t, k);
                out[std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k))] =
                    std::exp(-dy * s);
            }
        }
    }
    return out;
}

/// Spatial-domain cross-correlation with replicate (clamp) padding on an
/// ni-by-nk plane; the linear map the FFT path must reproduce.
inline std::vector<double> oracle_correlate_replicate(const std::vector<double>& in, int ni, int nk,
                                                      const std::vector<double>& taps, int px,
                                                      int pz) {
    std::vector<double> out(in.size(), 0.0);
    const int hx = (px - 1) / 2, hz = (pz - 1) / 2;
    for (int k = 0; k < nk; ++k) {
        for (int i = 0; i < ni; ++i) {
            double acc = 0.0;
            for (int b = 0; b < pz; ++b) {
                for (int a = 0; a < px; ++a) {
                    int si = i + a - hx, sk = k + b - hz;
                    si = si < 0 ? 0 : (si >= ni ? ni - 1 : si);
                    sk = sk < 0 ? 0 : (sk >= nk ? nk - 1 : sk);
                    acc += taps[std::size_t(a) + std::size_t(px) * std::size_t(b)] *
                           in[std::size_t(si) + std::size_t(ni) * std::size_t(sk)];
                }
            }
            out[std::size_t(i) + std::size_t(ni) * std::size_t(k)] = acc;
        }
    }
    return out;
}

/// Whole-system forward projection assembled from the three oracles above:
/// embed, rotate, attenuate, per-depth blur, sum over depth, crop.
template <typename T>
std::vector<double> oracle_forward(const Vol3<T>& x, const Vol3<T>& mu, const PsfStack<T>& psf,
                                   const std::vector<double>& angles) {
    const int nx = x.shape.nx, ny = x.shape.ny, nz = x.shape.nz;
    const int np = parbeam::proj::padded_side(nx, ny);
    const int off_i = (np - nx) / 2, off_j = (np - ny) / 2;
    const double dy = x.voxel_size_mm[1];
    const int nview = int(angles.size());
    std::vector<double> views(std::size_t(nx) * std::size_t(nz) * std::size_t(nview), 0.0);

    for (int l = 0; l < nview; ++l) {
        // rotate activity and attenuation slices into the padded frame
        std::vector<double> pv(std::size_t(np) * np * std::size_t(nz), 0.0), pm = pv;
        for (int k = 0; k < nz; ++k) {
            std::vector<double> ex(std::size_t(np) * np, 0.0), em = ex;
            for (int j = 0; j < ny; ++j) {
                for (int i = 0; i < nx; ++i) {
                    ex[std::size_t(off_i + i) + std::size_t(np) * std::size_t(off_j + j)] =
                        double(x.at(i, j, k));
                    em[std::size_t(off_i + i) + std::size_t(np) * std::size_t(off_j + j)] =
                        double(mu.at(i, j, k));
                }
            }
            auto rx = oracle_rotate_bilinear(ex, np, angles[std::size_t(l)]);
            auto rm = oracle_rotate_bilinear(em, np, angles[std::size_t(l)]);
            std::copy(rx.begin(), rx.end(), pv.begin() + std::size_t(np) * np * std::size_t(k));
            std::copy(rm.begin(), rm.end(), pm.begin() + std::size_t(np) * np * std::size_t(k));
        }
        auto att = oracle_attenuation(pm, np, np, nz, dy);
        // per depth plane: gather (i,k) slice, blur with the depth kernel, add
        std::vector<double> det(std::size_t(np) * std::size_t(nz), 0.0);
        for (int j = 0; j < np; ++j) {
            std::vector<double> slice(std::size_t(np) * std::size_t(nz));
            for (int k = 0; k < nz; ++k) {
                for (int i = 0; i < np; ++i) {
                    const std::size_t v =
                        std::size_t(i) + std::size_t(np) * (std::size_t(j) + std::size_t(np) * std::size_t(k));
                    slice[std::size_t(i) + std::size_t(np) * std::size_t(k)] = pv[v] * att[v];
                }
            }
            int jd = j - off_j;
            jd = jd < 0 ? 0 : (jd >= ny ? ny - 1 : jd);
            std::vector<double> taps(std::size_t(psf.px) * std::size_t(psf.pz));
            for (int b = 0; b < psf.pz; ++b)
                for (int a = 0; a < psf.px; ++a)
                    taps[std::size_t(a) + std::size_t(psf.px) * std::size_t(b)] =
                        double(psf.kernels[std::size_t(a) + std::size_t(psf.px) * std::size_t(b) +
                                           psf.kernel_offset(jd, l)]);
            auto blurred = oracle_correlate_replicate(slice, np, nz, taps, psf.px, psf.pz);
            for (std::size_t t = 0; t < det.size(); ++t) det[t] += blurred[t];
        }
        for (int k = 0; k < nz; ++k) {
            for (int i = 0; i < nx; ++i) {
                views[std::size_t(i) + std::size_t(nx) * (std::size_t(k) + std::size_t(nz) * std::size_t(l))] =
                    det[std::size_t(off_i + i) + std::size_t(np) * std::size_t(k)];
            }
        }
    }
    return views;
}

} // namespace th
