#pragma once

/// Accumulated attenuation factors along the detector axis.
///
/// For a map mu already rotated so the detector faces the j = ny-1 plane,
/// the survival factor of a voxel at depth j is
///
///   factor(i,j,k) = exp(-dy * (mu(i,j,k)/2 + sum_{s>j} mu(i,s,k)))
///
/// i.e. half the voxel's own length plus the full length of every voxel
/// between it and the detector.  Computed with a single reverse sweep per
/// (i,k) ray carrying the running tail sum.

#include <cmath>
#include <cstddef>

#include "parbeam/errors.hpp"
#include "parbeam/types.hpp"

namespace parbeam::att {

/// Raw-pointer kernel over an (nx, ny, nz) i-fastest buffer; out may not
/// alias mu.  Entries of mu must be >= 0 (checked), delta_y > 0.
template <typename T>
void accumulate_attenuation(const T* mu, T* out, int nx, int ny, int nz, double delta_y) {
    if (!(delta_y > 0)) throw ParamError("accumulate_attenuation: delta_y must be > 0");
    const std::size_t plane = std::size_t(nx) * std::size_t(ny);
    for (int k = 0; k < nz; ++k) {
        const T* mk = mu + plane * std::size_t(k);
        T* ok = out + plane * std::size_t(k);
        for (int i = 0; i < nx; ++i) {
            double tail = 0.0; // sum of mu over planes strictly nearer the detector
            for (int j = ny - 1; j >= 0; --j) {
                const double m = double(mk[std::size_t(i) + std::size_t(nx) * std::size_t(j)]);
                if (m < 0) throw DomainError("accumulate_attenuation: negative attenuation entry");
                ok[std::size_t(i) + std::size_t(nx) * std::size_t(j)] =
                    T(std::exp(-delta_y * (0.5 * m + tail)));
                tail += m;
            }
        }
    }
}

/// Allocating wrapper preserving the input volume's shape and voxel size.
template <typename T>
Vol3<T> accumulate_attenuation(const Vol3<T>& mu_rot, double delta_y) {
    validate_volume(mu_rot, "accumulate_attenuation");
    Vol3<T> out(mu_rot.shape, mu_rot.voxel_size_mm);
    accumulate_attenuation(mu_rot.data.data(), out.data.data(), mu_rot.shape.nx, mu_rot.shape.ny,
                           mu_rot.shape.nz, delta_y);
    return out;
}

} // namespace parbeam::att
