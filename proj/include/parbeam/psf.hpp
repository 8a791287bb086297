#pragma once

/// Depth-dependent detector-response kernels and 2D convolution with
/// replicate padding, plus the exact adjoint.
///
/// Forward: replicate-pad the (ni, nk) plane by half the kernel size on each
/// side, correlate on a pow2 FFT grid large enough that no circular
/// wraparound reaches the valid region, crop back to (ni, nk).  For the
/// symmetric kernels this module admits, correlation and convolution
/// coincide.
///
/// Adjoint: zero-embed the plane on the same grid, circularly convolve with
/// the same kernel spectrum, then fold the replicate-padding border back
/// into the edge cells.  This is the entrywise transpose of the forward map.
///
/// All spectral arithmetic runs in double precision regardless of the plane
/// element type; results are rounded once on output.

#include <complex>
#include <cstddef>
#include <vector>

#include <fftw3.h>

#include "parbeam/errors.hpp"
#include "parbeam/rotation.hpp"
#include "parbeam/types.hpp"

namespace parbeam::psf {

/// Reusable FFT workspace for one plane geometry (ni, nk) and one kernel
/// size (px, pz).  Holds plans and aligned buffers; all entry points are
/// allocation-free after construction.  Not shareable across threads.
class ConvWorkspace {
public:
    /// px, pz odd; kernel must fit the replicate-padded plane
    /// (px <= 2*ni - 1, pz <= 2*nk - 1).  Plans use FFTW_ESTIMATE so the
    /// chosen algorithm depends only on the sizes, never on timing.
    ConvWorkspace(int ni, int nk, int px, int pz);
    ~ConvWorkspace();
    ConvWorkspace(const ConvWorkspace&) = delete;
    ConvWorkspace& operator=(const ConvWorkspace&) = delete;

    int ni() const { return ni_; }
    int nk() const { return nk_; }
    int px() const { return px_; }
    int pz() const { return pz_; }

    /// Load a (px, pz) tap array (a + px*b layout) and cache its spectrum.
    template <typename T>
    void set_kernel(const T* taps);

    /// out = forward map of in with the current kernel; out may alias in.
    template <typename T>
    void correlate(const T* in, T* out);

    /// out = adjoint map of in with the current kernel; out may alias in.
    template <typename T>
    void adjoint(const T* in, T* out);

    /// Accumulation path: sum of forward maps of several slices, each under
    /// its own kernel, with a single inverse transform at the end.
    void accum_begin();
    template <typename T>
    void accum_add(const T* slice); // uses the kernel loaded by set_kernel
    template <typename T>
    void accum_finish(T* out);

    /// Shared-spectrum adjoint path: transform one detector plane once,
    /// then extract its adjoint image under each depth's kernel.
    template <typename T>
    void view_load(const T* det);
    template <typename T>
    void slice_extract(T* out_slice); // uses the kernel loaded by set_kernel

    std::size_t workspace_bytes() const;

private:
    void fft_forward(); // rbuf_ -> cbuf_
    void fft_inverse(); // cbuf_ -> rbuf_ (cbuf_ clobbered)

    template <typename T>
    void pad_replicate(const T* in); // (ni, nk) -> rbuf_, edge-clamped
    template <typename T>
    void embed_zero(const T* in); // (ni, nk) -> rbuf_, zero elsewhere
    template <typename T>
    void crop_valid(T* out) const; // rbuf_ -> (ni, nk), scaled by 1/area
    template <typename T>
    void fold_pad(T* out) const; // rbuf_ -> (ni, nk), border summed, scaled

    int ni_, nk_, px_, pz_;
    int hx_, hz_;       // kernel half-sizes
    int gi_, gk_;       // FFT grid: pow2 >= ni+px-1, nk+pz-1
    int gi_half_;       // gi_/2 + 1 complex columns per row
    double inv_area_;   // 1/(gi_*gk_)
    double* rbuf_ = nullptr;
    fftw_complex* cbuf_ = nullptr; // scratch spectrum
    fftw_complex* kbuf_ = nullptr; // current kernel spectrum
    fftw_complex* sbuf_ = nullptr; // accumulator / detector-view spectrum
    fftw_plan fwd_ = nullptr, inv_ = nullptr;
};

/// Sampled isotropic 2D Gaussian kernels, one per depth, replicated across
/// views.  sigma = fwhm / 2.3548 converted to voxels; each kernel is
/// normalized to unit sum.  A width under half a voxel degenerates to the
/// center-tap delta.
PsfStack<float> gaussian_psf(const std::vector<double>& fwhm_by_depth_mm, int px, int pz,
                             double voxel_size_mm, int nview);

/// Single center-tap delta kernels (identity blur) for every depth/view.
PsfStack<float> delta_psf(int px, int pz, int ny, int nview);

/// Allocating square-plane wrappers over ConvWorkspace.  taps is (px, pz),
/// a + px*b layout; the adjoint requires the kernel symmetric about its
/// center in both axes.
template <typename T>
rot::Plane<T> convolve_slice(const rot::Plane<T>& p, const T* taps, int px, int pz);
template <typename T>
rot::Plane<T> convolve_slice_adjoint(const rot::Plane<T>& p, const T* taps, int px, int pz);

// ---- template member definitions ----

template <typename T>
void ConvWorkspace::pad_replicate(const T* in) {
    const int pi = ni_ + 2 * hx_, pk = nk_ + 2 * hz_;
    for (int b = 0; b < gk_; ++b) {
        double* row = rbuf_ + std::size_t(gi_) * std::size_t(b);
        if (b >= pk) {
            for (int a = 0; a < gi_; ++a) row[a] = 0.0;
            continue;
        }
        int k = b - hz_;
        k = k < 0 ? 0 : (k >= nk_ ? nk_ - 1 : k);
        const T* src = in + std::size_t(ni_) * std::size_t(k);
        for (int a = 0; a < pi; ++a) {
            int i = a - hx_;
            i = i < 0 ? 0 : (i >= ni_ ? ni_ - 1 : i);
            row[a] = double(src[i]);
        }
        for (int a = pi; a < gi_; ++a) row[a] = 0.0;
    }
}

template <typename T>
void ConvWorkspace::embed_zero(const T* in) {
    for (int b = 0; b < gk_; ++b) {
        double* row = rbuf_ + std::size_t(gi_) * std::size_t(b);
        if (b < nk_) {
            const T* src = in + std::size_t(ni_) * std::size_t(b);
            for (int a = 0; a < ni_; ++a) row[a] = double(src[a]);
            for (int a = ni_; a < gi_; ++a) row[a] = 0.0;
        } else {
            for (int a = 0; a < gi_; ++a) row[a] = 0.0;
        }
    }
}

template <typename T>
void ConvWorkspace::crop_valid(T* out) const {
    for (int k = 0; k < nk_; ++k) {
        const double* row = rbuf_ + std::size_t(gi_) * std::size_t(k);
        T* dst = out + std::size_t(ni_) * std::size_t(k);
        for (int i = 0; i < ni_; ++i) dst[i] = T(row[i] * inv_area_);
    }
}

template <typename T>
void ConvWorkspace::fold_pad(T* out) const {
    const int pi = ni_ + 2 * hx_, pk = nk_ + 2 * hz_;
    for (int k = 0; k < nk_; ++k)
        for (int i = 0; i < ni_; ++i) out[std::size_t(i) + std::size_t(ni_) * std::size_t(k)] = T(0);
    for (int b = 0; b < pk; ++b) {
        int k = b - hz_;
        k = k < 0 ? 0 : (k >= nk_ ? nk_ - 1 : k);
        const double* row = rbuf_ + std::size_t(gi_) * std::size_t(b);
        T* dst = out + std::size_t(ni_) * std::size_t(k);
        for (int a = 0; a < pi; ++a) {
            int i = a - hx_;
            i = i < 0 ? 0 : (i >= ni_ ? ni_ - 1 : i);
            dst[i] += T(row[a] * inv_area_);
        }
    }
}

template <typename T>
void ConvWorkspace::set_kernel(const T* taps) {
    const std::size_t grid = std::size_t(gi_) * std::size_t(gk_);
    for (std::size_t t = 0; t < grid; ++t) rbuf_[t] = 0.0;
    for (int b = 0; b < pz_; ++b)
        for (int a = 0; a < px_; ++a)
            rbuf_[std::size_t(a) + std::size_t(gi_) * std::size_t(b)] =
                double(taps[std::size_t(a) + std::size_t(px_) * std::size_t(b)]);
    fft_forward();
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        kbuf_[t][0] = cbuf_[t][0];
        kbuf_[t][1] = cbuf_[t][1];
    }
}

template <typename T>
void ConvWorkspace::correlate(const T* in, T* out) {
    pad_replicate(in);
    fft_forward();
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        // cbuf := conj(kbuf) * cbuf
        const double ur = cbuf_[t][0], ui = cbuf_[t][1];
        const double kr = kbuf_[t][0], ki = kbuf_[t][1];
        cbuf_[t][0] = kr * ur + ki * ui;
        cbuf_[t][1] = kr * ui - ki * ur;
    }
    fft_inverse();
    crop_valid(out);
}

template <typename T>
void ConvWorkspace::adjoint(const T* in, T* out) {
    embed_zero(in);
    fft_forward();
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        // cbuf := kbuf * cbuf
        const double ur = cbuf_[t][0], ui = cbuf_[t][1];
        const double kr = kbuf_[t][0], ki = kbuf_[t][1];
        cbuf_[t][0] = kr * ur - ki * ui;
        cbuf_[t][1] = kr * ui + ki * ur;
    }
    fft_inverse();
    fold_pad(out);
}

template <typename T>
void ConvWorkspace::accum_add(const T* slice) {
    pad_replicate(slice);
    fft_forward();
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        const double ur = cbuf_[t][0], ui = cbuf_[t][1];
        const double kr = kbuf_[t][0], ki = kbuf_[t][1];
        sbuf_[t][0] += kr * ur + ki * ui;
        sbuf_[t][1] += kr * ui - ki * ur;
    }
}

template <typename T>
void ConvWorkspace::accum_finish(T* out) {
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        cbuf_[t][0] = sbuf_[t][0];
        cbuf_[t][1] = sbuf_[t][1];
    }
    fft_inverse();
    crop_valid(out);
}

template <typename T>
void ConvWorkspace::view_load(const T* det) {
    embed_zero(det);
    fft_forward();
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        sbuf_[t][0] = cbuf_[t][0];
        sbuf_[t][1] = cbuf_[t][1];
    }
}

template <typename T>
void ConvWorkspace::slice_extract(T* out_slice) {
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) {
        const double ur = sbuf_[t][0], ui = sbuf_[t][1];
        const double kr = kbuf_[t][0], ki = kbuf_[t][1];
        cbuf_[t][0] = kr * ur - ki * ui;
        cbuf_[t][1] = kr * ui + ki * ur;
    }
    fft_inverse();
    fold_pad(out_slice);
}

} // namespace parbeam::psf
