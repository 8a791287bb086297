#include "parbeam/psf.hpp"

#include <cmath>
#include <mutex>
#include <new>
#include <stdexcept>

namespace parbeam::psf {

namespace {

// FFTW's planner is not reentrant; plan creation/destruction is serialized.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

int next_pow2(int n) {
    int p = 1;
    while (p < n) p *= 2;
    return p;
}

} // namespace

ConvWorkspace::ConvWorkspace(int ni, int nk, int px, int pz)
    : ni_(ni), nk_(nk), px_(px), pz_(pz) {
    if (ni < 1 || nk < 1) throw ShapeError("ConvWorkspace: plane dims must be >= 1");
    if (px < 1 || pz < 1 || px % 2 == 0 || pz % 2 == 0)
        throw ParamError("ConvWorkspace: kernel dims must be odd and >= 1");
    if (px > 2 * ni - 1 || pz > 2 * nk - 1)
        throw ShapeError("ConvWorkspace: kernel larger than the replicate-padded plane");
    hx_ = (px - 1) / 2;
    hz_ = (pz - 1) / 2;
    gi_ = next_pow2(ni + px - 1);
    gk_ = next_pow2(nk + pz - 1);
    gi_half_ = gi_ / 2 + 1;
    inv_area_ = 1.0 / (double(gi_) * double(gk_));
    const std::size_t grid = std::size_t(gi_) * std::size_t(gk_);
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    rbuf_ = static_cast<double*>(fftw_malloc(grid * sizeof(double)));
    cbuf_ = static_cast<fftw_complex*>(fftw_malloc(spec * sizeof(fftw_complex)));
    kbuf_ = static_cast<fftw_complex*>(fftw_malloc(spec * sizeof(fftw_complex)));
    sbuf_ = static_cast<fftw_complex*>(fftw_malloc(spec * sizeof(fftw_complex)));
    if (!rbuf_ || !cbuf_ || !kbuf_ || !sbuf_) {
        fftw_free(rbuf_);
        fftw_free(cbuf_);
        fftw_free(kbuf_);
        fftw_free(sbuf_);
        throw std::bad_alloc();
    }
    for (std::size_t t = 0; t < grid; ++t) rbuf_[t] = 0.0;
    for (std::size_t t = 0; t < spec; ++t) {
        kbuf_[t][0] = kbuf_[t][1] = 0.0;
        sbuf_[t][0] = sbuf_[t][1] = 0.0;
    }
    {
        std::lock_guard<std::mutex> lock(planner_mutex());
        // FFTW_ESTIMATE: plan choice is a pure function of the sizes, so two
        // workspaces with equal geometry produce bitwise-equal transforms.
        fwd_ = fftw_plan_dft_r2c_2d(gk_, gi_, rbuf_, cbuf_, FFTW_ESTIMATE);
        inv_ = fftw_plan_dft_c2r_2d(gk_, gi_, cbuf_, rbuf_, FFTW_ESTIMATE);
    }
    if (!fwd_ || !inv_) throw std::runtime_error("ConvWorkspace: FFT plan creation failed");
}

ConvWorkspace::~ConvWorkspace() {
    {
        std::lock_guard<std::mutex> lock(planner_mutex());
        if (fwd_) fftw_destroy_plan(fwd_);
        if (inv_) fftw_destroy_plan(inv_);
    }
    fftw_free(rbuf_);
    fftw_free(cbuf_);
    fftw_free(kbuf_);
    fftw_free(sbuf_);
}

void ConvWorkspace::fft_forward() { fftw_execute(fwd_); }

void ConvWorkspace::fft_inverse() { fftw_execute(inv_); }

void ConvWorkspace::accum_begin() {
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    for (std::size_t t = 0; t < spec; ++t) sbuf_[t][0] = sbuf_[t][1] = 0.0;
}

std::size_t ConvWorkspace::workspace_bytes() const {
    const std::size_t grid = std::size_t(gi_) * std::size_t(gk_);
    const std::size_t spec = std::size_t(gi_half_) * std::size_t(gk_);
    return grid * sizeof(double) + 3 * spec * sizeof(fftw_complex);
}

PsfStack<float> gaussian_psf(const std::vector<double>& fwhm_by_depth_mm, int px, int pz,
                             double voxel_size_mm, int nview) {
    if (px < 1 || pz < 1 || px % 2 == 0 || pz % 2 == 0)
        throw ParamError("gaussian_psf: kernel dims must be odd and >= 1");
    if (fwhm_by_depth_mm.empty()) throw ParamError("gaussian_psf: need at least one depth");
    if (nview < 1) throw ParamError("gaussian_psf: nview must be >= 1");
    if (!(voxel_size_mm > 0)) throw ParamError("gaussian_psf: voxel size must be > 0");
    const int ny = int(fwhm_by_depth_mm.size());
    PsfStack<float> stack(px, pz, ny, nview);
    const double ca = 0.5 * (px - 1), cb = 0.5 * (pz - 1);
    std::vector<float> taps(std::size_t(px) * std::size_t(pz));
    for (int j = 0; j < ny; ++j) {
        const double fwhm = fwhm_by_depth_mm[std::size_t(j)];
        if (!(fwhm > 0)) throw ParamError("gaussian_psf: fwhm values must be > 0");
        const double fwhm_vox = fwhm / voxel_size_mm;
        if (fwhm_vox < 0.5) {
            for (auto& t : taps) t = 0.0f;
            taps[std::size_t(px / 2) + std::size_t(px) * std::size_t(pz / 2)] = 1.0f;
        } else {
            const double sigma = fwhm_vox / 2.3548;
            const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
            double sum = 0.0;
            for (int b = 0; b < pz; ++b) {
                for (int a = 0; a < px; ++a) {
                    const double da = a - ca, db = b - cb;
                    const double v = std::exp(-(da * da + db * db) * inv2s2);
                    taps[std::size_t(a) + std::size_t(px) * std::size_t(b)] = float(v);
                    sum += v;
                }
            }
            const float inv = float(1.0 / sum);
            for (auto& t : taps) t *= inv;
        }
        for (int l = 0; l < nview; ++l) {
            float* dst = stack.kernel(j, l);
            for (std::size_t t = 0; t < taps.size(); ++t) dst[t] = taps[t];
        }
    }
    validate_psf(stack, "gaussian_psf");
    return stack;
}

PsfStack<float> delta_psf(int px, int pz, int ny, int nview) {
    if (px < 1 || pz < 1 || px % 2 == 0 || pz % 2 == 0)
        throw ParamError("delta_psf: kernel dims must be odd and >= 1");
    PsfStack<float> stack(px, pz, ny, nview);
    for (int l = 0; l < nview; ++l)
        for (int j = 0; j < ny; ++j)
            stack.kernel(j, l)[std::size_t(px / 2) + std::size_t(px) * std::size_t(pz / 2)] = 1.0f;
    return stack;
}

namespace {

template <typename T>
void require_symmetric(const T* taps, int px, int pz, const char* what) {
    for (int b = 0; b < pz; ++b)
        for (int a = 0; a < px; ++a) {
            const T v = taps[std::size_t(a) + std::size_t(px) * std::size_t(b)];
            if (v != taps[std::size_t(px - 1 - a) + std::size_t(px) * std::size_t(b)] ||
                v != taps[std::size_t(a) + std::size_t(px) * std::size_t(pz - 1 - b)])
                throw DomainError(std::string(what) + ": kernel not symmetric about center");
        }
}

} // namespace

template <typename T>
rot::Plane<T> convolve_slice(const rot::Plane<T>& p, const T* taps, int px, int pz) {
    ConvWorkspace ws(p.n, p.n, px, pz);
    ws.set_kernel(taps);
    rot::Plane<T> out(p.n);
    ws.correlate(p.data.data(), out.data.data());
    return out;
}

template <typename T>
rot::Plane<T> convolve_slice_adjoint(const rot::Plane<T>& p, const T* taps, int px, int pz) {
    require_symmetric(taps, px, pz, "convolve_slice_adjoint");
    ConvWorkspace ws(p.n, p.n, px, pz);
    ws.set_kernel(taps);
    rot::Plane<T> out(p.n);
    ws.adjoint(p.data.data(), out.data.data());
    return out;
}

template rot::Plane<float> convolve_slice(const rot::Plane<float>&, const float*, int, int);
template rot::Plane<double> convolve_slice(const rot::Plane<double>&, const double*, int, int);
template rot::Plane<float> convolve_slice_adjoint(const rot::Plane<float>&, const float*, int, int);
template rot::Plane<double> convolve_slice_adjoint(const rot::Plane<double>&, const double*, int, int);

} // namespace parbeam::psf
