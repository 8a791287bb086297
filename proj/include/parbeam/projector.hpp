#pragma once

/// Parallel-beam system operator: forward projection of an activity volume
/// into detector views, and its exact adjoint.
///
/// Per view l the forward map is
///
///   embed each z-slice in a square padded plane, rotate by theta_l,
///   multiply by the accumulated attenuation factors of the identically
///   rotated attenuation map, blur every depth plane with its
///   depth-dependent kernel, sum the blurred planes along depth, and crop
///   the detector columns.
///
/// The adjoint runs the same stages transposed in reverse order and shares
/// the forward's rotated attenuation factors.  Views are distributed over a
/// worker pool; forward workers write disjoint views, and the adjoint
/// reduces per-worker partial volumes in ascending sequence order so the
/// result is bitwise independent of the thread count.  All scratch is sized
/// at construction; projection calls perform no heap allocation.

#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "parbeam/attenuation.hpp"
#include "parbeam/errors.hpp"
#include "parbeam/psf.hpp"
#include "parbeam/rotation.hpp"
#include "parbeam/types.hpp"
#include "parbeam/worker_pool.hpp"

namespace parbeam::proj {

/// Dense row-major matrix used to materialize operators for verification.
template <typename T>
struct DenseMatrix {
    int rows = 0, cols = 0;
    std::vector<T> a;

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), a(std::size_t(r) * std::size_t(c), T(0)) {}
    T& at(int r, int c) { return a[std::size_t(c) + std::size_t(cols) * std::size_t(r)]; }
    const T& at(int r, int c) const { return a[std::size_t(c) + std::size_t(cols) * std::size_t(r)]; }

    std::vector<T> apply(const std::vector<T>& x) const {
        if (int(x.size()) != cols) throw ShapeError("DenseMatrix::apply: size mismatch");
        std::vector<T> y(std::size_t(rows), T(0));
        for (int r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < cols; ++c) s += double(at(r, c)) * double(x[std::size_t(c)]);
            y[std::size_t(r)] = T(s);
        }
        return y;
    }
    std::vector<T> apply_transpose(const std::vector<T>& y) const {
        if (int(y.size()) != rows) throw ShapeError("DenseMatrix::apply_transpose: size mismatch");
        std::vector<T> x(std::size_t(cols), T(0));
        for (int c = 0; c < cols; ++c) {
            double s = 0.0;
            for (int r = 0; r < rows; ++r) s += double(at(r, c)) * double(y[std::size_t(r)]);
            x[std::size_t(c)] = T(s);
        }
        return x;
    }
};

/// Side of the square working plane: smallest even integer that keeps every
/// in-support voxel inside the plane under any rotation angle.
inline int padded_side(int nx, int ny) {
    const int m = nx > ny ? nx : ny;
    int n = int(std::ceil(std::sqrt(2.0) * double(m)));
    if (n % 2 != 0) ++n;
    return n;
}

template <typename T>
class SystemModel {
public:
    /// The attenuation map fixes the volume geometry; psf must provide one
    /// kernel per depth plane and view.  n_threads = 0 picks the hardware
    /// concurrency.  All workspaces and FFT plans are created here.
    SystemModel(Vol3<T> attenuation, PsfStack<T> psf, std::vector<double> angles_rad,
                rot::Method method = rot::Method::bilinear, int n_threads = 0)
        : mu_(std::move(attenuation)), psf_(std::move(psf)), angles_(std::move(angles_rad)),
          method_(method) {
        validate_volume(mu_, "SystemModel attenuation");
        validate_finite(mu_, "SystemModel attenuation");
        validate_nonnegative(mu_, "SystemModel attenuation");
        validate_psf(psf_, "SystemModel psf");
        if (angles_.empty()) throw ShapeError("SystemModel: need at least one view angle");
        for (std::size_t l = 0; l < angles_.size(); ++l) {
            if (!std::isfinite(angles_[l])) throw DomainError("SystemModel: non-finite view angle");
            if (l > 0 && !(angles_[l] > angles_[l - 1]))
                throw DomainError("SystemModel: view angles must be strictly increasing");
        }
        shape_ = mu_.shape;
        if (psf_.ny != shape_.ny)
            throw ShapeError("SystemModel: psf depth count " + std::to_string(psf_.ny) +
                             " != volume ny " + std::to_string(shape_.ny));
        if (psf_.nview != int(angles_.size()))
            throw ShapeError("SystemModel: psf view count " + std::to_string(psf_.nview) +
                             " != angle count " + std::to_string(angles_.size()));
        delta_y_ = mu_.voxel_size_mm[1];
        n_pad_ = padded_side(shape_.nx, shape_.ny);
        off_i_ = (n_pad_ - shape_.nx) / 2;
        off_j_ = (n_pad_ - shape_.ny) / 2;

        int hw = int(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        int nt = n_threads == 0 ? hw : n_threads;
        if (nt < 1) throw ParamError("SystemModel: thread count must be >= 1 (or 0 for auto)");
        if (nt > int(angles_.size())) nt = int(angles_.size());

        const std::size_t np2 = std::size_t(n_pad_) * std::size_t(n_pad_);
        const std::size_t pvol = np2 * std::size_t(shape_.nz);
        const std::size_t det = std::size_t(n_pad_) * std::size_t(shape_.nz);
        ws_.reserve(std::size_t(nt));
        slots_.resize(std::size_t(nt));
        for (int w = 0; w < nt; ++w) {
            ws_.push_back(std::make_unique<Workspace>());
            Workspace& s = *ws_.back();
            s.pvol.assign(pvol, T(0));
            s.pmu.assign(pvol, T(0));
            s.att.assign(pvol, T(0));
            s.plane_a.assign(np2, T(0));
            s.plane_b.assign(np2, T(0));
            s.slice.assign(det, T(0));
            s.det.assign(det, T(0));
            s.conv = std::make_unique<psf::ConvWorkspace>(n_pad_, shape_.nz, psf_.px, psf_.pz);
            slots_[std::size_t(w)].assign(shape_.total(), T(0));
        }
        pool_ = std::make_unique<WorkerPool>(nt);
    }

    SystemModel(const SystemModel&) = delete;
    SystemModel& operator=(const SystemModel&) = delete;

    const Shape3& vol_shape() const { return shape_; }
    const std::array<double, 3>& voxel_size_mm() const { return mu_.voxel_size_mm; }
    const Vol3<T>& attenuation() const { return mu_; }
    const PsfStack<T>& psf() const { return psf_; }
    int nview() const { return int(angles_.size()); }
    const std::vector<double>& angles() const { return angles_; }
    rot::Method rotation_method() const { return method_; }
    int threads() const { return pool_->workers(); }
    int padded() const { return n_pad_; }

    /// Total bytes of preallocated per-call scratch (all workers).
    std::size_t workspace_bytes() const {
        std::size_t b = 0;
        for (const auto& w : ws_) {
            b += (w->pvol.size() + w->pmu.size() + w->att.size() + w->plane_a.size() +
                  w->plane_b.size() + w->slice.size() + w->det.size()) *
                 sizeof(T);
            b += w->conv->workspace_bytes();
        }
        for (const auto& s : slots_) b += s.size() * sizeof(T);
        return b;
    }

    /// Correctly shaped, zeroed view container for this model.
    Views3<T> make_views() const { return Views3<T>(shape_.nx, shape_.nz, angles_); }

    /// Correctly shaped, zeroed volume for this model.
    Vol3<T> make_volume() const { return Vol3<T>(shape_, mu_.voxel_size_mm); }

    /// out(.,.,l) = projection of x at view l for every l; other state of
    /// out is untouched.  No heap allocation.
    void forward(const Vol3<T>& x, Views3<T>& out) const { forward_subset(x, out, nullptr, nview()); }

    /// Projection restricted to the views listed in subset (any fixed
    /// sequence); only those planes of out are written.
    void forward_subset(const Vol3<T>& x, Views3<T>& out, const int* subset, int n_subset) const {
        check_volume_arg(x, "forward");
        check_views_arg(out, "forward");
        check_subset(subset, n_subset);
        std::lock_guard<std::mutex> lock(call_mutex_);
        FwdCtx ctx{this, &x, &out, subset, n_subset, {0}};
        pool_->run(&SystemModel::fwd_task, &ctx);
    }

    /// out = adjoint applied to the listed views of v (out is overwritten).
    /// Partial results are reduced in subset-sequence order, so the output
    /// is bitwise independent of the thread count.  No heap allocation.
    void back(const Views3<T>& v, Vol3<T>& out) const { back_subset(v, out, nullptr, nview()); }

    void back_subset(const Views3<T>& v, Vol3<T>& out, const int* subset, int n_subset) const {
        check_views_arg(v, "back");
        check_volume_arg(out, "back");
        check_subset(subset, n_subset);
        std::lock_guard<std::mutex> lock(call_mutex_);
        std::memset(out.data.data(), 0, out.data.size() * sizeof(T));
        const int nw = pool_->workers();
        BackCtx ctx{this, &v, subset, n_subset, 0};
        for (int base = 0; base < n_subset; base += nw) {
            ctx.base = base;
            pool_->run(&SystemModel::back_task, &ctx);
            const int lim = std::min(nw, n_subset - base);
            for (int w = 0; w < lim; ++w) {
                const T* s = slots_[std::size_t(w)].data();
                T* o = out.data.data();
                const std::size_t n = out.data.size();
                for (std::size_t t = 0; t < n; ++t) o[t] += s[t];
            }
        }
    }

private:
    struct Workspace {
        std::vector<T> pvol;    // padded rotated activity / adjoint planes
        std::vector<T> pmu;     // padded rotated attenuation map
        std::vector<T> att;     // accumulated attenuation factors
        std::vector<T> plane_a; // embed / rotate staging
        std::vector<T> plane_b; // rotation scratch
        std::vector<T> slice;   // one (i, k) depth plane
        std::vector<T> det;     // full-width detector plane
        std::unique_ptr<psf::ConvWorkspace> conv;
        int loaded_depth = -1;
        int loaded_view = -1;
    };

    struct FwdCtx {
        const SystemModel* model;
        const Vol3<T>* x;
        Views3<T>* out;
        const int* subset;
        int n_subset;
        std::atomic<int> next;
    };

    struct BackCtx {
        const SystemModel* model;
        const Views3<T>* v;
        const int* subset;
        int n_subset;
        int base;
    };

    static void fwd_task(void* p, int w) {
        auto* c = static_cast<FwdCtx*>(p);
        for (;;) {
            const int t = c->next.fetch_add(1, std::memory_order_relaxed);
            if (t >= c->n_subset) break;
            const int l = c->subset ? c->subset[t] : t;
            c->model->project_view(*c->x, *c->out, l, *c->model->ws_[std::size_t(w)]);
        }
    }

    static void back_task(void* p, int w) {
        auto* c = static_cast<BackCtx*>(p);
        const int t = c->base + w;
        if (t >= c->n_subset) return;
        const int l = c->subset ? c->subset[t] : t;
        c->model->backproject_view(*c->v, c->model->slots_[std::size_t(w)], l,
                                   *c->model->ws_[std::size_t(w)]);
    }

    void check_volume_arg(const Vol3<T>& x, const char* what) const {
        if (!(x.shape == shape_) || x.data.size() != shape_.total())
            throw ShapeError(std::string(what) + ": volume shape does not match model");
        if (x.voxel_size_mm != mu_.voxel_size_mm)
            throw ShapeError(std::string(what) + ": volume voxel size does not match model");
    }
    void check_views_arg(const Views3<T>& v, const char* what) const {
        if (v.nx != shape_.nx || v.nz != shape_.nz || v.nview != nview() ||
            v.data.size() != v.total())
            throw ShapeError(std::string(what) + ": view stack shape does not match model");
    }
    void check_subset(const int* subset, int n_subset) const {
        if (n_subset < 1) throw ParamError("projection: empty view subset");
        if (!subset) return;
        for (int t = 0; t < n_subset; ++t)
            if (subset[t] < 0 || subset[t] >= nview())
                throw ParamError("projection: view index out of range");
    }

    /// Rotate activity (into pvol) if x != nullptr, rotate the attenuation
    /// map and refresh the accumulated factors for angle theta.
    void rotate_stage(const Vol3<T>* x, double theta, Workspace& ws) const {
        const int np = n_pad_, nz = shape_.nz;
        const std::size_t np2 = std::size_t(np) * std::size_t(np);
        for (int k = 0; k < nz; ++k) {
            if (x) {
                embed_plane(x->data.data(), k, ws.plane_a.data());
                rot::rotate_plane(ws.plane_a.data(), ws.pvol.data() + np2 * std::size_t(k),
                                  ws.plane_b.data(), np, theta, method_);
            }
            embed_plane(mu_.data.data(), k, ws.plane_a.data());
            rot::rotate_plane(ws.plane_a.data(), ws.pmu.data() + np2 * std::size_t(k),
                              ws.plane_b.data(), np, theta, method_);
        }
        att::accumulate_attenuation(ws.pmu.data(), ws.att.data(), np, np, nz, delta_y_);
    }

    /// Copy slice k of an (nx, ny, nz) volume into the center of a zeroed
    /// padded plane.
    void embed_plane(const T* vol, int k, T* plane) const {
        const int np = n_pad_, nx = shape_.nx, ny = shape_.ny;
        std::memset(plane, 0, std::size_t(np) * std::size_t(np) * sizeof(T));
        const T* src = vol + std::size_t(nx) * std::size_t(ny) * std::size_t(k);
        for (int j = 0; j < ny; ++j) {
            T* dst = plane + std::size_t(off_i_) + std::size_t(np) * std::size_t(j + off_j_);
            const T* s = src + std::size_t(nx) * std::size_t(j);
            for (int i = 0; i < nx; ++i) dst[i] = s[i];
        }
    }

    void load_kernel(int depth, int l, Workspace& ws) const {
        if (ws.loaded_view != l) {
            ws.loaded_view = l;
            ws.loaded_depth = -1;
        }
        if (ws.loaded_depth != depth) {
            ws.conv->set_kernel(psf_.kernel(depth, l));
            ws.loaded_depth = depth;
        }
    }

    int depth_index(int j_pad) const {
        int d = j_pad - off_j_;
        if (d < 0) d = 0;
        if (d >= shape_.ny) d = shape_.ny - 1;
        return d;
    }

    void project_view(const Vol3<T>& x, Views3<T>& out, int l, Workspace& ws) const {
        const int np = n_pad_, nx = shape_.nx, nz = shape_.nz;
        const std::size_t np2 = std::size_t(np) * std::size_t(np);
        rotate_stage(&x, angles_[std::size_t(l)], ws);
        ws.conv->accum_begin();
        for (int j = 0; j < np; ++j) {
            const T* pv = ws.pvol.data() + std::size_t(np) * std::size_t(j);
            const T* pa = ws.att.data() + std::size_t(np) * std::size_t(j);
            for (int k = 0; k < nz; ++k) {
                const T* vrow = pv + np2 * std::size_t(k);
                const T* arow = pa + np2 * std::size_t(k);
                T* srow = ws.slice.data() + std::size_t(np) * std::size_t(k);
                for (int i = 0; i < np; ++i) srow[i] = vrow[i] * arow[i];
            }
            load_kernel(depth_index(j), l, ws);
            ws.conv->accum_add(ws.slice.data());
        }
        ws.conv->accum_finish(ws.det.data());
        T* view = out.view(l);
        for (int k = 0; k < nz; ++k) {
            const T* drow = ws.det.data() + std::size_t(np) * std::size_t(k);
            T* vrow = view + std::size_t(nx) * std::size_t(k);
            for (int i = 0; i < nx; ++i) vrow[i] = drow[i + off_i_];
        }
    }

    void backproject_view(const Views3<T>& v, std::vector<T>& slot, int l, Workspace& ws) const {
        const int np = n_pad_, nx = shape_.nx, ny = shape_.ny, nz = shape_.nz;
        const std::size_t np2 = std::size_t(np) * std::size_t(np);
        rotate_stage(nullptr, angles_[std::size_t(l)], ws);
        // adjoint of detector crop: zero-embed the view at the crop offset
        std::memset(ws.det.data(), 0, ws.det.size() * sizeof(T));
        const T* view = v.view(l);
        for (int k = 0; k < nz; ++k) {
            const T* vrow = view + std::size_t(nx) * std::size_t(k);
            T* drow = ws.det.data() + std::size_t(np) * std::size_t(k);
            for (int i = 0; i < nx; ++i) drow[i + off_i_] = vrow[i];
        }
        ws.conv->view_load(ws.det.data());
        for (int j = 0; j < np; ++j) {
            load_kernel(depth_index(j), l, ws);
            ws.conv->slice_extract(ws.slice.data());
            T* pv = ws.pvol.data() + std::size_t(np) * std::size_t(j);
            const T* pa = ws.att.data() + std::size_t(np) * std::size_t(j);
            for (int k = 0; k < nz; ++k) {
                const T* srow = ws.slice.data() + std::size_t(np) * std::size_t(k);
                const T* arow = pa + np2 * std::size_t(k);
                T* vrow = pv + np2 * std::size_t(k);
                for (int i = 0; i < np; ++i) vrow[i] = srow[i] * arow[i];
            }
        }
        for (int k = 0; k < nz; ++k) {
            rot::rotate_plane_adjoint(ws.pvol.data() + np2 * std::size_t(k), ws.plane_a.data(),
                                      ws.plane_b.data(), np, angles_[std::size_t(l)], method_);
            T* dst = slot.data() + std::size_t(nx) * std::size_t(ny) * std::size_t(k);
            for (int j = 0; j < ny; ++j) {
                const T* prow =
                    ws.plane_a.data() + std::size_t(off_i_) + std::size_t(np) * std::size_t(j + off_j_);
                T* drow = dst + std::size_t(nx) * std::size_t(j);
                for (int i = 0; i < nx; ++i) drow[i] = prow[i];
            }
        }
    }

    Vol3<T> mu_;
    PsfStack<T> psf_;
    std::vector<double> angles_;
    rot::Method method_;
    Shape3 shape_{};
    double delta_y_ = 0.0;
    int n_pad_ = 0, off_i_ = 0, off_j_ = 0;
    mutable std::vector<std::unique_ptr<Workspace>> ws_;
    mutable std::vector<std::vector<T>> slots_;
    mutable std::unique_ptr<WorkerPool> pool_;
    mutable std::mutex call_mutex_;
};

/// Allocating convenience wrappers.
template <typename T>
Views3<T> forward_project(const Vol3<T>& x, const SystemModel<T>& model) {
    Views3<T> out = model.make_views();
    model.forward(x, out);
    return out;
}

template <typename T>
Vol3<T> back_project(const Views3<T>& v, const SystemModel<T>& model) {
    Vol3<T> out = model.make_volume();
    model.back(v, out);
    return out;
}

/// Materialize the forward operator column by column; rows and columns use
/// the same i-fastest flattening as the in-memory containers.  Guarded to
/// 1e7 entries.
template <typename T>
DenseMatrix<T> to_explicit_matrix(const SystemModel<T>& model) {
    const Shape3& s = model.vol_shape();
    const std::size_t rows = std::size_t(s.nx) * std::size_t(s.nz) * std::size_t(model.nview());
    const std::size_t cols = s.total();
    if (rows * cols > 10000000ull)
        throw ParamError("to_explicit_matrix: " + std::to_string(rows * cols) +
                         " entries exceed the 10000000 limit");
    DenseMatrix<T> m{int(rows), int(cols)};
    Vol3<T> e = model.make_volume();
    Views3<T> out = model.make_views();
    for (std::size_t c = 0; c < cols; ++c) {
        e.data[c] = T(1);
        model.forward(e, out);
        e.data[c] = T(0);
        for (std::size_t r = 0; r < rows; ++r) m.at(int(r), int(c)) = out.data[r];
    }
    return m;
}

/// Materialize the adjoint operator column by column (one column per
/// detector bin); same flattening and entry guard as to_explicit_matrix.
template <typename T>
DenseMatrix<T> adjoint_to_explicit_matrix(const SystemModel<T>& model) {
    const Shape3& s = model.vol_shape();
    const std::size_t cols = std::size_t(s.nx) * std::size_t(s.nz) * std::size_t(model.nview());
    const std::size_t rows = s.total();
    if (rows * cols > 10000000ull)
        throw ParamError("adjoint_to_explicit_matrix: " + std::to_string(rows * cols) +
                         " entries exceed the 10000000 limit");
    DenseMatrix<T> m{int(rows), int(cols)};
    Views3<T> e = model.make_views();
    Vol3<T> out = model.make_volume();
    for (std::size_t c = 0; c < cols; ++c) {
        e.data[c] = T(1);
        model.back(e, out);
        e.data[c] = T(0);
        for (std::size_t r = 0; r < rows; ++r) m.at(int(r), int(c)) = out.data[r];
    }
    return m;
}

} // namespace parbeam::proj
