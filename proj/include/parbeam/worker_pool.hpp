#pragma once

/// Persistent thread team for fork-join parallel sections.
///
/// The pool owns workers() - 1 threads; the caller of run() acts as worker 0
/// so a pool of size 1 spawns no threads at all.  run() dispatches a plain
/// function pointer plus context to every worker and returns once all have
/// finished.  After construction a run() performs no heap allocation, which
/// keeps the projection hot path allocation-free.

#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <thread>
#include <vector>

namespace parbeam {

class WorkerPool {
public:
    using TaskFn = void (*)(void* ctx, int worker);

    /// n_workers >= 1 (throws std::invalid_argument otherwise).
    explicit WorkerPool(int n_workers);
    ~WorkerPool();
    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    int workers() const { return n_workers_; }

    /// Run fn(ctx, w) for w in [0, workers()); blocks until all finish.
    /// Not reentrant: one run() at a time per pool.
    void run(TaskFn fn, void* ctx);

private:
    void worker_loop(int id);

    int n_workers_;
    std::vector<std::thread> threads_;
    std::mutex m_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    TaskFn task_ = nullptr;
    void* ctx_ = nullptr;
    std::uint64_t generation_ = 0;
    int remaining_ = 0;
    bool stop_ = false;
};

} // namespace parbeam
