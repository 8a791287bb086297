#include "parbeam/worker_pool.hpp"

#include <stdexcept>

namespace parbeam {

WorkerPool::WorkerPool(int n_workers) : n_workers_(n_workers) {
    if (n_workers < 1) throw std::invalid_argument("WorkerPool: need at least one worker");
    threads_.reserve(std::size_t(n_workers - 1));
    for (int id = 1; id < n_workers; ++id)
        threads_.emplace_back([this, id] { worker_loop(id); });
}

WorkerPool::~WorkerPool() {
    {
        std::lock_guard<std::mutex> lock(m_);
        stop_ = true;
    }
    cv_start_.notify_all();
    for (auto& t : threads_) t.join();
}

void WorkerPool::run(TaskFn fn, void* ctx) {
    if (n_workers_ == 1) { // no helpers: execute inline
        fn(ctx, 0);
        return;
    }
    {
        std::lock_guard<std::mutex> lock(m_);
        task_ = fn;
        ctx_ = ctx;
        remaining_ = n_workers_ - 1;
        ++generation_;
    }
    cv_start_.notify_all();
    fn(ctx, 0); // caller is worker 0
    std::unique_lock<std::mutex> lock(m_);
    cv_done_.wait(lock, [this] { return remaining_ == 0; });
}

void WorkerPool::worker_loop(int id) {
    std::uint64_t seen = 0;
    for (;;) {
        TaskFn fn;
        void* ctx;
        {
            std::unique_lock<std::mutex> lock(m_);
            cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            fn = task_;
            ctx = ctx_;
        }
        fn(ctx, id);
        {
            std::lock_guard<std::mutex> lock(m_);
            if (--remaining_ == 0) cv_done_.notify_one();
        }
    }
}

} // namespace parbeam
