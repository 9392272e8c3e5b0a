#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace jmbma {

// Persistent worker pool with an index-stealing parallel_for. Each index is
// processed exactly once and writes only to its own outputs, so results do
// not depend on the number of workers or on scheduling order.
class ThreadPool {
public:
    explicit ThreadPool(unsigned n_threads = std::thread::hardware_concurrency()) {
        if (n_threads == 0) n_threads = 1;
        for (unsigned i = 0; i + 1 < n_threads; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    ~ThreadPool() {
        {
            std::unique_lock lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    unsigned size() const { return static_cast<unsigned>(workers_.size()) + 1; }

    void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
        if (n == 0) return;
        if (workers_.empty() || n == 1) {
            for (std::size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        {
            std::unique_lock lock(mu_);
            job_fn_ = &fn;
            job_n_ = n;
            next_.store(0, std::memory_order_relaxed);
            pending_.store(n, std::memory_order_relaxed);
            ++job_id_;
        }
        cv_.notify_all();
        run_indices(fn, n);
        {
            std::unique_lock lock(mu_);
            done_cv_.wait(lock, [this] { return pending_.load() == 0; });
            job_fn_ = nullptr;
        }
        if (first_error_) {
            auto e = first_error_;
            first_error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

    // Splits [0,n) into contiguous chunks, one fn(begin,end) call each.
    // Chunk boundaries depend only on n and the pool size.
    void parallel_for_chunked(std::size_t n,
                              const std::function<void(std::size_t, std::size_t)>& fn) {
        if (n == 0) return;
        const std::size_t n_chunks = std::min<std::size_t>(n, size() * 4);
        parallel_for(n_chunks, [&](std::size_t c) {
            const std::size_t begin = n * c / n_chunks;
            const std::size_t end = n * (c + 1) / n_chunks;
            if (begin < end) fn(begin, end);
        });
    }

private:
    void run_indices(const std::function<void(std::size_t)>& fn, std::size_t n) {
        for (;;) {
            std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= n) break;
            try {
                fn(i);
            } catch (...) {
                std::unique_lock lock(mu_);
                if (!first_error_) first_error_ = std::current_exception();
            }
            if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
                std::unique_lock lock(mu_);
                done_cv_.notify_all();
            }
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t)>* fn = nullptr;
            std::size_t n = 0;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return stop_ || (job_fn_ && job_id_ != seen); });
                if (stop_) return;
                seen = job_id_;
                fn = job_fn_;
                n = job_n_;
            }
            run_indices(*fn, n);
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t)>* job_fn_ = nullptr;
    std::size_t job_n_ = 0;
    std::uint64_t job_id_ = 0;
    bool stop_ = false;
    std::atomic<std::size_t> next_{0};
    std::atomic<std::size_t> pending_{0};
    std::exception_ptr first_error_;
};

}  // namespace jmbma
