#include "ctm/parallel.hpp"

#include <malloc.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace ctm {

namespace {

// Activation buffers are several MB and are re-allocated every episode;
// without these thresholds glibc serves them via mmap/munmap and every
// touch after re-allocation pays a zero-page fault.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();

thread_local bool t_in_worker = false;

// Fixed upper bound on partitions so per-partition reduction buffers stay
// small; constant, so partitioning stays machine-independent.
constexpr std::int64_t kMaxParts = 16;

class Pool {
public:
    Pool() {
        // BLAS kernels must stay single-threaded: all parallelism is at the
        // sample/partition level where the reduction order is pinned.
        openblas_set_num_threads(1);
        int n = 0;
        if (const char* env = std::getenv("CTM_THREADS")) n = std::atoi(env);
        if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
        n = std::clamp(n, 1, 64);
        threads_ = n;
        for (int i = 0; i < n - 1; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    int threads() const { return threads_; }

    void run(std::int64_t parts, const std::function<void(std::int64_t)>& task) {
        // One loop at a time; nested calls from task bodies never reach here
        // because work_until_drained marks the executing thread as a worker.
        std::lock_guard<std::mutex> run_lock(run_mu_);
        std::unique_lock<std::mutex> lk(mu_);
        task_ = &task;
        next_ = 0;
        pending_ = parts;
        total_ = parts;
        ++generation_;
        cv_.notify_all();
        lk.unlock();

        // The caller participates too.
        work_until_drained();

        lk.lock();
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        task_ = nullptr;
    }

private:
    void work_until_drained() {
        const bool was_worker = t_in_worker;
        t_in_worker = true;
        for (;;) {
            std::int64_t idx = next_.fetch_add(1);
            if (idx >= total_) break;
            (*task_)(idx);
            if (pending_.fetch_sub(1) == 1) {
                std::lock_guard<std::mutex> lk(mu_);
                done_cv_.notify_all();
            }
        }
        t_in_worker = was_worker;
    }

    void worker_loop() {
        t_in_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            const auto* task = task_;
            lk.unlock();
            if (task) work_until_drained();
        }
    }

    std::mutex run_mu_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(std::int64_t)>* task_ = nullptr;
    std::atomic<std::int64_t> next_{0};
    std::atomic<std::int64_t> pending_{0};
    std::int64_t total_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    int threads_ = 1;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

int worker_count() { return pool().threads(); }

std::int64_t partition_count(std::int64_t n, std::int64_t grain) {
    if (n <= 0) return 0;
    if (grain < 1) grain = 1;
    return std::min((n + grain - 1) / grain, kMaxParts);
}

void parallel_for_parts(std::int64_t n, std::int64_t grain,
                        const std::function<void(std::int64_t, std::int64_t, std::int64_t)>& fn) {
    const std::int64_t parts = partition_count(n, grain);
    if (parts == 0) return;
    const std::int64_t chunk = (n + parts - 1) / parts;
    auto run_part = [&](std::int64_t p) {
        const std::int64_t b = p * chunk;
        const std::int64_t e = std::min(n, b + chunk);
        if (b < e) fn(p, b, e);
    };
    if (parts == 1 || t_in_worker || pool().threads() == 1) {
        for (std::int64_t p = 0; p < parts; ++p) run_part(p);
        return;
    }
    pool().run(parts, run_part);
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    parallel_for_parts(n, grain,
                       [&](std::int64_t, std::int64_t b, std::int64_t e) { fn(b, e); });
}

}  // namespace ctm
