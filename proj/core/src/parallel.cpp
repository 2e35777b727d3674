#include "mutr/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace mutr {

namespace {

int resolve_thread_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("MUTR_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0 && cap < n) n = cap;
    }
    return n;
}

// Lazily started worker pool. Work items are (begin, end) chunks of one
// parallel_for call; the caller blocks until all chunks are done.
class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard lock(mu_);
            shutdown_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(std::int64_t n, std::int64_t chunk, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        std::unique_lock lock(mu_);
        fn_ = &fn;
        total_ = n;
        chunk_ = chunk;
        next_ = 0;
        pending_ = (n + chunk - 1) / chunk;
        cv_.notify_all();
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    void worker_loop() {
        std::unique_lock lock(mu_);
        for (;;) {
            cv_.wait(lock, [this] { return shutdown_ || (fn_ != nullptr && next_ < total_); });
            if (shutdown_) return;
            while (fn_ != nullptr && next_ < total_) {
                const std::int64_t begin = next_;
                const std::int64_t end = std::min(total_, begin + chunk_);
                next_ = end;
                const auto* fn = fn_;
                lock.unlock();
                (*fn)(begin, end);
                lock.lock();
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> threads_;
    const std::function<void(std::int64_t, std::int64_t)>* fn_ = nullptr;
    std::int64_t total_ = 0;
    std::int64_t chunk_ = 1;
    std::int64_t next_ = 0;
    std::int64_t pending_ = 0;
    bool shutdown_ = false;
};

}  // namespace

int thread_count() {
    static const int n = resolve_thread_count();
    return n;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    const int workers = thread_count();
    // Chunk layout depends only on (n, workers), never on scheduling.
    const std::int64_t chunk = (n + workers - 1) / workers;
    if (workers == 1 || n < 256 || chunk == n) {
        fn(0, n);
        return;
    }
    static Pool pool(thread_count());
    static std::mutex caller_mu;  // one parallel_for at a time; calls do not nest
    std::lock_guard guard(caller_mu);
    pool.run(n, chunk, fn);
}

}  // namespace mutr
