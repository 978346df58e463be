#include "dfssm/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace dfssm {

namespace {

thread_local bool g_in_worker = false;

class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { run(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void dispatch(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
        // One job at a time; concurrent callers queue up here.
        std::lock_guard dispatch_lk(dispatch_mu_);
        const std::size_t parts = std::min<std::size_t>(threads_.size() + 1, count);
        const std::size_t chunk = (count + parts - 1) / parts;
        {
            std::unique_lock lk(mu_);
            job_ = &fn;
            job_count_ = count;
            job_chunk_ = chunk;
            next_part_ = 0;
            pending_ = (count + chunk - 1) / chunk;
            ++generation_;
        }
        cv_.notify_all();
        // The dispatching thread chips in as well.
        work_off_parts();
        std::unique_lock lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    void work_off_parts() {
        for (;;) {
            std::size_t part;
            {
                std::unique_lock lk(mu_);
                if (job_ == nullptr || next_part_ * job_chunk_ >= job_count_) return;
                part = next_part_++;
            }
            const std::size_t b = part * job_chunk_;
            const std::size_t e = std::min(job_count_, b + job_chunk_);
            (*job_)(b, e);
            {
                std::unique_lock lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    void run() {
        g_in_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            work_off_parts();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex dispatch_mu_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
    std::size_t job_count_ = 0, job_chunk_ = 0, next_part_ = 0, pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool& pool() {
    static Pool p(std::max(0, thread_count() - 1));
    return p;
}

}  // namespace

int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("DFSSM_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return std::min(v, 64);
        }
        unsigned hw = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hw, 1u, 16u));
    }();
    return n;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn,
                  double total_work) {
    if (count == 0) return;
    if (g_in_worker || thread_count() == 1 || count == 1 || total_work < 65536.0) {
        fn(0, count);
        return;
    }
    pool().dispatch(count, fn);
}

}  // namespace dfssm
