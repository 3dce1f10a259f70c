#include "eyepurify/common.hpp"

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdarg>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <thread>

namespace eyepurify {

std::string strf(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list copy;
    va_copy(copy, args);
    int n = std::vsnprintf(nullptr, 0, fmt, copy);
    va_end(copy);
    std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
    if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
    va_end(args);
    return out;
}

std::string shape_str(const std::vector<long>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

double SeededRng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_normal_;
    }
    // Box-Muller on two fresh uniforms; u1 is kept away from 0.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
}

uint64_t SeededRng::uniform_index(uint64_t n) {
    if (n == 0) return 0;
    // Rejection sampling keeps the draw unbiased for any n.
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

namespace {

// Fixed-chunk work pool. Workers pull chunk indices from a shared counter;
// each chunk's extent depends only on (begin, end, chunk), so the computed
// values are identical no matter how chunks land on workers.
class WorkerPool {
public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    int count() {
        std::lock_guard<std::mutex> lk(config_mutex_);
        return configured_;
    }

    void set_count(int n) {
        std::lock_guard<std::mutex> lk(config_mutex_);
        shutdown_locked();
        configured_ = n < 0 ? 0 : n;
    }

    void run(long begin, long end, long chunk,
             const std::function<void(long, long)>& body) {
        long total = end - begin;
        if (total <= 0) return;
        long nchunks = (total + chunk - 1) / chunk;
        std::unique_lock<std::mutex> lk(config_mutex_);
        if (configured_ <= 1 || nchunks <= 1) {
            lk.unlock();
            for (long c = 0; c < nchunks; ++c) {
                long lo = begin + c * chunk;
                body(lo, std::min(end, lo + chunk));
            }
            return;
        }
        ensure_started_locked();
        // Publish the job, wake the pool, then help until all chunks finish.
        {
            std::lock_guard<std::mutex> jlk(job_mutex_);
            job_body_ = &body;
            job_begin_ = begin;
            job_end_ = end;
            job_chunk_ = chunk;
            next_chunk_.store(0, std::memory_order_relaxed);
            chunks_total_ = nchunks;
            chunks_done_ = 0;
            ++job_id_;
        }
        job_cv_.notify_all();
        work_chunks();
        {
            std::unique_lock<std::mutex> jlk(job_mutex_);
            done_cv_.wait(jlk, [&] { return chunks_done_ == chunks_total_; });
            job_body_ = nullptr;
        }
        lk.unlock();
    }

private:
    WorkerPool() {
        const char* env = std::getenv("EYEPURIFY_THREADS");
        if (env && *env) {
            configured_ = std::max(0, std::atoi(env));
        } else {
            configured_ = static_cast<int>(std::thread::hardware_concurrency());
        }
    }

    ~WorkerPool() {
        std::lock_guard<std::mutex> lk(config_mutex_);
        shutdown_locked();
    }

    void ensure_started_locked() {
        if (!threads_.empty()) return;
        stop_ = false;
        int helpers = configured_ - 1;
        for (int i = 0; i < helpers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    void shutdown_locked() {
        {
            std::lock_guard<std::mutex> jlk(job_mutex_);
            stop_ = true;
        }
        job_cv_.notify_all();
        for (auto& t : threads_) t.join();
        threads_.clear();
        stop_ = false;
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> jlk(job_mutex_);
                job_cv_.wait(jlk, [&] { return stop_ || (job_body_ && job_id_ != seen); });
                if (stop_) return;
                seen = job_id_;
            }
            work_chunks();
        }
    }

    void work_chunks() {
        for (;;) {
            long c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
            long total;
            {
                std::lock_guard<std::mutex> jlk(job_mutex_);
                total = chunks_total_;
                if (!job_body_) return;
            }
            if (c >= total) return;
            long lo = job_begin_ + c * job_chunk_;
            long hi = std::min(job_end_, lo + job_chunk_);
            (*job_body_)(lo, hi);
            {
                std::lock_guard<std::mutex> jlk(job_mutex_);
                if (++chunks_done_ == chunks_total_) done_cv_.notify_all();
            }
        }
    }

    std::mutex config_mutex_;
    int configured_ = 1;
    std::vector<std::thread> threads_;

    std::mutex job_mutex_;
    std::condition_variable job_cv_;
    std::condition_variable done_cv_;
    const std::function<void(long, long)>* job_body_ = nullptr;
    long job_begin_ = 0, job_end_ = 0, job_chunk_ = 1;
    std::atomic<long> next_chunk_{0};
    long chunks_total_ = 0;
    long chunks_done_ = 0;
    uint64_t job_id_ = 0;
    bool stop_ = false;
};

thread_local bool inside_parallel_for = false;

}  // namespace

void parallel_for(long begin, long end, long chunk,
                  const std::function<void(long, long)>& body) {
    if (chunk <= 0) chunk = 1;
    if (inside_parallel_for) {
        // Nested loops run inline; the outer loop already owns the pool.
        for (long lo = begin; lo < end; lo += chunk) {
            body(lo, std::min(end, lo + chunk));
        }
        return;
    }
    inside_parallel_for = true;
    WorkerPool::instance().run(begin, end, chunk, body);
    inside_parallel_for = false;
}

int worker_count() { return WorkerPool::instance().count(); }

void set_worker_count(int n) { WorkerPool::instance().set_count(n); }

void atomic_write_file(const std::string& path, const void* data, size_t size) {
    std::string tmp = path + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp);
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) {
            std::remove(tmp.c_str());
            throw IoError("write failed: " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("cannot move temporary file into place: " + path);
    }
}

void atomic_write_file(const std::string& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

bool file_exists(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return in.good();
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw IoError("read failed: " + path);
    return bytes;
}

}  // namespace eyepurify
