#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace eyepurify {

// Error taxonomy used for CLI exit-code mapping: ConfigError -> 1,
// IoError -> 2, NumericError -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// printf-style formatting into std::string.
std::string strf(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

std::string shape_str(const std::vector<long>& shape);

// Deterministic RNG with a fixed generation recipe. The engine is
// std::mt19937_64 (bit-exact by the standard on every platform); the
// uniform/normal transforms are pinned here instead of delegating to
// libstdc++ distributions, whose algorithms are implementation-defined.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the cached second value keeps the
    // draw count per sample fixed.
    double normal();

    uint64_t uniform_index(uint64_t n);  // in [0, n)

private:
    std::mt19937_64 engine_;
    double cached_normal_ = 0.0;
    bool has_cached_ = false;
};

// Sum with a fixed pairwise reduction tree. The result depends only on the
// operand order, never on chunking or thread count.
template <typename T>
T pairwise_sum(const T* data, size_t n) {
    if (n == 0) return T(0);
    if (n <= 16) {
        T acc = T(0);
        for (size_t i = 0; i < n; ++i) acc += data[i];
        return acc;
    }
    size_t half = n / 2;
    return pairwise_sum(data, half) + pairwise_sum(data + half, n - half);
}

template <typename T>
T pairwise_sum(const std::vector<T>& v) {
    return pairwise_sum(v.data(), v.size());
}

// Deterministic data-parallel loop. The index range is split into fixed-size
// chunks that do not depend on the worker count, and each chunk writes only
// its own slice, so results are identical for any number of workers
// (including zero, which runs inline). Nested calls run inline.
void parallel_for(long begin, long end, long chunk,
                  const std::function<void(long, long)>& body);

// Worker count control. Default comes from EYEPURIFY_THREADS when set,
// otherwise from hardware concurrency.
int worker_count();
void set_worker_count(int n);

// Writes bytes to a temporary file in the destination directory and renames
// it into place, so readers never observe a partial file.
void atomic_write_file(const std::string& path, const void* data, size_t size);
void atomic_write_file(const std::string& path, const std::string& text);

bool file_exists(const std::string& path);
std::vector<uint8_t> read_file_bytes(const std::string& path);

}  // namespace eyepurify
