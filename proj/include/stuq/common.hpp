#ifndef STUQ_COMMON_HPP
#define STUQ_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace stuq {

#ifdef STUQ_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError -> 3, TrainingError -> 4, everything else -> 1.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class DimensionError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class DomainError : public std::domain_error {
  using std::domain_error::domain_error;
};
class UsageError : public std::logic_error {
  using std::logic_error::logic_error;
};
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class TrainingError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and a path of
/// integer tags (stage, epoch, batch, sample, ...). Stateless, so any
/// worker can reproduce any stream without coordination.
inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(master ^ 0x5bf03635d78f9c37ULL);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p));
  return s;
}

// FNV-1a, used for stream tags and content hashes in reports.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline std::uint64_t tag(std::string_view name) { return fnv1a64(name); }

/// Deterministic random stream. Draw functions are pinned to explicit
/// bit-level constructions so sequences are identical across platforms
/// (std::normal_distribution is implementation-defined; this is not).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(splitmix64(seed ^ 0x2545f4914f6cdd1dULL)) {
    // warm up so nearby seeds decorrelate
    next_u64();
    next_u64();
  }

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (cached spare).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t below(std::uint64_t n) {
    // rejection sampling, unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = 0;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Worker-thread cap: STUQ_THREADS env var, else hardware concurrency.
inline unsigned thread_cap() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("STUQ_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1 && static_cast<unsigned long>(v) < 1024) return static_cast<unsigned>(v);
  }
  return hw;
}

namespace detail {
inline thread_local int parallel_depth = 0;
}

/// Runs fn(i) for i in [0, n). fn must only touch state owned by index i;
/// callers get determinism by reducing the per-index results in index order
/// afterwards. Nested calls run serially so worker counts stay bounded.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(thread_cap(), n);
  if (workers <= 1 || detail::parallel_depth > 0) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      detail::parallel_depth = 1;
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace stuq

#endif  // STUQ_COMMON_HPP
