#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace xco2 {

/// Failure classes. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
  usage = 1,
  runtime = 2,
  validation = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

// splitmix64 finalizer, used to derive independent RNG streams.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for the stream identified by (master, a, b). Order-independent
/// reproducibility comes from every worker deriving its own stream.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                    std::uint64_t b = 0) {
  return mix64(mix64(mix64(master) ^ (a * 0x2545f4914f6cdd1dULL)) ^
               (b + 0x632be59bd9b4e019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Runs body(i) for i in [0, n) on up to `workers` threads with contiguous
/// chunks. The first exception thrown by a worker is rethrown after the join.
template <typename F>
void parallel_for(std::size_t n, unsigned workers, F&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
      pool.emplace_back([lo, hi, w, &body, &errors] {
        try {
          for (std::size_t i = lo; i < hi; ++i) body(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Deterministic Fisher-Yates over 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes,
                    std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t v);
std::uint64_t file_hash(const std::string& path);

// Little-endian binary helpers shared by the NDN1 / XCD1 / EOF1 formats.
namespace bin {

void write_magic(std::ostream& os, std::string_view magic);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_f64s(std::ostream& os, std::span<const double> v);

void expect_magic(std::istream& is, std::string_view magic, const std::string& what);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_f64s(std::istream& is, std::span<double> out);

}  // namespace bin

}  // namespace xco2
