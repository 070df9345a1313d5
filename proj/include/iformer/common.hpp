#pragma once

// Shared plumbing: error types, shape formatting, a portable deterministic
// RNG, byte checksums and the thread-count knob.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace iformer {

// Dimension/shape mismatches (bad operand shapes, bad partitions).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/mixer configuration (bad ratios, divisibility, presets).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format violations (bad magic, truncation, duplicate names).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (non-scalar backward root, unknown selector).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric breakdown at runtime (diverged training, non-finite loss).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Deterministic RNG. std::normal_distribution's sequence is
// implementation-defined, so normals are produced by Box-Muller on top of
// uniform doubles built straight from mt19937_64 output. Identical streams
// on every platform for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // i in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  double normal() {
    // Box-Muller; u1 nudged away from 0 so log() stays finite.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Normal(0, std) truncated to +-2 std by resampling.
  double trunc_normal(double std_dev) {
    for (;;) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * std_dev;
    }
  }

 private:
  std::mt19937_64 engine_;
};

// IFORMER_THREADS caps internal parallelism. Defaults to 1 so results are
// bitwise reproducible without any configuration.
inline int thread_count() {
  const char* env = std::getenv("IFORMER_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n > 0 ? n : 1;
}

// Runs fn(i) for i in [0, n). With IFORMER_THREADS > 1 the index range is
// split into contiguous chunks, one thread each; every fn(i) writes disjoint
// output, so results are bitwise identical to the sequential run.
template <typename F>
void parallel_for(int64_t n, F&& fn) {
  int nt = thread_count();
  if (nt <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  nt = static_cast<int>(std::min<int64_t>(nt, n));
  std::vector<std::thread> workers;
  workers.reserve(nt);
  const int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    workers.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& w : workers) w.join();
}

// FNV-1a over raw bytes; used for activation/weight checksums.
inline uint64_t fnv1a(const void* data, size_t n_bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n_bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// splitmix64 step; used to derive independent per-item seeds from one seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t item) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (item + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace iformer
