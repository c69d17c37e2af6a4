#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace qbmm {

// Probabilities are clamped to this band before entering logs or Pearson
// residuals; proportions closer to the boundary carry no usable information
// and destabilize the weights.
inline constexpr double kProbFloor = 1e-8;

class parse_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class domain_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class numeric_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class convergence_error : public std::runtime_error {
public:
  convergence_error(const std::string& msg, std::vector<double> trace = {})
      : std::runtime_error(msg), objective_trace(std::move(trace)) {}
  std::vector<double> objective_trace;
};

inline double expit(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double clamp_prob(double p, double floor = kProbFloor) {
  return std::clamp(p, floor, 1.0 - floor);
}

// SplitMix64 step; used to derive independent per-replicate seeds from
// (base seed, index) without correlated streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is striped by
// index so results written to slot i are independent of the thread count.
inline void parallel_for(std::size_t n, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const unsigned workers = std::min<std::size_t>(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
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

}  // namespace qbmm
