#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace etdmpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Thrown by the replay buffer when no segment of the requested span exists.
struct InsufficientDataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when a rollout or planner encounters non-finite values.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded RNG stream. normal() uses plain Box-Muller without caching the
// spare value, so draws depend only on the engine state and copies of an
// Rng continue the same stream.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : hash_(splitmix64(seed)), engine_(hash_) {}

  /// Independent child stream identified by a tag.
  Rng derive(uint64_t tag) const {
    Rng child(0);
    child.hash_ = splitmix64(hash_ ^ splitmix64(tag ^ 0xd1b54a32d192ed03ULL));
    child.engine_.seed(child.hash_);
    return child;
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // u1 in (0, 1] so the log is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  VectorXd normal_vector(int n, double mean = 0.0, double stddev = 1.0) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = normal(mean, stddev);
    return v;
  }

  MatrixXd normal_matrix(int rows, int cols, double mean = 0.0, double stddev = 1.0) {
    MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = normal(mean, stddev);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  uint64_t hash_;
  std::mt19937_64 engine_;
};

inline bool all_finite(const MatrixXd& m) { return m.allFinite(); }
inline bool all_finite(const VectorXd& v) { return v.allFinite(); }

inline double clamp(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

inline VectorXd clamp(const VectorXd& v, double lo, double hi) {
  return v.cwiseMax(lo).cwiseMin(hi);
}

inline MatrixXd clamp(const MatrixXd& m, double lo, double hi) {
  return m.cwiseMax(lo).cwiseMin(hi);
}

}  // namespace etdmpc
