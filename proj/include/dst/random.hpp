// Seeded RNG with explicit sampling routines. Distributions are
// implemented here rather than with std::*_distribution so that streams
// are reproducible bit-for-bit and the engine state can be serialized
// into checkpoints.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dst/tensor.hpp"

namespace dst {

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Marsaglia polar; the spare value is discarded so
  // the stream state is the engine alone.
  double normal() {
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return u * std::sqrt(-2.0 * std::log(s) / s);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // normal(0, std) redrawn until within +/-2 std
  double truncated_normal(double std) {
    for (;;) {
      double x = normal() * std;
      if (std::abs(x) <= 2.0 * std) return x;
    }
  }

  int64_t below(int64_t n) {  // uniform integer in [0, n)
    return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
  }

  Tensor normal_tensor(Shape s, double mean = 0.0, double std = 1.0) {
    Tensor t{std::move(s)};
    for (auto& v : t.data) v = normal(mean, std);
    return t;
  }

  Tensor uniform_tensor(Shape s, double lo = 0.0, double hi = 1.0) {
    Tensor t{std::move(s)};
    for (auto& v : t.data) v = uniform(lo, hi);
    return t;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw std::runtime_error("bad rng state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dst
