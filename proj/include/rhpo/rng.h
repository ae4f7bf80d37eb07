#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rhpo {

// Deterministic RNG with explicit sub-stream derivation so that actors,
// the learner and the environment never share a stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed), seed_(seed) {}

  double uniform() {  // [0, 1)
    return std::uniform_real_distribution<double>(0.0, 1.0)(gen_);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Box-Muller; no cached spare so the stream state is a pure function of
  // the number of draws.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  int uniform_int(int n) {  // [0, n)
    return std::uniform_int_distribution<int>(0, n - 1)(gen_);
  }

  // Independent child stream; splitmix64 over (seed, id) keeps children
  // decorrelated for consecutive ids.
  Rng fork(std::uint64_t stream_id) const {
    std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

  std::mt19937_64& raw() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_;
};

}  // namespace rhpo
