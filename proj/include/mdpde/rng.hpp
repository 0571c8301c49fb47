#pragma once

// Counter-based random number generation (Philox 4x32-10).
//
// Every draw is a pure function of (seed, replication, stream, counter), so
// replications can run in any order or in parallel and still produce
// byte-identical results. Streams separate the independent random inputs of
// one replication (regressors, effects, errors, contamination, ...).

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace mdpde {

namespace detail {

inline void philox_round(std::array<std::uint32_t, 4>& ctr, std::array<std::uint32_t, 2>& key) {
  constexpr std::uint64_t kM0 = 0xD2511F53ull;
  constexpr std::uint64_t kM1 = 0xCD9E8D57ull;
  const std::uint64_t p0 = kM0 * ctr[0];
  const std::uint64_t p1 = kM1 * ctr[2];
  std::array<std::uint32_t, 4> out;
  out[0] = static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0];
  out[1] = static_cast<std::uint32_t>(p1);
  out[2] = static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1];
  out[3] = static_cast<std::uint32_t>(p0);
  ctr = out;
  key[0] += 0x9E3779B9u;
  key[1] += 0xBB67AE85u;
}

inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) philox_round(ctr, key);
  return ctr;
}

}  // namespace detail

/// One independent random stream, keyed by (seed, replication, stream id).
/// Successive calls walk a 2^64 counter; streams never collide.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t replication, std::uint32_t stream)
      : seed_(seed), rep_(replication), stream_(stream) {}

  std::uint32_t next_u32() {
    if (buf_pos_ == 4) refill();
    return buf_[buf_pos_++];
  }

  std::uint64_t next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; draws come in pairs.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    double rad = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * std::numbers::pi * u2;
    spare_ = rad * std::sin(ang);
    have_spare_ = true;
    return rad * std::cos(ang);
  }

  double next_normal(double mean, double sd) { return mean + sd * next_normal(); }

  /// Chi-square with 2 degrees of freedom (an exponential of mean 2).
  double next_chisq2() { return -2.0 * std::log(1.0 - next_double()); }

  /// Uniform integer in [0, bound) by rejection; bound must be positive.
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("CounterRng: zero bound");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % bound;
  }

  /// Deterministic sample of m distinct indices from {0, ..., n-1}
  /// (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m) {
    if (m > n) throw std::invalid_argument("CounterRng: sample larger than population");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t j = i + static_cast<std::size_t>(next_below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    return idx;
  }

 private:
  void refill() {
    std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
        stream_, static_cast<std::uint32_t>(rep_)};
    std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                        static_cast<std::uint32_t>(seed_ >> 32) ^
                                            static_cast<std::uint32_t>(rep_ >> 32)};
    buf_ = detail::philox4x32(ctr, key);
    ++block_;
    buf_pos_ = 0;
  }

  std::uint64_t seed_, rep_;
  std::uint32_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int buf_pos_ = 4;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mdpde
