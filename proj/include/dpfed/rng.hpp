// Copyright 2026 The dpfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace dpfed {

namespace detail {

// Finalizer from the splitmix64 generator. Bijective on 64-bit words, so
// distinct inputs never collide after mixing.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Domain tags keep child("2") and child(2) on separate derivation paths.
constexpr std::uint64_t kLabelTag = 0x6c6162656c3a3a00ULL;
constexpr std::uint64_t kIndexTag = 0x696e6465783a3a00ULL;

}  // namespace detail

// Deterministic draw source. All randomness in this library flows through
// Rng; none of the std:: distribution templates are used because their
// outputs are implementation-defined and would break cross-platform
// reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t key)
      : engine_(make_engine(key)) {}

  // Uniform on [0, 1) with 53 random mantissa bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (cosine branch). Consumes exactly two
  // uniform draws per call, which keeps draw counts predictable.
  double gaussian() {
    double u1 = 1.0 - uniform01();  // (0, 1], keeps the log finite
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::vector<double> gaussians(std::size_t n) {
    std::vector<double> out(n);
    for (double& x : out) x = gaussian();
    return out;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Uniform integer on [0, n). Rejection-sampled so every value is equally
  // likely regardless of n.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      using std::swap;
      swap(v[i], v[j]);
    }
  }

 private:
  static std::mt19937_64 make_engine(std::uint64_t key) {
    // Expand the key into four words so engine states for related keys do
    // not start out correlated. seed_seq's output is fully specified.
    std::uint64_t a = detail::mix64(key);
    std::uint64_t b = detail::mix64(a);
    std::uint64_t c = detail::mix64(b);
    std::uint64_t d = detail::mix64(c);
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                      static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
                      static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d >> 32)};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 engine_;
};

// A node in a tree of named random streams. Substreams are derived by
// hash-chaining labels onto the parent key, so any (seed, path) pair maps to
// the same stream on every platform and the draw order of one stream never
// disturbs another. RngStream itself holds no engine state; call rng() to
// materialize a generator at the current node.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(detail::mix64(seed)) {}

  RngStream child(std::string_view label) const {
    return RngStream(detail::mix64(key_ ^ detail::mix64(detail::fnv1a64(label) ^ detail::kLabelTag)), Raw{});
  }

  RngStream child(std::uint64_t index) const {
    return RngStream(detail::mix64(key_ ^ detail::mix64(index ^ detail::kIndexTag)), Raw{});
  }

  std::uint64_t key() const { return key_; }

  Rng rng() const { return Rng(key_); }

 private:
  struct Raw {};
  RngStream(std::uint64_t key, Raw) : key_(key) {}

  std::uint64_t key_;
};

}  // namespace dpfed
