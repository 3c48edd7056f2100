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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dpfed/errors.hpp"

namespace dpfed {

// Renyi divergence orders the accountant tracks. Integer orders only; the
// privacy conversion picks the tightest.
struct OrderGrid {
  std::vector<int> orders;

  void validate() const {
    if (orders.empty()) throw ValidationError("order grid must be nonempty");
    int prev = 1;
    for (int a : orders) {
      if (a < 2 || a > 512)
        throw ValidationError("orders must be integers in [2, 512]");
      if (a <= prev) throw ValidationError("orders must be strictly increasing");
      prev = a;
    }
  }

  static const OrderGrid& defaults() {
    static const OrderGrid grid = [] {
      OrderGrid g;
      g.orders.reserve(511);
      for (int a = 2; a <= 512; ++a) g.orders.push_back(a);
      return g;
    }();
    return grid;
  }
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& xs) {
  double m = xs[0];
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double sum = 0.0;
  for (double x : xs) sum += std::exp(x - m);
  return m + std::log(sum);
}

// log(n!) with a fixed precomputed table covering every default-grid order;
// immutable after construction, so concurrent readers are safe.
inline double log_factorial(int n) {
  static const std::vector<double> table = [] {
    std::vector<double> t(1025);
    for (int i = 0; i < 1025; ++i) t[i] = std::lgamma(static_cast<double>(i) + 1.0);
    return t;
  }();
  if (n < static_cast<int>(table.size())) return table[static_cast<std::size_t>(n)];
  return std::lgamma(static_cast<double>(n) + 1.0);
}

inline double log_binomial(int n, int k) {
  return log_factorial(n) - log_factorial(k) - log_factorial(n - k);
}

}  // namespace detail

// Per-step Renyi divergence of the Poisson-subsampled Gaussian mechanism at
// each grid order: for integer alpha and sampling rate q,
//
//   rdp(alpha) = log( sum_{k=0..alpha} C(alpha,k) (1-q)^(alpha-k) q^k
//                     * exp(k(k-1)/(2 sigma^2)) ) / (alpha - 1).
//
// Evaluated entirely in log space so large orders and tiny q stay stable.
// q=0 touches no data (divergence 0); q=1 has no subsampling amplification
// and reduces to the plain Gaussian value alpha/(2 sigma^2), returned exactly.
inline std::vector<double> rdp_subsampled_gaussian(double q, double sigma,
                                                   const OrderGrid& grid = OrderGrid::defaults()) {
  grid.validate();
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("sampling rate q must be in [0, 1]");
  if (!(sigma > 0.0)) throw ValidationError("noise multiplier sigma must be > 0");

  std::vector<double> rdp(grid.orders.size(), 0.0);
  if (q == 0.0) return rdp;

  const double inv_2s2 = 1.0 / (2.0 * sigma * sigma);
  if (q == 1.0) {
    for (std::size_t i = 0; i < grid.orders.size(); ++i)
      rdp[i] = static_cast<double>(grid.orders[i]) * inv_2s2;
    return rdp;
  }

  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  std::vector<double> terms;
  for (std::size_t i = 0; i < grid.orders.size(); ++i) {
    const int alpha = grid.orders[i];
    terms.clear();
    terms.reserve(static_cast<std::size_t>(alpha) + 1);
    for (int k = 0; k <= alpha; ++k) {
      terms.push_back(detail::log_binomial(alpha, k) + k * log_q +
                      (alpha - k) * log_1mq +
                      static_cast<double>(k) * (k - 1) * inv_2s2);
    }
    // The sum is >= 1 analytically; clamp float dust so rdp stays >= 0.
    rdp[i] = std::max(0.0, detail::log_sum_exp(terms)) /
             static_cast<double>(alpha - 1);
  }
  return rdp;
}

// Composition state: the per-step divergence curve plus an integer step
// count. Keeping the count (instead of a running sum) makes composition
// exactly additive: compose(compose(s,a),b) == compose(s,a+b) bit for bit.
struct AccountantState {
  OrderGrid grid;
  std::vector<double> per_step_rdp;
  long long steps = 0;
  double q = 0.0;
  double sigma = 0.0;

  std::vector<double> accumulated_rdp() const {
    std::vector<double> total(per_step_rdp.size());
    for (std::size_t i = 0; i < total.size(); ++i)
      total[i] = per_step_rdp[i] * static_cast<double>(steps);
    return total;
  }
};

inline AccountantState make_accountant(double q, double sigma,
                                       const OrderGrid& grid = OrderGrid::defaults()) {
  AccountantState state;
  state.grid = grid;
  state.per_step_rdp = rdp_subsampled_gaussian(q, sigma, grid);
  state.q = q;
  state.sigma = sigma;
  return state;
}

inline AccountantState compose(AccountantState state, long long steps) {
  if (steps < 0) throw ValidationError("cannot compose a negative step count");
  state.steps += steps;
  return state;
}

struct EpsilonReport {
  double epsilon = 0.0;
  int order = 0;  // the grid order realizing the minimum
};

// Standard RDP-to-DP conversion, minimized over the grid:
//   epsilon = min_alpha [ rdp(alpha) + log(1/delta) / (alpha - 1) ].
inline EpsilonReport rdp_to_epsilon(const AccountantState& state, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("delta must be in (0, 1)");
  const double log_inv_delta = std::log(1.0 / delta);
  EpsilonReport best;
  best.epsilon = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < state.grid.orders.size(); ++i) {
    const double alpha = static_cast<double>(state.grid.orders[i]);
    const double eps =
        state.per_step_rdp[i] * static_cast<double>(state.steps) + log_inv_delta / (alpha - 1.0);
    if (eps < best.epsilon) {
      best.epsilon = eps;
      best.order = state.grid.orders[i];
    }
  }
  return best;
}

// (epsilon, best order) spent by `steps` subsampled-Gaussian steps.
inline EpsilonReport get_privacy_spent(double q, double sigma, long long steps, double delta,
                                       const OrderGrid& grid = OrderGrid::defaults()) {
  if (steps < 0) throw ValidationError("step count must be >= 0");
  return rdp_to_epsilon(compose(make_accountant(q, sigma, grid), steps), delta);
}

namespace detail {
inline constexpr double kSigmaBracketLow = 0.3;
inline constexpr double kSigmaBracketHigh = 1000.0;
inline constexpr int kCalibrationMaxIterations = 80;
inline constexpr double kCalibrationRelativeWidth = 1e-4;
}  // namespace detail

// Smallest noise multiplier on [0.3, 1000] whose spend over `steps` steps
// stays within target_epsilon, by bisection (privacy spent is decreasing in
// sigma). Throws CalibrationError when even the bracket's top cannot meet
// the target.
inline double get_noise_multiplier(double q, double target_epsilon, double delta,
                                   long long steps,
                                   const OrderGrid& grid = OrderGrid::defaults()) {
  if (!(target_epsilon > 0.0)) throw ValidationError("target epsilon must be > 0");
  if (steps < 1) throw ValidationError("calibration needs steps >= 1");
  if (!(q > 0.0 && q <= 1.0)) throw ValidationError("sampling rate q must be in (0, 1]");

  const auto spent = [&](double sigma) {
    return get_privacy_spent(q, sigma, steps, delta, grid).epsilon;
  };

  double lo = detail::kSigmaBracketLow;
  double hi = detail::kSigmaBracketHigh;
  if (spent(lo) <= target_epsilon) return lo;
  const double at_top = spent(hi);
  if (at_top > target_epsilon) {
    std::ostringstream msg;
    msg << "epsilon target " << target_epsilon << " is unreachable within the sigma bracket ["
        << lo << ", " << hi << "]: even sigma=" << hi << " spends epsilon=" << at_top;
    throw CalibrationError(msg.str());
  }
  for (int iter = 0;
       iter < detail::kCalibrationMaxIterations && (hi - lo) / hi >= detail::kCalibrationRelativeWidth;
       ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (spent(mid) <= target_epsilon)
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

}  // namespace dpfed
