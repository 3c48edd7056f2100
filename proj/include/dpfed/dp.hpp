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
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpfed/accountant.hpp"
#include "dpfed/corpus.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/model.hpp"
#include "dpfed/rng.hpp"

namespace dpfed {

// Privacy budget and mechanism parameters for example-level DP training.
// noise_multiplier is the ratio of noise std to clip norm; when unset it is
// calibrated from (epsilon, delta, q, steps) via the accountant.
struct PrivacySpec {
  double epsilon = 0.0;
  double delta = 0.0;   // 0 means "unset"; resolved to 1/|D_train| by the harness
  double clip_norm = 0.1;
  double sampling_rate = 0.0;
  std::optional<double> noise_multiplier;

  void validate() const {
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be > 0");
    if (delta != 0.0 && !(delta > 0.0 && delta < 1.0))
      throw ValidationError("delta must be in (0, 1)");
    if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be > 0");
    if (!(sampling_rate > 0.0 && sampling_rate <= 1.0))
      throw ValidationError("sampling_rate must be in (0, 1]");
    if (noise_multiplier && !(*noise_multiplier >= 0.0))
      throw ValidationError("noise_multiplier must be >= 0");
  }

  bool operator==(const PrivacySpec&) const = default;
};

// Independent inclusion of each index with probability q; the batch size is
// binomial, and an empty result is legitimate.
inline std::vector<std::size_t> poisson_sample(std::size_t dataset_size, double q, Rng& rng) {
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("sampling rate q must be in [0, 1]");
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < dataset_size; ++i)
    if (rng.bernoulli(q)) batch.push_back(i);
  return batch;
}

inline double l2_norm(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

// g / max(1, ||g||_2 / S): identity inside the S-ball, rescaled onto it
// outside. Never changes direction.
inline GradientVector clip_gradient(GradientVector g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be > 0");
  const double norm = l2_norm(g);
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (double& x : g) x *= scale;
  }
  return g;
}

// The noised, normalized gradient sum: (sum of clipped gradients + z) / B
// with z ~ N(0, (sigma S)^2 I) and B the expected batch size q|D|. Inputs
// must already be clipped; summation runs in ascending index order so the
// result is bit-reproducible. sigma=0 adds nothing and returns the plain
// normalized sum.
inline GradientVector privatize_sum(const std::vector<GradientVector>& clipped,
                                    std::size_t dim, double sigma, double clip_norm,
                                    double expected_batch, Rng& rng) {
  if (!(expected_batch > 0.0)) throw ValidationError("expected batch size must be > 0");
  if (!(sigma >= 0.0)) throw ValidationError("sigma must be >= 0");
  if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be > 0");

  GradientVector out(dim, 0.0);
  for (std::size_t i = 0; i < clipped.size(); ++i) {
    const GradientVector& g = clipped[i];
    if (g.size() != dim)
      throw ValidationError("privatize_sum: gradient dimension mismatch");
    if (l2_norm(g) > clip_norm + 1e-9)
      throw ContractError("privatize_sum received an unclipped gradient (norm " +
                          std::to_string(l2_norm(g)) + " > " + std::to_string(clip_norm) + ")");
    for (std::size_t j = 0; j < dim; ++j) out[j] += g[j];
  }
  if (sigma > 0.0) {
    const double noise_std = sigma * clip_norm;
    for (std::size_t j = 0; j < dim; ++j) out[j] += noise_std * rng.gaussian();
  }
  for (std::size_t j = 0; j < dim; ++j) out[j] /= expected_batch;
  return out;
}

inline ParameterVector sgd_update(ParameterVector params, const GradientVector& grad,
                                  double eta) {
  if (params.size() != grad.size())
    throw ValidationError("sgd_update: parameter/gradient length mismatch");
  for (std::size_t j = 0; j < params.size(); ++j) params[j] -= eta * grad[j];
  return params;
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double tau = 1e-8;

  static AdamState fresh(std::size_t dim, double beta1 = 0.9, double beta2 = 0.999,
                         double tau = 1e-8) {
    AdamState s;
    s.m.assign(dim, 0.0);
    s.v.assign(dim, 0.0);
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.tau = tau;
    return s;
  }
};

// One Adam step with bias correction:
//   m_t = b1 m + (1-b1) g,  v_t = b2 v + (1-b2) g^2,
//   theta -= eta * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + tau).
inline std::pair<AdamState, ParameterVector> adam_update(AdamState state,
                                                         ParameterVector params,
                                                         const GradientVector& grad,
                                                         double eta) {
  if (state.m.size() != params.size() || state.v.size() != params.size() ||
      grad.size() != params.size())
    throw ValidationError("adam_update: dimension mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t j = 0; j < params.size(); ++j) {
    state.m[j] = state.beta1 * state.m[j] + (1.0 - state.beta1) * grad[j];
    state.v[j] = state.beta2 * state.v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
    const double m_hat = state.m[j] / bc1;
    const double v_hat = state.v[j] / bc2;
    params[j] -= eta * m_hat / (std::sqrt(v_hat) + state.tau);
  }
  return {std::move(state), std::move(params)};
}

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

struct OptimizerParams {
  OptimizerKind kind = OptimizerKind::adam;
  double eta = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double tau = 1e-8;

  void validate() const {
    if (!(eta >= 0.0)) throw ValidationError("eta must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("beta2 must be in [0, 1)");
    if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  }

  bool operator==(const OptimizerParams&) const = default;
};

struct StepRecord {
  long long step = 0;
  std::size_t batch_size = 0;                 // realized Poisson batch
  std::optional<double> loss;                 // mean batch loss; absent on empty batches
  double epsilon_spent = 0.0;                 // infinity when sigma == 0
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  ParameterVector final_params;
};

using StepCallback = std::function<void(const StepRecord& record, const ParameterVector& params)>;

// The private training loop. Per step: Poisson-sample a batch, clip each
// per-example gradient to S, privatize the sum with noise std sigma*S and
// normalization q|D|, then apply one optimizer step. Empty batches still run
// the pure-noise step and still count toward composition. Noise and batch
// substreams are derived per step, so the trajectory is a pure function of
// (inputs, rng).
//
// prior_steps shifts the accountant's step counter; federated per-client
// training uses it to keep a client's spend cumulative across rounds.
inline TrainHistory dp_train(const Corpus& corpus, const ModelShape& shape,
                             ParameterVector params, const PrivacySpec& privacy,
                             const OptimizerParams& optimizer, long long epochs,
                             const RngStream& rng,
                             const OrderGrid& grid = OrderGrid::defaults(),
                             const StepCallback& on_step = {},
                             long long prior_steps = 0) {
  privacy.validate();
  optimizer.validate();
  shape.validate();
  detail::check_params(shape, params);
  if (corpus.size() < 1) throw ValidationError("dp_train requires a nonempty corpus");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!privacy.noise_multiplier)
    throw ValidationError("dp_train requires a resolved noise_multiplier");
  if (!(privacy.delta > 0.0 && privacy.delta < 1.0))
    throw ValidationError("dp_train requires a resolved delta");

  const double q = privacy.sampling_rate;
  const double sigma = *privacy.noise_multiplier;
  const double S = privacy.clip_norm;
  const long long total_steps = std::llround(static_cast<double>(epochs) / q);
  const double expected_batch = q * static_cast<double>(corpus.size());

  AccountantState acct;
  if (sigma > 0.0) acct = make_accountant(q, sigma, grid);

  AdamState adam = AdamState::fresh(params.size(), optimizer.beta1, optimizer.beta2,
                                    optimizer.tau);
  TrainHistory history;
  history.steps.reserve(static_cast<std::size_t>(total_steps));

  std::vector<GradientVector> clipped;
  for (long long t = 1; t <= total_steps; ++t) {
    const RngStream step_stream = rng.child("step").child(static_cast<std::uint64_t>(t));
    Rng batch_rng = step_stream.child("batch").rng();
    Rng noise_rng = step_stream.child("noise").rng();

    const std::vector<std::size_t> batch = poisson_sample(corpus.size(), q, batch_rng);
    clipped.clear();
    clipped.reserve(batch.size());
    double loss_sum = 0.0;
    for (std::size_t idx : batch) {
      LossGradient lg = per_example_loss_gradient(params, shape, corpus.examples[idx]);
      loss_sum += lg.loss;
      clipped.push_back(clip_gradient(std::move(lg.gradient), S));
    }
    const GradientVector noisy = privatize_sum(clipped, params.size(), sigma, S,
                                               expected_batch, noise_rng);
    if (optimizer.kind == OptimizerKind::adam) {
      auto [next_state, next_params] = adam_update(std::move(adam), std::move(params),
                                                   noisy, optimizer.eta);
      adam = std::move(next_state);
      params = std::move(next_params);
    } else {
      params = sgd_update(std::move(params), noisy, optimizer.eta);
    }

    StepRecord rec;
    rec.step = t;
    rec.batch_size = batch.size();
    if (!batch.empty()) rec.loss = loss_sum / static_cast<double>(batch.size());
    rec.epsilon_spent =
        sigma > 0.0
            ? rdp_to_epsilon(compose(acct, prior_steps + t), privacy.delta).epsilon
            : std::numeric_limits<double>::infinity();
    history.steps.push_back(rec);
    if (on_step) on_step(rec, params);
  }
  history.final_params = std::move(params);
  return history;
}

struct EpochRecord {
  long long epoch = 0;
  double loss = 0.0;  // mean minibatch loss across the epoch
};

struct NonPrivateHistory {
  std::vector<EpochRecord> epochs;
  ParameterVector final_params;
};

using EpochCallback = std::function<void(const EpochRecord& record, const ParameterVector& params)>;

// Plain minibatch training: shuffle per epoch, walk fixed-size batches (the
// final one may be smaller), average the gradient over each batch. Used for
// the non-private baseline and for FedAvg local steps.
inline NonPrivateHistory nonprivate_train(const Corpus& corpus, const ModelShape& shape,
                                          ParameterVector params,
                                          const OptimizerParams& optimizer,
                                          long long epochs, std::size_t batch_size,
                                          const RngStream& rng,
                                          const EpochCallback& on_epoch = {}) {
  optimizer.validate();
  shape.validate();
  detail::check_params(shape, params);
  if (corpus.size() < 1) throw ValidationError("training requires a nonempty corpus");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");

  AdamState adam = AdamState::fresh(params.size(), optimizer.beta1, optimizer.beta2,
                                    optimizer.tau);
  NonPrivateHistory history;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  GradientVector batch_grad(params.size());
  for (long long e = 1; e <= epochs; ++e) {
    Rng shuffle_rng = rng.child("epoch").child(static_cast<std::uint64_t>(e)).child("shuffle").rng();
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t num_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
      const std::size_t end = std::min(begin + batch_size, order.size());
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        LossGradient lg = per_example_loss_gradient(params, shape, corpus.examples[order[i]]);
        batch_loss += lg.loss;
        for (std::size_t j = 0; j < batch_grad.size(); ++j) batch_grad[j] += lg.gradient[j];
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (double& gj : batch_grad) gj *= inv;
      batch_loss *= inv;

      if (optimizer.kind == OptimizerKind::adam) {
        auto [next_state, next_params] = adam_update(std::move(adam), std::move(params),
                                                     batch_grad, optimizer.eta);
        adam = std::move(next_state);
        params = std::move(next_params);
      } else {
        params = sgd_update(std::move(params), batch_grad, optimizer.eta);
      }
      loss_sum += batch_loss;
      ++num_batches;
    }
    history.epochs.push_back({e, loss_sum / static_cast<double>(num_batches)});
    if (on_epoch) on_epoch(history.epochs.back(), params);
  }
  history.final_params = std::move(params);
  return history;
}

}  // namespace dpfed
