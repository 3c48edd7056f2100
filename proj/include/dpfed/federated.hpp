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
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpfed/accountant.hpp"
#include "dpfed/corpus.hpp"
#include "dpfed/dp.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/metrics.hpp"
#include "dpfed/model.hpp"
#include "dpfed/rng.hpp"

namespace dpfed {

enum class Protocol { fedavg, fedavg_dp, feam_dp };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::fedavg: return "fedavg";
    case Protocol::fedavg_dp: return "fedavg_dp";
    default: return "feam_dp";
  }
}

struct FederationConfig {
  std::size_t clients = 0;        // K
  double client_fraction = 1.0;   // C
  long long rounds = 0;           // T; 0 lets feam_dp derive it from (E, q)
  Protocol protocol = Protocol::fedavg;
  long long local_epochs = 1;     // E_local, fedavg / fedavg_dp only

  // m = C*K, which must be integral and in [1, K].
  std::size_t clients_per_round() const {
    const double exact = client_fraction * static_cast<double>(clients);
    const double rounded = std::round(exact);
    if (std::abs(exact - rounded) > 1e-9)
      throw ValidationError("client_fraction * clients must be an integer");
    return static_cast<std::size_t>(rounded);
  }

  void validate() const {
    if (clients < 1) throw ValidationError("clients must be >= 1");
    if (!(client_fraction > 0.0 && client_fraction <= 1.0))
      throw ValidationError("client_fraction must be in (0, 1]");
    const std::size_t m = clients_per_round();
    if (m < 1 || m > clients)
      throw ValidationError("clients per round must be in [1, clients]");
    if (clients == 2 && client_fraction != 1.0)
      throw ValidationError("client_fraction must be 1 when clients = 2");
    if (rounds < 0) throw ValidationError("rounds must be >= 0");
    if (protocol != Protocol::feam_dp && rounds < 1)
      throw ValidationError("rounds must be >= 1 for this protocol");
    if (protocol != Protocol::feam_dp && local_epochs < 1)
      throw ValidationError("local_epochs must be >= 1");
  }

  bool operator==(const FederationConfig&) const = default;
};

// Exact parameter mapping from the standalone-DP triple (sigma, q) onto m
// participating clients: each client subsamples at q_k = q/C and noises at
// sigma_k = sigma/sqrt(CK), so the aggregate reproduces the standalone noise
// profile. Training runs T = round(E/q) rounds.
struct FeamDerived {
  double q_k = 0.0;
  double sigma_k = 0.0;
  long long rounds = 0;
};

inline FeamDerived derive_feam_params(double sigma, double q, double C, std::size_t K,
                                      long long epochs) {
  if (!(q > 0.0 && q <= 1.0)) throw ValidationError("sampling rate q must be in (0, 1]");
  if (!(C > 0.0 && C <= 1.0)) throw ValidationError("client_fraction must be in (0, 1]");
  if (q > C) throw ValidationError("q must not exceed C");
  if (!(sigma >= 0.0)) throw ValidationError("sigma must be >= 0");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  const double exact_m = C * static_cast<double>(K);
  const double m = std::round(exact_m);
  if (std::abs(exact_m - m) > 1e-9 || m < 1.0)
    throw ValidationError("client_fraction * clients must be a positive integer");
  FeamDerived derived;
  derived.q_k = q / C;
  derived.sigma_k = sigma / std::sqrt(m);
  derived.rounds = std::llround(static_cast<double>(epochs) / q);
  return derived;
}

struct ClientShard {
  std::size_t id = 0;
  Corpus data;

  std::size_t n() const { return data.size(); }
};

inline std::vector<ClientShard> make_client_shards(std::vector<Corpus> shards) {
  std::vector<ClientShard> clients(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    if (shards[k].size() < 1)
      throw ValidationError("client shard " + std::to_string(k) + " is empty");
    clients[k].id = k;
    clients[k].data = std::move(shards[k]);
  }
  return clients;
}

// m distinct ids drawn uniformly from [0, K), returned ascending so the
// aggregation fold order is deterministic.
inline std::vector<std::size_t> sample_clients(std::size_t K, std::size_t m, Rng& rng) {
  if (m < 1 || m > K) throw ValidationError("need 1 <= m <= K for client sampling");
  std::vector<std::size_t> pool(K);
  for (std::size_t i = 0; i < K; ++i) pool[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(K - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// Sum of w_i * v_i. Weights are expected to sum to 1 (shard-proportional).
inline std::vector<double> weighted_average(const std::vector<std::vector<double>>& vectors,
                                            const std::vector<double>& weights) {
  if (vectors.empty() || vectors.size() != weights.size())
    throw ValidationError("weighted_average: need one weight per vector");
  std::vector<double> out(vectors[0].size(), 0.0);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != out.size())
      throw ValidationError("weighted_average: vector length mismatch");
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += weights[i] * vectors[i][j];
  }
  return out;
}

struct RoundReport {
  long long round = 0;
  std::vector<std::size_t> sampled;
  std::optional<double> loss;        // shard-weighted client training loss
  std::optional<F1Result> eval;      // test-split score, when an evaluator is given
  std::optional<double> epsilon_spent;
};

struct FederatedResult {
  ParameterVector params;
  std::vector<RoundReport> rounds;
  // The sigma/q derivation assumes equal shards; unequal ones still run with
  // n_k/n weighting but are flagged as outside that assumption.
  bool unequal_shards = false;
  // Noise multiplier actually used (per client for fedavg_dp, global for
  // feam_dp); absent for the non-private protocol.
  std::optional<double> resolved_sigma;
};

using FederatedEvaluator = std::function<F1Result(const ParameterVector&)>;
using RoundCallback = std::function<void(const RoundReport& report, const ParameterVector& params)>;

namespace detail {

inline void check_shards(const std::vector<ClientShard>& shards, const ModelShape& shape) {
  if (shards.empty()) throw ValidationError("federation requires at least one client");
  for (const ClientShard& c : shards) {
    if (c.data.size() < 1)
      throw ValidationError("client shard " + std::to_string(c.id) + " is empty");
    if (c.data.feature_dim != shape.feature_dim || c.data.num_labels != shape.num_labels)
      throw ValidationError("client shard " + std::to_string(c.id) +
                            " does not match the model shape");
  }
}

inline bool shards_unequal(const std::vector<ClientShard>& shards) {
  for (const ClientShard& c : shards)
    if (c.n() != shards[0].n()) return true;
  return false;
}

inline std::vector<double> shard_weights(const std::vector<ClientShard>& shards,
                                         const std::vector<std::size_t>& sampled) {
  double n = 0.0;
  for (std::size_t k : sampled) n += static_cast<double>(shards[k].n());
  std::vector<double> w(sampled.size());
  for (std::size_t i = 0; i < sampled.size(); ++i)
    w[i] = static_cast<double>(shards[sampled[i]].n()) / n;
  return w;
}

inline ParameterVector apply_update(OptimizerKind kind, AdamState& adam,
                                    ParameterVector params, const GradientVector& grad,
                                    double eta) {
  if (kind == OptimizerKind::adam) {
    auto [next_state, next_params] = adam_update(std::move(adam), std::move(params), grad, eta);
    adam = std::move(next_state);
    return std::move(next_params);
  }
  return sgd_update(std::move(params), grad, eta);
}

}  // namespace detail

// Parameter-averaging federation without privacy. Per round the server
// broadcasts, each sampled client runs local_epochs of minibatch training
// with a fresh optimizer, and the server takes the shard-weighted average of
// the returned parameters.
inline FederatedResult fedavg_train(const std::vector<ClientShard>& shards,
                                    const ModelShape& shape, ParameterVector params,
                                    const OptimizerParams& optimizer,
                                    const FederationConfig& config, std::size_t batch_size,
                                    const RngStream& rng,
                                    const FederatedEvaluator& evaluator = {},
                                    const RoundCallback& on_round = {}) {
  config.validate();
  if (config.protocol != Protocol::fedavg)
    throw ValidationError("fedavg_train requires protocol = fedavg");
  detail::check_shards(shards, shape);
  detail::check_params(shape, params);
  const std::size_t K = shards.size();
  if (config.clients != K)
    throw ValidationError("config.clients does not match the shard count");
  const std::size_t m = config.clients_per_round();

  FederatedResult result;
  result.unequal_shards = detail::shards_unequal(shards);
  for (long long t = 1; t <= config.rounds; ++t) {
    Rng select_rng = rng.child("select").child(static_cast<std::uint64_t>(t)).rng();
    const std::vector<std::size_t> sampled = sample_clients(K, m, select_rng);
    const std::vector<double> weights = detail::shard_weights(shards, sampled);

    std::vector<ParameterVector> locals;
    locals.reserve(sampled.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      const std::size_t k = sampled[i];
      const RngStream client_rng =
          rng.child("client").child(k).child("round").child(static_cast<std::uint64_t>(t));
      NonPrivateHistory local = nonprivate_train(shards[k].data, shape, params, optimizer,
                                                 config.local_epochs, batch_size, client_rng);
      loss += weights[i] * local.epochs.back().loss;
      locals.push_back(std::move(local.final_params));
    }
    params = weighted_average(locals, weights);

    RoundReport report;
    report.round = t;
    report.sampled = sampled;
    report.loss = loss;
    if (evaluator) report.eval = evaluator(params);
    result.rounds.push_back(std::move(report));
    if (on_round) on_round(result.rounds.back(), params);
  }
  result.params = std::move(params);
  return result;
}

// The per-client-DP baseline: every sampled client runs the full private
// training loop on its own shard and the server averages parameters. Privacy
// is purely local; each client spends the whole (epsilon, delta) budget on
// its shard, calibrated for its expected participation
// round(C*T) * round(E_local/q) steps. The reported epsilon is the largest
// spend across clients so far.
inline FederatedResult fedavg_dp_train(const std::vector<ClientShard>& shards,
                                       const ModelShape& shape, ParameterVector params,
                                       const PrivacySpec& privacy,
                                       const OptimizerParams& optimizer,
                                       const FederationConfig& config, const RngStream& rng,
                                       const OrderGrid& grid = OrderGrid::defaults(),
                                       const FederatedEvaluator& evaluator = {},
                                       const RoundCallback& on_round = {}) {
  config.validate();
  if (config.protocol != Protocol::fedavg_dp)
    throw ValidationError("fedavg_dp_train requires protocol = fedavg_dp");
  privacy.validate();
  if (!(privacy.delta > 0.0 && privacy.delta < 1.0))
    throw ValidationError("fedavg_dp_train requires a resolved delta");
  detail::check_shards(shards, shape);
  detail::check_params(shape, params);
  const std::size_t K = shards.size();
  if (config.clients != K)
    throw ValidationError("config.clients does not match the shard count");
  const std::size_t m = config.clients_per_round();

  const double q = privacy.sampling_rate;
  const long long steps_per_round =
      std::llround(static_cast<double>(config.local_epochs) / q);
  const long long expected_participations =
      std::llround(config.client_fraction * static_cast<double>(config.rounds));
  const long long budget_steps = std::max<long long>(1, expected_participations) *
                                 std::max<long long>(1, steps_per_round);

  // All clients share (q, delta), so sigma is one calibration per run unless
  // the caller pinned it.
  const double sigma = privacy.noise_multiplier
                           ? *privacy.noise_multiplier
                           : get_noise_multiplier(q, privacy.epsilon, privacy.delta,
                                                  budget_steps, grid);
  PrivacySpec local_privacy = privacy;
  local_privacy.noise_multiplier = sigma;

  AccountantState one_step;
  if (sigma > 0.0) one_step = make_accountant(q, sigma, grid);
  std::vector<long long> client_steps(K, 0);

  FederatedResult result;
  result.unequal_shards = detail::shards_unequal(shards);
  result.resolved_sigma = sigma;
  for (long long t = 1; t <= config.rounds; ++t) {
    Rng select_rng = rng.child("select").child(static_cast<std::uint64_t>(t)).rng();
    const std::vector<std::size_t> sampled = sample_clients(K, m, select_rng);
    const std::vector<double> weights = detail::shard_weights(shards, sampled);

    std::vector<ParameterVector> locals;
    locals.reserve(sampled.size());
    double loss = 0.0;
    double loss_weight = 0.0;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      const std::size_t k = sampled[i];
      const RngStream client_rng =
          rng.child("client").child(k).child("round").child(static_cast<std::uint64_t>(t));
      TrainHistory local =
          dp_train(shards[k].data, shape, params, local_privacy, optimizer,
                   config.local_epochs, client_rng, grid, {}, client_steps[k]);
      client_steps[k] += static_cast<long long>(local.steps.size());

      double local_loss = 0.0;
      std::size_t counted = 0;
      for (const StepRecord& rec : local.steps)
        if (rec.loss) {
          local_loss += *rec.loss;
          ++counted;
        }
      if (counted > 0) {
        loss += weights[i] * (local_loss / static_cast<double>(counted));
        loss_weight += weights[i];
      }
      locals.push_back(std::move(local.final_params));
    }
    params = weighted_average(locals, weights);

    RoundReport report;
    report.round = t;
    report.sampled = sampled;
    if (loss_weight > 0.0) report.loss = loss / loss_weight;
    if (sigma > 0.0) {
      long long worst = 0;
      for (long long s : client_steps) worst = std::max(worst, s);
      report.epsilon_spent =
          rdp_to_epsilon(compose(one_step, worst), privacy.delta).epsilon;
    } else {
      report.epsilon_spent = std::numeric_limits<double>::infinity();
    }
    if (evaluator) report.eval = evaluator(params);
    result.rounds.push_back(std::move(report));
    if (on_round) on_round(result.rounds.back(), params);
  }
  result.params = std::move(params);
  return result;
}

struct ClientUpdate {
  GradientVector gradient;
  std::optional<double> batch_loss;  // mean loss over the local batch
  std::size_t batch_size = 0;
};

// One client's contribution for a round: Poisson-sample the shard at q_k,
// clip per-example gradients to S, and privatize the sum with noise std
// sigma_k*S normalized by the expected local batch q_k*|D_k|. This is the
// transport seam: a pure function of (params, shard, stream), so it could
// move behind a wire protocol untouched.
inline ClientUpdate feam_client_update_full(const ParameterVector& params,
                                            const ModelShape& shape, double sigma_k,
                                            double clip_norm, double q_k,
                                            const Corpus& shard, const RngStream& rng) {
  if (q_k > 1.0) throw ValidationError("q must not exceed C");
  if (!(q_k > 0.0)) throw ValidationError("per-client sampling rate must be > 0");
  if (!(sigma_k >= 0.0)) throw ValidationError("sigma_k must be >= 0");
  if (shard.size() < 1) throw ValidationError("client shard is empty");
  detail::check_params(shape, params);

  Rng batch_rng = rng.child("batch").rng();
  Rng noise_rng = rng.child("noise").rng();
  const std::vector<std::size_t> batch = poisson_sample(shard.size(), q_k, batch_rng);

  std::vector<GradientVector> clipped;
  clipped.reserve(batch.size());
  double loss_sum = 0.0;
  for (std::size_t idx : batch) {
    LossGradient lg = per_example_loss_gradient(params, shape, shard.examples[idx]);
    loss_sum += lg.loss;
    clipped.push_back(clip_gradient(std::move(lg.gradient), clip_norm));
  }
  const double expected_batch = q_k * static_cast<double>(shard.size());

  ClientUpdate update;
  update.batch_size = batch.size();
  if (!batch.empty()) update.batch_loss = loss_sum / static_cast<double>(batch.size());
  update.gradient = privatize_sum(clipped, params.size(), sigma_k, clip_norm,
                                  expected_batch, noise_rng);
  return update;
}

inline GradientVector feam_client_update(const ParameterVector& params,
                                         const ModelShape& shape, double sigma_k,
                                         double clip_norm, double q_k, const Corpus& shard,
                                         const RngStream& rng) {
  return feam_client_update_full(params, shape, sigma_k, clip_norm, q_k, shard, rng)
      .gradient;
}

// Federated private training with local clip-and-noise and a single global
// optimizer step per round. Clients run at (q_k, sigma_k) derived from the
// standalone triple; the server aggregates sum of (n_k/n) g_k and updates
// once. Accounting charges the global (q, sigma) pair per round.
//
// Seed mapping: client k's round-t stream is
// rng.child("client").child(k).child("step").child(t), inside which the
// batch/noise substreams match dp_train's step-t streams. Hence with K=1,
// C=1 this trajectory equals dp_train(..., rng.child("client").child(0)).
inline FederatedResult feam_dp_train(const std::vector<ClientShard>& shards,
                                     const ModelShape& shape, ParameterVector params,
                                     const PrivacySpec& privacy,
                                     const OptimizerParams& optimizer,
                                     const FederationConfig& config, long long epochs,
                                     const RngStream& rng,
                                     const OrderGrid& grid = OrderGrid::defaults(),
                                     const FederatedEvaluator& evaluator = {},
                                     const RoundCallback& on_round = {}) {
  config.validate();
  if (config.protocol != Protocol::feam_dp)
    throw ValidationError("feam_dp_train requires protocol = feam_dp");
  privacy.validate();
  if (!privacy.noise_multiplier)
    throw ValidationError("feam_dp_train requires a resolved noise_multiplier");
  if (!(privacy.delta > 0.0 && privacy.delta < 1.0))
    throw ValidationError("feam_dp_train requires a resolved delta");
  detail::check_shards(shards, shape);
  detail::check_params(shape, params);
  const std::size_t K = shards.size();
  if (config.clients != K)
    throw ValidationError("config.clients does not match the shard count");
  const std::size_t m = config.clients_per_round();

  const double q = privacy.sampling_rate;
  const double sigma = *privacy.noise_multiplier;
  const FeamDerived derived =
      derive_feam_params(sigma, q, config.client_fraction, K, epochs);
  if (config.rounds != 0 && config.rounds != derived.rounds)
    throw ValidationError("feam_dp rounds are derived as round(epochs/q); leave rounds "
                          "unset or set it to the derived value");

  AccountantState one_step;
  if (sigma > 0.0) one_step = make_accountant(q, sigma, grid);

  AdamState adam = AdamState::fresh(params.size(), optimizer.beta1, optimizer.beta2,
                                    optimizer.tau);
  FederatedResult result;
  result.unequal_shards = detail::shards_unequal(shards);
  result.resolved_sigma = sigma;
  for (long long t = 1; t <= derived.rounds; ++t) {
    Rng select_rng = rng.child("select").child(static_cast<std::uint64_t>(t)).rng();
    const std::vector<std::size_t> sampled = sample_clients(K, m, select_rng);
    const std::vector<double> weights = detail::shard_weights(shards, sampled);

    std::vector<GradientVector> gradients;
    gradients.reserve(sampled.size());
    double loss = 0.0;
    double loss_weight = 0.0;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      const std::size_t k = sampled[i];
      const RngStream client_rng =
          rng.child("client").child(k).child("step").child(static_cast<std::uint64_t>(t));
      ClientUpdate update = feam_client_update_full(params, shape, derived.sigma_k,
                                                    privacy.clip_norm, derived.q_k,
                                                    shards[k].data, client_rng);
      if (update.batch_loss) {
        loss += weights[i] * *update.batch_loss;
        loss_weight += weights[i];
      }
      gradients.push_back(std::move(update.gradient));
    }
    const GradientVector aggregated = weighted_average(gradients, weights);
    params = detail::apply_update(optimizer.kind, adam, std::move(params), aggregated,
                                  optimizer.eta);

    RoundReport report;
    report.round = t;
    report.sampled = sampled;
    if (loss_weight > 0.0) report.loss = loss / loss_weight;
    report.epsilon_spent =
        sigma > 0.0 ? rdp_to_epsilon(compose(one_step, t), privacy.delta).epsilon
                    : std::numeric_limits<double>::infinity();
    if (evaluator) report.eval = evaluator(params);
    result.rounds.push_back(std::move(report));
    if (on_round) on_round(result.rounds.back(), params);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace dpfed
