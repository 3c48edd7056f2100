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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "dpfed/accountant.hpp"
#include "dpfed/corpus.hpp"
#include "dpfed/dp.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/model.hpp"
#include "dpfed/rng.hpp"

namespace {

dpfed::Corpus tiny_corpus(std::size_t n, std::uint64_t seed = 21) {
  dpfed::SyntheticSpec spec;
  spec.num_examples = n;
  spec.seq_len = 5;
  spec.feature_dim = 4;
  spec.entity_types = 1;
  spec.class_separation = 2.0;
  spec.label_persistence = 0.5;
  spec.seed = seed;
  return dpfed::generate_synthetic_corpus(spec);
}

dpfed::ModelShape shape_for(const dpfed::Corpus& corpus) {
  dpfed::ModelShape shape;
  shape.kind = dpfed::ModelKind::linear;
  shape.feature_dim = corpus.feature_dim;
  shape.num_labels = corpus.num_labels;
  return shape;
}

}  // namespace

TEST_CASE("privacy spec validation", "[dp]") {
  dpfed::PrivacySpec ok;
  ok.epsilon = 8.0;
  ok.sampling_rate = 0.5;
  ok.validate();

  auto bad = ok;
  bad.epsilon = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), dpfed::ValidationError);
  bad = ok;
  bad.delta = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), dpfed::ValidationError);
  bad = ok;
  bad.clip_norm = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), dpfed::ValidationError);
  bad = ok;
  bad.sampling_rate = 1.5;
  REQUIRE_THROWS_AS(bad.validate(), dpfed::ValidationError);
  bad = ok;
  bad.noise_multiplier = -0.1;
  REQUIRE_THROWS_AS(bad.validate(), dpfed::ValidationError);
}

TEST_CASE("poisson sampling edge rates", "[dp]") {
  dpfed::Rng rng = dpfed::RngStream(30).rng();
  REQUIRE(dpfed::poisson_sample(10, 0.0, rng).empty());
  const auto all = dpfed::poisson_sample(10, 1.0, rng);
  REQUIRE(all.size() == 10);
  for (std::size_t i = 0; i < all.size(); ++i) REQUIRE(all[i] == i);
  REQUIRE_THROWS_AS(dpfed::poisson_sample(10, -0.1, rng), dpfed::ValidationError);
  REQUIRE_THROWS_AS(dpfed::poisson_sample(10, 1.1, rng), dpfed::ValidationError);
}

TEST_CASE("poisson sampling hits the expected batch size", "[dp]") {
  dpfed::Rng rng = dpfed::RngStream(31).rng();
  const std::size_t n = 1000;
  const double q = 0.1;
  const int draws = 10000;
  double total = 0.0;
  for (int d = 0; d < draws; ++d) {
    const auto batch = dpfed::poisson_sample(n, q, rng);
    REQUIRE(std::is_sorted(batch.begin(), batch.end()));
    for (std::size_t idx : batch) REQUIRE(idx < n);
    total += static_cast<double>(batch.size());
  }
  const double mean = total / draws;
  REQUIRE(std::abs(mean - 100.0) < 1.0);
}

TEST_CASE("clipping projects onto the norm ball", "[dp]") {
  const std::vector<double> g = {3.0, 4.0};
  const auto clipped = dpfed::clip_gradient(g, 1.0);
  REQUIRE(std::abs(clipped[0] - 0.6) < 1e-12);
  REQUIRE(std::abs(clipped[1] - 0.8) < 1e-12);

  // Inside the ball the gradient passes through bit-for-bit.
  const std::vector<double> small = {0.1, -0.2, 0.05};
  REQUIRE(dpfed::clip_gradient(small, 1.0) == small);
  const std::vector<double> zero = {0.0, 0.0};
  REQUIRE(dpfed::clip_gradient(zero, 0.5) == zero);

  dpfed::Rng rng = dpfed::RngStream(32).rng();
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v = rng.gaussians(6);
    for (double& x : v) x *= 10.0;
    const double S = 0.05 + rng.uniform01();
    const auto c = dpfed::clip_gradient(v, S);
    REQUIRE(dpfed::l2_norm(c) <= S * (1.0 + 1e-12));
    // Direction is preserved: c is a nonnegative multiple of v.
    const double norm = dpfed::l2_norm(v);
    const double scale = norm > S ? S / norm : 1.0;
    for (std::size_t j = 0; j < v.size(); ++j)
      REQUIRE(std::abs(c[j] - scale * v[j]) < 1e-15 * std::abs(v[j]) + 1e-300);
  }
  REQUIRE_THROWS_AS(dpfed::clip_gradient(g, 0.0), dpfed::ValidationError);
}

TEST_CASE("noiseless privatized sum is the plain normalized sum", "[dp]") {
  std::vector<std::vector<double>> clipped = {
      {0.01, -0.02, 0.03}, {-0.04, 0.05, 0.0}, {0.02, 0.02, -0.01}};
  dpfed::Rng rng = dpfed::RngStream(33).rng();
  const auto out = dpfed::privatize_sum(clipped, 3, 0.0, 0.1, 6.4, rng);
  for (std::size_t j = 0; j < 3; ++j) {
    double sum = 0.0;
    for (const auto& g : clipped) sum += g[j];
    REQUIRE(out[j] == sum / 6.4);
  }
}

TEST_CASE("privatized sum rejects bad inputs", "[dp]") {
  dpfed::Rng rng = dpfed::RngStream(34).rng();
  std::vector<std::vector<double>> unclipped = {{3.0, 4.0}};
  REQUIRE_THROWS_AS(dpfed::privatize_sum(unclipped, 2, 1.0, 1.0, 4.0, rng),
                    dpfed::ContractError);
  std::vector<std::vector<double>> ragged = {{0.1, 0.0}, {0.1}};
  REQUIRE_THROWS_AS(dpfed::privatize_sum(ragged, 2, 1.0, 1.0, 4.0, rng),
                    dpfed::ValidationError);
  std::vector<std::vector<double>> fine = {{0.1, 0.0}};
  REQUIRE_THROWS_AS(dpfed::privatize_sum(fine, 2, 1.0, 1.0, 0.0, rng),
                    dpfed::ValidationError);
  REQUIRE_THROWS_AS(dpfed::privatize_sum(fine, 2, -1.0, 1.0, 4.0, rng),
                    dpfed::ValidationError);
}

TEST_CASE("empty batch yields pure noise at std sigma*S/B", "[dp]") {
  dpfed::Rng rng = dpfed::RngStream(35).rng();
  const double sigma = 1.0, S = 0.1, B = 64.0;
  const int draws = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int d = 0; d < draws; ++d) {
    const auto out = dpfed::privatize_sum({}, 1, sigma, S, B, rng);
    sum += out[0];
    sum_sq += out[0] * out[0];
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  const double expected_std = sigma * S / B;  // 1.5625e-3
  REQUIRE(std::abs(expected_std - 1.5625e-3) < 1e-18);
  REQUIRE(std::abs(std::sqrt(var) - expected_std) < 0.01 * expected_std);
}

TEST_CASE("privatized sum noise variance around fixed gradients", "[dp]") {
  const double sigma = 1.2, S = 0.1, B = 32.0;
  const std::size_t dim = 4;
  std::vector<std::vector<double>> clipped = {
      {0.05, -0.03, 0.01, 0.02}, {-0.02, 0.04, 0.03, -0.05}};
  std::vector<double> exact(dim);
  for (std::size_t j = 0; j < dim; ++j)
    exact[j] = (clipped[0][j] + clipped[1][j]) / B;

  dpfed::Rng rng = dpfed::RngStream(36).rng();
  const int draws = 100000;
  std::vector<double> sum(dim, 0.0), sum_sq(dim, 0.0);
  for (int d = 0; d < draws; ++d) {
    const auto out = dpfed::privatize_sum(clipped, dim, sigma, S, B, rng);
    for (std::size_t j = 0; j < dim; ++j) {
      sum[j] += out[j];
      sum_sq[j] += out[j] * out[j];
    }
  }
  const double target_var = (sigma * S / B) * (sigma * S / B);
  for (std::size_t j = 0; j < dim; ++j) {
    const double mean = sum[j] / draws;
    const double var = sum_sq[j] / draws - mean * mean;
    REQUIRE(std::abs(mean - exact[j]) < 3.0 * std::sqrt(target_var / draws));
    REQUIRE(std::abs(var - target_var) < 0.03 * target_var);
  }
}

TEST_CASE("sgd step", "[dp]") {
  const auto out = dpfed::sgd_update({1.0, 1.0}, {1.0, -1.0}, 0.5);
  REQUIRE(out[0] == 0.5);
  REQUIRE(out[1] == 1.5);
  REQUIRE_THROWS_AS(dpfed::sgd_update({1.0}, {1.0, 2.0}, 0.5), dpfed::ValidationError);

  // Linear in the gradient for a fixed starting point.
  const auto a = dpfed::sgd_update({2.0, -1.0}, {0.3, 0.7}, 0.1);
  const auto b = dpfed::sgd_update({2.0, -1.0}, {0.6, 1.4}, 0.05);
  REQUIRE(std::abs(a[0] - b[0]) < 1e-12);
  REQUIRE(std::abs(a[1] - b[1]) < 1e-12);
}

TEST_CASE("adam first step closed form", "[dp]") {
  auto state = dpfed::AdamState::fresh(1);
  auto [next, params] = dpfed::adam_update(std::move(state), {0.0}, {0.5}, 1e-3);
  // Bias correction makes the first step eta * g/(|g| + tau).
  const double expected = -1e-3 * 0.5 / (0.5 + 1e-8);
  REQUIRE(std::abs(params[0] - expected) < 1e-12);
  REQUIRE(std::abs(params[0] - (-9.99999980e-4)) < 1e-12);
  REQUIRE(next.t == 1);

  auto [after_zero, unchanged] = dpfed::adam_update(dpfed::AdamState::fresh(2),
                                                    {1.0, -2.0}, {0.0, 0.0}, 1e-3);
  REQUIRE(unchanged == std::vector<double>{1.0, -2.0});
  REQUIRE(after_zero.t == 1);

  REQUIRE_THROWS_AS(dpfed::adam_update(dpfed::AdamState::fresh(2), {1.0}, {1.0}, 1e-3),
                    dpfed::ValidationError);
}

TEST_CASE("adam walks downhill under a constant gradient", "[dp]") {
  auto state = dpfed::AdamState::fresh(1);
  std::vector<double> params = {1.0};
  double prev = params[0];
  for (int t = 0; t < 10; ++t) {
    auto [next, updated] = dpfed::adam_update(std::move(state), std::move(params),
                                              {0.3}, 1e-2);
    state = std::move(next);
    params = std::move(updated);
    REQUIRE(params[0] < prev);
    prev = params[0];
  }
  REQUIRE(state.t == 10);
}

TEST_CASE("dp_train with no noise and a huge clip norm matches plain full-batch adam",
          "[dp]") {
  const auto corpus = tiny_corpus(20);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(40));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 1.0;
  privacy.delta = 1e-3;
  privacy.clip_norm = 1e9;
  privacy.sampling_rate = 1.0;
  privacy.noise_multiplier = 0.0;

  dpfed::OptimizerParams opt;  // adam defaults
  const long long epochs = 10;

  const auto priv = dpfed::dp_train(corpus, shape, params, privacy, opt, epochs,
                                    dpfed::RngStream(41));
  const auto plain = dpfed::nonprivate_train(corpus, shape, params, opt, epochs,
                                             corpus.size(), dpfed::RngStream(42));
  REQUIRE(priv.steps.size() == 10);
  REQUIRE(priv.final_params.size() == plain.final_params.size());
  for (std::size_t j = 0; j < priv.final_params.size(); ++j)
    REQUIRE(std::abs(priv.final_params[j] - plain.final_params[j]) < 1e-9);
  for (const auto& rec : priv.steps) {
    REQUIRE(rec.batch_size == corpus.size());
    REQUIRE(std::isinf(rec.epsilon_spent));
  }
}

TEST_CASE("dp_train spends its budget monotonically and stays within it", "[dp]") {
  const auto corpus = tiny_corpus(40);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(43));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 8.0;
  privacy.delta = 1.0 / 40.0;
  privacy.sampling_rate = 0.5;
  const long long steps = 4;  // epochs / q
  privacy.noise_multiplier =
      dpfed::get_noise_multiplier(privacy.sampling_rate, privacy.epsilon,
                                  privacy.delta, steps);

  const auto history = dpfed::dp_train(corpus, shape, params, privacy, {}, 2,
                                       dpfed::RngStream(44));
  REQUIRE(history.steps.size() == static_cast<std::size_t>(steps));
  double prev = 0.0;
  for (const auto& rec : history.steps) {
    REQUIRE(rec.epsilon_spent >= prev);
    prev = rec.epsilon_spent;
  }
  REQUIRE(history.steps.back().epsilon_spent <= privacy.epsilon);
  const double expected =
      dpfed::get_privacy_spent(privacy.sampling_rate, *privacy.noise_multiplier,
                               steps, privacy.delta)
          .epsilon;
  REQUIRE(history.steps.back().epsilon_spent == expected);
}

TEST_CASE("dp_train is a pure function of its seed", "[dp]") {
  const auto corpus = tiny_corpus(16);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(45));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 8.0;
  privacy.delta = 1e-2;
  privacy.sampling_rate = 0.5;
  privacy.noise_multiplier = 1.1;

  const auto a = dpfed::dp_train(corpus, shape, params, privacy, {}, 2,
                                 dpfed::RngStream(46));
  const auto b = dpfed::dp_train(corpus, shape, params, privacy, {}, 2,
                                 dpfed::RngStream(46));
  const auto c = dpfed::dp_train(corpus, shape, params, privacy, {}, 2,
                                 dpfed::RngStream(47));
  REQUIRE(a.final_params == b.final_params);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    REQUIRE(a.steps[i].batch_size == b.steps[i].batch_size);
    REQUIRE(a.steps[i].loss == b.steps[i].loss);
  }
  REQUIRE(a.final_params != c.final_params);
}

TEST_CASE("empty batches still step and still spend", "[dp]") {
  const auto corpus = tiny_corpus(5);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(48));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 50.0;
  privacy.delta = 0.1;
  privacy.sampling_rate = 0.01;
  privacy.noise_multiplier = 1.0;

  const auto history = dpfed::dp_train(corpus, shape, params, privacy, {}, 1,
                                       dpfed::RngStream(49));
  REQUIRE(history.steps.size() == 100);

  std::size_t empty_steps = 0;
  double prev_eps = 0.0;
  for (const auto& rec : history.steps) {
    if (rec.batch_size == 0) {
      ++empty_steps;
      REQUIRE(!rec.loss.has_value());
    } else {
      REQUIRE(rec.loss.has_value());
    }
    REQUIRE(rec.epsilon_spent > prev_eps);
    prev_eps = rec.epsilon_spent;
  }
  // With q=0.01 and |D|=5, the overwhelming majority of batches are empty.
  REQUIRE(empty_steps > 80);
  // Pure-noise steps must still move the parameters.
  REQUIRE(history.final_params != params);
}

TEST_CASE("prior steps shift the accountant, not the trajectory", "[dp]") {
  const auto corpus = tiny_corpus(16);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(50));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 100.0;
  privacy.delta = 1e-2;
  privacy.sampling_rate = 0.5;
  privacy.noise_multiplier = 1.1;

  const auto fresh = dpfed::dp_train(corpus, shape, params, privacy, {}, 1,
                                     dpfed::RngStream(51));
  const auto shifted = dpfed::dp_train(corpus, shape, params, privacy, {}, 1,
                                       dpfed::RngStream(51), dpfed::OrderGrid::defaults(),
                                       {}, 10);
  REQUIRE(fresh.final_params == shifted.final_params);
  const long long steps = static_cast<long long>(fresh.steps.size());
  const double expected =
      dpfed::get_privacy_spent(0.5, 1.1, 10 + steps, 1e-2).epsilon;
  REQUIRE(shifted.steps.back().epsilon_spent == expected);
  REQUIRE(shifted.steps.back().epsilon_spent > fresh.steps.back().epsilon_spent);
}

TEST_CASE("dp_train validates its inputs", "[dp]") {
  const auto corpus = tiny_corpus(8);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(52));

  dpfed::PrivacySpec privacy;
  privacy.epsilon = 8.0;
  privacy.delta = 1e-2;
  privacy.sampling_rate = 0.5;

  // Unresolved noise multiplier.
  REQUIRE_THROWS_AS(
      dpfed::dp_train(corpus, shape, params, privacy, {}, 1, dpfed::RngStream(53)),
      dpfed::ValidationError);

  privacy.noise_multiplier = 1.0;
  auto no_delta = privacy;
  no_delta.delta = 0.0;
  REQUIRE_THROWS_AS(
      dpfed::dp_train(corpus, shape, params, no_delta, {}, 1, dpfed::RngStream(53)),
      dpfed::ValidationError);

  REQUIRE_THROWS_AS(
      dpfed::dp_train(dpfed::Corpus{}, shape, params, privacy, {}, 1,
                      dpfed::RngStream(53)),
      dpfed::ValidationError);
  REQUIRE_THROWS_AS(
      dpfed::dp_train(corpus, shape, params, privacy, {}, 0, dpfed::RngStream(53)),
      dpfed::ValidationError);
}

TEST_CASE("plain minibatch training is deterministic and validates", "[dp]") {
  const auto corpus = tiny_corpus(24);
  const auto shape = shape_for(corpus);
  const auto params = dpfed::init_params(shape, dpfed::RngStream(54));

  const auto a = dpfed::nonprivate_train(corpus, shape, params, {}, 3, 8,
                                         dpfed::RngStream(55));
  const auto b = dpfed::nonprivate_train(corpus, shape, params, {}, 3, 8,
                                         dpfed::RngStream(55));
  REQUIRE(a.final_params == b.final_params);
  REQUIRE(a.epochs.size() == 3);
  for (const auto& rec : a.epochs) REQUIRE(std::isfinite(rec.loss));

  // A batch size beyond the corpus degenerates to full-batch training.
  const auto full = dpfed::nonprivate_train(corpus, shape, params, {}, 1, 1000,
                                            dpfed::RngStream(56));
  REQUIRE(full.epochs.size() == 1);

  REQUIRE_THROWS_AS(
      dpfed::nonprivate_train(corpus, shape, params, {}, 0, 8, dpfed::RngStream(57)),
      dpfed::ValidationError);
  REQUIRE_THROWS_AS(
      dpfed::nonprivate_train(corpus, shape, params, {}, 1, 0, dpfed::RngStream(57)),
      dpfed::ValidationError);
}
