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

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dpfed/accountant.hpp"
#include "dpfed/config.hpp"
#include "dpfed/corpus.hpp"
#include "dpfed/dp.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/federated.hpp"
#include "dpfed/metrics.hpp"
#include "dpfed/model.hpp"
#include "dpfed/rng.hpp"

namespace dpfed {

inline constexpr const char* kOutputRootEnvVar = "DPFED_OUTPUT_ROOT";

// Default root for run directories: $DPFED_OUTPUT_ROOT, else ./runs.
inline std::string default_output_root() {
  if (const char* env = std::getenv(kOutputRootEnvVar); env && *env) return env;
  return "runs";
}

struct RunResult {
  std::string run_id;
  std::string dir;
  std::string status;  // "ok" or "failed"
  long long steps = 0;
  std::optional<double> final_loss;
  std::optional<double> final_precision;
  std::optional<double> final_recall;
  std::optional<double> final_f1;
  std::optional<double> epsilon_spent;
  std::optional<double> sigma;
};

namespace detail {

// One metrics line per event, appended and flushed as the run progresses so
// a crash leaves a valid partial stream. Key order is fixed; wall_ms is the
// only nondeterministic field.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, std::string run_id)
      : out_(path, std::ios::trunc),
        run_id_(std::move(run_id)),
        start_(std::chrono::steady_clock::now()) {
    if (!out_) throw IoError("cannot open metrics file: " + path);
  }

  void write(long long step, const std::string& split, std::optional<double> loss,
             const std::optional<F1Result>& eval, std::optional<double> epsilon) {
    nlohmann::ordered_json rec;
    rec["run_id"] = run_id_;
    rec["step"] = step;
    rec["split"] = split;
    rec["loss"] = to_json(loss);
    rec["precision"] = eval ? to_json(eval->precision) : nlohmann::ordered_json();
    rec["recall"] = eval ? to_json(eval->recall) : nlohmann::ordered_json();
    rec["f1"] = eval ? to_json(eval->f1) : nlohmann::ordered_json();
    rec["epsilon_spent"] = to_json(epsilon);
    rec["wall_ms"] = elapsed_ms();
    out_ << rec.dump() << "\n";
    out_.flush();
  }

  long long elapsed_ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  static nlohmann::ordered_json to_json(std::optional<double> v) {
    // JSON has no infinity; a never-finite spend (sigma = 0) serializes null.
    if (!v || !std::isfinite(*v)) return nullptr;
    return *v;
  }

  std::ofstream out_;
  std::string run_id_;
  std::chrono::steady_clock::time_point start_;
};

struct ResolvedData {
  Corpus train;
  std::optional<Corpus> test;
};

inline ResolvedData resolve_data(const ExperimentConfig& config) {
  ResolvedData data;
  if (config.data.synthetic) {
    SyntheticSpec train_spec = *config.data.synthetic;
    const RngStream base = config.data.synthetic_seed_explicit
                               ? RngStream(train_spec.seed)
                               : RngStream(config.seed);
    if (!config.data.synthetic_seed_explicit)
      train_spec.seed = base.child("data").child("train").key();
    data.train = generate_synthetic_corpus(train_spec);

    std::size_t num_test = config.data.num_test;
    if (num_test == 0) num_test = std::max<std::size_t>(1, train_spec.num_examples / 4);
    SyntheticSpec test_spec = train_spec;
    test_spec.num_examples = num_test;
    test_spec.seed = base.child("data").child("test").key();
    data.test = generate_synthetic_corpus(test_spec);
  } else {
    data.train = read_corpus(*config.data.train_path);
    if (config.data.test_path) {
      data.test = read_corpus(*config.data.test_path);
      if (data.test->feature_dim != data.train.feature_dim ||
          data.test->num_labels != data.train.num_labels ||
          data.test->tag_names != data.train.tag_names)
        throw ValidationError("test corpus header does not match train corpus");
    }
  }
  return data;
}

inline std::string format_value(double v) { return nlohmann::json(v).dump(); }

}  // namespace detail

// Struct-level counterpart of the parse-time checks, for configs built in
// code rather than loaded from a file.
inline void validate_experiment_config(const ExperimentConfig& config) {
  if (config.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (config.name.empty()) throw ValidationError("config needs a nonempty name");
  if (config.data.synthetic) {
    config.data.synthetic->validate();
    if (config.data.train_path) throw ValidationError("data has both synthetic and train_path");
  } else if (!config.data.train_path) {
    throw ValidationError("data must have exactly one of synthetic or train_path");
  }
  config.optimizer.params.validate();
  if (config.optimizer.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (config.model.kind == ModelKind::mlp1 && config.model.hidden_dim < 1)
    throw ValidationError("model.hidden_dim must be >= 1");

  const bool wants_privacy = config.mode == Mode::dp || config.mode == Mode::fedavg_dp ||
                             config.mode == Mode::feam_dp;
  const bool wants_federation = config.mode == Mode::fedavg ||
                                config.mode == Mode::fedavg_dp ||
                                config.mode == Mode::feam_dp;
  if (config.privacy.has_value() != wants_privacy)
    throw ValidationError(wants_privacy
                              ? "mode \"" + to_string(config.mode) + "\" requires a privacy section"
                              : "mode \"" + to_string(config.mode) + "\" does not use a privacy section");
  if (config.federation.has_value() != wants_federation)
    throw ValidationError(
        wants_federation
            ? "mode \"" + to_string(config.mode) + "\" requires a federation section"
            : "mode \"" + to_string(config.mode) + "\" does not use a federation section");
  if (config.privacy) config.privacy->validate();
  if (config.federation) {
    if (config.federation->clients < 1) throw ValidationError("clients must be >= 1");
    config.federation->clients_per_round();
    if (config.federation->clients == 2 && config.federation->client_fraction != 1.0)
      throw ValidationError("client_fraction must be 1 when clients = 2");
    if (config.federation->local_epochs < 1)
      throw ValidationError("local_epochs must be >= 1");
  }
  if (config.mode == Mode::feam_dp &&
      config.privacy->sampling_rate > config.federation->client_fraction)
    throw ValidationError("q must not exceed C");
}

inline std::string run_id_for(const ExperimentConfig& config) {
  return config.name + "-seed" + std::to_string(config.seed);
}

// Runs one experiment end to end: resolve data and privacy parameters, write
// the resolved config snapshot, stream one metrics line per training event
// plus one per evaluation, and finish with summary.json. On error the
// partial stream stays on disk next to a FAILED marker and a failed summary.
inline RunResult run_experiment(const ExperimentConfig& config) {
  validate_experiment_config(config);

  const std::string run_id = run_id_for(config);
  const std::filesystem::path dir =
      std::filesystem::path(config.output_dir ? *config.output_dir : default_output_root()) /
      run_id;
  std::filesystem::create_directories(dir);

  RunResult result;
  result.run_id = run_id;
  result.dir = dir.string();
  result.status = "ok";

  detail::MetricsWriter metrics((dir / "metrics.jsonl").string(), run_id);
  const auto write_summary = [&](const std::string& error) {
    nlohmann::ordered_json summary;
    summary["run_id"] = run_id;
    summary["status"] = result.status;
    summary["mode"] = to_string(config.mode);
    if (!error.empty()) summary["error"] = error;
    summary["steps"] = result.steps;
    auto put = [&summary](const char* key, const std::optional<double>& v) {
      if (v && std::isfinite(*v))
        summary[key] = *v;
      else
        summary[key] = nullptr;
    };
    put("final_loss", result.final_loss);
    put("final_precision", result.final_precision);
    put("final_recall", result.final_recall);
    put("final_f1", result.final_f1);
    put("epsilon_spent", result.epsilon_spent);
    put("noise_multiplier", result.sigma);
    summary["wall_ms"] = metrics.elapsed_ms();
    std::ofstream out(dir / "summary.json", std::ios::trunc);
    out << summary.dump(2) << "\n";
  };

  try {
    const detail::ResolvedData data = detail::resolve_data(config);

    ModelShape shape;
    shape.kind = config.model.kind;
    shape.feature_dim = data.train.feature_dim;
    shape.hidden_dim = config.model.hidden_dim;
    shape.num_labels = data.train.num_labels;
    shape.validate();

    const RngStream root(config.seed);
    ParameterVector params = init_params(shape, root.child("init"));

    // Resolve the privacy parameters the trainers need up front, so the
    // config snapshot records them.
    ExperimentConfig resolved = config;
    if (resolved.privacy) {
      if (resolved.privacy->delta == 0.0)
        resolved.privacy->delta = 1.0 / static_cast<double>(data.train.size());
      const double q = resolved.privacy->sampling_rate;
      if (!resolved.privacy->noise_multiplier && config.mode != Mode::fedavg_dp) {
        const long long steps =
            std::llround(static_cast<double>(resolved.epochs) / q);
        resolved.privacy->noise_multiplier = get_noise_multiplier(
            q, resolved.privacy->epsilon, resolved.privacy->delta, steps);
      }
      result.sigma = resolved.privacy->noise_multiplier;
    }
    if (resolved.federation && resolved.federation->rounds == 0 &&
        resolved.federation->protocol != Protocol::feam_dp) {
      resolved.federation->rounds = std::llround(static_cast<double>(resolved.epochs) /
                                                 resolved.federation->client_fraction);
    }

    {
      nlohmann::ordered_json snapshot = serialize_config(resolved);
      snapshot.erase("output_dir");  // semantics only; location is implicit
      std::ofstream out(dir / "config.json", std::ios::trunc);
      if (!out) throw ValidationError("cannot write config snapshot");
      out << snapshot.dump(2) << "\n";
    }

    const auto evaluate = [&](const ParameterVector& p) -> std::pair<F1Result, double> {
      std::vector<std::vector<int>> predictions, references;
      predictions.reserve(data.test->size());
      references.reserve(data.test->size());
      double loss_sum = 0.0;
      for (const TaggedExample& ex : data.test->examples) {
        predictions.push_back(predict_tags(p, shape, ex));
        references.push_back(ex.labels);
        loss_sum += forward_loss(p, shape, ex).loss;
      }
      return {entity_f1(predictions, references, data.test->tag_names),
              loss_sum / static_cast<double>(data.test->size())};
    };
    const bool can_eval = data.test.has_value();

    const auto record_eval = [&](long long step, std::optional<double> epsilon,
                                 const ParameterVector& p) {
      if (!can_eval) return;
      auto [f1, test_loss] = evaluate(p);
      metrics.write(step, "test", test_loss, f1, epsilon);
      result.final_precision = f1.precision;
      result.final_recall = f1.recall;
      result.final_f1 = f1.f1;
    };

    switch (config.mode) {
      case Mode::nonprivate: {
        nonprivate_train(
            data.train, shape, std::move(params), resolved.optimizer.params,
            resolved.epochs, resolved.optimizer.batch_size, root.child("train"),
            [&](const EpochRecord& rec, const ParameterVector& p) {
              metrics.write(rec.epoch, "train", rec.loss, std::nullopt, std::nullopt);
              record_eval(rec.epoch, std::nullopt, p);
              result.steps = rec.epoch;
              result.final_loss = rec.loss;
            });
        break;
      }
      case Mode::dp: {
        const double q = resolved.privacy->sampling_rate;
        const long long total_steps =
            std::llround(static_cast<double>(resolved.epochs) / q);
        const long long eval_every =
            std::max<long long>(1, std::llround(1.0 / q));
        dp_train(
            data.train, shape, std::move(params), *resolved.privacy,
            resolved.optimizer.params, resolved.epochs, root.child("train"),
            OrderGrid::defaults(),
            [&](const StepRecord& rec, const ParameterVector& p) {
              metrics.write(rec.step, "train", rec.loss, std::nullopt, rec.epsilon_spent);
              if (rec.step % eval_every == 0 || rec.step == total_steps)
                record_eval(rec.step, rec.epsilon_spent, p);
              result.steps = rec.step;
              if (rec.loss) result.final_loss = rec.loss;
              result.epsilon_spent = rec.epsilon_spent;
            });
        break;
      }
      default: {
        std::vector<ClientShard> shards = make_client_shards(partition_corpus(
            data.train, resolved.federation->clients,
            root.child("partition").key()));
        const RngStream fl_rng = root.child("fl");
        const auto on_round = [&](const RoundReport& report, const ParameterVector& p) {
          metrics.write(report.round, "train", report.loss, std::nullopt,
                        report.epsilon_spent);
          record_eval(report.round, report.epsilon_spent, p);
          result.steps = report.round;
          if (report.loss) result.final_loss = report.loss;
          result.epsilon_spent = report.epsilon_spent;
        };
        FederatedResult fed;
        if (config.mode == Mode::fedavg) {
          fed = fedavg_train(shards, shape, std::move(params), resolved.optimizer.params,
                             *resolved.federation, resolved.optimizer.batch_size, fl_rng,
                             {}, on_round);
        } else if (config.mode == Mode::fedavg_dp) {
          fed = fedavg_dp_train(shards, shape, std::move(params), *resolved.privacy,
                                resolved.optimizer.params, *resolved.federation, fl_rng,
                                OrderGrid::defaults(), {}, on_round);
        } else {
          fed = feam_dp_train(shards, shape, std::move(params), *resolved.privacy,
                              resolved.optimizer.params, *resolved.federation,
                              resolved.epochs, fl_rng, OrderGrid::defaults(), {}, on_round);
        }
        if (fed.resolved_sigma) result.sigma = fed.resolved_sigma;
        break;
      }
    }
    write_summary("");
  } catch (const std::exception& e) {
    result.status = "failed";
    write_summary(e.what());
    std::ofstream marker(dir / "FAILED", std::ios::trunc);
    marker << e.what() << "\n";
    throw;
  }
  return result;
}

// --- sweeps ----------------------------------------------------------------

inline ExperimentConfig apply_sweep_axis(ExperimentConfig config, const std::string& axis,
                                         double value) {
  const auto need_privacy = [&]() -> PrivacySpec& {
    if (!config.privacy)
      throw ValidationError("axis \"" + axis + "\" requires a privacy section");
    return *config.privacy;
  };
  if (axis == "q") {
    need_privacy().sampling_rate = value;
    if (config.federation) config.federation->rounds = 0;  // re-derive
  } else if (axis == "eta") {
    config.optimizer.params.eta = value;
  } else if (axis == "S") {
    need_privacy().clip_norm = value;
  } else if (axis == "sigma") {
    need_privacy().noise_multiplier = value;
  } else if (axis == "epsilon") {
    need_privacy().epsilon = value;
  } else if (axis == "K") {
    if (!config.federation)
      throw ValidationError("axis \"K\" requires a federation section");
    const double rounded = std::round(value);
    if (std::abs(value - rounded) > 1e-9 || rounded < 1.0)
      throw ValidationError("axis \"K\" needs positive integer values");
    config.federation->clients = static_cast<std::size_t>(rounded);
    // K=2 pins C=1; other K keep the configured fraction.
    if (config.federation->clients == 2) config.federation->client_fraction = 1.0;
    config.federation->rounds = 0;  // re-derive from the new K/C
  } else {
    throw ValidationError("unknown sweep axis: " + axis +
                          " (expected one of q, eta, S, sigma, epsilon, K)");
  }
  return config;
}

struct SweepRun {
  double value = 0.0;
  std::uint64_t seed = 0;
  RunResult run;
};

struct SweepResult {
  std::string dir;
  std::vector<SweepRun> runs;

  // Mean final F1 across seeds for one axis value.
  std::optional<double> mean_f1(double value) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const SweepRun& r : runs)
      if (r.value == value && r.run.final_f1) {
        sum += *r.run.final_f1;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

// One run per (value, seed), all derived from the same base config so the
// sweep is a paired experiment. Results land under
// <root>/sweep-<name>-<axis>/<axis>=<value>/<run_id>/ and a joint
// sweep_summary.json is written at the sweep root.
inline SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis,
                             const std::vector<double>& values,
                             std::vector<std::uint64_t> seeds = {}) {
  if (values.empty()) throw ValidationError("sweep needs at least one value");
  if (seeds.empty()) seeds.push_back(base.seed);

  const std::filesystem::path root =
      std::filesystem::path(base.output_dir ? *base.output_dir : default_output_root()) /
      ("sweep-" + base.name + "-" + axis);
  std::filesystem::create_directories(root);

  SweepResult result;
  result.dir = root.string();
  for (double value : values) {
    ExperimentConfig derived = apply_sweep_axis(base, axis, value);
    derived.output_dir = (root / (axis + "=" + detail::format_value(value))).string();
    for (std::uint64_t seed : seeds) {
      derived.seed = seed;
      SweepRun run;
      run.value = value;
      run.seed = seed;
      run.run = run_experiment(derived);
      result.runs.push_back(std::move(run));
    }
  }

  nlohmann::ordered_json summary;
  summary["axis"] = axis;
  summary["values"] = values;
  summary["seeds"] = seeds;
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const SweepRun& r : result.runs) {
    nlohmann::ordered_json row;
    row["value"] = r.value;
    row["seed"] = r.seed;
    row["run_id"] = r.run.run_id;
    row["dir"] = r.run.dir;
    row["final_f1"] = r.run.final_f1 ? nlohmann::ordered_json(*r.run.final_f1)
                                     : nlohmann::ordered_json();
    row["epsilon_spent"] =
        r.run.epsilon_spent && std::isfinite(*r.run.epsilon_spent)
            ? nlohmann::ordered_json(*r.run.epsilon_spent)
            : nlohmann::ordered_json();
    runs.push_back(row);
  }
  summary["runs"] = runs;
  nlohmann::ordered_json means = nlohmann::ordered_json::array();
  for (double value : values) {
    nlohmann::ordered_json row;
    row["value"] = value;
    const std::optional<double> mean = result.mean_f1(value);
    row["mean_final_f1"] = mean ? nlohmann::ordered_json(*mean) : nlohmann::ordered_json();
    means.push_back(row);
  }
  summary["mean_final_f1_by_value"] = means;
  std::ofstream out(root / "sweep_summary.json", std::ios::trunc);
  out << summary.dump(2) << "\n";
  return result;
}

}  // namespace dpfed
