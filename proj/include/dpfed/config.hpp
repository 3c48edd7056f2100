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

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpfed/corpus.hpp"
#include "dpfed/dp.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/federated.hpp"
#include "dpfed/model.hpp"

namespace dpfed {

enum class Mode { nonprivate, dp, fedavg, fedavg_dp, feam_dp };

inline std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::nonprivate: return "nonprivate";
    case Mode::dp: return "dp";
    case Mode::fedavg: return "fedavg";
    case Mode::fedavg_dp: return "fedavg_dp";
    default: return "feam_dp";
  }
}

inline Mode parse_mode(const std::string& s) {
  if (s == "nonprivate") return Mode::nonprivate;
  if (s == "dp") return Mode::dp;
  if (s == "fedavg") return Mode::fedavg;
  if (s == "fedavg_dp") return Mode::fedavg_dp;
  if (s == "feam_dp") return Mode::feam_dp;
  throw ValidationError("unknown mode: " + s);
}

// Where the corpus comes from: a generator recipe or files on disk. The
// synthetic seed is normally derived from the master seed; an explicit
// "seed" in the block pins it instead.
struct DataConfig {
  std::optional<SyntheticSpec> synthetic;
  bool synthetic_seed_explicit = false;
  std::size_t num_test = 0;  // synthetic only; 0 derives num_examples/4
  std::optional<std::string> train_path;
  std::optional<std::string> test_path;

  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  ModelKind kind = ModelKind::linear;
  std::size_t hidden_dim = 16;  // mlp1 only

  bool operator==(const ModelConfig&) const = default;
};

struct OptimizerConfig {
  OptimizerParams params;
  std::size_t batch_size = 32;  // nonprivate / fedavg local minibatches

  bool operator==(const OptimizerConfig&) const = default;
};

struct ExperimentConfig {
  std::string name;
  Mode mode = Mode::nonprivate;
  std::uint64_t seed = 1;
  long long epochs = 0;
  std::optional<std::string> output_dir;
  DataConfig data;
  ModelConfig model;
  OptimizerConfig optimizer;
  std::optional<PrivacySpec> privacy;        // dp, fedavg_dp, feam_dp
  std::optional<FederationConfig> federation;  // fedavg, fedavg_dp, feam_dp

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& section,
                                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* key : allowed)
      if (it.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw ValidationError("unknown key \"" + it.key() + "\" in " + section);
  }
}

template <typename T>
T get_field(const nlohmann::json& obj, const std::string& section, const char* key) {
  if (!obj.contains(key))
    throw ValidationError(section + " is missing required key \"" + key + "\"");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(section + "." + key + " has the wrong type");
  }
}

template <typename T>
T get_field_or(const nlohmann::json& obj, const std::string& section, const char* key,
               T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(section + "." + key + " has the wrong type");
  }
}

inline void require_object(const nlohmann::json& value, const std::string& section) {
  if (!value.is_object()) throw ValidationError(section + " must be an object");
}

}  // namespace detail

inline SyntheticSpec parse_synthetic_spec(const nlohmann::json& obj,
                                          bool* seed_explicit = nullptr,
                                          std::size_t* num_test = nullptr) {
  detail::require_object(obj, "data.synthetic");
  detail::reject_unknown_keys(obj, "data.synthetic",
                              {"num_examples", "seq_len", "feature_dim", "entity_types",
                               "class_separation", "label_persistence", "seed", "num_test"});
  SyntheticSpec spec;
  spec.num_examples = detail::get_field<std::size_t>(obj, "data.synthetic", "num_examples");
  spec.seq_len = detail::get_field<std::size_t>(obj, "data.synthetic", "seq_len");
  spec.feature_dim = detail::get_field<std::size_t>(obj, "data.synthetic", "feature_dim");
  spec.entity_types = detail::get_field<std::size_t>(obj, "data.synthetic", "entity_types");
  spec.class_separation =
      detail::get_field<double>(obj, "data.synthetic", "class_separation");
  spec.label_persistence =
      detail::get_field<double>(obj, "data.synthetic", "label_persistence");
  if (obj.contains("seed")) {
    spec.seed = detail::get_field<std::uint64_t>(obj, "data.synthetic", "seed");
    if (seed_explicit) *seed_explicit = true;
  } else if (seed_explicit) {
    *seed_explicit = false;
  }
  if (num_test)
    *num_test = detail::get_field_or<std::size_t>(obj, "data.synthetic", "num_test", 0);
  else if (obj.contains("num_test"))
    throw ValidationError("data.synthetic.num_test is not valid here");
  spec.validate();
  return spec;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& root) {
  detail::require_object(root, "config");
  detail::reject_unknown_keys(root, "config",
                              {"name", "mode", "seed", "epochs", "output_dir", "data",
                               "model", "optimizer", "privacy", "federation"});

  ExperimentConfig config;
  config.mode = parse_mode(detail::get_field<std::string>(root, "config", "mode"));
  config.name = detail::get_field_or<std::string>(root, "config", "name",
                                                  to_string(config.mode));
  if (config.name.empty() ||
      config.name.find_first_of("/\\ \t\n") != std::string::npos)
    throw ValidationError("name must be nonempty with no spaces or path separators");
  config.seed = detail::get_field_or<std::uint64_t>(root, "config", "seed", 1);
  config.epochs = detail::get_field<long long>(root, "config", "epochs");
  if (config.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (root.contains("output_dir"))
    config.output_dir = detail::get_field<std::string>(root, "config", "output_dir");

  // data
  if (!root.contains("data")) throw ValidationError("config is missing required key \"data\"");
  const nlohmann::json& data = root.at("data");
  detail::require_object(data, "data");
  detail::reject_unknown_keys(data, "data", {"synthetic", "train_path", "test_path"});
  if (data.contains("synthetic") == data.contains("train_path"))
    throw ValidationError("data must have exactly one of \"synthetic\" or \"train_path\"");
  if (data.contains("synthetic")) {
    config.data.synthetic = parse_synthetic_spec(
        data.at("synthetic"), &config.data.synthetic_seed_explicit, &config.data.num_test);
    if (data.contains("test_path"))
      throw ValidationError("data.test_path requires data.train_path");
  } else {
    config.data.train_path = detail::get_field<std::string>(data, "data", "train_path");
    if (data.contains("test_path"))
      config.data.test_path = detail::get_field<std::string>(data, "data", "test_path");
  }

  // model
  if (!root.contains("model"))
    throw ValidationError("config is missing required key \"model\"");
  const nlohmann::json& model = root.at("model");
  detail::require_object(model, "model");
  detail::reject_unknown_keys(model, "model", {"kind", "hidden_dim"});
  const std::string kind = detail::get_field<std::string>(model, "model", "kind");
  if (kind == "linear") {
    config.model.kind = ModelKind::linear;
    if (model.contains("hidden_dim"))
      throw ValidationError("model.hidden_dim only applies to kind \"mlp1\"");
  } else if (kind == "mlp1") {
    config.model.kind = ModelKind::mlp1;
    config.model.hidden_dim =
        detail::get_field_or<std::size_t>(model, "model", "hidden_dim", 16);
    if (config.model.hidden_dim < 1)
      throw ValidationError("model.hidden_dim must be >= 1");
  } else {
    throw ValidationError("model.kind must be \"linear\" or \"mlp1\"");
  }

  // optimizer (entirely optional; every field has a default)
  if (root.contains("optimizer")) {
    const nlohmann::json& opt = root.at("optimizer");
    detail::require_object(opt, "optimizer");
    detail::reject_unknown_keys(opt, "optimizer",
                                {"kind", "eta", "beta1", "beta2", "tau", "batch_size"});
    const std::string okind =
        detail::get_field_or<std::string>(opt, "optimizer", "kind", "adam");
    if (okind == "sgd")
      config.optimizer.params.kind = OptimizerKind::sgd;
    else if (okind == "adam")
      config.optimizer.params.kind = OptimizerKind::adam;
    else
      throw ValidationError("optimizer.kind must be \"sgd\" or \"adam\"");
    config.optimizer.params.eta =
        detail::get_field_or<double>(opt, "optimizer", "eta", 1e-3);
    config.optimizer.params.beta1 =
        detail::get_field_or<double>(opt, "optimizer", "beta1", 0.9);
    config.optimizer.params.beta2 =
        detail::get_field_or<double>(opt, "optimizer", "beta2", 0.999);
    config.optimizer.params.tau =
        detail::get_field_or<double>(opt, "optimizer", "tau", 1e-8);
    config.optimizer.batch_size =
        detail::get_field_or<std::size_t>(opt, "optimizer", "batch_size", 32);
  }
  config.optimizer.params.validate();
  if (config.optimizer.batch_size < 1)
    throw ValidationError("optimizer.batch_size must be >= 1");

  const bool wants_privacy = config.mode == Mode::dp || config.mode == Mode::fedavg_dp ||
                             config.mode == Mode::feam_dp;
  const bool wants_federation = config.mode == Mode::fedavg ||
                                config.mode == Mode::fedavg_dp ||
                                config.mode == Mode::feam_dp;

  // privacy
  if (root.contains("privacy") != wants_privacy) {
    throw ValidationError(wants_privacy
                              ? "mode \"" + to_string(config.mode) + "\" requires a privacy section"
                              : "mode \"" + to_string(config.mode) + "\" does not use a privacy section");
  }
  if (wants_privacy) {
    const nlohmann::json& priv = root.at("privacy");
    detail::require_object(priv, "privacy");
    detail::reject_unknown_keys(
        priv, "privacy",
        {"epsilon", "delta", "clip_norm", "sampling_rate", "noise_multiplier"});
    PrivacySpec spec;
    spec.epsilon = detail::get_field<double>(priv, "privacy", "epsilon");
    spec.delta = detail::get_field_or<double>(priv, "privacy", "delta", 0.0);
    spec.clip_norm = detail::get_field_or<double>(priv, "privacy", "clip_norm", 0.1);
    spec.sampling_rate = detail::get_field<double>(priv, "privacy", "sampling_rate");
    if (priv.contains("noise_multiplier"))
      spec.noise_multiplier =
          detail::get_field<double>(priv, "privacy", "noise_multiplier");
    spec.validate();
    config.privacy = spec;
  }

  // federation
  if (root.contains("federation") != wants_federation) {
    throw ValidationError(
        wants_federation
            ? "mode \"" + to_string(config.mode) + "\" requires a federation section"
            : "mode \"" + to_string(config.mode) + "\" does not use a federation section");
  }
  if (wants_federation) {
    const nlohmann::json& fed = root.at("federation");
    detail::require_object(fed, "federation");
    detail::reject_unknown_keys(fed, "federation",
                                {"clients", "client_fraction", "rounds", "local_epochs"});
    FederationConfig fc;
    fc.clients = detail::get_field<std::size_t>(fed, "federation", "clients");
    if (fc.clients < 1) throw ValidationError("federation.clients must be >= 1");
    // Default sampling fraction follows the K=2 -> C=1, K>2 -> C=0.5 convention.
    fc.client_fraction = detail::get_field_or<double>(
        fed, "federation", "client_fraction", fc.clients <= 2 ? 1.0 : 0.5);
    fc.rounds = detail::get_field_or<long long>(fed, "federation", "rounds", 0);
    fc.local_epochs = detail::get_field_or<long long>(fed, "federation", "local_epochs", 1);
    switch (config.mode) {
      case Mode::fedavg: fc.protocol = Protocol::fedavg; break;
      case Mode::fedavg_dp: fc.protocol = Protocol::fedavg_dp; break;
      default: fc.protocol = Protocol::feam_dp; break;
    }
    if (!(fc.client_fraction > 0.0 && fc.client_fraction <= 1.0))
      throw ValidationError("federation.client_fraction must be in (0, 1]");
    fc.clients_per_round();  // integrality check
    if (fc.clients == 2 && fc.client_fraction != 1.0)
      throw ValidationError("client_fraction must be 1 when clients = 2");
    if (fc.rounds < 0) throw ValidationError("federation.rounds must be >= 0");
    if (fc.local_epochs < 1)
      throw ValidationError("federation.local_epochs must be >= 1");
    config.federation = fc;
  }

  // cross-field rules
  if (config.mode == Mode::feam_dp &&
      config.privacy->sampling_rate > config.federation->client_fraction)
    throw ValidationError("q must not exceed C");

  return config;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return parse_experiment_config(root);
}

inline nlohmann::ordered_json serialize_synthetic_spec(const SyntheticSpec& spec,
                                                       bool include_seed,
                                                       std::size_t num_test) {
  nlohmann::ordered_json obj;
  obj["num_examples"] = spec.num_examples;
  obj["seq_len"] = spec.seq_len;
  obj["feature_dim"] = spec.feature_dim;
  obj["entity_types"] = spec.entity_types;
  obj["class_separation"] = spec.class_separation;
  obj["label_persistence"] = spec.label_persistence;
  if (include_seed) obj["seed"] = spec.seed;
  if (num_test > 0) obj["num_test"] = num_test;
  return obj;
}

// Inverse of parse_experiment_config on defaulted configs:
// parse(serialize(c)) == c.
inline nlohmann::ordered_json serialize_config(const ExperimentConfig& config) {
  nlohmann::ordered_json root;
  root["name"] = config.name;
  root["mode"] = to_string(config.mode);
  root["seed"] = config.seed;
  root["epochs"] = config.epochs;
  if (config.output_dir) root["output_dir"] = *config.output_dir;

  nlohmann::ordered_json data;
  if (config.data.synthetic) {
    data["synthetic"] = serialize_synthetic_spec(*config.data.synthetic,
                                                 config.data.synthetic_seed_explicit,
                                                 config.data.num_test);
  } else {
    data["train_path"] = *config.data.train_path;
    if (config.data.test_path) data["test_path"] = *config.data.test_path;
  }
  root["data"] = data;

  nlohmann::ordered_json model;
  model["kind"] = to_string(config.model.kind);
  if (config.model.kind == ModelKind::mlp1) model["hidden_dim"] = config.model.hidden_dim;
  root["model"] = model;

  nlohmann::ordered_json opt;
  opt["kind"] = to_string(config.optimizer.params.kind);
  opt["eta"] = config.optimizer.params.eta;
  opt["beta1"] = config.optimizer.params.beta1;
  opt["beta2"] = config.optimizer.params.beta2;
  opt["tau"] = config.optimizer.params.tau;
  opt["batch_size"] = config.optimizer.batch_size;
  root["optimizer"] = opt;

  if (config.privacy) {
    nlohmann::ordered_json priv;
    priv["epsilon"] = config.privacy->epsilon;
    if (config.privacy->delta != 0.0) priv["delta"] = config.privacy->delta;
    priv["clip_norm"] = config.privacy->clip_norm;
    priv["sampling_rate"] = config.privacy->sampling_rate;
    if (config.privacy->noise_multiplier)
      priv["noise_multiplier"] = *config.privacy->noise_multiplier;
    root["privacy"] = priv;
  }

  if (config.federation) {
    nlohmann::ordered_json fed;
    fed["clients"] = config.federation->clients;
    fed["client_fraction"] = config.federation->client_fraction;
    if (config.federation->rounds != 0) fed["rounds"] = config.federation->rounds;
    fed["local_epochs"] = config.federation->local_epochs;
    root["federation"] = fed;
  }
  return root;
}

}  // namespace dpfed
