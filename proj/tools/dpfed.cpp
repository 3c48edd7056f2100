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

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpfed/dpfed.hpp"

namespace {

void print_run(const dpfed::RunResult& run) {
  std::cout << "run " << run.run_id << " -> " << run.dir << "\n";
  std::cout << "  steps: " << run.steps << "\n";
  if (run.final_loss) std::cout << "  final loss: " << *run.final_loss << "\n";
  if (run.final_f1) std::cout << "  final F1: " << *run.final_f1 << "\n";
  if (run.epsilon_spent) std::cout << "  epsilon spent: " << *run.epsilon_spent << "\n";
  if (run.sigma) std::cout << "  noise multiplier: " << *run.sigma << "\n";
}

int run_gen_data(const std::string& spec_path, const std::string& out_path) {
  std::ifstream in(spec_path);
  if (!in) throw dpfed::ValidationError("cannot open spec file: " + spec_path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw dpfed::ValidationError(spec_path + ": " + e.what());
  }
  const dpfed::SyntheticSpec spec = dpfed::parse_synthetic_spec(root);
  const dpfed::Corpus corpus = dpfed::generate_synthetic_corpus(spec);
  dpfed::write_corpus(out_path, corpus);
  std::cout << "wrote " << corpus.size() << " documents (d=" << corpus.feature_dim
            << ", labels=" << corpus.num_labels << ") to " << out_path << "\n";
  return 0;
}

dpfed::Mode require_mode(const dpfed::ExperimentConfig& config, bool federated,
                         const char* subcommand) {
  const bool is_federated = config.mode == dpfed::Mode::fedavg ||
                            config.mode == dpfed::Mode::fedavg_dp ||
                            config.mode == dpfed::Mode::feam_dp;
  if (is_federated != federated)
    throw dpfed::ValidationError(std::string("mode \"") + dpfed::to_string(config.mode) +
                                 "\" does not run under \"" + subcommand + "\"" +
                                 (federated ? " (use \"train\")" : " (use \"fl\")"));
  return config.mode;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private federated training on synthetic tagging corpora"};
  app.require_subcommand(1);

  // gen-data
  std::string spec_path, out_path;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus file");
  gen->add_option("spec", spec_path, "JSON generator spec")->required();
  gen->add_option("out", out_path, "output corpus path")->required();

  // calibrate
  double cal_q = 0.0, cal_eps = 0.0, cal_delta = 0.0;
  long long cal_steps = 0;
  CLI::App* cal = app.add_subcommand("calibrate",
                                     "Find the smallest noise multiplier for a budget");
  cal->add_option("--q", cal_q, "sampling rate")->required();
  cal->add_option("--epsilon", cal_eps, "target epsilon")->required();
  cal->add_option("--delta", cal_delta, "target delta")->required();
  cal->add_option("--steps", cal_steps, "number of composed steps")->required();

  // account
  double acc_q = 0.0, acc_sigma = 0.0, acc_delta = 0.0;
  long long acc_steps = 0;
  CLI::App* acc = app.add_subcommand("account", "Privacy spent after a number of steps");
  acc->add_option("--q", acc_q, "sampling rate")->required();
  acc->add_option("--sigma", acc_sigma, "noise multiplier")->required();
  acc->add_option("--steps", acc_steps, "number of composed steps")->required();
  acc->add_option("--delta", acc_delta, "target delta")->required();

  // train / fl
  std::string train_config, fl_config;
  CLI::App* train = app.add_subcommand("train", "Run a centralized experiment config");
  train->add_option("config", train_config, "experiment config file")->required();
  CLI::App* fl = app.add_subcommand("fl", "Run a federated experiment config");
  fl->add_option("config", fl_config, "experiment config file")->required();

  // sweep
  std::string sweep_config, sweep_axis;
  std::vector<double> sweep_values;
  std::vector<std::uint64_t> sweep_seeds;
  CLI::App* sweep = app.add_subcommand("sweep", "Run one config across an axis of values");
  sweep->add_option("config", sweep_config, "base experiment config file")->required();
  sweep->add_option("--axis", sweep_axis, "q, eta, S, sigma, epsilon, or K")->required();
  sweep->add_option("--values", sweep_values, "axis values")
      ->required()
      ->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds, "seeds (default: config seed)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(spec_path, out_path);

    if (cal->parsed()) {
      const double sigma = dpfed::get_noise_multiplier(cal_q, cal_eps, cal_delta, cal_steps);
      const dpfed::EpsilonReport spent =
          dpfed::get_privacy_spent(cal_q, sigma, cal_steps, cal_delta);
      std::cout << "noise multiplier: " << sigma << "\n";
      std::cout << "epsilon spent at that sigma: " << spent.epsilon << " (order "
                << spent.order << ")\n";
      return 0;
    }

    if (acc->parsed()) {
      if (acc_steps < 0) throw dpfed::ValidationError("steps must be >= 0");
      const dpfed::EpsilonReport spent =
          dpfed::get_privacy_spent(acc_q, acc_sigma, acc_steps, acc_delta);
      std::cout << "epsilon spent: " << spent.epsilon << " (order " << spent.order
                << ", delta " << acc_delta << ")\n";
      return 0;
    }

    if (train->parsed() || fl->parsed()) {
      const std::string& path = train->parsed() ? train_config : fl_config;
      const dpfed::ExperimentConfig config = dpfed::load_config(path);
      require_mode(config, fl->parsed(), fl->parsed() ? "fl" : "train");
      print_run(dpfed::run_experiment(config));
      return 0;
    }

    if (sweep->parsed()) {
      const dpfed::ExperimentConfig base = dpfed::load_config(sweep_config);
      const dpfed::SweepResult result =
          dpfed::run_sweep(base, sweep_axis, sweep_values, sweep_seeds);
      std::cout << "sweep " << sweep_axis << " -> " << result.dir << "\n";
      for (double value : sweep_values) {
        std::cout << "  " << sweep_axis << "=" << value << ": mean final F1 ";
        if (const auto mean = result.mean_f1(value))
          std::cout << *mean << "\n";
        else
          std::cout << "n/a\n";
      }
      return 0;
    }
  } catch (const dpfed::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
