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
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpfed/errors.hpp"
#include "dpfed/rng.hpp"

namespace dpfed {

// One token-tagged document: features[t] is the d-dimensional vector for
// token t, labels[t] its BIO tag id. Tag id 0 is always "O".
struct TaggedExample {
  std::vector<std::vector<double>> features;
  std::vector<int> labels;

  std::size_t length() const { return labels.size(); }
};

// Recipe for a synthetic tagging corpus. Corpora are a pure function of this
// struct, seed included.
struct SyntheticSpec {
  std::size_t num_examples = 0;
  std::size_t seq_len = 0;
  std::size_t feature_dim = 0;
  std::size_t entity_types = 0;
  double class_separation = 0.0;  // distance between class-conditional means
  double label_persistence = 0.0; // P(next token keeps the current entity)
  std::uint64_t seed = 0;

  std::size_t num_labels() const { return 2 * entity_types + 1; }

  void validate() const {
    if (num_examples < 1) throw ValidationError("num_examples must be >= 1");
    if (seq_len < 1) throw ValidationError("seq_len must be >= 1");
    if (feature_dim < 1) throw ValidationError("feature_dim must be >= 1");
    if (entity_types < 1) throw ValidationError("entity_types must be >= 1");
    if (!(class_separation >= 0.0) || !std::isfinite(class_separation))
      throw ValidationError("class_separation must be finite and >= 0");
    if (!(label_persistence >= 0.0 && label_persistence <= 1.0))
      throw ValidationError("label_persistence must be in [0, 1]");
  }

  bool operator==(const SyntheticSpec&) const = default;
};

struct Corpus {
  std::vector<TaggedExample> examples;
  std::size_t feature_dim = 0;
  std::size_t num_labels = 0;
  std::vector<std::string> tag_names;
  std::optional<SyntheticSpec> generator_spec;  // absent for loaded files

  std::size_t size() const { return examples.size(); }
};

// Canonical BIO tag list for a synthetic corpus: O, then B-/I- pairs per
// entity type, so B-Ek = 2k+1 and I-Ek = 2k+2.
inline std::vector<std::string> synthetic_tag_names(std::size_t entity_types) {
  std::vector<std::string> names;
  names.reserve(2 * entity_types + 1);
  names.push_back("O");
  for (std::size_t k = 0; k < entity_types; ++k) {
    names.push_back("B-E" + std::to_string(k));
    names.push_back("I-E" + std::to_string(k));
  }
  return names;
}

namespace detail {

// Class-conditional feature means. Class 0 is "O", class 1+s is entity type
// s. When the feature space has room (d > entity_types) each class sits on
// its own scaled basis vector, making all pairwise mean distances exactly
// class_separation. Otherwise the means fall back to collinear multiples of
// e_0, which keeps every pairwise distance at least class_separation.
inline std::vector<std::vector<double>> class_means(const SyntheticSpec& spec) {
  const std::size_t num_classes = spec.entity_types + 1;
  std::vector<std::vector<double>> means(num_classes,
                                         std::vector<double>(spec.feature_dim, 0.0));
  if (spec.feature_dim >= num_classes) {
    const double scale = spec.class_separation / std::sqrt(2.0);
    for (std::size_t c = 0; c < num_classes; ++c) means[c][c] = scale;
  } else {
    for (std::size_t c = 0; c < num_classes; ++c)
      means[c][0] = spec.class_separation * static_cast<double>(c);
  }
  return means;
}

}  // namespace detail

// Labels follow a Markov chain over {O, E0, .., E(ne-1)}: the initial state
// is uniform, each next token keeps the state with probability
// label_persistence and otherwise re-picks uniformly among the other states.
// Entering an entity state emits B, staying in it emits I, so every I is
// preceded by a same-type B or I. Features are unit-variance Gaussians
// around the current class mean.
inline Corpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  const auto means = detail::class_means(spec);
  const std::size_t num_states = spec.entity_types + 1;  // 0 = O

  Corpus corpus;
  corpus.feature_dim = spec.feature_dim;
  corpus.num_labels = spec.num_labels();
  corpus.tag_names = synthetic_tag_names(spec.entity_types);
  corpus.generator_spec = spec;
  corpus.examples.reserve(spec.num_examples);

  RngStream root = RngStream(spec.seed).child("corpus");
  for (std::size_t i = 0; i < spec.num_examples; ++i) {
    RngStream ex_stream = root.child("example").child(i);
    Rng label_rng = ex_stream.child("labels").rng();
    Rng feature_rng = ex_stream.child("features").rng();

    TaggedExample ex;
    ex.features.resize(spec.seq_len);
    ex.labels.resize(spec.seq_len);

    std::size_t state = label_rng.below(num_states);
    std::size_t prev_state = num_states;  // sentinel: nothing precedes token 0
    for (std::size_t t = 0; t < spec.seq_len; ++t) {
      if (t > 0) {
        prev_state = state;
        if (!label_rng.bernoulli(spec.label_persistence)) {
          std::size_t pick = label_rng.below(num_states - 1);
          state = pick < state ? pick : pick + 1;  // uniform over the others
        }
      }
      if (state == 0) {
        ex.labels[t] = 0;
      } else {
        const int type = static_cast<int>(state - 1);
        const bool entering = state != prev_state;
        ex.labels[t] = 2 * type + (entering ? 1 : 2);
      }
      std::vector<double>& x = ex.features[t];
      x.resize(spec.feature_dim);
      const std::vector<double>& mu = means[state];
      for (std::size_t j = 0; j < spec.feature_dim; ++j)
        x[j] = mu[j] + feature_rng.gaussian();
    }
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// Splits a corpus into K shards by a seeded uniform shuffle. Sizes differ by
// at most one, with the remainder going to the lowest-index shards.
inline std::vector<Corpus> partition_corpus(const Corpus& corpus, std::size_t K,
                                            std::uint64_t seed) {
  if (K < 1) throw ValidationError("partition requires K >= 1");
  if (K > corpus.size())
    throw ValidationError("partition requires K <= corpus size (K=" +
                          std::to_string(K) + ", size=" +
                          std::to_string(corpus.size()) + ")");

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = RngStream(seed).child("partition").rng();
  rng.shuffle(order);

  const std::size_t base = corpus.size() / K;
  const std::size_t remainder = corpus.size() % K;
  std::vector<Corpus> shards(K);
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t n_k = base + (k < remainder ? 1 : 0);
    Corpus& shard = shards[k];
    shard.feature_dim = corpus.feature_dim;
    shard.num_labels = corpus.num_labels;
    shard.tag_names = corpus.tag_names;
    shard.examples.reserve(n_k);
    for (std::size_t j = 0; j < n_k; ++j)
      shard.examples.push_back(corpus.examples[order[cursor++]]);
  }
  return shards;
}

// --- corpus file IO -------------------------------------------------------
//
// Newline-delimited JSON. The first line is a header object with keys "d",
// "num_labels" and "tag_names"; every following line is one document with
// keys "features" (array of length-d arrays) and "labels" (array of ints).

inline void write_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  nlohmann::ordered_json header;
  header["d"] = corpus.feature_dim;
  header["num_labels"] = corpus.num_labels;
  header["tag_names"] = corpus.tag_names;
  out << header.dump() << "\n";
  for (const TaggedExample& ex : corpus.examples) {
    nlohmann::ordered_json rec;
    rec["features"] = ex.features;
    rec["labels"] = ex.labels;
    out << rec.dump() << "\n";
  }
  if (!out) throw ValidationError("write failed: " + path);
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus file: " + path);

  auto fail = [&path](std::size_t line_no, const std::string& why) -> ValidationError {
    std::ostringstream msg;
    msg << path << ": line " << line_no << ": " << why;
    return ValidationError(msg.str());
  };

  std::string line;
  std::size_t line_no = 0;
  Corpus corpus;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(line_no, e.what());
    }
    try {
      if (!saw_header) {
        corpus.feature_dim = rec.at("d").get<std::size_t>();
        corpus.num_labels = rec.at("num_labels").get<std::size_t>();
        corpus.tag_names = rec.at("tag_names").get<std::vector<std::string>>();
        if (corpus.tag_names.size() != corpus.num_labels)
          throw fail(line_no, "tag_names length does not match num_labels");
        if (corpus.feature_dim < 1 || corpus.num_labels < 1)
          throw fail(line_no, "d and num_labels must be >= 1");
        saw_header = true;
        continue;
      }
      TaggedExample ex;
      ex.features = rec.at("features").get<std::vector<std::vector<double>>>();
      ex.labels = rec.at("labels").get<std::vector<int>>();
      if (ex.features.size() != ex.labels.size() || ex.labels.empty())
        throw fail(line_no, "features and labels must have equal nonzero length");
      for (const auto& x : ex.features)
        if (x.size() != corpus.feature_dim)
          throw fail(line_no, "feature vector dimension does not match header d");
      for (int lbl : ex.labels)
        if (lbl < 0 || static_cast<std::size_t>(lbl) >= corpus.num_labels)
          throw fail(line_no, "label id out of range");
      corpus.examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw fail(line_no, e.what());
    }
  }
  if (!saw_header) throw fail(0, "missing header line");
  if (corpus.examples.empty()) throw fail(line_no, "corpus has no documents");
  return corpus;
}

}  // namespace dpfed
