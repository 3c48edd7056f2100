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
#include <cstddef>
#include <string>
#include <vector>

#include "dpfed/corpus.hpp"
#include "dpfed/errors.hpp"
#include "dpfed/rng.hpp"

namespace dpfed {

// Parameters and gradients live in one flat vector so clipping, noising and
// optimizer updates are plain vector arithmetic. ParameterLayout defines the
// canonical order (layer-major, then row-major within a layer).
using ParameterVector = std::vector<double>;
using GradientVector = std::vector<double>;

enum class ModelKind { linear, mlp1 };

inline std::string to_string(ModelKind kind) {
  return kind == ModelKind::linear ? "linear" : "mlp1";
}

// Token-independent tagger shapes. "linear" scores each token by W x + b.
// "mlp1" inserts one tanh hidden layer: W2 tanh(W1 x + b1) + b2.
struct ModelShape {
  ModelKind kind = ModelKind::linear;
  std::size_t feature_dim = 0;
  std::size_t hidden_dim = 0;  // mlp1 only
  std::size_t num_labels = 0;

  std::size_t param_count() const {
    if (kind == ModelKind::linear)
      return feature_dim * num_labels + num_labels;
    return feature_dim * hidden_dim + hidden_dim + hidden_dim * num_labels + num_labels;
  }

  void validate() const {
    if (feature_dim < 1) throw ValidationError("model feature_dim must be >= 1");
    if (num_labels < 2) throw ValidationError("model num_labels must be >= 2");
    if (kind == ModelKind::mlp1 && hidden_dim < 1)
      throw ValidationError("mlp1 requires hidden_dim >= 1");
  }
};

struct LayerBlock {
  std::size_t rows = 0;
  std::size_t cols = 0;   // 1 for bias vectors
  std::size_t offset = 0; // into the flat vector
};

struct ParameterLayout {
  std::vector<LayerBlock> blocks;
  std::size_t size = 0;

  // Flat index of (layer, row, column); bijective onto [0, size).
  std::size_t index(std::size_t layer, std::size_t row, std::size_t col) const {
    const LayerBlock& b = blocks.at(layer);
    if (row >= b.rows || col >= b.cols)
      throw ValidationError("layout index out of range");
    return b.offset + row * b.cols + col;
  }

  static ParameterLayout for_shape(const ModelShape& shape) {
    shape.validate();
    ParameterLayout layout;
    std::size_t offset = 0;
    auto add = [&](std::size_t rows, std::size_t cols) {
      layout.blocks.push_back({rows, cols, offset});
      offset += rows * cols;
    };
    if (shape.kind == ModelKind::linear) {
      add(shape.num_labels, shape.feature_dim);  // W
      add(shape.num_labels, 1);                  // b
    } else {
      add(shape.hidden_dim, shape.feature_dim);  // W1
      add(shape.hidden_dim, 1);                  // b1
      add(shape.num_labels, shape.hidden_dim);   // W2
      add(shape.num_labels, 1);                  // b2
    }
    layout.size = offset;
    return layout;
  }
};

// Weight entries start at N(0, 1/fan_in) scale, biases at zero.
inline ParameterVector init_params(const ModelShape& shape, const RngStream& stream) {
  const ParameterLayout layout = ParameterLayout::for_shape(shape);
  ParameterVector params(layout.size, 0.0);
  for (std::size_t layer = 0; layer < layout.blocks.size(); ++layer) {
    const LayerBlock& b = layout.blocks[layer];
    if (b.cols == 1) continue;  // bias
    Rng rng = stream.child("init").child(layer).rng();
    const double scale = 1.0 / std::sqrt(static_cast<double>(b.cols));
    for (std::size_t i = 0; i < b.rows * b.cols; ++i)
      params[b.offset + i] = scale * rng.gaussian();
  }
  return params;
}

struct ForwardResult {
  double loss = 0.0;                        // mean per-token cross-entropy
  std::vector<std::vector<double>> logits;  // L rows of C_lbl scores
};

namespace detail {

inline void check_example(const ModelShape& shape, const TaggedExample& ex) {
  if (ex.labels.empty() || ex.features.size() != ex.labels.size())
    throw ValidationError("example features/labels must have equal nonzero length");
  for (const auto& x : ex.features)
    if (x.size() != shape.feature_dim)
      throw ValidationError("example feature dimension does not match model");
  for (int lbl : ex.labels)
    if (lbl < 0 || static_cast<std::size_t>(lbl) >= shape.num_labels)
      throw ValidationError("example label id out of range for model");
}

inline void check_params(const ModelShape& shape, const ParameterVector& params) {
  if (params.size() != shape.param_count())
    throw ValidationError("parameter vector length does not match model shape");
}

// softmax probabilities in place of logits; returns log-sum-exp for the loss.
inline double softmax_inplace(std::vector<double>& row) {
  double m = row[0];
  for (double v : row) m = std::max(m, v);
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  for (double& v : row) v = std::exp(v - lse);
  return lse;
}

}  // namespace detail

// Mean token cross-entropy and per-token logits for one document.
inline ForwardResult forward_loss(const ParameterVector& params, const ModelShape& shape,
                                  const TaggedExample& ex) {
  detail::check_params(shape, params);
  detail::check_example(shape, ex);
  const ParameterLayout layout = ParameterLayout::for_shape(shape);
  const std::size_t L = ex.length();
  const std::size_t C = shape.num_labels;

  ForwardResult result;
  result.logits.assign(L, std::vector<double>(C, 0.0));
  double loss_sum = 0.0;

  std::vector<double> hidden;  // mlp1 activations, reused per token
  for (std::size_t t = 0; t < L; ++t) {
    const std::vector<double>& x = ex.features[t];
    std::vector<double>& logits = result.logits[t];
    if (shape.kind == ModelKind::linear) {
      const LayerBlock& W = layout.blocks[0];
      const LayerBlock& b = layout.blocks[1];
      for (std::size_t c = 0; c < C; ++c) {
        double z = params[b.offset + c];
        const double* w_row = params.data() + W.offset + c * W.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) z += w_row[j] * x[j];
        logits[c] = z;
      }
    } else {
      const LayerBlock& W1 = layout.blocks[0];
      const LayerBlock& b1 = layout.blocks[1];
      const LayerBlock& W2 = layout.blocks[2];
      const LayerBlock& b2 = layout.blocks[3];
      hidden.assign(shape.hidden_dim, 0.0);
      for (std::size_t k = 0; k < shape.hidden_dim; ++k) {
        double z = params[b1.offset + k];
        const double* w_row = params.data() + W1.offset + k * W1.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) z += w_row[j] * x[j];
        hidden[k] = std::tanh(z);
      }
      for (std::size_t c = 0; c < C; ++c) {
        double z = params[b2.offset + c];
        const double* w_row = params.data() + W2.offset + c * W2.cols;
        for (std::size_t k = 0; k < shape.hidden_dim; ++k) z += w_row[k] * hidden[k];
        logits[c] = z;
      }
    }
    // loss_t = log-sum-exp(logits) - logit[label]
    std::vector<double> probs = logits;
    const double lse = detail::softmax_inplace(probs);
    loss_sum += lse - logits[static_cast<std::size_t>(ex.labels[t])];
  }
  result.loss = loss_sum / static_cast<double>(L);
  return result;
}

struct LossGradient {
  double loss = 0.0;
  GradientVector gradient;
};

// Loss and its exact gradient for one document. The gradient of the mean
// token cross-entropy flows through softmax as (p - onehot)/L per token; the
// mlp1 path backpropagates that through tanh (derivative 1 - a^2).
inline LossGradient per_example_loss_gradient(const ParameterVector& params,
                                              const ModelShape& shape,
                                              const TaggedExample& ex) {
  detail::check_params(shape, params);
  detail::check_example(shape, ex);
  const ParameterLayout layout = ParameterLayout::for_shape(shape);
  const std::size_t L = ex.length();
  const std::size_t C = shape.num_labels;
  const double inv_len = 1.0 / static_cast<double>(L);

  LossGradient out;
  out.gradient.assign(params.size(), 0.0);
  double loss_sum = 0.0;

  std::vector<double> logits(C), delta(C), hidden, dhidden;
  for (std::size_t t = 0; t < L; ++t) {
    const std::vector<double>& x = ex.features[t];
    if (shape.kind == ModelKind::linear) {
      const LayerBlock& W = layout.blocks[0];
      const LayerBlock& b = layout.blocks[1];
      for (std::size_t c = 0; c < C; ++c) {
        double z = params[b.offset + c];
        const double* w_row = params.data() + W.offset + c * W.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) z += w_row[j] * x[j];
        logits[c] = z;
      }
      delta = logits;
      const double lse = detail::softmax_inplace(delta);
      loss_sum += lse - logits[static_cast<std::size_t>(ex.labels[t])];
      delta[static_cast<std::size_t>(ex.labels[t])] -= 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double dc = delta[c] * inv_len;
        double* gw_row = out.gradient.data() + W.offset + c * W.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) gw_row[j] += dc * x[j];
        out.gradient[b.offset + c] += dc;
      }
    } else {
      const LayerBlock& W1 = layout.blocks[0];
      const LayerBlock& b1 = layout.blocks[1];
      const LayerBlock& W2 = layout.blocks[2];
      const LayerBlock& b2 = layout.blocks[3];
      hidden.assign(shape.hidden_dim, 0.0);
      for (std::size_t k = 0; k < shape.hidden_dim; ++k) {
        double z = params[b1.offset + k];
        const double* w_row = params.data() + W1.offset + k * W1.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) z += w_row[j] * x[j];
        hidden[k] = std::tanh(z);
      }
      for (std::size_t c = 0; c < C; ++c) {
        double z = params[b2.offset + c];
        const double* w_row = params.data() + W2.offset + c * W2.cols;
        for (std::size_t k = 0; k < shape.hidden_dim; ++k) z += w_row[k] * hidden[k];
        logits[c] = z;
      }
      delta = logits;
      const double lse = detail::softmax_inplace(delta);
      loss_sum += lse - logits[static_cast<std::size_t>(ex.labels[t])];
      delta[static_cast<std::size_t>(ex.labels[t])] -= 1.0;

      dhidden.assign(shape.hidden_dim, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        const double dc = delta[c] * inv_len;
        double* gw_row = out.gradient.data() + W2.offset + c * W2.cols;
        const double* w_row = params.data() + W2.offset + c * W2.cols;
        for (std::size_t k = 0; k < shape.hidden_dim; ++k) {
          gw_row[k] += dc * hidden[k];
          dhidden[k] += dc * w_row[k];
        }
        out.gradient[b2.offset + c] += dc;
      }
      for (std::size_t k = 0; k < shape.hidden_dim; ++k) {
        const double dz = dhidden[k] * (1.0 - hidden[k] * hidden[k]);
        double* gw_row = out.gradient.data() + W1.offset + k * W1.cols;
        for (std::size_t j = 0; j < shape.feature_dim; ++j) gw_row[j] += dz * x[j];
        out.gradient[b1.offset + k] += dz;
      }
    }
  }
  out.loss = loss_sum * inv_len;
  return out;
}

inline GradientVector per_example_gradient(const ParameterVector& params,
                                           const ModelShape& shape,
                                           const TaggedExample& ex) {
  return per_example_loss_gradient(params, shape, ex).gradient;
}

// Argmax tag per token; ties resolve to the lowest label id.
inline std::vector<int> predict_tags(const ParameterVector& params, const ModelShape& shape,
                                     const TaggedExample& ex) {
  const ForwardResult fwd = forward_loss(params, shape, ex);
  std::vector<int> tags(ex.length(), 0);
  for (std::size_t t = 0; t < ex.length(); ++t) {
    const std::vector<double>& row = fwd.logits[t];
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    tags[t] = static_cast<int>(best);
  }
  return tags;
}

}  // namespace dpfed
