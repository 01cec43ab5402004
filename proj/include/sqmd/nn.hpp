#pragma once

// Small dense feed-forward classifiers with hand-written backpropagation.
//
// A model is a stack of affine layers; hidden layers use a rectifier and the
// output layer a softmax. Clients may hold models of different depth and
// width; the protocol only needs every model to emit the same class count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sqmd/errors.hpp"
#include "sqmd/matrix.hpp"
#include "sqmd/rng.hpp"

namespace sqmd {

// Floor applied to probabilities before logarithms and KL ratios.
inline constexpr double kProbabilityFloor = 1e-12;

enum class Activation { relu };

struct ModelSpec {
  std::vector<std::size_t> layer_sizes;  // input dim, hidden dims..., class count
  Activation hidden_activation = Activation::relu;
  std::string spec_id;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t num_classes() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l)
      n += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return n;
  }

  void validate() const {
    if (layer_sizes.size() < 2)
      throw ConfigError("ModelSpec '" + spec_id + "': layer_sizes needs at least input and output");
    for (auto s : layer_sizes)
      if (s == 0) throw ConfigError("ModelSpec '" + spec_id + "': layer sizes must be >= 1");
  }

  bool operator==(const ModelSpec&) const = default;
};

struct DenseLayer {
  Matrix weights;             // fan_in x fan_out
  std::vector<double> bias;   // fan_out

  bool operator==(const DenseLayer&) const = default;
};

// Per-layer tensors laid out like a ModelSpec. Parameters and gradients
// share the layout but are distinct types.
template <typename Tag>
struct LayerTensors {
  std::vector<DenseLayer> layers;

  static LayerTensors zeros(const ModelSpec& spec) {
    LayerTensors t;
    t.layers.reserve(spec.num_layers());
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      const auto in = spec.layer_sizes[l];
      const auto out = spec.layer_sizes[l + 1];
      t.layers.push_back({Matrix(in, out), std::vector<double>(out, 0.0)});
    }
    return t;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.bias.size();
    return n;
  }

  bool matches(const ModelSpec& spec) const {
    if (layers.size() != spec.num_layers()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      if (L.weights.rows() != spec.layer_sizes[l] || L.weights.cols() != spec.layer_sizes[l + 1] ||
          L.bias.size() != spec.layer_sizes[l + 1])
        return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      if (!l.weights.all_finite()) return false;
      for (double b : l.bias)
        if (!std::isfinite(b)) return false;
    }
    return true;
  }

  // Visits every scalar in a fixed order: layer by layer, weights then bias.
  template <typename F>
  void for_each(F&& f) {
    for (auto& l : layers) {
      for (double& w : l.weights.values()) f(w);
      for (double& b : l.bias) f(b);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& l : layers) {
      for (double w : l.weights.values()) f(w);
      for (double b : l.bias) f(b);
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for_each([&](double v) { out.push_back(v); });
    return out;
  }

  double norm() const {
    double s = 0.0;
    for_each([&](double v) { s += v * v; });
    return std::sqrt(s);
  }

  bool operator==(const LayerTensors&) const = default;
};

using ModelParams = LayerTensors<struct ModelParamsTag>;
using Gradients = LayerTensors<struct GradientsTag>;

// Features plus optional one-hot labels.
struct Batch {
  Matrix features;  // B x input_dim
  Matrix labels;    // B x C one-hot, or empty for unlabeled data

  std::size_t size() const { return features.rows(); }
  bool has_labels() const { return labels.cols() > 0 && labels.rows() == features.rows(); }

  static Batch from_indices(Matrix features, std::span<const int> labels, std::size_t num_classes) {
    if (labels.size() != features.rows())
      throw DimensionError("Batch: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(features.rows()) + " rows");
    Matrix onehot(labels.size(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
        throw DimensionError("Batch: label " + std::to_string(labels[i]) + " outside [0, " +
                             std::to_string(num_classes) + ")");
      onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return {std::move(features), std::move(onehot)};
  }

  std::vector<int> label_indices() const {
    std::vector<int> out(labels.rows());
    for (std::size_t i = 0; i < labels.rows(); ++i) out[i] = static_cast<int>(argmax(labels.row(i)));
    return out;
  }
};

// Rows must be one-hot: entries in {0,1} summing to exactly 1.
inline void validate_one_hot(const Matrix& labels) {
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    double sum = 0.0;
    for (double v : labels.row(i)) {
      if (v != 0.0 && v != 1.0) throw DimensionError("label row " + std::to_string(i) + " is not one-hot");
      sum += v;
    }
    if (sum != 1.0) throw DimensionError("label row " + std::to_string(i) + " is not one-hot");
  }
}

// Glorot-uniform weights, zero biases.
inline ModelParams init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  auto params = ModelParams::zeros(spec);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const double fan_in = static_cast<double>(spec.layer_sizes[l]);
    const double fan_out = static_cast<double>(spec.layer_sizes[l + 1]);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& w : params.layers[l].weights.values()) w = rng.uniform(-limit, limit);
  }
  return params;
}

namespace detail {

inline void check_model(const ModelSpec& spec, const ModelParams& params) {
  spec.validate();
  if (!params.matches(spec)) throw DimensionError("parameters do not match ModelSpec '" + spec.spec_id + "'");
}

inline void check_input(const ModelSpec& spec, const Matrix& features) {
  if (features.cols() != spec.input_dim())
    throw DimensionError("input has " + std::to_string(features.cols()) + " columns, model '" +
                         spec.spec_id + "' expects " + std::to_string(spec.input_dim()));
  if (!features.all_finite()) throw NumericError("non-finite value in model input");
}

inline void softmax_rows(Matrix& z) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

// Activations of every layer: acts[0] is the input, acts.back() the softmax
// output. Hidden entries are post-rectifier.
struct ForwardTrace {
  std::vector<Matrix> acts;
};

inline ForwardTrace forward_trace(const ModelSpec& spec, const ModelParams& params, const Matrix& features) {
  ForwardTrace t;
  t.acts.reserve(spec.num_layers() + 1);
  t.acts.push_back(features);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto& layer = params.layers[l];
    Matrix z = matmul(t.acts.back(), layer.weights);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto row = z.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
    }
    if (l + 1 < spec.num_layers()) {
      for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
    } else {
      softmax_rows(z);
    }
    t.acts.push_back(std::move(z));
  }
  return t;
}

// Backpropagates the gradient w.r.t. the output pre-activations.
inline Gradients backpropagate(const ModelSpec& spec, const ModelParams& params, const ForwardTrace& t,
                               Matrix delta) {
  auto grads = Gradients::zeros(spec);
  for (std::size_t l = spec.num_layers(); l-- > 0;) {
    grads.layers[l].weights = matmul_transpose_a(t.acts[l], delta);
    auto& db = grads.layers[l].bias;
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      auto row = delta.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) db[j] += row[j];
    }
    if (l == 0) break;
    Matrix upstream = matmul_transpose_b(delta, params.layers[l].weights);
    const Matrix& hidden = t.acts[l];
    auto up = upstream.values();
    auto h = hidden.values();
    for (std::size_t i = 0; i < up.size(); ++i)
      if (h[i] <= 0.0) up[i] = 0.0;
    delta = std::move(upstream);
  }
  return grads;
}

}  // namespace detail

// Class probabilities for every row of `features` (B x C).
inline Matrix forward(const ModelSpec& spec, const ModelParams& params, const Matrix& features) {
  detail::check_model(spec, params);
  detail::check_input(spec, features);
  auto trace = detail::forward_trace(spec, params, features);
  return std::move(trace.acts.back());
}

// Summed cross-entropy, probabilities floored at kProbabilityFloor.
inline double cross_entropy(const Matrix& probs, const Matrix& labels) {
  if (!same_shape(probs, labels))
    throw DimensionError("cross_entropy: probs " + shape_string(probs) + " vs labels " + shape_string(labels));
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto cls = argmax(labels.row(i));
    loss -= std::log(std::clamp(probs(i, cls), kProbabilityFloor, 1.0));
  }
  return loss;
}

struct LossAndGradients {
  Gradients gradients;
  double loss = 0.0;
};

// Gradient of the summed cross-entropy over `batch`.
inline LossAndGradients backward_local(const ModelSpec& spec, const ModelParams& params, const Batch& batch) {
  detail::check_model(spec, params);
  detail::check_input(spec, batch.features);
  if (batch.labels.rows() != batch.features.rows() || batch.labels.cols() != spec.num_classes())
    throw DimensionError("backward_local: labels " + shape_string(batch.labels) + " for " +
                         std::to_string(batch.features.rows()) + " rows and " +
                         std::to_string(spec.num_classes()) + " classes");
  auto trace = detail::forward_trace(spec, params, batch.features);
  const Matrix& probs = trace.acts.back();
  const double loss = cross_entropy(probs, batch.labels);

  // d(-ln p_y)/dz = p - y; zero where the floor is active.
  Matrix delta(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto cls = argmax(batch.labels.row(i));
    if (probs(i, cls) < kProbabilityFloor) continue;
    for (std::size_t c = 0; c < probs.cols(); ++c) delta(i, c) = probs(i, c) - batch.labels(i, c);
  }
  return {detail::backpropagate(spec, params, trace, std::move(delta)), loss};
}

// Gradient of sum_j || p_j - target_j ||^2 over the reference rows.
inline LossAndGradients backward_reference(const ModelSpec& spec, const ModelParams& params,
                                           const Matrix& ref_features, const Matrix& target_mean) {
  detail::check_model(spec, params);
  detail::check_input(spec, ref_features);
  if (target_mean.rows() != ref_features.rows() || target_mean.cols() != spec.num_classes())
    throw DimensionError("backward_reference: target " + shape_string(target_mean) + " for " +
                         std::to_string(ref_features.rows()) + " reference rows and " +
                         std::to_string(spec.num_classes()) + " classes");
  auto trace = detail::forward_trace(spec, params, ref_features);
  const Matrix& probs = trace.acts.back();

  double loss = 0.0;
  Matrix delta(probs.rows(), probs.cols());
  std::vector<double> g(probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      const double diff = probs(i, c) - target_mean(i, c);
      loss += diff * diff;
      g[c] = 2.0 * diff;
      dot += g[c] * probs(i, c);
    }
    // Softmax Jacobian-vector product: p * (g - <g, p>).
    for (std::size_t c = 0; c < probs.cols(); ++c) delta(i, c) = probs(i, c) * (g[c] - dot);
  }
  return {detail::backpropagate(spec, params, trace, std::move(delta)), loss};
}

struct UpdateStep {
  double rho = 0.0;             // weight of the reference term, in [0, 1]
  double learning_rate = 0.1;   // eta > 0
  std::size_t local_count = 1;  // normalizer of the local gradient sum
  std::size_t reference_count = 1;
};

// One combined update:
//   theta - ((1-rho) eta / M) * grad L_loc - (2 eta rho / R) * sum_j J_j^T (p_j - mean_j)
// The second sum is half of grad L_ref, so its coefficient is (eta rho / R).
// rho == 0 never touches the reference data; rho == 1 never touches the local batch.
inline ModelParams sqmd_update(const ModelSpec& spec, const ModelParams& params, const Batch& local_batch,
                               const Matrix& ref_features, const Matrix& neighbor_mean, const UpdateStep& step) {
  if (!(step.rho >= 0.0 && step.rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (!(step.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (step.local_count == 0 || step.reference_count == 0)
    throw ConfigError("update normalizers must be positive");

  ModelParams next = params;
  if (step.rho < 1.0) {
    const auto local = backward_local(spec, params, local_batch);
    const double coef = (1.0 - step.rho) * step.learning_rate / static_cast<double>(step.local_count);
    for (std::size_t l = 0; l < next.layers.size(); ++l) {
      auto w = next.layers[l].weights.values();
      auto gw = local.gradients.layers[l].weights.values();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= coef * gw[i];
      auto& b = next.layers[l].bias;
      const auto& gb = local.gradients.layers[l].bias;
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= coef * gb[i];
    }
  }
  if (step.rho > 0.0) {
    const auto ref = backward_reference(spec, params, ref_features, neighbor_mean);
    const double coef = step.rho * step.learning_rate / static_cast<double>(step.reference_count);
    for (std::size_t l = 0; l < next.layers.size(); ++l) {
      auto w = next.layers[l].weights.values();
      auto gw = ref.gradients.layers[l].weights.values();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= coef * gw[i];
      auto& b = next.layers[l].bias;
      const auto& gb = ref.gradients.layers[l].bias;
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= coef * gb[i];
    }
  }
  if (!next.all_finite()) throw NumericError("update produced non-finite parameters for '" + spec.spec_id + "'");
  return next;
}

// Plain gradient descent on the mean local cross-entropy.
inline ModelParams sgd_step(const ModelSpec& spec, const ModelParams& params, const Batch& batch,
                            double learning_rate, std::size_t local_count) {
  const auto local = backward_local(spec, params, batch);
  const double coef = learning_rate / static_cast<double>(local_count);
  ModelParams next = params;
  for (std::size_t l = 0; l < next.layers.size(); ++l) {
    auto w = next.layers[l].weights.values();
    auto gw = local.gradients.layers[l].weights.values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= coef * gw[i];
    auto& b = next.layers[l].bias;
    const auto& gb = local.gradients.layers[l].bias;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= coef * gb[i];
  }
  return next;
}

inline std::vector<int> predict(const ModelSpec& spec, const ModelParams& params, const Matrix& features) {
  const Matrix probs = forward(spec, params, features);
  std::vector<int> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = static_cast<int>(argmax(probs.row(i)));
  return out;
}

}  // namespace sqmd
