#pragma once

// Messengers and the server-side mathematics: quality scores, KL similarity,
// the quality set Q, neighbor sets, and the collaboration graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sqmd/errors.hpp"
#include "sqmd/matrix.hpp"
#include "sqmd/nn.hpp"

namespace sqmd {

using ClientId = int;

// Shared unlabeled inputs for all clients plus the labels only the server uses.
class ReferenceSet {
 public:
  ReferenceSet() = default;

  // Rejects non-one-hot labels and class counts that differ by more than one.
  static ReferenceSet make(Matrix features, Matrix labels) {
    if (labels.rows() != features.rows())
      throw DimensionError("ReferenceSet: " + std::to_string(labels.rows()) + " labels for " +
                           std::to_string(features.rows()) + " rows");
    if (labels.cols() == 0) throw DimensionError("ReferenceSet: labels need at least one class");
    validate_one_hot(labels);
    if (!features.all_finite()) throw NumericError("ReferenceSet: non-finite feature");
    std::vector<std::size_t> counts(labels.cols(), 0);
    for (std::size_t i = 0; i < labels.rows(); ++i) ++counts[argmax(labels.row(i))];
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    if (*hi - *lo > 1)
      throw ConfigError("ReferenceSet: class counts unbalanced (min " + std::to_string(*lo) + ", max " +
                        std::to_string(*hi) + ")");
    ReferenceSet r;
    r.features_ = std::move(features);
    r.labels_ = std::move(labels);
    return r;
  }

  const Matrix& features() const noexcept { return features_; }
  const Matrix& labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return features_.rows(); }
  std::size_t num_classes() const noexcept { return labels_.cols(); }

 private:
  Matrix features_;
  Matrix labels_;
};

struct Messenger {
  ClientId client_id = 0;
  std::uint64_t round = 0;
  Matrix soft_decisions;  // R x C

  // Rows must be probability vectors (sum 1 within 1e-6, entries in [0,1]).
  void validate(std::size_t reference_rows, std::size_t num_classes) const {
    if (soft_decisions.rows() != reference_rows || soft_decisions.cols() != num_classes)
      throw DimensionError("messenger from client " + std::to_string(client_id) + " is " +
                           shape_string(soft_decisions) + ", expected " + std::to_string(reference_rows) + "x" +
                           std::to_string(num_classes));
    for (std::size_t i = 0; i < soft_decisions.rows(); ++i) {
      double sum = 0.0;
      for (double v : soft_decisions.row(i)) {
        if (!(v >= 0.0 && v <= 1.0))
          throw NumericError("messenger from client " + std::to_string(client_id) + " has entry outside [0,1]");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-6)
        throw NumericError("messenger from client " + std::to_string(client_id) + " row " + std::to_string(i) +
                           " sums to " + std::to_string(sum));
    }
  }

  bool operator==(const Messenger&) const = default;
};

struct QualityTable {
  std::map<ClientId, double> scores;
  std::vector<ClientId> quality_set;  // ascending by score, ties by id

  bool contains(ClientId id) const {
    return std::find(quality_set.begin(), quality_set.end(), id) != quality_set.end();
  }
};

// One entry of a neighbor set K^n.
struct NeighborLink {
  ClientId client_id = 0;
  double divergence = 0.0;
  double similarity = 0.0;  // 1/divergence; +inf when divergence is 0

  bool operator==(const NeighborLink&) const = default;
};

struct CollaborationGraph {
  std::vector<ClientId> client_ids;  // row/column order of `weights`
  Matrix weights;                    // weights(n, m) = c_nm; diagonal 0
  std::map<ClientId, std::vector<NeighborLink>> neighbor_sets;
};

inline Messenger generate_messenger(const ModelSpec& spec, const ModelParams& params, const ReferenceSet& ref,
                                    ClientId client_id, std::uint64_t round) {
  return {client_id, round, forward(spec, params, ref.features())};
}

// g_n: summed cross-entropy of the messenger against the reference labels.
inline double score_quality(const Messenger& m, const ReferenceSet& ref) {
  if (m.soft_decisions.rows() != ref.size() || m.soft_decisions.cols() != ref.num_classes())
    throw DimensionError("score_quality: messenger " + shape_string(m.soft_decisions) + " vs reference " +
                         std::to_string(ref.size()) + "x" + std::to_string(ref.num_classes()));
  return cross_entropy(m.soft_decisions, ref.labels());
}

// The min(q, N) lowest-scoring clients, ascending; ties by ascending id.
inline std::vector<ClientId> select_quality_set(const std::map<ClientId, double>& scores, std::size_t q) {
  if (q == 0) throw ConfigError("q must be >= 1");
  std::vector<std::pair<double, ClientId>> ranked;
  ranked.reserve(scores.size());
  for (const auto& [id, g] : scores) ranked.emplace_back(g, id);
  std::sort(ranked.begin(), ranked.end());
  ranked.resize(std::min(q, ranked.size()));
  std::vector<ClientId> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) out.push_back(r.second);
  return out;
}

namespace detail {

// Row-wise floor at kProbabilityFloor then renormalize, so identical inputs
// still give exactly zero divergence.
inline Matrix floor_and_renormalize(const Matrix& p) {
  Matrix out = p;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    double sum = 0.0;
    for (double& v : row) {
      v = std::max(v, kProbabilityFloor);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

inline double mean_row_kl(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    auto br = b.row(i);
    for (std::size_t c = 0; c < ar.size(); ++c) total += ar[c] * std::log(ar[c] / br[c]);
  }
  return a.rows() == 0 ? 0.0 : total / static_cast<double>(a.rows());
}

inline double similarity_from_divergence(double d) {
  return d > 0.0 ? 1.0 / d : std::numeric_limits<double>::infinity();
}

}  // namespace detail

// d(a, b) = (1/R) sum_j KL(a_j || b_j). Asymmetric; `a` is the querying client.
inline double messenger_divergence(const Messenger& a, const Messenger& b) {
  if (!same_shape(a.soft_decisions, b.soft_decisions))
    throw DimensionError("messenger_divergence: " + shape_string(a.soft_decisions) + " vs " +
                         shape_string(b.soft_decisions));
  const double d = detail::mean_row_kl(detail::floor_and_renormalize(a.soft_decisions),
                                       detail::floor_and_renormalize(b.soft_decisions));
  // Rounding can leave a tiny negative for near-identical inputs.
  return std::max(d, 0.0);
}

// Ranks precomputed divergences: ascending d, ties by ascending id, at most k.
inline std::vector<NeighborLink> rank_neighbors(std::vector<NeighborLink> candidates, std::size_t k) {
  std::sort(candidates.begin(), candidates.end(), [](const NeighborLink& x, const NeighborLink& y) {
    if (x.divergence != y.divergence) return x.divergence < y.divergence;
    return x.client_id < y.client_id;
  });
  if (candidates.size() > k) candidates.resize(k);
  return candidates;
}

// K^n: the k candidates nearest to `self` (self excluded by id).
inline std::vector<NeighborLink> select_neighbors(const Messenger& self, std::span<const Messenger> quality_msgrs,
                                                  std::size_t k) {
  if (k == 0) throw ConfigError("k must be >= 1");
  std::vector<NeighborLink> candidates;
  candidates.reserve(quality_msgrs.size());
  for (const auto& m : quality_msgrs) {
    if (m.client_id == self.client_id) continue;
    const double d = messenger_divergence(self, m);
    candidates.push_back({m.client_id, d, detail::similarity_from_divergence(d)});
  }
  return rank_neighbors(std::move(candidates), k);
}

// Element-wise mean of the neighbors' soft decisions.
inline Matrix ensemble_mean(std::span<const Messenger> neighbors) {
  if (neighbors.empty()) throw ContractError("ensemble_mean of an empty neighbor set");
  const Matrix& first = neighbors.front().soft_decisions;
  Matrix mean(first.rows(), first.cols());
  for (const auto& m : neighbors) {
    if (!same_shape(m.soft_decisions, first))
      throw DimensionError("ensemble_mean: incongruent messenger from client " + std::to_string(m.client_id));
    auto dst = mean.values();
    auto src = m.soft_decisions.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  const double inv = 1.0 / static_cast<double>(neighbors.size());
  for (double& v : mean.values()) v *= inv;
  return mean;
}

// Norm of grad( sum_i l(x_i) + rho * sum_j ||p_j - mean_j||^2 ) at the given
// parameters. Zero exactly at a distillation stationary point. Without a
// neighbor mean only the local term is used.
inline double stationarity_residual(const ModelSpec& spec, const ModelParams& params, const Batch& local_data,
                                    const Matrix& ref_features, const Matrix* neighbor_mean, double rho) {
  auto grad = backward_local(spec, params, local_data).gradients;
  if (neighbor_mean != nullptr && rho > 0.0) {
    const auto ref = backward_reference(spec, params, ref_features, *neighbor_mean);
    for (std::size_t l = 0; l < grad.layers.size(); ++l) {
      auto g = grad.layers[l].weights.values();
      auto r = ref.gradients.layers[l].weights.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += rho * r[i];
      auto& gb = grad.layers[l].bias;
      const auto& rb = ref.gradients.layers[l].bias;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += rho * rb[i];
    }
  }
  return grad.norm();
}

}  // namespace sqmd
