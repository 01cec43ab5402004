#pragma once

// Per-client training loop: mini-batch steps against the local data plus the
// reference-set consensus term, and messenger exchange with the server.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sqmd/errors.hpp"
#include "sqmd/nn.hpp"
#include "sqmd/protocol.hpp"
#include "sqmd/rng.hpp"
#include "sqmd/server.hpp"

namespace sqmd {

struct TrainHyper {
  double rho = 0.8;
  double learning_rate = 0.1;
  std::size_t interval = 1;  // local iterations between messenger exchanges
  std::size_t batch_size = 32;
  bool full_batch = false;   // every step uses the whole training split
  std::size_t total_iterations = 100;

  void validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("hyper.rho must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw ConfigError("hyper.learning_rate must be positive");
    if (interval < 1) throw ConfigError("hyper.interval must be >= 1");
    if (batch_size < 1) throw ConfigError("hyper.batch_size must be >= 1");
    if (total_iterations < 1) throw ConfigError("hyper.total_iterations must be >= 1");
  }

  bool operator==(const TrainHyper&) const = default;
};

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct LocalData {
  Batch train;
  Batch val;
  Batch test;

  const Batch& get(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return test;
  }
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro

  bool operator==(const Metrics&) const = default;
};

struct ClientState {
  ClientId id = 0;
  ModelSpec spec;
  ModelParams params;
  LocalData data;
  std::optional<Matrix> last_neighbor_mean;
  std::size_t iteration = 0;  // completed local steps
  Rng rng;

  // Epoch bookkeeping for without-replacement mini-batches.
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
};

// Fresh client with parameters drawn from its own stream.
inline ClientState make_client(ClientId id, ModelSpec spec, LocalData data, std::uint64_t run_seed) {
  spec.validate();
  ClientState s;
  s.id = id;
  s.rng = Rng(run_seed, "client", static_cast<std::uint64_t>(id));
  s.params = init_params(spec, s.rng);
  s.spec = std::move(spec);
  s.data = std::move(data);
  return s;
}

// The next step is local iteration t = iteration + 1; exchange when I divides t.
inline bool communication_due(const ClientState& state, const TrainHyper& hyper) {
  return (state.iteration + 1) % hyper.interval == 0;
}

inline Messenger make_messenger(const ClientState& state, const ReferenceSet& ref, std::uint64_t round) {
  return generate_messenger(state.spec, state.params, ref, state.id, round);
}

// Replaces the distillation target with the mean of the received K^n; an
// empty set puts the client back into local-only mode.
inline void accept_neighbors(ClientState& state, std::span<const Messenger> neighbors) {
  if (neighbors.empty()) {
    state.last_neighbor_mean.reset();
  } else {
    state.last_neighbor_mean = ensemble_mean(neighbors);
  }
}

namespace detail {

inline std::vector<std::size_t> next_batch_indices(ClientState& state, const TrainHyper& hyper) {
  const std::size_t n = state.data.train.size();
  if (n == 0) throw ContractError("client " + std::to_string(state.id) + " has no training data");
  if (hyper.full_batch) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  if (state.order.size() != n || state.cursor >= n) {
    state.order = state.rng.permutation(n);
    state.cursor = 0;
  }
  const std::size_t end = std::min(n, state.cursor + hyper.batch_size);
  std::vector<std::size_t> idx(state.order.begin() + static_cast<std::ptrdiff_t>(state.cursor),
                               state.order.begin() + static_cast<std::ptrdiff_t>(end));
  state.cursor = end;
  return idx;
}

}  // namespace detail

// One local iteration. Without a neighbor mean the reference term is skipped
// and the step is plain SGD on the local batch.
inline void client_step(ClientState& state, const TrainHyper& hyper, const Matrix& ref_features) {
  const auto idx = detail::next_batch_indices(state, hyper);
  Batch batch{gather_rows(state.data.train.features, idx), gather_rows(state.data.train.labels, idx)};
  UpdateStep step;
  step.learning_rate = hyper.learning_rate;
  step.local_count = batch.size();
  step.reference_count = std::max<std::size_t>(1, ref_features.rows());
  step.rho = state.last_neighbor_mean ? hyper.rho : 0.0;
  static const Matrix kNoTarget;
  const Matrix& target = state.last_neighbor_mean ? *state.last_neighbor_mean : kNoTarget;
  try {
    state.params = sqmd_update(state.spec, state.params, batch, ref_features, target, step);
  } catch (const Error& e) {
    throw Error("client " + std::to_string(state.id) + ": " + e.what());
  }
  ++state.iteration;
}

// Sends the current messenger, runs a server round and adopts this client's
// neighbor set. The simulation harness batches these phases across clients.
inline void communicate(ClientState& state, const ReferenceSet& ref, CoordinationServer& server,
                        const ServerConfig& config, Rng& selection_stream, std::uint64_t round) {
  server.receive_messenger(make_messenger(state, ref, round));
  auto neighbors = server.server_round(config, selection_stream);
  accept_neighbors(state, neighbors[state.id]);
}

// Accuracy plus macro precision/recall. Classes are averaged over those that
// occur in either the labels or the predictions; 0/0 counts as 0.
inline Metrics compute_metrics(std::span<const int> predicted, std::span<const int> actual, std::size_t num_classes) {
  if (predicted.size() != actual.size()) throw DimensionError("compute_metrics: length mismatch");
  if (actual.empty()) throw ContractError("metrics of an empty split");
  std::vector<std::size_t> tp(num_classes, 0), pred_count(num_classes, 0), true_count(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]);
    const auto a = static_cast<std::size_t>(actual[i]);
    if (p >= num_classes || a >= num_classes) throw DimensionError("compute_metrics: class out of range");
    ++pred_count[p];
    ++true_count[a];
    if (p == a) {
      ++tp[a];
      ++correct;
    }
  }
  double prec = 0.0, rec = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (pred_count[c] == 0 && true_count[c] == 0) continue;
    ++present;
    if (pred_count[c] > 0) prec += static_cast<double>(tp[c]) / static_cast<double>(pred_count[c]);
    if (true_count[c] > 0) rec += static_cast<double>(tp[c]) / static_cast<double>(true_count[c]);
  }
  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(actual.size());
  m.precision = prec / static_cast<double>(present);
  m.recall = rec / static_cast<double>(present);
  return m;
}

inline Metrics evaluate(const ClientState& state, Split split) {
  const Batch& b = state.data.get(split);
  if (b.size() == 0)
    throw ContractError("client " + std::to_string(state.id) + ": " + to_string(split) + " split is empty");
  const auto predicted = predict(state.spec, state.params, b.features);
  return compute_metrics(predicted, b.label_indices(), state.spec.num_classes());
}

// Per-client stationarity residual over the full training split, using each
// client's current neighbor mean.
inline std::vector<double> stationarity_residuals(std::span<const ClientState> clients, const Matrix& ref_features,
                                                  double rho) {
  std::vector<double> out;
  out.reserve(clients.size());
  for (const auto& c : clients) {
    const Matrix* target = c.last_neighbor_mean ? &*c.last_neighbor_mean : nullptr;
    out.push_back(stationarity_residual(c.spec, c.params, c.data.train, ref_features, target, rho));
  }
  return out;
}

}  // namespace sqmd
