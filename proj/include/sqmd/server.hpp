#pragma once

// Coordination server: holds the messenger repository, grades clients,
// builds the quality set and each client's neighbor set every round.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sqmd/errors.hpp"
#include "sqmd/protocol.hpp"
#include "sqmd/rng.hpp"

namespace sqmd {

enum class SimilaritySelection { nearest, random };

inline const char* to_string(SimilaritySelection s) {
  return s == SimilaritySelection::nearest ? "nearest" : "random";
}

struct ServerConfig {
  std::size_t q = 4;
  std::size_t k = 2;
  bool quality_filter_enabled = true;
  SimilaritySelection similarity_selection = SimilaritySelection::nearest;

  void validate() const {
    if (q < 1) throw ConfigError("server.q must be >= 1");
    if (k < 1) throw ConfigError("server.k must be >= 1");
    if (quality_filter_enabled && k > q)
      throw ConfigError("server.k (" + std::to_string(k) + ") must not exceed server.q (" + std::to_string(q) +
                        ") while the quality filter is enabled");
  }

  bool operator==(const ServerConfig&) const = default;
};

// Latest messenger per client.
struct MessengerRepository {
  std::map<ClientId, Messenger> latest;
  std::map<ClientId, std::uint64_t> round_received;

  std::size_t size() const { return latest.size(); }
  bool contains(ClientId id) const { return latest.contains(id); }

  // False (and nothing stored) when `m` is older than what is held.
  bool store(Messenger m) {
    const auto it = round_received.find(m.client_id);
    if (it != round_received.end() && m.round < it->second) return false;
    round_received[m.client_id] = m.round;
    latest.insert_or_assign(m.client_id, std::move(m));
    return true;
  }
};

// Neighbor messengers handed back to each client.
using NeighborMap = std::map<ClientId, std::vector<Messenger>>;

class CoordinationServer {
 public:
  explicit CoordinationServer(ReferenceSet ref) : ref_(std::move(ref)) {}

  const ReferenceSet& reference() const noexcept { return ref_; }
  const MessengerRepository& repository() const noexcept { return repo_; }
  const QualityTable& quality() const noexcept { return quality_; }
  const CollaborationGraph& graph() const noexcept { return graph_; }
  const std::set<ClientId>& registered() const noexcept { return registered_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  void register_client(ClientId id) {
    if (!registered_.insert(id).second)
      throw ProtocolError("client " + std::to_string(id) + " is already registered");
  }

  void receive_messenger(Messenger m) {
    if (!registered_.contains(m.client_id))
      throw ProtocolError("messenger from unregistered client " + std::to_string(m.client_id));
    try {
      m.validate(ref_.size(), ref_.num_classes());
    } catch (const Error& e) {
      throw ProtocolError(std::string("rejected messenger: ") + e.what());
    }
    const ClientId id = m.client_id;
    const auto round = m.round;
    const double score = score_quality(m, ref_);
    if (!repo_.store(std::move(m))) {
      warnings_.push_back("ignored stale messenger from client " + std::to_string(id) + " (round " +
                          std::to_string(round) + " < " + std::to_string(repo_.round_received.at(id)) + ")");
      return;
    }
    quality_.scores[id] = score;
  }

  // Applies a round's messengers in client-id order so the outcome does not
  // depend on arrival order.
  void receive_batch(std::vector<Messenger> batch) {
    std::stable_sort(batch.begin(), batch.end(),
                     [](const Messenger& a, const Messenger& b) { return a.client_id < b.client_id; });
    for (auto& m : batch) receive_messenger(std::move(m));
  }

  // Recomputes Q, the weight matrix and every registered client's K^n.
  // Clients that have never communicated get an empty set and are not
  // candidates for anyone else.
  NeighborMap server_round(const ServerConfig& config, Rng& selection_stream) {
    config.validate();

    std::vector<ClientId> communicating;
    for (const auto& [id, m] : repo_.latest) communicating.push_back(id);

    if (config.quality_filter_enabled) {
      quality_.quality_set = select_quality_set(quality_.scores, config.q);
    } else {
      quality_.quality_set = select_quality_set(quality_.scores, std::max<std::size_t>(1, quality_.scores.size()));
    }

    // Full pairwise divergence matrix over communicating clients.
    const std::size_t n = communicating.size();
    Matrix divergence(n, n);
    std::map<ClientId, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[communicating[i]] = i;
    {
      std::vector<Matrix> normalized;
      normalized.reserve(n);
      for (ClientId id : communicating)
        normalized.push_back(detail::floor_and_renormalize(repo_.latest.at(id).soft_decisions));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) divergence(i, j) = std::max(0.0, detail::mean_row_kl(normalized[i], normalized[j]));
    }

    graph_.client_ids = communicating;
    graph_.weights = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) graph_.weights(i, j) = detail::similarity_from_divergence(divergence(i, j));
    graph_.neighbor_sets.clear();

    NeighborMap out;
    for (ClientId id : registered_) {
      auto& dispatched = out[id];
      if (!repo_.contains(id)) {
        graph_.neighbor_sets[id] = {};
        continue;
      }
      std::vector<NeighborLink> candidates;
      for (ClientId m : quality_.quality_set) {
        if (m == id) continue;
        const double d = divergence(index.at(id), index.at(m));
        candidates.push_back({m, d, detail::similarity_from_divergence(d)});
      }
      std::vector<NeighborLink> chosen;
      if (config.similarity_selection == SimilaritySelection::nearest) {
        chosen = rank_neighbors(std::move(candidates), config.k);
      } else {
        // Uniform k-subset via a partial Fisher-Yates over Q \ {n} (Q order).
        const std::size_t take = std::min(config.k, candidates.size());
        for (std::size_t i = 0; i < take; ++i) {
          const auto j = i + static_cast<std::size_t>(selection_stream.below(candidates.size() - i));
          std::swap(candidates[i], candidates[j]);
        }
        candidates.resize(take);
        chosen = std::move(candidates);
      }
      dispatched.reserve(chosen.size());
      for (const auto& link : chosen) dispatched.push_back(repo_.latest.at(link.client_id));
      graph_.neighbor_sets[id] = std::move(chosen);
    }
    return out;
  }

  // Debug/test view: repository rounds, scores, Q, neighbor ids and weights.
  // Infinite similarities are written as null.
  nlohmann::json snapshot() const {
    nlohmann::json j;
    j["registered"] = std::vector<ClientId>(registered_.begin(), registered_.end());
    auto& rounds = j["repository_rounds"] = nlohmann::json::object();
    for (const auto& [id, r] : repo_.round_received) rounds[std::to_string(id)] = r;
    auto& scores = j["scores"] = nlohmann::json::object();
    for (const auto& [id, g] : quality_.scores) scores[std::to_string(id)] = g;
    j["quality_set"] = quality_.quality_set;
    auto& neighbors = j["neighbors"] = nlohmann::json::object();
    for (const auto& [id, links] : graph_.neighbor_sets) {
      auto arr = nlohmann::json::array();
      for (const auto& l : links) arr.push_back(l.client_id);
      neighbors[std::to_string(id)] = std::move(arr);
    }
    j["weight_ids"] = graph_.client_ids;
    auto weights = nlohmann::json::array();
    for (std::size_t i = 0; i < graph_.weights.rows(); ++i) {
      auto row = nlohmann::json::array();
      for (double w : graph_.weights.row(i)) {
        if (std::isfinite(w))
          row.push_back(w);
        else
          row.push_back(nullptr);
      }
      weights.push_back(std::move(row));
    }
    j["weights"] = std::move(weights);
    return j;
  }

 private:
  ReferenceSet ref_;
  std::set<ClientId> registered_;
  MessengerRepository repo_;
  QualityTable quality_;
  CollaborationGraph graph_;
  std::vector<std::string> warnings_;
};

}  // namespace sqmd
