#pragma once

// Round-based experiment driver. One round is one global iteration: clients
// that are due exchange messengers through the server (or the baseline's
// substitute), then every active client takes one local step.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sqmd/client.hpp"
#include "sqmd/config.hpp"
#include "sqmd/data.hpp"
#include "sqmd/partition.hpp"
#include "sqmd/protocol.hpp"
#include "sqmd/record.hpp"
#include "sqmd/rng.hpp"
#include "sqmd/server.hpp"

namespace sqmd {

// Read-only view handed to observers.
struct RoundView {
  std::size_t round = 0;
  std::span<const ClientState> clients;      // all clients, index = id
  std::span<const ClientId> active;          // joined so far
  std::span<const ClientId> communicated;    // exchanged messengers this round
  std::span<const Messenger> messengers;     // what `communicated` sent, same order
  const CoordinationServer* server = nullptr;  // null for D-Dist and I-SGD
  const ReferenceSet* reference = nullptr;
};

// Hooks for tests and diagnostics. `after_exchange` fires once neighbor
// means are in place but before the round's local steps; `after_step` after
// the steps and evaluation.
struct SimObserver {
  std::function<void(const RoundView&)> after_exchange;
  std::function<void(const RoundView&)> after_step;
};

// Everything derived from a config before the first round.
struct SimSetup {
  Dataset pool;
  Partition partition;
  ReferenceSet reference;
  std::vector<ClientState> clients;
  std::string partition_hash;
};

namespace detail {

inline std::string hash_partition(const Partition& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](std::uint64_t v) { h = splitmix64(h ^ v); };
  mix(p.reference.size());
  for (auto i : p.reference) mix(i);
  for (const auto& s : p.client_slices) {
    mix(s.size() ^ 0xabcdefull);
    for (auto i : s) mix(i);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> labels;
  labels.reserve(idx.size());
  for (auto i : idx) labels.push_back(ds.labels[i]);
  return Batch::from_indices(gather_rows(ds.features, idx), labels, ds.num_classes);
}

inline ServerConfig effective_server_config(const SimConfig& c) {
  if (c.protocol == Protocol::fedmd) {
    // Everyone distills from everyone else: no filter, k saturated.
    return {c.num_clients, c.num_clients, false, SimilaritySelection::nearest};
  }
  return c.server;
}

}  // namespace detail

inline std::vector<ModelSpec> expand_model_mix(const SimConfig& c, std::size_t input_dim, std::size_t num_classes) {
  std::vector<ModelSpec> specs;
  for (const auto& m : c.model_mix) {
    ModelSpec s;
    s.spec_id = m.spec_id;
    s.layer_sizes.push_back(input_dim);
    s.layer_sizes.insert(s.layer_sizes.end(), m.hidden.begin(), m.hidden.end());
    s.layer_sizes.push_back(num_classes);
    for (std::size_t i = 0; i < m.count; ++i) specs.push_back(s);
  }
  return specs;
}

// Loads data, partitions it and builds every client (parameters initialized,
// splits drawn, training split sparsified).
inline SimSetup prepare_simulation(const SimConfig& config) {
  config.validate();
  SimSetup setup;
  setup.pool = load_dataset(config.dataset, config.seed, config.base_dir);
  if (setup.pool.num_classes == 0) throw ConfigError("dataset has no classes");

  PartitionSpec pspec = config.partition;
  std::optional<Dataset> external_ref;
  if (config.reference_dataset) {
    external_ref = load_dataset(*config.reference_dataset, config.seed, config.base_dir);
    pspec.reference_size = 0;
    pspec.reference_fraction = 0.0;
  }
  setup.partition =
      partition_dataset(setup.pool.labels, setup.pool.num_classes, pspec, config.num_clients, config.seed);
  setup.partition_hash = detail::hash_partition(setup.partition);

  if (external_ref) {
    if (external_ref->features.cols() != setup.pool.features.cols())
      throw ConfigError("reference_dataset feature width differs from dataset");
    std::vector<std::size_t> all(external_ref->size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    external_ref->num_classes = setup.pool.num_classes;
    auto b = detail::make_batch(*external_ref, all);
    setup.reference = ReferenceSet::make(std::move(b.features), std::move(b.labels));
  } else {
    auto b = detail::make_batch(setup.pool, setup.partition.reference);
    setup.reference = ReferenceSet::make(std::move(b.features), std::move(b.labels));
  }
  if (setup.reference.size() == 0) throw ConfigError("reference set is empty");

  const auto specs = expand_model_mix(config, setup.pool.features.cols(), setup.pool.num_classes);
  setup.clients.reserve(config.num_clients);
  for (std::size_t n = 0; n < config.num_clients; ++n) {
    const auto split = split_train_val_test(setup.partition.client_slices[n], stream_seed(config.seed, "split", n));
    const auto train = sparsify(split.train, config.sparsity, stream_seed(config.seed, "sparsify", n));
    LocalData data{detail::make_batch(setup.pool, train), detail::make_batch(setup.pool, split.val),
                   detail::make_batch(setup.pool, split.test)};
    if (data.train.size() == 0)
      throw ConfigError("client " + std::to_string(n) + " has no training samples");
    for (Split s : config.eval_splits)
      if (data.get(s).size() == 0)
        throw ConfigError("client " + std::to_string(n) + " has an empty " + to_string(s) +
                          " split; give it more data or drop the split from eval_splits");
    setup.clients.push_back(make_client(static_cast<ClientId>(n), specs[n], std::move(data), config.seed));
  }
  return setup;
}

inline RunRecord run_simulation(const SimConfig& config, const SimObserver& observer = {}) {
  auto setup = prepare_simulation(config);
  auto& clients = setup.clients;
  const auto& ref = setup.reference;
  const auto& hyper = config.hyper;
  const auto starts = config.start_rounds();
  const ServerConfig server_cfg = detail::effective_server_config(config);
  const bool uses_server = config.protocol == Protocol::sqmd || config.protocol == Protocol::fedmd;

  RunRecord record;
  record.protocol = to_string(config.protocol);
  record.seed = config.seed;
  record.config = to_json(config);
  record.config_hash = config_hash(config);
  record.partition_hash = setup.partition_hash;
  for (const auto& c : clients) record.client_specs[c.id] = c.spec.spec_id;

  std::optional<CoordinationServer> server;
  if (uses_server) server.emplace(ref);
  Rng selection_stream(config.seed, "server.random_selection");

  // D-Dist: static peer groups drawn once at join, exchanged through a plain
  // repository with no grading or ranking.
  MessengerRepository peer_repo;
  std::map<ClientId, std::vector<ClientId>> static_groups;

  std::vector<ClientId> active;
  for (std::size_t t = 1; t <= hyper.total_iterations; ++t) {
    for (std::size_t n = 0; n < clients.size(); ++n) {
      if (starts[n] != t) continue;
      const auto id = static_cast<ClientId>(n);
      active.push_back(id);
      if (server) server->register_client(id);
      if (config.protocol == Protocol::d_dist) {
        std::vector<ClientId> others;
        for (std::size_t m = 0; m < clients.size(); ++m)
          if (m != n) others.push_back(static_cast<ClientId>(m));
        Rng group_rng(config.seed, "ddist.group", n);
        group_rng.shuffle(others);
        others.resize(std::min(config.server.k, others.size()));
        std::sort(others.begin(), others.end());
        static_groups[id] = std::move(others);
      }
    }
    std::sort(active.begin(), active.end());

    RoundRecord rr;
    rr.round = t;
    rr.active_clients = active;

    std::vector<ClientId> communicated;
    std::vector<Messenger> sent;
    if (config.protocol != Protocol::i_sgd) {
      for (ClientId id : active) {
        auto& c = clients[static_cast<std::size_t>(id)];
        if (!communication_due(c, hyper)) continue;
        communicated.push_back(id);
        sent.push_back(make_messenger(c, ref, t));
      }
    }

    if (!communicated.empty()) {
      if (server) {
        server->receive_batch(sent);
        auto neighbor_map = server->server_round(server_cfg, selection_stream);
        rr.quality_set = server->quality().quality_set;
        for (ClientId id : communicated) {
          const auto& k = neighbor_map[id];
          accept_neighbors(clients[static_cast<std::size_t>(id)], k);
          auto& ids = rr.neighbors[id];
          for (const auto& m : k) ids.push_back(m.client_id);
        }
      } else {
        for (const auto& m : sent) peer_repo.store(m);
        for (ClientId id : communicated) {
          std::vector<Messenger> k;
          for (ClientId peer : static_groups.at(id))
            if (peer_repo.contains(peer)) k.push_back(peer_repo.latest.at(peer));
          accept_neighbors(clients[static_cast<std::size_t>(id)], k);
          auto& ids = rr.neighbors[id];
          for (const auto& m : k) ids.push_back(m.client_id);
        }
      }
    }

    auto view = [&] {
      RoundView v;
      v.round = t;
      v.clients = clients;
      v.active = active;
      v.communicated = communicated;
      v.messengers = sent;
      v.server = server ? &*server : nullptr;
      v.reference = &ref;
      return v;
    };
    if (observer.after_exchange) observer.after_exchange(view());

    for (ClientId id : active) client_step(clients[static_cast<std::size_t>(id)], hyper, ref.features());

    if (t % config.eval_every == 0 || t == hyper.total_iterations) {
      for (ClientId id : active) {
        const auto& c = clients[static_cast<std::size_t>(id)];
        std::optional<double> score;
        bool in_q = false;
        if (server) {
          const auto& q = server->quality();
          if (auto it = q.scores.find(id); it != q.scores.end()) score = it->second;
          in_q = q.contains(id);
        }
        for (Split s : config.eval_splits) rr.metrics.push_back({t, id, s, evaluate(c, s), score, in_q});
      }
    }
    if (observer.after_step) observer.after_step(view());
    record.rounds.push_back(std::move(rr));
  }

  for (ClientId id : active) record.final_test[id] = evaluate(clients[static_cast<std::size_t>(id)], Split::test);
  RunSummary s;
  for (const auto& [id, m] : record.final_test) {
    s.accuracy += m.accuracy;
    s.precision += m.precision;
    s.recall += m.recall;
  }
  s.clients = record.final_test.size();
  if (s.clients > 0) {
    const double inv = 1.0 / static_cast<double>(s.clients);
    s.accuracy *= inv;
    s.precision *= inv;
    s.recall *= inv;
  }
  record.summary = s;
  return record;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  nlohmann::json swept;  // field path -> value for this record
  RunSummary summary;
  std::string protocol;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::vector<std::string> fields;
  std::vector<RunRecord> records;
  std::vector<SweepRow> table;
};

namespace detail {

// "server.k" -> "/server/k"
inline nlohmann::json::json_pointer field_pointer(const std::string& field) {
  std::string p = "/";
  for (char c : field) p.push_back(c == '.' ? '/' : c);
  return nlohmann::json::json_pointer(p);
}

}  // namespace detail

// Runs configs that differ only in `swept_fields` (dotted JSON paths such as
// "server.k" or "sparsity").
inline SweepResult sweep(const std::vector<SimConfig>& configs, const std::vector<std::string>& swept_fields,
                         const SimObserver& observer = {}) {
  if (configs.empty()) throw ConfigError("sweep needs at least one config");
  auto strip = [&](const SimConfig& c) {
    auto j = to_json(c);
    for (const auto& f : swept_fields) {
      const auto ptr = detail::field_pointer(f);
      if (!j.contains(ptr)) throw ConfigError("swept field '" + f + "' does not exist in the config");
      j[ptr] = nullptr;
    }
    return j;
  };
  const auto reference = strip(configs.front());
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const auto diff = nlohmann::json::diff(reference, strip(configs[i]));
    if (!diff.empty())
      throw ConfigError("sweep config " + std::to_string(i) + " differs outside the swept fields at '" +
                        diff.front().value("path", std::string("?")) + "'");
  }

  SweepResult out;
  out.fields = swept_fields;
  for (const auto& c : configs) {
    auto rec = run_simulation(c, observer);
    SweepRow row;
    const auto j = to_json(c);
    row.swept = nlohmann::json::object();
    for (const auto& f : swept_fields) row.swept[f] = j.at(detail::field_pointer(f));
    row.summary = rec.summary;
    row.protocol = rec.protocol;
    row.seed = rec.seed;
    out.table.push_back(std::move(row));
    out.records.push_back(std::move(rec));
  }
  return out;
}

inline void write_comparison_csv(std::ostream& out, const SweepResult& s) {
  for (const auto& f : s.fields) out << f << ',';
  out << "protocol,seed,accuracy,precision,recall\n";
  for (const auto& row : s.table) {
    for (const auto& f : s.fields) out << row.swept.at(f).dump() << ',';
    out << row.protocol << ',' << row.seed << ',' << detail::format_double(row.summary.accuracy) << ','
        << detail::format_double(row.summary.precision) << ',' << detail::format_double(row.summary.recall) << '\n';
  }
}

}  // namespace sqmd
