#pragma once

// Experiment description (SimConfig) and its JSON form.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sqmd/client.hpp"
#include "sqmd/data.hpp"
#include "sqmd/errors.hpp"
#include "sqmd/partition.hpp"
#include "sqmd/rng.hpp"
#include "sqmd/server.hpp"

namespace sqmd {

enum class Protocol { sqmd, fedmd, d_dist, i_sgd };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::sqmd: return "SQMD";
    case Protocol::fedmd: return "FedMD";
    case Protocol::d_dist: return "D-Dist";
    case Protocol::i_sgd: return "I-SGD";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  std::string u;
  for (char c : s)
    if (c != '-' && c != '_') u.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (u == "sqmd") return Protocol::sqmd;
  if (u == "fedmd") return Protocol::fedmd;
  if (u == "ddist") return Protocol::d_dist;
  if (u == "isgd") return Protocol::i_sgd;
  throw ConfigError("unknown protocol '" + s + "' (expected SQMD, FedMD, D-Dist or I-SGD)");
}

// `count` clients share one architecture: input dim -> hidden... -> classes.
struct ModelMixEntry {
  std::string spec_id;
  std::vector<std::size_t> hidden;
  std::size_t count = 0;

  bool operator==(const ModelMixEntry&) const = default;
};

struct JoinGroup {
  std::string name;
  std::vector<ClientId> clients;
  std::size_t start_round = 1;

  bool operator==(const JoinGroup&) const = default;
};

struct SimConfig {
  DatasetDescriptor dataset;
  std::optional<DatasetDescriptor> reference_dataset;  // explicit reference data instead of a fraction
  std::size_t num_clients = 4;
  std::vector<ModelMixEntry> model_mix;
  PartitionSpec partition;
  TrainHyper hyper;
  ServerConfig server;
  Protocol protocol = Protocol::sqmd;
  double sparsity = 100.0;
  std::vector<JoinGroup> join_schedule;  // empty: everyone starts at round 1
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;
  std::vector<Split> eval_splits{Split::test};

  // Not serialized: directory that relative dataset paths resolve against.
  std::filesystem::path base_dir;

  // Start round of every client (index = client id).
  std::vector<std::size_t> start_rounds() const {
    std::vector<std::size_t> out(num_clients, 1);
    for (const auto& g : join_schedule)
      for (ClientId id : g.clients) out[static_cast<std::size_t>(id)] = g.start_round;
    return out;
  }

  void validate() const {
    if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
    if (model_mix.empty()) throw ConfigError("model_mix must list at least one architecture");
    std::size_t total = 0;
    for (const auto& m : model_mix) {
      if (m.count == 0) throw ConfigError("model_mix entry '" + m.spec_id + "' has count 0");
      for (auto h : m.hidden)
        if (h == 0) throw ConfigError("model_mix entry '" + m.spec_id + "' has a zero-width hidden layer");
      total += m.count;
    }
    if (total != num_clients)
      throw ConfigError("model_mix counts sum to " + std::to_string(total) + " but num_clients is " +
                        std::to_string(num_clients));
    if (!(sparsity > 0.0 && sparsity <= 100.0)) throw ConfigError("sparsity must lie in (0, 100]");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    hyper.validate();
    server.validate();
    if (!join_schedule.empty()) {
      std::set<ClientId> seen;
      std::size_t prev = 0;
      for (const auto& g : join_schedule) {
        if (g.start_round < 1) throw ConfigError("join_schedule start rounds must be >= 1");
        if (g.start_round < prev) throw ConfigError("join_schedule start rounds must be non-decreasing");
        prev = g.start_round;
        for (ClientId id : g.clients) {
          if (id < 0 || static_cast<std::size_t>(id) >= num_clients)
            throw ConfigError("join_schedule names unknown client " + std::to_string(id));
          if (!seen.insert(id).second)
            throw ConfigError("join_schedule groups must partition the clients; client " + std::to_string(id) +
                              " appears twice");
        }
      }
      if (seen.size() != num_clients)
        throw ConfigError("join_schedule groups must partition the clients; " +
                          std::to_string(num_clients - seen.size()) + " client(s) missing");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline const char* to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::idx_images: return "idx_images";
    case DatasetKind::csv_rows: return "csv_rows";
    case DatasetKind::synthetic_gaussian: return "synthetic_gaussian";
    case DatasetKind::synthetic_rings: return "synthetic_rings";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  for (auto k : {DatasetKind::idx_images, DatasetKind::csv_rows, DatasetKind::synthetic_gaussian,
                 DatasetKind::synthetic_rings})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

inline const char* to_string(Normalization n) {
  switch (n) {
    case Normalization::none: return "none";
    case Normalization::minmax: return "minmax";
    case Normalization::zscore: return "zscore";
  }
  return "?";
}

inline Normalization parse_normalization(const std::string& s) {
  for (auto n : {Normalization::none, Normalization::minmax, Normalization::zscore})
    if (s == to_string(n)) return n;
  throw ConfigError("unknown normalization '" + s + "'");
}

inline PartitionPolicy parse_partition_policy(const std::string& s) {
  for (auto p : {PartitionPolicy::even_random, PartitionPolicy::class_removal, PartitionPolicy::cluster_skew})
    if (s == sqmd::to_string(p)) return p;
  throw ConfigError("unknown partition policy '" + s + "'");
}

inline Split parse_split(const std::string& s) {
  for (auto sp : {Split::train, Split::val, Split::test})
    if (s == sqmd::to_string(sp)) return sp;
  throw ConfigError("unknown split '" + s + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const DatasetDescriptor& d) {
  nlohmann::json j;
  j["kind"] = detail::to_string(d.kind);
  switch (d.kind) {
    case DatasetKind::idx_images:
      j["images_path"] = d.images_path;
      j["labels_path"] = d.labels_path;
      break;
    case DatasetKind::csv_rows:
      j["csv_path"] = d.csv_path;
      j["label_column"] = d.label_column;
      break;
    default: {
      const auto& p = d.synthetic;
      nlohmann::json s;
      s["num_classes"] = p.num_classes;
      s["feature_dim"] = p.feature_dim;
      s["sample_count"] = p.sample_count;
      s["class_priors"] = p.class_priors;
      s["means"] = p.means;
      s["separation"] = p.separation;
      s["stddev"] = p.stddev;
      s["covariances"] = p.covariances;
      j["synthetic"] = std::move(s);
    }
  }
  j["num_classes"] = d.num_classes;
  j["limit"] = d.limit;
  if (d.normalization) j["normalization"] = detail::to_string(*d.normalization);
  return j;
}

inline DatasetDescriptor dataset_from_json(const nlohmann::json& j, const std::string& where) {
  detail::reject_unknown_keys(
      j, {"kind", "images_path", "labels_path", "csv_path", "label_column", "num_classes", "limit", "synthetic",
          "normalization"},
      where);
  DatasetDescriptor d;
  d.kind = detail::parse_dataset_kind(detail::get_or<std::string>(j, "kind", "synthetic_gaussian", where));
  d.images_path = detail::get_or<std::string>(j, "images_path", "", where);
  d.labels_path = detail::get_or<std::string>(j, "labels_path", "", where);
  d.csv_path = detail::get_or<std::string>(j, "csv_path", "", where);
  d.label_column = detail::get_or<std::string>(j, "label_column", "label", where);
  d.num_classes = detail::get_or<std::size_t>(j, "num_classes", 0, where);
  d.limit = detail::get_or<std::size_t>(j, "limit", 0, where);
  if (j.contains("normalization"))
    d.normalization = detail::parse_normalization(j.at("normalization").get<std::string>());
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    const std::string w = where + ".synthetic";
    detail::reject_unknown_keys(s,
                                {"num_classes", "feature_dim", "sample_count", "class_priors", "means",
                                 "separation", "stddev", "covariances"},
                                w);
    auto& p = d.synthetic;
    p.num_classes = detail::get_or<std::size_t>(s, "num_classes", p.num_classes, w);
    p.feature_dim = detail::get_or<std::size_t>(s, "feature_dim", p.feature_dim, w);
    p.sample_count = detail::get_or<std::size_t>(s, "sample_count", p.sample_count, w);
    p.class_priors = detail::get_or<std::vector<double>>(s, "class_priors", {}, w);
    p.means = detail::get_or<std::vector<std::vector<double>>>(s, "means", {}, w);
    p.separation = detail::get_or<double>(s, "separation", p.separation, w);
    p.stddev = detail::get_or<double>(s, "stddev", p.stddev, w);
    p.covariances = detail::get_or<std::vector<std::vector<std::vector<double>>>>(s, "covariances", {}, w);
  }
  return d;
}

inline nlohmann::json to_json(const SimConfig& c) {
  nlohmann::json j;
  j["dataset"] = to_json(c.dataset);
  if (c.reference_dataset) j["reference_dataset"] = to_json(*c.reference_dataset);
  j["num_clients"] = c.num_clients;
  auto mix = nlohmann::json::array();
  for (const auto& m : c.model_mix) mix.push_back({{"spec_id", m.spec_id}, {"hidden", m.hidden}, {"count", m.count}});
  j["model_mix"] = std::move(mix);
  j["partition"] = {{"policy", to_string(c.partition.policy)},
                    {"reference_fraction", c.partition.reference_fraction},
                    {"reference_size", c.partition.reference_size},
                    {"num_clusters", c.partition.num_clusters},
                    {"classes_per_cluster", c.partition.classes_per_cluster},
                    {"concentration", c.partition.concentration}};
  j["hyper"] = {{"rho", c.hyper.rho},
                {"learning_rate", c.hyper.learning_rate},
                {"interval", c.hyper.interval},
                {"batch_size", c.hyper.batch_size},
                {"full_batch", c.hyper.full_batch},
                {"total_iterations", c.hyper.total_iterations}};
  j["server"] = {{"q", c.server.q},
                 {"k", c.server.k},
                 {"quality_filter", c.server.quality_filter_enabled},
                 {"similarity_selection", to_string(c.server.similarity_selection)}};
  j["protocol"] = to_string(c.protocol);
  j["sparsity"] = c.sparsity;
  auto sched = nlohmann::json::array();
  for (const auto& g : c.join_schedule)
    sched.push_back({{"name", g.name}, {"clients", g.clients}, {"start_round", g.start_round}});
  j["join_schedule"] = std::move(sched);
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  auto splits = nlohmann::json::array();
  for (auto s : c.eval_splits) splits.push_back(to_string(s));
  j["eval_splits"] = std::move(splits);
  return j;
}

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  const std::string w = "config";
  detail::reject_unknown_keys(j,
                              {"dataset", "reference_dataset", "num_clients", "model_mix", "partition", "hyper",
                               "server", "protocol", "sparsity", "join_schedule", "seed", "eval_every",
                               "eval_splits"},
                              w);
  SimConfig c;
  if (!j.contains("dataset")) throw ConfigError("config.dataset is required");
  c.dataset = dataset_from_json(j.at("dataset"), "config.dataset");
  if (j.contains("reference_dataset"))
    c.reference_dataset = dataset_from_json(j.at("reference_dataset"), "config.reference_dataset");
  c.num_clients = detail::get_or<std::size_t>(j, "num_clients", c.num_clients, w);

  if (!j.contains("model_mix")) throw ConfigError("config.model_mix is required");
  for (const auto& m : j.at("model_mix")) {
    detail::reject_unknown_keys(m, {"spec_id", "hidden", "count"}, "config.model_mix[]");
    ModelMixEntry e;
    e.spec_id = detail::get_or<std::string>(m, "spec_id", "", "config.model_mix[]");
    e.hidden = detail::get_or<std::vector<std::size_t>>(m, "hidden", {}, "config.model_mix[]");
    e.count = detail::get_or<std::size_t>(m, "count", 0, "config.model_mix[]");
    c.model_mix.push_back(std::move(e));
  }

  if (j.contains("partition")) {
    const auto& p = j.at("partition");
    const std::string pw = "config.partition";
    detail::reject_unknown_keys(p,
                                {"policy", "reference_fraction", "reference_size", "num_clusters",
                                 "classes_per_cluster", "concentration"},
                                pw);
    c.partition.policy = detail::parse_partition_policy(detail::get_or<std::string>(p, "policy", "even_random", pw));
    c.partition.reference_fraction = detail::get_or<double>(p, "reference_fraction", c.partition.reference_fraction, pw);
    c.partition.reference_size = detail::get_or<std::size_t>(p, "reference_size", 0, pw);
    c.partition.num_clusters = detail::get_or<std::size_t>(p, "num_clusters", c.partition.num_clusters, pw);
    c.partition.classes_per_cluster =
        detail::get_or<std::size_t>(p, "classes_per_cluster", c.partition.classes_per_cluster, pw);
    c.partition.concentration = detail::get_or<double>(p, "concentration", c.partition.concentration, pw);
  }
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    const std::string hw = "config.hyper";
    detail::reject_unknown_keys(h, {"rho", "learning_rate", "interval", "batch_size", "full_batch", "total_iterations"},
                                hw);
    c.hyper.rho = detail::get_or<double>(h, "rho", c.hyper.rho, hw);
    c.hyper.learning_rate = detail::get_or<double>(h, "learning_rate", c.hyper.learning_rate, hw);
    c.hyper.interval = detail::get_or<std::size_t>(h, "interval", c.hyper.interval, hw);
    c.hyper.batch_size = detail::get_or<std::size_t>(h, "batch_size", c.hyper.batch_size, hw);
    c.hyper.full_batch = detail::get_or<bool>(h, "full_batch", c.hyper.full_batch, hw);
    c.hyper.total_iterations = detail::get_or<std::size_t>(h, "total_iterations", c.hyper.total_iterations, hw);
  }
  if (j.contains("server")) {
    const auto& s = j.at("server");
    const std::string sw = "config.server";
    detail::reject_unknown_keys(s, {"q", "k", "quality_filter", "similarity_selection"}, sw);
    c.server.q = detail::get_or<std::size_t>(s, "q", c.server.q, sw);
    c.server.k = detail::get_or<std::size_t>(s, "k", c.server.k, sw);
    c.server.quality_filter_enabled = detail::get_or<bool>(s, "quality_filter", true, sw);
    const auto sel = detail::get_or<std::string>(s, "similarity_selection", "nearest", sw);
    if (sel == "nearest")
      c.server.similarity_selection = SimilaritySelection::nearest;
    else if (sel == "random")
      c.server.similarity_selection = SimilaritySelection::random;
    else
      throw ConfigError("config.server.similarity_selection must be 'nearest' or 'random'");
  }
  c.protocol = parse_protocol(detail::get_or<std::string>(j, "protocol", "SQMD", w));
  c.sparsity = detail::get_or<double>(j, "sparsity", c.sparsity, w);
  if (j.contains("join_schedule")) {
    for (const auto& g : j.at("join_schedule")) {
      detail::reject_unknown_keys(g, {"name", "clients", "start_round"}, "config.join_schedule[]");
      JoinGroup jg;
      jg.name = detail::get_or<std::string>(g, "name", "", "config.join_schedule[]");
      jg.clients = detail::get_or<std::vector<ClientId>>(g, "clients", {}, "config.join_schedule[]");
      jg.start_round = detail::get_or<std::size_t>(g, "start_round", 1, "config.join_schedule[]");
      c.join_schedule.push_back(std::move(jg));
    }
  }
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, w);
  c.eval_every = detail::get_or<std::size_t>(j, "eval_every", c.eval_every, w);
  if (j.contains("eval_splits")) {
    c.eval_splits.clear();
    for (const auto& s : j.at("eval_splits")) c.eval_splits.push_back(detail::parse_split(s.get<std::string>()));
  }
  return c;
}

inline SimConfig load_sim_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  auto c = sim_config_from_json(j);
  c.base_dir = path.parent_path();
  return c;
}

// Stable 64-bit fingerprint of the serialized config, as 16 hex digits.
inline std::string config_hash(const SimConfig& c) {
  const auto h = fnv1a64(to_json(c).dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sqmd
