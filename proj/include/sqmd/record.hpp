#pragma once

// RunRecord: everything a simulation run reports, with JSON and CSV forms.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sqmd/client.hpp"
#include "sqmd/config.hpp"
#include "sqmd/errors.hpp"

namespace sqmd {

struct MetricsRow {
  std::size_t round = 0;
  ClientId client_id = 0;
  Split split = Split::test;
  Metrics metrics;
  std::optional<double> quality_score;  // absent when no server graded this client
  bool in_quality_set = false;

  bool operator==(const MetricsRow&) const = default;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ClientId> active_clients;
  std::vector<ClientId> quality_set;
  // Neighbor ids handed to each client that communicated this round.
  std::map<ClientId, std::vector<ClientId>> neighbors;
  std::vector<MetricsRow> metrics;

  bool operator==(const RoundRecord&) const = default;
};

struct RunSummary {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t clients = 0;

  bool operator==(const RunSummary&) const = default;
};

struct RunRecord {
  std::string protocol;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string partition_hash;
  nlohmann::json config;
  std::map<ClientId, std::string> client_specs;
  std::vector<RoundRecord> rounds;
  std::map<ClientId, Metrics> final_test;
  RunSummary summary;

  bool operator==(const RunRecord&) const = default;

  const RoundRecord* find_round(std::size_t r) const {
    for (const auto& rr : rounds)
      if (rr.round == r) return &rr;
    return nullptr;
  }
};

namespace detail {

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  return {j.at("accuracy").get<double>(), j.at("precision").get<double>(), j.at("recall").get<double>()};
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["protocol"] = r.protocol;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["partition_hash"] = r.partition_hash;
  j["config"] = r.config;
  auto specs = nlohmann::json::object();
  for (const auto& [id, s] : r.client_specs) specs[std::to_string(id)] = s;
  j["client_specs"] = std::move(specs);
  auto rounds = nlohmann::json::array();
  for (const auto& rr : r.rounds) {
    nlohmann::json jr;
    jr["round"] = rr.round;
    jr["active_clients"] = rr.active_clients;
    jr["quality_set"] = rr.quality_set;
    auto nb = nlohmann::json::object();
    for (const auto& [id, ids] : rr.neighbors) nb[std::to_string(id)] = ids;
    jr["neighbors"] = std::move(nb);
    auto rows = nlohmann::json::array();
    for (const auto& m : rr.metrics) {
      nlohmann::json jm = detail::metrics_json(m.metrics);
      jm["client_id"] = m.client_id;
      jm["split"] = to_string(m.split);
      jm["quality_score"] = m.quality_score ? nlohmann::json(*m.quality_score) : nlohmann::json(nullptr);
      jm["in_Q"] = m.in_quality_set;
      rows.push_back(std::move(jm));
    }
    jr["metrics"] = std::move(rows);
    rounds.push_back(std::move(jr));
  }
  j["rounds"] = std::move(rounds);
  auto fin = nlohmann::json::object();
  for (const auto& [id, m] : r.final_test) fin[std::to_string(id)] = detail::metrics_json(m);
  j["final_test"] = std::move(fin);
  j["summary"] = {{"accuracy", r.summary.accuracy},
                  {"precision", r.summary.precision},
                  {"recall", r.summary.recall},
                  {"clients", r.summary.clients}};
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.protocol = j.at("protocol").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.partition_hash = j.at("partition_hash").get<std::string>();
    r.config = j.at("config");
    for (const auto& [k, v] : j.at("client_specs").items()) r.client_specs[std::stoi(k)] = v.get<std::string>();
    for (const auto& jr : j.at("rounds")) {
      RoundRecord rr;
      rr.round = jr.at("round").get<std::size_t>();
      rr.active_clients = jr.at("active_clients").get<std::vector<ClientId>>();
      rr.quality_set = jr.at("quality_set").get<std::vector<ClientId>>();
      for (const auto& [k, v] : jr.at("neighbors").items()) rr.neighbors[std::stoi(k)] = v.get<std::vector<ClientId>>();
      for (const auto& jm : jr.at("metrics")) {
        MetricsRow m;
        m.round = rr.round;
        m.client_id = jm.at("client_id").get<ClientId>();
        m.split = detail::parse_split(jm.at("split").get<std::string>());
        m.metrics = detail::metrics_from_json(jm);
        if (!jm.at("quality_score").is_null()) m.quality_score = jm.at("quality_score").get<double>();
        m.in_quality_set = jm.at("in_Q").get<bool>();
        rr.metrics.push_back(m);
      }
      r.rounds.push_back(std::move(rr));
    }
    for (const auto& [k, v] : j.at("final_test").items()) r.final_test[std::stoi(k)] = detail::metrics_from_json(v);
    const auto& s = j.at("summary");
    r.summary = {s.at("accuracy").get<double>(), s.at("precision").get<double>(), s.at("recall").get<double>(),
                 s.at("clients").get<std::size_t>()};
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run record: ") + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

inline RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run record '" + path.string() + "'");
  try {
    return run_record_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("run record '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline constexpr const char* kMetricsCsvHeader =
    "round,client_id,protocol,split,accuracy,precision,recall,quality_score,in_Q";

// Flat metrics table, one line per (round, client, split).
inline void write_metrics_csv(std::ostream& out, const RunRecord& r) {
  out << kMetricsCsvHeader << '\n';
  for (const auto& rr : r.rounds) {
    for (const auto& m : rr.metrics) {
      out << m.round << ',' << m.client_id << ',' << r.protocol << ',' << to_string(m.split) << ','
          << detail::format_double(m.metrics.accuracy) << ',' << detail::format_double(m.metrics.precision) << ','
          << detail::format_double(m.metrics.recall) << ','
          << (m.quality_score ? detail::format_double(*m.quality_score) : std::string()) << ','
          << (m.in_quality_set ? 1 : 0) << '\n';
    }
  }
}

inline void write_metrics_csv(const std::filesystem::path& path, const RunRecord& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  write_metrics_csv(out, r);
}

}  // namespace sqmd
