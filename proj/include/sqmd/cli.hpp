#pragma once

// Command-line front end: run, sweep, inspect, validate-config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sqmd/config.hpp"
#include "sqmd/record.hpp"
#include "sqmd/simulation.hpp"

namespace sqmd {

// Sweep files look like {"base": {<SimConfig>}, "sweep": {"server.k": [2, 4, 8]}}.
// Several swept fields expand to their cartesian product in sorted path order,
// the first path varying slowest.
struct SweepSpec {
  std::vector<SimConfig> configs;
  std::vector<std::string> fields;
};

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline bool is_sweep_document(const nlohmann::json& j) { return j.is_object() && j.contains("base") && j.contains("sweep"); }

}  // namespace detail

inline SweepSpec expand_sweep(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  detail::reject_unknown_keys(doc, {"base", "sweep"}, "sweep");
  const auto& axes = doc.at("sweep");
  if (!axes.is_object() || axes.empty()) throw ConfigError("sweep.sweep must map field paths to value lists");
  SweepSpec spec;
  std::vector<nlohmann::json> docs{doc.at("base")};
  for (const auto& [field, values] : axes.items()) {
    if (!values.is_array() || values.empty())
      throw ConfigError("sweep field '" + field + "' needs a non-empty list of values");
    spec.fields.push_back(field);
    const auto ptr = detail::field_pointer(field);
    std::vector<nlohmann::json> next;
    for (const auto& d : docs)
      for (const auto& v : values) {
        auto e = d;
        e[ptr] = v;
        next.push_back(std::move(e));
      }
    docs = std::move(next);
  }
  for (const auto& d : docs) {
    auto c = sim_config_from_json(d);
    c.base_dir = base_dir;
    spec.configs.push_back(std::move(c));
  }
  return spec;
}

namespace detail {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> protocol;

  void apply(SimConfig& c) const {
    if (seed) c.seed = *seed;
    if (protocol) c.protocol = parse_protocol(*protocol);
  }
};

inline std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline void print_summary(std::ostream& out, const RunRecord& r) {
  out << "protocol " << r.protocol << "  seed " << r.seed << "  config " << r.config_hash << "  partition "
      << r.partition_hash << '\n';
  out << "rounds " << r.rounds.size() << "  clients " << r.summary.clients << '\n';
  out << "mean test accuracy " << fmt4(r.summary.accuracy) << "  precision " << fmt4(r.summary.precision)
      << "  recall " << fmt4(r.summary.recall) << '\n';
}

inline void print_inspect(std::ostream& out, const RunRecord& r) {
  print_summary(out, r);
  out << "\nfinal test metrics\n";
  out << std::left << std::setw(8) << "client" << std::setw(12) << "spec" << std::setw(10) << "accuracy"
      << std::setw(11) << "precision" << "recall\n";
  for (const auto& [id, m] : r.final_test) {
    const auto spec = r.client_specs.count(id) ? r.client_specs.at(id) : std::string();
    out << std::left << std::setw(8) << id << std::setw(12) << spec << std::setw(10) << fmt4(m.accuracy)
        << std::setw(11) << fmt4(m.precision) << fmt4(m.recall) << '\n';
  }

  // One character per round: Q = in the quality set, . = active but not in
  // it, blank = not yet joined. Long runs are sampled to at most 100 columns.
  out << "\nquality-set membership by round\n";
  if (r.rounds.empty()) return;
  const std::size_t stride = (r.rounds.size() + 99) / 100;
  out << "(one column per " << stride << " round" << (stride == 1 ? "" : "s") << ", rounds " << r.rounds.front().round
      << ".." << r.rounds.back().round << ")\n";
  for (const auto& [id, spec] : r.client_specs) {
    std::string line;
    for (std::size_t i = 0; i < r.rounds.size(); i += stride) {
      const auto& rr = r.rounds[i];
      const bool active = std::find(rr.active_clients.begin(), rr.active_clients.end(), id) != rr.active_clients.end();
      const bool in_q = std::find(rr.quality_set.begin(), rr.quality_set.end(), id) != rr.quality_set.end();
      line.push_back(in_q ? 'Q' : active ? '.' : ' ');
    }
    out << std::left << std::setw(8) << id << '|' << line << "|\n";
  }
}

inline std::string indexed_name(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.%s", stem, i, ext);
  return buf;
}

}  // namespace detail

// Returns the process exit code; diagnostics go to `err`.
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Similarity-quality messenger distillation simulator", "sqmd"};
  app.require_subcommand(1);

  std::string config_path, out_dir, record_path;
  std::uint64_t seed = 0;
  std::string protocol;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub, bool runs) {
    sub->add_option("--config", config_path, "SimConfig (or sweep) JSON file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--protocol", protocol, "override the protocol (SQMD, FedMD, D-Dist, I-SGD)");
    sub->add_flag("--quiet", quiet, "only report errors");
    if (runs) sub->add_option("--out", out_dir, "output directory")->required();
  };
  auto* run = app.add_subcommand("run", "run one simulation");
  add_common(run, true);
  auto* sweep_cmd = app.add_subcommand("sweep", "run every config of a sweep and tabulate them");
  add_common(sweep_cmd, true);
  auto* inspect = app.add_subcommand("inspect", "summarize a run record");
  inspect->add_option("record", record_path, "run_record.json")->required()->check(CLI::ExistingFile);
  auto* validate = app.add_subcommand("validate-config", "check a config without running it");
  add_common(validate, false);

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  detail::Overrides overrides;
  if (run->count("--seed") + sweep_cmd->count("--seed") + validate->count("--seed") > 0) overrides.seed = seed;
  if (!protocol.empty()) overrides.protocol = protocol;

  try {
    if (*inspect) {
      detail::print_inspect(out, read_run_record(record_path));
      return 0;
    }

    const std::filesystem::path cfg_path(config_path);
    const auto doc = detail::read_json_file(cfg_path);
    const bool is_sweep = detail::is_sweep_document(doc);

    auto load_single = [&] {
      auto c = sim_config_from_json(doc);
      c.base_dir = cfg_path.parent_path();
      overrides.apply(c);
      return c;
    };
    auto load_sweep = [&] {
      auto s = expand_sweep(doc, cfg_path.parent_path());
      for (auto& c : s.configs) overrides.apply(c);
      return s;
    };

    if (*validate) {
      if (is_sweep) {
        const auto s = load_sweep();
        for (std::size_t i = 0; i < s.configs.size(); ++i) {
          try {
            s.configs[i].validate();
          } catch (const ConfigError& e) {
            throw ConfigError("sweep config " + std::to_string(i) + ": " + e.what());
          }
        }
        if (!quiet) out << "ok: sweep of " << s.configs.size() << " valid configs\n";
      } else {
        load_single().validate();
        if (!quiet) out << "ok\n";
      }
      return 0;
    }

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);

    if (*run) {
      if (is_sweep) throw ConfigError("'" + config_path + "' is a sweep file; use the sweep subcommand");
      const auto rec = run_simulation(load_single());
      write_json_file(dir / "run_record.json", to_json(rec));
      write_metrics_csv(dir / "metrics.csv", rec);
      if (!quiet) {
        detail::print_summary(out, rec);
        out << "wrote " << (dir / "run_record.json").string() << " and " << (dir / "metrics.csv").string() << '\n';
      }
      return 0;
    }

    // sweep
    if (!is_sweep) throw ConfigError("sweep config must have 'base' and 'sweep' keys");
    const auto spec = load_sweep();
    SimObserver none;
    const auto result = sqmd::sweep(spec.configs, spec.fields, none);
    for (std::size_t i = 0; i < result.records.size(); ++i) {
      write_json_file(dir / detail::indexed_name("record", i, "json"), to_json(result.records[i]));
      write_metrics_csv(dir / detail::indexed_name("metrics", i, "csv"), result.records[i]);
    }
    {
      std::ofstream csv(dir / "comparison.csv", std::ios::binary);
      if (!csv) throw ConfigError("cannot write '" + (dir / "comparison.csv").string() + "'");
      write_comparison_csv(csv, result);
    }
    if (!quiet) {
      write_comparison_csv(out, result);
      out << "wrote " << result.records.size() << " records and " << (dir / "comparison.csv").string() << '\n';
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace sqmd
