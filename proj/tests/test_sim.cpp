#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace sqmd;
using namespace sqmd::testing;

namespace {

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "sqmd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  auto c = tiny_config(Protocol::d_dist, 11);
  c.join_schedule = {{"a", {0, 1}, 1}, {"b", {2, 3}, 5}};
  c.eval_splits = {Split::test, Split::val};
  c.sparsity = 25;
  const auto back = sim_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 12;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, Validation) {
  auto c = tiny_config();
  c.server = {2, 3, true, SimilaritySelection::nearest};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.model_mix[0].count = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.join_schedule = {{"a", {0, 1, 2}, 1}};
  EXPECT_THROW(c.validate(), ConfigError);
  c.join_schedule = {{"a", {0, 1, 2}, 3}, {"b", {3}, 2}};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.sparsity = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  auto j = to_json(tiny_config());
  j["hyper"]["rhoo"] = 0.5;
  EXPECT_THROW(sim_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["protocol"] = "FedAvg";
  EXPECT_THROW(sim_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["hyper"]["rho"] = "high";
  EXPECT_THROW(sim_config_from_json(j), ConfigError);
}

TEST(Config, ShippedConfigsLoadAndValidate) {
  for (const char* name : {"four_device.json", "cluster_skew.json", "staged_join.json"}) {
    const auto c = load_sim_config(std::filesystem::path(SQMD_CONFIG_DIR) / name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
}

TEST(Record, JsonRoundTripAndCsv) {
  auto c = tiny_config();
  c.hyper.total_iterations = 6;
  c.eval_every = 2;
  const auto rec = run_simulation(c);
  const auto back = run_record_from_json(to_json(rec));
  EXPECT_EQ(back, rec);
  EXPECT_EQ(to_json(back).dump(), to_json(rec).dump());

  std::ostringstream csv;
  write_metrics_csv(csv, rec);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "round,client_id,protocol,split,accuracy,precision,recall,quality_score,in_Q");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8) << line;
  }
  EXPECT_EQ(rows, 3u * 4u);  // rounds 2, 4, 6 for four clients
}

TEST(Record, ReadErrors) {
  TempDir dir("rec");
  write_text(dir / "bad.json", "{not json");
  EXPECT_THROW(read_run_record(dir / "bad.json"), ConfigError);
}

TEST(Simulation, IsgdHasNoNeighbors) {
  const auto rec = run_simulation(tiny_config(Protocol::i_sgd));
  for (const auto& rr : rec.rounds) {
    EXPECT_TRUE(rr.neighbors.empty());
    EXPECT_TRUE(rr.quality_set.empty());
  }
}

TEST(Simulation, FedMdUsesEveryOtherClient) {
  const auto rec = run_simulation(tiny_config(Protocol::fedmd));
  for (const auto& rr : rec.rounds)
    for (const auto& [id, k] : rr.neighbors) {
      EXPECT_EQ(k.size(), 3u);
      EXPECT_FALSE(std::find(k.begin(), k.end(), id) != k.end());
    }
}

TEST(Simulation, DDistUsesStaticGroups) {
  auto c = tiny_config(Protocol::d_dist);
  c.server.k = 2;
  const auto rec = run_simulation(c);
  const auto& first = rec.rounds.back().neighbors;
  for (const auto& rr : rec.rounds) EXPECT_EQ(rr.neighbors, first);
  for (const auto& [id, k] : first) EXPECT_EQ(k.size(), 2u);
}

TEST(Simulation, SqmdNeighborsRespectK) {
  const auto rec = run_simulation(tiny_config());
  for (const auto& rr : rec.rounds) {
    EXPECT_EQ(rr.quality_set.size(), 4u);
    for (const auto& [id, k] : rr.neighbors) EXPECT_EQ(k.size(), 1u);
  }
}

TEST(Simulation, StagedJoinNewcomersOutsideQ) {
  auto c = tiny_config();
  c.hyper.total_iterations = 40;
  c.server = {2, 1, true, SimilaritySelection::nearest};
  c.join_schedule = {{"early", {0, 1}, 1}, {"late", {2, 3}, 20}};
  const auto rec = run_simulation(c);
  const auto* before = rec.find_round(19);
  ASSERT_NE(before, nullptr);
  EXPECT_EQ(before->active_clients, (std::vector<ClientId>{0, 1}));
  const auto* join = rec.find_round(20);
  EXPECT_EQ(join->active_clients.size(), 4u);
  for (ClientId id : join->quality_set) EXPECT_LT(id, 2);
  for (ClientId id : {0, 1})
    for (ClientId peer : join->neighbors.at(id)) EXPECT_LT(peer, 2);
  EXPECT_EQ(join->neighbors.at(2).size(), 1u);
}

TEST(Simulation, DeterministicByteIdentical) {
  for (auto p : {Protocol::sqmd, Protocol::fedmd, Protocol::d_dist, Protocol::i_sgd}) {
    const auto a = to_json(run_simulation(tiny_config(p, 5))).dump();
    const auto b = to_json(run_simulation(tiny_config(p, 5))).dump();
    EXPECT_EQ(a, b) << to_string(p);
  }
  EXPECT_NE(to_json(run_simulation(tiny_config(Protocol::sqmd, 5))).dump(),
            to_json(run_simulation(tiny_config(Protocol::sqmd, 6))).dump());
}

TEST(Simulation, RhoZeroMatchesIsgd) {
  auto a = tiny_config(Protocol::sqmd);
  a.hyper.rho = 0.0;
  const auto b = tiny_config(Protocol::i_sgd);
  const auto ra = run_simulation(a), rb = run_simulation(b);
  EXPECT_EQ(ra.final_test, rb.final_test);
  for (std::size_t i = 0; i < ra.rounds.size(); ++i)
    for (std::size_t m = 0; m < ra.rounds[i].metrics.size(); ++m)
      EXPECT_EQ(ra.rounds[i].metrics[m].metrics, rb.rounds[i].metrics[m].metrics);
}

TEST(Simulation, ObserverSeesEveryRound) {
  std::size_t exchanges = 0, steps = 0;
  SimObserver obs;
  obs.after_exchange = [&](const RoundView& v) {
    ++exchanges;
    EXPECT_EQ(v.communicated.size(), v.messengers.size());
    EXPECT_NE(v.server, nullptr);
  };
  obs.after_step = [&](const RoundView&) { ++steps; };
  run_simulation(tiny_config(), obs);
  EXPECT_EQ(exchanges, 30u);
  EXPECT_EQ(steps, 30u);
}

TEST(Simulation, EmptyClientIsConfigError) {
  auto c = tiny_config();
  c.dataset.synthetic.sample_count = 50;
  c.sparsity = 1;
  c.num_clients = 4;
  c.partition.reference_size = 40;
  EXPECT_THROW(run_simulation(c), ConfigError);
}

TEST(Sweep, SharedPartitionAcrossK) {
  std::vector<SimConfig> configs;
  for (std::size_t k : {2u, 3u}) {
    auto c = tiny_config();
    c.server.k = k;
    configs.push_back(c);
  }
  const auto s = sweep(configs, {"server.k"});
  ASSERT_EQ(s.records.size(), 2u);
  EXPECT_EQ(s.records[0].partition_hash, s.records[1].partition_hash);
  EXPECT_EQ(s.table[1].swept.at("server.k"), 3);
  std::ostringstream csv;
  write_comparison_csv(csv, s);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "server.k,protocol,seed,accuracy,precision,recall");

  configs[1].hyper.rho = 0.1;
  EXPECT_THROW(sweep(configs, {"server.k"}), ConfigError);
  EXPECT_THROW(sweep(configs, {"server.kk"}), ConfigError);
}

TEST(Sweep, ExpandCartesianProduct) {
  nlohmann::json doc{{"base", to_json(tiny_config())}, {"sweep", {{"server.k", {1, 2}}, {"seed", {1, 2, 3}}}}};
  const auto s = expand_sweep(doc, ".");
  // Axes expand in sorted path order, the first one slowest.
  ASSERT_EQ(s.fields, (std::vector<std::string>{"seed", "server.k"}));
  ASSERT_EQ(s.configs.size(), 6u);
  EXPECT_EQ(s.configs[0].server.k, 1u);
  EXPECT_EQ(s.configs[1].server.k, 2u);
  EXPECT_EQ(s.configs[2].seed, 2u);
  EXPECT_EQ(s.configs[5].seed, 3u);
}

TEST(Cli, RunWritesRecordAndCsv) {
  TempDir dir("cli_run");
  write_text(dir / "c.json", to_json(tiny_config()).dump());
  std::string out;
  ASSERT_EQ(run_cli({"run", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()}, &out), 0);
  EXPECT_NE(out.find("accuracy"), std::string::npos);
  const auto rec = read_run_record(dir / "o" / "run_record.json");
  EXPECT_EQ(rec.protocol, "SQMD");
  EXPECT_EQ(read_text(dir / "o" / "metrics.csv").substr(0, 5), "round");

  ASSERT_EQ(run_cli({"run", "--config", (dir / "c.json").string(), "--out", (dir / "p").string(), "--seed", "9",
                     "--protocol", "FedMD", "--quiet"},
                    &out),
            0);
  EXPECT_TRUE(out.empty());
  const auto over = read_run_record(dir / "p" / "run_record.json");
  EXPECT_EQ(over.protocol, "FedMD");
  EXPECT_EQ(over.seed, 9u);

  std::string inspected;
  ASSERT_EQ(run_cli({"inspect", (dir / "o" / "run_record.json").string()}, &inspected), 0);
  EXPECT_NE(inspected.find("client"), std::string::npos);
}

TEST(Cli, ValidateConfig) {
  TempDir dir("cli_val");
  write_text(dir / "ok.json", to_json(tiny_config()).dump());
  std::string out, err;
  EXPECT_EQ(run_cli({"validate-config", "--config", (dir / "ok.json").string()}, &out), 0);
  EXPECT_EQ(out, "ok\n");

  auto j = to_json(tiny_config());
  j["server"]["k"] = 8;
  write_text(dir / "bad.json", j.dump());
  EXPECT_NE(run_cli({"validate-config", "--config", (dir / "bad.json").string()}, &out, &err), 0);
  EXPECT_NE(err.find("server.k"), std::string::npos) << err;

  write_text(dir / "broken.json", "{");
  EXPECT_NE(run_cli({"validate-config", "--config", (dir / "broken.json").string()}, &out, &err), 0);
}

TEST(Cli, SweepWritesRecordsAndComparison) {
  TempDir dir("cli_sweep");
  auto base = to_json(tiny_config());
  base["server"]["q"] = 4;
  base["num_clients"] = 9;
  base["model_mix"] = {{{"spec_id", "lin"}, {"hidden", nlohmann::json::array()}, {"count", 3}},
                       {{"spec_id", "mlp4"}, {"hidden", {4}}, {"count", 3}},
                       {{"spec_id", "mlp3x3"}, {"hidden", {3, 3}}, {"count", 3}}};
  base["dataset"]["synthetic"]["sample_count"] = 400;
  base["server"]["quality_filter"] = false;
  nlohmann::json doc{{"base", base}, {"sweep", {{"server.k", {2, 4, 8}}}}};
  write_text(dir / "s.json", doc.dump());
  std::string out, err;
  ASSERT_EQ(run_cli({"sweep", "--config", (dir / "s.json").string(), "--out", (dir / "o").string(), "--quiet"},
                    &out, &err),
            0)
      << err;
  for (const char* f : {"record_000.json", "record_001.json", "record_002.json", "comparison.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / "o" / f)) << f;
  const auto csv = read_text(dir / "o" / "comparison.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  EXPECT_EQ(run_cli({"validate-config", "--config", (dir / "s.json").string()}, &out), 0);
  EXPECT_EQ(out, "ok: sweep of 3 valid configs\n");
  EXPECT_NE(run_cli({"run", "--config", (dir / "s.json").string(), "--out", (dir / "r").string()}, &out, &err), 0);
}

TEST(Cli, UsageErrors) {
  std::string out, err;
  EXPECT_EQ(run_cli({"run", "--bogus"}, &out, &err), 2);
  EXPECT_EQ(run_cli({}, &out, &err), 2);
  EXPECT_EQ(run_cli({"run", "--config", "/nonexistent/file.json", "--out", "x"}, &out, &err), 2);
}

TEST(Sweep, IsgdAccuracyFallsWithSparsity) {
  auto base = load_sim_config(std::filesystem::path(SQMD_CONFIG_DIR) / "cluster_skew.json");
  base.dataset.synthetic.sample_count = 6000;
  base.protocol = Protocol::i_sgd;
  std::vector<double> mean;
  for (double r : {100.0, 10.0, 1.0}) {
    double total = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto c = base;
      c.sparsity = r;
      c.seed = seed;
      total += run_simulation(c).summary.accuracy;
    }
    mean.push_back(total / 5);
  }
  EXPECT_GE(mean[0], mean[1]);
  EXPECT_GE(mean[1], mean[2]);
}
