#include <gtest/gtest.h>

#include "support.hpp"

using namespace sqmd;
using namespace sqmd::testing;

namespace {

ReferenceSet small_ref(std::size_t r = 4, std::size_t c = 2) { return ReferenceSet::make(Matrix(r, 1), cyclic_one_hot(r, c)); }

// A messenger whose rows all put `p` on the true class of a cyclic reference.
Messenger confident(ClientId id, double p, std::uint64_t round = 1, std::size_t r = 4) {
  Matrix m(r, 2);
  for (std::size_t i = 0; i < r; ++i) {
    m(i, i % 2) = p;
    m(i, 1 - i % 2) = 1 - p;
  }
  return messenger(id, m, round);
}

bool contains(const std::vector<ClientId>& v, ClientId id) { return std::find(v.begin(), v.end(), id) != v.end(); }

}  // namespace

TEST(ServerConfig, KMustNotExceedQWithFilter) {
  ServerConfig c{2, 3, true, SimilaritySelection::nearest};
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("server.k"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("server.q"), std::string::npos);
  }
  c.quality_filter_enabled = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Repository, NewerReplacesOlderIsRejected) {
  MessengerRepository repo;
  EXPECT_TRUE(repo.store(confident(5, 0.6, 1)));
  EXPECT_EQ(repo.size(), 1u);
  EXPECT_TRUE(repo.store(confident(5, 0.7, 3)));
  EXPECT_EQ(repo.size(), 1u);
  EXPECT_EQ(repo.round_received.at(5), 3u);
  EXPECT_FALSE(repo.store(confident(5, 0.9, 2)));
  EXPECT_EQ(repo.latest.at(5).soft_decisions(0, 0), 0.7);
}

TEST(Server, Registration) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 3; ++i) s.register_client(i);
  EXPECT_EQ(s.registered().size(), 3u);
  EXPECT_EQ(s.repository().size(), 0u);
  EXPECT_THROW(s.register_client(1), ProtocolError);
  s.register_client(9);
  EXPECT_FALSE(s.repository().round_received.contains(9));
}

TEST(Server, ReceiveMessenger) {
  CoordinationServer s(small_ref());
  s.register_client(5);
  s.receive_messenger(confident(5, 0.6, 1));
  EXPECT_EQ(s.repository().size(), 1u);
  s.receive_messenger(confident(5, 0.8, 2));
  EXPECT_EQ(s.repository().size(), 1u);
  EXPECT_NEAR(s.quality().scores.at(5), -4 * std::log(0.8), 1e-12);

  // Stale: ignored, warned, score untouched.
  s.receive_messenger(confident(5, 0.55, 1));
  EXPECT_EQ(s.warnings().size(), 1u);
  EXPECT_NEAR(s.quality().scores.at(5), -4 * std::log(0.8), 1e-12);

  EXPECT_THROW(s.receive_messenger(confident(6, 0.6)), ProtocolError);
  EXPECT_THROW(s.receive_messenger(confident(5, 0.6, 4, 3)), ProtocolError);
  EXPECT_THROW(s.receive_messenger(messenger(5, Matrix::from_rows({{2, -1}, {1, 0}, {1, 0}, {1, 0}}), 5)),
               ProtocolError);
}

TEST(Server, IdenticalClientsGetKPeersExcludingSelf) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 4; ++i) s.register_client(i);
  for (ClientId i = 0; i < 4; ++i) s.receive_messenger(confident(i, 0.7));
  Rng rng(1);
  const auto map = s.server_round({4, 2, true, SimilaritySelection::nearest}, rng);
  ASSERT_EQ(map.size(), 4u);
  for (const auto& [id, k] : map) {
    ASSERT_EQ(k.size(), 2u);
    for (const auto& m : k) EXPECT_NE(m.client_id, id);
  }
  // Zero divergence everywhere: ties resolve by ascending id.
  EXPECT_EQ(map.at(0)[0].client_id, 1);
  EXPECT_EQ(map.at(0)[1].client_id, 2);
}

TEST(Server, LowQualityClientExcludedButStillServed) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 4; ++i) s.register_client(i);
  s.receive_batch({confident(0, 0.9), confident(1, 0.85), confident(2, 0.8), confident(3, 0.01)});
  Rng rng(1);
  const auto map = s.server_round({3, 2, true, SimilaritySelection::nearest}, rng);
  EXPECT_FALSE(s.quality().contains(3));
  for (const auto& [id, k] : map)
    for (const auto& m : k) EXPECT_NE(m.client_id, 3);
  EXPECT_EQ(map.at(3).size(), 2u);
}

TEST(Server, SilentClientsGetEmptySetsAndAreNotCandidates) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 3; ++i) s.register_client(i);
  s.receive_batch({confident(0, 0.9), confident(1, 0.8)});
  Rng rng(1);
  const auto map = s.server_round({3, 2, true, SimilaritySelection::nearest}, rng);
  EXPECT_TRUE(map.at(2).empty());
  EXPECT_EQ(map.at(0).size(), 1u);
  EXPECT_EQ(s.repository().size(), 2u);
}

TEST(Server, DeterministicAndBatchOrderIndependent) {
  Rng data(3);
  std::vector<Messenger> msgs;
  for (ClientId i = 0; i < 6; ++i) msgs.push_back(messenger(i, random_probs(4, 2, data)));
  for (auto sel : {SimilaritySelection::nearest, SimilaritySelection::random}) {
    CoordinationServer a(small_ref()), b(small_ref());
    for (ClientId i = 0; i < 6; ++i) {
      a.register_client(i);
      b.register_client(5 - i);
    }
    a.receive_batch(msgs);
    b.receive_batch({msgs.rbegin(), msgs.rend()});
    Rng ra(8, "server.random_selection"), rb(8, "server.random_selection");
    const ServerConfig cfg{4, 2, true, sel};
    EXPECT_EQ(a.server_round(cfg, ra), b.server_round(cfg, rb));
    EXPECT_EQ(a.snapshot().dump(), b.snapshot().dump());
  }
}

TEST(Server, ContainmentPropertyOverRandomRounds) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 2 + rng.below(8);
    CoordinationServer s(small_ref(6, 3));
    for (ClientId i = 0; i < static_cast<ClientId>(n); ++i) s.register_client(i);
    std::vector<Messenger> msgs;
    for (ClientId i = 0; i < static_cast<ClientId>(n); ++i)
      if (rng.uniform() < 0.8) msgs.push_back(messenger(i, random_probs(6, 3, rng)));
    if (msgs.empty()) continue;
    s.receive_batch(msgs);
    const auto q = 1 + rng.below(n);
    const auto k = 1 + rng.below(q);
    const ServerConfig cfg{q, k, rng.uniform() < 0.7,
                           rng.uniform() < 0.5 ? SimilaritySelection::nearest : SimilaritySelection::random};
    const auto map = s.server_round(cfg, rng);
    const auto& qset = s.quality().quality_set;
    EXPECT_EQ(s.repository().size(), msgs.size());
    for (const auto& [id, kset] : map) {
      std::size_t eligible = 0;
      for (ClientId m : qset) eligible += (m != id);
      if (s.repository().contains(id)) {
        EXPECT_EQ(kset.size(), std::min(cfg.k, eligible));
      } else {
        EXPECT_TRUE(kset.empty());
      }
      for (const auto& m : kset) {
        EXPECT_NE(m.client_id, id);
        EXPECT_TRUE(contains(qset, m.client_id));
      }
    }
  }
}

TEST(Server, SaturatedSelectionGivesGlobalMean) {
  Rng rng(2);
  CoordinationServer s(small_ref(5, 2));
  const int n = 6;
  std::vector<Messenger> msgs;
  for (ClientId i = 0; i < n; ++i) {
    s.register_client(i);
    msgs.push_back(messenger(i, random_probs(5, 2, rng)));
  }
  s.receive_batch(msgs);
  const auto map = s.server_round({n, n, true, SimilaritySelection::nearest}, rng);
  for (ClientId i = 0; i < n; ++i) {
    Matrix expected(5, 2);
    for (ClientId j = 0; j < n; ++j)
      if (j != i)
        for (std::size_t e = 0; e < expected.values().size(); ++e)
          expected.values()[e] += msgs[static_cast<std::size_t>(j)].soft_decisions.values()[e] / (n - 1);
    const Matrix got = ensemble_mean(map.at(i));
    for (std::size_t e = 0; e < expected.values().size(); ++e)
      EXPECT_NEAR(got.values()[e], expected.values()[e], 1e-12);
  }
}

TEST(Server, WeightsAndSnapshot) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 3; ++i) s.register_client(i);
  s.receive_batch({confident(0, 0.9), confident(1, 0.6), confident(2, 0.9)});
  Rng rng(1);
  s.server_round({3, 1, true, SimilaritySelection::nearest}, rng);
  const auto& g = s.graph();
  ASSERT_EQ(g.client_ids, (std::vector<ClientId>{0, 1, 2}));
  const double d01 = messenger_divergence(confident(0, 0.9), confident(1, 0.6));
  EXPECT_NEAR(g.weights(0, 1), 1.0 / d01, 1e-9);
  EXPECT_EQ(g.weights(0, 0), 0.0);
  EXPECT_TRUE(std::isinf(g.weights(0, 2)));
  for (double w : g.weights.values()) EXPECT_GE(w, 0.0);
  EXPECT_NE(g.weights(0, 1), g.weights(1, 0));

  const auto snap = s.snapshot();
  EXPECT_EQ(snap.at("quality_set"), nlohmann::json({0, 2, 1}));
  EXPECT_EQ(snap.at("neighbors").at("0"), nlohmann::json({2}));
  EXPECT_TRUE(snap.at("weights")[0][2].is_null());
  EXPECT_EQ(snap.at("repository_rounds").at("1"), 1);
}

TEST(Server, NewcomerWithWorseScoreNeverReachesIncumbents) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 4; ++i) s.register_client(i);
  s.receive_batch({confident(0, 0.9), confident(1, 0.8), confident(2, 0.85), confident(3, 0.95)});
  Rng rng(1);
  s.register_client(4);
  s.receive_messenger(confident(4, 0.5, 2));
  const auto map = s.server_round({4, 2, true, SimilaritySelection::nearest}, rng);
  for (ClientId i = 0; i < 4; ++i)
    for (const auto& m : map.at(i)) EXPECT_NE(m.client_id, 4);
  EXPECT_EQ(map.at(4).size(), 2u);
}

TEST(Server, AblationSwitchesReachableByConfig) {
  CoordinationServer s(small_ref());
  for (ClientId i = 0; i < 4; ++i) s.register_client(i);
  s.receive_batch({confident(0, 0.9), confident(1, 0.8), confident(2, 0.7), confident(3, 0.52)});
  Rng rng(1);
  // Filter off: the worst client becomes eligible.
  s.server_round({2, 3, false, SimilaritySelection::nearest}, rng);
  EXPECT_EQ(s.quality().quality_set.size(), 4u);
  EXPECT_EQ(s.graph().neighbor_sets.at(0).size(), 3u);
  // Random selection draws from the filtered Q.
  s.server_round({2, 1, true, SimilaritySelection::random}, rng);
  for (const auto& [id, k] : s.graph().neighbor_sets)
    for (const auto& l : k) EXPECT_TRUE(l.client_id == 0 || l.client_id == 1);
}
