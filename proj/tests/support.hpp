#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sqmd/sqmd.hpp"

namespace sqmd::testing {

inline ModelSpec make_spec(std::vector<std::size_t> sizes, std::string id = "t") {
  ModelSpec s;
  s.layer_sizes = std::move(sizes);
  s.spec_id = std::move(id);
  return s;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

// Rows drawn uniformly from the simplex interior (normalized exponentials).
inline Matrix random_probs(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double sum = 0.0;
    for (double& v : m.row(i)) {
      v = -std::log(1.0 - rng.uniform());
      sum += v;
    }
    for (double& v : m.row(i)) v /= sum;
  }
  return m;
}

inline Matrix random_one_hot(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) m(i, static_cast<std::size_t>(rng.below(c))) = 1.0;
  return m;
}

// Balanced one-hot labels: row i has class i % c.
inline Matrix cyclic_one_hot(std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) m(i, i % c) = 1.0;
  return m;
}

inline Messenger messenger(ClientId id, Matrix p, std::uint64_t round = 1) { return {id, round, std::move(p)}; }

// Parameters and gradients visited in one flat order.
template <typename T>
std::vector<double*> flat_refs(T& t) {
  std::vector<double*> out;
  for (auto& layer : t.layers) {
    for (double& v : layer.weights.values()) out.push_back(&v);
    for (double& v : layer.bias) out.push_back(&v);
  }
  return out;
}

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

// A temporary directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("sqmd_" + tag + "_" + std::to_string(std::hash<std::string>{}(tag + std::to_string(counter()++))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small, fast simulation config on two well-separated Gaussian blobs.
inline SimConfig tiny_config(Protocol protocol = Protocol::sqmd, std::uint64_t seed = 3) {
  SimConfig c;
  c.dataset.kind = DatasetKind::synthetic_gaussian;
  c.dataset.synthetic.num_classes = 2;
  c.dataset.synthetic.feature_dim = 2;
  c.dataset.synthetic.sample_count = 240;
  c.dataset.synthetic.means = {{-2.0, 0.0}, {2.0, 0.0}};
  c.dataset.synthetic.stddev = 0.7;
  c.num_clients = 4;
  c.model_mix = {{"lin", {}, 2}, {"mlp4", {4}, 1}, {"mlp3x3", {3, 3}, 1}};
  c.partition.policy = PartitionPolicy::cluster_skew;
  c.partition.reference_size = 40;
  c.partition.num_clusters = 2;
  c.partition.classes_per_cluster = 1;
  c.partition.concentration = 1.0;
  c.hyper.rho = 0.8;
  c.hyper.learning_rate = 0.5;
  c.hyper.batch_size = 8;
  c.hyper.total_iterations = 30;
  c.server = {4, 1, true, SimilaritySelection::nearest};
  c.protocol = protocol;
  c.seed = seed;
  return c;
}

}  // namespace sqmd::testing
