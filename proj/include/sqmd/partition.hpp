#pragma once

// Splitting a labeled pool into a class-balanced reference slice and
// per-client slices, plus train/val/test splitting and sparsification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sqmd/errors.hpp"
#include "sqmd/rng.hpp"

namespace sqmd {

enum class PartitionPolicy { even_random, class_removal, cluster_skew };

inline const char* to_string(PartitionPolicy p) {
  switch (p) {
    case PartitionPolicy::even_random: return "even_random";
    case PartitionPolicy::class_removal: return "class_removal";
    case PartitionPolicy::cluster_skew: return "cluster_skew";
  }
  return "?";
}

struct PartitionSpec {
  PartitionPolicy policy = PartitionPolicy::even_random;
  double reference_fraction = 0.2;  // used when reference_size == 0
  std::size_t reference_size = 0;
  // cluster_skew: client n belongs to cluster n % num_clusters; each cluster
  // favors `classes_per_cluster` classes, which receive `concentration` of
  // its clients' label mass.
  std::size_t num_clusters = 2;
  std::size_t classes_per_cluster = 1;
  double concentration = 0.9;

  bool operator==(const PartitionSpec&) const = default;
};

struct Partition {
  std::vector<std::size_t> reference;                  // indices into the pool
  std::vector<std::vector<std::size_t>> client_slices; // one per client
  std::vector<std::size_t> cluster_of;                 // cluster_skew only
  std::vector<std::vector<int>> cluster_classes;       // cluster_skew only
  std::vector<int> removed_class;                      // class_removal only
};

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ConfigError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes) + ")");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return by_class;
}

// Splits `items` into n contiguous chunks whose sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> even_chunks(const std::vector<std::size_t>& items, std::size_t n) {
  std::vector<std::vector<std::size_t>> out(n);
  const std::size_t base = items.size() / n;
  const std::size_t extra = items.size() % n;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out[i].assign(items.begin() + static_cast<std::ptrdiff_t>(pos),
                  items.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

// Integer counts proportional to `weights` summing to `total` (largest remainder).
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t total) {
  double sum = 0.0;
  for (double w : weights) sum += w;
  std::vector<std::size_t> counts(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = sum > 0.0 ? weights[i] / sum * static_cast<double>(total) : 0.0;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t r = 0; assigned < total && r < remainders.size(); ++r, ++assigned) ++counts[remainders[r].second];
  return counts;
}

}  // namespace detail

// Reference slice first (class-balanced, without replacement), then the
// remaining pool is dealt to `num_clients` slices according to the policy.
inline Partition partition_dataset(std::span<const int> labels, std::size_t num_classes, const PartitionSpec& spec,
                                   std::size_t num_clients, std::uint64_t seed) {
  if (num_clients == 0) throw ConfigError("partition: need at least one client");
  if (num_classes == 0) throw ConfigError("partition: need at least one class");
  Rng rng(seed, "partition");
  auto by_class = detail::indices_by_class(labels, num_classes);
  for (auto& pool : by_class) rng.shuffle(pool);

  Partition part;
  std::size_t ref_size = spec.reference_size;
  if (ref_size == 0) {
    if (!(spec.reference_fraction >= 0.0 && spec.reference_fraction < 1.0))
      throw ConfigError("partition.reference_fraction must lie in [0, 1)");
    ref_size = static_cast<std::size_t>(std::round(spec.reference_fraction * static_cast<double>(labels.size())));
  }
  // Equal share per class, remainder to the lowest class ids.
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t want = ref_size / num_classes + (c < ref_size % num_classes ? 1 : 0);
    if (want > by_class[c].size())
      throw ConfigError("partition: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                        " samples, reference needs " + std::to_string(want));
    part.reference.insert(part.reference.end(), by_class[c].end() - static_cast<std::ptrdiff_t>(want),
                          by_class[c].end());
    by_class[c].resize(by_class[c].size() - want);
  }
  std::sort(part.reference.begin(), part.reference.end());

  std::vector<std::size_t> pool;
  for (const auto& cls : by_class) pool.insert(pool.end(), cls.begin(), cls.end());
  if (pool.size() < num_clients)
    throw ConfigError("partition: " + std::to_string(pool.size()) + " samples cannot fill " +
                      std::to_string(num_clients) + " client slices");

  switch (spec.policy) {
    case PartitionPolicy::even_random: {
      std::sort(pool.begin(), pool.end());
      rng.shuffle(pool);
      part.client_slices = detail::even_chunks(pool, num_clients);
      break;
    }
    case PartitionPolicy::class_removal: {
      std::sort(pool.begin(), pool.end());
      rng.shuffle(pool);
      part.client_slices = detail::even_chunks(pool, num_clients);
      for (auto& slice : part.client_slices) {
        const int removed = static_cast<int>(rng.below(num_classes));
        part.removed_class.push_back(removed);
        std::erase_if(slice, [&](std::size_t i) { return labels[i] == removed; });
        if (slice.empty()) throw ConfigError("partition: class removal left an empty client slice");
      }
      break;
    }
    case PartitionPolicy::cluster_skew: {
      if (spec.num_clusters == 0) throw ConfigError("partition.num_clusters must be >= 1");
      if (spec.classes_per_cluster == 0 || spec.classes_per_cluster > num_classes)
        throw ConfigError("partition.classes_per_cluster must lie in [1, num_classes]");
      if (!(spec.concentration >= 0.0 && spec.concentration <= 1.0))
        throw ConfigError("partition.concentration must lie in [0, 1]");
      // Clusters take consecutive windows of a shuffled class ring.
      std::vector<int> ring(num_classes);
      for (std::size_t c = 0; c < num_classes; ++c) ring[c] = static_cast<int>(c);
      rng.shuffle(ring);
      for (std::size_t k = 0; k < spec.num_clusters; ++k) {
        std::vector<int> cls;
        for (std::size_t j = 0; j < spec.classes_per_cluster; ++j)
          cls.push_back(ring[(k * spec.classes_per_cluster + j) % num_classes]);
        std::sort(cls.begin(), cls.end());
        part.cluster_classes.push_back(std::move(cls));
      }
      const std::size_t per_client = pool.size() / num_clients;
      part.client_slices.resize(num_clients);
      for (std::size_t n = 0; n < num_clients; ++n) {
        const std::size_t cluster = n % spec.num_clusters;
        part.cluster_of.push_back(cluster);
        const auto& favored = part.cluster_classes[cluster];
        const std::size_t others = num_classes - favored.size();
        std::vector<double> weights(num_classes, 0.0);
        for (std::size_t c = 0; c < num_classes; ++c) {
          const bool fav = std::find(favored.begin(), favored.end(), static_cast<int>(c)) != favored.end();
          if (fav)
            weights[c] = spec.concentration / static_cast<double>(favored.size());
          else if (others > 0)
            weights[c] = (1.0 - spec.concentration) / static_cast<double>(others);
        }
        if (others == 0)
          for (double& w : weights) w = 1.0 / static_cast<double>(num_classes);
        auto quota = detail::apportion(weights, per_client);
        // Take from each class pool; shortfalls come from whichever class
        // with nonzero weight has the most samples left, so a client never
        // receives a class outside its distribution's support.
        std::size_t shortfall = 0;
        auto& slice = part.client_slices[n];
        for (std::size_t c = 0; c < num_classes; ++c) {
          const std::size_t take = std::min(quota[c], by_class[c].size());
          shortfall += quota[c] - take;
          slice.insert(slice.end(), by_class[c].end() - static_cast<std::ptrdiff_t>(take), by_class[c].end());
          by_class[c].resize(by_class[c].size() - take);
        }
        while (shortfall > 0) {
          std::size_t richest = num_classes;
          for (std::size_t c = 0; c < num_classes; ++c)
            if (weights[c] > 0.0 && !by_class[c].empty() &&
                (richest == num_classes || by_class[c].size() > by_class[richest].size()))
              richest = c;
          if (richest == num_classes) break;
          slice.push_back(by_class[richest].back());
          by_class[richest].pop_back();
          --shortfall;
        }
        std::sort(slice.begin(), slice.end());
        if (slice.empty()) throw ConfigError("partition: empty client slice");
      }
      break;
    }
  }
  return part;
}

// Keeps ceil(r% * |slice|) entries, chosen uniformly without replacement.
// The kept entries stay in their original order.
inline std::vector<std::size_t> sparsify(std::span<const std::size_t> slice, double r, std::uint64_t seed) {
  if (!(r > 0.0 && r <= 100.0)) throw ConfigError("sparsity r must lie in (0, 100]");
  if (r == 100.0) return {slice.begin(), slice.end()};
  const auto keep = static_cast<std::size_t>(std::ceil(r / 100.0 * static_cast<double>(slice.size()) - 1e-9));
  if (keep == 0) throw ConfigError("sparsify left no samples");
  Rng rng(seed, "sparsify");
  auto pos = rng.permutation(slice.size());
  pos.resize(keep);
  std::sort(pos.begin(), pos.end());
  std::vector<std::size_t> out;
  out.reserve(keep);
  for (auto p : pos) out.push_back(slice[p]);
  return out;
}

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Random 8:1:1 split. Validation and test each get floor(n/10) items, but at
// least one when n >= 3; training keeps the rest.
inline SplitIndices split_train_val_test(std::span<const std::size_t> slice, std::uint64_t seed) {
  Rng rng(seed, "split");
  std::vector<std::size_t> items(slice.begin(), slice.end());
  rng.shuffle(items);
  const std::size_t n = items.size();
  std::size_t holdout = n / 10;
  if (holdout == 0 && n >= 3) holdout = 1;
  SplitIndices s;
  s.val.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(holdout));
  s.test.assign(items.begin() + static_cast<std::ptrdiff_t>(holdout),
                items.begin() + static_cast<std::ptrdiff_t>(2 * holdout));
  s.train.assign(items.begin() + static_cast<std::ptrdiff_t>(2 * holdout), items.end());
  return s;
}

}  // namespace sqmd
