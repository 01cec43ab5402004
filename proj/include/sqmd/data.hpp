#pragma once

// Dataset sources: IDX image/label pairs, CSV tables, seeded synthetic
// generators, and feature normalization.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "sqmd/errors.hpp"
#include "sqmd/matrix.hpp"
#include "sqmd/rng.hpp"

namespace sqmd {

struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<std::string> warnings;

  std::size_t size() const { return labels.size(); }
};

enum class DatasetKind { idx_images, csv_rows, synthetic_gaussian, synthetic_rings };
enum class Normalization { none, minmax, zscore };

struct SyntheticParams {
  std::size_t num_classes = 2;
  std::size_t feature_dim = 2;
  std::size_t sample_count = 200;
  std::vector<double> class_priors;          // empty -> uniform
  std::vector<std::vector<double>> means;    // C x d; empty -> seeded, on a sphere of radius `separation`
  double separation = 3.0;
  double stddev = 1.0;                       // isotropic noise when no covariances are given
  std::vector<std::vector<std::vector<double>>> covariances;  // optional, C x d x d

  bool operator==(const SyntheticParams&) const = default;
};

struct DatasetDescriptor {
  DatasetKind kind = DatasetKind::synthetic_gaussian;
  std::string images_path;
  std::string labels_path;
  std::string csv_path;
  std::string label_column = "label";
  std::size_t num_classes = 0;  // 0 -> infer from max label
  std::size_t limit = 0;        // keep the first `limit` samples; 0 -> all
  SyntheticParams synthetic;
  std::optional<Normalization> normalization;  // default depends on kind

  Normalization effective_normalization() const {
    if (normalization) return *normalization;
    switch (kind) {
      case DatasetKind::idx_images: return Normalization::minmax;
      case DatasetKind::csv_rows: return Normalization::zscore;
      default: return Normalization::none;
    }
  }

  bool operator==(const DatasetDescriptor&) const = default;
};

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw ParseError(what + ": truncated header", ParseError::Unit::byte_offset, offset);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Images flattened row-major and scaled to [0,1] by /255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file_bytes(images_path);
  const auto lab = detail::read_file_bytes(labels_path);

  const auto img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic)
    throw ParseError(images_path + ": bad image magic", ParseError::Unit::byte_offset, 0);
  const std::size_t n_img = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n_img * pixels)
    throw ParseError(images_path + ": truncated pixel data", ParseError::Unit::byte_offset, img.size());

  const auto lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic)
    throw ParseError(labels_path + ": bad label magic", ParseError::Unit::byte_offset, 0);
  const std::size_t n_lab = detail::read_be32(lab, 4, labels_path);
  if (lab.size() < 8 + n_lab)
    throw ParseError(labels_path + ": truncated label data", ParseError::Unit::byte_offset, lab.size());

  if (n_img != n_lab)
    throw ConsistencyError("IDX count mismatch: " + std::to_string(n_img) + " images vs " + std::to_string(n_lab) +
                           " labels");

  Dataset ds;
  ds.features = Matrix(n_img, pixels);
  auto values = ds.features.values();
  for (std::size_t i = 0; i < n_img * pixels; ++i) values[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n_lab);
  int max_label = -1;
  for (std::size_t i = 0; i < n_lab; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

// All non-label columns become features; the label column must hold
// non-negative integers.
inline Dataset load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": missing header", ParseError::Unit::line, 1);
  const auto header = detail::split_commas(line);
  std::size_t label_idx = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == label_column) label_idx = i;
  if (label_idx == header.size())
    throw ConfigError(path + ": label column '" + label_column + "' not found in header");

  const std::size_t width = header.size();
  std::vector<double> values;
  Dataset ds;
  std::size_t line_no = 1;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != width)
      throw ParseError(path + ": expected " + std::to_string(width) + " fields, got " + std::to_string(cells.size()),
                       ParseError::Unit::line, line_no);
    for (std::size_t i = 0; i < width; ++i) {
      const auto v = detail::parse_double(cells[i]);
      if (!v || !std::isfinite(*v))
        throw ParseError(path + ": non-numeric cell '" + std::string(cells[i]) + "'", ParseError::Unit::line, line_no);
      if (i == label_idx) {
        if (*v < 0 || *v != std::floor(*v))
          throw ParseError(path + ": label must be a non-negative integer", ParseError::Unit::line, line_no);
        ds.labels.push_back(static_cast<int>(*v));
        max_label = std::max(max_label, ds.labels.back());
      } else {
        values.push_back(*v);
      }
    }
  }
  const std::size_t dim = width - 1;
  ds.features = Matrix(ds.labels.size(), dim);
  std::copy(values.begin(), values.end(), ds.features.values().begin());
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic

namespace detail {

// Lower-triangular L with L L^T = a; throws on non positive-definite input.
inline std::vector<std::vector<double>> cholesky(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> l(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i].size() != n) throw ConfigError("covariance matrix is not square");
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      if (i == j) {
        if (!(s > 1e-12)) throw ConfigError("degenerate covariance: matrix is not positive definite");
        l[i][i] = std::sqrt(s);
      } else {
        l[i][j] = s / l[j][j];
      }
    }
  }
  return l;
}

inline std::vector<int> draw_labels(const std::vector<double>& priors, std::size_t n, Rng& rng) {
  std::vector<double> cdf(priors.size());
  std::partial_sum(priors.begin(), priors.end(), cdf.begin());
  const double total = cdf.back();
  std::vector<int> labels(n);
  for (auto& y : labels) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) it = std::prev(cdf.end());
    y = static_cast<int>(it - cdf.begin());
  }
  return labels;
}

inline std::vector<double> resolve_priors(const SyntheticParams& p, std::vector<std::string>& warnings) {
  std::vector<double> priors = p.class_priors;
  if (priors.empty()) priors.assign(p.num_classes, 1.0);
  if (priors.size() != p.num_classes) throw ConfigError("class_priors must have one entry per class");
  double total = 0.0;
  std::size_t positive = 0;
  for (double w : priors) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("class_priors must be finite and non-negative");
    total += w;
    if (w > 0.0) ++positive;
  }
  if (!(total > 0.0)) throw ConfigError("class_priors must not all be zero");
  if (positive == 1) warnings.push_back("synthetic dataset has a single class");
  return priors;
}

}  // namespace detail

// Class-conditional Gaussians. Means come from `params.means` or are drawn on
// a sphere of radius `separation`; noise is isotropic or per-class covariance.
inline Dataset generate_gaussian(const SyntheticParams& p, std::uint64_t seed) {
  if (p.num_classes < 1 || p.feature_dim < 1) throw ConfigError("synthetic: num_classes and feature_dim must be >= 1");
  Dataset ds;
  const auto priors = detail::resolve_priors(p, ds.warnings);
  Rng rng(seed, "synthetic_gaussian");

  std::vector<std::vector<double>> means = p.means;
  if (means.empty()) {
    for (std::size_t c = 0; c < p.num_classes; ++c) {
      std::vector<double> m(p.feature_dim);
      double norm = 0.0;
      do {
        norm = 0.0;
        for (double& v : m) {
          v = rng.normal();
          norm += v * v;
        }
        norm = std::sqrt(norm);
      } while (norm < 1e-9);
      for (double& v : m) v *= p.separation / norm;
      means.push_back(std::move(m));
    }
  }
  if (means.size() != p.num_classes) throw ConfigError("synthetic: need one mean per class");
  for (const auto& m : means)
    if (m.size() != p.feature_dim) throw ConfigError("synthetic: mean dimensionality mismatch");

  std::vector<std::vector<std::vector<double>>> chol;
  if (!p.covariances.empty()) {
    if (p.covariances.size() != p.num_classes) throw ConfigError("synthetic: need one covariance per class");
    for (const auto& cov : p.covariances) {
      if (cov.size() != p.feature_dim) throw ConfigError("synthetic: covariance dimensionality mismatch");
      chol.push_back(detail::cholesky(cov));
    }
  } else if (!(p.stddev > 0.0)) {
    throw ConfigError("degenerate covariance: stddev must be positive");
  }

  ds.labels = detail::draw_labels(priors, p.sample_count, rng);
  ds.num_classes = p.num_classes;
  ds.features = Matrix(p.sample_count, p.feature_dim);
  std::vector<double> z(p.feature_dim);
  for (std::size_t i = 0; i < p.sample_count; ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    for (double& v : z) v = rng.normal();
    auto row = ds.features.row(i);
    for (std::size_t d = 0; d < p.feature_dim; ++d) {
      double noise = 0.0;
      if (chol.empty()) {
        noise = p.stddev * z[d];
      } else {
        for (std::size_t k = 0; k <= d; ++k) noise += chol[c][d][k] * z[k];
      }
      row[d] = means[c][d] + noise;
    }
  }
  return ds;
}

// Concentric rings in the first two dimensions: class c has radius
// (c + 1) * separation / num_classes. Remaining dimensions are pure noise.
inline Dataset generate_rings(const SyntheticParams& p, std::uint64_t seed) {
  if (p.num_classes < 1) throw ConfigError("synthetic: num_classes must be >= 1");
  if (p.feature_dim < 2) throw ConfigError("synthetic_rings: feature_dim must be >= 2");
  if (!(p.stddev > 0.0)) throw ConfigError("degenerate covariance: stddev must be positive");
  Dataset ds;
  const auto priors = detail::resolve_priors(p, ds.warnings);
  Rng rng(seed, "synthetic_rings");
  ds.labels = detail::draw_labels(priors, p.sample_count, rng);
  ds.num_classes = p.num_classes;
  ds.features = Matrix(p.sample_count, p.feature_dim);
  for (std::size_t i = 0; i < p.sample_count; ++i) {
    const double radius =
        (static_cast<double>(ds.labels[i]) + 1.0) * p.separation / static_cast<double>(p.num_classes);
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    auto row = ds.features.row(i);
    row[0] = radius * std::cos(angle) + p.stddev * rng.normal();
    row[1] = radius * std::sin(angle) + p.stddev * rng.normal();
    for (std::size_t d = 2; d < p.feature_dim; ++d) row[d] = p.stddev * rng.normal();
  }
  return ds;
}

inline Dataset generate_synthetic(DatasetKind kind, const SyntheticParams& params, std::uint64_t seed) {
  if (kind == DatasetKind::synthetic_gaussian) return generate_gaussian(params, seed);
  if (kind == DatasetKind::synthetic_rings) return generate_rings(params, seed);
  throw ConfigError("generate_synthetic: not a synthetic dataset kind");
}

// ---------------------------------------------------------------------------

// Per-column normalization. Constant columns map to 0.
inline void normalize(Matrix& x, Normalization how) {
  if (how == Normalization::none || x.rows() == 0) return;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    if (how == Normalization::minmax) {
      double lo = x(0, c), hi = x(0, c);
      for (std::size_t r = 1; r < x.rows(); ++r) {
        lo = std::min(lo, x(r, c));
        hi = std::max(hi, x(r, c));
      }
      const double span = hi - lo;
      for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) = span > 0.0 ? (x(r, c) - lo) / span : 0.0;
    } else {
      double mean = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
      mean /= static_cast<double>(x.rows());
      double var = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
      const double sd = std::sqrt(var / static_cast<double>(x.rows()));
      for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) = sd > 0.0 ? (x(r, c) - mean) / sd : 0.0;
    }
  }
}

// Loads or generates the described dataset. Relative paths resolve against
// `base_dir`.
inline Dataset load_dataset(const DatasetDescriptor& d, std::uint64_t seed, const std::filesystem::path& base_dir = {}) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return (path.is_relative() && !base_dir.empty() ? base_dir / path : path).string();
  };
  Dataset ds;
  switch (d.kind) {
    case DatasetKind::idx_images: ds = load_idx(resolve(d.images_path), resolve(d.labels_path)); break;
    case DatasetKind::csv_rows: ds = load_csv(resolve(d.csv_path), d.label_column); break;
    case DatasetKind::synthetic_gaussian:
    case DatasetKind::synthetic_rings: ds = generate_synthetic(d.kind, d.synthetic, seed); break;
  }
  if (d.limit > 0 && d.limit < ds.size()) {
    std::vector<std::size_t> keep(d.limit);
    for (std::size_t i = 0; i < d.limit; ++i) keep[i] = i;
    ds.features = gather_rows(ds.features, keep);
    ds.labels.resize(d.limit);
  }
  if (d.num_classes > 0) {
    for (int y : ds.labels)
      if (static_cast<std::size_t>(y) >= d.num_classes)
        throw ConfigError("label " + std::to_string(y) + " outside declared num_classes " +
                          std::to_string(d.num_classes));
    ds.num_classes = d.num_classes;
  }
  normalize(ds.features, d.effective_normalization());
  if (!ds.features.all_finite()) throw NumericError("dataset contains non-finite features after normalization");
  return ds;
}

}  // namespace sqmd
