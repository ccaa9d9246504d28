#pragma once

// Point annotations -> blockwise count maps, and the count-bin quantization
// used by the classification heads.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zipcount/tensor.hpp"

namespace zipcount {

/// Image of image_h x image_w pixels cut into block x block cells. Sizes that
/// are not multiples of the block are zero-padded on the right/bottom, so the
/// grid is the ceiling of the division.
struct GridSpec {
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t block = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t padded_h() const { return grid_h * block; }
  std::size_t padded_w() const { return grid_w * block; }
  std::size_t blocks() const { return grid_h * grid_w; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline GridSpec make_grid(std::int64_t image_h, std::int64_t image_w, std::int64_t block) {
  if (image_h <= 0 || image_w <= 0) throw std::invalid_argument("image dimensions must be positive");
  if (block <= 0) throw std::invalid_argument("block size must be positive");
  const auto h = static_cast<std::size_t>(image_h);
  const auto w = static_cast<std::size_t>(image_w);
  const auto r = static_cast<std::size_t>(block);
  return GridSpec{h, w, r, (h + r - 1) / r, (w + r - 1) / r};
}

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct AnnotationSet {
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::vector<Point> points;
};

/// Rescale an annotation set (points and image size) by a positive factor.
/// The rescaled image size is rounded to the nearest pixel, at least 1.
inline AnnotationSet scale_annotations(const AnnotationSet& ann, double factor) {
  if (!(factor > 0)) throw std::invalid_argument("scale factor must be positive");
  AnnotationSet out;
  out.image_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ann.image_h * factor)));
  out.image_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ann.image_w * factor)));
  out.points.reserve(ann.points.size());
  for (const auto& p : ann.points) {
    out.points.push_back({std::min(p.x * factor, double(out.image_w)),
                          std::min(p.y * factor, double(out.image_h))});
  }
  return out;
}

class AnnotationError : public std::invalid_argument {
 public:
  AnnotationError(const std::string& msg, std::vector<std::size_t> offending)
      : std::invalid_argument(msg), offending_(std::move(offending)) {}
  const std::vector<std::size_t>& offending() const { return offending_; }

 private:
  std::vector<std::size_t> offending_;
};

/// Ground-truth blockwise counts Y (one channel).
struct CountMap {
  GridSpec grid;
  Tensor3<std::int64_t> counts;

  explicit CountMap(const GridSpec& g = {}) : grid(g), counts(1, g.grid_h, g.grid_w, 0) {}

  std::int64_t& operator()(std::size_t i, std::size_t j) { return counts(0, i, j); }
  std::int64_t operator()(std::size_t i, std::size_t j) const { return counts(0, i, j); }
  std::int64_t at(std::size_t block) const { return counts.at(0, block); }
  std::size_t blocks() const { return counts.plane(); }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts.values()) t += v;
    return t;
  }
};

/// Histogram each point into block (floor(y / r), floor(x / r)). Points must
/// satisfy 0 <= x <= W and 0 <= y <= H; x == W (y == H) falls in the last
/// column (row). Any other point is reported by index.
inline CountMap points_to_count_map(const AnnotationSet& ann, const GridSpec& grid) {
  if (ann.image_h != grid.image_h || ann.image_w != grid.image_w) {
    throw std::invalid_argument("annotation image size does not match grid");
  }
  std::vector<std::size_t> bad;
  for (std::size_t k = 0; k < ann.points.size(); ++k) {
    const auto& p = ann.points[k];
    const bool ok = p.x >= 0 && p.y >= 0 && p.x <= double(grid.image_w) && p.y <= double(grid.image_h);
    if (!ok) bad.push_back(k);  // NaN fails every comparison above
  }
  if (!bad.empty()) {
    std::string msg = "points out of image bounds at index";
    for (auto k : bad) msg += " " + std::to_string(k);
    throw AnnotationError(msg, std::move(bad));
  }
  CountMap map(grid);
  const auto r = double(grid.block);
  for (const auto& p : ann.points) {
    auto i = static_cast<std::size_t>(std::floor(p.y / r));
    auto j = static_cast<std::size_t>(std::floor(p.x / r));
    map(std::min(i, grid.grid_h - 1), std::min(j, grid.grid_w - 1)) += 1;
  }
  return map;
}

/// Integer interval [lo, hi], or [lo, inf) when hi is empty.
struct Bin {
  std::int64_t lo = 0;
  std::optional<std::int64_t> hi;

  bool contains(std::int64_t v) const { return v >= lo && (!hi || v <= *hi); }
  bool open() const { return !hi.has_value(); }
  friend bool operator==(const Bin&, const Bin&) = default;
};

/// Ordered count bins partitioning {0, 1, 2, ...} with one representative
/// center per bin. The first bin is {0}, the last is open.
class BinScheme {
 public:
  BinScheme(std::vector<Bin> bins, std::vector<double> centers)
      : bins_(std::move(bins)), centers_(std::move(centers)) {
    validate();
  }

  std::size_t size() const { return bins_.size(); }
  std::size_t positive_size() const { return bins_.size() - 1; }
  const std::vector<Bin>& bins() const { return bins_; }
  std::span<const double> centers() const { return centers_; }
  std::span<const double> positive_centers() const { return std::span(centers_).subspan(1); }
  /// Lower edge K of the open bin [K, inf).
  std::int64_t open_lower() const { return bins_.back().lo; }
  double open_center() const { return centers_.back(); }

  BinScheme with_open_center(double c) const {
    auto centers = centers_;
    centers.back() = c;
    return BinScheme(bins_, std::move(centers));
  }

  friend bool operator==(const BinScheme&, const BinScheme&) = default;

 private:
  void validate() const {
    if (bins_.size() < 2) throw std::invalid_argument("bin scheme needs at least two bins");
    if (centers_.size() != bins_.size()) throw std::invalid_argument("one center per bin required");
    if (bins_.front().lo != 0 || bins_.front().hi != std::optional<std::int64_t>(0)) {
      throw std::invalid_argument("first bin must be exactly {0}");
    }
    if (!bins_.back().open()) throw std::invalid_argument("last bin must be open");
    for (std::size_t k = 0; k < bins_.size(); ++k) {
      const auto& b = bins_[k];
      if (k + 1 < bins_.size()) {
        if (b.open()) throw std::invalid_argument("only the last bin may be open");
        if (*b.hi < b.lo) throw std::invalid_argument("empty bin");
        if (bins_[k + 1].lo != *b.hi + 1) throw std::invalid_argument("bins must be contiguous");
      }
      const double c = centers_[k];
      if (!(c >= double(b.lo)) || (b.hi && c > double(*b.hi))) {
        throw std::invalid_argument("center " + std::to_string(c) + " lies outside bin " +
                                    std::to_string(k));
      }
      if (k > 0 && !(c > centers_[k - 1])) throw std::invalid_argument("centers must increase");
    }
  }

  std::vector<Bin> bins_;
  std::vector<double> centers_;
};

/// Singleton bins {0}, ..., {K-1} followed by [K, inf).
inline BinScheme singleton_bins(std::int64_t open_lower, std::optional<double> open_center = {}) {
  if (open_lower < 1) throw std::invalid_argument("open bin must start at 1 or above");
  std::vector<Bin> bins;
  std::vector<double> centers;
  for (std::int64_t k = 0; k < open_lower; ++k) {
    bins.push_back({k, k});
    centers.push_back(double(k));
  }
  bins.push_back({open_lower, std::nullopt});
  centers.push_back(open_center.value_or(double(open_lower + 1)));
  return BinScheme(std::move(bins), std::move(centers));
}

/// Default scheme for a supported block size: K = r / 2, so r = 8 gives
/// {0}, {1}, {2}, {3}, [4, inf). The open-bin center falls back to K + 1.
inline BinScheme default_bins(std::int64_t block, std::optional<double> open_center = {}) {
  if (block != 8 && block != 16 && block != 32) {
    throw std::invalid_argument("no default bins for block size " + std::to_string(block) +
                                "; supply a bin config");
  }
  return singleton_bins(block / 2, open_center);
}

/// Replace the open-bin center by the mean of the training counts that fall
/// in the open bin. Unchanged when no count reaches it.
inline BinScheme fit_open_center(const BinScheme& s, std::span<const CountMap> maps) {
  long double sum = 0;
  std::size_t n = 0;
  for (const auto& m : maps) {
    for (auto v : m.counts.values()) {
      if (v >= s.open_lower()) {
        sum += v;
        ++n;
      }
    }
  }
  if (n == 0) return s;
  return s.with_open_center(static_cast<double>(sum / n));
}

inline std::size_t count_to_bin(std::int64_t v, const BinScheme& s) {
  if (v < 0) throw std::domain_error("count must be non-negative");
  const auto& bins = s.bins();
  auto it = std::upper_bound(bins.begin(), bins.end(), v,
                             [](std::int64_t value, const Bin& b) { return value < b.lo; });
  return static_cast<std::size_t>(std::distance(bins.begin(), it)) - 1;
}

/// Targets for the positive-block cross-entropy: blocks with Y > 0 in
/// row-major order and their bin index among the n - 1 positive bins.
struct PositiveTargets {
  std::size_t classes = 0;
  std::vector<std::size_t> blocks;
  std::vector<std::size_t> bin;

  std::size_t rows() const { return blocks.size(); }
  bool empty() const { return blocks.empty(); }
  /// Dense rows x classes one-hot matrix (row-major).
  std::vector<double> one_hot() const {
    std::vector<double> m(rows() * classes, 0.0);
    for (std::size_t r = 0; r < rows(); ++r) m[r * classes + bin[r]] = 1.0;
    return m;
  }
};

inline PositiveTargets one_hot_positive(const CountMap& y, const BinScheme& s) {
  PositiveTargets t;
  t.classes = s.positive_size();
  for (std::size_t b = 0; b < y.blocks(); ++b) {
    const auto v = y.at(b);
    if (v > 0) {
      t.blocks.push_back(b);
      t.bin.push_back(count_to_bin(v, s) - 1);
    }
  }
  return t;
}

/// Per-block expectation over bin centers. A map with n channels decodes
/// against all centers; one with n - 1 channels against the positive centers.
template <std::floating_point Real>
Tensor3<Real> decode_expectation(const Tensor3<Real>& probs, const BinScheme& s) {
  std::span<const double> centers;
  if (probs.channels() == s.size()) {
    centers = s.centers();
  } else if (probs.channels() == s.positive_size()) {
    centers = s.positive_centers();
  } else {
    throw ShapeError("probability map has " + std::to_string(probs.channels()) +
                     " channels; scheme has " + std::to_string(s.size()) + " bins");
  }
  Tensor3<Real> out(1, probs.height(), probs.width());
  for (std::size_t b = 0; b < probs.plane(); ++b) {
    Real sum = 0;
    Real expectation = 0;
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Real p = probs.at(k, b);
      if (p < Real(0)) throw std::domain_error("negative probability in block " + std::to_string(b));
      sum += p;
      expectation += p * Real(centers[k]);
    }
    if (std::abs(sum - Real(1)) > Real(1e-4)) {
      throw std::domain_error("probabilities of block " + std::to_string(b) + " sum to " +
                              std::to_string(double(sum)));
    }
    out.at(0, b) = expectation;
  }
  return out;
}

struct SparsityStats {
  std::vector<std::uint64_t> histogram;  // histogram[v] = number of blocks with count v
  std::uint64_t zero_blocks = 0;
  std::uint64_t total_blocks = 0;

  double zero_fraction() const { return double(zero_blocks) / double(total_blocks); }
};

inline SparsityStats sparsity_stats(std::span<const CountMap> maps) {
  if (maps.empty()) throw std::invalid_argument("sparsity_stats: no maps");
  SparsityStats st;
  for (const auto& m : maps) {
    for (auto v : m.counts.values()) {
      if (v < 0) throw std::domain_error("negative block count");
      const auto u = static_cast<std::size_t>(v);
      if (u >= st.histogram.size()) st.histogram.resize(u + 1, 0);
      ++st.histogram[u];
      ++st.total_blocks;
    }
  }
  st.zero_blocks = st.histogram.empty() ? 0 : st.histogram[0];
  return st;
}

}  // namespace zipcount
