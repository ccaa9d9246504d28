#pragma once

// Synthetic scenes with a known structural-zero mask.
//
// The grid is split into a structural region (never holds a head) and a head
// region. Heads are dropped at head-region block centers and displaced by
// Gaussian jitter, so some head-region blocks end up empty: those are the
// sampling zeros. Features are informative about both the region and the
// local count.
//
// Per-scene seeds for a corpus are scene_seed(base, index), a splitmix64
// finalizer over base + (index + 1) * 0x9E3779B97F4A7C15.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zipcount/blockgrid.hpp"
#include "zipcount/io.hpp"
#include "zipcount/refmodel.hpp"
#include "zipcount/tensor.hpp"

namespace zipcount {

struct SceneConfig {
  GridSpec grid = make_grid(256, 256, 16);
  double structural_fraction = 0.7;
  double mean_heads = 60.0;
  double jitter_sigma = 4.0;  // pixels
  std::size_t feature_channels = 8;
  double separation = 1.5;   // mean shift of head-region features, in feature std units
  double count_shift = 1.0;  // per-head mean shift of the count channels
  std::uint64_t seed = 0;
};

struct SceneTruth {
  FeatureMap features;
  AnnotationSet annotations;
  Tensor3<std::uint8_t> structural_mask;  // 1 = structurally zero block
  CountMap count_map;
};

inline std::uint64_t scene_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + (index + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::size_t structural_block_count(const SceneConfig& cfg) {
  return static_cast<std::size_t>(std::llround(cfg.structural_fraction * double(cfg.grid.blocks())));
}

inline void validate(const SceneConfig& cfg) {
  if (cfg.grid.blocks() == 0) throw std::invalid_argument("scene grid is empty");
  if (!(cfg.structural_fraction >= 0 && cfg.structural_fraction <= 1)) {
    throw std::invalid_argument("structural_fraction must lie in [0,1]");
  }
  if (!(cfg.mean_heads >= 0)) throw std::invalid_argument("mean_heads must be non-negative");
  if (!(cfg.jitter_sigma >= 0)) throw std::invalid_argument("jitter_sigma must be non-negative");
  if (cfg.feature_channels == 0) throw std::invalid_argument("feature_channels must be >= 1");
  if (cfg.mean_heads > 0 && structural_block_count(cfg) == cfg.grid.blocks()) {
    throw std::invalid_argument("no head region left for mean_heads > 0");
  }
}

inline SceneTruth generate_scene(const SceneConfig& cfg) {
  validate(cfg);
  const auto& g = cfg.grid;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Structural region: the lowest values of a box-blurred noise field, which
  // gives spatially coherent background with an exact block count.
  std::vector<double> field(g.blocks());
  for (auto& v : field) v = gauss(rng);
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<double> next(field.size());
    for (std::size_t i = 0; i < g.grid_h; ++i) {
      for (std::size_t j = 0; j < g.grid_w; ++j) {
        double sum = 0;
        int n = 0;
        for (std::ptrdiff_t di = -1; di <= 1; ++di) {
          for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
            const auto ii = std::ptrdiff_t(i) + di, jj = std::ptrdiff_t(j) + dj;
            if (ii < 0 || jj < 0 || ii >= std::ptrdiff_t(g.grid_h) || jj >= std::ptrdiff_t(g.grid_w)) continue;
            sum += field[std::size_t(ii) * g.grid_w + std::size_t(jj)];
            ++n;
          }
        }
        next[i * g.grid_w + j] = sum / n;
      }
    }
    field = std::move(next);
  }
  std::vector<std::size_t> order(g.blocks());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return field[a] < field[b]; });

  SceneTruth t;
  t.structural_mask = Tensor3<std::uint8_t>(1, g.grid_h, g.grid_w, 0);
  const auto n_structural = structural_block_count(cfg);
  for (std::size_t k = 0; k < n_structural; ++k) t.structural_mask.at(0, order[k]) = 1;
  std::vector<std::size_t> head_blocks;
  for (std::size_t b = 0; b < g.blocks(); ++b) {
    if (!t.structural_mask.at(0, b)) head_blocks.push_back(b);
  }

  t.annotations.image_h = g.image_h;
  t.annotations.image_w = g.image_w;
  if (cfg.mean_heads > 0) {
    const auto heads = std::poisson_distribution<std::int64_t>(cfg.mean_heads)(rng);
    std::uniform_int_distribution<std::size_t> pick(0, head_blocks.size() - 1);
    const double r = double(g.block);
    const double max_x = std::nextafter(double(g.image_w), 0.0);
    const double max_y = std::nextafter(double(g.image_h), 0.0);
    auto in_head_region = [&](double x, double y) {
      if (x < 0 || y < 0 || x >= double(g.image_w) || y >= double(g.image_h)) return false;
      const auto b = std::size_t(y / r) * g.grid_w + std::size_t(x / r);
      return t.structural_mask.at(0, b) == 0;
    };
    for (std::int64_t h = 0; h < heads; ++h) {
      const auto b = head_blocks[pick(rng)];
      const double cx = std::min((double(b % g.grid_w) + 0.5) * r, max_x);
      const double cy = std::min((double(b / g.grid_w) + 0.5) * r, max_y);
      Point p{cx, cy};
      if (cfg.jitter_sigma > 0) {
        // Redraw jitter that leaves the head region; keep the center after 32 misses.
        for (int attempt = 0; attempt < 32; ++attempt) {
          const double x = cx + cfg.jitter_sigma * gauss(rng);
          const double y = cy + cfg.jitter_sigma * gauss(rng);
          if (in_head_region(x, y)) {
            p = {x, y};
            break;
          }
        }
      }
      t.annotations.points.push_back(p);
    }
  }
  t.count_map = points_to_count_map(t.annotations, g);

  const std::size_t C = cfg.feature_channels;
  const std::size_t region_channels = std::max<std::size_t>(1, C / 2);
  t.features = FeatureMap(C, g.grid_h, g.grid_w);
  for (std::size_t b = 0; b < g.blocks(); ++b) {
    const bool head_region = t.structural_mask.at(0, b) == 0;
    const double count = double(t.count_map.at(b));
    for (std::size_t c = 0; c < C; ++c) {
      const double mean = c < region_channels ? (head_region ? cfg.separation : 0.0)
                                              : cfg.count_shift * count;
      t.features.at(c, b) = mean + gauss(rng);
    }
  }
  return t;
}

/// Scenes seeded scene_seed(cfg.seed, first + k) for k in [0, n).
inline std::vector<SceneTruth> generate_corpus(const SceneConfig& cfg, std::size_t n,
                                               std::size_t first = 0) {
  std::vector<SceneTruth> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto c = cfg;
    c.seed = scene_seed(cfg.seed, first + k);
    out.push_back(generate_scene(c));
  }
  return out;
}

inline std::vector<Example> to_examples(std::span<const SceneTruth> scenes) {
  std::vector<Example> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({s.features, s.count_map});
  return out;
}

/// Ranking AUC (Mann-Whitney, ties count one half) of scores separating
/// positive labels from negative ones. Empty when either class is absent.
inline std::optional<double> ranking_auc(std::span<const double> scores,
                                         std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("ranking_auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < idx.size();) {
    std::size_t end = k;
    while (end < idx.size() && scores[idx[end]] == scores[idx[k]]) ++end;
    const double avg_rank = 0.5 * double(k + 1 + end);  // mean of ranks k+1..end
    for (std::size_t m = k; m < end; ++m) {
      if (labels[idx[m]]) {
        positive_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    k = end;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = positive_rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

/// AUC of pi for telling structural blocks from the rest.
inline std::optional<double> disentanglement_score(const Tensor3<double>& pi_map, const SceneTruth& truth) {
  require_same_grid(pi_map, truth.structural_mask, "disentanglement_score");
  return ranking_auc(pi_map.values(), truth.structural_mask.values());
}

/// Count maps with exactly round(zero_fraction * blocks) zero blocks each; the
/// other blocks get counts uniform in [1, max_count]. zero_fraction * blocks
/// must be an integer.
inline std::vector<CountMap> make_sparse_corpus(std::size_t n_maps, const GridSpec& grid,
                                                double zero_fraction, std::uint64_t seed,
                                                std::int64_t max_count = 5) {
  const double target = zero_fraction * double(grid.blocks());
  const auto zeros = static_cast<std::size_t>(std::llround(target));
  if (std::abs(target - double(zeros)) > 1e-9 || zeros > grid.blocks()) {
    throw std::invalid_argument("zero_fraction * blocks must be an integer in [0, blocks]");
  }
  if (max_count < 1) throw std::invalid_argument("max_count must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> value(1, max_count);
  std::vector<CountMap> out;
  for (std::size_t m = 0; m < n_maps; ++m) {
    std::vector<std::size_t> order(grid.blocks());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    CountMap map(grid);
    for (std::size_t k = zeros; k < order.size(); ++k) map.counts.at(0, order[k]) = value(rng);
    out.push_back(std::move(map));
  }
  return out;
}

/// Writes <name>.json (annotations) and <name>.bcm (count map) into dir.
inline void write_scene(const fs::path& dir, const std::string& name, const SceneTruth& truth) {
  write_annotation(dir / (name + ".json"), truth.annotations);
  write_bcm(dir / (name + ".bcm"), to_float_map(truth.count_map));
}

}  // namespace zipcount
