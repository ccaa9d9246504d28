#pragma once

// Reference model: per-block linear lambda-head and pi-head over a given
// feature map (a 1x1 convolution), decoded through the ZIP expectation, and
// an AdamW training loop over the composite loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zipcount/blockgrid.hpp"
#include "zipcount/io.hpp"
#include "zipcount/losses.hpp"
#include "zipcount/tensor.hpp"
#include "zipcount/zipdist.hpp"

namespace zipcount {

using FeatureMap = Tensor3<double>;

/// lambda-head: (n - 1) x C weights + (n - 1) biases; pi-head: C weights + 1 bias.
struct HeadParams {
  std::size_t channels = 0;
  std::size_t classes = 0;  // n - 1 positive bins
  std::vector<double> lambda_w;
  std::vector<double> lambda_b;
  std::vector<double> pi_w;
  double pi_b = 0;

  HeadParams() = default;
  HeadParams(std::size_t c, std::size_t k)
      : channels(c), classes(k), lambda_w(c * k, 0.0), lambda_b(k, 0.0), pi_w(c, 0.0) {}

  std::size_t size() const { return lambda_w.size() + lambda_b.size() + pi_w.size() + 1; }

  /// Flat view order: lambda_w, lambda_b, pi_w, pi_b.
  std::vector<double> flatten() const {
    std::vector<double> v;
    v.reserve(size());
    v.insert(v.end(), lambda_w.begin(), lambda_w.end());
    v.insert(v.end(), lambda_b.begin(), lambda_b.end());
    v.insert(v.end(), pi_w.begin(), pi_w.end());
    v.push_back(pi_b);
    return v;
  }
  void assign(std::span<const double> v) {
    if (v.size() != size()) throw ShapeError("HeadParams::assign: size mismatch");
    auto it = v.begin();
    std::copy_n(it, lambda_w.size(), lambda_w.begin()), it += lambda_w.size();
    std::copy_n(it, lambda_b.size(), lambda_b.begin()), it += lambda_b.size();
    std::copy_n(it, pi_w.size(), pi_w.begin()), it += pi_w.size();
    pi_b = *it;
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

struct InitOptions {
  std::uint64_t seed = 0;
  // Start pi near the background prior (pi = 0.9) instead of 0.5.
  bool prior_pi_bias = true;
  double prior_pi = 0.9;
};

/// Weights uniform in [-1/sqrt(C), 1/sqrt(C)], lambda biases 0, pi bias
/// logit(prior_pi) or 0.
inline HeadParams init_heads(std::size_t channels, const BinScheme& s, const InitOptions& opt = {}) {
  if (channels == 0) throw std::invalid_argument("feature map needs at least one channel");
  HeadParams p(channels, s.positive_size());
  std::mt19937_64 rng(opt.seed);
  const double bound = 1.0 / std::sqrt(double(channels));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : p.lambda_w) w = u(rng);
  for (auto& w : p.pi_w) w = u(rng);
  p.pi_b = opt.prior_pi_bias ? logit(opt.prior_pi) : 0.0;
  return p;
}

struct ModelOutput {
  HeadOutputs<double> heads;
  DecodedHeads<double> decoded;
  double count = 0;

  const Tensor3<double>& prob_lambda() const { return decoded.prob_lambda; }
  const Tensor3<double>& lambda() const { return decoded.lambda; }
  const Tensor3<double>& pi() const { return decoded.pi; }
  const Tensor3<double>& density() const { return decoded.density; }
};

/// c* = sum of the density map.
inline double predict_count(const ModelOutput& out) {
  double c = 0;
  for (double v : out.density().values()) c += v;
  return c;
}

/// Head logits from features. With zero_inflation off the pi logits are -inf
/// (pi = 0), which reduces the model to plain Poisson.
inline HeadOutputs<double> apply_heads(const FeatureMap& f, const HeadParams& p,
                                       bool zero_inflation = true) {
  if (f.channels() != p.channels) {
    throw ShapeError("feature map has " + std::to_string(f.channels()) + " channels, heads expect " +
                     std::to_string(p.channels));
  }
  HeadOutputs<double> h{Tensor3<double>(p.classes, f.height(), f.width()),
                        Tensor3<double>(1, f.height(), f.width())};
  for (std::size_t b = 0; b < f.plane(); ++b) {
    for (std::size_t k = 0; k < p.classes; ++k) {
      double z = p.lambda_b[k];
      for (std::size_t c = 0; c < p.channels; ++c) z += p.lambda_w[k * p.channels + c] * f.at(c, b);
      h.lambda_logits.at(k, b) = z;
    }
    double a = p.pi_b;
    for (std::size_t c = 0; c < p.channels; ++c) a += p.pi_w[c] * f.at(c, b);
    h.pi_logits.at(0, b) = zero_inflation ? a : -std::numeric_limits<double>::infinity();
  }
  return h;
}

inline ModelOutput forward(const FeatureMap& f, const HeadParams& p, const BinScheme& s,
                           bool zero_inflation = true) {
  if (p.classes != s.positive_size()) throw ShapeError("head/bin scheme mismatch");
  ModelOutput out;
  out.heads = apply_heads(f, p, zero_inflation);
  out.decoded = decode_heads(out.heads, s);
  out.count = predict_count(out);
  return out;
}

/// Chain head-output gradients back to the head parameters (accumulates into grad).
inline void backprop_heads(const FeatureMap& f, const LossReport<double>& rep, HeadParams& grad,
                           bool zero_inflation = true) {
  for (std::size_t b = 0; b < f.plane(); ++b) {
    for (std::size_t k = 0; k < grad.classes; ++k) {
      const double g = rep.grad_lambda_logits.at(k, b);
      grad.lambda_b[k] += g;
      for (std::size_t c = 0; c < grad.channels; ++c) grad.lambda_w[k * grad.channels + c] += g * f.at(c, b);
    }
    if (!zero_inflation) continue;
    const double g = rep.grad_pi_logits.at(0, b);
    grad.pi_b += g;
    for (std::size_t c = 0; c < grad.channels; ++c) grad.pi_w[c] += g * f.at(c, b);
  }
}

/// Composite loss of one example and its gradient w.r.t. the head parameters.
struct ParamLoss {
  LossReport<double> report;
  HeadParams grad;
};

inline ParamLoss loss_and_param_grad(const FeatureMap& f, const CountMap& y, const HeadParams& p,
                                     const BinScheme& s, const LossWeights& w,
                                     bool zero_inflation = true) {
  const auto heads = apply_heads(f, p, zero_inflation);
  ParamLoss out{total_loss(w, heads, y, s), HeadParams(p.channels, p.classes)};
  backprop_heads(f, out.report, out.grad, zero_inflation);
  return out;
}

struct Example {
  FeatureMap features;
  CountMap counts;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  double lr = 0.02;
  std::size_t warmup_steps = 50;
  double warmup_start_factor = 0.1;
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  double omega = 1.0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool zero_inflation = true;  // false: pi frozen at 0 (plain Poisson ablation)
  bool prior_pi_bias = true;
};

inline json train_config_to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"omega", c.omega},
          {"weight_decay", c.weight_decay},
          {"zero_inflation", c.zero_inflation},
          {"prior_pi_bias", c.prior_pi_bias}};
}

/// Reads the training keys present in j over the defaults in base.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base = {}) {
  try {
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("lr")) base.lr = j.at("lr").get<double>();
    if (j.contains("warmup_steps")) base.warmup_steps = j.at("warmup_steps").get<std::size_t>();
    if (j.contains("steps")) base.steps = j.at("steps").get<std::size_t>();
    if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("omega")) base.omega = j.at("omega").get<double>();
    if (j.contains("weight_decay")) base.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("zero_inflation")) base.zero_inflation = j.at("zero_inflation").get<bool>();
    if (j.contains("prior_pi_bias")) base.prior_pi_bias = j.at("prior_pi_bias").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed training config: ") + e.what());
  }
  if (base.lr < 0 || base.omega < 0 || base.weight_decay < 0) {
    throw std::invalid_argument("lr, omega and weight_decay must be non-negative");
  }
  if (base.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  return base;
}

/// Linear warmup from warmup_start_factor * lr to lr, then constant.
inline double learning_rate(const TrainConfig& c, std::size_t step) {
  if (c.warmup_steps == 0 || step >= c.warmup_steps) return c.lr;
  const double t = double(step) / double(c.warmup_steps);
  return c.lr * (c.warmup_start_factor + (1.0 - c.warmup_start_factor) * t);
}

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t n, double beta1, double beta2, double eps, double weight_decay)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= lr * wd_ * params[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double total = 0, ce = 0, nll = 0, count = 0;
};

struct TrainResult {
  HeadParams params;
  std::vector<HeadParams> trajectory;  // params at the end of each epoch
  std::vector<EpochLoss> epochs;       // mean per-example losses over each epoch
  double min_lambda = std::numeric_limits<double>::infinity();
  double max_lambda = 0;
};

/// Minibatch AdamW on the mean composite loss of each batch. An epoch is one
/// pass over a seeded permutation of the dataset; the final batch of an epoch
/// may be short. Deterministic given config.seed.
inline TrainResult train(std::span<const Example> data, const BinScheme& s, const TrainConfig& cfg,
                         std::optional<HeadParams> init = std::nullopt) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  const std::size_t channels = data.front().features.channels();
  for (const auto& ex : data) {
    if (ex.features.channels() != channels) throw ShapeError("train: inconsistent feature channels");
  }

  TrainResult res;
  res.params = init ? *init
                    : init_heads(channels, s, {.seed = cfg.seed, .prior_pi_bias = cfg.prior_pi_bias});
  if (!cfg.zero_inflation) {
    std::fill(res.params.pi_w.begin(), res.params.pi_w.end(), 0.0);
    res.params.pi_b = 0.0;
  }
  const LossWeights weights{cfg.omega};
  AdamW opt(res.params.size(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t cursor = data.size();
  EpochLoss acc;
  std::size_t acc_n = 0;
  auto flat = res.params.flatten();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor >= data.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t end = std::min(cursor + cfg.batch_size, data.size());
    HeadParams grad(res.params.channels, res.params.classes);
    for (std::size_t k = cursor; k < end; ++k) {
      const auto& ex = data[order[k]];
      auto pl = loss_and_param_grad(ex.features, ex.counts, res.params, s, weights, cfg.zero_inflation);
      const auto& r = pl.report;
      if (!std::isfinite(r.total)) {
        std::string term = !std::isfinite(r.ce) ? "ce" : !std::isfinite(r.nll) ? "nll" : "count";
        throw TrainingError("non-finite loss at step " + std::to_string(step) + ", example " +
                            std::to_string(order[k]) + ", term " + term);
      }
      acc.total += r.total, acc.ce += r.ce, acc.nll += r.nll, acc.count += r.count;
      ++acc_n;
      auto g = pl.grad.flatten();
      auto gsum = grad.flatten();
      for (std::size_t i = 0; i < g.size(); ++i) gsum[i] += g[i];
      grad.assign(gsum);
    }
    const double inv = 1.0 / double(end - cursor);
    auto g = grad.flatten();
    for (auto& x : g) x *= inv;
    if (!cfg.zero_inflation) {
      // pi-head entries stay at zero
      std::fill(g.end() - std::ptrdiff_t(res.params.channels + 1), g.end(), 0.0);
    }
    opt.step(flat, g, learning_rate(cfg, step));
    if (!cfg.zero_inflation) std::fill(flat.end() - std::ptrdiff_t(res.params.channels + 1), flat.end(), 0.0);
    res.params.assign(flat);
    cursor = end;

    if (cursor >= data.size() || step + 1 == cfg.steps) {
      const double n = double(acc_n);
      res.epochs.push_back({res.epochs.size(), acc.total / n, acc.ce / n, acc.nll / n, acc.count / n});
      res.trajectory.push_back(res.params);
      acc = {};
      acc_n = 0;
    }
  }

  for (const auto& ex : data) {
    const auto out = forward(ex.features, res.params, s, cfg.zero_inflation);
    for (double l : out.lambda().values()) {
      res.min_lambda = std::min(res.min_lambda, l);
      res.max_lambda = std::max(res.max_lambda, l);
    }
  }
  return res;
}

/// Mean per-image ZIP NLL (plain Poisson NLL when zero_inflation is off).
inline double mean_nll(std::span<const Example> data, const HeadParams& p, const BinScheme& s,
                       bool zero_inflation = true) {
  if (data.empty()) throw std::invalid_argument("mean_nll: empty dataset");
  double total = 0;
  for (const auto& ex : data) {
    const auto out = forward(ex.features, p, s, zero_inflation);
    total += zip_nll_map(out.heads.pi_logits, out.lambda(), ex.counts).value;
  }
  return total / double(data.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: "ZCK1", u32 header length, JSON header, then four BCM8 tensor
// blocks (lambda weights (n-1) x C, lambda bias, pi weights, pi bias).

struct Checkpoint {
  BinScheme bins;
  HeadParams params;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  bool zero_inflation = true;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  json header = {{"format", "zipcount-checkpoint"},
                 {"version", 1},
                 {"bin_scheme", bins_to_json(ck.bins)},
                 {"channels", p.channels},
                 {"n", ck.bins.size()},
                 {"seed", ck.seed},
                 {"step", ck.step},
                 {"zero_inflation", ck.zero_inflation},
                 {"tensors", {"lambda_w", "lambda_b", "pi_w", "pi_b"}}};
  const auto text = header.dump();
  std::string out = "ZCK1";
  detail::put_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  auto block = [&](std::span<const double> v, std::size_t h, std::size_t w) {
    Tensor3<double> t(1, h, w);
    std::copy(v.begin(), v.end(), t.values().begin());
    out += encode_tensor(t);
  };
  block(p.lambda_w, p.classes, p.channels);
  block(p.lambda_b, 1, p.classes);
  block(p.pi_w, 1, p.channels);
  const double pb[1] = {p.pi_b};
  block(pb, 1, 1);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "ZCK1") throw FormatError("not a checkpoint");
  const auto len = detail::get_le<std::uint32_t>(bytes, 4);
  if (bytes.size() < 8 + std::size_t(len)) throw FormatError("truncated checkpoint header");
  json h;
  try {
    h = json::parse(bytes.substr(8, len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  auto bins = bins_from_json(h.at("bin_scheme"));
  const auto channels = h.at("channels").get<std::size_t>();
  if (h.at("n").get<std::size_t>() != bins.size()) throw FormatError("checkpoint bin count mismatch");
  HeadParams p(channels, bins.positive_size());
  std::size_t offset = 8 + len;
  auto take = [&](std::size_t h_, std::size_t w_) {
    auto t = decode_tensor<double>(bytes, offset);
    if (t.channels() != 1 || t.height() != h_ || t.width() != w_) {
      throw FormatError("checkpoint tensor has shape " + t.shape_string());
    }
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  p.lambda_w = take(p.classes, channels);
  p.lambda_b = take(1, p.classes);
  p.pi_w = take(1, channels);
  p.pi_b = take(1, 1).front();
  if (offset != bytes.size()) throw FormatError("trailing bytes in checkpoint");
  return {std::move(bins), std::move(p), h.at("seed").get<std::uint64_t>(),
          h.at("step").get<std::uint64_t>(), h.value("zero_inflation", true)};
}

inline void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace zipcount
