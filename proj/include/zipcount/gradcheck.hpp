#pragma once

// Randomized finite-difference verification of the loss gradients, as run by
// `zipcount grad-check`. Losses are re-evaluated in long double for the
// central differences so that cancellation does not dominate the comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "zipcount/blockgrid.hpp"
#include "zipcount/losses.hpp"
#include "zipcount/tensor.hpp"
#include "zipcount/zipdist.hpp"

namespace zipcount {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 200;
  double term_tolerance = 1e-5;
  double composite_tolerance = 1e-4;
  double term_step = 1e-5;
  double composite_step = 1e-4;
  // Gradients with both magnitudes below this are compared absolutely.
  double relative_floor = 1e-6;
  // Test hook: negate the analytic gradient of this term ("block", "ce",
  // "nll", "count" or "composite") before comparing.
  std::string inject_fault;
};

struct TermCheck {
  std::string term;
  double tolerance = 0;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;  // location of the worst coordinate
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
  std::vector<TermCheck> terms;
  bool passed() const {
    return std::all_of(terms.begin(), terms.end(), [](const auto& t) { return t.passed(); });
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

using LD = long double;

template <typename T>
Tensor3<LD> widen(const Tensor3<T>& t) {
  Tensor3<LD> out(t.channels(), t.height(), t.width());
  for (std::size_t k = 0; k < t.size(); ++k) out.values()[k] = t.values()[k];
  return out;
}

inline void record(TermCheck& tc, double analytic, double numeric, double floor, const std::string& where) {
  const double e = relative_error(analytic, numeric, floor);
  ++tc.checked;
  if (tc.checked == 1 || e > tc.max_rel_error) {
    tc.max_rel_error = e;
    std::ostringstream os;
    os.precision(10);
    os << where << " analytic=" << analytic << " numeric=" << numeric;
    tc.worst = os.str();
  }
}

// Central difference of f over every entry of x, compared with grad.
inline void check_tensor(TermCheck& tc, Tensor3<LD> x, const Tensor3<double>& grad, double step,
                         double floor, double sign, const std::string& label,
                         const std::function<LD(const Tensor3<LD>&)>& f) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    const LD orig = x.values()[k];
    x.values()[k] = orig + step;
    const LD up = f(x);
    x.values()[k] = orig - step;
    const LD down = f(x);
    x.values()[k] = orig;
    const double numeric = static_cast<double>((up - down) / (2 * LD(step)));
    record(tc, sign * grad.values()[k], numeric, floor, label + "[" + std::to_string(k) + "]");
  }
}

struct RandomInstance {
  BinScheme bins;
  CountMap y;
  Tensor3<double> lambda_logits;
  Tensor3<double> pi_logits;
};

inline RandomInstance random_instance(std::mt19937_64& rng) {
  const bool big = std::uniform_int_distribution<int>(0, 3)(rng) == 0;
  const std::size_t h = big ? 5 : 3, w = big ? 7 : 3;
  const std::int64_t block = std::uniform_int_distribution<int>(0, 1)(rng) ? 8 : 16;
  RandomInstance r{default_bins(block), CountMap(make_grid(std::int64_t(h) * block, std::int64_t(w) * block, block)),
                   Tensor3<double>(), Tensor3<double>()};
  std::normal_distribution<double> logit(0.0, 1.5);
  std::uniform_real_distribution<double> pi_logit(-4.0, 4.0);
  std::bernoulli_distribution zero(0.5);
  std::uniform_int_distribution<std::int64_t> value(1, 12);
  for (std::size_t b = 0; b < r.y.blocks(); ++b) r.y.counts.at(0, b) = zero(rng) ? 0 : value(rng);
  r.lambda_logits = Tensor3<double>(r.bins.positive_size(), h, w);
  for (auto& v : r.lambda_logits.values()) v = logit(rng);
  r.pi_logits = Tensor3<double>(1, h, w);
  for (auto& v : r.pi_logits.values()) v = pi_logit(rng);
  return r;
}

}  // namespace detail

inline GradCheckReport run_grad_check(const GradCheckOptions& opt) {
  using detail::LD;
  if (opt.trials == 0) throw std::invalid_argument("trials must be >= 1");
  std::mt19937_64 rng(opt.seed);
  auto make_term = [](const char* name, double tol) {
    TermCheck t;
    t.term = name;
    t.tolerance = tol;
    return t;
  };
  auto sign_for = [&](const std::string& term) { return opt.inject_fault == term ? -1.0 : 1.0; };

  auto block = make_term("block", opt.term_tolerance);
  auto ce = make_term("ce", opt.term_tolerance);
  auto nll = make_term("nll", opt.term_tolerance);
  auto cnt = make_term("count", opt.term_tolerance);
  auto comp = make_term("composite", opt.composite_tolerance);

  std::uniform_int_distribution<std::int64_t> count_value(0, 50);
  std::uniform_real_distribution<double> logit_value(-10.0, 10.0);
  std::uniform_real_distribution<double> log_rate(std::log(1e-3), std::log(50.0));

  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::string trial = "trial " + std::to_string(t) + " ";

    // Single-block ZIP NLL over the wide parameter range.
    {
      const auto v = count_value(rng);
      const double a = logit_value(rng);
      const double lambda = std::exp(log_rate(rng));
      const auto g = zip_nll_with_grad<double>(v, a, lambda);
      const double h = opt.term_step;
      const double hl = opt.term_step * std::min(1.0, lambda);  // keep lambda - h well inside (0, inf)
      const LD da = (zip_nll_with_grad<LD>(v, LD(a) + h, lambda).nll -
                     zip_nll_with_grad<LD>(v, LD(a) - h, lambda).nll) / (2 * LD(h));
      const LD dl = (zip_nll_with_grad<LD>(v, a, LD(lambda) + hl).nll -
                     zip_nll_with_grad<LD>(v, a, LD(lambda) - hl).nll) / (2 * LD(hl));
      const std::string where = trial + "v=" + std::to_string(v);
      detail::record(block, sign_for("block") * g.d_logit_pi, double(da), opt.relative_floor, where + " d_logit_pi");
      detail::record(block, sign_for("block") * g.d_lambda, double(dl), opt.relative_floor, where + " d_lambda");
    }

    auto inst = detail::random_instance(rng);
    const auto& s = inst.bins;
    const auto& y = inst.y;

    // Cross-entropy on positive blocks.
    {
      const auto an = ce_positive(inst.lambda_logits, y, s);
      detail::check_tensor(ce, detail::widen(inst.lambda_logits), an.grad, opt.term_step,
                           opt.relative_floor, sign_for("ce"), trial + "lambda_logits",
                           [&](const Tensor3<LD>& x) { return ce_positive(x, y, s).value; });
    }

    // ZIP NLL map, w.r.t. pi logits and the rate map.
    {
      const auto lambda = decode_heads(HeadOutputs<double>{inst.lambda_logits, inst.pi_logits}, s).lambda;
      const auto an = zip_nll_map(inst.pi_logits, lambda, y);
      const auto lambda_ld = detail::widen(lambda);
      const auto pi_ld = detail::widen(inst.pi_logits);
      detail::check_tensor(nll, pi_ld, an.d_pi_logits, opt.term_step, opt.relative_floor, sign_for("nll"),
                           trial + "pi_logits",
                           [&](const Tensor3<LD>& x) { return zip_nll_map(x, lambda_ld, y).value; });
      detail::check_tensor(nll, lambda_ld, an.d_lambda, opt.term_step, opt.relative_floor, sign_for("nll"),
                           trial + "lambda",
                           [&](const Tensor3<LD>& x) { return zip_nll_map(pi_ld, x, y).value; });
    }

    // Count loss, away from the kink at a zero residual.
    {
      Tensor3<double> pred(1, y.counts.height(), y.counts.width());
      std::uniform_real_distribution<double> u(0.0, 6.0);
      for (auto& v : pred.values()) v = u(rng);
      double sum = 0;
      for (auto v : pred.values()) sum += v;
      if (std::abs(sum - double(y.total())) < 0.5) pred.values()[0] += 1.0;
      const auto an = count_loss(pred, y);
      detail::check_tensor(cnt, detail::widen(pred), an.grad, opt.term_step, opt.relative_floor,
                           sign_for("count"), trial + "density",
                           [&](const Tensor3<LD>& x) { return count_loss(x, y).value; });
    }

    // Composite loss through the rate decode and Y* = (1 - pi) lambda.
    {
      const LossWeights w{1.0};
      const HeadOutputs<double> heads{inst.lambda_logits, inst.pi_logits};
      const auto d = decode_heads(heads, s);
      double predicted = 0;
      for (auto v : d.density.values()) predicted += v;
      if (std::abs(predicted - double(y.total())) < 0.05) continue;  // too close to the count-loss kink
      const auto an = total_loss(w, heads, y, s);
      const auto ll = detail::widen(inst.lambda_logits);
      const auto pl = detail::widen(inst.pi_logits);
      detail::check_tensor(comp, ll, an.grad_lambda_logits, opt.composite_step, opt.relative_floor,
                           sign_for("composite"), trial + "lambda_logits", [&](const Tensor3<LD>& x) {
                             return total_loss(w, HeadOutputs<LD>{x, pl}, y, s).total;
                           });
      detail::check_tensor(comp, pl, an.grad_pi_logits, opt.composite_step, opt.relative_floor,
                           sign_for("composite"), trial + "pi_logits", [&](const Tensor3<LD>& x) {
                             return total_loss(w, HeadOutputs<LD>{ll, x}, y, s).total;
                           });
    }
  }
  return {{block, ce, nll, cnt, comp}};
}

}  // namespace zipcount
