#pragma once

// Training objective: omega * CE + ZIP NLL + count loss, with exact gradients
// w.r.t. the two head outputs (positive-bin logits and structural-zero logits).

#include <cmath>
#include <concepts>
#include <limits>
#include <stdexcept>
#include <string>

#include "zipcount/blockgrid.hpp"
#include "zipcount/tensor.hpp"
#include "zipcount/zipdist.hpp"

namespace zipcount {

struct LossWeights {
  double omega = 1.0;
};

template <std::floating_point Real = double>
struct ValueGrad {
  Real value{};
  Tensor3<Real> grad;
};

template <std::floating_point Real = double>
struct NllMapResult {
  Real value{};
  Tensor3<Real> d_pi_logits;
  Tensor3<Real> d_lambda;
};

/// Raw outputs of the two heads for one image.
template <std::floating_point Real = double>
struct HeadOutputs {
  Tensor3<Real> lambda_logits;  // (n - 1) x h x w
  Tensor3<Real> pi_logits;      // 1 x h x w
};

/// Everything decoded from the heads: P*_lambda, lambda, pi and Y* = (1 - pi) lambda.
template <std::floating_point Real = double>
struct DecodedHeads {
  Tensor3<Real> prob_lambda;
  Tensor3<Real> lambda;
  Tensor3<Real> pi;
  Tensor3<Real> density;
};

template <std::floating_point Real = double>
struct LossReport {
  Real ce{};
  Real nll{};
  Real count{};
  Real total{};
  Tensor3<Real> grad_lambda_logits;
  Tensor3<Real> grad_pi_logits;
};

namespace detail {

inline void check_count_grid(const CountMap& y, std::size_t h, std::size_t w, const char* what) {
  if (y.counts.height() != h || y.counts.width() != w) {
    throw ShapeError(std::string(what) + ": count map is " + y.counts.shape_string() +
                     ", prediction grid is " + std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace detail

/// Channel-wise softmax for every block.
template <std::floating_point Real>
Tensor3<Real> softmax_channels(const Tensor3<Real>& logits) {
  Tensor3<Real> out(logits.channels(), logits.height(), logits.width());
  const std::size_t n = logits.channels();
  for (std::size_t b = 0; b < logits.plane(); ++b) {
    Real hi = -std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < n; ++k) hi = std::max(hi, logits.at(k, b));
    Real z = 0;
    for (std::size_t k = 0; k < n; ++k) z += (out.at(k, b) = std::exp(logits.at(k, b) - hi));
    for (std::size_t k = 0; k < n; ++k) out.at(k, b) /= z;
  }
  return out;
}

/// Mean cross-entropy over blocks with Y > 0 between softmax(logits) and the
/// one-hot positive bin of Y. Zero (with zero gradient) when no block is positive.
template <std::floating_point Real = double>
ValueGrad<Real> ce_positive(const Tensor3<Real>& lambda_logits, const CountMap& y,
                            const BinScheme& s) {
  if (lambda_logits.channels() != s.positive_size()) {
    throw ShapeError("ce_positive: expected " + std::to_string(s.positive_size()) +
                     " logit channels, got " + std::to_string(lambda_logits.channels()));
  }
  detail::check_count_grid(y, lambda_logits.height(), lambda_logits.width(), "ce_positive");
  ValueGrad<Real> out{Real(0), Tensor3<Real>(lambda_logits.channels(), lambda_logits.height(),
                                             lambda_logits.width())};
  const auto targets = one_hot_positive(y, s);
  if (targets.empty()) return out;

  const std::size_t n = lambda_logits.channels();
  const Real inv_rows = Real(1) / Real(targets.rows());
  Real total = 0;
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    const std::size_t b = targets.blocks[r];
    Real hi = -std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < n; ++k) hi = std::max(hi, lambda_logits.at(k, b));
    Real z = 0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp(lambda_logits.at(k, b) - hi);
    const Real log_z = hi + std::log(z);
    total += log_z - lambda_logits.at(targets.bin[r], b);
    for (std::size_t k = 0; k < n; ++k) {
      const Real p = std::exp(lambda_logits.at(k, b) - log_z);
      out.grad.at(k, b) = (p - (k == targets.bin[r] ? Real(1) : Real(0))) * inv_rows;
    }
  }
  out.value = total * inv_rows;
  return out;
}

/// Sum over all blocks of the ZIP negative log-likelihood.
template <std::floating_point Real = double>
NllMapResult<Real> zip_nll_map(const Tensor3<Real>& pi_logits, const Tensor3<Real>& lambda_map,
                               const CountMap& y) {
  if (pi_logits.channels() != 1 || lambda_map.channels() != 1) {
    throw ShapeError("zip_nll_map: pi logits and lambda must be single-channel");
  }
  require_same_grid(pi_logits, lambda_map, "zip_nll_map");
  detail::check_count_grid(y, pi_logits.height(), pi_logits.width(), "zip_nll_map");
  NllMapResult<Real> out{Real(0), Tensor3<Real>(1, pi_logits.height(), pi_logits.width()),
                         Tensor3<Real>(1, pi_logits.height(), pi_logits.width())};
  for (std::size_t b = 0; b < pi_logits.plane(); ++b) {
    const Real lambda = lambda_map.at(0, b);
    if (!(lambda > Real(0))) {
      throw std::domain_error("zip_nll_map: non-positive rate at block " + std::to_string(b));
    }
    const auto g = zip_nll_with_grad<Real>(y.at(b), pi_logits.at(0, b), lambda);
    out.value += g.nll;
    out.d_pi_logits.at(0, b) = g.d_logit_pi;
    out.d_lambda.at(0, b) = g.d_lambda;
  }
  return out;
}

/// |sum(pred) - sum(Y)| with gradient sign(residual) on every block (0 at a tie).
template <std::floating_point Real = double>
ValueGrad<Real> count_loss(const Tensor3<Real>& y_pred, const CountMap& y) {
  if (y_pred.channels() != 1) throw ShapeError("count_loss: prediction must be single-channel");
  detail::check_count_grid(y, y_pred.height(), y_pred.width(), "count_loss");
  Real predicted = 0;
  for (auto v : y_pred.values()) predicted += v;
  const Real residual = predicted - Real(y.total());
  const Real sign = residual > 0 ? Real(1) : (residual < 0 ? Real(-1) : Real(0));
  return {std::abs(residual), Tensor3<Real>(1, y_pred.height(), y_pred.width(), sign)};
}

template <std::floating_point Real = double>
DecodedHeads<Real> decode_heads(const HeadOutputs<Real>& heads, const BinScheme& s) {
  if (heads.lambda_logits.channels() != s.positive_size()) {
    throw ShapeError("lambda head has " + std::to_string(heads.lambda_logits.channels()) +
                     " channels; scheme has " + std::to_string(s.positive_size()) +
                     " positive bins");
  }
  if (heads.pi_logits.channels() != 1) throw ShapeError("pi head must be single-channel");
  require_same_grid(heads.lambda_logits, heads.pi_logits, "decode_heads");
  DecodedHeads<Real> d;
  d.prob_lambda = softmax_channels(heads.lambda_logits);
  d.lambda = decode_expectation(d.prob_lambda, s);
  d.pi = Tensor3<Real>(1, heads.pi_logits.height(), heads.pi_logits.width());
  d.density = d.pi;
  for (std::size_t b = 0; b < d.pi.plane(); ++b) {
    d.pi.at(0, b) = sigmoid(heads.pi_logits.at(0, b));
    d.density.at(0, b) = (Real(1) - d.pi.at(0, b)) * d.lambda.at(0, b);
  }
  return d;
}

/// omega * CE + NLL + count. Gradients reach the lambda logits through the
/// CE term and through lambda = sum_k P_k b_k (NLL and Y*), and reach the pi
/// logits through the NLL and Y* = (1 - pi) lambda.
template <std::floating_point Real = double>
LossReport<Real> total_loss(const LossWeights& w, const HeadOutputs<Real>& heads,
                            const CountMap& y, const BinScheme& s) {
  if (!(w.omega >= 0)) throw std::invalid_argument("omega must be non-negative");
  const auto d = decode_heads(heads, s);
  const auto ce = ce_positive(heads.lambda_logits, y, s);
  const auto nll = zip_nll_map(heads.pi_logits, d.lambda, y);
  const auto cnt = count_loss(d.density, y);
  const Real omega = Real(w.omega);

  LossReport<Real> rep;
  rep.ce = ce.value;
  rep.nll = nll.value;
  rep.count = cnt.value;
  rep.total = omega * rep.ce + rep.nll + rep.count;
  rep.grad_lambda_logits = Tensor3<Real>(heads.lambda_logits.channels(),
                                         heads.lambda_logits.height(), heads.lambda_logits.width());
  rep.grad_pi_logits = Tensor3<Real>(1, heads.pi_logits.height(), heads.pi_logits.width());

  const auto centers = s.positive_centers();
  for (std::size_t b = 0; b < d.pi.plane(); ++b) {
    const Real pi = d.pi.at(0, b);
    const Real lambda = d.lambda.at(0, b);
    const Real d_density = cnt.grad.at(0, b);
    const Real d_lambda = nll.d_lambda.at(0, b) + d_density * (Real(1) - pi);
    rep.grad_pi_logits.at(0, b) = nll.d_pi_logits.at(0, b) - d_density * lambda * pi * (Real(1) - pi);
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Real p = d.prob_lambda.at(k, b);
      rep.grad_lambda_logits.at(k, b) =
          omega * ce.grad.at(k, b) + d_lambda * p * (Real(centers[k]) - lambda);
    }
  }
  return rep;
}

}  // namespace zipcount
