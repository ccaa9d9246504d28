#pragma once

// Poisson and zero-inflated Poisson (ZIP) probability functions.
//
// ZIP(v | pi, lambda) mixes a point mass at zero (weight pi, the structural
// zeros) with Poisson(lambda) (weight 1 - pi, which also produces sampling
// zeros at rate e^-lambda). Everything is evaluated in log space; the
// structural-zero probability is handled through its logit so that the
// negative log-likelihood and its gradients stay finite for |logit| >> 1.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace zipcount {

/// Lower clamp applied to Poisson rates before taking logarithms.
inline constexpr double kLambdaFloor = 1e-8;

template <std::floating_point Real = double>
struct ZipParams {
  Real pi{};      // structural-zero probability
  Real lambda{};  // Poisson rate of the count component
};

template <std::floating_point Real = double>
struct NllGrad {
  Real nll{};
  Real d_logit_pi{};
  Real d_lambda{};
};

namespace detail {

inline void check_count(std::int64_t v) {
  if (v < 0) throw std::domain_error("count must be non-negative, got " + std::to_string(v));
}

template <std::floating_point Real>
void check_rate(Real lambda) {
  if (!(lambda > Real(0))) {
    throw std::domain_error("Poisson rate must be positive, got " +
                            std::to_string(static_cast<double>(lambda)));
  }
}

template <std::floating_point Real>
void check_params(const ZipParams<Real>& p) {
  if (!(p.pi >= Real(0) && p.pi <= Real(1))) {
    throw std::domain_error("structural-zero probability must lie in [0,1], got " +
                            std::to_string(static_cast<double>(p.pi)));
  }
  check_rate(p.lambda);
}

}  // namespace detail

/// log(1 + e^x) without overflow; exact limits at +-inf.
template <std::floating_point Real>
Real softplus(Real x) {
  return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <std::floating_point Real>
Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <std::floating_point Real>
Real logit(Real p) {
  return std::log(p) - std::log1p(-p);
}

template <std::floating_point Real>
Real log_add_exp(Real a, Real b) {
  const Real hi = std::max(a, b);
  if (hi == -std::numeric_limits<Real>::infinity()) return hi;
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

/// ln(u!) through log-gamma.
template <std::floating_point Real = double>
Real log_factorial(std::int64_t u) {
  detail::check_count(u);
  return std::lgamma(static_cast<Real>(u) + Real(1));
}

/// ln(u!) from the exact integer factorial; only defined for u <= 20.
inline double log_factorial_exact(std::int64_t u) {
  if (u < 0 || u > 20) throw std::domain_error("exact factorial table covers 0..20");
  std::uint64_t f = 1;
  for (std::int64_t k = 2; k <= u; ++k) f *= static_cast<std::uint64_t>(k);
  return std::log(static_cast<double>(f));
}

/// ln P(u | lambda) for u ~ Poisson(lambda).
template <std::floating_point Real = double>
Real poisson_log_pmf(std::int64_t u, Real lambda) {
  detail::check_count(u);
  detail::check_rate(lambda);
  const Real ulog = u == 0 ? Real(0) : static_cast<Real>(u) * std::log(lambda);
  return ulog - lambda - log_factorial<Real>(u);
}

/// ln P(v | pi, lambda) for v ~ ZIP(pi, lambda). Returns -inf for v > 0 when pi == 1.
template <std::floating_point Real = double>
Real zip_log_pmf(std::int64_t v, const ZipParams<Real>& p) {
  detail::check_count(v);
  detail::check_params(p);
  if (v == 0) {
    // log(pi + (1 - pi) e^-lambda)
    return log_add_exp(std::log(p.pi), std::log1p(-p.pi) - p.lambda);
  }
  if (p.pi == Real(1)) return -std::numeric_limits<Real>::infinity();
  return std::log1p(-p.pi) + poisson_log_pmf<Real>(v, p.lambda);
}

/// E[v] = (1 - pi) lambda.
template <std::floating_point Real = double>
Real zip_mean(const ZipParams<Real>& p) {
  detail::check_params(p);
  return (Real(1) - p.pi) * p.lambda;
}

/// Negative log-likelihood of one observed count under ZIP(sigmoid(pi_logit), lambda),
/// with exact derivatives w.r.t. pi_logit and lambda. pi_logit may be +-inf.
/// lambda below kLambdaFloor is clamped, and the clamped branch has zero lambda gradient.
template <std::floating_point Real = double>
NllGrad<Real> zip_nll_with_grad(std::int64_t v, Real pi_logit, Real lambda) {
  detail::check_count(v);
  if (std::isnan(pi_logit) || std::isnan(lambda)) {
    throw std::domain_error("zip_nll_with_grad: NaN input");
  }
  bool clamped = false;
  if (lambda < Real(kLambdaFloor)) {
    lambda = Real(kLambdaFloor);
    clamped = true;
  }
  const Real pi = sigmoid(pi_logit);
  NllGrad<Real> out;
  if (v == 0) {
    // log p0 = logaddexp(log pi, log(1 - pi) - lambda)
    const Real log_structural = -softplus(-pi_logit);
    const Real log_sampling = -softplus(pi_logit) - lambda;
    const Real log_p0 = log_add_exp(log_structural, log_sampling);
    // Posterior responsibilities of the two zero sources.
    const Real w_structural = std::exp(log_structural - log_p0);
    const Real w_sampling = std::exp(log_sampling - log_p0);
    out.nll = -log_p0;
    out.d_logit_pi = -(w_structural * (Real(1) - pi) - w_sampling * pi);
    out.d_lambda = w_sampling;
  } else {
    out.nll = softplus(pi_logit) - poisson_log_pmf<Real>(v, lambda);
    out.d_logit_pi = pi;
    out.d_lambda = Real(1) - static_cast<Real>(v) / lambda;
  }
  if (clamped) out.d_lambda = Real(0);
  return out;
}

/// n i.i.d. ZIP draws from a generator seeded with rng_seed.
inline std::vector<std::int64_t> zip_sample(const ZipParams<double>& p, std::uint64_t rng_seed,
                                            std::size_t n) {
  detail::check_params(p);
  if (n == 0) throw std::invalid_argument("zip_sample: n must be >= 1");
  std::mt19937_64 rng(rng_seed);
  std::bernoulli_distribution structural(p.pi);
  std::poisson_distribution<std::int64_t> counts(p.lambda);
  std::vector<std::int64_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(structural(rng) ? 0 : counts(rng));
  }
  return out;
}

}  // namespace zipcount
