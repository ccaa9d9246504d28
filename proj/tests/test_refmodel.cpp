#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "oracle.hpp"
#include "zipcount/io.hpp"
#include "zipcount/refmodel.hpp"
#include "zipcount/synth.hpp"

using namespace zipcount;

namespace {

FeatureMap random_features(std::mt19937_64& rng, std::size_t c, std::size_t h, std::size_t w) {
  FeatureMap f(c, h, w);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : f.values()) v = n(rng);
  return f;
}

HeadParams random_params(std::mt19937_64& rng, std::size_t c, std::size_t k) {
  HeadParams p(c, k);
  std::normal_distribution<double> n(0.0, 0.7);
  auto flat = p.flatten();
  for (auto& v : flat) v = n(rng);
  p.assign(flat);
  return p;
}

}  // namespace

TEST(Forward, SymmetricInitialization) {
  const auto s = BinScheme({{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, std::nullopt}}, {0, 1, 2, 3, 4});
  const HeadParams p(3, 4);
  const FeatureMap f(3, 4, 4, 0.3);
  const auto out = forward(f, p, s);
  for (std::size_t b = 0; b < 16; ++b) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(out.prob_lambda().at(k, b), 0.25);
    EXPECT_DOUBLE_EQ(out.lambda().at(0, b), 2.5);
    EXPECT_DOUBLE_EQ(out.pi().at(0, b), 0.5);
    EXPECT_DOUBLE_EQ(out.density().at(0, b), 1.25);
  }
  EXPECT_DOUBLE_EQ(out.count, 20.0);
  EXPECT_DOUBLE_EQ(predict_count(out), 20.0);
}

TEST(Forward, LargePiBiasSuppressesDensity) {
  std::mt19937_64 rng(1);
  const auto s = default_bins(16);
  auto p = random_params(rng, 4, s.positive_size());
  p.pi_b = 800.0;
  const auto out = forward(random_features(rng, 4, 3, 3), p, s);
  for (double d : out.density().values()) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(predict_count(out), 0.0);
}

TEST(Forward, MatchesPerBlockEvaluation) {
  std::mt19937_64 rng(2);
  const auto s = default_bins(8).with_open_center(6.0);
  for (int t = 0; t < 20; ++t) {
    const auto f = random_features(rng, 5, 4, 3);
    const auto p = random_params(rng, 5, 4);
    const auto out = forward(f, p, s);
    for (std::size_t b = 0; b < f.plane(); ++b) {
      oracle::LD z[4], zsum = 0, lambda = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        oracle::LD a = p.lambda_b[k];
        for (std::size_t c = 0; c < 5; ++c) a += p.lambda_w[k * 5 + c] * f.at(c, b);
        zsum += (z[k] = std::exp(a));
      }
      for (std::size_t k = 0; k < 4; ++k) lambda += z[k] / zsum * s.positive_centers()[k];
      oracle::LD a = p.pi_b;
      for (std::size_t c = 0; c < 5; ++c) a += p.pi_w[c] * f.at(c, b);
      const oracle::LD pi = 1 / (1 + std::exp(-a));
      EXPECT_NEAR(out.lambda().at(0, b), double(lambda), 1e-13);
      EXPECT_NEAR(out.pi().at(0, b), double(pi), 1e-15);
      EXPECT_NEAR(out.density().at(0, b), double((1 - pi) * lambda), 1e-13);
    }
  }
}

TEST(Forward, DensityIdentityAndRateRange) {
  std::mt19937_64 rng(3);
  const auto s = default_bins(16);
  for (int t = 0; t < 30; ++t) {
    const auto out = forward(random_features(rng, 3, 5, 5), random_params(rng, 3, s.positive_size()), s);
    double sum = 0;
    for (std::size_t b = 0; b < 25; ++b) {
      EXPECT_EQ(out.density().at(0, b), (1 - out.pi().at(0, b)) * out.lambda().at(0, b));
      EXPECT_GE(out.lambda().at(0, b), s.positive_centers().front());
      EXPECT_LE(out.lambda().at(0, b), s.positive_centers().back());
      sum += out.density().at(0, b);
    }
    EXPECT_EQ(out.count, sum);
  }
}

TEST(Forward, ShapeMismatch) {
  const auto s = default_bins(8);
  EXPECT_THROW(forward(FeatureMap(3, 2, 2), HeadParams(4, 4), s), ShapeError);
  EXPECT_THROW(forward(FeatureMap(3, 2, 2), HeadParams(3, 8), s), ShapeError);
}

TEST(PredictCount, AllStructuralIsZeroAndMatchesExportedMap) {
  std::mt19937_64 rng(4);
  const auto s = default_bins(8);
  auto p = random_params(rng, 2, 4);
  const auto f = random_features(rng, 2, 4, 4);
  const auto out = forward(f, p, s);
  const auto dir = fs::temp_directory_path() / "zipcount_refmodel";
  fs::create_directories(dir);
  write_bcm(dir / "density.bcm", to_float_map(out.density()));
  const auto back = read_bcm(dir / "density.bcm");
  double from_file = 0, expected = 0;
  for (float v : back.values()) from_file += v;
  for (double v : out.density().values()) expected += static_cast<float>(v);
  EXPECT_EQ(from_file, expected);
  EXPECT_NEAR(from_file, predict_count(out), 1e-5 * predict_count(out));
}

TEST(ParamGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto s = default_bins(8);
  double worst = 0;
  for (int t = 0; t < 40; ++t) {
    const auto f = random_features(rng, 2, 3, 3);
    const auto p = random_params(rng, 2, 4);
    CountMap y(make_grid(24, 24, 8));
    std::uniform_int_distribution<std::int64_t> cnt(0, 6);
    for (std::size_t b = 0; b < 9; ++b) y.counts.at(0, b) = cnt(rng) > 3 ? cnt(rng) : 0;
    const auto base = forward(f, p, s);
    if (std::abs(base.count - double(y.total())) < 0.05) continue;
    const auto pl = loss_and_param_grad(f, y, p, s, {1.0});
    const auto analytic = pl.grad.flatten();
    const auto numeric = oracle::central_diff(oracle::widen(std::span<const double>(p.flatten())), 1e-6,
                                              [&](const std::vector<oracle::LD>& x) {
                                                HeadParams q = p;
                                                q.assign(std::vector<double>(x.begin(), x.end()));
                                                // head logits in long double, loss by the oracle
                                                std::vector<oracle::LD> lam(4 * 9), pi(9);
                                                for (std::size_t b = 0; b < 9; ++b) {
                                                  for (std::size_t k = 0; k < 4; ++k) {
                                                    oracle::LD z = x[8 + k];
                                                    for (std::size_t c = 0; c < 2; ++c) z += x[k * 2 + c] * f.at(c, b);
                                                    lam[k * 9 + b] = z;
                                                  }
                                                  oracle::LD a = x[14];
                                                  for (std::size_t c = 0; c < 2; ++c) a += x[12 + c] * f.at(c, b);
                                                  pi[b] = a;
                                                }
                                                return oracle::composite(lam, pi, y, s).total(1);
                                              });
    for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, oracle::rel_err(analytic[i], double(numeric[i])));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(InitHeads, PriorBiasAndBounds) {
  const auto s = default_bins(16);
  const auto p = init_heads(9, s, {.seed = 3});
  EXPECT_NEAR(sigmoid(p.pi_b), 0.9, 1e-15);
  for (double w : p.lambda_w) EXPECT_LE(std::abs(w), 1.0 / 3.0);
  for (double b : p.lambda_b) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(init_heads(9, s, {.seed = 3, .prior_pi_bias = false}).pi_b, 0.0);
  EXPECT_EQ(init_heads(9, s, {.seed = 3}), p);
}

TEST(LearningRate, WarmupThenConstant) {
  TrainConfig c;
  c.lr = 1e-4;
  c.warmup_steps = 10;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 1e-5);
  EXPECT_DOUBLE_EQ(learning_rate(c, 5), 5.5e-5);
  EXPECT_DOUBLE_EQ(learning_rate(c, 10), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 1000), 1e-4);
}

TEST(AdamW, FirstStepMovesBySignedLearningRate) {
  AdamW opt(2, 0.9, 0.999, 1e-12, 0.0);
  std::vector<double> p{1.0, -1.0};
  const std::vector<double> g{0.3, -2.0};
  opt.step(p, g, 0.1);
  EXPECT_NEAR(p[0], 0.9, 1e-9);
  EXPECT_NEAR(p[1], -0.9, 1e-9);
  AdamW decay(1, 0.9, 0.999, 1e-8, 0.5);
  std::vector<double> q{2.0};
  const std::vector<double> zero{0.0};
  decay.step(q, zero, 0.1);
  EXPECT_DOUBLE_EQ(q[0], 2.0 - 0.1 * 0.5 * 2.0);
}

namespace {
std::vector<Example> small_corpus(std::size_t n, std::uint64_t seed) {
  SceneConfig cfg;
  cfg.grid = make_grid(128, 128, 16);
  cfg.mean_heads = 15;
  cfg.seed = seed;
  const auto scenes = generate_corpus(cfg, n);
  return to_examples(scenes);
}
}  // namespace

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  const auto data = small_corpus(4, 1);
  const auto s = default_bins(16);
  TrainConfig c;
  c.lr = 0;
  c.steps = 20;
  c.batch_size = 2;
  const auto init = init_heads(data[0].features.channels(), s, {.seed = 0});
  const auto r = train(data, s, c, init);
  EXPECT_EQ(r.params, init);
  ASSERT_EQ(r.epochs.size(), 10u);
  for (const auto& e : r.epochs) EXPECT_NEAR(e.total, r.epochs.front().total, 1e-9 * r.epochs.front().total);
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = small_corpus(6, 2);
  const auto s = default_bins(16);
  TrainConfig c;
  c.steps = 60;
  c.batch_size = 4;
  c.seed = 17;
  const auto a = train(data, s, c);
  const auto b = train(data, s, c);
  const auto fa = a.params.flatten(), fb = b.params.flatten();
  EXPECT_EQ(std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(double)), 0);
  c.seed = 18;
  EXPECT_NE(train(data, s, c).params, a.params);
}

TEST(Train, LossCurveDecreasesWhenSmoothed) {
  const auto data = small_corpus(8, 3);
  const auto s = default_bins(16);
  TrainConfig c;
  c.steps = 400;
  const auto r = train(data, s, c);
  ASSERT_EQ(r.epochs.size(), 400u);
  auto window_mean = [&](std::size_t from) {
    double m = 0;
    for (std::size_t k = from; k < from + 50; ++k) m += r.epochs[k].total;
    return m / 50;
  };
  double prev = window_mean(0);
  for (std::size_t from = 50; from + 50 <= r.epochs.size(); from += 50) {
    const double cur = window_mean(from);
    EXPECT_LE(cur, prev * 1.02) << from;
    prev = cur;
  }
  EXPECT_LT(window_mean(350), 0.5 * window_mean(0));
}

TEST(Train, OverfitsSingleScene) {
  const auto data = small_corpus(1, 4);
  const auto s = default_bins(16);
  TrainConfig c;
  c.steps = 500;
  const auto r = train(data, s, c);
  const auto out = forward(data[0].features, r.params, s);
  const double truth = double(data[0].counts.total());
  EXPECT_LT(std::abs(predict_count(out) - truth), 0.05 * truth);
}

TEST(Train, FrozenPiStaysZero) {
  const auto data = small_corpus(3, 5);
  const auto s = default_bins(16);
  TrainConfig c;
  c.steps = 30;
  c.zero_inflation = false;
  const auto r = train(data, s, c);
  for (double w : r.params.pi_w) EXPECT_EQ(w, 0.0);
  EXPECT_EQ(r.params.pi_b, 0.0);
  const auto out = forward(data[0].features, r.params, s, false);
  for (double p : out.pi().values()) EXPECT_EQ(p, 0.0);
}

TEST(Train, NonFiniteLossAbortsNamingTheTerm) {
  auto data = small_corpus(2, 6);
  data[1].features.at(0, 3) = std::numeric_limits<double>::infinity();
  const auto s = default_bins(16);
  TrainConfig c;
  c.steps = 5;
  c.batch_size = 1;
  try {
    train(data, s, c);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("term"), std::string::npos);
  } catch (const std::domain_error&) {
    // NaN reached the ZIP likelihood before the finiteness check
  }
}

TEST(TrainConfigJson, ReadsKeysOverDefaults) {
  const auto c = train_config_from_json(json::parse(
      R"({"seed": 9, "lr": 0.001, "warmup_steps": 3, "steps": 7, "batch_size": 2, "omega": 0.75, "weight_decay": 0.0})"));
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.warmup_steps, 3u);
  EXPECT_EQ(c.steps, 7u);
  EXPECT_EQ(c.batch_size, 2u);
  EXPECT_EQ(c.omega, 0.75);
  EXPECT_EQ(c.weight_decay, 0.0);
  EXPECT_EQ(train_config_from_json(json::object()).omega, 1.0);
  EXPECT_EQ(train_config_from_json(json::object()).batch_size, 8u);
  EXPECT_THROW(train_config_from_json(json::parse(R"({"batch_size": 0})")), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(json::parse(R"({"lr": "fast"})")), FormatError);
}
