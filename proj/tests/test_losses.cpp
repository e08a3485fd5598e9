#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "roadseg/losses.hpp"

using namespace roadseg;
using namespace roadseg::losses;

namespace {

LabelImage random_labels(int h, int w, std::mt19937_64& rng) {
  LabelImage y(h, w);
  std::bernoulli_distribution b(0.5);
  for (auto& v : y.values()) v = b(rng);
  return y;
}

ProbabilityMap random_probs(int h, int w, std::mt19937_64& rng) {
  ProbabilityMap p(h, w);
  std::uniform_real_distribution<double> d(0.02, 0.98);
  for (auto& v : p.values()) {
    v = d(rng);
    // Stay clear of the 0.5 threshold so small perturbations cannot change the freespace set.
    if (std::abs(v - 0.5) < 0.02) v += 0.05;
  }
  return p;
}

// Flat ground at height h below the camera with pixel noise, 20 m above the horizon.
geometry::DepthImage ground_depth(int h, int w, const geometry::CameraIntrinsics& k, double height, std::mt19937_64& rng) {
  Grid<double> z(h, w);
  std::uniform_real_distribution<double> noise(-0.3, 0.3);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      z.at(v, u) = v > k.cy + 0.5 ? k.fy * height / (v - k.cy) + noise(rng) : 20.0 + noise(rng);
  return geometry::DepthImage::from_values(std::move(z));
}

std::vector<double> weights(const LabelImage& y, int r) { return semantic_transition_weights(y, r).values.values(); }

const geometry::CameraIntrinsics kCam{8.0, 8.0, 4.0, 2.0};

}  // namespace

TEST(SemanticWeights, StatedLimits) {
  LabelImage uniform(9, 9, 1);
  for (double w : weights(uniform, 2)) EXPECT_EQ(w, 0.0);
  LabelImage zeros(9, 9, 0);
  for (double w : weights(zeros, 2)) EXPECT_EQ(w, 0.0);

  // Window clipped to the whole 4x4 image.
  LabelImage half(4, 4, 0);
  for (int v = 0; v < 4; ++v)
    for (int u = 0; u < 2; ++u) half.at(v, u) = 1;
  for (double w : weights(half, 3)) EXPECT_NEAR(w, 1.0, 1e-9);

  LabelImage quarter(4, 4, 0);
  for (int u = 0; u < 4; ++u) quarter.at(0, u) = 1;
  for (double w : weights(quarter, 3)) EXPECT_NEAR(w, std::sqrt(0.5), 1e-9);
  EXPECT_NEAR(transition_weight(0.25), 0.70711, 1e-5);
}

TEST(SemanticWeights, MatchesWindowCountingOracle) {
  std::mt19937_64 rng(1);
  for (int r : {1, 2, 3, 7}) {
    const auto y = random_labels(13, 17, rng);
    const auto got = semantic_transition_weights(y, r);
    const auto want = oracle::transition_weights(y, r);
    EXPECT_EQ(got.kind, WeightKind::semantic);
    for (std::size_t i = 0; i < y.size(); ++i) {
      EXPECT_NEAR(got.values[i], want[i], 1e-12);
      EXPECT_GE(got.values[i], 0.0);
      EXPECT_LE(got.values[i], 1.0);
    }
  }
}

TEST(SemanticWeights, FlipInvariance) {
  std::mt19937_64 rng(2);
  const auto y = random_labels(11, 14, rng);
  LabelImage hf(11, 14), vf(11, 14);
  for (int v = 0; v < 11; ++v)
    for (int u = 0; u < 14; ++u) {
      hf.at(v, 13 - u) = y.at(v, u);
      vf.at(10 - v, u) = y.at(v, u);
    }
  const auto w = semantic_transition_weights(y, 3).values;
  const auto wh = semantic_transition_weights(hf, 3).values;
  const auto wv = semantic_transition_weights(vf, 3).values;
  for (int v = 0; v < 11; ++v)
    for (int u = 0; u < 14; ++u) {
      EXPECT_EQ(wh.at(v, 13 - u), w.at(v, u));
      EXPECT_EQ(wv.at(10 - v, u), w.at(v, u));
    }
}

TEST(SemanticWeights, ContractErrors) {
  EXPECT_THROW(semantic_transition_weights(LabelImage(3, 3, 0), 0), ContractError);
  EXPECT_THROW(semantic_transition_weights(LabelImage(3, 3, 255), 1), ContractError);
}

TEST(Bce, SinglePixelAndClampFloor) {
  EXPECT_NEAR(bce(ProbabilityMap(1, 1, 0.5), LabelImage(1, 1, 1)), 0.693147, 1e-6);
  LabelImage y(3, 3, 0);
  y.at(1, 1) = 1;
  ProbabilityMap p(3, 3, 0.0);
  p.at(1, 1) = 1.0;
  EXPECT_LE(bce(p, y), 9 * -std::log(1.0 - 1e-7));
  EXPECT_TRUE(std::isfinite(bce(p, y)));
}

TEST(Bce, MatchesHandSummation) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const auto y = random_labels(4, 4, rng);
    const auto p = random_probs(4, 4, rng);
    EXPECT_NEAR(bce(p, y), oracle::bce_sum(p, y, nullptr), 1e-9);
  }
}

TEST(WeightedBce, DegenerateAndMaskedWeights) {
  std::mt19937_64 rng(4);
  const auto y = random_labels(6, 6, rng);
  const auto p = random_probs(6, 6, rng);
  EXPECT_EQ(weighted_bce(p, y, Grid<double>(6, 6, 0.0)), 0.0);
  EXPECT_NEAR(weighted_bce(p, y, Grid<double>(6, 6, 1.0)), bce(p, y), 1e-12);

  Grid<double> checker(6, 6, 0.0);
  double masked = 0.0;
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 6; ++u)
      if ((u + v) % 2 == 0) {
        checker.at(v, u) = 1.0;
        masked += bce(ProbabilityMap(1, 1, p.at(v, u)), LabelImage(1, 1, y.at(v, u)));
      }
  EXPECT_NEAR(weighted_bce(p, y, checker), masked, 1e-12);
  EXPECT_NEAR(weighted_bce(p, y, checker), oracle::bce_sum(p, y, &checker), 1e-9);
  EXPECT_THROW(weighted_bce(p, y, Grid<double>(5, 6, 1.0)), ContractError);
}

TEST(WeightedBce, NonnegativeAndMonotoneInWeights) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  const auto y = random_labels(5, 5, rng);
  const auto p = random_probs(5, 5, rng);
  Grid<double> w(5, 5);
  for (auto& v : w.values()) v = d(rng);
  double prev = weighted_bce(p, y, w);
  EXPECT_GE(prev, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::min(1.0, w[i] + 0.2);
    const double next = weighted_bce(p, y, w);
    EXPECT_GE(next, prev);
    prev = next;
  }
}

TEST(TotalLoss, ZeroLambdasReduceToBceBitForBit) {
  std::mt19937_64 rng(6);
  const auto y = random_labels(8, 8, rng);
  const auto p = random_probs(8, 8, rng);
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  LossConfig cfg;
  cfg.lambda_s = cfg.lambda_d = 0.0;
  const auto r = total_loss(p, y, depth, kCam, cfg);
  EXPECT_EQ(r.terms.total, bce(p, y));
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(r.grad[i], pixel_bce_grad(p[i], y[i], cfg.eps));
}

TEST(TotalLoss, DefaultsAndAssembly) {
  const LossConfig cfg;
  EXPECT_EQ(cfg.lambda_s, 0.3);
  EXPECT_EQ(cfg.lambda_d, 0.1);
  EXPECT_EQ(cfg.radius, 7);
  EXPECT_EQ(cfg.eps, 1e-7);

  std::mt19937_64 rng(7);
  const auto y = random_labels(8, 8, rng);
  const auto p = random_probs(8, 8, rng);
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  const auto r = total_loss(p, y, depth, kCam, cfg);
  ASSERT_FALSE(r.terms.dia_skipped);
  EXPECT_NEAR(r.terms.total, r.terms.bce + 0.3 * r.terms.sta + 0.1 * r.terms.dia, 1e-12);
  const auto ws = oracle::transition_weights(y, 7);
  EXPECT_NEAR(r.terms.sta, oracle::bce_sum(p, y, &ws), 1e-9);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto y = random_labels(8, 8, rng);
    auto p = random_probs(8, 8, rng);
    const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
    LossConfig cfg;
    cfg.radius = 2;
    const auto r = total_loss(p, y, depth, kCam, cfg);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double fd = oracle::central_difference([&] { return total_loss(p, y, depth, kCam, cfg).terms.total; }, p[i], 1e-6);
      EXPECT_LE(oracle::relative_error(r.grad[i], fd, 1e-6), 1e-4) << "seed " << seed << " pixel " << i;
    }
  }
}

TEST(TotalLoss, LogitGradientIsChainRuleOfProbabilityGradient) {
  std::mt19937_64 rng(8);
  const auto y = random_labels(8, 8, rng);
  const auto p = random_probs(8, 8, rng);
  Grid<double> logits(8, 8);
  for (std::size_t i = 0; i < p.size(); ++i) logits[i] = std::log(p[i] / (1.0 - p[i]));
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  const auto rp = total_loss(p, y, depth, kCam);
  const auto rz = total_loss_logits(logits, y, depth, kCam);
  EXPECT_NEAR(rz.terms.total, rp.terms.total, 1e-9);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(rz.grad[i], rp.grad[i] * p[i] * (1.0 - p[i]), 1e-9);
}

TEST(TotalLoss, MeanReductionScalesSum) {
  std::mt19937_64 rng(9);
  const auto y = random_labels(8, 8, rng);
  const auto p = random_probs(8, 8, rng);
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  LossConfig mean;
  mean.reduction = Reduction::mean;
  const auto a = total_loss(p, y, depth, kCam), b = total_loss(p, y, depth, kCam, mean);
  EXPECT_NEAR(b.terms.total, a.terms.total / 64.0, 1e-12);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(b.grad[i], a.grad[i] / 64.0, 1e-12);
}

TEST(TotalLoss, DepthTermSkippedWithoutPredictedFreespace) {
  std::mt19937_64 rng(10);
  const auto y = random_labels(8, 8, rng);
  const ProbabilityMap p(8, 8, 0.2);
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  const auto r = total_loss(p, y, depth, kCam);
  EXPECT_TRUE(r.terms.dia_skipped);
  EXPECT_EQ(r.terms.dia, 0.0);
  EXPECT_FALSE(r.terms.camera_height.has_value());

  LossConfig from_labels;
  from_labels.depth_from_labels = true;
  const auto rl = total_loss(p, y, depth, kCam, from_labels);
  EXPECT_FALSE(rl.terms.dia_skipped);
  EXPECT_TRUE(rl.terms.camera_height.has_value());
}

TEST(TotalLoss, ContractErrors) {
  std::mt19937_64 rng(11);
  const auto depth = ground_depth(8, 8, kCam, 1.5, rng);
  const ProbabilityMap p(8, 8, 0.7);
  const LabelImage y(8, 8, 1);
  LossConfig bad;
  bad.radius = 0;
  EXPECT_THROW(total_loss(p, y, depth, kCam, bad), ContractError);
  bad = {};
  bad.lambda_s = -0.1;
  EXPECT_THROW(total_loss(p, y, depth, kCam, bad), ContractError);
  bad = {};
  bad.eps = 0.5;
  EXPECT_THROW(total_loss(p, y, depth, kCam, bad), ContractError);
  EXPECT_THROW(total_loss(ProbabilityMap(7, 8, 0.7), y, depth, kCam), ContractError);
  EXPECT_THROW(total_loss(p, LabelImage(8, 8, 2), depth, kCam), ContractError);
}
