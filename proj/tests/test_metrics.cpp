#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqhand/metrics.hpp"

using namespace seqhand;
using namespace seqhand::metrics;

namespace {

std::vector<float> random_poses(std::size_t frames, std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  std::vector<float> out(frames * kJoints * 3);
  for (auto& v : out) v = static_cast<float>(u(rng));
  return out;
}

double oracle_epe(const std::vector<float>& a, const std::vector<float>& b) {
  double total = 0;
  const std::size_t joints = a.size() / 3;
  for (std::size_t j = 0; j < joints; ++j) {
    const double dx = double(a[3 * j]) - b[3 * j];
    const double dy = double(a[3 * j + 1]) - b[3 * j + 1];
    const double dz = double(a[3 * j + 2]) - b[3 * j + 2];
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return total / joints;
}

}  // namespace

TEST(Epe, ExamplesAndOracle) {
  std::mt19937_64 rng(1);
  const auto gt = random_poses(3, rng, 2.0);
  EXPECT_EQ(epe(gt, gt), 0.0);
  auto shifted = gt;
  for (std::size_t j = 0; j < shifted.size(); j += 3) {
    shifted[j + 1] += 3;
    shifted[j + 2] += 4;
  }
  EXPECT_NEAR(epe(shifted, gt), 5.0, 1e-5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_poses(1 + trial % 4, rng, 1.0);
    const auto b = random_poses(1 + trial % 4, rng, 1.0);
    EXPECT_NEAR(epe(a, b), oracle_epe(a, b), 1e-6);
  }
  EXPECT_THROW(epe(gt, std::vector<float>(gt.begin(), gt.end() - 3)), DimensionError);
  EXPECT_THROW(epe(std::vector<float>(), std::vector<float>()), DimensionError);
}

TEST(Pck, DirectCountsAndEdges) {
  const auto c = pck_curve(std::vector<double>{1, 3}, {2, 4});
  EXPECT_EQ(c.values, (std::vector<double>{0.5, 1.0}));
  // Ties at the threshold are not correct.
  EXPECT_EQ(pck_curve(std::vector<double>{2, 2}, {2, 3}).values, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(pck_curve(std::vector<double>{0, 0, 0}, {1e-9, 1}).values, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(pck_curve(std::vector<double>{0, 1, 0, 2}, {0, 10}).values, (std::vector<double>{0.0, 1.0}));
  EXPECT_THROW(pck_curve(std::vector<double>{1}, {}), ContractError);
  EXPECT_THROW(pck_curve(std::vector<double>{1}, {2, 1}), ContractError);
}

TEST(Pck, MatchesOracleAndIsMonotone) {
  std::mt19937_64 rng(2);
  const auto thresholds = uniform_thresholds(0.0, 2.0, 100);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_poses(2, rng, 1.0);
    const auto b = random_poses(2, rng, 1.0);
    const auto curve = pck_curve(a, b, thresholds);
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::size_t hit = 0;
      for (std::size_t j = 0; j < 2 * kJoints; ++j) {
        const double dx = double(a[3 * j]) - b[3 * j];
        const double dy = double(a[3 * j + 1]) - b[3 * j + 1];
        const double dz = double(a[3 * j + 2]) - b[3 * j + 2];
        hit += std::sqrt(dx * dx + dy * dy + dz * dz) < thresholds[t];
      }
      EXPECT_NEAR(curve.values[t], hit / (2.0 * kJoints), 1e-6);
      if (t > 0) {
        EXPECT_GE(curve.values[t], curve.values[t - 1]);
      }
    }
  }
}

TEST(Pck, FramePoolingAveragesPerFrame) {
  std::vector<double> errors(2 * kJoints, 0.0);
  for (std::size_t j = 0; j < 7; ++j) errors[j] = 5.0;
  const auto joints = pck_curve(errors, {1, 10});
  const auto frames = pck_curve(errors, {1, 10}, PckPooling::frames);
  EXPECT_NEAR(joints.values[0], 35.0 / 42.0, 1e-15);
  EXPECT_NEAR(frames.values[0], 0.5 * (14.0 / 21.0 + 1.0), 1e-15);
}

TEST(Auc, ClosedForms) {
  const auto t = uniform_thresholds(20, 50, 100);
  EXPECT_EQ(auc({t, std::vector<double>(100, 1.0)}), 1.0);
  EXPECT_NEAR(auc({t, std::vector<double>(100, 0.5)}), 0.5, 1e-12);
  std::vector<double> ramp(100);
  for (std::size_t i = 0; i < 100; ++i) ramp[i] = (t[i] - 20) / 30;
  EXPECT_NEAR(auc({t, ramp}), 0.5, 1e-12);
  EXPECT_THROW(auc({{1.0}, {1.0}}), ContractError);
}

TEST(Auc, OrderedAndBounded) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  const auto t = uniform_thresholds(0, 5, 40);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> lo(40), hi(40);
    double acc = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      acc = std::min(1.0, acc + 0.05 * u(rng));
      lo[i] = acc;
      hi[i] = std::min(1.0, acc + 0.1 * u(rng));
    }
    const double a = auc({t, lo}), b = auc({t, hi});
    EXPECT_GE(a, 0.0);
    EXPECT_LE(b, 1.0);
    EXPECT_LE(a, b);
  }
}

TEST(CurveCsv, FixedFormatRoundTrip) {
  const PckCurve c{{20, 35, 50}, {0.25, 0.5, 1.0 / 3.0}};
  const auto text = curve_csv(c);
  EXPECT_EQ(text, "threshold,pck\n20.000000,0.250000\n35.000000,0.500000\n50.000000,0.333333\n");
  const auto back = parse_curve_csv(text);
  EXPECT_EQ(back.thresholds, c.thresholds);
  EXPECT_NEAR(back.values[2], 1.0 / 3.0, 1e-6);
}
