#pragma once

// Endpoint error, PCK curve and its normalized area. Poses are flat arrays of
// M x 21 x 3 values in any consistent unit.

#include <cmath>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "seqhand/errors.hpp"

namespace seqhand::metrics {

inline constexpr std::size_t kJoints = 21;

inline void check_poses(std::span<const float> pred, std::span<const float> gt, std::size_t dim) {
  if (pred.size() != gt.size()) {
    throw DimensionError("metrics: prediction has " + std::to_string(pred.size()) +
                         " values, ground truth " + std::to_string(gt.size()));
  }
  if (pred.empty() || pred.size() % (kJoints * dim) != 0) {
    throw DimensionError("metrics: expected a non-empty M x 21 x " + std::to_string(dim) + " array");
  }
}

// Euclidean error of every joint.
inline std::vector<double> joint_errors(std::span<const float> pred, std::span<const float> gt,
                                        std::size_t dim = 3) {
  check_poses(pred, gt, dim);
  std::vector<double> err(pred.size() / dim);
  for (std::size_t j = 0; j < err.size(); ++j) {
    double s = 0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = static_cast<double>(pred[j * dim + c]) - gt[j * dim + c];
      s += d * d;
    }
    err[j] = std::sqrt(s);
  }
  return err;
}

inline double epe(std::span<const float> pred, std::span<const float> gt) {
  const auto err = joint_errors(pred, gt);
  double s = 0;
  for (const auto e : err) s += e;
  return s / static_cast<double>(err.size());
}

struct PckCurve {
  std::vector<double> thresholds;
  std::vector<double> values;
};

enum class PckPooling {
  joints,  // fraction of all joints under the threshold
  frames,  // per-frame fraction, then averaged over frames
};

inline std::vector<double> uniform_thresholds(double lo, double hi, std::size_t steps) {
  if (steps < 2 || !(hi > lo)) throw ContractError("thresholds: need hi > lo and at least 2 steps");
  std::vector<double> t(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    t[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps - 1);
  }
  return t;
}

// Correct means error strictly below the threshold.
inline PckCurve pck_curve(const std::vector<double>& errors, const std::vector<double>& thresholds,
                          PckPooling pooling = PckPooling::joints) {
  if (thresholds.empty()) throw ContractError("pck: empty threshold list");
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > thresholds[i - 1])) throw ContractError("pck: thresholds must ascend");
  }
  if (errors.empty()) throw ContractError("pck: no joints");
  PckCurve c{thresholds, std::vector<double>(thresholds.size(), 0.0)};
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (pooling == PckPooling::joints) {
      std::size_t hit = 0;
      for (const auto e : errors) hit += e < thresholds[t];
      c.values[t] = static_cast<double>(hit) / static_cast<double>(errors.size());
    } else {
      if (errors.size() % kJoints) throw DimensionError("pck: frame pooling needs whole frames");
      const std::size_t frames = errors.size() / kJoints;
      double acc = 0;
      for (std::size_t f = 0; f < frames; ++f) {
        std::size_t hit = 0;
        for (std::size_t j = 0; j < kJoints; ++j) hit += errors[f * kJoints + j] < thresholds[t];
        acc += static_cast<double>(hit) / kJoints;
      }
      c.values[t] = acc / static_cast<double>(frames);
    }
  }
  return c;
}

inline PckCurve pck_curve(std::span<const float> pred, std::span<const float> gt,
                          const std::vector<double>& thresholds,
                          PckPooling pooling = PckPooling::joints) {
  return pck_curve(joint_errors(pred, gt), thresholds, pooling);
}

// Trapezoidal area divided by the threshold span.
inline double auc(const PckCurve& c) {
  if (c.thresholds.size() != c.values.size()) throw ContractError("auc: curve lengths differ");
  if (c.thresholds.size() < 2) throw ContractError("auc: need at least two thresholds");
  double area = 0;
  for (std::size_t i = 1; i < c.thresholds.size(); ++i) {
    area += 0.5 * (c.values[i] + c.values[i - 1]) * (c.thresholds[i] - c.thresholds[i - 1]);
  }
  return area / (c.thresholds.back() - c.thresholds.front());
}

inline std::string curve_csv(const PckCurve& c) {
  std::string out = "threshold,pck\n";
  char line[64];
  for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
    std::snprintf(line, sizeof line, "%.6f,%.6f\n", c.thresholds[i], c.values[i]);
    out += line;
  }
  return out;
}

inline PckCurve parse_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "threshold,pck") throw ContractError("curve csv: bad header");
  PckCurve c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ContractError("curve csv: bad row '" + line + "'");
    c.thresholds.push_back(std::stod(line.substr(0, comma)));
    c.values.push_back(std::stod(line.substr(comma + 1)));
  }
  return c;
}

}  // namespace seqhand::metrics
