#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "roadseg/geometry.hpp"
#include "roadseg/grid.hpp"

namespace roadseg::losses {

enum class Reduction { sum, mean };

struct LossConfig {
  double lambda_s = 0.3;
  double lambda_d = 0.1;
  int radius = 7;
  double eps = 1e-7;
  Reduction reduction = Reduction::sum;
  /// Build the depth weights from ground-truth freespace instead of the thresholded prediction.
  bool depth_from_labels = false;
  geometry::HeightEstimator height_estimator = geometry::HeightEstimator::mean;
  geometry::DepthWeightOptions depth{};

  void validate() const {
    if (!(lambda_s >= 0.0) || !(lambda_d >= 0.0)) throw ContractError("loss: lambda_S and lambda_D must be nonnegative");
    if (radius < 1) throw ContractError("loss: neighbourhood radius must be >= 1");
    if (!(eps > 0.0 && eps < 0.5)) throw ContractError("loss: probability clamp must lie in (0, 0.5)");
  }
};

inline void check_labels(const LabelImage& y) {
  for (auto v : y.values())
    if (v > 1) throw ContractError("labels must be binary {0,1}");
}

/// cos(pi |f - 1/2|) clamped to [0,1] (cos(pi/2) is not exactly zero in floating point).
inline double transition_weight(double frac) {
  if (frac <= 0.0 || frac >= 1.0) return 0.0;
  return std::clamp(std::cos(std::numbers::pi * std::abs(frac - 0.5)), 0.0, 1.0);
}

/// w_S(q) = cos(pi * |frac(q) - 1/2|), frac = freespace fraction in the
/// (2r+1)^2 window around q, clipped to the image.
inline WeightMap semantic_transition_weights(const LabelImage& labels, int radius) {
  require(radius >= 1, "semantic_transition_weights: radius must be >= 1");
  check_labels(labels);
  const int H = labels.height(), W = labels.width();
  // Summed-area table of the freespace indicator.
  std::vector<long long> sat(static_cast<std::size_t>(H + 1) * (W + 1), 0);
  auto S = [&](int v, int u) -> long long& { return sat[static_cast<std::size_t>(v) * (W + 1) + u]; };
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) S(v + 1, u + 1) = labels.at(v, u) + S(v, u + 1) + S(v + 1, u) - S(v, u);
  WeightMap w{Grid<double>(H, W, 0.0), WeightKind::semantic};
  for (int v = 0; v < H; ++v) {
    const int v0 = std::max(0, v - radius), v1 = std::min(H, v + radius + 1);
    for (int u = 0; u < W; ++u) {
      const int u0 = std::max(0, u - radius), u1 = std::min(W, u + radius + 1);
      const long long fg = S(v1, u1) - S(v0, u1) - S(v1, u0) + S(v0, u0);
      const long long all = static_cast<long long>(v1 - v0) * (u1 - u0);
      const double frac = static_cast<double>(fg) / static_cast<double>(all);
      w.values.at(v, u) = transition_weight(frac);
    }
  }
  return w;
}

inline double clamp_probability(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

/// -(y log p + (1-y) log(1-p)) with p clamped to [eps, 1-eps].
inline double pixel_bce(double p, std::uint8_t y, double eps) {
  const double pc = clamp_probability(p, eps);
  return y ? -std::log(pc) : -std::log(1.0 - pc);
}

/// d/dp of pixel_bce; zero where the clamp is active.
inline double pixel_bce_grad(double p, std::uint8_t y, double eps) {
  if (p < eps || p > 1.0 - eps) return 0.0;
  return y ? -1.0 / p : 1.0 / (1.0 - p);
}

inline double bce(const ProbabilityMap& p, const LabelImage& y, double eps = 1e-7) {
  require_same_size(p, y, "bce");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += pixel_bce(p[i], y[i], eps);
  return s;
}

inline double weighted_bce(const ProbabilityMap& p, const LabelImage& y, const Grid<double>& w, double eps = 1e-7) {
  require_same_size(p, y, "weighted_bce");
  require_same_size(p, w, "weighted_bce weights");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (w[i] != 0.0) s += w[i] * pixel_bce(p[i], y[i], eps);
  return s;
}

inline double weighted_bce(const ProbabilityMap& p, const LabelImage& y, const WeightMap& w, double eps = 1e-7) {
  return weighted_bce(p, y, w.values, eps);
}

struct LossTerms {
  double total = 0.0;
  double bce = 0.0;
  double sta = 0.0;
  double dia = 0.0;
  bool dia_skipped = false;  // no freespace to estimate the camera height from
  std::optional<double> camera_height;
};

struct LossResult {
  LossTerms terms;
  Grid<double> grad;  // dL/dp, or dL/dlogit for total_loss_logits
};

/// Depth-inconsistency weights for a frame, from either predicted (p > 0.5) or
/// labelled freespace restricted to valid depth. Returns nullopt when that set is empty.
inline std::optional<std::pair<WeightMap, double>> frame_depth_weights(const ProbabilityMap& p, const LabelImage& y,
                                                                       const geometry::DepthImage& depth,
                                                                       const geometry::CameraIntrinsics& k,
                                                                       const LossConfig& cfg) {
  geometry::PixelSet fs;
  for (int v = 0; v < p.height(); ++v)
    for (int u = 0; u < p.width(); ++u) {
      const bool free = cfg.depth_from_labels ? y.at(v, u) != 0 : p.at(v, u) > 0.5;
      if (free && depth.is_valid(v, u)) fs.pixels.push_back({u, v});
    }
  const auto y_hat = geometry::camera_height(fs, depth, k, cfg.height_estimator);
  if (!y_hat) return std::nullopt;
  return std::make_pair(geometry::depth_inconsistency_weights(depth, k, *y_hat, cfg.depth), *y_hat);
}

namespace detail {
// Shared assembly. The weights are constants of the step: neither the freespace
// selection nor the camera height contributes to the gradient.
template <class GradFn>
LossResult assemble(const ProbabilityMap& p, const LabelImage& y, const geometry::DepthImage& depth,
                    const geometry::CameraIntrinsics& k, const LossConfig& cfg, GradFn&& pixel_grad) {
  cfg.validate();
  require_same_size(p, y, "total_loss");
  require(depth.values.same_size(p), "total_loss: depth size does not match predictions");
  check_labels(y);
  LossResult r;
  r.grad = Grid<double>(p.height(), p.width(), 0.0);
  Grid<double> total_w(p.height(), p.width(), 1.0);

  r.terms.bce = bce(p, y, cfg.eps);
  if (cfg.lambda_s > 0.0) {
    const WeightMap ws = semantic_transition_weights(y, cfg.radius);
    r.terms.sta = weighted_bce(p, y, ws, cfg.eps);
    for (std::size_t i = 0; i < p.size(); ++i) total_w[i] += cfg.lambda_s * ws.values[i];
  }
  if (cfg.lambda_d > 0.0) {
    if (auto wd = frame_depth_weights(p, y, depth, k, cfg)) {
      r.terms.camera_height = wd->second;
      r.terms.dia = weighted_bce(p, y, wd->first, cfg.eps);
      for (std::size_t i = 0; i < p.size(); ++i) total_w[i] += cfg.lambda_d * wd->first.values[i];
    } else {
      r.terms.dia_skipped = true;
    }
  }
  r.terms.total = r.terms.bce + cfg.lambda_s * r.terms.sta + cfg.lambda_d * r.terms.dia;
  const double norm = cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(p.size()) : 1.0;
  if (cfg.reduction == Reduction::mean) {
    r.terms.total *= norm;
    r.terms.bce *= norm;
    r.terms.sta *= norm;
    r.terms.dia *= norm;
  }
  for (std::size_t i = 0; i < p.size(); ++i) r.grad[i] = norm * total_w[i] * pixel_grad(i);
  return r;
}
}  // namespace detail

/// L = BCE + lambda_S * L_STA + lambda_D * L_DIA with dL/dp per pixel.
inline LossResult total_loss(const ProbabilityMap& p, const LabelImage& y, const geometry::DepthImage& depth,
                             const geometry::CameraIntrinsics& k, const LossConfig& cfg = {}) {
  return detail::assemble(p, y, depth, k, cfg, [&](std::size_t i) { return pixel_bce_grad(p[i], y[i], cfg.eps); });
}

/// Same objective evaluated on p = sigmoid(logit); the gradient is dL/dlogit =
/// w(q) (p - y), which stays informative where p saturates.
inline LossResult total_loss_logits(const Grid<double>& logits, const LabelImage& y, const geometry::DepthImage& depth,
                                    const geometry::CameraIntrinsics& k, const LossConfig& cfg = {}) {
  ProbabilityMap p(logits.height(), logits.width());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double z = logits[i];
    p[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return detail::assemble(p, y, depth, k, cfg, [&](std::size_t i) { return p[i] - static_cast<double>(y[i]); });
}

}  // namespace roadseg::losses
