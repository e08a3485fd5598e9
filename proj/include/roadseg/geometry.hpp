#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/errors.hpp"
#include "roadseg/grid.hpp"
#include "roadseg/tensor.hpp"

namespace roadseg::geometry {

// Conventions: image u to the right, v downward; camera x right, y down, z forward.
// Ground pixels below the horizon therefore back-project to positive y.

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy))
      throw ContractError("intrinsics: focal lengths must be positive and finite");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw ContractError("intrinsics: principal point must be finite");
  }
  void validate(int height, int width) const {
    validate();
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
      throw ContractError("intrinsics: principal point outside the " + std::to_string(width) + "x" +
                          std::to_string(height) + " image");
  }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Parses "fx fy cx cy" (whitespace separated).
inline CameraIntrinsics parse_intrinsics(const std::string& text) {
  std::istringstream is(text);
  CameraIntrinsics k;
  if (!(is >> k.fx >> k.fy >> k.cx >> k.cy)) throw FormatError("intrinsics: expected four numbers 'fx fy cx cy'");
  std::string extra;
  if (is >> extra) throw FormatError("intrinsics: trailing content '" + extra + "'");
  try {
    k.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return k;
}

inline CameraIntrinsics read_intrinsics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open intrinsics file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_intrinsics(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_intrinsics(const std::string& path, const CameraIntrinsics& k) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write intrinsics file " + path);
  out.precision(17);
  out << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << '\n';
}

/// Metric depth (meters) with an explicit validity mask.
struct DepthImage {
  Grid<double> values;
  Grid<std::uint8_t> valid;

  DepthImage() = default;
  DepthImage(Grid<double> v, Grid<std::uint8_t> mask) : values(std::move(v)), valid(std::move(mask)) {
    require_same_size(values, valid, "DepthImage");
  }

  /// Marks finite, strictly positive entries valid.
  static DepthImage from_values(Grid<double> v) {
    Grid<std::uint8_t> mask(v.height(), v.width(), 0);
    for (std::size_t i = 0; i < v.size(); ++i) mask[i] = std::isfinite(v[i]) && v[i] > 0.0;
    return DepthImage(std::move(v), std::move(mask));
  }

  int height() const { return values.height(); }
  int width() const { return values.width(); }
  bool is_valid(int v, int u) const { return valid.at(v, u) != 0; }
};

struct Point3 {
  double x = 0, y = 0, z = 0;
};

struct Pixel {
  int u = 0;
  int v = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Pixel locations; homogeneous form (u, v, 1) is implied.
struct PixelSet {
  std::vector<Pixel> pixels;

  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }

  void validate(int height, int width) const {
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(height) * width, 0);
    for (const auto& p : pixels) {
      if (p.u < 0 || p.u >= width || p.v < 0 || p.v >= height)
        throw ContractError("pixel set: (" + std::to_string(p.u) + "," + std::to_string(p.v) + ") out of bounds");
      auto& s = seen[static_cast<std::size_t>(p.v) * width + p.u];
      if (s) throw ContractError("pixel set: duplicate pixel");
      s = 1;
    }
  }

  static PixelSet from_mask(const Grid<std::uint8_t>& mask) {
    PixelSet s;
    for (int v = 0; v < mask.height(); ++v)
      for (int u = 0; u < mask.width(); ++u)
        if (mask.at(v, u)) s.pixels.push_back({u, v});
    return s;
  }
};

/// Unit normals (3 x H x W) in the camera frame; invalid pixels hold zeros.
struct NormalMap {
  Tensor<double> vectors;
  Grid<std::uint8_t> valid;
};

inline Point3 back_project(double u, double v, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0)) throw DomainError("back_project: depth must be positive");
  return {(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth};
}

inline Point3 back_project(Pixel q, double depth, const CameraIntrinsics& k) { return back_project(q.u, q.v, depth, k); }

/// Closed-form normals from inverse-depth central differences. On a plane 1/Z is
/// affine in (u, v), so the differences, and hence the normals, are exact there.
/// A pixel is estimated when it and its four direct neighbours carry valid depth.
inline NormalMap estimate_normals(const DepthImage& depth, const CameraIntrinsics& k) {
  k.validate();
  const int H = depth.height(), W = depth.width();
  NormalMap out{Tensor<double>::chw(3, std::max(H, 1), std::max(W, 1)), Grid<std::uint8_t>(H, W, 0)};
  std::size_t count = 0;
  for (int v = 1; v + 1 < H; ++v)
    for (int u = 1; u + 1 < W; ++u) {
      if (!depth.is_valid(v, u) || !depth.is_valid(v, u - 1) || !depth.is_valid(v, u + 1) ||
          !depth.is_valid(v - 1, u) || !depth.is_valid(v + 1, u))
        continue;
      const double z = depth.values.at(v, u);
      const double du = 0.5 * (1.0 / depth.values.at(v, u + 1) - 1.0 / depth.values.at(v, u - 1));
      const double dv = 0.5 * (1.0 / depth.values.at(v + 1, u) - 1.0 / depth.values.at(v - 1, u));
      // (-fx dZ/du, -fy dZ/dv, (u-cx) dZ/du + (v-cy) dZ/dv + Z) with dZ = -Z^2 d(1/Z), divided by Z.
      double nx = k.fx * z * du;
      double ny = k.fy * z * dv;
      double nz = 1.0 - z * (du * (u - k.cx) + dv * (v - k.cy));
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      if (!(len > 0.0) || !std::isfinite(len)) continue;
      nx /= len, ny /= len, nz /= len;
      // Face the camera: the normal must point against the viewing ray.
      const double ray = nx * (u - k.cx) / k.fx + ny * (v - k.cy) / k.fy + nz;
      if (ray > 0.0) nx = -nx, ny = -ny, nz = -nz;
      out.vectors(0, v, u) = nx;
      out.vectors(1, v, u) = ny;
      out.vectors(2, v, u) = nz;
      out.valid.at(v, u) = 1;
      ++count;
    }
  if (count == 0) throw DomainError("estimate_normals: no pixel has a valid 3x3 depth neighbourhood");
  return out;
}

enum class HeightEstimator { mean, median };

/// Theoretical camera height: mean (or median) back-projected y of the freespace
/// pixels. Returns nullopt for an empty set.
inline std::optional<double> camera_height(const PixelSet& freespace, const DepthImage& depth,
                                           const CameraIntrinsics& k,
                                           HeightEstimator estimator = HeightEstimator::mean) {
  k.validate();
  if (freespace.empty()) return std::nullopt;
  std::vector<double> ys;
  ys.reserve(freespace.size());
  for (const auto& q : freespace.pixels) {
    if (!depth.values.contains(q.v, q.u)) throw ContractError("camera_height: pixel out of bounds");
    if (!depth.is_valid(q.v, q.u)) throw DomainError("camera_height: invalid depth at a freespace pixel");
    ys.push_back(back_project(q, depth.values.at(q.v, q.u), k).y);
  }
  if (estimator == HeightEstimator::median) {
    const std::size_t mid = ys.size() / 2;
    std::nth_element(ys.begin(), ys.begin() + mid, ys.end());
    if (ys.size() % 2) return ys[mid];
    const double upper = ys[mid];
    const double lower = *std::max_element(ys.begin(), ys.begin() + mid);
    return 0.5 * (lower + upper);
  }
  double s = 0.0;
  for (double y : ys) s += y;
  return s / static_cast<double>(ys.size());
}

struct DepthWeightOptions {
  double z_max = 200.0;       // implied depth used at and above the horizon
  double horizon_eps = 1e-6;  // ray terms at or below this count as horizon
};

/// Depth implied by a flat ground plane at height `y_hat` along the ray through (u, v).
inline double implied_ground_depth(double v, double y_hat, const CameraIntrinsics& k,
                                   const DepthWeightOptions& opt = {}) {
  const double ray = (v - k.cy) / k.fy;
  return ray <= opt.horizon_eps ? opt.z_max : y_hat / ray;
}

/// w_D(q) = 1 - exp(-|y_hat / ray(q) - depth(q)|); zero where depth is invalid.
inline WeightMap depth_inconsistency_weights(const DepthImage& depth, const CameraIntrinsics& k, double y_hat,
                                             const DepthWeightOptions& opt = {}) {
  k.validate();
  if (!std::isfinite(y_hat)) throw DomainError("depth_inconsistency_weights: camera height must be finite");
  WeightMap w{Grid<double>(depth.height(), depth.width(), 0.0), WeightKind::depth};
  for (int v = 0; v < depth.height(); ++v) {
    const double implied = implied_ground_depth(v, y_hat, k, opt);
    for (int u = 0; u < depth.width(); ++u) {
      if (!depth.is_valid(v, u)) continue;
      const double z = depth.values.at(v, u);
      if (!std::isfinite(z)) throw DomainError("depth_inconsistency_weights: non-finite depth at a valid pixel");
      w.values.at(v, u) = 1.0 - std::exp(-std::abs(implied - z));
    }
  }
  return w;
}

/// Convenience: estimate y_hat from `freespace`, then weight every pixel.
/// Returns nullopt when the set is empty.
inline std::optional<WeightMap> depth_inconsistency_weights(const PixelSet& freespace, const DepthImage& depth,
                                                            const CameraIntrinsics& k,
                                                            const DepthWeightOptions& opt = {},
                                                            HeightEstimator estimator = HeightEstimator::mean) {
  const auto y_hat = camera_height(freespace, depth, k, estimator);
  if (!y_hat) return std::nullopt;
  return depth_inconsistency_weights(depth, k, *y_hat, opt);
}

}  // namespace roadseg::geometry
