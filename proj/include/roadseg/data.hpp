#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "roadseg/geometry.hpp"
#include "roadseg/grid.hpp"
#include "roadseg/image_io.hpp"
#include "roadseg/tensor.hpp"

namespace roadseg::data {

using geometry::CameraIntrinsics;
using geometry::DepthImage;

/// Axis-aligned box resting on the ground; (x, z) is the footprint centre.
struct Box {
  double x = 0.0;
  double z = 10.0;
  double width = 1.0;
  double height = 1.0;
  double depth = 1.0;
};

struct Palette {
  std::array<double, 3> road{0.36, 0.36, 0.38};
  std::array<double, 3> offroad{0.26, 0.46, 0.20};
  std::array<double, 3> obstacle{0.62, 0.22, 0.20};
  std::array<double, 3> sky{0.55, 0.70, 0.90};
};

struct SceneSpec {
  double camera_height = 1.65;  // meters above the flat ground
  double road_width = 7.0;
  double road_offset = 0.0;     // lateral position of the road centre line
  double road_yaw_deg = 0.0;    // heading of the road relative to the optical axis
  double ramp_angle_deg = 0.0;  // ground rises at this angle beyond ramp_start
  double ramp_start = 12.0;
  double z_max = 80.0;          // no depth beyond this range
  CameraIntrinsics intrinsics{58.0, 58.0, 32.0, 24.0};
  std::vector<Box> obstacles;
  int width = 64;
  int height = 64;
  double noise = 0.02;
  bool road_only_labels = false;  // label only the road band instead of all visible ground
  Palette palette{};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(camera_height > 0.0)) throw ContractError("scene: camera height must be positive");
    if (!(road_width > 0.0)) throw ContractError("scene: road width must be positive");
    if (width <= 0 || height <= 0) throw ContractError("scene: image size must be positive");
    if (!(ramp_angle_deg >= 0.0 && ramp_angle_deg < 60.0)) throw ContractError("scene: ramp angle must be in [0, 60)");
    for (const auto& b : obstacles)
      if (!(b.width > 0 && b.height > 0 && b.depth > 0)) throw ContractError("scene: obstacle sizes must be positive");
    intrinsics.validate(height, width);
  }
};

/// One aligned RGB-D frame: rgb (3,H,W) in [0,1], metric depth, binary labels.
struct Sample {
  Tensor<double> rgb;
  DepthImage depth;
  LabelImage label;
  CameraIntrinsics intrinsics;
  std::string stem;

  int height() const { return label.height(); }
  int width() const { return label.width(); }

  void validate() const {
    require(rgb.rank() == 3 && rgb.channels() == 3, "sample: rgb must be 3 x H x W");
    require(rgb.height() == label.height() && rgb.width() == label.width(), "sample: rgb/label size mismatch");
    require(depth.values.same_size(label), "sample: depth/label size mismatch");
    for (auto v : label.values()) require(v <= 1, "sample: labels must be binary");
    for (std::size_t i = 0; i < depth.values.size(); ++i)
      if (depth.valid[i]) require(std::isfinite(depth.values[i]) && depth.values[i] > 0, "sample: invalid depth marked valid");
  }

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.rgb == b.rgb && a.depth.values == b.depth.values && a.depth.valid == b.depth.valid && a.label == b.label &&
           a.intrinsics == b.intrinsics;
  }
};

// ---------------------------------------------------------------------------
// Rendering

/// Height (camera y) of the ground surface at forward distance z.
inline double ground_y(const SceneSpec& s, double z) {
  const double t = std::tan(s.ramp_angle_deg * std::numbers::pi / 180.0);
  return z <= s.ramp_start ? s.camera_height : s.camera_height - (z - s.ramp_start) * t;
}

/// Forward distance at which a ray with vertical slope b meets the ground, if it does.
inline std::optional<double> ground_hit(const SceneSpec& s, double b) {
  const double h = s.camera_height;
  if (b > 0.0 && h / b <= s.ramp_start) return h / b;
  const double t = std::tan(s.ramp_angle_deg * std::numbers::pi / 180.0);
  if (t > 0.0 && b + t > 0.0) return (h + s.ramp_start * t) / (b + t);
  if (t == 0.0 && b > 0.0) return h / b;
  return std::nullopt;
}

/// Entry distance of the ray (a, b, 1) into the box, if any.
inline std::optional<double> box_hit(const SceneSpec& s, const Box& box, double a, double b) {
  const double base = ground_y(s, box.z);
  const double lo[3] = {box.x - box.width / 2, base - box.height, box.z - box.depth / 2};
  const double hi[3] = {box.x + box.width / 2, base, box.z + box.depth / 2};
  const double d[3] = {a, b, 1.0};
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (d[i] == 0.0) {
      if (0.0 < lo[i] || 0.0 > hi[i]) return std::nullopt;
      continue;
    }
    double ta = lo[i] / d[i], tb = hi[i] / d[i];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0.0) return std::nullopt;
  return t0;
}

inline bool on_road(const SceneSpec& s, double x, double z) {
  const double centre = s.road_offset + z * std::tan(s.road_yaw_deg * std::numbers::pi / 180.0);
  return std::abs(x - centre) <= s.road_width / 2;
}

/// Ray-casts the scene through every integer pixel (u, v). Depth is the exact
/// forward distance of the first surface hit; labels mark visible ground.
inline Sample render(const SceneSpec& s) {
  s.validate();
  const auto& k = s.intrinsics;
  Sample out;
  out.rgb = Tensor<double>::chw(3, s.height, s.width);
  Grid<double> depth(s.height, s.width, 0.0);
  out.label = LabelImage(s.height, s.width, 0);
  out.intrinsics = k;
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> noise(0.0, s.noise > 0 ? s.noise : 1.0);
  for (int v = 0; v < s.height; ++v)
    for (int u = 0; u < s.width; ++u) {
      const double a = (u - k.cx) / k.fx, b = (v - k.cy) / k.fy;
      std::array<double, 3> color = s.palette.sky;
      double z = 0.0;
      std::uint8_t label = 0;
      if (auto g = ground_hit(s, b); g && *g <= s.z_max) {
        z = *g;
        const bool road = on_road(s, a * z, z);
        label = road || !s.road_only_labels ? 1 : 0;
        color = road ? s.palette.road : s.palette.offroad;
      }
      for (const auto& box : s.obstacles)
        if (auto t = box_hit(s, box, a, b); t && *t <= s.z_max && (z == 0.0 || *t < z)) {
          z = *t;
          label = 0;
          color = s.palette.obstacle;
        }
      depth.at(v, u) = z;
      out.label.at(v, u) = label;
      for (int c = 0; c < 3; ++c) {
        const double n = s.noise > 0 ? noise(rng) : 0.0;
        out.rgb(c, v, u) = std::clamp(color[static_cast<std::size_t>(c)] + n, 0.0, 1.0);
      }
    }
  out.depth = DepthImage::from_values(std::move(depth));
  return out;
}

// ---------------------------------------------------------------------------
// Procedural splits

enum class Difficulty { easy, hard };

/// Default intrinsics for a w x h frame: fx = fy = 0.9 w, horizon at 0.375 h.
inline CameraIntrinsics default_intrinsics(int width, int height) {
  return {0.9 * width, 0.9 * width, width / 2.0, 0.375 * height};
}

/// Randomised scene `index` of a split. The hard split adds thin obstacles,
/// ramps and road-coloured clutter so that RGB alone is ambiguous.
inline SceneSpec random_scene(std::uint64_t seed, std::size_t index, Difficulty difficulty, int width = 64,
                              int height = 64) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + index + 1);
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SceneSpec s;
  s.width = width;
  s.height = height;
  s.intrinsics = default_intrinsics(width, height);
  s.seed = rng();
  s.camera_height = U(1.5, 1.8);
  s.road_width = U(5.0, 9.0);
  s.road_offset = U(-1.5, 1.5);
  s.road_yaw_deg = U(-12.0, 12.0);
  const int n_boxes = difficulty == Difficulty::hard ? 2 + static_cast<int>(rng() % 3) : static_cast<int>(rng() % 2);
  for (int i = 0; i < n_boxes; ++i) {
    Box b;
    b.z = U(6.0, 25.0);
    b.x = s.road_offset + b.z * std::tan(s.road_yaw_deg * std::numbers::pi / 180.0) + U(-0.6, 0.6) * s.road_width;
    if (difficulty == Difficulty::hard) {
      b.width = U(0.15, 0.5);
      b.depth = U(0.15, 0.5);
      b.height = U(0.8, 2.0);
    } else {
      b.width = U(1.0, 2.0);
      b.depth = U(1.0, 3.0);
      b.height = U(1.0, 1.8);
    }
    s.obstacles.push_back(b);
  }
  if (difficulty == Difficulty::hard) {
    s.ramp_angle_deg = U(0.0, 8.0);
    s.ramp_start = U(8.0, 20.0);
    s.noise = 0.05;
    const double grey = U(0.33, 0.40);
    s.palette.road = {grey, grey, grey + 0.02};
    s.palette.offroad = {grey + 0.03, grey + 0.06, grey - 0.02};
    s.palette.obstacle = {grey + 0.02, grey + 0.01, grey + 0.03};
  }
  return s;
}

inline std::vector<Sample> make_split(std::uint64_t seed, std::size_t count, Difficulty difficulty, int width = 64,
                                      int height = 64) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(render(random_scene(seed, i, difficulty, width, height)));
    out.back().stem = (difficulty == Difficulty::hard ? "hard_" : "easy_") + std::to_string(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct CropRect {
  int x0 = 0, y0 = 0, width = 0, height = 0;
};

inline Sample hflip(const Sample& s) {
  Sample o = s;
  const int H = s.height(), W = s.width();
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) {
      const int m = W - 1 - u;
      for (int c = 0; c < 3; ++c) o.rgb(c, v, u) = s.rgb(c, v, m);
      o.depth.values.at(v, u) = s.depth.values.at(v, m);
      o.depth.valid.at(v, u) = s.depth.valid.at(v, m);
      o.label.at(v, u) = s.label.at(v, m);
    }
  o.intrinsics.cx = (W - 1) - s.intrinsics.cx;
  return o;
}

inline Sample crop(const Sample& s, const CropRect& r) {
  if (r.x0 < 0 || r.y0 < 0 || r.width <= 0 || r.height <= 0 || r.x0 + r.width > s.width() ||
      r.y0 + r.height > s.height())
    throw ContractError("crop: rectangle out of bounds");
  Sample o;
  o.stem = s.stem;
  o.rgb = Tensor<double>::chw(3, r.height, r.width);
  o.label = LabelImage(r.height, r.width);
  Grid<double> d(r.height, r.width);
  Grid<std::uint8_t> valid(r.height, r.width);
  for (int v = 0; v < r.height; ++v)
    for (int u = 0; u < r.width; ++u) {
      for (int c = 0; c < 3; ++c) o.rgb(c, v, u) = s.rgb(c, v + r.y0, u + r.x0);
      d.at(v, u) = s.depth.values.at(v + r.y0, u + r.x0);
      valid.at(v, u) = s.depth.valid.at(v + r.y0, u + r.x0);
      o.label.at(v, u) = s.label.at(v + r.y0, u + r.x0);
    }
  o.depth = DepthImage(std::move(d), std::move(valid));
  o.intrinsics = s.intrinsics;
  o.intrinsics.cx -= r.x0;
  o.intrinsics.cy -= r.y0;
  return o;
}

/// Photometric only: rgb scaled by `factor` and clipped.
inline Sample brightness(const Sample& s, double factor) {
  Sample o = s;
  for (auto& v : o.rgb.values()) v = std::clamp(v * factor, 0.0, 1.0);
  return o;
}

/// In-plane rotation about the image centre. Bilinear for rgb, nearest for
/// depth and labels; pixels mapped from outside the frame become invalid/background.
inline Sample rotate(const Sample& s, double degrees) {
  Sample o = s;
  const int H = s.height(), W = s.width();
  const double th = degrees * std::numbers::pi / 180.0, c = std::cos(th), sn = std::sin(th);
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) {
      const double xs = c * (u - cx) + sn * (v - cy) + cx;
      const double ys = -sn * (u - cx) + c * (v - cy) + cy;
      const int un = static_cast<int>(std::lround(xs)), vn = static_cast<int>(std::lround(ys));
      const bool inside = un >= 0 && un < W && vn >= 0 && vn < H;
      o.depth.values.at(v, u) = inside ? s.depth.values.at(vn, un) : 0.0;
      o.depth.valid.at(v, u) = inside ? s.depth.valid.at(vn, un) : 0;
      o.label.at(v, u) = inside ? s.label.at(vn, un) : 0;
      const int x0 = static_cast<int>(std::floor(xs)), y0 = static_cast<int>(std::floor(ys));
      const double fx = xs - x0, fy = ys - y0;
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int xx = x0 + dx, yy = y0 + dy;
            if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
            acc += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * s.rgb(ch, yy, xx);
          }
        o.rgb(ch, v, u) = acc;
      }
    }
  return o;
}

enum class AugmentKind { hflip, rotate, crop, brightness };

struct AugmentOp {
  AugmentKind kind = AugmentKind::hflip;
  CropRect crop{};  // used by crop
};

inline constexpr double kMaxRotationDeg = 5.0;

/// Applies `ops` in order. Rotation angle (within +-5 deg) and brightness factor
/// (0.8..1.2) are drawn from `seed`.
inline Sample augment(const Sample& s, const std::vector<AugmentOp>& ops, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sample out = s;
  for (const auto& op : ops) {
    switch (op.kind) {
      case AugmentKind::hflip: out = hflip(out); break;
      case AugmentKind::rotate:
        out = rotate(out, std::uniform_real_distribution<double>(-kMaxRotationDeg, kMaxRotationDeg)(rng));
        break;
      case AugmentKind::crop: out = crop(out, op.crop); break;
      case AugmentKind::brightness:
        out = brightness(out, std::uniform_real_distribution<double>(0.8, 1.2)(rng));
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: root/{rgb,depth,label}/STEM.png, root/calib/STEM.txt

inline constexpr double kDepthScale = 256.0;

inline void save_sample(const std::filesystem::path& root, const Sample& s) {
  namespace fs = std::filesystem;
  for (const char* d : {"rgb", "depth", "label", "calib"}) fs::create_directories(root / d);
  const int H = s.height(), W = s.width();
  io::PngImage rgb{W, H, 3, 8, {}}, depth{W, H, 1, 16, {}}, label{W, H, 1, 8, {}};
  rgb.samples.resize(static_cast<std::size_t>(W) * H * 3);
  depth.samples.resize(static_cast<std::size_t>(W) * H);
  label.samples.resize(static_cast<std::size_t>(W) * H);
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * W + u;
      for (int c = 0; c < 3; ++c) rgb.samples[i * 3 + c] = static_cast<std::uint16_t>(std::lround(255.0 * s.rgb(c, v, u)));
      const double z = s.depth.valid[i] ? s.depth.values[i] : 0.0;
      depth.samples[i] = static_cast<std::uint16_t>(std::clamp<long>(std::lround(z * kDepthScale), 0, 65535));
      label.samples[i] = s.label[i] ? 255 : 0;
    }
  io::write_png((root / "rgb" / (s.stem + ".png")).string(), rgb);
  io::write_png((root / "depth" / (s.stem + ".png")).string(), depth);
  io::write_png((root / "label" / (s.stem + ".png")).string(), label);
  geometry::write_intrinsics((root / "calib" / (s.stem + ".txt")).string(), s.intrinsics);
}

inline DepthImage read_depth_png(const std::string& path) {
  const auto img = io::read_png(path);
  if (img.channels != 1 || img.bit_depth != 16) throw FormatError(path + ": depth must be a 16-bit single-channel PNG");
  Grid<double> d(img.height, img.width, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = img.samples[i] / kDepthScale;
  return DepthImage::from_values(std::move(d));
}

inline LabelImage read_label_png(const std::string& path) {
  const auto img = io::read_png(path);
  if (img.channels != 1) throw FormatError(path + ": label must be single-channel");
  LabelImage l(img.height, img.width, 0);
  const int on = img.bit_depth == 16 ? 65535 : 255;
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (img.samples[i] != 0 && img.samples[i] != on) throw FormatError(path + ": label values must be 0 or 255");
    l[i] = img.samples[i] ? 1 : 0;
  }
  return l;
}

inline Tensor<double> read_rgb_png(const std::string& path) {
  const auto img = io::read_png(path);
  if (img.channels != 3) throw FormatError(path + ": rgb image must have three channels");
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor<double> t = Tensor<double>::chw(3, img.height, img.width);
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u)
      for (int c = 0; c < 3; ++c) t(c, v, u) = img.at(v, u, c) / scale;
  return t;
}

/// Loads every complete stem under `root` in filename order. Stems missing a
/// plane are skipped with a warning; malformed intrinsics are fatal.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root, std::ostream& log = std::cerr) {
  namespace fs = std::filesystem;
  std::vector<Sample> out;
  if (!fs::exists(root / "rgb")) return out;
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(root / "rgb"))
    if (e.is_regular_file() && e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  for (const auto& stem : stems) {
    const fs::path depth = root / "depth" / (stem + ".png"), label = root / "label" / (stem + ".png"),
                   calib = root / "calib" / (stem + ".txt");
    bool complete = true;
    for (const auto& p : {depth, label, calib})
      if (!fs::exists(p)) {
        log << "warning: skipping '" << stem << "': missing " << p.string() << '\n';
        complete = false;
      }
    if (!complete) continue;
    Sample s;
    s.stem = stem;
    s.intrinsics = geometry::read_intrinsics(calib.string());
    s.rgb = read_rgb_png((root / "rgb" / (stem + ".png")).string());
    s.depth = read_depth_png(depth.string());
    s.label = read_label_png(label.string());
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

/// FNV-1a over labels, depth and rgb of every sample, in order.
inline std::uint64_t dataset_hash(const std::vector<Sample>& samples) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& s : samples) {
    mix(s.label.values().data(), s.label.size());
    mix(s.depth.values.values().data(), s.depth.values.size() * sizeof(double));
    mix(s.rgb.data(), s.rgb.size() * sizeof(double));
  }
  return h;
}

}  // namespace roadseg::data
