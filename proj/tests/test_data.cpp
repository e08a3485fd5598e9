#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "roadseg/data.hpp"

using namespace roadseg;
using namespace roadseg::data;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / (std::string("roadseg_data_") +
                                                 ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

struct P2 {
  double x, y;
};

double cross(P2 o, P2 a, P2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Andrew's monotone chain, counter-clockwise.
std::vector<P2> hull(std::vector<P2> pts) {
  std::sort(pts.begin(), pts.end(), [](P2 a, P2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<P2> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(h[k - 2], h[k - 1], pts[i - 1]) <= 0) --k;
    h[k++] = pts[i - 1];
  }
  h.resize(k - 1);
  return h;
}

bool inside(const std::vector<P2>& h, P2 p) {
  for (std::size_t i = 0; i < h.size(); ++i)
    if (cross(h[i], h[(i + 1) % h.size()], p) < 0) return false;
  return true;
}

SceneSpec flat_scene() {
  SceneSpec s;
  s.width = 48;
  s.height = 40;
  s.intrinsics = {40.0, 40.0, 23.7, 14.3};
  s.z_max = 1e9;
  s.seed = 7;
  return s;
}

}  // namespace

TEST(Render, EmptySceneIsExactGroundPlane) {
  const auto s = flat_scene();
  const auto f = render(s);
  for (int v = 0; v < s.height; ++v)
    for (int u = 0; u < s.width; ++u) {
      const bool below = v > s.intrinsics.cy;
      EXPECT_EQ(f.label.at(v, u), below ? 1 : 0) << v << "," << u;
      EXPECT_EQ(f.depth.is_valid(v, u), below);
      if (!below) continue;
      const double z = f.depth.values.at(v, u);
      EXPECT_NEAR((v - s.intrinsics.cy) / s.intrinsics.fy, s.camera_height / z, 1e-12);
      EXPECT_NEAR(geometry::back_project(u, v, z, s.intrinsics).y, s.camera_height, 1e-9);
    }
}

TEST(Render, BoxHoleMatchesProjectedHull) {
  auto s = flat_scene();
  const Box box{0.4, 9.0, 1.6, 1.0, 2.0};
  s.obstacles.push_back(box);
  const auto f = render(s);
  std::vector<P2> corners;
  const auto& k = s.intrinsics;
  for (double x : {box.x - box.width / 2, box.x + box.width / 2})
    for (double y : {s.camera_height - box.height, s.camera_height})
      for (double z : {box.z - box.depth / 2, box.z + box.depth / 2}) corners.push_back({k.fx * x / z + k.cx, k.fy * y / z + k.cy});
  const auto h = hull(corners);
  int hole = 0;
  for (int v = 0; v < s.height; ++v)
    for (int u = 0; u < s.width; ++u) {
      const bool in_box = inside(h, {double(u), double(v)});
      const bool ground = v > k.cy;
      EXPECT_EQ(f.label.at(v, u), ground && !in_box ? 1 : 0) << v << "," << u;
      hole += ground && in_box;
      if (in_box) {
        const double z = f.depth.values.at(v, u);
        EXPECT_GE(z, box.z - box.depth / 2 - 1e-9);
        EXPECT_LE(z, box.z + box.depth / 2 + 1e-9);
      }
    }
  EXPECT_GT(hole, 20);
}

TEST(Render, DeterministicAndSeedSensitive) {
  EXPECT_EQ(render(random_scene(3, 2, Difficulty::hard)), render(random_scene(3, 2, Difficulty::hard)));
  EXPECT_EQ(make_split(4, 3, Difficulty::easy), make_split(4, 3, Difficulty::easy));
  EXPECT_FALSE(render(random_scene(3, 2, Difficulty::hard)) == render(random_scene(4, 2, Difficulty::hard)));
}

TEST(Render, ContractErrors) {
  auto s = flat_scene();
  s.camera_height = 0.0;
  EXPECT_THROW(render(s), ContractError);
  s = flat_scene();
  s.obstacles.push_back({0, 5, 0.0, 1, 1});
  EXPECT_THROW(render(s), ContractError);
}

TEST(Render, RoadOnlyLabelsAreSubsetOfGround) {
  auto s = flat_scene();
  s.road_width = 3.0;
  const auto all = render(s);
  s.road_only_labels = true;
  const auto road = render(s);
  int fewer = 0;
  for (std::size_t i = 0; i < all.label.size(); ++i) {
    EXPECT_LE(road.label[i], all.label[i]);
    fewer += road.label[i] < all.label[i];
  }
  EXPECT_GT(fewer, 0);
}

TEST(Augment, HflipIsAnInvolution) {
  const auto f = render(random_scene(1, 0, Difficulty::hard));
  const auto twice = hflip(hflip(f));
  EXPECT_EQ(twice, f);
  EXPECT_EQ(twice.intrinsics, f.intrinsics);
  const auto once = hflip(f);
  EXPECT_EQ(once.intrinsics.cx, f.width() - 1 - f.intrinsics.cx);
}

TEST(Augment, BrightnessIsPhotometricOnly) {
  const auto f = render(random_scene(1, 1, Difficulty::easy));
  const auto b = brightness(f, 1.3);
  EXPECT_EQ(b.label, f.label);
  EXPECT_EQ(b.depth.values, f.depth.values);
  EXPECT_EQ(b.depth.valid, f.depth.valid);
  for (double v : b.rgb.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Augment, CropShiftsPrincipalPointConsistently) {
  const auto f = render(random_scene(1, 2, Difficulty::easy));
  const CropRect r{5, 9, 40, 32};
  const auto c = crop(f, r);
  EXPECT_EQ(c.intrinsics.cx, f.intrinsics.cx - 5);
  EXPECT_EQ(c.intrinsics.cy, f.intrinsics.cy - 9);
  EXPECT_EQ(c.intrinsics.fx, f.intrinsics.fx);
  for (int v = 0; v < r.height; ++v)
    for (int u = 0; u < r.width; ++u) {
      EXPECT_EQ(c.label.at(v, u), f.label.at(v + 9, u + 5));
      if (!c.depth.is_valid(v, u)) continue;
      const double z = c.depth.values.at(v, u);
      const auto a = geometry::back_project(u, v, z, c.intrinsics);
      const auto b = geometry::back_project(u + 5, v + 9, z, f.intrinsics);
      EXPECT_NEAR(a.x, b.x, 1e-12);
      EXPECT_NEAR(a.y, b.y, 1e-12);
      EXPECT_EQ(a.z, b.z);
    }
  EXPECT_THROW(crop(f, {30, 0, 40, 10}), ContractError);
  EXPECT_THROW(crop(f, {-1, 0, 10, 10}), ContractError);
}

TEST(Augment, AllOpsPreserveBinarityAndValidity) {
  const auto f = render(random_scene(2, 0, Difficulty::hard));
  const std::vector<AugmentOp> ops{{AugmentKind::hflip, {}},
                                   {AugmentKind::rotate, {}},
                                   {AugmentKind::crop, {4, 4, 48, 48}},
                                   {AugmentKind::brightness, {}}};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = augment(f, ops, seed);
    EXPECT_NO_THROW(a.validate());
    for (auto v : a.label.values()) EXPECT_LE(v, 1);
    for (std::size_t i = 0; i < a.depth.values.size(); ++i) EXPECT_EQ(a.depth.valid[i] != 0, a.depth.values[i] > 0.0);
    EXPECT_EQ(augment(f, ops, seed), a);
  }
  const auto rot = rotate(f, 0.0);
  EXPECT_EQ(rot.label, f.label);
  EXPECT_EQ(rot.depth.values, f.depth.values);
}

TEST(DatasetIO, RoundTripThroughPngFiles) {
  TempDir dir;
  const auto split = make_split(5, 3, Difficulty::hard, 32, 32);
  for (const auto& s : split) save_sample(dir.path(), s);
  std::ostringstream log;
  const auto loaded = load_dataset(dir.path(), log);
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_TRUE(log.str().empty());
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = split[i];
    const auto& b = loaded[i];
    EXPECT_EQ(b.stem, a.stem);
    EXPECT_EQ(b.label, a.label);
    EXPECT_EQ(b.intrinsics, a.intrinsics);
    EXPECT_EQ(b.depth.valid, a.depth.valid);
    for (std::size_t j = 0; j < a.depth.values.size(); ++j)
      if (a.depth.valid[j]) {
        EXPECT_NEAR(b.depth.values[j], a.depth.values[j], 0.5 / 256.0 + 1e-12);
      }
    for (std::size_t j = 0; j < a.rgb.size(); ++j) EXPECT_NEAR(b.rgb[j], a.rgb[j], 0.5 / 255.0 + 1e-12);
  }
}

TEST(DatasetIO, EmptyAndPartialDirectories) {
  TempDir dir;
  std::ostringstream log;
  EXPECT_TRUE(load_dataset(dir.path(), log).empty());

  const auto split = make_split(6, 4, Difficulty::easy, 16, 16);
  for (const auto& s : split) save_sample(dir.path(), s);
  fs::remove(dir.path() / "depth" / "easy_1.png");
  fs::remove(dir.path() / "calib" / "easy_3.txt");
  const auto loaded = load_dataset(dir.path(), log);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].stem, "easy_0");
  EXPECT_EQ(loaded[1].stem, "easy_2");
  EXPECT_NE(log.str().find("easy_1"), std::string::npos);
  EXPECT_NE(log.str().find("easy_3"), std::string::npos);
}

TEST(DatasetIO, MalformedIntrinsicsAreFatal) {
  TempDir dir;
  save_sample(dir.path(), make_split(7, 1, Difficulty::easy, 16, 16).front());
  std::ofstream(dir.path() / "calib" / "easy_0.txt") << "40 40 8\n";
  std::ostringstream log;
  EXPECT_THROW(load_dataset(dir.path(), log), FormatError);
}

TEST(DatasetIO, OrderIsStableAndHashDetectsChanges) {
  TempDir dir;
  auto split = make_split(8, 3, Difficulty::easy, 16, 16);
  for (const auto& s : split) save_sample(dir.path(), s);
  std::ostringstream log;
  const auto a = load_dataset(dir.path(), log), b = load_dataset(dir.path(), log);
  EXPECT_EQ(dataset_hash(a), dataset_hash(b));
  split[1].label[0] ^= 1;
  EXPECT_NE(dataset_hash(split), dataset_hash(make_split(8, 3, Difficulty::easy, 16, 16)));
}
