// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
// Tolerances are pinned here and never adjusted to make a criterion pass.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "roadseg/harness.hpp"

using namespace roadseg;
namespace fs = std::filesystem;

namespace {

constexpr double kOracleSeconds = 60.0;
constexpr double kOmegaSTol = 1e-9;
constexpr double kFlatOmegaDMax = 1e-5;
constexpr double kBoxOmegaDMin = 0.3;
constexpr int kAffinityInstances = 1000;
constexpr double kLossGradTol = 1e-4;
constexpr double kFusionGradTol = 1e-3;
constexpr double kOverfitFsc = 0.99;
constexpr double kOverfitSeconds = 300.0;
constexpr int kOverfitSteps = 200;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << " (" << std::fixed
            << std::setprecision(1) << seconds_since(t0) << " s)" << std::endl;
  std::cout.unsetf(std::ios::fixed);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome oracle_suite() {
  std::vector<std::string> binaries;
  std::istringstream is(ROADSEG_ORACLE_SUITE);
  for (std::string b; std::getline(is, b, '|');) binaries.push_back(b);
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  for (const auto& b : binaries) {
    const int status = std::system((b + " --gtest_brief=1 > /dev/null 2>&1").c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed.push_back(fs::path(b).filename().string());
  }
  const double elapsed = seconds_since(t0);
  std::string detail = std::to_string(binaries.size()) + " suites in " + fmt(elapsed, 3) + " s (limit " +
                       fmt(kOracleSeconds) + " s)";
  for (const auto& f : failed) detail += ", failed " + f;
  return {failed.empty() && elapsed < kOracleSeconds, detail};
}

Outcome transition_limits() {
  double worst = 0.0;
  for (int n : {4, 8, 16}) {
    // Uniform regions of both labels.
    for (std::uint8_t fill : {0, 1}) {
      const LabelImage y(n, n, fill);
      const auto w = losses::semantic_transition_weights(y, 7).values;
      for (double v : w.values()) worst = std::max(worst, std::abs(v));
    }
    // Windows covering the whole image: balanced halves and a one-quarter band.
    LabelImage half(n, n, 0), quarter(n, n, 0);
    for (int v = 0; v < n; ++v)
      for (int u = 0; u < n; ++u) {
        half.at(v, u) = u < n / 2;
        quarter.at(v, u) = v < n / 4;
      }
    const int r = n;
    const auto wh = losses::semantic_transition_weights(half, r).values;
    for (double v : wh.values()) worst = std::max(worst, std::abs(v - 1.0));
    const auto wq = losses::semantic_transition_weights(quarter, r).values;
    for (double v : wq.values()) worst = std::max(worst, std::abs(v - std::cos(std::numbers::pi / 4)));
  }
  return {worst <= kOmegaSTol, "max deviation " + fmt(worst) + " (limit " + fmt(kOmegaSTol) + ")"};
}

Outcome depth_invariant() {
  data::SceneSpec flat;
  flat.width = 128;
  flat.height = 96;
  flat.intrinsics = {110.0, 110.0, 63.5, 36.0};
  flat.seed = 3;
  const auto ground = data::render(flat);
  geometry::PixelSet fs;
  for (int v = 0; v < flat.height; ++v)
    for (int u = 0; u < flat.width; ++u)
      if (ground.label.at(v, u) && ground.depth.is_valid(v, u)) fs.pixels.push_back({u, v});
  const auto y_flat = geometry::camera_height(fs, ground.depth, flat.intrinsics);
  if (!y_flat) return {false, "flat frame has no freespace"};
  const auto wf = geometry::depth_inconsistency_weights(ground.depth, flat.intrinsics, *y_flat).values;
  double flat_max = 0.0;
  for (int v = 0; v < flat.height; ++v)
    for (int u = 0; u < flat.width; ++u)
      if (ground.label.at(v, u)) flat_max = std::max(flat_max, wf.at(v, u));

  // A 1 m box whose pixels a corrupted mask marks as freespace.
  auto boxed = flat;
  boxed.obstacles.push_back({0.0, 10.0, 2.0, 1.0, 1.5});
  const auto frame = data::render(boxed);
  geometry::PixelSet corrupted;
  std::vector<std::pair<int, int>> box_pixels;
  for (int v = 0; v < boxed.height; ++v)
    for (int u = 0; u < boxed.width; ++u) {
      const bool on_box = frame.depth.values.at(v, u) != ground.depth.values.at(v, u);
      if (on_box) box_pixels.push_back({v, u});
      if ((frame.label.at(v, u) || on_box) && frame.depth.is_valid(v, u)) corrupted.pixels.push_back({u, v});
    }
  const auto y_hat = geometry::camera_height(corrupted, frame.depth, boxed.intrinsics);
  const auto wb = geometry::depth_inconsistency_weights(frame.depth, boxed.intrinsics, *y_hat).values;
  double mean = 0.0;
  for (auto [v, u] : box_pixels) mean += wb.at(v, u);
  mean /= static_cast<double>(box_pixels.size());
  return {flat_max <= kFlatOmegaDMax && mean >= kBoxOmegaDMin,
          "flat max " + fmt(flat_max) + " (limit " + fmt(kFlatOmegaDMax) + "), box mean " + fmt(mean) + " over " +
              std::to_string(box_pixels.size()) + " px (min " + fmt(kBoxOmegaDMin) + ")"};
}

Outcome affinity_bounds() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> channels(1, 8), side(4, 9);
  std::uniform_real_distribution<double> scale(0.1, 4.0);
  std::uniform_int_distribution<int> flip(0, 1);
  double lo = 1.0, hi = 0.0;
  std::size_t entries = 0;
  for (int i = 0; i < kAffinityInstances; ++i) {
    const int c = channels(rng), h = side(rng), w = side(rng);
    auto p = fusion::FusionParams<double>::init(c, rng());
    const double s = scale(rng);
    p.visit("f", [&](const std::string&, Var<double>& v) {
      for (auto& e : v.mutable_value().values()) e *= s;
    });
    const Var<double> r(oracle::random_tensor<double>({c, h, w}, rng, -3.0, 3.0));
    const Var<double> n(oracle::random_tensor<double>({c, h, w}, rng, -3.0, 3.0));
    fusion::FusionSwitches sw;
    sw.spatial = flip(rng);
    sw.channel = flip(rng);
    sw.atrous = flip(rng);
    NoGradGuard guard;
    const auto a = fusion::affinity_volume<double>({r, n}, p, sw).value();
    for (double v : a.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      ++entries;
    }
  }
  return {lo > 0.0 && hi < 1.0, std::to_string(kAffinityInstances) + " instances, " + std::to_string(entries) +
                                    " entries in [" + fmt(lo, 9) + ", " + fmt(hi, 9) + "]"};
}

Outcome gradient_checks() {
  const geometry::CameraIntrinsics k{8.0, 8.0, 4.0, 2.0};
  double loss_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    std::bernoulli_distribution bit(0.5);
    std::uniform_real_distribution<double> prob(0.02, 0.98), noise(-0.3, 0.3);
    LabelImage y(8, 8);
    for (auto& v : y.values()) v = bit(rng);
    ProbabilityMap p(8, 8);
    for (auto& v : p.values()) {
      v = prob(rng);
      if (std::abs(v - 0.5) < 0.02) v += 0.05;  // keep the freespace set fixed under perturbation
    }
    Grid<double> z(8, 8);
    for (int v = 0; v < 8; ++v)
      for (int u = 0; u < 8; ++u) z.at(v, u) = (v > 2.5 ? 8.0 * 1.5 / (v - 2.0) : 20.0) + noise(rng);
    const auto depth = geometry::DepthImage::from_values(std::move(z));
    losses::LossConfig cfg;
    cfg.radius = 2;
    const auto res = losses::total_loss(p, y, depth, k, cfg);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double fd =
          oracle::central_difference([&] { return losses::total_loss(p, y, depth, k, cfg).terms.total; }, p[i], 1e-6);
      loss_worst = std::max(loss_worst, oracle::relative_error(res.grad[i], fd, 1e-6));
    }
  }

  double fusion_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(900 + seed);
    auto p = fusion::FusionParams<double>::init(2, rng());
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    p.visit("f", [&](const std::string& name, Var<double>& v) {
      if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos)
        for (auto& e : v.mutable_value().values()) e = d(rng);
      if (name.find("gamma") != std::string::npos)
        for (auto& e : v.mutable_value().values()) e = 1.0 + d(rng);
    });
    const Var<double> r(oracle::random_tensor<double>({2, 4, 4}, rng, -1.0, 1.0));
    const Var<double> n(oracle::random_tensor<double>({2, 4, 4}, rng, -1.0, 1.0));
    backward(ops::sum(fusion::hf2b_forward<double>({r, n}, p).fused));
    auto readout = [&] {
      NoGradGuard g;
      return fusion::hf2b_forward<double>({r, n}, p).fused.value().sum();
    };
    p.visit("f", [&](const std::string&, Var<double>& v) {
      auto& x = v.mutable_value();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = oracle::central_difference(readout, x[i], 1e-5);
        fusion_worst = std::max(fusion_worst, oracle::relative_error(v.grad()[i], fd, 1e-4));
      }
    });
  }
  return {loss_worst <= kLossGradTol && fusion_worst <= kFusionGradTol,
          "loss worst " + fmt(loss_worst, 3) + " (limit " + fmt(kLossGradTol) + ", 20 seeds 8x8), fusion worst " +
              fmt(fusion_worst, 3) + " (limit " + fmt(kFusionGradTol) + ", 3 seeds 2x4x4)"};
}

Outcome decoder_ordering() {
  bool ok = true;
  std::string detail;
  for (const std::vector<int>& ch : {std::vector<int>{8, 16, 32, 64}, std::vector<int>{16, 32, 64, 128},
                                     std::vector<int>{128, 256, 512, 1024}}) {
    std::map<decoder::Topology, decoder::CostReport> cost;
    for (auto t : {decoder::Topology::roadsegv2, decoder::Topology::unetpp, decoder::Topology::unet3p})
      cost[t] = decoder::cost_report(decoder::build_topology(t, 4, ch, {}), 64, 64);
    const auto& a = cost[decoder::Topology::roadsegv2];
    const auto& b = cost[decoder::Topology::unetpp];
    const auto& c = cost[decoder::Topology::unet3p];
    const bool here = a.params < b.params && b.params < c.params && a.flops < b.flops && b.flops < c.flops;
    ok = ok && here;
    detail += (detail.empty() ? "" : "; ") + std::string("base ") + std::to_string(ch[0]) + " params " +
              std::to_string(a.params) + "<" + std::to_string(b.params) + "<" + std::to_string(c.params) + " flops " +
              std::to_string(a.flops) + "<" + std::to_string(b.flops) + "<" + std::to_string(c.flops) +
              (here ? "" : " VIOLATED");
  }
  return {ok, detail};
}

Outcome toy_overfit() {
  const auto frames = data::make_split(1, 8, data::Difficulty::easy, 64, 64);
  harness::TrainConfig cfg;
  cfg.model.stages = 3;
  cfg.model.channels = {8, 16, 32};
  cfg.epochs = 1000;
  cfg.max_steps = kOverfitSteps;
  const auto t0 = Clock::now();
  const auto res = harness::train(cfg, frames, {});
  const double fsc = harness::evaluate(res.state, frames).fsc();
  const double elapsed = seconds_since(t0);
  return {fsc >= kOverfitFsc && elapsed <= kOverfitSeconds && res.record.steps <= kOverfitSteps,
          "training Fsc " + fmt(fsc) + " after " + std::to_string(res.record.steps) + " steps (min " + fmt(kOverfitFsc) +
              "), " + fmt(elapsed, 3) + " s (limit " + fmt(kOverfitSeconds) + " s)"};
}

Outcome ablation_directions() {
  harness::SyntheticData d;
  d.width = 64;
  d.height = 64;
  d.train_frames = 24;
  d.val_frames = 16;
  d.difficulty = data::Difficulty::hard;
  const auto splits = harness::synthetic_splits(d, 7);
  const auto base = harness::Config::parse("model.stages = 3\nmodel.channels = 8,16,32\ntrain.epochs = 12\n");
  harness::AblationOptions opt;
  opt.seeds = {0, 1, 2};

  auto mean_of = [](const std::vector<harness::CellSummary>& rows, const std::string& cell) {
    for (const auto& r : rows)
      if (r.cell == cell) {
        if (!r.ok()) throw NumericalError("cell " + cell + " failed: " + r.errors.front());
        return r.mean_val_fsc;
      }
    throw ContractError("missing cell " + cell);
  };

  auto fusion = harness::fusion_grid();
  fusion.cells = {fusion.cells.front(), fusion.cells.back()};
  const auto fr = harness::ablate(base, fusion, splits.train, splits.val, opt);
  const double full = mean_of(fr, "full"), sum = mean_of(fr, "baseline_sum");

  auto lambda = harness::lambda_grid();
  harness::GridSpec pair{"lambda", {}};
  for (const auto& c : lambda.cells)
    if (c.name == "ls0_ld0" || c.name == "ls0.3_ld0.1") pair.cells.push_back(c);
  const auto lr = harness::ablate(base, pair, splits.train, splits.val, opt);
  const double tuned = mean_of(lr, "ls0.3_ld0.1"), none = mean_of(lr, "ls0_ld0");

  const auto rr = harness::ablate(base, harness::radius_grid(), splits.train, splits.val, opt);
  int r7_rank = 0;
  std::string ranking;
  for (std::size_t i = 0; i < rr.size(); ++i) {
    if (rr[i].cell == "r7") r7_rank = static_cast<int>(i) + 1;
    ranking += (i ? " > " : "") + rr[i].cell + " " + fmt(rr[i].mean_val_fsc);
  }

  const bool fusion_ok = full >= sum, lambda_ok = tuned >= none, radius_ok = r7_rank >= 1 && r7_rank <= 2;
  std::ostringstream os;
  os << "full " << fmt(full) << (fusion_ok ? " >= " : " < ") << "baseline_sum " << fmt(sum) << " ["
     << (fusion_ok ? "ok" : "violated") << "]; (0.3,0.1) " << fmt(tuned) << (lambda_ok ? " >= " : " < ") << "(0,0) "
     << fmt(none) << " [" << (lambda_ok ? "ok" : "violated") << "]; r7 rank " << r7_rank << " of " << rr.size() << " ["
     << (radius_ok ? "ok" : "violated") << "]: " << ranking;
  return {fusion_ok && lambda_ok && radius_ok, os.str()};
}

Outcome determinism_and_persistence() {
  harness::SyntheticData d;
  d.width = 32;
  d.height = 32;
  d.train_frames = 6;
  d.val_frames = 3;
  const auto splits = harness::synthetic_splits(d, 11);
  const auto cfg = harness::train_config_from(harness::Config::parse(
      "seed = 5\nmodel.stages = 3\nmodel.channels = 4,8,16\nmodel.patch = 2\ntrain.epochs = 4\ntrain.augment = true\n"));
  const auto dir = fs::temp_directory_path() / "roadseg_acceptance_ckpt";
  fs::remove_all(dir);
  harness::TrainOptions opt;
  opt.out_dir = dir;
  const auto a = harness::train(cfg, splits.train, splits.val, opt);
  const auto b = harness::train(cfg, splits.train, splits.val);
  const bool same_losses = a.record.losses() == b.record.losses();

  const auto loaded = model::load_state<harness::Scalar>(a.record.checkpoint_path);
  bool bitwise = loaded.config == a.state.config;
  for (const auto& f : splits.val) {
    const auto before = model::forward<harness::Scalar>(f.rgb, f.depth, f.intrinsics, a.state);
    const auto after = model::forward<harness::Scalar>(f.rgb, f.depth, f.intrinsics, loaded);
    bitwise = bitwise && before == after;
  }
  fs::remove_all(dir);
  return {same_losses && bitwise, std::string("losses over ") + std::to_string(a.record.epochs.size()) + " epochs " +
                                      (same_losses ? "identical" : "DIFFER") + ", checkpoint forward " +
                                      (bitwise ? "bitwise equal" : "DIFFERS")};
}

}  // namespace

int main() {
  std::cout << std::unitbuf;
  report(1, "formula oracle suite", oracle_suite);
  report(2, "transition weight limits", transition_limits);
  report(3, "depth inconsistency flat-ground invariant", depth_invariant);
  report(4, "affinity volume bounds", affinity_bounds);
  report(5, "gradient checks", gradient_checks);
  report(6, "decoder cost ordering", decoder_ordering);
  report(7, "toy overfit", toy_overfit);
  report(8, "paired ablation directions", ablation_directions);
  report(9, "determinism and persistence", determinism_and_persistence);
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " of 9 criteria failing" << std::endl;
  return failures ? 1 : 0;
}
