// Command-line driver: train, eval, ablate, weights, decoder-stats, render.
//
// Exit codes: 0 success, 2 contract/format errors, 3 numerical aborts.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/harness.hpp"

namespace fs = std::filesystem;
using namespace roadseg;

namespace {

constexpr int kExitContract = 2;
constexpr int kExitNumerical = 3;

struct CommonFlags {
  std::string config;
  std::string data_root;
  std::string out_dir = "out";
  std::vector<std::string> ablations;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Seed (overrides the config)");
  cmd->add_option("--data-root", f.data_root, "Dataset root (rgb/, depth/, label/, calib/); synthetic if omitted");
  cmd->add_option("--out-dir", f.out_dir, "Output directory");
  cmd->add_option("--ablation", f.ablations, "KEY=VALUE override, repeatable");
}

harness::Config resolve_config(const CommonFlags& f) {
  harness::Config c;
  if (!f.config.empty()) c = harness::Config::load(f.config);
  for (const auto& a : f.ablations) c.set(a);
  if (f.seed >= 0) c.set("seed", std::to_string(f.seed));
  harness::check_known_keys(c);
  return c;
}

/// A root holding train/ and val/ subsets, or a single dataset used for training only.
harness::Splits load_splits(const CommonFlags& f, const harness::Config& c) {
  if (f.data_root.empty()) {
    const auto seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    return harness::synthetic_splits(harness::synthetic_data_from(c), seed);
  }
  const fs::path root(f.data_root);
  if (!fs::is_directory(root)) throw ContractError("data root " + root.string() + " is not a directory");
  harness::Splits s;
  if (fs::is_directory(root / "train")) {
    s.train = data::load_dataset(root / "train");
    if (fs::is_directory(root / "val")) s.val = data::load_dataset(root / "val");
  } else {
    s.train = data::load_dataset(root);
  }
  if (s.train.empty()) throw ContractError("no complete frames under " + root.string());
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void write_report(const fs::path& dir, const harness::EvalReport& rep) {
  std::ostringstream table, kv;
  harness::write_report_table(table, rep);
  harness::write_report_kv(kv, rep);
  write_text(dir / "metrics.txt", table.str());
  write_text(dir / "metrics.kv", kv.str());
  std::cout << table.str();
}

int run_train(const CommonFlags& f) {
  const auto cfg = resolve_config(f);
  const auto tc = harness::train_config_from(cfg);
  const auto splits = load_splits(f, cfg);
  fs::create_directories(f.out_dir);
  std::cout << "training on " << splits.train.size() << " frames, validating on " << splits.val.size() << '\n';
  harness::TrainOptions opt;
  opt.out_dir = fs::path(f.out_dir);
  opt.log = &std::cout;
  const auto res = harness::train(tc, splits.train, splits.val, opt);
  std::cout << "checkpoint " << res.record.checkpoint_path << '\n';
  if (!splits.val.empty()) write_report(f.out_dir, harness::evaluate(res.state, splits.val));
  return 0;
}

int run_eval(const CommonFlags& f, const std::string& checkpoint, bool per_frame) {
  const auto cfg = resolve_config(f);
  const auto state = model::load_state<harness::Scalar>(checkpoint);
  auto splits = load_splits(f, cfg);
  // Synthetic evaluation uses the held-out split; a plain dataset root is evaluated whole.
  const auto& frames = f.data_root.empty() || !splits.val.empty() ? splits.val : splits.train;
  fs::create_directories(f.out_dir);
  std::ofstream csv;
  if (per_frame) csv.open(fs::path(f.out_dir) / "frames.csv");
  const auto rep = harness::evaluate(state, frames, per_frame ? &csv : nullptr);
  write_report(f.out_dir, rep);
  return 0;
}

int run_ablate(const CommonFlags& f, const std::string& grid_name, const std::vector<std::uint64_t>& seeds) {
  const auto cfg = resolve_config(f);
  harness::train_config_from(cfg);  // fail fast on a bad base config
  const auto grid = harness::grid_by_name(grid_name);
  const auto splits = load_splits(f, cfg);
  fs::create_directories(f.out_dir);
  harness::AblationOptions opt;
  opt.seeds = seeds;
  opt.out_dir = fs::path(f.out_dir);
  opt.log = &std::cout;
  const auto rows = harness::ablate(cfg, grid, splits.train, splits.val, opt);
  std::ostringstream table, kv;
  harness::write_ablation_table(table, rows);
  kv << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    kv << "rank." << i + 1 << '=' << r.cell << '\n'
       << r.cell << ".val_fsc=" << r.mean_val_fsc << '\n'
       << r.cell << ".params=" << r.params << '\n'
       << r.cell << ".decoder_params=" << r.decoder_params << '\n'
       << r.cell << ".decoder_flops=" << r.decoder_flops << '\n'
       << r.cell << ".status=" << (r.ok() ? "ok" : "failed") << '\n';
  }
  write_text(fs::path(f.out_dir) / "ablation.txt", table.str());
  write_text(fs::path(f.out_dir) / "ablation.kv", kv.str());
  std::cout << table.str();
  return 0;
}

io::PngImage weight_png(const Grid<double>& w) {
  io::PngImage img{w.width(), w.height(), 1, 8, {}};
  img.samples.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    img.samples[i] = static_cast<std::uint16_t>(std::lround(255.0 * std::clamp(w[i], 0.0, 1.0)));
  return img;
}

std::string stats_line(const std::string& name, const Grid<double>& w) {
  const auto& v = w.values();
  double sum = 0.0;
  for (double x : v) sum += x;
  std::ostringstream os;
  os << std::setprecision(6) << name << " min=" << *std::min_element(v.begin(), v.end())
     << " mean=" << sum / static_cast<double>(v.size()) << " max=" << *std::max_element(v.begin(), v.end());
  return os.str();
}

int run_weights(const std::string& label_path, const std::string& depth_path, const std::string& calib_path,
                const std::string& prediction_path, int radius, const std::string& out_dir) {
  const auto label = data::read_label_png(label_path);
  const auto depth = data::read_depth_png(depth_path);
  const auto k = geometry::read_intrinsics(calib_path);
  require_same_size(label, depth.values, "weights: label/depth");
  k.validate(label.height(), label.width());

  geometry::PixelSet freespace;
  if (!prediction_path.empty()) {
    const auto pred = io::read_png(prediction_path);
    if (pred.channels != 1 || pred.width != label.width() || pred.height != label.height())
      throw ContractError("weights: prediction must be a single-channel image the size of the label");
    const double full = pred.bit_depth == 16 ? 65535.0 : 255.0;
    for (int v = 0; v < pred.height; ++v)
      for (int u = 0; u < pred.width; ++u)
        if (pred.at(v, u) / full > 0.5 && depth.is_valid(v, u)) freespace.pixels.push_back({u, v});
  } else {
    for (int v = 0; v < label.height(); ++v)
      for (int u = 0; u < label.width(); ++u)
        if (label.at(v, u) && depth.is_valid(v, u)) freespace.pixels.push_back({u, v});
  }

  fs::create_directories(out_dir);
  const auto ws = losses::semantic_transition_weights(label, radius);
  io::write_png((fs::path(out_dir) / "omega_s.png").string(), weight_png(ws.values));
  std::cout << stats_line("omega_s", ws.values) << '\n';

  const auto y_hat = geometry::camera_height(freespace, depth, k);
  if (!y_hat) {
    std::cerr << "warning: no freespace pixel with valid depth; omega_d not written\n";
    return 0;
  }
  const auto wd = geometry::depth_inconsistency_weights(depth, k, *y_hat);
  io::write_png((fs::path(out_dir) / "omega_d.png").string(), weight_png(wd.values));
  std::cout << stats_line("omega_d", wd.values) << " camera_height=" << *y_hat << '\n';
  return 0;
}

int run_decoder_stats(const std::string& topology, int stages, const std::vector<int>& channels_in, int height,
                      int width, const std::string& block, const std::string& out_dir) {
  std::vector<int> channels = channels_in;
  if (channels.empty())
    for (int i = 0; i < stages; ++i) channels.push_back(16 << i);
  std::vector<decoder::Topology> tops;
  if (topology == "all") tops = {decoder::Topology::roadsegv2, decoder::Topology::unetpp, decoder::Topology::unet3p};
  else tops = {decoder::parse_topology(topology)};
  decoder::BuildOptions bo;
  if (block == "basic") bo.block = decoder::BlockKind::basic;
  else if (block == "ds") bo.block = decoder::BlockKind::depthwise_separable;
  else if (block != "default") throw ContractError("--block must be default, basic or ds");

  std::ostringstream table, kv;
  table << std::left << std::setw(12) << "topology" << std::setw(8) << "nodes" << std::setw(8) << "edges"
        << std::setw(14) << "params" << "flops\n";
  for (auto t : tops) {
    const auto g = decoder::build_topology(t, stages, channels, bo);
    const auto cost = decoder::cost_report(g, height, width);
    const auto name = decoder::to_string(t);
    table << std::left << std::setw(12) << name << std::setw(8) << g.nodes.size() << std::setw(8) << g.edges.size()
          << std::setw(14) << cost.params << cost.flops << '\n';
    kv << name << ".nodes=" << g.nodes.size() << '\n'
       << name << ".edges=" << g.edges.size() << '\n'
       << name << ".params=" << cost.params << '\n'
       << name << ".flops=" << cost.flops << '\n';
  }
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "decoder_stats.txt", table.str());
  write_text(fs::path(out_dir) / "decoder_stats.kv", kv.str());
  std::cout << table.str();
  return 0;
}

int run_render(long long seed, std::size_t count, const std::string& difficulty, int width, int height,
               const std::string& out_dir) {
  data::Difficulty d;
  if (difficulty == "hard") d = data::Difficulty::hard;
  else if (difficulty == "easy") d = data::Difficulty::easy;
  else throw ContractError("--difficulty must be easy or hard");
  if (seed < 0) seed = 0;
  const auto frames = data::make_split(static_cast<std::uint64_t>(seed), count, d, width, height);
  for (const auto& s : frames) data::save_sample(out_dir, s);
  std::cout << "wrote " << frames.size() << " frames to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Freespace detection from RGB-D: training, evaluation and diagnostics"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, ablate_f;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(train, train_f);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, eval_f);
  std::string checkpoint;
  bool per_frame = false;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_flag("--per-frame", per_frame, "Also write frames.csv");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  add_common(ablate, ablate_f);
  std::string grid = "fusion";
  std::vector<std::uint64_t> seeds{0};
  ablate->add_option("--grid", grid, "fusion, lambda, radius or decoder");
  ablate->add_option("--seeds", seeds, "Seeds per cell")->delimiter(',');

  auto* weights = app.add_subcommand("weights", "Write the transition and depth-inconsistency weight maps");
  std::string label, depth, calib, prediction, weights_out = "out";
  int radius = 7;
  weights->add_option("--label", label, "Label PNG")->required()->check(CLI::ExistingFile);
  weights->add_option("--depth", depth, "16-bit depth PNG")->required()->check(CLI::ExistingFile);
  weights->add_option("--calib", calib, "Intrinsics text file")->required()->check(CLI::ExistingFile);
  weights->add_option("--prediction", prediction, "Probability PNG; labels are used when omitted")
      ->check(CLI::ExistingFile);
  weights->add_option("--radius", radius, "Neighbourhood radius")->check(CLI::PositiveNumber);
  weights->add_option("--out-dir", weights_out, "Output directory");

  auto* stats = app.add_subcommand("decoder-stats", "Report decoder parameter and FLOP counts");
  std::string topology = "all", block = "default", stats_out = "out";
  int stages = 4, height = 32, width = 32;
  std::vector<int> channels;
  stats->add_option("--topology", topology, "roadsegv2, unetpp, unet3p or all");
  stats->add_option("--stages", stages, "Decoder levels");
  stats->add_option("--channels", channels, "Channel schedule, finest first")->delimiter(',');
  stats->add_option("--height", height, "Finest-level feature height");
  stats->add_option("--width", width, "Finest-level feature width");
  stats->add_option("--block", block, "default, basic or ds");
  stats->add_option("--out-dir", stats_out, "Output directory");

  auto* render = app.add_subcommand("render", "Render a synthetic dataset to disk");
  long long render_seed = 0;
  std::size_t count = 8;
  std::string difficulty = "easy", render_out = "out";
  int render_w = 128, render_h = 128;
  render->add_option("--seed", render_seed, "Scene seed");
  render->add_option("--count", count, "Number of frames");
  render->add_option("--difficulty", difficulty, "easy or hard");
  render->add_option("--width", render_w, "Image width");
  render->add_option("--height", render_h, "Image height");
  render->add_option("--out-dir", render_out, "Dataset root to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitContract;
  }

  try {
    if (*train) return run_train(train_f);
    if (*eval) return run_eval(eval_f, checkpoint, per_frame);
    if (*ablate) return run_ablate(ablate_f, grid, seeds);
    if (*weights) return run_weights(label, depth, calib, prediction, radius, weights_out);
    if (*stats) return run_decoder_stats(topology, stages, channels, height, width, block, stats_out);
    if (*render) return run_render(render_seed, count, difficulty, render_w, render_h, render_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
