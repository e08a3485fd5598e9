#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/data.hpp"
#include "roadseg/losses.hpp"
#include "roadseg/metrics.hpp"
#include "roadseg/model.hpp"

namespace roadseg::harness {

// ---------------------------------------------------------------------------
// Flat key=value configuration with dotted keys

class Config {
 public:
  /// Lines of `key = value`; blank lines and `#` comments are ignored.
  static Config parse(const std::string& text, const std::string& origin = "config") {
    Config c;
    std::istringstream is(text);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      try {
        c.set(line);
      } catch (const ContractError& e) {
        throw ContractError(origin + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  /// Applies one `key=value` assignment; later assignments win.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ContractError("expected key=value, got '" + assignment + "'");
    const std::string key = normalize_key(trim(assignment.substr(0, eq)));
    if (key.empty()) throw ContractError("empty key in '" + assignment + "'");
    values_[key] = trim(assignment.substr(eq + 1));
  }
  void set(const std::string& key, const std::string& value) { set(key + "=" + value); }

  void merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(normalize_key(key)) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(normalize_key(key));
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    return convert<double>(key, fallback, [](const std::string& s, std::size_t* pos) { return std::stod(s, pos); });
  }
  long long get_int(const std::string& key, long long fallback) const {
    return convert<long long>(key, fallback, [](const std::string& s, std::size_t* pos) { return std::stoll(s, pos); });
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(normalize_key(key));
    if (it == values_.end()) return fallback;
    const auto& v = it->second;
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ContractError("config key '" + key + "': expected a boolean, got '" + v + "'");
  }
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const {
    auto it = values_.find(normalize_key(key));
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    std::istringstream is(it->second);
    for (std::string part; std::getline(is, part, ',');) {
      try {
        std::size_t pos = 0;
        const std::string t = trim(part);
        out.push_back(std::stoi(t, &pos));
        if (pos != t.size()) throw std::invalid_argument(t);
      } catch (const std::logic_error&) {
        throw ContractError("config key '" + key + "': expected a comma-separated integer list, got '" + it->second + "'");
      }
    }
    return out;
  }

  /// `fusion.hfcd.enabled` and `hfcd.enabled` name the same switch.
  static std::string normalize_key(const std::string& key) {
    static const std::set<std::string> switches{"ham.spatial", "ham.channel", "ham.atrous", "hfcd.enabled",
                                                "awfr.enabled"};
    const std::string prefix = "fusion.";
    if (key.rfind(prefix, 0) == 0 && switches.count(key.substr(prefix.size()))) return key.substr(prefix.size());
    return key;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }

  template <class V, class F>
  V convert(const std::string& key, V fallback, F&& parse) const {
    auto it = values_.find(normalize_key(key));
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      V v = parse(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::logic_error&) {
      throw ContractError("config key '" + key + "': cannot parse '" + it->second + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "seed",           "train.lr",        "train.decay",        "train.decay_every",
      "train.epochs",   "train.patience",  "train.batch_size",   "train.max_steps",
      "train.augment",  "loss.lambda_s",   "loss.lambda_d",      "loss.radius",
      "loss.eps",       "loss.reduction",  "loss.depth_from_labels", "loss.height_estimator",
      "model.stages",   "model.channels",  "model.patch",        "model.decoder",
      "model.inter_scale_all_columns",     "ham.spatial",        "ham.channel",
      "ham.atrous",     "hfcd.enabled",    "awfr.enabled",       "fusion.baseline_sum",
      "data.width",     "data.height",     "data.train_frames",  "data.val_frames",
      "data.difficulty"};
  return keys;
}

inline void check_known_keys(const Config& c) {
  for (const auto& [k, v] : c.values())
    if (!known_keys().count(k)) throw ContractError("unknown config key '" + k + "'");
}

// ---------------------------------------------------------------------------
// Training configuration

struct TrainConfig {
  double lr = 1e-3;
  double decay = 0.5;
  int decay_every = 20;  // epochs
  int epochs = 100;
  int patience = 10;
  int batch_size = 1;
  std::int64_t max_steps = 0;  // 0 = no step limit
  bool augment = false;
  std::uint64_t seed = 0;
  losses::LossConfig loss{};
  model::ModelConfig model{};

  void validate() const {
    if (!(lr > 0.0)) throw ContractError("train: learning rate must be positive");
    if (!(decay > 0.0 && decay <= 1.0)) throw ContractError("train: decay factor must lie in (0, 1]");
    if (decay_every < 1) throw ContractError("train: decay interval must be >= 1 epoch");
    if (epochs < 1) throw ContractError("train: max epochs must be >= 1");
    if (patience < 1) throw ContractError("train: patience must be >= 1");
    if (batch_size < 1) throw ContractError("train: batch size must be >= 1");
    if (max_steps < 0) throw ContractError("train: max_steps must be >= 0");
    loss.validate();
    model.validate();
  }
};

inline model::ModelConfig model_config_from(const Config& c, std::uint64_t seed) {
  model::ModelConfig m;
  m.stages = static_cast<int>(c.get_int("model.stages", m.stages));
  if (c.has("model.channels")) {
    m.channels = c.get_int_list("model.channels", {});
  } else if (c.has("model.stages")) {
    m.channels.clear();
    for (int i = 0; i < m.stages; ++i) m.channels.push_back(16 << i);
  }
  m.patch = static_cast<int>(c.get_int("model.patch", m.patch));
  try {
    m.decoder = decoder::parse_topology(c.get_string("model.decoder", decoder::to_string(m.decoder)));
  } catch (const std::exception& e) {
    throw ContractError(std::string("model.decoder: ") + e.what());
  }
  m.inter_scale_all_columns = c.get_bool("model.inter_scale_all_columns", m.inter_scale_all_columns);
  m.fusion.spatial = c.get_bool("ham.spatial", true);
  m.fusion.channel = c.get_bool("ham.channel", true);
  m.fusion.atrous = c.get_bool("ham.atrous", true);
  m.fusion.hfcd = c.get_bool("hfcd.enabled", true);
  m.fusion.awfr = c.get_bool("awfr.enabled", true);
  m.fusion.baseline_sum = c.get_bool("fusion.baseline_sum", false);
  m.seed = seed;
  m.validate();
  return m;
}

inline TrainConfig train_config_from(const Config& c) {
  check_known_keys(c);
  TrainConfig t;
  const long long seed = c.get_int("seed", 0);
  if (seed < 0) throw ContractError("seed must be nonnegative");
  t.seed = static_cast<std::uint64_t>(seed);
  t.lr = c.get_double("train.lr", t.lr);
  t.decay = c.get_double("train.decay", t.decay);
  t.decay_every = static_cast<int>(c.get_int("train.decay_every", t.decay_every));
  t.epochs = static_cast<int>(c.get_int("train.epochs", t.epochs));
  t.patience = static_cast<int>(c.get_int("train.patience", t.patience));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
  t.max_steps = c.get_int("train.max_steps", t.max_steps);
  t.augment = c.get_bool("train.augment", t.augment);
  t.loss.lambda_s = c.get_double("loss.lambda_s", t.loss.lambda_s);
  t.loss.lambda_d = c.get_double("loss.lambda_d", t.loss.lambda_d);
  t.loss.radius = static_cast<int>(c.get_int("loss.radius", t.loss.radius));
  t.loss.eps = c.get_double("loss.eps", t.loss.eps);
  const std::string red = c.get_string("loss.reduction", "sum");
  if (red == "sum") t.loss.reduction = losses::Reduction::sum;
  else if (red == "mean") t.loss.reduction = losses::Reduction::mean;
  else throw ContractError("loss.reduction must be 'sum' or 'mean', got '" + red + "'");
  t.loss.depth_from_labels = c.get_bool("loss.depth_from_labels", false);
  const std::string est = c.get_string("loss.height_estimator", "mean");
  if (est == "mean") t.loss.height_estimator = geometry::HeightEstimator::mean;
  else if (est == "median") t.loss.height_estimator = geometry::HeightEstimator::median;
  else throw ContractError("loss.height_estimator must be 'mean' or 'median', got '" + est + "'");
  t.model = model_config_from(c, t.seed);
  t.validate();
  return t;
}

/// Synthetic dataset settings used when no data root is given.
struct SyntheticData {
  int width = 128;
  int height = 128;
  std::size_t train_frames = 160;
  std::size_t val_frames = 40;
  data::Difficulty difficulty = data::Difficulty::hard;
};

inline SyntheticData synthetic_data_from(const Config& c) {
  SyntheticData d;
  d.width = static_cast<int>(c.get_int("data.width", d.width));
  d.height = static_cast<int>(c.get_int("data.height", d.height));
  const long long tr = c.get_int("data.train_frames", static_cast<long long>(d.train_frames));
  const long long va = c.get_int("data.val_frames", static_cast<long long>(d.val_frames));
  if (d.width <= 0 || d.height <= 0 || tr <= 0 || va < 0) throw ContractError("data: sizes and frame counts must be positive");
  d.train_frames = static_cast<std::size_t>(tr);
  d.val_frames = static_cast<std::size_t>(va);
  const std::string diff = c.get_string("data.difficulty", "hard");
  if (diff == "hard") d.difficulty = data::Difficulty::hard;
  else if (diff == "easy") d.difficulty = data::Difficulty::easy;
  else throw ContractError("data.difficulty must be 'easy' or 'hard', got '" + diff + "'");
  return d;
}

struct Splits {
  std::vector<data::Sample> train;
  std::vector<data::Sample> val;
};

/// Disjoint synthetic splits: training frames come from `seed`, validation from a derived seed.
inline Splits synthetic_splits(const SyntheticData& d, std::uint64_t seed) {
  Splits s;
  s.train = data::make_split(seed, d.train_frames, d.difficulty, d.width, d.height);
  s.val = data::make_split(seed ^ 0x5A5A5A5A5A5A5A5Aull, d.val_frames, d.difficulty, d.width, d.height);
  for (auto& v : s.val) v.stem = "val_" + v.stem;
  return s;
}

/// Mean semantic-transition weight over every pixel of a split.
inline double mean_transition_weight(const std::vector<data::Sample>& samples, int radius) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const auto w = losses::semantic_transition_weights(s.label, radius);
    for (double v : w.values.values()) sum += v;
    n += w.values.size();
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// lr at 1-based `epoch`: base * decay^floor((epoch - 1) / interval).
inline double lr_at_epoch(const TrainConfig& c, int epoch) {
  require(epoch >= 1, "lr_at_epoch: epochs are numbered from 1");
  return c.lr * std::pow(c.decay, (epoch - 1) / c.decay_every);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias-corrected moments (beta1 0.9, beta2 0.999, eps 1e-8).
template <class T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit Adam(std::vector<Var<T>> params) : params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape(), T(0));
      v_.emplace_back(p.shape(), T(0));
    }
  }

  /// One update from the accumulated gradients; parameters without a gradient are left alone.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.node()->grad.empty()) continue;
      const auto& g = p.grad();
      auto& w = p.mutable_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = static_cast<T>(beta1 * m[j] + (1.0 - beta1) * gj);
        v[j] = static_cast<T>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] = static_cast<T>(w[j] - lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

using Scalar = float;
using State = model::ModelState<Scalar>;

struct EvalReport {
  std::size_t frames = 0;
  metrics::ConfusionCounts counts;
  std::map<std::string, double> values;  // acc pre rec fsc iou fpr fnr maxf ap

  double fsc() const { return values.at("fsc"); }
};

inline void check_input_shapes(const State& s, const std::vector<data::Sample>& samples) {
  for (const auto& f : samples) {
    try {
      s.config.validate_input(f.height(), f.width());
    } catch (const ContractError& e) {
      throw ContractError("frame '" + f.stem + "': " + e.what());
    }
  }
}

/// Aggregated metrics over `samples`; a per-frame CSV is written when `csv` is given.
inline EvalReport evaluate(const State& s, const std::vector<data::Sample>& samples, std::ostream* csv = nullptr) {
  if (samples.empty()) throw ContractError("evaluate: dataset is empty");
  check_input_shapes(s, samples);
  metrics::Accumulator acc;
  if (csv) *csv << "stem,acc,pre,rec,fsc,iou\n";
  for (const auto& f : samples) {
    const auto p = model::forward<Scalar>(f.rgb, f.depth, f.intrinsics, s);
    acc.add(p, f.label);
    if (csv) {
      const auto m = metrics::point_metrics(metrics::confusion(p, f.label, 0.5));
      *csv << f.stem << ',' << m.acc << ',' << m.pre << ',' << m.rec << ',' << m.fsc << ',' << m.iou << '\n';
    }
  }
  EvalReport r;
  r.frames = acc.frames();
  r.counts = acc.counts();
  r.values = acc.report();
  return r;
}

inline void write_report_table(std::ostream& os, const EvalReport& r) {
  os << "frames " << r.frames << '\n';
  os << std::left << std::setw(8) << "metric" << "value\n";
  for (const char* k : {"maxf", "ap", "acc", "pre", "rec", "fsc", "iou", "fpr", "fnr"})
    os << std::left << std::setw(8) << k << std::fixed << std::setprecision(6) << r.values.at(k) << '\n';
  os.unsetf(std::ios::fixed);
}

inline void write_report_kv(std::ostream& os, const EvalReport& r) {
  os << "frames=" << r.frames << '\n'
     << "tp=" << r.counts.tp << "\nfp=" << r.counts.fp << "\ntn=" << r.counts.tn << "\nfn=" << r.counts.fn << '\n';
  os << std::setprecision(17);
  for (const auto& [k, v] : r.values) os << k << '=' << v << '\n';
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean per-frame loss over the epoch
  std::optional<double> val_fsc;
  std::map<std::string, double> val_metrics;
  double wall_seconds = 0.0;
  int depth_term_skipped = 0;  // frames without predicted freespace
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::int64_t steps = 0;
  int best_epoch = 0;
  double best_val_fsc = -1.0;
  bool stopped_early = false;
  std::string checkpoint_path;
  std::uint64_t dataset_hash = 0;

  std::vector<double> losses() const {
    std::vector<double> l;
    for (const auto& e : epochs) l.push_back(e.train_loss);
    return l;
  }
};

struct TrainResult {
  RunRecord record;
  State state;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoint and logs
  std::ostream* log = nullptr;
};

namespace detail {
inline std::uint64_t frame_hash(const data::Sample& s) { return data::dataset_hash({s}); }

inline void check_disjoint(const std::vector<data::Sample>& train, const std::vector<data::Sample>& val) {
  std::set<std::uint64_t> seen;
  for (const auto& s : train) seen.insert(frame_hash(s));
  for (const auto& s : val)
    if (seen.count(frame_hash(s)) && std::any_of(train.begin(), train.end(), [&](const auto& t) { return t == s; }))
      throw ContractError("train: validation frame '" + s.stem + "' also appears in the training split");
}

inline Grid<double> logits_grid(const Var<Scalar>& logits) {
  const auto& v = logits.value();
  Grid<double> g(v.height(), v.width());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(v[i]);
  return g;
}

inline void write_record(std::ostream& os, const RunRecord& r) {
  os << std::setprecision(17);
  os << "steps=" << r.steps << "\nbest_epoch=" << r.best_epoch << "\nbest_val_fsc=" << r.best_val_fsc
     << "\nstopped_early=" << r.stopped_early << "\ncheckpoint=" << r.checkpoint_path
     << "\ndataset_hash=" << r.dataset_hash << '\n';
  for (const auto& e : r.epochs) {
    os << "epoch." << e.epoch << ".lr=" << e.lr << '\n' << "epoch." << e.epoch << ".train_loss=" << e.train_loss << '\n';
    if (e.val_fsc) os << "epoch." << e.epoch << ".val_fsc=" << *e.val_fsc << '\n';
    os << "epoch." << e.epoch << ".wall_seconds=" << e.wall_seconds << '\n';
  }
}
}  // namespace detail

/// Trains from scratch. With a nonempty validation split the best-Fsc epoch is
/// restored at the end and training stops after `patience` epochs without
/// improvement; without one the final state is kept.
inline TrainResult train(const TrainConfig& cfg, const std::vector<data::Sample>& train_set,
                         const std::vector<data::Sample>& val_set, const TrainOptions& opt = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: training split is empty");
  detail::check_disjoint(train_set, val_set);
  for (const auto& s : train_set) s.validate();

  TrainResult res{{}, State::init(cfg.model)};
  State& state = res.state;
  check_input_shapes(state, train_set);
  check_input_shapes(state, val_set);
  res.record.dataset_hash = data::dataset_hash(train_set);

  std::vector<Var<Scalar>> params;
  state.visit([&](const std::string&, Var<Scalar>& v) { params.push_back(v); });
  Adam<Scalar> adam(params);

  // Inputs are constants of the run unless augmentation re-samples them.
  std::vector<model::ModelInput<Scalar>> cached;
  if (!cfg.augment)
    for (const auto& s : train_set) cached.push_back(model::prepare_input<Scalar>(s));

  std::ofstream log_file;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    log_file.open(*opt.out_dir / "train.log");
  }
  auto log = [&](const std::string& line) {
    if (opt.log) *opt.log << line << '\n';
    if (log_file) log_file << line << '\n';
  };

  std::optional<State> best;
  int since_best = 0;
  std::mt19937_64 order_rng(cfg.seed ^ 0xD1B54A32D192ED03ull);
  std::vector<std::size_t> order(train_set.size());
  bool out_of_steps = false;

  for (int epoch = 1; epoch <= cfg.epochs && !out_of_steps; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr_at_epoch(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t frames = 0;

    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && res.record.steps >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
      const std::size_t batch_index = b / static_cast<std::size_t>(cfg.batch_size);
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      state.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const std::size_t idx = order[i];
        const data::Sample* frame = &train_set[idx];
        data::Sample aug;
        model::ModelInput<Scalar> in;
        if (cfg.augment) {
          const std::uint64_t aseed = cfg.seed * 1000003ull + static_cast<std::uint64_t>(res.record.steps) * 131ull + i;
          std::vector<data::AugmentOp> ops{{data::AugmentKind::brightness, {}}};
          if (aseed % 2) ops.push_back({data::AugmentKind::hflip, {}});
          aug = data::augment(*frame, ops, aseed);
          frame = &aug;
          in = model::prepare_input<Scalar>(aug);
        } else {
          in = cached[idx];
        }
        Var<Scalar> logits;
        try {
          logits = model::forward_logits(in, state);
        } catch (const NumericalError& e) {
          throw NumericalError("forward pass failed at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_index) + " (frame '" + frame->stem + "'): " + e.what());
        }
        const auto lr = losses::total_loss_logits(detail::logits_grid(logits), frame->label, frame->depth,
                                                  frame->intrinsics, cfg.loss);
        if (!std::isfinite(lr.terms.total)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index << " (frame '" << frame->stem
              << "', index " << idx << "): bce=" << lr.terms.bce << " sta=" << lr.terms.sta << " dia=" << lr.terms.dia;
          throw NumericalError(msg.str());
        }
        if (lr.terms.dia_skipped) ++er.depth_term_skipped;
        loss_sum += lr.terms.total;
        ++frames;
        Tensor<Scalar> seed(logits.shape());
        const double inv = 1.0 / static_cast<double>(end - b);
        for (std::size_t j = 0; j < seed.size(); ++j) seed[j] = static_cast<Scalar>(lr.grad[j] * inv);
        backward(logits, seed);
      }
      for (const auto& p : params)
        if (!p.node()->grad.empty())
          for (Scalar g : p.grad().values())
            if (!std::isfinite(g))
              throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
      adam.step(er.lr);
      ++res.record.steps;
      ++state.step;
    }
    if (frames == 0) break;
    er.train_loss = loss_sum / static_cast<double>(frames);
    if (er.depth_term_skipped)
      log("warning: epoch " + std::to_string(epoch) + ": depth term skipped on " +
          std::to_string(er.depth_term_skipped) + " frame(s) without predicted freespace");

    if (!val_set.empty()) {
      const auto rep = evaluate(state, val_set);
      er.val_metrics = rep.values;
      er.val_fsc = rep.fsc();
      if (*er.val_fsc > res.record.best_val_fsc) {
        res.record.best_val_fsc = *er.val_fsc;
        res.record.best_epoch = epoch;
        best = state.clone();
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    er.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
      std::ostringstream line;
      line << "epoch " << epoch << " lr " << er.lr << " loss " << std::setprecision(9) << er.train_loss;
      if (er.val_fsc) line << " val_fsc " << *er.val_fsc;
      line << " steps " << res.record.steps << " time " << std::setprecision(3) << er.wall_seconds << "s";
      log(line.str());
    }
    res.record.epochs.push_back(std::move(er));
    if (!val_set.empty() && since_best >= cfg.patience) {
      res.record.stopped_early = true;
      log("early stop: no validation improvement for " + std::to_string(cfg.patience) + " epochs");
      break;
    }
  }

  if (best) {
    const auto steps = state.step;
    state = std::move(*best);
    state.step = steps;
    if (res.record.best_epoch != static_cast<int>(res.record.epochs.size()))
      log("restored best epoch " + std::to_string(res.record.best_epoch));
  } else if (res.record.best_epoch == 0 && !res.record.epochs.empty()) {
    res.record.best_epoch = res.record.epochs.back().epoch;
  }

  if (opt.out_dir) {
    const auto ckpt = *opt.out_dir / "model.ckpt";
    model::save_state(state, ckpt);
    res.record.checkpoint_path = ckpt.string();
    std::ofstream rec(*opt.out_dir / "run.txt");
    detail::write_record(rec, res.record);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct GridCell {
  std::string name;
  std::vector<std::string> overrides;  // key=value assignments on top of the base config
};

struct GridSpec {
  std::string name;
  std::vector<GridCell> cells;
};

/// Component removal table for the fusion block.
inline GridSpec fusion_grid() {
  return {"fusion",
          {{"full", {}},
           {"no_spatial", {"ham.spatial=false"}},
           {"no_channel", {"ham.channel=false"}},
           {"no_atrous", {"ham.atrous=false"}},
           {"no_hfcd", {"hfcd.enabled=false"}},
           {"no_awfr", {"awfr.enabled=false"}},
           {"baseline_sum", {"fusion.baseline_sum=true"}}}};
}

/// (lambda_S, lambda_D) with the sum held at 0.4, plus the (0, 0) origin.
inline GridSpec lambda_grid() {
  GridSpec g{"lambda", {}};
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"0", "0"}, {"0.4", "0"}, {"0.3", "0.1"}, {"0.2", "0.2"}, {"0.1", "0.3"}, {"0", "0.4"}};
  for (const auto& [s, d] : pairs)
    g.cells.push_back({"ls" + s + "_ld" + d, {"loss.lambda_s=" + s, "loss.lambda_d=" + d}});
  return g;
}

inline GridSpec radius_grid() {
  GridSpec g{"radius", {}};
  for (int r : {1, 3, 5, 7, 9, 11}) g.cells.push_back({"r" + std::to_string(r), {"loss.radius=" + std::to_string(r)}});
  return g;
}

inline GridSpec decoder_grid() {
  return {"decoder",
          {{"unetpp", {"model.decoder=unetpp"}},
           {"roadsegv2", {"model.decoder=roadsegv2"}},
           {"unet3p", {"model.decoder=unet3p"}}}};
}

inline GridSpec grid_by_name(const std::string& name) {
  if (name == "fusion") return fusion_grid();
  if (name == "lambda") return lambda_grid();
  if (name == "radius") return radius_grid();
  if (name == "decoder") return decoder_grid();
  throw ContractError("unknown ablation grid '" + name + "' (expected fusion, lambda, radius or decoder)");
}

struct CellSummary {
  std::string cell;
  std::vector<std::uint64_t> seeds;
  std::vector<double> val_fsc;  // per seed; NaN for failed runs
  double mean_val_fsc = 0.0;
  std::int64_t params = 0;
  std::int64_t decoder_flops = 0;
  std::int64_t decoder_params = 0;
  std::vector<std::string> errors;

  bool ok() const { return errors.empty(); }
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0};
  std::optional<std::filesystem::path> out_dir;  // per-cell logs
  std::ostream* log = nullptr;
};

/// One seeded run per (cell, seed). Failing cells are recorded and the grid
/// continues. Rows come back sorted by mean validation Fsc, best first.
inline std::vector<CellSummary> ablate(const Config& base, const GridSpec& grid, const std::vector<data::Sample>& train_set,
                                       const std::vector<data::Sample>& val_set, const AblationOptions& opt = {}) {
  if (grid.cells.empty()) throw ContractError("ablate: grid '" + grid.name + "' has no cells");
  if (opt.seeds.empty()) throw ContractError("ablate: at least one seed is required");
  if (val_set.empty()) throw ContractError("ablate: a validation split is required to rank cells");
  std::vector<CellSummary> rows;
  for (const auto& cell : grid.cells) {
    CellSummary row;
    row.cell = cell.name;
    double sum = 0.0;
    for (std::uint64_t seed : opt.seeds) {
      row.seeds.push_back(seed);
      try {
        Config c = base;
        for (const auto& o : cell.overrides) c.set(o);
        c.set("seed", std::to_string(seed));
        const TrainConfig tc = train_config_from(c);
        TrainOptions to;
        to.log = opt.log;
        if (opt.out_dir) to.out_dir = *opt.out_dir / (cell.name + "_seed" + std::to_string(seed));
        if (opt.log) *opt.log << "[" << grid.name << "/" << cell.name << " seed " << seed << "]\n";
        auto res = train(tc, train_set, val_set, to);
        row.val_fsc.push_back(res.record.best_val_fsc);
        sum += res.record.best_val_fsc;
        row.params = res.state.parameter_count();
        const auto& f0 = train_set.front();
        const int stride = tc.model.patch;
        const auto cost = decoder::cost_report(res.state.graph, f0.height() / stride, f0.width() / stride);
        row.decoder_params = cost.params;
        row.decoder_flops = cost.flops;
      } catch (const std::exception& e) {
        row.val_fsc.push_back(std::nan(""));
        row.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
        if (opt.log) *opt.log << "cell " << cell.name << " failed: " << e.what() << '\n';
      }
    }
    row.mean_val_fsc = row.ok() ? sum / static_cast<double>(opt.seeds.size()) : std::nan("");
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const CellSummary& a, const CellSummary& b) {
    if (a.ok() != b.ok()) return a.ok();
    return a.mean_val_fsc > b.mean_val_fsc;
  });
  return rows;
}

inline void write_ablation_table(std::ostream& os, const std::vector<CellSummary>& rows) {
  os << std::left << std::setw(16) << "cell" << std::setw(12) << "val_fsc" << std::setw(12) << "params"
     << std::setw(14) << "dec_params" << std::setw(14) << "dec_flops" << "status\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << r.cell << std::setw(12) << std::fixed << std::setprecision(6) << r.mean_val_fsc
       << std::setw(12) << r.params << std::setw(14) << r.decoder_params << std::setw(14) << r.decoder_flops
       << (r.ok() ? "ok" : "failed: " + r.errors.front()) << '\n';
  }
  os.unsetf(std::ios::fixed);
}

}  // namespace roadseg::harness
