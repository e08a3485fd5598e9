#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/data.hpp"
#include "roadseg/decoder.hpp"
#include "roadseg/fusion.hpp"
#include "roadseg/geometry.hpp"
#include "roadseg/nn.hpp"

namespace roadseg::model {

struct ModelConfig {
  int stages = 4;
  std::vector<int> channels{16, 32, 64, 128};
  int patch = 4;  // stride of the first stage; later stages halve the resolution
  decoder::Topology decoder = decoder::Topology::roadsegv2;
  bool inter_scale_all_columns = false;
  fusion::FusionSwitches fusion{};
  std::uint64_t seed = 0;

  /// Required multiple of the input height and width.
  int stride_multiple() const { return patch << (stages - 1); }

  void validate() const {
    if (stages < 2) throw ContractError("model: at least two encoder stages are required");
    if (channels.size() != static_cast<std::size_t>(stages))
      throw ContractError("model: " + std::to_string(channels.size()) + " channel widths for " +
                          std::to_string(stages) + " stages");
    for (int c : channels) require(c > 0, "model: channel widths must be positive");
    if (patch < 1) throw ContractError("model: patch stride must be >= 1");
  }
  void validate_input(int height, int width) const {
    const int m = stride_multiple();
    if (height % m != 0 || width % m != 0)
      throw ContractError("model: input " + std::to_string(width) + "x" + std::to_string(height) +
                          " must be a multiple of " + std::to_string(m) + " in both dimensions");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Strided 3x3 convolution + normalization + ReLU.
template <class T>
struct EncoderStage {
  nn::Conv<T> conv;
  nn::Norm<T> norm;

  Var<T> operator()(const Var<T>& x) const { return ops::relu(norm(conv(x))); }
  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    conv.visit(prefix + ".conv", f);
    norm.visit(prefix + ".norm", f);
  }
};

template <class T>
struct ModelState {
  ModelConfig config;
  std::vector<EncoderStage<T>> rgb_tower;
  std::vector<EncoderStage<T>> normal_tower;
  std::vector<fusion::FusionParams<T>> fusion;
  decoder::DecoderGraph graph;
  decoder::DecoderParams<T> decoder;
  std::int64_t step = 0;

  static ModelState init(const ModelConfig& cfg) {
    cfg.validate();
    ModelState s;
    s.config = cfg;
    nn::Rng rng(cfg.seed);
    auto tower = [&](std::vector<EncoderStage<T>>& t) {
      int in = 3;
      for (int i = 0; i < cfg.stages; ++i) {
        const int stride = i == 0 ? cfg.patch : 2;
        const int c = cfg.channels[static_cast<std::size_t>(i)];
        t.push_back({nn::Conv<T>(in, c, 3, {.stride = stride, .pad = 1}, rng), nn::Norm<T>(c)});
        in = c;
      }
    };
    tower(s.rgb_tower);
    tower(s.normal_tower);
    for (int i = 0; i < cfg.stages; ++i)
      s.fusion.push_back(fusion::FusionParams<T>::init(cfg.channels[static_cast<std::size_t>(i)], rng()));
    decoder::BuildOptions bo;
    bo.inter_scale_all_columns = cfg.inter_scale_all_columns;
    s.graph = decoder::build_topology(cfg.decoder, cfg.stages, cfg.channels, bo);
    s.decoder = decoder::DecoderParams<T>::init(s.graph, rng());
    return s;
  }

  /// Visits every learnable tensor in a fixed order with a stable name.
  void visit(const nn::ParamVisitor<T>& f) {
    for (std::size_t i = 0; i < rgb_tower.size(); ++i) rgb_tower[i].visit("rgb" + std::to_string(i), f);
    for (std::size_t i = 0; i < normal_tower.size(); ++i) normal_tower[i].visit("normal" + std::to_string(i), f);
    for (std::size_t i = 0; i < fusion.size(); ++i) fusion[i].visit("fusion" + std::to_string(i), f);
    decoder.visit("decoder", f);
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() {
    std::vector<std::pair<std::string, Var<T>>> out;
    visit([&](const std::string& n, Var<T>& v) { out.emplace_back(n, v); });
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    visit([&](const std::string&, Var<T>& v) { n += static_cast<std::int64_t>(v.value().size()); });
    return n;
  }

  void zero_grad() {
    visit([](const std::string&, Var<T>& v) { v.zero_grad(); });
  }

  /// Deep copy. Plain copies share parameter storage.
  ModelState clone() {
    ModelState c = init(config);
    c.step = step;
    auto src = named_parameters();
    auto dst = c.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
    return c;
  }
};

/// Network inputs: rgb and the normal image mapped from [-1,1] to [0,1]
/// (pixels without a normal map to 0.5).
template <class T>
struct ModelInput {
  Var<T> rgb;
  Var<T> normals;
};

template <class T>
Tensor<T> normal_image(const geometry::NormalMap& n) {
  Tensor<T> t(n.vectors.shape());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>((n.vectors[i] + 1.0) / 2.0);
  return t;
}

template <class T>
ModelInput<T> prepare_input(const Tensor<double>& rgb, const geometry::DepthImage& depth,
                            const geometry::CameraIntrinsics& k) {
  require(rgb.rank() == 3 && rgb.channels() == 3, "model: rgb must be 3 x H x W");
  require(depth.values.same_size(rgb.height(), rgb.width()), "model: depth and rgb sizes differ");
  return {nn::constant(rgb.cast<T>()), nn::constant(normal_image<T>(geometry::estimate_normals(depth, k)))};
}

template <class T>
ModelInput<T> prepare_input(const data::Sample& s) {
  return prepare_input<T>(s.rgb, s.depth, s.intrinsics);
}

/// Fused per-stage features F^H_1..F^H_k. The recalibrated branches replace
/// each tower's input to the following stage.
template <class T>
std::vector<Var<T>> encode(const ModelInput<T>& in, const ModelState<T>& s) {
  std::vector<Var<T>> fused;
  Var<T> r = in.rgb, n = in.normals;
  for (std::size_t i = 0; i < s.rgb_tower.size(); ++i) {
    r = s.rgb_tower[i](r);
    n = s.normal_tower[i](n);
    auto out = fusion::hf2b_forward<T>({r, n}, s.fusion[i], s.config.fusion);
    fused.push_back(out.fused);
    r = out.rgb_next;
    n = out.normal_next;
  }
  return fused;
}

/// Full-resolution logits (1 x H x W).
template <class T>
Var<T> forward_logits(const ModelInput<T>& in, const ModelState<T>& s) {
  const int H = in.rgb.value().height(), W = in.rgb.value().width();
  s.config.validate_input(H, W);
  return decoder::decode_logits(s.graph, encode(in, s), s.decoder, H, W);
}

template <class T>
ProbabilityMap to_probabilities(const Var<T>& logits) {
  const auto& v = logits.value();
  ProbabilityMap p(v.height(), v.width());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(ops::sigmoid_scalar(v[i]));
  return p;
}

/// Freespace probabilities for one frame.
template <class T>
ProbabilityMap forward(const Tensor<double>& rgb, const geometry::DepthImage& depth, const geometry::CameraIntrinsics& k,
                       const ModelState<T>& s) {
  s.config.validate_input(rgb.height(), rgb.width());
  NoGradGuard guard;
  return to_probabilities(forward_logits(prepare_input<T>(rgb, depth, k), s));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   ROADSEG-CHECKPOINT
//   format_version 1
//   step <int>
//   config <key>=<value> ...
//   tensor <name> <rank> <dims...>        (one line per tensor, in visit order)
//   end_header
//   <float32 little-endian payload, tensors concatenated in header order>

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "ROADSEG-CHECKPOINT";

inline std::string encode_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "stages=" << c.stages << " channels=";
  for (std::size_t i = 0; i < c.channels.size(); ++i) os << (i ? "," : "") << c.channels[i];
  os << " patch=" << c.patch << " decoder=" << decoder::to_string(c.decoder)
     << " inter_scale_all_columns=" << c.inter_scale_all_columns << " ham.spatial=" << c.fusion.spatial
     << " ham.channel=" << c.fusion.channel << " ham.atrous=" << c.fusion.atrous << " hfcd.enabled=" << c.fusion.hfcd
     << " awfr.enabled=" << c.fusion.awfr << " fusion.baseline_sum=" << c.fusion.baseline_sum << " seed=" << c.seed;
  return os.str();
}

inline ModelConfig decode_config(const std::string& line) {
  std::istringstream is(line);
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed config token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint: config is missing '" + k + "'");
    return it->second;
  };
  try {
    ModelConfig c;
    c.stages = std::stoi(get("stages"));
    c.channels.clear();
    std::istringstream cs(get("channels"));
    for (std::string part; std::getline(cs, part, ',');) c.channels.push_back(std::stoi(part));
    c.patch = std::stoi(get("patch"));
    c.decoder = decoder::parse_topology(get("decoder"));
    c.inter_scale_all_columns = get("inter_scale_all_columns") == "1";
    c.fusion.spatial = get("ham.spatial") == "1";
    c.fusion.channel = get("ham.channel") == "1";
    c.fusion.atrous = get("ham.atrous") == "1";
    c.fusion.hfcd = get("hfcd.enabled") == "1";
    c.fusion.awfr = get("awfr.enabled") == "1";
    c.fusion.baseline_sum = get("fusion.baseline_sum") == "1";
    c.seed = std::stoull(get("seed"));
    c.validate();
    return c;
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("checkpoint: bad config value: ") + e.what());
  }
}

template <class T>
void save_state(ModelState<T>& s, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::ostringstream header;
  header << kCheckpointMagic << '\n' << "format_version " << kCheckpointVersion << '\n' << "step " << s.step << '\n'
         << "config " << encode_config(s.config) << '\n';
  std::vector<float> payload;
  s.visit([&](const std::string& name, Var<T>& v) {
    const auto& t = v.value();
    header << "tensor " << name << ' ' << t.rank();
    for (int d : t.shape()) header << ' ' << d;
    header << '\n';
    for (T x : t.values()) payload.push_back(static_cast<float>(x));
  });
  header << "end_header\n";
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw FormatError("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Reads a checkpoint in full; nothing is returned unless every tensor is present
/// with the shape the stored configuration implies.
template <class T>
ModelState<T> load_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw FormatError(path.string() + ": not a checkpoint file");
  std::string key;
  int version = 0;
  if (!std::getline(in, line) || !(std::istringstream(line) >> key >> version) || key != "format_version")
    throw FormatError(path.string() + ": missing format_version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                      " but this build reads version " + std::to_string(kCheckpointVersion));
  std::int64_t step = 0;
  if (!std::getline(in, line) || !(std::istringstream(line) >> key >> step) || key != "step")
    throw FormatError(path.string() + ": missing step");
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0) throw FormatError(path.string() + ": missing config");
  ModelState<T> s = ModelState<T>::init(decode_config(line.substr(7)));
  s.step = step;

  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    Entry e;
    int rank = 0;
    if (!(ls >> key >> e.name >> rank) || key != "tensor" || rank <= 0)
      throw FormatError(path.string() + ": malformed tensor manifest line '" + line + "'");
    e.shape.resize(static_cast<std::size_t>(rank));
    for (auto& d : e.shape)
      if (!(ls >> d)) throw FormatError(path.string() + ": malformed tensor shape for " + e.name);
    entries.push_back(std::move(e));
  }
  if (line != "end_header") throw FormatError(path.string() + ": truncated header");

  auto params = s.named_parameters();
  if (params.size() != entries.size())
    throw FormatError(path.string() + ": manifest lists " + std::to_string(entries.size()) + " tensors, model has " +
                      std::to_string(params.size()));
  std::size_t total = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != params[i].first || entries[i].shape != params[i].second.shape())
      throw FormatError(path.string() + ": tensor " + entries[i].name + " " + to_string(entries[i].shape) +
                        " does not match model tensor " + params[i].first + " " + to_string(params[i].second.shape()));
    total += numel(entries[i].shape);
  }
  std::vector<float> payload(total);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != total * sizeof(float))
    throw FormatError(path.string() + ": truncated payload (expected " + std::to_string(total * sizeof(float)) +
                      " bytes)");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");

  std::size_t off = 0;
  for (auto& [name, var] : params) {
    auto& t = var.mutable_value();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(payload[off + i]);
    off += t.size();
  }
  return s;
}

}  // namespace roadseg::model
