#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "roadseg/autograd.hpp"
#include "roadseg/nn.hpp"

namespace roadseg::decoder {

enum class Topology { roadsegv2, unetpp, unet3p };
enum class EdgeKind { same_scale, upsample, downsample };
enum class BlockKind { basic, depthwise_separable };

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::roadsegv2: return "roadsegv2";
    case Topology::unetpp: return "unetpp";
    case Topology::unet3p: return "unet3p";
  }
  return "?";
}

inline Topology parse_topology(const std::string& s) {
  if (s == "roadsegv2") return Topology::roadsegv2;
  if (s == "unetpp") return Topology::unetpp;
  if (s == "unet3p") return Topology::unet3p;
  throw ContractError("unknown decoder topology '" + s + "' (expected roadsegv2, unetpp or unet3p)");
}

inline std::string to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::same_scale: return "same-scale";
    case EdgeKind::upsample: return "upsample";
    case EdgeKind::downsample: return "downsample";
  }
  return "?";
}

/// Grid position: row = scale (0 is the finest), col = stage within the row.
struct NodeId {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

struct Edge {
  NodeId src;
  NodeId dst;
  EdgeKind kind = EdgeKind::same_scale;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// One convolution of a decoder node.
struct ConvBlockSpec {
  BlockKind kind = BlockKind::basic;
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;

  /// Learnable weights and biases; depthwise-separable counts depthwise + pointwise.
  std::int64_t params() const {
    const std::int64_t in = in_channels, out = out_channels, k2 = std::int64_t(kernel) * kernel;
    if (kind == BlockKind::basic) return in * out * k2 + out;
    return in * k2 + in + in * out + out;
  }
  /// Multiply-accumulates for an h x w output.
  std::int64_t macs(std::int64_t h, std::int64_t w) const {
    const std::int64_t in = in_channels, out = out_channels, k2 = std::int64_t(kernel) * kernel;
    const std::int64_t per_pixel = kind == BlockKind::basic ? in * out * k2 : in * k2 + in * out;
    return per_pixel * h * w;
  }
};

struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;  // multiply-accumulates at the reference size

  CostReport& operator+=(const CostReport& o) {
    params += o.params;
    flops += o.flops;
    return *this;
  }
};

struct BuildOptions {
  /// Block used in every node; defaults to depthwise-separable for roadsegv2, basic otherwise.
  std::optional<BlockKind> block;
  /// roadsegv2 only: add the inter-scale fan-in to every column rather than only the final one.
  bool inter_scale_all_columns = false;
  /// unet3p only: channels each incoming edge is projected to (defaults to channels[0]).
  std::optional<int> cat_channels;
};

struct DecoderGraph {
  Topology topology = Topology::roadsegv2;
  int levels = 0;
  std::vector<int> channels;  // per row
  BlockKind block = BlockKind::basic;
  int cat_channels = 0;       // unet3p edge projection width
  std::vector<NodeId> nodes;  // inputs first, then decoder nodes in topological order
  std::vector<Edge> edges;

  bool is_input(NodeId n) const { return n.col == 0; }
  NodeId output() const { return {0, levels - 1}; }

  std::vector<Edge> incoming(NodeId n) const {
    std::vector<Edge> out;
    for (const auto& e : edges)
      if (e.dst == n) out.push_back(e);
    return out;
  }

  int out_channels(NodeId n) const {
    if (topology == Topology::unet3p && !is_input(n)) return cat_channels * levels;
    return channels.at(static_cast<std::size_t>(n.row));
  }

  /// Kahn's algorithm; throws if the edge set has a cycle.
  std::vector<NodeId> topological_order() const {
    std::map<NodeId, int> indeg;
    std::map<NodeId, std::vector<NodeId>> succ;
    for (const auto& n : nodes) indeg[n] = 0;
    for (const auto& e : edges) {
      ++indeg[e.dst];
      succ[e.src].push_back(e.dst);
    }
    std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
    for (const auto& [n, d] : indeg)
      if (d == 0) ready.push(n);
    std::vector<NodeId> order;
    while (!ready.empty()) {
      const NodeId n = ready.top();
      ready.pop();
      order.push_back(n);
      for (const auto& s : succ[n])
        if (--indeg[s] == 0) ready.push(s);
    }
    if (order.size() != indeg.size()) throw ContractError("decoder graph contains a cycle");
    return order;
  }

  /// Checks the structural invariants: acyclic, every decoder node fed, edge
  /// kinds consistent with the rows they connect.
  void validate() const {
    topological_order();
    for (const auto& n : nodes)
      if (!is_input(n) && incoming(n).empty())
        throw ContractError("decoder node (" + std::to_string(n.row) + "," + std::to_string(n.col) + ") has no input");
    for (const auto& e : edges) {
      const bool ok = (e.kind == EdgeKind::same_scale && e.src.row == e.dst.row) ||
                      (e.kind == EdgeKind::upsample && e.src.row > e.dst.row) ||
                      (e.kind == EdgeKind::downsample && e.src.row < e.dst.row);
      if (!ok) throw ContractError("decoder edge kind inconsistent with its rows");
    }
  }

  std::set<Edge> edge_set() const { return {edges.begin(), edges.end()}; }
};

namespace detail {
inline EdgeKind kind_between(NodeId src, NodeId dst) {
  if (src.row == dst.row) return EdgeKind::same_scale;
  return src.row > dst.row ? EdgeKind::upsample : EdgeKind::downsample;
}
}  // namespace detail

/// Builds the node/edge structure of one of the three decoders over k scales.
///   unetpp:    (i,j) <- every (i,j'<j) and up (i+1,j-1)
///   roadsegv2: (i,j) <- (i,j-1), (i,0), up (i+1,j-1); the last node of each row also
///              takes down-sampled first nodes of all shallower rows and up-sampled
///              last nodes of all deeper rows
///   unet3p:    one decoder node per row at column k-1-i fed by first nodes of rows
///              <= i and decoder nodes of deeper rows (full-scale skips)
inline DecoderGraph build_topology(Topology topology, int levels, std::vector<int> channels,
                                   const BuildOptions& opt = {}) {
  if (levels < 2) throw ContractError("build_topology: at least 2 levels required, got " + std::to_string(levels));
  if (channels.size() != static_cast<std::size_t>(levels))
    throw ContractError("build_topology: channel schedule has " + std::to_string(channels.size()) +
                        " entries for " + std::to_string(levels) + " levels");
  for (int c : channels) require(c > 0, "build_topology: channel counts must be positive");

  DecoderGraph g;
  g.topology = topology;
  g.levels = levels;
  g.channels = std::move(channels);
  g.block = opt.block.value_or(topology == Topology::roadsegv2 ? BlockKind::depthwise_separable : BlockKind::basic);
  g.cat_channels = opt.cat_channels.value_or(g.channels[0]);
  require(g.cat_channels > 0, "build_topology: cat channels must be positive");

  const int k = levels;
  auto last_col = [k](int row) { return k - 1 - row; };
  std::set<Edge> edges;
  auto link = [&](NodeId s, NodeId d) { edges.insert({s, d, detail::kind_between(s, d)}); };

  for (int i = 0; i < k; ++i) g.nodes.push_back({i, 0});

  if (topology == Topology::unet3p) {
    for (int i = k - 2; i >= 0; --i) {
      const NodeId d{i, last_col(i)};
      g.nodes.push_back(d);
      for (int s = 0; s <= i; ++s) link({s, 0}, d);
      for (int s = i + 1; s < k; ++s) link({s, last_col(s)}, d);
    }
  } else {
    // Column-major order keeps each node after all of its predecessors.
    for (int j = 1; j < k; ++j)
      for (int i = k - 1 - j; i >= 0; --i) {
        const NodeId d{i, j};
        g.nodes.push_back(d);
        link({i + 1, j - 1}, d);
        if (topology == Topology::unetpp) {
          for (int jp = 0; jp < j; ++jp) link({i, jp}, d);
          continue;
        }
        link({i, j - 1}, d);
        link({i, 0}, d);
        if (j == last_col(i) || opt.inter_scale_all_columns) {
          for (int s = 0; s < i; ++s) link({s, 0}, d);
          for (int s = i + 1; s < k; ++s)
            if (last_col(s) < j) link({s, last_col(s)}, d);
        }
      }
  }
  g.edges.assign(edges.begin(), edges.end());
  g.validate();
  return g;
}

/// Convolutions making up one node, in evaluation order.
struct NodeCost {
  std::vector<ConvBlockSpec> edge_convs;  // unet3p: one per incoming edge
  ConvBlockSpec fuse;
  int norm_channels = 0;  // norm after each conv (per-edge norms included)
};

inline int incoming_channels(const DecoderGraph& g, NodeId n) {
  int c = 0;
  for (const auto& e : g.incoming(n)) c += g.topology == Topology::unet3p ? g.cat_channels : g.out_channels(e.src);
  return c;
}

inline NodeCost node_cost(const DecoderGraph& g, NodeId n) {
  NodeCost nc;
  const int out = g.out_channels(n);
  if (g.topology == Topology::unet3p)
    for (const auto& e : g.incoming(n)) {
      nc.edge_convs.push_back({g.block, g.out_channels(e.src), g.cat_channels, 3});
      nc.norm_channels += g.cat_channels;
    }
  nc.fuse = {g.block, incoming_channels(g, n), out, 3};
  nc.norm_channels += out;
  return nc;
}

/// Exact parameter and multiply-accumulate counts for a level-0 feature size
/// (height x width); row i runs at (height >> i) x (width >> i).
inline CostReport cost_report(const DecoderGraph& g, int height, int width) {
  CostReport r;
  for (const auto& n : g.nodes) {
    if (g.is_input(n)) continue;
    const std::int64_t h = height >> n.row, w = width >> n.row;
    const NodeCost nc = node_cost(g, n);
    for (const auto& c : nc.edge_convs) r += {c.params(), c.macs(h, w)};
    r += {nc.fuse.params(), nc.fuse.macs(h, w)};
    r.params += 2 * nc.norm_channels;
  }
  const ConvBlockSpec head{BlockKind::basic, g.out_channels(g.output()), 1, 1};
  r += {head.params(), head.macs(height, width)};
  return r;
}

// ---------------------------------------------------------------------------
// Parameters and evaluation

template <class T>
struct ConvBlock {
  BlockKind kind = BlockKind::basic;
  nn::Conv<T> conv;       // basic 3x3, or the depthwise part
  nn::Conv<T> pointwise;  // depthwise-separable only
  nn::Norm<T> norm;

  static ConvBlock make(const ConvBlockSpec& s, nn::Rng& rng) {
    ConvBlock b;
    b.kind = s.kind;
    const int pad = s.kernel / 2;
    if (s.kind == BlockKind::basic) {
      b.conv = nn::Conv<T>(s.in_channels, s.out_channels, s.kernel, {.pad = pad}, rng);
    } else {
      b.conv = nn::Conv<T>(s.in_channels, s.in_channels, s.kernel, {.pad = pad, .groups = s.in_channels}, rng);
      b.pointwise = nn::Conv<T>(s.in_channels, s.out_channels, 1, {}, rng);
    }
    b.norm = nn::Norm<T>(s.out_channels);
    return b;
  }

  /// conv -> norm -> relu
  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = conv(x);
    if (kind == BlockKind::depthwise_separable) y = pointwise(y);
    return ops::relu(norm(y));
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    conv.visit(prefix + (kind == BlockKind::basic ? ".conv" : ".depthwise"), f);
    if (kind == BlockKind::depthwise_separable) pointwise.visit(prefix + ".pointwise", f);
    norm.visit(prefix + ".norm", f);
  }
};

template <class T>
struct NodeParams {
  std::vector<ConvBlock<T>> edge_blocks;
  ConvBlock<T> fuse;
};

template <class T>
struct DecoderParams {
  std::map<NodeId, NodeParams<T>> nodes;
  nn::Conv<T> head;  // 1x1 -> single logit channel

  static DecoderParams init(const DecoderGraph& g, std::uint64_t seed) {
    nn::Rng rng(seed);
    DecoderParams p;
    for (const auto& n : g.nodes) {
      if (g.is_input(n)) continue;
      const NodeCost nc = node_cost(g, n);
      NodeParams<T> np;
      for (const auto& e : nc.edge_convs) np.edge_blocks.push_back(ConvBlock<T>::make(e, rng));
      np.fuse = ConvBlock<T>::make(nc.fuse, rng);
      p.nodes.emplace(n, std::move(np));
    }
    p.head = nn::Conv<T>(g.out_channels(g.output()), 1, 1, {}, rng);
    return p;
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    for (auto& [n, np] : nodes) {
      const std::string base = prefix + ".n" + std::to_string(n.row) + "_" + std::to_string(n.col);
      for (std::size_t i = 0; i < np.edge_blocks.size(); ++i) np.edge_blocks[i].visit(base + ".edge" + std::to_string(i), f);
      np.fuse.visit(base + ".fuse", f);
    }
    head.visit(prefix + ".head", f);
  }
};

/// Moves features from the source row's scale to the destination row's scale:
/// bilinear upsampling from deeper rows, max-pooling from shallower ones.
template <class T>
Var<T> resample(const Var<T>& x, int src_row, int dst_row, int dst_h, int dst_w) {
  if (src_row == dst_row) return x;
  if (src_row > dst_row) return ops::upsample_bilinear(x, dst_h, dst_w);
  return ops::max_pool(x, 1 << (dst_row - src_row));
}

/// Logit map (1 x H0 x W0) at level-0 resolution, or at out_h x out_w when given.
template <class T>
Var<T> decode_logits(const DecoderGraph& g, const std::vector<Var<T>>& fused, const DecoderParams<T>& p,
                     int out_h = 0, int out_w = 0) {
  if (fused.size() != static_cast<std::size_t>(g.levels))
    throw ContractError("decode: expected " + std::to_string(g.levels) + " feature maps, got " +
                        std::to_string(fused.size()));
  const int h0 = fused[0].value().height(), w0 = fused[0].value().width();
  for (int i = 0; i < g.levels; ++i) {
    const auto& f = fused[static_cast<std::size_t>(i)].value();
    require(f.rank() == 3, "decode: features must be C x H x W");
    if ((h0 % (1 << i)) != 0 || (w0 % (1 << i)) != 0 || f.height() != (h0 >> i) || f.width() != (w0 >> i))
      throw ContractError("decode: level " + std::to_string(i) + " is " + roadseg::to_string(f.shape()) +
                          ", not dyadically related to level 0 (" + std::to_string(h0) + "x" + std::to_string(w0) + ")");
    if (f.channels() != g.channels[static_cast<std::size_t>(i)])
      throw ContractError("decode: level " + std::to_string(i) + " has " + std::to_string(f.channels()) +
                          " channels, schedule expects " + std::to_string(g.channels[static_cast<std::size_t>(i)]));
  }
  std::map<NodeId, Var<T>> values;
  for (int i = 0; i < g.levels; ++i) values[{i, 0}] = fused[static_cast<std::size_t>(i)];
  for (const auto& n : g.nodes) {
    if (g.is_input(n)) continue;
    const auto& np = p.nodes.at(n);
    const int h = h0 >> n.row, w = w0 >> n.row;
    std::vector<Var<T>> parts;
    const auto in = g.incoming(n);
    for (std::size_t e = 0; e < in.size(); ++e) {
      Var<T> v = resample(values.at(in[e].src), in[e].src.row, n.row, h, w);
      if (!np.edge_blocks.empty()) v = np.edge_blocks[e](v);
      parts.push_back(std::move(v));
    }
    values[n] = np.fuse(ops::concat_channels(parts));
  }
  Var<T> logits = p.head(values.at(g.output()));
  if (out_h > 0 && out_w > 0 && (out_h != h0 || out_w != w0)) logits = ops::upsample_bilinear(logits, out_h, out_w);
  return logits;
}

/// Per-pixel freespace probability in (0,1).
template <class T>
Var<T> decode(const DecoderGraph& g, const std::vector<Var<T>>& fused, const DecoderParams<T>& p, int out_h = 0,
              int out_w = 0) {
  return ops::sigmoid(decode_logits(g, fused, p, out_h, out_w));
}

}  // namespace roadseg::decoder
