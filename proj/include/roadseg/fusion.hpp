#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "roadseg/autograd.hpp"
#include "roadseg/nn.hpp"

namespace roadseg::fusion {

/// Component switches of the fusion block. Disabling both the contrast
/// descriptor and the recalibrator (or setting baseline_sum) degenerates the
/// block to the plain elementwise sum F^R + F^N.
struct FusionSwitches {
  bool spatial = true;       // ham.spatial
  bool channel = true;       // ham.channel
  bool atrous = true;        // ham.atrous
  bool hfcd = true;          // hfcd.enabled
  bool awfr = true;          // awfr.enabled
  bool baseline_sum = false; // fusion.baseline_sum

  bool is_baseline() const { return baseline_sum || (!hfcd && !awfr); }
  friend bool operator==(const FusionSwitches&, const FusionSwitches&) = default;
};

template <class T>
struct FeaturePair {
  Var<T> rgb;
  Var<T> normal;
};

inline constexpr std::array<int, 3> kAtrousDilations{1, 2, 4};
inline constexpr int kMinAtrousSize = 4;
inline constexpr int kChannelReduction = 4;

/// Learnable tensors of one fusion block for C channels per modality.
template <class T>
struct FusionParams {
  int channels = 0;
  nn::Conv<T> spatial;                 // [avg; max] (2) -> mask (1), 7x7
  std::array<nn::Conv<T>, 3> atrous;   // C -> C, 3x3, dilations 1/2/4
  nn::Norm<T> atrous_norm;
  nn::Conv<T> se_reduce;               // 2C -> max(1, 2C/4), 1x1
  nn::Conv<T> se_expand;               // -> 2C, 1x1
  nn::Conv<T> h_product;               // w_{h,1}: C -> C, 3x3
  nn::Norm<T> h_product_norm;
  nn::Conv<T> h_difference;            // w_{h,2}: C -> C, 3x3
  nn::Norm<T> h_difference_norm;
  nn::Conv<T> h_project;               // 2C -> C, 1x1
  nn::Conv<T> w_r;                     // C -> C, 1x1
  nn::Conv<T> w_n;                     // C -> C, 1x1
  nn::Conv<T> w_a;                     // 2C -> C, 1x1

  static FusionParams init(int c, std::uint64_t seed) {
    require(c > 0, "FusionParams: channel count must be positive");
    nn::Rng rng(seed);
    FusionParams p;
    p.channels = c;
    p.spatial = nn::Conv<T>(2, 1, 7, {.pad = 3}, rng);
    for (std::size_t i = 0; i < kAtrousDilations.size(); ++i) {
      const int d = kAtrousDilations[i];
      p.atrous[i] = nn::Conv<T>(c, c, 3, {.pad = d, .dilation = d, .padding = ops::Padding::symmetric}, rng);
    }
    p.atrous_norm = nn::Norm<T>(c);
    const int hidden = std::max(1, 2 * c / kChannelReduction);
    p.se_reduce = nn::Conv<T>(2 * c, hidden, 1, {}, rng);
    p.se_expand = nn::Conv<T>(hidden, 2 * c, 1, {}, rng);
    p.h_product = nn::Conv<T>(c, c, 3, {.pad = 1}, rng);
    p.h_product_norm = nn::Norm<T>(c);
    p.h_difference = nn::Conv<T>(c, c, 3, {.pad = 1}, rng);
    p.h_difference_norm = nn::Norm<T>(c);
    p.h_project = nn::Conv<T>(2 * c, c, 1, {}, rng);
    p.w_r = nn::Conv<T>(c, c, 1, {}, rng);
    p.w_n = nn::Conv<T>(c, c, 1, {}, rng);
    p.w_a = nn::Conv<T>(2 * c, c, 1, {}, rng);
    return p;
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    spatial.visit(prefix + ".spatial", f);
    for (std::size_t i = 0; i < atrous.size(); ++i) atrous[i].visit(prefix + ".atrous" + std::to_string(i), f);
    atrous_norm.visit(prefix + ".atrous_norm", f);
    se_reduce.visit(prefix + ".se_reduce", f);
    se_expand.visit(prefix + ".se_expand", f);
    h_product.visit(prefix + ".h_product", f);
    h_product_norm.visit(prefix + ".h_product_norm", f);
    h_difference.visit(prefix + ".h_difference", f);
    h_difference_norm.visit(prefix + ".h_difference_norm", f);
    h_project.visit(prefix + ".h_project", f);
    w_r.visit(prefix + ".w_r", f);
    w_n.visit(prefix + ".w_n", f);
    w_a.visit(prefix + ".w_a", f);
  }
};

template <class T>
void check_pair(const FeaturePair<T>& pair, const FusionParams<T>& p) {
  require(pair.rgb.defined() && pair.normal.defined(), "fusion: feature pair is incomplete");
  require(pair.rgb.value().rank() == 3, "fusion: features must be C x H x W");
  if (pair.rgb.shape() != pair.normal.shape())
    throw ContractError("fusion: rgb/normal shapes differ " + to_string(pair.rgb.shape()) + " vs " +
                        to_string(pair.normal.shape()));
  if (pair.rgb.value().channels() != p.channels)
    throw ContractError("fusion: features have " + std::to_string(pair.rgb.value().channels()) +
                        " channels, block expects " + std::to_string(p.channels));
}

// ---------------------------------------------------------------------------
// Holistic attention

/// f_s mask: sigmoid(conv7x7([mean_c(x); max_c(x)])) -> (1,H,W).
template <class T>
Var<T> spatial_mask(const Var<T>& x, const FusionParams<T>& p) {
  auto pooled = ops::concat_channels<T>({ops::channel_mean(x), ops::channel_max(x)});
  return ops::sigmoid(p.spatial(pooled));
}

/// F_S = [f_s(F^R); f_s(F^N)] (2C,H,W).
template <class T>
Var<T> spatial_attention(const FeaturePair<T>& pair, const FusionParams<T>& p) {
  check_pair(pair, p);
  return ops::concat_channels<T>(
      {ops::mul_broadcast(pair.rgb, spatial_mask(pair.rgb, p)), ops::mul_broadcast(pair.normal, spatial_mask(pair.normal, p))});
}

/// Sum of the three dilated branches before normalization.
template <class T>
Var<T> atrous_response(const Var<T>& x, const FusionParams<T>& p) {
  require(x.value().height() >= kMinAtrousSize && x.value().width() >= kMinAtrousSize,
          "atrous_aggregate: feature map " + to_string(x.shape()) + " is smaller than the 4x4 minimum");
  Var<T> acc = p.atrous[0](x);
  for (std::size_t i = 1; i < p.atrous.size(); ++i) acc = ops::add(acc, p.atrous[i](x));
  return acc;
}

/// f_a(x) = relu(norm(sum_d conv_d(x))).
template <class T>
Var<T> atrous_single(const Var<T>& x, const FusionParams<T>& p) {
  return ops::relu(p.atrous_norm(atrous_response(x, p)));
}

/// F_A = [f_a(F^R); f_a(F^N)] (2C,H,W).
template <class T>
Var<T> atrous_aggregate(const FeaturePair<T>& pair, const FusionParams<T>& p) {
  check_pair(pair, p);
  return ops::concat_channels<T>({atrous_single(pair.rgb, p), atrous_single(pair.normal, p)});
}

/// Squeeze-excitation gates in (0,1), shape (2C,1,1).
template <class T>
Var<T> channel_gates(const Var<T>& fa, const FusionParams<T>& p) {
  return ops::sigmoid(p.se_expand(ops::relu(p.se_reduce(ops::global_avg_pool(fa)))));
}

/// F_C = f_c(F_A).
template <class T>
Var<T> channel_attention(const Var<T>& fa, const FusionParams<T>& p) {
  require(fa.value().rank() == 3 && fa.value().channels() == 2 * p.channels,
          "channel_attention: expected " + std::to_string(2 * p.channels) + " channels, got " + to_string(fa.shape()));
  return ops::mul_broadcast(fa, channel_gates(fa, p));
}

// ---------------------------------------------------------------------------
// Contrast descriptor

template <class T>
void check_unit_interval(const Var<T>& x, const char* what) {
  constexpr double tol = 1e-6;
  for (T v : x.value().values()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericalError(std::string(what) + ": non-finite input");
    if (!(static_cast<double>(v) > -tol && static_cast<double>(v) < 1.0 + tol))
      throw ContractError(std::string(what) + ": input outside (0,1); apply the sigmoid normalization first");
  }
}

/// Product branch input F~^R (.) F~^N and difference branch input F~^R - F~^N of a
/// normalized (2C,H,W) map.
template <class T>
std::pair<Var<T>, Var<T>> contrast_inputs(const Var<T>& normalized, int c) {
  auto r = ops::slice_channels(normalized, 0, c);
  auto n = ops::slice_channels(normalized, c, c);
  return {ops::mul(r, n), ops::sub(r, n)};
}

/// h(F~) = sigmoid(proj([w_h1(F~R (.) F~N); w_h2(F~R - F~N)])) -> (C,H,W) in (0,1).
template <class T>
Var<T> contrast(const Var<T>& normalized, const FusionParams<T>& p) {
  require(normalized.value().rank() == 3 && normalized.value().channels() == 2 * p.channels,
          "contrast: expected a (2C,H,W) normalized map");
  check_unit_interval(normalized, "contrast");
  auto [prod, diff] = contrast_inputs(normalized, p.channels);
  auto hp = ops::sigmoid(p.h_product_norm(p.h_product(prod)));
  auto hd = ops::sigmoid(p.h_difference_norm(p.h_difference(diff)));
  return ops::sigmoid(p.h_project(ops::concat_channels<T>({hp, hd})));
}

// ---------------------------------------------------------------------------
// Affinity and recalibration

/// A = sigmoid(G S) with G = sigmoid(S C^T / sqrt(HW)), where S and C are the
/// descriptors read as C x (HW) matrices.
template <class T>
Var<T> affinity(const Var<T>& h_spatial, const Var<T>& h_channel) {
  if (h_spatial.shape() != h_channel.shape())
    throw ContractError("affinity: descriptor shapes differ " + to_string(h_spatial.shape()) + " vs " +
                        to_string(h_channel.shape()));
  const T scale = T(1) / std::sqrt(static_cast<T>(h_spatial.value().plane()));
  auto g = ops::sigmoid(ops::channel_gram(h_spatial, h_channel, scale));
  return ops::sigmoid(ops::channel_mix(g, h_spatial));
}

template <class T>
struct Recalibrated {
  Var<T> fused;       // F^H
  Var<T> rgb_next;    // F_R^R
  Var<T> normal_next; // F_R^N
};

/// F^H = w_a([w_r(F^R (.) A); w_n(F^N (.) A)]).
template <class T>
Recalibrated<T> recalibrate(const FeaturePair<T>& pair, const Var<T>& a, const FusionParams<T>& p) {
  check_pair(pair, p);
  if (a.shape() != pair.rgb.shape())
    throw ContractError("recalibrate: affinity volume " + to_string(a.shape()) + " does not match features " +
                        to_string(pair.rgb.shape()));
  auto r = p.w_r(ops::mul(pair.rgb, a));
  auto n = p.w_n(ops::mul(pair.normal, a));
  return {p.w_a(ops::concat_channels<T>({r, n})), r, n};
}

template <class T>
Var<T> identity_attention_input(const FeaturePair<T>& pair) {
  return ops::concat_channels<T>({pair.rgb, pair.normal});
}

/// The (C,H,W) weight volume that recalibrates both towers; not defined for the baseline.
template <class T>
Var<T> affinity_volume(const FeaturePair<T>& pair, const FusionParams<T>& p, const FusionSwitches& sw = {}) {
  check_pair(pair, p);
  require(!sw.is_baseline(), "affinity_volume: the baseline sum has no affinity volume");
  const Var<T> fs = sw.spatial ? spatial_attention(pair, p) : identity_attention_input(pair);
  const Var<T> fa = sw.atrous ? atrous_aggregate(pair, p) : identity_attention_input(pair);
  const Var<T> fc = sw.channel ? channel_attention(fa, p) : fa;
  const Var<T> fs_n = ops::sigmoid(fs);
  const Var<T> fc_n = ops::sigmoid(fc);

  const int c = p.channels;
  auto describe = [&](const Var<T>& normalized) {
    if (sw.hfcd) return contrast(normalized, p);
    // Without the descriptor: mean of the two normalized halves, still in (0,1).
    return ops::scale(ops::add(ops::slice_channels(normalized, 0, c), ops::slice_channels(normalized, c, c)), T(0.5));
  };
  const Var<T> hs = describe(fs_n);
  const Var<T> hc = describe(fc_n);
  // Without the affinity volume the descriptors weight the features elementwise.
  return sw.awfr ? affinity(hs, hc) : ops::mul(hs, hc);
}

/// Full fusion block. Returns (F^H, F_R^R, F_R^N).
template <class T>
Recalibrated<T> hf2b_forward(const FeaturePair<T>& pair, const FusionParams<T>& p, const FusionSwitches& sw = {}) {
  check_pair(pair, p);
  if (sw.is_baseline()) return {ops::add(pair.rgb, pair.normal), pair.rgb, pair.normal};
  return recalibrate(pair, affinity_volume(pair, p, sw), p);
}

}  // namespace roadseg::fusion
