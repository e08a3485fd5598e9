#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "roadseg/autograd.hpp"

namespace roadseg::nn {

template <class T>
using ParamVisitor = std::function<void(const std::string&, Var<T>&)>;

using Rng = std::mt19937_64;

// Kaiming-uniform for ReLU gain: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
Tensor<T> kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Var<T> param(Tensor<T> t) {
  return Var<T>(std::move(t), true);
}

/// Convolution layer with optional bias.
template <class T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  ops::ConvOptions opt;

  Conv() = default;
  Conv(int in, int out, int k, ops::ConvOptions o, Rng& rng, bool with_bias = true) : opt(o) {
    require(in > 0 && out > 0 && k > 0, "Conv: channel counts and kernel size must be positive");
    require(in % o.groups == 0 && out % o.groups == 0, "Conv: channels not divisible by groups");
    const int cin_g = in / o.groups;
    weight = param(kaiming_uniform<T>({out, cin_g, k, k}, cin_g * k * k, rng));
    if (with_bias) bias = param(Tensor<T>({out}, T(0)));
  }

  int in_channels() const { return weight.value().dim(1) * opt.groups; }
  int out_channels() const { return weight.value().dim(0); }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, opt); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    if (bias.defined()) f(prefix + ".bias", bias);
  }
};

/// Per-instance normalization with learnable affine transform (gamma = 1, beta = 0 at init).
template <class T>
struct Norm {
  Var<T> gamma;
  Var<T> beta;

  Norm() = default;
  explicit Norm(int channels) : gamma(param(Tensor<T>({channels}, T(1)))), beta(param(Tensor<T>({channels}, T(0)))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::instance_norm(x, gamma, beta); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

}  // namespace roadseg::nn
