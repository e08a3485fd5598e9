#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "roadseg/tensor.hpp"

namespace roadseg {

// Reverse-mode differentiation over Tensor values. Every op records a closure
// that accumulates gradients into its parents; backward() replays them in
// reverse topological order.

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T(0));
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient accumulated by backward(); zero tensor if none has reached this node.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Creates a recorded op result. `fn` receives the output node and must
  // accumulate into parent gradients.
  static Var make(Tensor<T> value, std::vector<Var> parents, std::function<void(Node<T>&)> fn) {
    Var out(std::move(value));
    bool track = false;
    if (detail::grad_mode())
      for (const auto& p : parents) track = track || p.requires_grad();
    if (track) {
      out.node_->requires_grad = true;
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward_fn = std::move(fn);
    }
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Back-propagates `seed` (same shape as `out`) through the recorded graph.
template <class T>
void backward(const Var<T>& out, const Tensor<T>& seed) {
  require_same_shape(out.value(), seed, "backward seed");
  if (!out.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{out.node().get(), 0}};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Tensor<T>& g = out.node()->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

template <class T>
void backward(const Var<T>& scalar_out) {
  backward(scalar_out, Tensor<T>(scalar_out.shape(), T(1)));
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace ops {

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& o) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an, s](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

/// x (C,H,W) times m where m is (1,H,W) (spatial mask) or (C,1,1) (channel gates).
template <class T>
Var<T> mul_broadcast(const Var<T>& x, const Var<T>& m) {
  const auto& xv = x.value();
  const auto& mv = m.value();
  require(xv.rank() == 3 && mv.rank() == 3, "mul_broadcast expects rank-3 operands");
  const bool spatial = mv.channels() == 1 && mv.height() == xv.height() && mv.width() == xv.width();
  const bool gates = mv.channels() == xv.channels() && mv.height() == 1 && mv.width() == 1;
  require(spatial || gates, "mul_broadcast: cannot broadcast " + to_string(mv.shape()) + " onto " + to_string(xv.shape()));
  const int C = xv.channels();
  const std::size_t P = xv.plane();
  auto idx = [spatial, P](int c, std::size_t p) { return spatial ? p : static_cast<std::size_t>(c); };
  Tensor<T> out = xv;
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[c * P + p] *= mv[idx(c, p)];
  auto xn = x.node(), mn = m.node();
  return Var<T>::make(std::move(out), {x, m}, [xn, mn, C, P, idx](Node<T>& o) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) g[c * P + p] += o.grad[c * P + p] * mn->value[idx(c, p)];
    }
    if (mn->requires_grad) {
      auto& g = mn->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) g[idx(c, p)] += o.grad[c * P + p] * xn->value[c * P + p];
    }
  });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = sigmoid_scalar(v);
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = o.value[i];
      g[i] += o.grad[i] * s * (T(1) - s);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (an->value[i] > T(0)) g[i] += o.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out({1}, a.value().sum());
  auto an = a.node();
  return Var<T>::make(std::move(out), {a}, [an](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Channel manipulation

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const int H = parts[0].value().height(), W = parts[0].value().width();
  int C = 0;
  for (const auto& p : parts) {
    require(p.value().rank() == 3 && p.value().height() == H && p.value().width() == W,
            "concat_channels: spatial size mismatch " + to_string(p.shape()));
    C += p.value().channels();
  }
  Tensor<T> out = Tensor<T>::chw(C, H, W);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.values().begin() + off);
    off += p.value().size();
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Var<T>::make(std::move(out), parts, [nodes](Node<T>& o) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
      }
      off += n->value.size();
    }
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  const auto& xv = x.value();
  require(begin >= 0 && count > 0 && begin + count <= xv.channels(), "slice_channels: range out of bounds");
  const std::size_t P = xv.plane();
  Tensor<T> out = Tensor<T>::chw(count, xv.height(), xv.width());
  std::copy(xv.data() + begin * P, xv.data() + (begin + count) * P, out.data());
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, begin, P](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * P + i] += o.grad[i];
  });
}

/// Mean over channels -> (1,H,W).
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const auto& xv = x.value();
  const int C = xv.channels();
  const std::size_t P = xv.plane();
  Tensor<T> out = Tensor<T>::chw(1, xv.height(), xv.width());
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[p] += xv[c * P + p];
  for (auto& v : out.values()) v /= T(C);
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, C, P](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) g[c * P + p] += o.grad[p] / T(C);
  });
}

/// Max over channels -> (1,H,W). Ties route the gradient to the first maximum.
template <class T>
Var<T> channel_max(const Var<T>& x) {
  const auto& xv = x.value();
  const int C = xv.channels();
  const std::size_t P = xv.plane();
  Tensor<T> out = Tensor<T>::chw(1, xv.height(), xv.width());
  std::vector<int> arg(P, 0);
  for (std::size_t p = 0; p < P; ++p) {
    T best = xv[p];
    for (int c = 1; c < C; ++c)
      if (xv[c * P + p] > best) best = xv[c * P + p], arg[p] = c;
    out[p] = best;
  }
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, arg = std::move(arg), P](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t p = 0; p < P; ++p) g[arg[p] * P + p] += o.grad[p];
  });
}

/// Spatial mean per channel -> (C,1,1).
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xv = x.value();
  const int C = xv.channels();
  const std::size_t P = xv.plane();
  Tensor<T> out = Tensor<T>::chw(C, 1, 1);
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (std::size_t p = 0; p < P; ++p) s += xv[c * P + p];
    out[c] = s / T(P);
  }
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, C, P](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) g[c * P + p] += o.grad[c] / T(P);
  });
}

// ---------------------------------------------------------------------------
// Convolution

enum class Padding { zeros, symmetric };

struct ConvOptions {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
  Padding padding = Padding::zeros;
};

namespace detail {
// Source index for output position `o` and kernel tap `k`, or -1 when the tap
// lands in zero padding. Symmetric padding mirrors with the edge sample repeated.
inline int source_index(int o, int k, int size, const ConvOptions& opt) {
  int i = o * opt.stride - opt.pad + k * opt.dilation;
  if (i >= 0 && i < size) return i;
  if (opt.padding == Padding::zeros) return -1;
  if (i < 0) i = -i - 1;
  if (i >= size) i = 2 * size - i - 1;
  return (i >= 0 && i < size) ? i : -1;
}
}  // namespace detail

inline int conv_out_size(int in, int k, const ConvOptions& o) {
  return (in + 2 * o.pad - o.dilation * (k - 1) - 1) / o.stride + 1;
}

/// 2-D cross-correlation. x: (Cin,H,W); w: (Cout, Cin/groups, kh, kw); bias: (Cout) or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvOptions& opt) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d expects (C,H,W) input and 4-D kernel");
  const int Cin = xv.channels(), H = xv.height(), W = xv.width();
  const int Cout = wv.dim(0), Cg = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
  const int G = opt.groups;
  require(G >= 1 && Cin % G == 0 && Cout % G == 0 && Cin / G == Cg,
          "conv2d: channel/group mismatch input " + to_string(xv.shape()) + " kernel " + to_string(wv.shape()));
  if (opt.padding == Padding::symmetric)
    require(opt.pad <= H && opt.pad <= W, "conv2d: symmetric padding larger than the feature map");
  if (bias.defined()) require(bias.value().size() == static_cast<std::size_t>(Cout), "conv2d: bias size mismatch");
  const int OH = conv_out_size(H, KH, opt), OW = conv_out_size(W, KW, opt);
  require(OH > 0 && OW > 0, "conv2d: output would be empty for input " + to_string(xv.shape()));

  // Index tables per kernel tap.
  std::vector<int> rows(static_cast<std::size_t>(KH) * OH), cols(static_cast<std::size_t>(KW) * OW);
  for (int k = 0; k < KH; ++k)
    for (int o = 0; o < OH; ++o) rows[k * OH + o] = detail::source_index(o, k, H, opt);
  for (int k = 0; k < KW; ++k)
    for (int o = 0; o < OW; ++o) cols[k * OW + o] = detail::source_index(o, k, W, opt);

  const int CoutG = Cout / G;
  Tensor<T> out = Tensor<T>::chw(Cout, OH, OW);
  for (int oc = 0; oc < Cout; ++oc) {
    T* op = out.channel_ptr(oc);
    if (bias.defined()) std::fill(op, op + static_cast<std::size_t>(OH) * OW, bias.value()[oc]);
    const int g = oc / CoutG;
    for (int icg = 0; icg < Cg; ++icg) {
      const T* ip = xv.channel_ptr(g * Cg + icg);
      for (int ky = 0; ky < KH; ++ky)
        for (int kx = 0; kx < KW; ++kx) {
          const T wk = wv[((static_cast<std::size_t>(oc) * Cg + icg) * KH + ky) * KW + kx];
          if (wk == T(0)) continue;
          const int* cx = &cols[kx * OW];
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = rows[ky * OH + oy];
            if (iy < 0) continue;
            const T* irow = ip + static_cast<std::size_t>(iy) * W;
            T* orow = op + static_cast<std::size_t>(oy) * OW;
            for (int ox = 0; ox < OW; ++ox) {
              const int ix = cx[ox];
              if (ix >= 0) orow[ox] += wk * irow[ix];
            }
          }
        }
    }
  }

  auto xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Var<T>> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return Var<T>::make(std::move(out), parents,
                      [xn, wn, bn, rows = std::move(rows), cols = std::move(cols), Cout, Cg, KH, KW, OH, OW, W,
                       CoutG](Node<T>& o) {
    const auto& xv = xn->value;
    const auto& wv = wn->value;
    Tensor<T>* gx = xn->requires_grad ? &xn->ensure_grad() : nullptr;
    Tensor<T>* gw = wn->requires_grad ? &wn->ensure_grad() : nullptr;
    if (bn && bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (int oc = 0; oc < Cout; ++oc) {
        const T* gp = o.grad.channel_ptr(oc);
        T s = 0;
        for (std::size_t p = 0; p < static_cast<std::size_t>(OH) * OW; ++p) s += gp[p];
        gb[oc] += s;
      }
    }
    for (int oc = 0; oc < Cout; ++oc) {
      const T* gp = o.grad.channel_ptr(oc);
      const int g = oc / CoutG;
      for (int icg = 0; icg < Cg; ++icg) {
        const int ic = g * Cg + icg;
        const T* ip = xv.channel_ptr(ic);
        T* gip = gx ? gx->channel_ptr(ic) : nullptr;
        for (int ky = 0; ky < KH; ++ky)
          for (int kx = 0; kx < KW; ++kx) {
            const std::size_t widx = ((static_cast<std::size_t>(oc) * Cg + icg) * KH + ky) * KW + kx;
            const T wk = wv[widx];
            const int* cx = &cols[kx * OW];
            T acc = 0;
            for (int oy = 0; oy < OH; ++oy) {
              const int iy = rows[ky * OH + oy];
              if (iy < 0) continue;
              const std::size_t irow = static_cast<std::size_t>(iy) * W;
              const T* grow = gp + static_cast<std::size_t>(oy) * OW;
              for (int ox = 0; ox < OW; ++ox) {
                const int ix = cx[ox];
                if (ix < 0) continue;
                acc += grow[ox] * ip[irow + ix];
                if (gip) gip[irow + ix] += grow[ox] * wk;
              }
            }
            if (gw) (*gw)[widx] += acc;
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel normalization over the spatial extent of one instance, followed
/// by the affine (gamma, beta) transform.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const int C = xv.channels();
  const std::size_t P = xv.plane();
  require(gamma.value().size() == static_cast<std::size_t>(C) && beta.value().size() == static_cast<std::size_t>(C),
          "instance_norm: affine parameter size mismatch");
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.size()), inv_std(C);
  for (int c = 0; c < C; ++c) {
    const T* p = xv.channel_ptr(c);
    T mean = 0;
    for (std::size_t i = 0; i < P; ++i) mean += p[i];
    mean /= T(P);
    T var = 0;
    for (std::size_t i = 0; i < P; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= T(P);
    inv_std[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < P; ++i) {
      xhat[c * P + i] = (p[i] - mean) * inv_std[c];
      out[c * P + i] = gamma.value()[c] * xhat[c * P + i] + beta.value()[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return Var<T>::make(std::move(out), {x, gamma, beta},
                      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), C, P](Node<T>& o) {
    for (int c = 0; c < C; ++c) {
      const T* gp = o.grad.channel_ptr(c);
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < P; ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * xhat[c * P + i];
      }
      if (gn->requires_grad) gn->ensure_grad()[c] += sum_gx;
      if (bn->requires_grad) bn->ensure_grad()[c] += sum_g;
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        const T k = gn->value[c] * inv_std[c] / T(P);
        for (std::size_t i = 0; i < P; ++i)
          gx[c * P + i] += k * (T(P) * gp[i] - sum_g - xhat[c * P + i] * sum_gx);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Channel products

/// out(i,j) = scale * sum_p a(i,p) b(j,p); a: (Ca,H,W), b: (Cb,H,W) -> (Ca,Cb,1).
template <class T>
Var<T> channel_gram(const Var<T>& a, const Var<T>& b, T scale) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.height() == bv.height() && av.width() == bv.width(), "channel_gram: spatial size mismatch");
  const int Ca = av.channels(), Cb = bv.channels();
  const std::size_t P = av.plane();
  Tensor<T> out = Tensor<T>::chw(Ca, Cb, 1);
  for (int i = 0; i < Ca; ++i)
    for (int j = 0; j < Cb; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < P; ++p) s += av[i * P + p] * bv[j * P + p];
      out[static_cast<std::size_t>(i) * Cb + j] = scale * s;
    }
  auto an = a.node(), bnode = b.node();
  return Var<T>::make(std::move(out), {a, b}, [an, bnode, Ca, Cb, P, scale](Node<T>& o) {
    for (int i = 0; i < Ca; ++i)
      for (int j = 0; j < Cb; ++j) {
        const T g = scale * o.grad[static_cast<std::size_t>(i) * Cb + j];
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (std::size_t p = 0; p < P; ++p) ga[i * P + p] += g * bnode->value[j * P + p];
        }
        if (bnode->requires_grad) {
          auto& gb = bnode->ensure_grad();
          for (std::size_t p = 0; p < P; ++p) gb[j * P + p] += g * an->value[i * P + p];
        }
      }
  });
}

/// out(i,p) = sum_j m(i,j) s(j,p); m: (Co,Ci,1), s: (Ci,H,W) -> (Co,H,W).
template <class T>
Var<T> channel_mix(const Var<T>& m, const Var<T>& s) {
  const auto& mv = m.value();
  const auto& sv = s.value();
  require(mv.rank() == 3 && mv.width() == 1 && mv.height() == sv.channels(), "channel_mix: shape mismatch");
  const int Co = mv.channels(), Ci = mv.height();
  const std::size_t P = sv.plane();
  Tensor<T> out = Tensor<T>::chw(Co, sv.height(), sv.width());
  for (int i = 0; i < Co; ++i)
    for (int j = 0; j < Ci; ++j) {
      const T mij = mv[static_cast<std::size_t>(i) * Ci + j];
      for (std::size_t p = 0; p < P; ++p) out[i * P + p] += mij * sv[j * P + p];
    }
  auto mn = m.node(), sn = s.node();
  return Var<T>::make(std::move(out), {m, s}, [mn, sn, Co, Ci, P](Node<T>& o) {
    for (int i = 0; i < Co; ++i)
      for (int j = 0; j < Ci; ++j) {
        const std::size_t ij = static_cast<std::size_t>(i) * Ci + j;
        if (mn->requires_grad) {
          T acc = 0;
          for (std::size_t p = 0; p < P; ++p) acc += o.grad[i * P + p] * sn->value[j * P + p];
          mn->ensure_grad()[ij] += acc;
        }
        if (sn->requires_grad) {
          auto& gs = sn->ensure_grad();
          const T mij = mn->value[ij];
          for (std::size_t p = 0; p < P; ++p) gs[j * P + p] += mij * o.grad[i * P + p];
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel centers (align_corners = false).
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w) {
  const auto& xv = x.value();
  const int C = xv.channels(), H = xv.height(), W = xv.width();
  struct Tap {
    int i0, i1;
    T l;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(out);
    const double s = double(in) / double(out);
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      int i0 = static_cast<int>(src);
      if (i0 > in - 1) i0 = in - 1;
      const int i1 = i0 < in - 1 ? i0 + 1 : i0;
      t[o] = {i0, i1, static_cast<T>(src - i0)};
    }
    return t;
  };
  auto ty = taps(H, out_h), tx = taps(W, out_w);
  Tensor<T> out = Tensor<T>::chw(C, out_h, out_w);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int xo = 0; xo < out_w; ++xo) {
        const auto& a = ty[y];
        const auto& b = tx[xo];
        out(c, y, xo) = (1 - a.l) * ((1 - b.l) * xv(c, a.i0, b.i0) + b.l * xv(c, a.i0, b.i1)) +
                        a.l * ((1 - b.l) * xv(c, a.i1, b.i0) + b.l * xv(c, a.i1, b.i1));
      }
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, ty = std::move(ty), tx = std::move(tx), C, out_h, out_w](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < out_h; ++y)
        for (int xo = 0; xo < out_w; ++xo) {
          const auto& a = ty[y];
          const auto& b = tx[xo];
          const T gv = o.grad(c, y, xo);
          g(c, a.i0, b.i0) += gv * (1 - a.l) * (1 - b.l);
          g(c, a.i0, b.i1) += gv * (1 - a.l) * b.l;
          g(c, a.i1, b.i0) += gv * a.l * (1 - b.l);
          g(c, a.i1, b.i1) += gv * a.l * b.l;
        }
  });
}

/// Non-overlapping max pooling by an integer factor.
template <class T>
Var<T> max_pool(const Var<T>& x, int factor) {
  const auto& xv = x.value();
  const int C = xv.channels(), H = xv.height(), W = xv.width();
  require(factor >= 1 && H % factor == 0 && W % factor == 0, "max_pool: size not divisible by factor");
  const int OH = H / factor, OW = W / factor;
  Tensor<T> out = Tensor<T>::chw(C, OH, OW);
  std::vector<std::size_t> arg(out.size());
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t bi = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) {
            const std::size_t i = (static_cast<std::size_t>(c) * H + oy * factor + dy) * W + ox * factor + dx;
            if (xv[i] > best) best = xv[i], bi = i;
          }
        const std::size_t oi = (static_cast<std::size_t>(c) * OH + oy) * OW + ox;
        out[oi] = best;
        arg[oi] = bi;
      }
  auto xn = x.node();
  return Var<T>::make(std::move(out), {x}, [xn, arg = std::move(arg)](Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += o.grad[i];
  });
}

}  // namespace ops
}  // namespace roadseg
