#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a handle to a graph node. Ops only record a backward closure when
// at least one input requires a gradient, so inference through frozen
// networks builds no graph at all.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stylseg/error.hpp"
#include "stylseg/tensor.hpp"

namespace stylseg {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long trajectories build deep parent chains; unlink them iteratively so
  // destruction does not recurse once per graph level.
  // Closures also hold parent handles, so they are dropped before the
  // parents list.
  ~Node() {
    backward = nullptr;
    std::vector<std::shared_ptr<Node>> stack = std::move(parents);
    while (!stack.empty()) {
      std::shared_ptr<Node> p = std::move(stack.back());
      stack.pop_back();
      if (p && p.use_count() == 1) {
        p->backward = nullptr;
        for (auto& q : p->parents) stack.push_back(std::move(q));
        p->parents.clear();
      }
    }
  }

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<T> value) {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    return v;
  }
  static Var parameter(Tensor<T> value) {
    Var v = constant(std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Mutable access for optimizers and loaders; only valid on leaves.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  T item() const {
    if (node_->value.size() != 1) throw InputError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw InputError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Accumulated gradient; zeros if backward never reached this node.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(shape(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Var detach() const { return constant(node_->value); }

  /// Backpropagates from a scalar. Gradients accumulate on leaves; interior
  /// gradients are released once consumed.
  void backward() const {
    if (node_->value.size() != 1) throw InputError("backward() requires a scalar output");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, bool>> stack{{node_.get(), false}};
    while (!stack.empty()) {
      auto [n, expanded] = stack.back();
      stack.pop_back();
      if (expanded) {
        order.push_back(n);
        continue;
      }
      if (!seen.insert(n).second) continue;
      stack.push_back({n, true});
      for (auto& p : n->parents) {
        if (p->requires_grad && !seen.count(p.get())) stack.push_back({p.get(), false});
      }
    }
    node_->grad_buffer().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->is_leaf || !n->backward || n->grad.empty()) continue;
      n->backward(n->grad);
      n->grad = Tensor<T>();
    }
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const Var<T>* v : inputs) {
    if (v->defined() && v->requires_grad()) return true;
  }
  return false;
}

/// Wraps an op result, wiring the backward closure when needed.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
                   Backward&& backward) {
  Var<T> out = Var<T>::constant(std::move(value));
  if (any_requires_grad<T>(inputs)) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    for (const Var<T>* v : inputs) {
      if (v->defined() && v->requires_grad()) n->parents.push_back(v->node_ptr());
    }
    n->backward = std::forward<Backward>(backward);
  }
  return out;
}

template <typename T>
bool wants(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

template <typename T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
  Tensor<T>& buf = v.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Var<T> axpby(const Var<T>& a, T alpha, const Var<T>& b, T beta) {
  require_same_shape(a.shape(), b.shape(), "axpby");
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta * bv[i];
  return detail::make_result<T>(std::move(out), {&a, &b}, [a, b, alpha, beta](const Tensor<T>& g) {
    if (detail::wants(a)) {
      Tensor<T>& ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
    }
    if (detail::wants(b)) {
      Tensor<T>& gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return axpby(a, T(1), b, T(1));
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return axpby(a, T(1), b, T(-1));
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return detail::make_result<T>(std::move(out), {&a}, [a, s](const Tensor<T>& g) {
    Tensor<T>& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result<T>(std::move(out), {&a, &b}, [a, b](const Tensor<T>& g) {
    if (detail::wants(a)) {
      Tensor<T>& ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (detail::wants(b)) {
      Tensor<T>& gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  return detail::make_result<T>(std::move(out), {&a}, [a](const Tensor<T>& g) {
    const auto& x = a.value();
    Tensor<T>& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return detail::make_result<T>(std::move(out), {&a}, [a](const Tensor<T>& g) {
    const auto& x = a.value();
    Tensor<T>& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T(0)) ga[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  Tensor<T> saved = out;
  return detail::make_result<T>(std::move(out), {&a}, [a, saved](const Tensor<T>& g) {
    Tensor<T>& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i] * (T(1) - saved[i]);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return detail::make_result<T>(std::move(out), {&a}, [a](const Tensor<T>& g) {
    Tensor<T>& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// x[N,C,H,W] + bias[N,C] broadcast over the spatial dims.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  const int n = x.value().dim(0), c = x.value().dim(1);
  const std::size_t hw = x.value().size() / (static_cast<std::size_t>(n) * c);
  if (bias.shape() != Shape{n, c}) {
    throw InputError("add_channel_bias: bias shape " + shape_str(bias.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (int i = 0; i < n * c; ++i) {
    const T b = bias.value()[i];
    T* p = out.data() + i * hw;
    for (std::size_t k = 0; k < hw; ++k) p[k] += b;
  }
  return detail::make_result<T>(std::move(out), {&x, &bias}, [x, bias, n, c, hw](const Tensor<T>& g) {
    if (detail::wants(x)) detail::accumulate(x, g);
    if (detail::wants(bias)) {
      Tensor<T>& gb = bias.node()->grad_buffer();
      for (int i = 0; i < n * c; ++i) {
        const T* p = g.data() + i * hw;
        T s = 0;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
        gb[i] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and resampling. Activations are [N,C,H,W].

namespace detail {

template <typename T>
void im2col(const T* in, int c, int h, int w, int k, T* col) {
  const int pad = k / 2;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          T* dst = row + y * w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = in + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int x = 0; x < x0; ++x) dst[x] = T(0);
          for (int x = x0; x < x1; ++x) dst[x] = src[x + dx];
          for (int x = std::max(x1, x0); x < w; ++x) dst[x] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int k, T* out) {
  const int pad = k / 2;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = out + (static_cast<std::size_t>(ci) * h + iy) * w;
          const T* src = row + y * w;
          for (int x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Same-padded stride-1 convolution; weight [O,C,K,K] with odd K, bias [O]
/// or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw InputError("conv2d: incompatible input " + shape_str(xs) + " and weight " + shape_str(ws));
  }
  if (bias.defined() && bias.shape() != Shape{ws[0]}) throw InputError("conv2d: bias shape");
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int o = ws[0], k = ws[2];
  const int ckk = c * k * k, hw = h * w;

  Tensor<T> out({n, o, h, w});
  AlignedVector<T> col(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
  detail::ConstMatMap<T> wm(weight.value().data(), o, ckk);
  for (int i = 0; i < n; ++i) {
    const T* xin = x.value().data() + static_cast<std::size_t>(i) * c * hw;
    const T* colp = xin;
    if (k != 1) {
      detail::im2col(xin, c, h, w, k, col.data());
      colp = col.data();
    }
    detail::ConstMatMap<T> cm(colp, ckk, hw);
    detail::MatMap<T> om(out.data() + static_cast<std::size_t>(i) * o * hw, o, hw);
    om.noalias() = wm * cm;
    if (bias.defined()) {
      for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bias.value()[oc];
    }
  }

  return detail::make_result<T>(std::move(out), {&x, &weight, &bias}, [x, weight, bias, n, c, h, w, o, k](const Tensor<T>& g) {
    const int ckk = c * k * k, hw = h * w;
    AlignedVector<T> col(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
    AlignedVector<T> dcol(static_cast<std::size_t>(ckk) * hw);
    detail::ConstMatMap<T> wm(weight.value().data(), o, ckk);
    const bool gx = detail::wants(x), gw = detail::wants(weight), gb = detail::wants(bias);
    for (int i = 0; i < n; ++i) {
      detail::ConstMatMap<T> gm(g.data() + static_cast<std::size_t>(i) * o * hw, o, hw);
      if (gw) {
        const T* xin = x.value().data() + static_cast<std::size_t>(i) * c * hw;
        const T* colp = xin;
        if (k != 1) {
          detail::im2col(xin, c, h, w, k, col.data());
          colp = col.data();
        }
        detail::ConstMatMap<T> cm(colp, ckk, hw);
        detail::MatMap<T> gwm(weight.node()->grad_buffer().data(), o, ckk);
        gwm.noalias() += gm * cm.transpose();
      }
      if (gb) {
        Tensor<T>& gbt = bias.node()->grad_buffer();
        for (int oc = 0; oc < o; ++oc) gbt[oc] += gm.row(oc).sum();
      }
      if (gx) {
        T* gxp = x.node()->grad_buffer().data() + static_cast<std::size_t>(i) * c * hw;
        if (k == 1) {
          detail::MatMap<T> gxm(gxp, c, hw);
          gxm.noalias() += wm.transpose() * gm;
        } else {
          detail::MatMap<T> dm(dcol.data(), ckk, hw);
          dm.noalias() = wm.transpose() * gm;
          detail::col2im_add(dcol.data(), c, h, w, k, gxp);
        }
      }
    }
  });
}

/// 2x2 average pooling; spatial dims must be even.
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw InputError("avg_pool2: needs even spatial dims, got " + shape_str(s));
  const int nc = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor<T> out({s[0], s[1], oh, ow});
  const T* in = x.value().data();
  for (int p = 0; p < nc; ++p) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const T* r0 = in + (static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx;
        out[(static_cast<std::size_t>(p) * oh + y) * ow + xx] = T(0.25) * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
    }
  }
  return detail::make_result<T>(std::move(out), {&x}, [x, nc, h, w, oh, ow](const Tensor<T>& g) {
    T* gx = x.node()->grad_buffer().data();
    for (int p = 0; p < nc; ++p) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          const T v = T(0.25) * g[(static_cast<std::size_t>(p) * oh + y) * ow + xx];
          T* r0 = gx + (static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx;
          r0[0] += v;
          r0[1] += v;
          r0[w] += v;
          r0[w + 1] += v;
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw InputError("upsample2: expected rank 4");
  const int nc = s[0] * s[1], h = s[2], w = s[3], oh = 2 * h, ow = 2 * w;
  Tensor<T> out({s[0], s[1], oh, ow});
  const T* in = x.value().data();
  for (int p = 0; p < nc; ++p) {
    for (int y = 0; y < oh; ++y) {
      const T* src = in + (static_cast<std::size_t>(p) * h + y / 2) * w;
      T* dst = out.data() + (static_cast<std::size_t>(p) * oh + y) * ow;
      for (int xx = 0; xx < ow; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return detail::make_result<T>(std::move(out), {&x}, [x, nc, h, w, oh, ow](const Tensor<T>& g) {
    T* gx = x.node()->grad_buffer().data();
    for (int p = 0; p < nc; ++p) {
      for (int y = 0; y < oh; ++y) {
        const T* src = g.data() + (static_cast<std::size_t>(p) * oh + y) * ow;
        T* dst = gx + (static_cast<std::size_t>(p) * h + y / 2) * w;
        for (int xx = 0; xx < ow; ++xx) dst[xx / 2] += src[xx];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw InputError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const int n = sa[0], ca = sa[1], cb = sb[1];
  const std::size_t hw = static_cast<std::size_t>(sa[2]) * sa[3];
  Tensor<T> out({n, ca + cb, sa[2], sa[3]});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return detail::make_result<T>(std::move(out), {&a, &b}, [a, b, n, ca, cb, hw](const Tensor<T>& g) {
    for (int i = 0; i < n; ++i) {
      const T* src = g.data() + i * (ca + cb) * hw;
      if (detail::wants(a)) {
        T* dst = a.node()->grad_buffer().data() + i * ca * hw;
        for (std::size_t k = 0; k < ca * hw; ++k) dst[k] += src[k];
      }
      if (detail::wants(b)) {
        T* dst = b.node()->grad_buffer().data() + i * cb * hw;
        for (std::size_t k = 0; k < cb * hw; ++k) dst[k] += src[ca * hw + k];
      }
    }
  });
}

/// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw InputError("global_avg_pool: expected rank 4");
  const int nc = s[0] * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out({s[0], s[1]});
  for (int p = 0; p < nc; ++p) {
    const T* src = x.value().data() + p * hw;
    T acc = 0;
    for (std::size_t k = 0; k < hw; ++k) acc += src[k];
    out[p] = acc / static_cast<T>(hw);
  }
  return detail::make_result<T>(std::move(out), {&x}, [x, nc, hw](const Tensor<T>& g) {
    T* gx = x.node()->grad_buffer().data();
    for (int p = 0; p < nc; ++p) {
      const T v = g[p] / static_cast<T>(hw);
      for (std::size_t k = 0; k < hw; ++k) gx[p * hw + k] += v;
    }
  });
}

/// x[N,D] W[O,D]^T + b[O]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) {
    throw InputError("linear: input " + shape_str(xs) + " weight " + shape_str(ws));
  }
  const int n = xs[0], d = xs[1], o = ws[0];
  Tensor<T> out({n, o});
  detail::ConstMatMap<T> xm(x.value().data(), n, d);
  detail::ConstMatMap<T> wm(weight.value().data(), o, d);
  detail::MatMap<T> om(out.data(), n, o);
  om.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) om(i, j) += bias.value()[j];
  }
  return detail::make_result<T>(std::move(out), {&x, &weight, &bias}, [x, weight, bias, n, d, o](const Tensor<T>& g) {
    detail::ConstMatMap<T> gm(g.data(), n, o);
    if (detail::wants(x)) {
      detail::MatMap<T> gx(x.node()->grad_buffer().data(), n, d);
      gx.noalias() += gm * detail::ConstMatMap<T>(weight.value().data(), o, d);
    }
    if (detail::wants(weight)) {
      detail::MatMap<T> gw(weight.node()->grad_buffer().data(), o, d);
      gw.noalias() += gm.transpose() * detail::ConstMatMap<T>(x.value().data(), n, d);
    }
    if (detail::wants(bias)) {
      Tensor<T>& gb = bias.node()->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) gb[j] += gm(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions (scalar outputs have shape [1])

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return detail::make_result<T>(Tensor<T>({1}, acc), {&a}, [a](const Tensor<T>& g) {
    Tensor<T>& ga = a.node()->grad_buffer();
    for (auto& v : ga.storage()) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// mean |a - b|
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  const std::size_t n = a.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  return detail::make_result<T>(Tensor<T>({1}, acc / static_cast<T>(n)), {&a, &b}, [a, b, n](const Tensor<T>& g) {
    const T s = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = a.value()[i] - b.value()[i];
      const T sg = diff > T(0) ? s : (diff < T(0) ? -s : T(0));
      if (detail::wants(a)) a.node()->grad_buffer()[i] += sg;
      if (detail::wants(b)) b.node()->grad_buffer()[i] -= sg;
    }
  });
}

/// mean (a - b)^2
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t n = a.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return detail::make_result<T>(Tensor<T>({1}, acc / static_cast<T>(n)), {&a, &b}, [a, b, n](const Tensor<T>& g) {
    const T s = T(2) * g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = s * (a.value()[i] - b.value()[i]);
      if (detail::wants(a)) a.node()->grad_buffer()[i] += d;
      if (detail::wants(b)) b.node()->grad_buffer()[i] -= d;
    }
  });
}

/// ||a - b||_2 over all entries. The subgradient at zero residual is zero.
template <typename T>
Var<T> l2_distance(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "l2_distance");
  const std::size_t n = a.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  const T norm = std::sqrt(acc);
  return detail::make_result<T>(Tensor<T>({1}, norm), {&a, &b}, [a, b, n, norm](const Tensor<T>& g) {
    if (norm == T(0)) return;
    const T s = g[0] / norm;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = s * (a.value()[i] - b.value()[i]);
      if (detail::wants(a)) a.node()->grad_buffer()[i] += d;
      if (detail::wants(b)) b.node()->grad_buffer()[i] -= d;
    }
  });
}

/// Cosine similarity of two equally-sized tensors viewed as flat vectors.
/// Returns 0 (with zero gradient) when either vector has zero norm.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "cosine_similarity");
  const std::size_t n = a.value().size();
  T dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.value()[i] * b.value()[i];
    na += a.value()[i] * a.value()[i];
    nb += b.value()[i] * b.value()[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool degenerate = na == T(0) || nb == T(0);
  const T cos = degenerate ? T(0) : std::clamp(dot / (na * nb), T(-1), T(1));
  return detail::make_result<T>(Tensor<T>({1}, cos), {&a, &b}, [a, b, n, na, nb, cos, degenerate](const Tensor<T>& g) {
    if (degenerate) return;
    for (std::size_t i = 0; i < n; ++i) {
      const T ai = a.value()[i], bi = b.value()[i];
      if (detail::wants(a)) a.node()->grad_buffer()[i] += g[0] * (bi / (na * nb) - cos * ai / (na * na));
      if (detail::wants(b)) b.node()->grad_buffer()[i] += g[0] * (ai / (na * nb) - cos * bi / (nb * nb));
    }
  });
}

/// Scales each row of x[N,D] to unit L2 norm.
template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  if (x.shape().size() != 2) throw InputError("normalize_rows: expected rank 2");
  const int n = x.shape()[0], d = x.shape()[1];
  Tensor<T> out(x.shape());
  std::vector<T> norms(n);
  for (int i = 0; i < n; ++i) {
    T s = 0;
    for (int j = 0; j < d; ++j) s += x.value()[i * d + j] * x.value()[i * d + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] / norms[i];
  }
  Tensor<T> saved = out;
  return detail::make_result<T>(std::move(out), {&x}, [x, saved, norms, n, d](const Tensor<T>& g) {
    Tensor<T>& gx = x.node()->grad_buffer();
    for (int i = 0; i < n; ++i) {
      T proj = 0;
      for (int j = 0; j < d; ++j) proj += g[i * d + j] * saved[i * d + j];
      for (int j = 0; j < d; ++j) gx[i * d + j] += (g[i * d + j] - proj * saved[i * d + j]) / norms[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Batch plumbing

/// Rows [begin, begin+count) of the leading axis.
template <typename T>
Var<T> slice_batch(const Var<T>& x, int begin, int count) {
  Shape s = x.shape();
  if (s.empty() || begin < 0 || count < 1 || begin + count > s[0]) {
    throw InputError("slice_batch: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of " + shape_str(s));
  }
  const std::size_t per = x.value().size() / static_cast<std::size_t>(s[0]);
  s[0] = count;
  Tensor<T> out(s);
  std::copy_n(x.value().data() + begin * per, count * per, out.data());
  return detail::make_result<T>(std::move(out), {&x}, [x, begin, count, per](const Tensor<T>& g) {
    T* gx = x.node()->grad_buffer().data() + begin * per;
    for (std::size_t k = 0; k < count * per; ++k) gx[k] += g[k];
  });
}

/// Stacks two tensors along the leading axis.
template <typename T>
Var<T> concat_batch(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw InputError("concat_batch: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape s = sa;
  s[0] += sb[0];
  Tensor<T> out(s);
  const std::size_t na = a.value().size(), nb = b.value().size();
  std::copy_n(a.value().data(), na, out.data());
  std::copy_n(b.value().data(), nb, out.data() + na);
  return detail::make_result<T>(std::move(out), {&a, &b}, [a, b, na, nb](const Tensor<T>& g) {
    if (detail::wants(a)) {
      T* ga = a.node()->grad_buffer().data();
      for (std::size_t k = 0; k < na; ++k) ga[k] += g[k];
    }
    if (detail::wants(b)) {
      T* gb = b.node()->grad_buffer().data();
      for (std::size_t k = 0; k < nb; ++k) gb[k] += g[na + k];
    }
  });
}

/// Repeats a single leading row n times: [1,...] -> [n,...].
template <typename T>
Var<T> tile_rows(const Var<T>& x, int n) {
  Shape s = x.shape();
  if (s.empty() || s[0] != 1 || n < 1) throw InputError("tile_rows: expected a leading axis of 1, got " + shape_str(s));
  if (n == 1) return x;
  const std::size_t per = x.value().size();
  s[0] = n;
  Tensor<T> out(s);
  for (int i = 0; i < n; ++i) std::copy_n(x.value().data(), per, out.data() + i * per);
  return detail::make_result<T>(std::move(out), {&x}, [x, n, per](const Tensor<T>& g) {
    T* gx = x.node()->grad_buffer().data();
    for (int i = 0; i < n; ++i)
      for (std::size_t k = 0; k < per; ++k) gx[k] += g[i * per + k];
  });
}

/// Mean over rows of -log softmax(logits[i])[target[i]].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || targets.size() != static_cast<std::size_t>(s[0])) {
    throw InputError("softmax_cross_entropy: logits " + shape_str(s) + " with " + std::to_string(targets.size()) +
                     " targets");
  }
  const int n = s[0], k = s[1];
  Tensor<T> prob(s);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= k) throw InputError("softmax_cross_entropy: target out of range");
    const T* row = logits.value().data() + static_cast<std::size_t>(i) * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < k; ++j) prob[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    loss += std::log(z) - static_cast<double>(row[targets[i]] - mx);
  }
  return detail::make_result<T>(Tensor<T>({1}, static_cast<T>(loss / n)), {&logits},
                                [logits, prob, targets, n, k](const Tensor<T>& g) {
                                  T* gl = logits.node()->grad_buffer().data();
                                  const T s = g[0] / static_cast<T>(n);
                                  for (int i = 0; i < n; ++i)
                                    for (int j = 0; j < k; ++j)
                                      gl[i * k + j] += s * (prob[i * k + j] - (j == targets[i] ? T(1) : T(0)));
                                });
}

}  // namespace stylseg
