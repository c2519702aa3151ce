#pragma once

// Minimal reverse-mode automatic differentiation over NHWC tensors.
//
// Every op produces a Node holding its value, links to its inputs and a
// backward closure that accumulates into the inputs' gradients. Nodes that
// do not depend on anything trainable drop their links, so inference graphs
// free intermediates as soon as they go out of scope.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fas/rng.hpp"
#include "fas/tensor.hpp"

namespace fas::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  const Tensor<T>* external = nullptr;  // parameter leaves borrow storage
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  const Tensor<T>& val() const { return external ? *external : value; }
  const Shape& shape() const { return val().shape; }
  const Tensor<T>& in(std::size_t i) const { return inputs[i]->val(); }
  bool has_grad() const { return !grad.empty(); }

  Tensor<T>& grad_buf() {
    if (grad.empty()) grad = Tensor<T>(val().shape);
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> variable(Tensor<T> value) {
  auto n = constant(std::move(value));
  n->requires_grad = true;
  return n;
}

template <typename T>
Var<T> borrow(const Tensor<T>& value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->external = &value;
  n->requires_grad = requires_grad;
  return n;
}

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return n;
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a->shape() == b->shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

template <typename T>
void check_rank(const Var<T>& a, int rank, const char* op) {
  require(a->val().rank() == rank, ErrorCode::ShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a->shape()));
}

}  // namespace detail

/// Runs reverse accumulation from `root`, seeding d(root) with ones.
template <typename T>
void backward(const Var<T>& root) {
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buf().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = a->val();
  const auto& bv = b->val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a->val();
  const auto& bv = b->val();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      const auto& other = self.in(1 - k);
      auto& g = in->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a->val();
  for (auto& v : out.data) v *= factor;
  return detail::make_op<T>(std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

/// Pointwise map with derivative expressed through input x and output y.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  const auto& av = a->val();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return detail::make_op<T>(std::move(out), {a}, [df](Node<T>& self) {
    const auto& x = self.in(0);
    const auto& y = self.value;
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], y[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> hardswish(const Var<T>& a) {
  return unary(
      a,
      [](T x) {
        if (x <= T(-3)) return T(0);
        if (x >= T(3)) return x;
        return x * (x + T(3)) / T(6);
      },
      [](T x, T) {
        if (x <= T(-3)) return T(0);
        if (x >= T(3)) return T(1);
        return (T(2) * x + T(3)) / T(6);
      });
}

template <typename T>
Var<T> hardsigmoid(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::clamp(x / T(6) + T(0.5), T(0), T(1)); },
      [](T x, T) { return (x > T(-3) && x < T(3)) ? T(1) / T(6) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// Inverted dropout; `keep` mask drawn from `rng`. Identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  const auto& av = a->val();
  auto mask = std::make_shared<std::vector<T>>(av.size());
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? T(0) : keep_scale;
    out[i] = av[i] * (*mask)[i];
  }
  return detail::make_op<T>(std::move(out), {a}, [mask](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(shape_numel(shape) == a->val().size(), ErrorCode::ShapeMismatch,
          "reshape " + shape_str(a->shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), a->val().data);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenation along the last axis; all leading dims must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat_last: no inputs");
  Shape lead = parts[0]->shape();
  lead.pop_back();
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p->shape();
    const int w = s.back();
    s.pop_back();
    require(s == lead, ErrorCode::ShapeMismatch, "concat_last: leading dims differ");
    widths.push_back(w);
    total += w;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  const std::size_t rows = shape_numel(lead);
  int offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k]->val();
    const int w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.ptr() + r * w, w, out.ptr() + r * total + offset);
    offset += w;
  }
  return detail::make_op<T>(std::move(out), parts, [widths, total, rows](Node<T>& self) {
    int off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const int w = widths[k];
      if (self.inputs[k]->requires_grad) {
        auto& g = self.inputs[k]->grad_buf();
        for (std::size_t r = 0; r < rows; ++r)
          for (int c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
      }
      off += w;
    }
  });
}

/// Columns [start, start+len) of the last axis.
template <typename T>
Var<T> slice_last(const Var<T>& a, int start, int len) {
  const auto& av = a->val();
  const int width = av.shape.back();
  require(start >= 0 && len > 0 && start + len <= width, ErrorCode::ShapeMismatch, "slice_last out of range");
  Shape s = av.shape;
  s.back() = len;
  Tensor<T> out(s);
  const std::size_t rows = av.size() / static_cast<std::size_t>(width);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.ptr() + r * width + start, len, out.ptr() + r * len);
  return detail::make_op<T>(std::move(out), {a}, [start, len, width, rows](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c) g[r * width + start + c] += self.grad[r * len + c];
  });
}

/// Row i of a rank-2 tensor, kept as [1, K].
template <typename T>
Var<T> row(const Var<T>& a, int i) {
  detail::check_rank(a, 2, "row");
  const auto& av = a->val();
  const int k = av.shape[1];
  require(i >= 0 && i < av.shape[0], ErrorCode::ShapeMismatch, "row index out of range");
  Tensor<T> out({1, k});
  std::copy_n(av.ptr() + static_cast<std::size_t>(i) * k, k, out.ptr());
  return detail::make_op<T>(std::move(out), {a}, [i, k](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (int c = 0; c < k; ++c) g[static_cast<std::size_t>(i) * k + c] += self.grad[c];
  });
}

/// Rows [start, start+len) of a rank-2 tensor.
template <typename T>
Var<T> slice_rows(const Var<T>& a, int start, int len) {
  detail::check_rank(a, 2, "slice_rows");
  const auto& av = a->val();
  const int k = av.shape[1];
  require(start >= 0 && len > 0 && start + len <= av.shape[0], ErrorCode::ShapeMismatch, "slice_rows out of range");
  const std::size_t off = static_cast<std::size_t>(start) * k, n = static_cast<std::size_t>(len) * k;
  Tensor<T> out({len, k});
  std::copy_n(av.ptr() + off, n, out.ptr());
  return detail::make_op<T>(std::move(out), {a}, [off, n](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < n; ++i) g[off + i] += self.grad[i];
  });
}

/// Stacks equally shaped [1, K] rows into [M, K].
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  require(!rows.empty(), ErrorCode::ShapeMismatch, "stack_rows: no inputs");
  const int k = rows[0]->val().shape.back();
  Tensor<T> out({static_cast<int>(rows.size()), k});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r]->val().size() == static_cast<std::size_t>(k), ErrorCode::ShapeMismatch, "stack_rows width");
    std::copy_n(rows[r]->val().ptr(), k, out.ptr() + r * k);
  }
  return detail::make_op<T>(std::move(out), rows, [k](Node<T>& self) {
    for (std::size_t r = 0; r < self.inputs.size(); ++r) {
      if (!self.inputs[r]->requires_grad) continue;
      auto& g = self.inputs[r]->grad_buf();
      for (int c = 0; c < k; ++c) g[c] += self.grad[r * k + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layers

/// x [M, K] times w[O, K]^T plus b[O] -> [M, O]. `b` may be null.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// ---------------------------------------------------------------------------
// Convolutions (NHWC activations, [Cout, Cin, kh, kw] weights)

inline int conv_out_size(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Patch matrix [N*Ho*Wo, kh*kw*Ci] with zero padding; patch element order
/// (ky, kx, ci) matches a [Co, kh, kw, Ci] weight layout.
template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo, Buffer<T>& cols) {
  const int n = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3];
  const std::size_t width = static_cast<std::size_t>(kh) * kw * ci;
  cols.assign(static_cast<std::size_t>(n) * ho * wo * width, T(0));
  for (int s = 0; s < n; ++s)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T* dst = cols.data() + ((static_cast<std::size_t>(s) * ho + oy) * wo + ox) * width;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            std::copy_n(&x.at(s, iy, ix, 0), ci, dst + (static_cast<std::size_t>(ky) * kw + kx) * ci);
          }
        }
      }
}

template <typename T>
void col2im_add(const Buffer<T>& cols, int kh, int kw, int stride, int pad, int ho, int wo, Tensor<T>& gx) {
  const int n = gx.shape[0], h = gx.shape[1], w = gx.shape[2], ci = gx.shape[3];
  const std::size_t width = static_cast<std::size_t>(kh) * kw * ci;
  for (int s = 0; s < n; ++s)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const T* src = cols.data() + ((static_cast<std::size_t>(s) * ho + oy) * wo + ox) * width;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            T* dst = &gx.at(s, iy, ix, 0);
            const T* seg = src + (static_cast<std::size_t>(ky) * kw + kx) * ci;
            for (int c = 0; c < ci; ++c) dst[c] += seg[c];
          }
        }
      }
}

/// [Co, Ci, kh, kw] <-> [Co, kh, kw, Ci]
template <typename T>
Buffer<T> weight_to_patch_order(const Tensor<T>& w) {
  const int co = w.shape[0], ci = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  Buffer<T> out(w.size());
  for (int o = 0; o < co; ++o)
    for (int c = 0; c < ci; ++c)
      for (int k = 0; k < kh * kw; ++k)
        out[(static_cast<std::size_t>(o) * kh * kw + k) * ci + c] = w[(static_cast<std::size_t>(o) * ci + c) * kh * kw + k];
  return out;
}

}  // namespace detail

/// Dense 2-D convolution as patch-matrix GEMM. `b` may be null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::check_rank(x, 4, "conv2d");
  const auto& xv = x->val();
  const auto& wv = w->val();
  const int n = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], ci = xv.shape[3];
  require(wv.rank() == 4 && wv.shape[1] == ci, ErrorCode::ChannelMismatch,
          "conv2d weight " + shape_str(wv.shape) + " for input " + shape_str(xv.shape));
  const int co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  const int ho = conv_out_size(h, kh, stride, pad), wo = conv_out_size(wd, kw, stride, pad);
  require(ho > 0 && wo > 0, ErrorCode::BadSpatialSize, "conv2d output would be empty");
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
  const int rows = n * ho * wo;
  const int width = kh * kw * ci;

  auto cols = std::make_shared<Buffer<T>>();
  if (!pointwise) detail::im2col(xv, kh, kw, stride, pad, ho, wo, *cols);
  const T* patches = pointwise ? xv.ptr() : cols->data();
  Buffer<T> wp = pointwise ? wv.data : detail::weight_to_patch_order(wv);

  Tensor<T> out({n, ho, wo, co});
  detail::MatMap<T> om(out.ptr(), rows, co);
  detail::ConstMatMap<T> pm(patches, rows, width);
  detail::ConstMatMap<T> wm(wp.data(), co, width);
  om.noalias() = pm * wm.transpose();
  if (b) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(b->val().ptr(), co);
    om.rowwise() += bm;
  }

  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(b);
  return detail::make_op<T>(std::move(out), std::move(ins), [=](Node<T>& self) {
    const auto& xv = self.in(0);
    const auto& wv = self.in(1);
    detail::ConstMatMap<T> gm(self.grad.ptr(), rows, co);
    const T* patches = pointwise ? xv.ptr() : cols->data();
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buf();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbm(gb.ptr(), co);
      gbm += gm.colwise().sum();
    }
    if (self.inputs[1]->requires_grad) {
      auto& gw = self.inputs[1]->grad_buf();
      detail::RowMat<T> gwp = gm.transpose() * detail::ConstMatMap<T>(patches, rows, width);
      if (pointwise) {
        detail::MatMap<T>(gw.ptr(), co, width) += gwp;
      } else {
        for (int o = 0; o < co; ++o)
          for (int c = 0; c < ci; ++c)
            for (int k = 0; k < kh * kw; ++k)
              gw[(static_cast<std::size_t>(o) * ci + c) * kh * kw + k] += gwp(o, k * ci + c);
      }
    }
    if (self.inputs[0]->requires_grad) {
      auto& gx = self.inputs[0]->grad_buf();
      const Buffer<T> wp = pointwise ? wv.data : detail::weight_to_patch_order(wv);
      detail::ConstMatMap<T> wm(wp.data(), co, width);
      if (pointwise) {
        detail::MatMap<T>(gx.ptr(), rows, width).noalias() += gm * wm;
      } else {
        Buffer<T> gcols(static_cast<std::size_t>(rows) * width);
        detail::MatMap<T>(gcols.data(), rows, width).noalias() = gm * wm;
        detail::col2im_add(gcols, kh, kw, stride, pad, ho, wo, gx);
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::check_rank(x, 2, "linear");
  const auto& xv = x->val();
  const auto& wv = w->val();
  const int m = xv.shape[0], k = xv.shape[1], o = wv.shape[0];
  require(wv.rank() == 2 && wv.shape[1] == k, ErrorCode::ShapeMismatch,
          "linear weight " + shape_str(wv.shape) + " for input " + shape_str(xv.shape));
  Tensor<T> out({m, o});
  detail::MatMap<T> om(out.ptr(), m, o);
  om.noalias() = detail::ConstMatMap<T>(xv.ptr(), m, k) * detail::ConstMatMap<T>(wv.ptr(), o, k).transpose();
  if (b) om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->val().ptr(), o);
  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(b);
  return detail::make_op<T>(std::move(out), std::move(ins), [m, k, o](Node<T>& self) {
    detail::ConstMatMap<T> gm(self.grad.ptr(), m, o);
    if (self.inputs[0]->requires_grad)
      detail::MatMap<T>(self.inputs[0]->grad_buf().ptr(), m, k).noalias() +=
          gm * detail::ConstMatMap<T>(self.in(1).ptr(), o, k);
    if (self.inputs[1]->requires_grad)
      detail::MatMap<T>(self.inputs[1]->grad_buf().ptr(), o, k).noalias() +=
          gm.transpose() * detail::ConstMatMap<T>(self.in(0).ptr(), m, k);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(self.inputs[2]->grad_buf().ptr(), o) += gm.colwise().sum();
  });
}

/// Depthwise convolution: weight [C, 1, k, k], one filter per channel.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::check_rank(x, 4, "depthwise_conv2d");
  const auto& xv = x->val();
  const auto& wv = w->val();
  const int n = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], c = xv.shape[3];
  require(wv.rank() == 4 && wv.shape[0] == c && wv.shape[1] == 1, ErrorCode::ChannelMismatch,
          "depthwise weight " + shape_str(wv.shape) + " for input " + shape_str(xv.shape));
  const int kh = wv.shape[2], kw = wv.shape[3];
  const int ho = conv_out_size(h, kh, stride, pad), wo = conv_out_size(wd, kw, stride, pad);
  require(ho > 0 && wo > 0, ErrorCode::BadSpatialSize, "depthwise output would be empty");

  Buffer<T> wt(wv.size());  // [kh][kw][c]
  for (int ch = 0; ch < c; ++ch)
    for (int k = 0; k < kh * kw; ++k) wt[static_cast<std::size_t>(k) * c + ch] = wv[static_cast<std::size_t>(ch) * kh * kw + k];

  Tensor<T> out({n, ho, wo, c});
  for (int s = 0; s < n; ++s)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T* orow = &out.at(s, oy, ox, 0);
        if (b) std::copy_n(b->val().ptr(), c, orow);
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            const T* irow = &xv.at(s, iy, ix, 0);
            const T* wr = wt.data() + (static_cast<std::size_t>(ky) * kw + kx) * c;
            for (int ch = 0; ch < c; ++ch) orow[ch] += irow[ch] * wr[ch];
          }
        }
      }

  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(b);
  return detail::make_op<T>(std::move(out), std::move(ins), [=, wt = std::move(wt)](Node<T>& self) {
    const auto& xv = self.in(0);
    const auto& g = self.grad;
    const bool need_w = self.inputs[1]->requires_grad;
    const bool need_b = self.inputs.size() > 2 && self.inputs[2]->requires_grad;
    Tensor<T>* gx = self.inputs[0]->requires_grad ? &self.inputs[0]->grad_buf() : nullptr;
    Tensor<T>* gb = need_b ? &self.inputs[2]->grad_buf() : nullptr;
    Buffer<T> gwt(need_w ? wt.size() : 0, T(0));
    for (int s = 0; s < n; ++s)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T* grow = &g.at(s, oy, ox, 0);
          if (gb)
            for (int ch = 0; ch < c; ++ch) (*gb)[ch] += grow[ch];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t koff = (static_cast<std::size_t>(ky) * kw + kx) * c;
              if (need_w) {
                const T* irow = &xv.at(s, iy, ix, 0);
                T* gr = gwt.data() + koff;
                for (int ch = 0; ch < c; ++ch) gr[ch] += irow[ch] * grow[ch];
              }
              if (gx) {
                T* gxrow = &gx->at(s, iy, ix, 0);
                const T* wr = wt.data() + koff;
                for (int ch = 0; ch < c; ++ch) gxrow[ch] += grow[ch] * wr[ch];
              }
            }
          }
        }
    if (need_w) {
      auto& gw = self.inputs[1]->grad_buf();
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < kh * kw; ++k)
          gw[static_cast<std::size_t>(ch) * kh * kw + k] += gwt[static_cast<std::size_t>(k) * c + ch];
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// [N, H, W, C] -> [N, C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::check_rank(x, 4, "global_avg_pool");
  const auto& xv = x->val();
  const int n = xv.shape[0], hw = xv.shape[1] * xv.shape[2], c = xv.shape[3];
  Tensor<T> out({n, c});
  const T inv = T(1) / static_cast<T>(hw);
  for (int s = 0; s < n; ++s) {
    T* o = out.ptr() + static_cast<std::size_t>(s) * c;
    const T* src = xv.ptr() + static_cast<std::size_t>(s) * hw * c;
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) o[ch] += src[static_cast<std::size_t>(p) * c + ch];
    for (int ch = 0; ch < c; ++ch) o[ch] *= inv;
  }
  return detail::make_op<T>(std::move(out), {x}, [n, hw, c, inv](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (int s = 0; s < n; ++s) {
      const T* go = self.grad.ptr() + static_cast<std::size_t>(s) * c;
      T* dst = g.ptr() + static_cast<std::size_t>(s) * hw * c;
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) dst[static_cast<std::size_t>(p) * c + ch] += go[ch] * inv;
    }
  });
}

/// Multiplies every pixel of sample n, channel c by s[n, c].
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  detail::check_rank(x, 4, "scale_channels");
  const auto& xv = x->val();
  const auto& sv = s->val();
  const int n = xv.shape[0], hw = xv.shape[1] * xv.shape[2], c = xv.shape[3];
  require(sv.size() == static_cast<std::size_t>(n) * c, ErrorCode::ShapeMismatch, "scale_channels");
  Tensor<T> out(xv.shape);
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p) {
      const std::size_t off = (static_cast<std::size_t>(b) * hw + p) * c;
      for (int ch = 0; ch < c; ++ch) out[off + ch] = xv[off + ch] * sv[static_cast<std::size_t>(b) * c + ch];
    }
  return detail::make_op<T>(std::move(out), {x, s}, [n, hw, c](Node<T>& self) {
    const auto& xv = self.in(0);
    const auto& sv = self.in(1);
    Tensor<T>* gx = self.inputs[0]->requires_grad ? &self.inputs[0]->grad_buf() : nullptr;
    Tensor<T>* gs = self.inputs[1]->requires_grad ? &self.inputs[1]->grad_buf() : nullptr;
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < hw; ++p) {
        const std::size_t off = (static_cast<std::size_t>(b) * hw + p) * c;
        for (int ch = 0; ch < c; ++ch) {
          const T gv = self.grad[off + ch];
          if (gx) (*gx)[off + ch] += gv * sv[static_cast<std::size_t>(b) * c + ch];
          if (gs) (*gs)[static_cast<std::size_t>(b) * c + ch] += gv * xv[off + ch];
        }
      }
  });
}

/// Nearest-neighbour resize of [N, h, w, C] to [N, H, W, C]; source index
/// floor(dst * h / H).
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int out_h, int out_w) {
  detail::check_rank(x, 4, "upsample_nearest");
  const auto& xv = x->val();
  const int n = xv.shape[0], h = xv.shape[1], w = xv.shape[2], c = xv.shape[3];
  std::vector<int> sy(out_h), sx(out_w);
  for (int y = 0; y < out_h; ++y) sy[y] = static_cast<int>(static_cast<long long>(y) * h / out_h);
  for (int x0 = 0; x0 < out_w; ++x0) sx[x0] = static_cast<int>(static_cast<long long>(x0) * w / out_w);
  Tensor<T> out({n, out_h, out_w, c});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < out_h; ++y)
      for (int x0 = 0; x0 < out_w; ++x0) std::copy_n(&xv.at(b, sy[y], sx[x0], 0), c, &out.at(b, y, x0, 0));
  return detail::make_op<T>(std::move(out), {x}, [n, out_h, out_w, c, sy, sx](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < out_h; ++y)
        for (int x0 = 0; x0 < out_w; ++x0) {
          const T* src = &self.grad.at(b, y, x0, 0);
          T* dst = &g.at(b, sy[y], sx[x0], 0);
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
  });
}

/// 2x2 max pooling with stride 2 (floor). Ties resolve to the first maximum
/// in row-major window order.
template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
  detail::check_rank(x, 4, "maxpool2x2");
  const auto& xv = x->val();
  const int n = xv.shape[0], h = xv.shape[1], w = xv.shape[2], c = xv.shape[3];
  const int ho = h / 2, wo = w / 2;
  require(ho > 0 && wo > 0, ErrorCode::BadSpatialSize, "maxpool2x2 on spatial size < 2");
  Tensor<T> out({n, ho, wo, c});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int ch = 0; ch < c; ++ch) {
          std::size_t best = ((static_cast<std::size_t>(b) * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((static_cast<std::size_t>(b) * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (xv[idx] > xv[best]) best = idx;
            }
          const std::size_t o = ((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * c + ch;
          out[o] = xv[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
  return detail::make_op<T>(std::move(out), {x}, [argmax](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

/// Bounds of adaptive pooling cell i out of `bins` over an axis of length n:
/// [floor(i*n/bins), ceil((i+1)*n/bins)). Never empty, overlaps when bins > n.
inline std::pair<int, int> adaptive_cell(int i, int bins, int n) {
  const int lo = (i * n) / bins;
  const int hi = ((i + 1) * n + bins - 1) / bins;
  return {lo, hi};
}

/// [N, H, W, C] -> [N, bins, bins, C] cell means.
template <typename T>
Var<T> adaptive_avg_pool(const Var<T>& x, int bins) {
  detail::check_rank(x, 4, "adaptive_avg_pool");
  const auto& xv = x->val();
  const int n = xv.shape[0], h = xv.shape[1], w = xv.shape[2], c = xv.shape[3];
  Tensor<T> out({n, bins, bins, c});
  for (int b = 0; b < n; ++b)
    for (int by = 0; by < bins; ++by)
      for (int bx = 0; bx < bins; ++bx) {
        const auto [y0, y1] = adaptive_cell(by, bins, h);
        const auto [x0, x1] = adaptive_cell(bx, bins, w);
        T* o = &out.at(b, by, bx, 0);
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) {
            const T* src = &xv.at(b, y, xx, 0);
            for (int ch = 0; ch < c; ++ch) o[ch] += src[ch];
          }
        const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int ch = 0; ch < c; ++ch) o[ch] *= inv;
      }
  return detail::make_op<T>(std::move(out), {x}, [n, h, w, c, bins](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int by = 0; by < bins; ++by)
        for (int bx = 0; bx < bins; ++bx) {
          const auto [y0, y1] = adaptive_cell(by, bins, h);
          const auto [x0, x1] = adaptive_cell(bx, bins, w);
          const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
          const T* go = &self.grad.at(b, by, bx, 0);
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) {
              T* dst = &g.at(b, y, xx, 0);
              for (int ch = 0; ch < c; ++ch) dst[ch] += go[ch] * inv;
            }
        }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Per-channel batch normalisation over all of [N, H, W] of an NHWC tensor.
/// With `running_mean`/`running_var` set it normalises by those fixed
/// statistics; otherwise by the batch's own (biased) statistics, which are
/// also returned through `batch_mean`/`batch_var` when given.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                  const Tensor<T>* running_mean = nullptr, const Tensor<T>* running_var = nullptr,
                  std::vector<T>* batch_mean = nullptr, std::vector<T>* batch_var = nullptr) {
  detail::check_rank(x, 4, "batch_norm");
  const auto& xv = x->val();
  const int c = xv.shape[3];
  const std::size_t m = xv.size() / static_cast<std::size_t>(c);
  require(gamma->val().size() == static_cast<std::size_t>(c) && beta->val().size() == static_cast<std::size_t>(c),
          ErrorCode::ChannelMismatch, "batch_norm affine size");
  const bool fixed = running_mean != nullptr;
  std::vector<T> mean(c, T(0)), var(c, T(0));
  if (fixed) {
    require(running_var && running_mean->size() == static_cast<std::size_t>(c) &&
                running_var->size() == static_cast<std::size_t>(c),
            ErrorCode::ChannelMismatch, "batch_norm running statistics size");
    std::copy_n(running_mean->ptr(), c, mean.begin());
    std::copy_n(running_var->ptr(), c, var.begin());
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (int ch = 0; ch < c; ++ch) mean[ch] += xv[i * c + ch];
    for (auto& v : mean) v /= static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T d = xv[i * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(m);
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var;
  }
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (int ch = 0; ch < c; ++ch) (*inv_std)[ch] = T(1) / std::sqrt(var[ch] + eps);
  auto xhat = std::make_shared<Tensor<T>>(xv.shape);
  Tensor<T> out(xv.shape);
  const T* g = gamma->val().ptr();
  const T* b = beta->val().ptr();
  for (std::size_t i = 0; i < m; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t k = i * c + ch;
      const T h = (xv[k] - mean[ch]) * (*inv_std)[ch];
      (*xhat)[k] = h;
      out[k] = g[ch] * h + b[ch];
    }
  return detail::make_op<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const auto& gy = self.grad;
    std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
    for (std::size_t i = 0; i < m; ++i)
      for (int ch = 0; ch < c; ++ch) {
        sum_g[ch] += gy[i * c + ch];
        sum_gh[ch] += gy[i * c + ch] * (*xhat)[i * c + ch];
      }
    if (self.inputs[1]->requires_grad) {
      auto& gg = self.inputs[1]->grad_buf();
      for (int ch = 0; ch < c; ++ch) gg[ch] += sum_gh[ch];
    }
    if (self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buf();
      for (int ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
    }
    if (self.inputs[0]->requires_grad) {
      auto& gx = self.inputs[0]->grad_buf();
      const T* gm = self.in(1).ptr();
      const T inv_m = T(1) / static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t k = i * c + ch;
          const T scale = gm[ch] * (*inv_std)[ch];
          gx[k] += fixed ? scale * gy[k] : scale * (gy[k] - inv_m * sum_g[ch] - (*xhat)[k] * inv_m * sum_gh[ch]);
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x->val().data) acc += v;
  return detail::make_op<T>(Tensor<T>({1}, std::vector<T>{acc}), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (auto& v : g.data) v += self.grad[0];
  });
}

/// sum(x * weights) with constant weights; a random projection for gradient checks.
template <typename T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& weights) {
  require(x->val().size() == weights.size(), ErrorCode::ShapeMismatch, "dot_const");
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x->val()[i] * weights[i];
  return detail::make_op<T>(Tensor<T>({1}, std::vector<T>{acc}), {x}, [weights](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const int m = logits.shape[0], c = logits.shape[1];
  Tensor<T> p(logits.shape);
  for (int r = 0; r < m; ++r) {
    const T* l = logits.ptr() + static_cast<std::size_t>(r) * c;
    T* o = p.ptr() + static_cast<std::size_t>(r) * c;
    const T mx = *std::max_element(l, l + c);
    T z = 0;
    for (int j = 0; j < c; ++j) z += (o[j] = std::exp(l[j] - mx));
    for (int j = 0; j < c; ++j) o[j] /= z;
  }
  return p;
}

/// Mean cross-entropy of softmax(logits [M, C]) against integer targets.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  detail::check_rank(logits, 2, "softmax_cross_entropy");
  const int m = logits->val().shape[0], c = logits->val().shape[1];
  require(static_cast<int>(targets.size()) == m, ErrorCode::ShapeMismatch, "targets/logits rows");
  auto probs = std::make_shared<Tensor<T>>(softmax_rows(logits->val()));
  T loss = 0;
  for (int r = 0; r < m; ++r) loss -= std::log(std::max((*probs)[static_cast<std::size_t>(r) * c + targets[r]], T(1e-30)));
  loss /= static_cast<T>(m);
  return detail::make_op<T>(Tensor<T>({1}, std::vector<T>{loss}), {logits},
                            [probs, targets, m, c](Node<T>& self) {
                              auto& g = self.inputs[0]->grad_buf();
                              const T s = self.grad[0] / static_cast<T>(m);
                              for (int r = 0; r < m; ++r)
                                for (int j = 0; j < c; ++j) {
                                  const std::size_t i = static_cast<std::size_t>(r) * c + j;
                                  g[i] += s * ((*probs)[i] - (j == targets[r] ? T(1) : T(0)));
                                }
                            });
}

}  // namespace fas::ag
