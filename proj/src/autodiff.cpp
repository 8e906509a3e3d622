#include "refml/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "refml/error.hpp"
#include "refml/rng.hpp"

namespace refml::ad {
namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_fail(op, "operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

Tensor transpose2d(const Tensor& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out(Shape{c, r});
  auto in = t.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = in[i * c + j];
  return out;
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  const Tensor* lhs = &a;
  const Tensor* rhs = &b;
  Tensor lt, rt;
  if (ta) {
    lt = transpose2d(a);
    lhs = &lt;
  }
  if (tb) {
    rt = transpose2d(b);
    rhs = &rt;
  }
  const std::size_t m = lhs->dim(0), k = lhs->dim(1), n = rhs->dim(1);
  if (rhs->dim(0) != k) {
    shape_fail("matmul", "inner dimensions " + std::to_string(k) + " and " + std::to_string(rhs->dim(0)) + " differ");
  }
  Tensor out(Shape{m, n});
  auto A = lhs->data();
  auto B = rhs->data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor row_sum_kernel(const Tensor& x) {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{cols});
  auto in = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[c] += in[r * cols + c];
  return out;
}

Tensor broadcast_rows_kernel(const Tensor& v, std::size_t rows) {
  const std::size_t cols = v.numel();
  Tensor out(Shape{rows, cols});
  auto o = out.data();
  auto in = v.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(in.begin(), in.end(), o.begin() + static_cast<std::ptrdiff_t>(r * cols));
  return out;
}

Tensor add_bias_kernel(const Tensor& x, const Tensor& bias) {
  Tensor out = x;
  const std::size_t cols = bias.numel();
  auto o = out.data();
  auto b = bias.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i % cols];
  return out;
}

std::size_t conv_left_pad(std::size_t kernel) { return (kernel - 1) / 2; }

Tensor conv1d_forward(const Tensor& x, const Tensor& w) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  const std::size_t Cout = w.dim(0), K = w.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(conv_left_pad(K));
  Tensor y(Shape{B, Cout, L});
  auto X = x.data();
  auto W = w.data();
  auto Y = y.data();
  const auto sL = static_cast<std::ptrdiff_t>(L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      double* yrow = Y.data() + (b * Cout + co) * L;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* xrow = X.data() + (b * Cin + ci) * L;
        for (std::size_t k = 0; k < K; ++k) {
          const double wv = W[(co * Cin + ci) * K + k];
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
          const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -off);
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(sL, sL - off);
          for (std::ptrdiff_t t = t0; t < t1; ++t) yrow[t] += wv * xrow[t + off];
        }
      }
    }
  return y;
}

Tensor conv1d_grad_input(const Tensor& dy, const Tensor& w, const Shape& x_shape) {
  const std::size_t B = x_shape[0], Cin = x_shape[1], L = x_shape[2];
  const std::size_t Cout = w.dim(0), K = w.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(conv_left_pad(K));
  Tensor dx(x_shape);
  auto DY = dy.data();
  auto W = w.data();
  auto DX = dx.data();
  const auto sL = static_cast<std::ptrdiff_t>(L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      const double* grow = DY.data() + (b * Cout + co) * L;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        double* dxrow = DX.data() + (b * Cin + ci) * L;
        for (std::size_t k = 0; k < K; ++k) {
          const double wv = W[(co * Cin + ci) * K + k];
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
          const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -off);
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(sL, sL - off);
          for (std::ptrdiff_t t = t0; t < t1; ++t) dxrow[t + off] += wv * grow[t];
        }
      }
    }
  return dx;
}

Tensor conv1d_grad_weight(const Tensor& dy, const Tensor& x, const Shape& w_shape) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  const std::size_t Cout = w_shape[0], K = w_shape[2];
  const auto pad = static_cast<std::ptrdiff_t>(conv_left_pad(K));
  Tensor dw(w_shape);
  auto DY = dy.data();
  auto X = x.data();
  auto DW = dw.data();
  const auto sL = static_cast<std::ptrdiff_t>(L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      const double* grow = DY.data() + (b * Cout + co) * L;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* xrow = X.data() + (b * Cin + ci) * L;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
          const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -off);
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(sL, sL - off);
          // Four independent partial sums so the loop can be vectorised.
          double acc[4] = {0.0, 0.0, 0.0, 0.0};
          std::ptrdiff_t t = t0;
          for (; t + 4 <= t1; t += 4)
            for (std::ptrdiff_t j = 0; j < 4; ++j) acc[j] += grow[t + j] * xrow[t + j + off];
          for (; t < t1; ++t) acc[0] += grow[t] * xrow[t + off];
          DW[(co * Cin + ci) * K + k] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
      }
    }
  return dw;
}

void check_finite(std::string_view op, const Tensor& t) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
}

}  // namespace

std::string_view to_string(GradMode mode) { return mode == GradMode::first ? "first" : "second"; }

GradMode parse_grad_mode(std::string_view text) {
  if (text == "first") return GradMode::first;
  if (text == "second") return GradMode::second;
  throw ConfigError("grad_mode must be 'first' or 'second', got '" + std::string(text) + "'");
}

std::string_view to_string(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast_scalar: return "broadcast_scalar";
    case Op::reshape: return "reshape";
    case Op::matmul: return "matmul";
    case Op::linear: return "linear";
    case Op::add_bias: return "add_bias";
    case Op::row_sum: return "row_sum";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::relu: return "relu";
    case Op::relu_mask: return "relu_mask";
    case Op::conv1d: return "conv1d";
    case Op::batchnorm1d: return "batchnorm1d";
    case Op::maxpool1d: return "maxpool1d";
    case Op::softmax_xent: return "softmax_cross_entropy";
    case Op::xent_grad: return "xent_grad";
  }
  return "unknown";
}

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

NodeId Graph::input(Tensor value) {
  Node n;
  n.op = Op::input;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same("add", x, y);
  Tensor out = x;
  auto o = out.data();
  auto in = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += in[i];
  return push(Node{.op = Op::add, .value = std::move(out), .parents = {a, b}});
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same("sub", x, y);
  Tensor out = x;
  auto o = out.data();
  auto in = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= in[i];
  return push(Node{.op = Op::sub, .value = std::move(out), .parents = {a, b}});
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  Tensor out;
  if (x.same_shape(y)) {
    out = x;
    auto o = out.data();
    auto in = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= in[i];
  } else if (y.numel() == 1) {
    out = x;
    const double s = y[0];
    for (double& v : out.data()) v *= s;
  } else if (x.numel() == 1) {
    out = y;
    const double s = x[0];
    for (double& v : out.data()) v *= s;
  } else {
    shape_fail("mul", "operand shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " are not broadcastable");
  }
  return push(Node{.op = Op::mul, .value = std::move(out), .parents = {a, b}});
}

NodeId Graph::scale(NodeId a, double factor) {
  Tensor out = value(a);
  for (double& v : out.data()) v *= factor;
  return push(Node{.op = Op::scale, .value = std::move(out), .parents = {a}, .scalar = factor});
}

NodeId Graph::sum(NodeId a) {
  return push(Node{.op = Op::sum, .value = Tensor::scalar(refml::sum(value(a))), .parents = {a}});
}

NodeId Graph::mean(NodeId a) {
  const Tensor& x = value(a);
  return push(Node{.op = Op::mean,
                   .value = Tensor::scalar(refml::sum(x) / static_cast<double>(x.numel())),
                   .parents = {a}});
}

NodeId Graph::broadcast_scalar(NodeId s, Shape shape) {
  const Tensor& x = value(s);
  if (x.numel() != 1) shape_fail("broadcast_scalar", "operand must hold one element, got " + shape_str(x.shape()));
  return push(Node{.op = Op::broadcast_scalar, .value = Tensor(std::move(shape), x[0]), .parents = {s}});
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  return push(Node{.op = Op::reshape, .value = value(a).reshaped(std::move(shape)), .parents = {a}});
}

NodeId Graph::flatten(NodeId a) {
  const Tensor& x = value(a);
  if (x.rank() < 2) shape_fail("flatten", "input must have rank >= 2, got " + shape_str(x.shape()));
  return reshape(a, Shape{x.dim(0), x.numel() / x.dim(0)});
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
  Tensor out = matmul_kernel(value(a), value(b), transpose_a, transpose_b);
  return push(Node{.op = Op::matmul,
                   .value = std::move(out),
                   .parents = {a, b},
                   .transpose_a = transpose_a,
                   .transpose_b = transpose_b});
}

NodeId Graph::linear(NodeId x, NodeId w, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(bias);
  require_rank("linear", xv, 2, "input");
  require_rank("linear", wv, 2, "weight");
  if (xv.dim(1) != wv.dim(1)) {
    shape_fail("linear", "input width " + std::to_string(xv.dim(1)) + " does not match weight " + shape_str(wv.shape()));
  }
  if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
    shape_fail("linear", "bias " + shape_str(bv.shape()) + " does not match weight " + shape_str(wv.shape()));
  }
  Tensor out = add_bias_kernel(matmul_kernel(xv, wv, false, true), bv);
  return push(Node{.op = Op::linear, .value = std::move(out), .parents = {x, w, bias}});
}

NodeId Graph::add_bias(NodeId x, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require_rank("add_bias", xv, 2, "input");
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    shape_fail("add_bias", "bias " + shape_str(bv.shape()) + " does not match input " + shape_str(xv.shape()));
  }
  return push(Node{.op = Op::add_bias, .value = add_bias_kernel(xv, bv), .parents = {x, bias}});
}

NodeId Graph::row_sum(NodeId x) {
  require_rank("row_sum", value(x), 2, "input");
  return push(Node{.op = Op::row_sum, .value = row_sum_kernel(value(x)), .parents = {x}});
}

NodeId Graph::broadcast_rows(NodeId v, std::size_t rows) {
  require_rank("broadcast_rows", value(v), 1, "input");
  return push(Node{.op = Op::broadcast_rows, .value = broadcast_rows_kernel(value(v), rows), .parents = {v}});
}

NodeId Graph::relu(NodeId x) {
  Tensor out = value(x);
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return push(Node{.op = Op::relu, .value = std::move(out), .parents = {x}});
}

NodeId Graph::relu_mask(NodeId g, NodeId x) {
  const Tensor& gv = value(g);
  const Tensor& xv = value(x);
  require_same("relu_mask", gv, xv);
  Tensor out = gv;
  auto o = out.data();
  auto in = xv.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? o[i] : 0.0;
  return push(Node{.op = Op::relu_mask, .value = std::move(out), .parents = {g, x}});
}

NodeId Graph::conv1d(NodeId x, NodeId w) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  require_rank("conv1d", xv, 3, "input");
  require_rank("conv1d", wv, 3, "weight");
  if (xv.dim(1) != wv.dim(1)) {
    shape_fail("conv1d", "input channels " + std::to_string(xv.dim(1)) + " do not match weight " + shape_str(wv.shape()));
  }
  return push(Node{.op = Op::conv1d, .value = conv1d_forward(xv, wv), .parents = {x, w}});
}

NodeId Graph::batchnorm1d(NodeId x, NodeId gamma, NodeId beta) {
  const Tensor& xv = value(x);
  require_rank("batchnorm1d", xv, 3, "input");
  const std::size_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  if (value(gamma).shape() != Shape{C} || value(beta).shape() != Shape{C}) {
    shape_fail("batchnorm1d", "affine parameters must have shape [" + std::to_string(C) + "], got " +
                                  shape_str(value(gamma).shape()) + " and " + shape_str(value(beta).shape()));
  }
  if (B * L < 2) shape_fail("batchnorm1d", "needs at least two values per channel, got " + shape_str(xv.shape()));
  auto g = value(gamma).data();
  auto bt = value(beta).data();
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  std::vector<double> inv(C);
  auto X = xv.data();
  auto H = xhat.data();
  auto Y = out.data();
  const double m = static_cast<double>(B * L);
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) mu += X[(b * C + c) * L + t];
    mu /= m;
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const double d = X[(b * C + c) * L + t] - mu;
        var += d * d;
      }
    var /= m;
    inv[c] = 1.0 / std::sqrt(var + kBatchNormEps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (b * C + c) * L + t;
        H[i] = (X[i] - mu) * inv[c];
        Y[i] = g[c] * H[i] + bt[c];
      }
  }
  return push(Node{.op = Op::batchnorm1d,
                   .value = std::move(out),
                   .parents = {x, gamma, beta},
                   .saved = std::move(xhat),
                   .inv_std = std::move(inv)});
}

NodeId Graph::maxpool1d(NodeId x, std::size_t window, std::size_t stride) {
  const Tensor& xv = value(x);
  require_rank("maxpool1d", xv, 3, "input");
  if (window == 0 || stride == 0) shape_fail("maxpool1d", "window and stride must be positive");
  const std::size_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  if (L < window) {
    shape_fail("maxpool1d", "input length " + std::to_string(L) + " shorter than window " + std::to_string(window));
  }
  const std::size_t Lout = (L - window) / stride + 1;
  Tensor out(Shape{B, C, Lout});
  std::vector<std::size_t> idx(B * C * Lout);
  auto X = xv.data();
  auto Y = out.data();
  for (std::size_t r = 0; r < B * C; ++r)
    for (std::size_t o = 0; o < Lout; ++o) {
      std::size_t best = r * L + o * stride;
      for (std::size_t j = 1; j < window; ++j) {
        const std::size_t cand = r * L + o * stride + j;
        if (X[cand] > X[best]) best = cand;
      }
      Y[r * Lout + o] = X[best];
      idx[r * Lout + o] = best;
    }
  return push(Node{.op = Op::maxpool1d,
                   .value = std::move(out),
                   .parents = {x},
                   .window = window,
                   .stride = stride,
                   .indices = std::move(idx)});
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  const Tensor& z = value(logits);
  if (z.rank() != 1 && z.rank() != 2) {
    shape_fail("softmax_cross_entropy", "logits must be [N] or [B,N], got " + shape_str(z.shape()));
  }
  const std::size_t n = z.shape().back();
  const std::size_t rows = z.numel() / n;
  if (n < 2) shape_fail("softmax_cross_entropy", "needs at least 2 classes");
  if (labels.size() != rows) {
    shape_fail("softmax_cross_entropy",
               std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows of logits");
  }
  auto Z = z.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= n) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                       std::to_string(n) + " classes");
    }
    const double* row = Z.data() + r * n;
    const double m = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(row[c] - m);
    total += (m + std::log(s)) - row[labels[r]];
  }
  return push(Node{.op = Op::softmax_xent,
                   .value = Tensor::scalar(total / static_cast<double>(rows)),
                   .parents = {logits},
                   .labels = std::move(labels)});
}

NodeId Graph::xent_grad(NodeId logits, const std::vector<std::size_t>& labels) {
  const Tensor& z = value(logits);
  const std::size_t n = z.shape().back();
  const std::size_t rows = z.numel() / n;
  Tensor out = softmax_rows(z);
  auto o = out.data();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    o[r * n + labels[r]] -= 1.0;
    for (std::size_t c = 0; c < n; ++c) o[r * n + c] *= inv_rows;
  }
  return push(Node{.op = Op::xent_grad, .value = std::move(out), .parents = {logits}, .labels = labels});
}

// Tensor-valued vector-Jacobian product of node w.r.t. its parent_slot-th parent.
Tensor Graph::vjp(std::size_t id, std::size_t slot, const Tensor& up) const {
  const Node& n = nodes_[id];
  auto pv = [&](std::size_t s) -> const Tensor& { return nodes_[n.parents[s].index].value; };
  switch (n.op) {
    case Op::input:
      break;
    case Op::add:
      return up;
    case Op::sub: {
      if (slot == 0) return up;
      Tensor g = up;
      for (double& v : g.data()) v = -v;
      return g;
    }
    case Op::mul: {
      const Tensor& self = pv(slot);
      const Tensor& other = pv(1 - slot);
      if (self.same_shape(other)) {
        Tensor g = up;
        auto o = g.data();
        auto in = other.data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= in[i];
        return g;
      }
      if (self.numel() == 1) {
        double acc = 0.0;
        auto u = up.data();
        auto in = other.data();
        for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * in[i];
        return Tensor(self.shape(), acc);
      }
      Tensor g = up;
      const double s = other[0];
      for (double& v : g.data()) v *= s;
      return g;
    }
    case Op::scale: {
      Tensor g = up;
      for (double& v : g.data()) v *= n.scalar;
      return g;
    }
    case Op::sum:
      return Tensor(pv(0).shape(), up[0]);
    case Op::mean:
      return Tensor(pv(0).shape(), up[0] / static_cast<double>(pv(0).numel()));
    case Op::broadcast_scalar:
      return Tensor(pv(0).shape(), refml::sum(up));
    case Op::reshape:
      return up.reshaped(pv(0).shape());
    case Op::matmul: {
      const Tensor& a = pv(0);
      const Tensor& b = pv(1);
      const bool ta = n.transpose_a, tb = n.transpose_b;
      if (slot == 0) return ta ? matmul_kernel(b, up, tb, true) : matmul_kernel(up, b, false, !tb);
      return tb ? matmul_kernel(up, a, true, ta) : matmul_kernel(a, up, !ta, false);
    }
    case Op::linear:
      if (slot == 0) return matmul_kernel(up, pv(1), false, false);
      if (slot == 1) return matmul_kernel(up, pv(0), true, false);
      return row_sum_kernel(up);
    case Op::add_bias:
      return slot == 0 ? up : row_sum_kernel(up);
    case Op::row_sum:
      return broadcast_rows_kernel(up, pv(0).dim(0));
    case Op::broadcast_rows:
      return row_sum_kernel(up);
    case Op::relu:
    case Op::relu_mask: {
      const Tensor& x = n.op == Op::relu ? pv(0) : pv(1);
      Tensor g = up;
      auto o = g.data();
      auto in = x.data();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? o[i] : 0.0;
      return g;
    }
    case Op::conv1d:
      if (slot == 0) return conv1d_grad_input(up, pv(1), pv(0).shape());
      return conv1d_grad_weight(up, pv(0), pv(1).shape());
    case Op::batchnorm1d: {
      const Tensor& x = pv(0);
      const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
      auto U = up.data();
      auto H = n.saved.data();
      if (slot == 1 || slot == 2) {
        Tensor g(Shape{C});
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t) {
              const std::size_t i = (b * C + c) * L + t;
              acc += slot == 1 ? U[i] * H[i] : U[i];
            }
          g[c] = acc;
        }
        return g;
      }
      auto G = pv(1).data();
      Tensor dx(x.shape());
      auto DX = dx.data();
      const double m = static_cast<double>(B * L);
      for (std::size_t c = 0; c < C; ++c) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t i = (b * C + c) * L + t;
            s1 += U[i];
            s2 += U[i] * H[i];
          }
        const double k = G[c] * n.inv_std[c] / m;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t i = (b * C + c) * L + t;
            DX[i] = k * (m * U[i] - s1 - H[i] * s2);
          }
      }
      return dx;
    }
    case Op::maxpool1d: {
      Tensor g(pv(0).shape());
      auto o = g.data();
      auto u = up.data();
      for (std::size_t i = 0; i < n.indices.size(); ++i) o[n.indices[i]] += u[i];
      return g;
    }
    case Op::softmax_xent: {
      const Tensor& z = pv(0);
      const std::size_t cls = z.shape().back();
      const std::size_t rows = z.numel() / cls;
      Tensor g = softmax_rows(z);
      auto o = g.data();
      const double k = up[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        o[r * cls + n.labels[r]] -= 1.0;
        for (std::size_t c = 0; c < cls; ++c) o[r * cls + c] *= k;
      }
      return g;
    }
    case Op::xent_grad: {
      // Hessian-vector product of the mean cross entropy: (s*G - s(s.G)) / rows.
      const Tensor& z = pv(0);
      const std::size_t cls = z.shape().back();
      const std::size_t rows = z.numel() / cls;
      Tensor s = softmax_rows(z);
      Tensor g(z.shape());
      auto S = s.data();
      auto U = up.data();
      auto o = g.data();
      const double inv_rows = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cls; ++c) dot += S[r * cls + c] * U[r * cls + c];
        for (std::size_t c = 0; c < cls; ++c) o[r * cls + c] = S[r * cls + c] * (U[r * cls + c] - dot) * inv_rows;
      }
      return g;
    }
  }
  throw Error("backward: op " + std::string(to_string(n.op)) + " has no gradient");
}

// Graph-valued VJP, used when gradients must remain differentiable. Only the
// ops on the predictor path (dense layers, ReLU, loss) support this; the
// convolutional encoder is always frozen inside the meta step.
NodeId Graph::vjp_node(std::size_t id, std::size_t slot, NodeId up) {
  const Op op = nodes_[id].op;
  const std::vector<NodeId> parents = nodes_[id].parents;
  switch (op) {
    case Op::add:
      return up;
    case Op::sub:
      return slot == 0 ? up : scale(up, -1.0);
    case Op::mul: {
      const NodeId self = parents[slot];
      const NodeId other = parents[1 - slot];
      if (value(self).same_shape(value(other))) return mul(up, other);
      if (value(self).numel() == 1) {
        NodeId s = sum(mul(up, other));
        return value(self).rank() == 0 ? s : reshape(s, value(self).shape());
      }
      return mul(up, other);
    }
    case Op::scale:
      return scale(up, nodes_[id].scalar);
    case Op::sum:
      return broadcast_scalar(up, value(parents[0]).shape());
    case Op::mean:
      return scale(broadcast_scalar(up, value(parents[0]).shape()), 1.0 / static_cast<double>(value(parents[0]).numel()));
    case Op::broadcast_scalar: {
      NodeId s = sum(up);
      return value(parents[0]).rank() == 0 ? s : reshape(s, value(parents[0]).shape());
    }
    case Op::reshape:
      return reshape(up, value(parents[0]).shape());
    case Op::matmul: {
      const bool ta = nodes_[id].transpose_a, tb = nodes_[id].transpose_b;
      const NodeId a = parents[0], b = parents[1];
      if (slot == 0) return ta ? matmul(b, up, tb, true) : matmul(up, b, false, !tb);
      return tb ? matmul(up, a, true, ta) : matmul(a, up, !ta, false);
    }
    case Op::linear:
      if (slot == 0) return matmul(up, parents[1], false, false);
      if (slot == 1) return matmul(up, parents[0], true, false);
      return row_sum(up);
    case Op::add_bias:
      return slot == 0 ? up : row_sum(up);
    case Op::row_sum:
      return broadcast_rows(up, value(parents[0]).dim(0));
    case Op::broadcast_rows:
      return row_sum(up);
    case Op::relu:
      return relu_mask(up, parents[0]);
    case Op::relu_mask:
      return relu_mask(up, parents[1]);
    case Op::softmax_xent: {
      const std::vector<std::size_t> labels = nodes_[id].labels;
      return mul(xent_grad(parents[0], labels), up);
    }
    default:
      break;
  }
  throw Error("backward: second-order gradients are not supported through " + std::string(to_string(op)));
}

std::vector<bool> Graph::needed_mask(NodeId loss, std::span<const NodeId> wrt) const {
  const std::size_t n = loss.index + 1;
  if (loss.index >= nodes_.size()) throw Error("backward: loss node does not belong to this graph");
  if (nodes_[loss.index].value.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(nodes_[loss.index].value.shape()));
  }
  std::vector<bool> ancestor(n, false);
  ancestor[loss.index] = true;
  for (std::size_t i = n; i-- > 0;) {
    if (!ancestor[i]) continue;
    for (NodeId p : nodes_[i].parents) ancestor[p.index] = true;
  }
  std::vector<bool> descendant(n, false);
  for (NodeId w : wrt) {
    if (w.index >= n || !ancestor[w.index]) {
      throw Error("backward: node " + std::to_string(w.index) + " is not reachable from the loss");
    }
    descendant[w.index] = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (descendant[i]) continue;
    for (NodeId p : nodes_[i].parents) {
      if (descendant[p.index]) {
        descendant[i] = true;
        break;
      }
    }
  }
  std::vector<bool> needed(n);
  for (std::size_t i = 0; i < n; ++i) needed[i] = ancestor[i] && descendant[i];
  return needed;
}

std::vector<Tensor> Graph::backward(NodeId loss, std::span<const NodeId> wrt) {
  const std::vector<bool> needed = needed_mask(loss, wrt);
  std::vector<std::optional<Tensor>> grads(loss.index + 1);
  grads[loss.index] = Tensor(nodes_[loss.index].value.shape(), 1.0);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!grads[i] || nodes_[i].op == Op::input) continue;
    const Node& n = nodes_[i];
    for (std::size_t s = 0; s < n.parents.size(); ++s) {
      const std::size_t p = n.parents[s].index;
      if (!needed[p]) continue;
      if (n.op == Op::relu_mask && s == 1) continue;
      Tensor g = vjp(i, s, *grads[i]);
      if (!grads[p]) {
        grads[p] = std::move(g);
      } else {
        auto dst = grads[p]->data();
        auto src = g.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
    if (std::find(wrt.begin(), wrt.end(), NodeId{i}) == wrt.end()) grads[i].reset();
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    Tensor g = grads[w.index] ? *grads[w.index] : Tensor(nodes_[w.index].value.shape());
    check_finite("backward", g);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<NodeId> Graph::grad(NodeId loss, std::span<const NodeId> wrt, GradMode mode) {
  if (mode == GradMode::first) {
    std::vector<NodeId> out;
    for (Tensor& g : backward(loss, wrt)) out.push_back(input(std::move(g)));
    return out;
  }
  const std::vector<bool> needed = needed_mask(loss, wrt);
  std::vector<std::optional<NodeId>> grads(loss.index + 1);
  grads[loss.index] = input(Tensor(nodes_[loss.index].value.shape(), 1.0));
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!grads[i] || nodes_[i].op == Op::input) continue;
    const std::vector<NodeId> parents = nodes_[i].parents;
    const Op op = nodes_[i].op;
    for (std::size_t s = 0; s < parents.size(); ++s) {
      const std::size_t p = parents[s].index;
      if (!needed[p]) continue;
      if (op == Op::relu_mask && s == 1) continue;
      NodeId g = vjp_node(i, s, *grads[i]);
      grads[p] = grads[p] ? add(*grads[p], g) : g;
    }
  }
  std::vector<NodeId> out;
  for (NodeId w : wrt) {
    out.push_back(grads[w.index] ? *grads[w.index] : input(Tensor(nodes_[w.index].value.shape())));
    check_finite("backward", value(out.back()));
  }
  return out;
}

double evaluate(const LossBuilder& f, const std::vector<Tensor>& point) {
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : point) ids.push_back(g.input(t));
  const double v = g.value(f(g, ids)).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss at perturbed point");
  return v;
}

double grad_check(const LossBuilder& f, const std::vector<Tensor>& point, double h, std::size_t coords_per_tensor,
                  std::uint64_t seed) {
  if (!(h > 0.0)) throw Error("grad_check: step must be positive");
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : point) ids.push_back(g.input(t));
  const NodeId loss = f(g, ids);
  if (!std::isfinite(g.value(loss).item())) throw NumericError("grad_check: non-finite loss");
  const std::vector<Tensor> analytic = g.backward(loss, ids);

  Rng rng(seed);
  double worst = 0.0;
  std::vector<Tensor> probe = point;
  for (std::size_t t = 0; t < point.size(); ++t) {
    std::vector<std::size_t> coords;
    const std::size_t n = point[t].numel();
    if (coords_per_tensor == 0 || coords_per_tensor >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < coords_per_tensor; ++i) coords.push_back(rng.below(n));
    }
    for (std::size_t i : coords) {
      const double orig = point[t][i];
      probe[t][i] = orig + h;
      const double fp = evaluate(f, probe);
      probe[t][i] = orig - h;
      const double fm = evaluate(f, probe);
      probe[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  return worst;
}

}  // namespace refml::ad
