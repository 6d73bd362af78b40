#include "primed/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>

namespace primed::ag {

// Gradient buffer of input i, or nullptr when that input does not need one.
Tensor* input_grad(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

namespace {

thread_local bool g_grad_enabled = true;

using MatR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Stride = Eigen::OuterStride<>;
using SMapR = Eigen::Map<MatR, 0, Stride>;
using CSMapR = Eigen::Map<const MatR, 0, Stride>;

CMapR as_matrix(const Tensor& t) { return CMapR(t.ptr(), t.rows(), t.cols()); }
MapR as_matrix(Tensor& t) { return MapR(t.ptr(), t.rows(), t.cols()); }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.shared());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_op(std::move(out), {x}, [dfdx](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& xv = self.inputs[0]->value;
    for (Index i = 0; i < self.value.numel(); ++i) (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  Scalar e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

Var custom(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  return make_op(std::move(value), std::move(inputs), std::move(backward_fn));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(root.defined() && root.numel() == 1, "backward: root must be a single-element tensor");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- shape ops

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index i = 0; i < self.grad.numel(); ++i) (*gx)[i] += self.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor out({rows, cols});
  Index off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.numel();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    Index off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      const Index n = self.inputs[i]->value.numel();
      if (Tensor* g = input_grad(self, i))
        for (Index j = 0; j < n; ++j) (*g)[j] += self.grad[off + j];
      off += n;
    }
  });
}

Var slice_rows(const Var& x, Index begin, Index end) {
  const Index cols = x.cols();
  require(0 <= begin && begin <= end && end <= x.rows(), "slice_rows: range out of bounds");
  Tensor out({end - begin, cols});
  const Scalar* src = x.value().ptr() + begin * cols;
  std::copy(src, src + (end - begin) * cols, out.ptr());
  return make_op(std::move(out), {x}, [begin, cols](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    Scalar* dst = gx->ptr() + begin * cols;
    for (Index i = 0; i < self.grad.numel(); ++i) dst[i] += self.grad[i];
  });
}

Var slice_cols(const Var& x, Index begin, Index end) {
  const Index rows = x.rows(), cols = x.cols();
  require(0 <= begin && begin <= end && end <= cols, "slice_cols: range out of bounds");
  const Index w = end - begin;
  Tensor out({rows, w});
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < w; ++c) out[r * w + c] = x.value()[r * cols + begin + c];
  return make_op(std::move(out), {x}, [begin, rows, cols, w](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < w; ++c) (*gx)[r * cols + begin + c] += self.grad[r * w + c];
  });
}

Var gather_rows(const Var& x, const std::vector<Index>& rows) {
  const Index cols = x.cols();
  Tensor out({static_cast<Index>(rows.size()), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < x.rows(), "gather_rows: index out of range");
    std::copy_n(x.value().ptr() + rows[i] * cols, cols, out.ptr() + static_cast<Index>(i) * cols);
  }
  return make_op(std::move(out), {x}, [rows, cols](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (Index c = 0; c < cols; ++c) (*gx)[rows[i] * cols + c] += self.grad[static_cast<Index>(i) * cols + c];
  });
}

Var tile_rows(const Var& x, Index times) {
  require(times >= 1, "tile_rows: times must be positive");
  const Index n = x.numel();
  Tensor out({x.rows() * times, x.cols()});
  for (Index t = 0; t < times; ++t) std::copy_n(x.value().ptr(), n, out.ptr() + t * n);
  return make_op(std::move(out), {x}, [n, times](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index t = 0; t < times; ++t)
      for (Index i = 0; i < n; ++i) (*gx)[i] += self.grad[t * n + i];
  });
}

Var repeat_rows(const Var& x, Index times) {
  require(times >= 1, "repeat_rows: times must be positive");
  const Index rows = x.rows(), cols = x.cols();
  Tensor out({rows * times, cols});
  for (Index r = 0; r < rows; ++r)
    for (Index t = 0; t < times; ++t) std::copy_n(x.value().ptr() + r * cols, cols, out.ptr() + (r * times + t) * cols);
  return make_op(std::move(out), {x}, [rows, cols, times](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (Index r = 0; r < rows; ++r)
      for (Index t = 0; t < times; ++t)
        for (Index c = 0; c < cols; ++c) (*gx)[r * cols + c] += self.grad[(r * times + t) * cols + c];
  });
}

// ----------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = input_grad(self, k))
        for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = input_grad(self, 1))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = input_grad(self, 1))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i] / bv[i];
    if (Tensor* g = input_grad(self, 1))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] -= self.grad[i] * self.value[i] / bv[i];
  });
}

Var scale(const Var& x, Scalar s) {
  Tensor out(x.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * s;
  return make_op(std::move(out), {x}, [s](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

Var add_scalar(const Var& x, Scalar s) {
  Tensor out(x.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = x.value()[i] + s;
  return make_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Index rows = x.rows(), cols = x.cols();
  require(bias.numel() == cols, "add_bias: bias length " + std::to_string(bias.numel()) + " != " + std::to_string(cols));
  Tensor out(x.shape());
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] + bias.value()[c];
  return make_op(std::move(out), {x, bias}, [rows, cols](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = input_grad(self, 1))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[c] += self.grad[r * cols + c];
  });
}

Var mul_col(const Var& x, const Var& s) {
  const Index rows = x.rows(), cols = x.cols();
  require(s.numel() == rows, "mul_col: scale length must equal row count");
  Tensor out(x.shape());
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] * s.value()[r];
  return make_op(std::move(out), {x, s}, [rows, cols](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& sv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r * cols + c] * sv[r];
    if (Tensor* g = input_grad(self, 1))
      for (Index r = 0; r < rows; ++r) {
        Scalar acc = 0;
        for (Index c = 0; c < cols; ++c) acc += self.grad[r * cols + c] * xv[r * cols + c];
        (*g)[r] += acc;
      }
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  require(s.numel() == 1, "mul_scalar: scale must hold one element");
  const Scalar sv = s.value()[0];
  Tensor out(x.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * sv;
  return make_op(std::move(out), {x, s}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Scalar sv = self.inputs[1]->value[0];
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < self.grad.numel(); ++i) (*g)[i] += self.grad[i] * sv;
    if (Tensor* g = input_grad(self, 1)) {
      Scalar acc = 0;
      for (Index i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * xv[i];
      (*g)[0] += acc;
    }
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](Scalar v) { return v > 0 ? v : 0.0; }, [](Scalar v, Scalar) { return v > 0 ? 1.0 : 0.0; });
}

Var exp(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Var log(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return 1.0 / v; });
}

Var sqrt(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::sqrt(v); }, [](Scalar, Scalar y) { return 0.5 / y; });
}

Var sigmoid(const Var& x) {
  return unary(x, stable_sigmoid, [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](Scalar v, Scalar) { return stable_sigmoid(v); });
}

Var clamp(const Var& x, Scalar lo, Scalar hi) {
  return unary(
      x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ------------------------------------------------------------ reductions

Var sum(const Var& x) {
  Scalar acc = 0;
  for (Scalar v : x.value().data()) acc += v;
  return make_op(Tensor::scalar(acc), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<Scalar>(x.numel()));
}

Var row_sum(const Var& x) {
  const Index rows = x.rows(), cols = x.cols();
  Tensor out({rows, 1});
  for (Index r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (Index c = 0; c < cols; ++c) acc += x.value()[r * cols + c];
    out[r] = acc;
  }
  return make_op(std::move(out), {x}, [rows, cols](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r];
  });
}

Var group_mean(const Var& x, Index group) {
  const Index rows = x.rows(), cols = x.cols();
  require(group >= 1 && rows % group == 0, "group_mean: rows not divisible by group size");
  const Index groups = rows / group;
  const Scalar inv = 1.0 / static_cast<Scalar>(group);
  Tensor out({groups, cols});
  for (Index g = 0; g < groups; ++g)
    for (Index r = 0; r < group; ++r)
      for (Index c = 0; c < cols; ++c) out[g * cols + c] += x.value()[(g * group + r) * cols + c] * inv;
  return make_op(std::move(out), {x}, [groups, group, cols, inv](Node& self) {
    if (Tensor* gx = input_grad(self, 0))
      for (Index g = 0; g < groups; ++g)
        for (Index r = 0; r < group; ++r)
          for (Index c = 0; c < cols; ++c) (*gx)[(g * group + r) * cols + c] += self.grad[g * cols + c] * inv;
  });
}

Var rowwise_dot(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot: shape mismatch");
  const Index rows = a.rows(), cols = a.cols();
  Tensor out({rows, 1});
  for (Index r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (Index c = 0; c < cols; ++c) acc += a.value()[r * cols + c] * b.value()[r * cols + c];
    out[r] = acc;
  }
  return make_op(std::move(out), {a, b}, [rows, cols](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r] * bv[r * cols + c];
    if (Tensor* g = input_grad(self, 1))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r] * av[r * cols + c];
  });
}

Var logsumexp_rows(const Var& x) {
  const Index rows = x.rows(), cols = x.cols();
  require(cols > 0, "logsumexp_rows: empty rows");
  Tensor out({rows, 1});
  Tensor soft(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = x.value().ptr() + r * cols;
    const Scalar m = *std::max_element(row, row + cols);
    Scalar acc = 0;
    for (Index c = 0; c < cols; ++c) acc += std::exp(row[c] - m);
    out[r] = m + std::log(acc);
    for (Index c = 0; c < cols; ++c) soft[r * cols + c] = std::exp(row[c] - out[r]);
  }
  return make_op(std::move(out), {x}, [rows, cols, soft = std::move(soft)](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r] * soft[r * cols + c];
  });
}

// ---------------------------------------------------------- linear algebra

Var matmul(const Var& x, const Var& w) {
  require(w.value().rank() == 2, "matmul: weight must be rank 2");
  const Index k = x.cols();
  require(w.value().dim(0) == k,
          "matmul: inner dimension mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const Index n = w.value().dim(1);
  Shape shape = x.shape();
  shape.back() = n;
  Tensor out(shape);
  as_matrix(out).noalias() = as_matrix(x.value()) * as_matrix(w.value());
  return make_op(std::move(out), {x, w}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0)) as_matrix(*g).noalias() += as_matrix(self.grad) * as_matrix(wv).transpose();
    if (Tensor* g = input_grad(self, 1)) as_matrix(*g).noalias() += as_matrix(xv).transpose() * as_matrix(self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Tensor out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value()).transpose();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0)) as_matrix(*g).noalias() += as_matrix(self.grad) * as_matrix(bv);
    if (Tensor* g = input_grad(self, 1)) as_matrix(*g).noalias() += as_matrix(self.grad).transpose() * as_matrix(av);
  });
}

// ---------------------------------------------------------- normalisation

Var softmax_rows(const Var& x) {
  const Index rows = x.rows(), cols = x.cols();
  Tensor out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = x.value().ptr() + r * cols;
    const Scalar m = *std::max_element(row, row + cols);
    Scalar acc = 0;
    for (Index c = 0; c < cols; ++c) acc += (out[r * cols + c] = std::exp(row[c] - m));
    for (Index c = 0; c < cols; ++c) out[r * cols + c] /= acc;
  }
  return make_op(std::move(out), {x}, [rows, cols](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    for (Index r = 0; r < rows; ++r) {
      Scalar dot = 0;
      for (Index c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.value[r * cols + c];
      for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps) {
  const Index rows = x.rows(), cols = x.cols();
  require(gamma.numel() == cols && beta.numel() == cols, "layer_norm: affine parameter size mismatch");
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<Scalar> rstd(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = x.value().ptr() + r * cols;
    Scalar mu = 0;
    for (Index c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<Scalar>(cols);
    Scalar var = 0;
    for (Index c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Scalar>(cols);
    const Scalar rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Index c = 0; c < cols; ++c) {
      const Scalar h = (row[c] - mu) * rs;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                   const Tensor& gv = self.inputs[1]->value;
                   Tensor* gx = input_grad(self, 0);
                   Tensor* gg = input_grad(self, 1);
                   Tensor* gb = input_grad(self, 2);
                   const Scalar inv_n = 1.0 / static_cast<Scalar>(cols);
                   for (Index r = 0; r < rows; ++r) {
                     const Scalar* dy = self.grad.ptr() + r * cols;
                     const Scalar* h = xhat.ptr() + r * cols;
                     if (gg || gb)
                       for (Index c = 0; c < cols; ++c) {
                         if (gg) (*gg)[c] += dy[c] * h[c];
                         if (gb) (*gb)[c] += dy[c];
                       }
                     if (gx) {
                       Scalar mean_dh = 0, mean_dh_h = 0;
                       for (Index c = 0; c < cols; ++c) {
                         const Scalar dh = dy[c] * gv[c];
                         mean_dh += dh;
                         mean_dh_h += dh * h[c];
                       }
                       mean_dh *= inv_n;
                       mean_dh_h *= inv_n;
                       const Scalar rs = rstd[static_cast<std::size_t>(r)];
                       for (Index c = 0; c < cols; ++c)
                         (*gx)[r * cols + c] += rs * (dy[c] * gv[c] - mean_dh - h[c] * mean_dh_h);
                     }
                   }
                 });
}

Var l2_normalize_rows(const Var& x, Scalar eps, Index* zero_rows) {
  const Index rows = x.rows(), cols = x.cols();
  Tensor out(x.shape());
  std::vector<Scalar> norms(static_cast<std::size_t>(rows));
  Index zeros = 0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = x.value().ptr() + r * cols;
    Scalar n = 0;
    for (Index c = 0; c < cols; ++c) n += row[c] * row[c];
    n = std::sqrt(n);
    norms[static_cast<std::size_t>(r)] = n;
    if (n < eps) {
      ++zeros;
      continue;
    }
    for (Index c = 0; c < cols; ++c) out[r * cols + c] = row[c] / n;
  }
  if (zero_rows) *zero_rows += zeros;
  return make_op(std::move(out), {x}, [rows, cols, eps, norms = std::move(norms)](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    for (Index r = 0; r < rows; ++r) {
      const Scalar n = norms[static_cast<std::size_t>(r)];
      if (n < eps) continue;
      const Scalar* y = self.value.ptr() + r * cols;
      const Scalar* dy = self.grad.ptr() + r * cols;
      Scalar dot = 0;
      for (Index c = 0; c < cols; ++c) dot += y[c] * dy[c];
      for (Index c = 0; c < cols; ++c) (*g)[r * cols + c] += (dy[c] - y[c] * dot) / n;
    }
  });
}

// -------------------------------------------------------------- resampling

namespace {

SparseMap separable(Index in_h, Index in_w, Index out_h, Index out_w,
                    const std::vector<std::vector<std::pair<Index, Scalar>>>& wy,
                    const std::vector<std::vector<std::pair<Index, Scalar>>>& wx) {
  SparseMap m{in_h, in_w, out_h, out_w, {}};
  for (Index oy = 0; oy < out_h; ++oy)
    for (Index ox = 0; ox < out_w; ++ox)
      for (auto [iy, a] : wy[static_cast<std::size_t>(oy)])
        for (auto [ix, b] : wx[static_cast<std::size_t>(ox)])
          m.entries.push_back({oy * out_w + ox, iy * in_w + ix, a * b});
  return m;
}

using Taps = std::vector<std::vector<std::pair<Index, Scalar>>>;

Taps adaptive_taps(Index in, Index out) {
  Taps taps(static_cast<std::size_t>(out));
  for (Index o = 0; o < out; ++o) {
    const Index start = (o * in) / out;
    const Index end = ((o + 1) * in + out - 1) / out;
    for (Index i = start; i < end; ++i)
      taps[static_cast<std::size_t>(o)].emplace_back(i, 1.0 / static_cast<Scalar>(end - start));
  }
  return taps;
}

Taps nearest_taps(Index in, Index out) {
  Taps taps(static_cast<std::size_t>(out));
  for (Index o = 0; o < out; ++o) taps[static_cast<std::size_t>(o)].emplace_back(std::min((o * in) / out, in - 1), 1.0);
  return taps;
}

Taps bilinear_taps(Index in, Index out) {
  Taps taps(static_cast<std::size_t>(out));
  const Scalar ratio = static_cast<Scalar>(in) / static_cast<Scalar>(out);
  for (Index o = 0; o < out; ++o) {
    Scalar src = (static_cast<Scalar>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const Scalar l1 = src - static_cast<Scalar>(i0);
    auto& t = taps[static_cast<std::size_t>(o)];
    if (i1 == i0) {
      t.emplace_back(i0, 1.0);
    } else {
      t.emplace_back(i0, 1.0 - l1);
      t.emplace_back(i1, l1);
    }
  }
  return taps;
}

}  // namespace

SparseMap avg_pool_map(Index in_h, Index in_w, Index factor) {
  require(factor >= 1 && in_h % factor == 0 && in_w % factor == 0, "avg_pool_map: size not divisible by factor");
  return adaptive_avg_pool_map(in_h, in_w, in_h / factor, in_w / factor);
}

SparseMap upsample_nearest_map(Index in_h, Index in_w, Index factor) {
  require(factor >= 1, "upsample_nearest_map: factor must be positive");
  return nearest_resize_map(in_h, in_w, in_h * factor, in_w * factor);
}

SparseMap nearest_resize_map(Index in_h, Index in_w, Index out_h, Index out_w) {
  return separable(in_h, in_w, out_h, out_w, nearest_taps(in_h, out_h), nearest_taps(in_w, out_w));
}

SparseMap adaptive_avg_pool_map(Index in_h, Index in_w, Index out_h, Index out_w) {
  return separable(in_h, in_w, out_h, out_w, adaptive_taps(in_h, out_h), adaptive_taps(in_w, out_w));
}

SparseMap bilinear_map(Index in_h, Index in_w, Index out_h, Index out_w) {
  return separable(in_h, in_w, out_h, out_w, bilinear_taps(in_h, out_h), bilinear_taps(in_w, out_w));
}

Tensor resample(const Tensor& x, Index frames, const SparseMap& map) {
  const Index cols = x.cols();
  require(x.rows() == frames * map.in_positions(), "resample: token count does not match map input grid");
  Tensor out({frames * map.out_positions(), cols});
  for (Index f = 0; f < frames; ++f) {
    const Scalar* src = x.ptr() + f * map.in_positions() * cols;
    Scalar* dst = out.ptr() + f * map.out_positions() * cols;
    for (const auto& e : map.entries)
      for (Index c = 0; c < cols; ++c) dst[e.out * cols + c] += e.weight * src[e.in * cols + c];
  }
  return out;
}

Var resample(const Var& x, Index frames, const SparseMap& map) {
  Tensor out = resample(x.value(), frames, map);
  return make_op(std::move(out), {x}, [frames, map](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    const Index cols = self.value.cols();
    for (Index f = 0; f < frames; ++f) {
      Scalar* dst = g->ptr() + f * map.in_positions() * cols;
      const Scalar* src = self.grad.ptr() + f * map.out_positions() * cols;
      for (const auto& e : map.entries)
        for (Index c = 0; c < cols; ++c) dst[e.in * cols + c] += e.weight * src[e.out * cols + c];
    }
  });
}

// --------------------------------------------------------------- attention

namespace {

struct AttnDims {
  Index batch, heads, nq, nk, d, dv, dh, dvh;
  Scalar scale;
};

AttnDims attention_dims(const Tensor& q, const Tensor& k, const Tensor* v, const AttentionLayout& layout) {
  AttnDims a{};
  a.batch = layout.batch;
  a.heads = layout.heads;
  require(a.batch >= 1 && a.heads >= 1, "attention: batch and heads must be positive");
  require(q.rows() % a.batch == 0 && k.rows() % a.batch == 0, "attention: rows not divisible by batch");
  a.nq = q.rows() / a.batch;
  a.nk = k.rows() / a.batch;
  a.d = q.cols();
  require(k.cols() == a.d, "attention: query/key width mismatch");
  require(a.d % a.heads == 0, "attention: width not divisible by heads");
  a.dh = a.d / a.heads;
  a.dv = v ? v->cols() : 0;
  if (v) {
    require(v->rows() == k.rows(), "attention: key/value count mismatch");
    require(a.dv % a.heads == 0, "attention: value width not divisible by heads");
  }
  a.dvh = a.dv / a.heads;
  a.scale = 1.0 / std::sqrt(static_cast<Scalar>(a.dh));
  require(layout.key_valid.empty() || static_cast<Index>(layout.key_valid.size()) == a.batch,
          "attention: key_valid must have one entry per batch");
  return a;
}

// Fills probs (batch, heads, nq, nk).
void attention_forward_probs(const Tensor& q, const Tensor& k, const AttentionLayout& layout, const Tensor* bias,
                             const AttnDims& a, Tensor& probs) {
  if (bias) require(bias->numel() == a.batch * a.nk, "attention: bias must be batch x keys");
  for (Index b = 0; b < a.batch; ++b) {
    const Index valid = layout.key_valid.empty() ? a.nk : layout.key_valid[static_cast<std::size_t>(b)];
    require(valid >= 1 && valid <= a.nk, "attention: every batch needs at least one valid key");
    for (Index h = 0; h < a.heads; ++h) {
      CSMapR qh(q.ptr() + b * a.nq * a.d + h * a.dh, a.nq, a.dh, Stride(a.d));
      CSMapR kh(k.ptr() + b * a.nk * a.d + h * a.dh, a.nk, a.dh, Stride(a.d));
      MapR p(probs.ptr() + ((b * a.heads + h) * a.nq) * a.nk, a.nq, a.nk);
      p.noalias() = (qh * kh.transpose()) * a.scale;
      for (Index i = 0; i < a.nq; ++i) {
        Scalar* row = p.data() + i * a.nk;
        if (bias)
          for (Index j = 0; j < a.nk; ++j) row[j] += (*bias)[b * a.nk + j];
        for (Index j = 0; j < a.nk; ++j)
          if (!std::isfinite(row[j])) throw std::domain_error("attention: non-finite logit");
        const Scalar m = *std::max_element(row, row + valid);
        Scalar acc = 0;
        for (Index j = 0; j < valid; ++j) acc += (row[j] = std::exp(row[j] - m));
        for (Index j = 0; j < valid; ++j) row[j] /= acc;
        for (Index j = valid; j < a.nk; ++j) row[j] = 0;
      }
    }
  }
}

}  // namespace

Tensor attention_probs(const Tensor& q, const Tensor& k, const AttentionLayout& layout, const Tensor* key_bias) {
  AttnDims a = attention_dims(q, k, nullptr, layout);
  Tensor probs({a.batch, a.heads, a.nq, a.nk});
  attention_forward_probs(q, k, layout, key_bias, a, probs);
  return probs;
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout, const Var& key_bias) {
  const AttnDims a = attention_dims(q.value(), k.value(), &v.value(), layout);
  Tensor probs({a.batch, a.heads, a.nq, a.nk});
  attention_forward_probs(q.value(), k.value(), layout, key_bias ? &key_bias.value() : nullptr, a, probs);

  Tensor out({a.batch * a.nq, a.dv});
  for (Index b = 0; b < a.batch; ++b)
    for (Index h = 0; h < a.heads; ++h) {
      CMapR p(probs.ptr() + ((b * a.heads + h) * a.nq) * a.nk, a.nq, a.nk);
      CSMapR vh(v.value().ptr() + b * a.nk * a.dv + h * a.dvh, a.nk, a.dvh, Stride(a.dv));
      SMapR oh(out.ptr() + b * a.nq * a.dv + h * a.dvh, a.nq, a.dvh, Stride(a.dv));
      oh.noalias() = p * vh;
    }

  std::vector<Var> inputs{q, k, v};
  if (key_bias) inputs.push_back(key_bias);
  return make_op(std::move(out), std::move(inputs), [a, probs = std::move(probs)](Node& self) {
    const Tensor& qv = self.inputs[0]->value;
    const Tensor& kv = self.inputs[1]->value;
    const Tensor& vv = self.inputs[2]->value;
    Tensor* gq = input_grad(self, 0);
    Tensor* gk = input_grad(self, 1);
    Tensor* gv = input_grad(self, 2);
    Tensor* gb = self.inputs.size() > 3 ? input_grad(self, 3) : nullptr;
    MatR dp(a.nq, a.nk);
    for (Index b = 0; b < a.batch; ++b)
      for (Index h = 0; h < a.heads; ++h) {
        CMapR p(probs.ptr() + ((b * a.heads + h) * a.nq) * a.nk, a.nq, a.nk);
        CSMapR doh(self.grad.ptr() + b * a.nq * a.dv + h * a.dvh, a.nq, a.dvh, Stride(a.dv));
        CSMapR vh(vv.ptr() + b * a.nk * a.dv + h * a.dvh, a.nk, a.dvh, Stride(a.dv));
        if (gv) {
          SMapR gvh(gv->ptr() + b * a.nk * a.dv + h * a.dvh, a.nk, a.dvh, Stride(a.dv));
          gvh.noalias() += p.transpose() * doh;
        }
        if (!gq && !gk && !gb) continue;
        dp.noalias() = doh * vh.transpose();
        // dS = P * (dP - rowsum(dP * P))
        for (Index i = 0; i < a.nq; ++i) {
          Scalar dot = 0;
          for (Index j = 0; j < a.nk; ++j) dot += dp(i, j) * p(i, j);
          for (Index j = 0; j < a.nk; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot);
        }
        if (gb)
          for (Index i = 0; i < a.nq; ++i)
            for (Index j = 0; j < a.nk; ++j) (*gb)[b * a.nk + j] += dp(i, j);
        if (gq) {
          CSMapR kh(kv.ptr() + b * a.nk * a.d + h * a.dh, a.nk, a.dh, Stride(a.d));
          SMapR gqh(gq->ptr() + b * a.nq * a.d + h * a.dh, a.nq, a.dh, Stride(a.d));
          gqh.noalias() += (dp * kh) * a.scale;
        }
        if (gk) {
          CSMapR qh(qv.ptr() + b * a.nq * a.d + h * a.dh, a.nq, a.dh, Stride(a.d));
          SMapR gkh(gk->ptr() + b * a.nk * a.d + h * a.dh, a.nk, a.dh, Stride(a.d));
          gkh.noalias() += (dp.transpose() * qh) * a.scale;
        }
      }
  });
}

}  // namespace primed::ag
