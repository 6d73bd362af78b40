#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "primed/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// Every op takes Vars and returns a Var whose node remembers its inputs and a
// backward closure. backward(root) walks the graph in reverse topological
// order and accumulates gradients into every node that requires them.
namespace primed::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }

  const Shape& shape() const { return node_->value.shape(); }
  Index numel() const { return node_->value.numel(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Seeds d(root)/d(root) = 1 and propagates. root must hold a single element.
void backward(const Var& root);

bool grad_enabled();

// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Wraps a value computed outside the op library. backward_fn reads self.grad
// and accumulates into input_grad(self, i) for each input that needs it.
Var custom(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);
Tensor* input_grad(Node& self, std::size_t i);

// --- shape ---
Var reshape(const Var& x, Shape shape);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, Index begin, Index end);
Var slice_cols(const Var& x, Index begin, Index end);
Var gather_rows(const Var& x, const std::vector<Index>& rows);
Var tile_rows(const Var& x, Index times);    // [a;b] -> [a;b;a;b;...]
Var repeat_rows(const Var& x, Index times);  // [a;b] -> [a;a;...;b;b;...]

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& x, Scalar s);
Var add_scalar(const Var& x, Scalar s);
Var add_bias(const Var& x, const Var& bias);  // bias broadcast over rows
Var mul_col(const Var& x, const Var& s);      // s is rows x 1, scales each row
Var mul_scalar(const Var& x, const Var& s);   // s holds one element
Var relu(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var clamp(const Var& x, Scalar lo, Scalar hi);

// --- reductions ---
Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);                    // rows x 1
Var group_mean(const Var& x, Index group);    // averages consecutive blocks of `group` rows
Var rowwise_dot(const Var& a, const Var& b);  // rows x 1
Var logsumexp_rows(const Var& x);             // rows x 1

// --- linear algebra ---
// x (... x k) times w (k x n); leading dims of x are kept.
Var matmul(const Var& x, const Var& w);
// a (m x k) times b^T (b is n x k) -> m x n.
Var matmul_nt(const Var& a, const Var& b);

// --- normalisation ---
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps = 1e-5);
// Rows with norm below eps map to zero (zero gradient); their count is added to *zero_rows.
Var l2_normalize_rows(const Var& x, Scalar eps = 1e-12, Index* zero_rows = nullptr);

// --- spatial resampling ---
// A fixed linear map between two flattened spatial grids, applied per frame
// and per channel. Tokens are stored channel-last: (frames * positions) x C.
struct SparseMap {
  Index in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  struct Entry {
    Index out;
    Index in;
    Scalar weight;
  };
  std::vector<Entry> entries;
  Index in_positions() const { return in_h * in_w; }
  Index out_positions() const { return out_h * out_w; }
};

SparseMap avg_pool_map(Index in_h, Index in_w, Index factor);
SparseMap upsample_nearest_map(Index in_h, Index in_w, Index factor);
SparseMap nearest_resize_map(Index in_h, Index in_w, Index out_h, Index out_w);
SparseMap adaptive_avg_pool_map(Index in_h, Index in_w, Index out_h, Index out_w);
SparseMap bilinear_map(Index in_h, Index in_w, Index out_h, Index out_w);

Var resample(const Var& x, Index frames, const SparseMap& map);
Tensor resample(const Tensor& x, Index frames, const SparseMap& map);

// --- attention ---
struct AttentionLayout {
  Index batch = 1;
  Index heads = 1;
  // Per-batch count of valid keys; keys at or beyond the count are masked.
  std::vector<Index> key_valid;
};

// Scaled dot-product attention over `batch` independent groups.
// q: (batch*Nq) x D, k: (batch*Nk) x D, v: (batch*Nk) x Dv; D and Dv split
// evenly over heads. key_bias, when defined, is batch x Nk and is added to
// the logits of every query and head before the softmax.
Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout,
              const Var& key_bias = Var());

// Post-softmax weights, laid out (batch, heads, Nq, Nk). No graph.
Tensor attention_probs(const Tensor& q, const Tensor& k, const AttentionLayout& layout,
                       const Tensor* key_bias = nullptr);

}  // namespace primed::ag
