#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "edje/tensor.hpp"

namespace edje {

/// A trainable tensor. Gradients are not stored here; they live on the Tape
/// that recorded the forward pass (see Tape::grad).
struct Parameter {
  Tensor value;
  /// Whether decoupled weight decay applies (matrices yes, gains/biases no).
  bool decay = true;
};

class Tape;

namespace detail {

struct Node {
  Tensor owned;
  const Tensor* external = nullptr;
  Tensor grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  const Tensor& value() const { return external ? *external : owned; }
  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor::zeros_like(value());
    return grad;
  }
};

}  // namespace detail

/// Handle to a value in a computation. Vars created without a tape (or whose
/// inputs need no gradient) carry no history and are freed with the handle.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  Tape* tape() const noexcept { return tape_; }
  /// Gradient after Tape::backward; empty if nothing flowed back.
  const Tensor& grad() const { return node_->grad; }

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  friend class Tape;
  friend Var make_var(std::shared_ptr<detail::Node> node, Tape* tape);
  std::shared_ptr<detail::Node> node_;
  Tape* tape_ = nullptr;
};

Var make_var(std::shared_ptr<detail::Node> node, Tape* tape);

/// Value with no history.
Var constant(Tensor value);
/// Value with no history that aliases `value`; the tensor must outlive the Var.
Var constant_ref(const Tensor& value);

/// Ordered record of the operations of one forward pass. Replaying it in
/// reverse applies each operation's adjoint exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to a parameter; repeated calls return the same leaf.
  Var param(const Parameter& p);
  /// Leaf holding a copy of `value` that receives a gradient.
  Var input(Tensor value);

  /// Recorded by every differentiable operation.
  Var record(Tensor value, std::function<void(detail::Node&)> backward);

  /// Reverse sweep from a single-element loss. One-shot per tape.
  void backward(const Var& loss);

  /// Gradient accumulated for `p`, or nullptr if `p` did not participate.
  const Tensor* grad(const Parameter& p) const;

  std::size_t op_count() const noexcept { return nodes_.size(); }
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::unordered_map<const Parameter*, Var> params_;
  bool done_ = false;
  std::size_t backward_visits_ = 0;
};

/// `tape ? tape->param(p) : constant_ref(p.value)`.
Var bind(Tape* tape, const Parameter& p);

// Primitive operations. Shapes are 2-D (rank-1 tensors act as one row).

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// x[n x d] + bias[d] broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
Var linear(const Var& x, const Var& weight);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var row_softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(const Var& x);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);
Var sum(const Var& x);
Var mean(const Var& x);

/// One independent attention problem inside stacked q / kv matrices.
/// Query ranges may overlap, e.g. learnable queries shared across images.
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_rows = 0;
  std::size_t kv_begin = 0;
  std::size_t kv_rows = 0;
};

struct AttentionLayout {
  std::vector<AttentionSegment> segments;
  /// Per kv row; 0 drops the key (additive -inf before softmax). Empty = all keys valid.
  std::vector<unsigned char> key_mask;

  static AttentionLayout single(std::size_t q_rows, std::size_t kv_rows);
};

/// Per-head scaled dot-product attention (scale 1/sqrt(d/heads)), heads
/// concatenated. Output rows are the segments' query rows in segment order.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
              const AttentionLayout& layout);

/// attention() followed by the output projection (bias optional).
Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                         const AttentionLayout& layout, const Var& w_out,
                         const Var* b_out = nullptr);

/// Attention weights per segment then per head, for inspection.
std::vector<Tensor> attention_probabilities(const Tensor& q, const Tensor& k,
                                            std::size_t heads,
                                            const AttentionLayout& layout);

// Fused losses; all return a one-element tensor.

/// Mean binary cross-entropy of sigmoid(logits) against (soft) targets in [0, 1].
Var bce_with_logits(const Var& logits, std::span<const double> targets);
/// Mean over rows of logsumexp(row) - row[target].
Var cross_entropy(const Var& logits, std::span<const std::size_t> targets);
/// Mean over rows of 1 - cos(pred_row, target_row); norms floored at eps.
Var cosine_distance(const Var& pred, const Tensor& target, double eps = 1e-8);

double scalar(const Var& v);

}  // namespace edje
