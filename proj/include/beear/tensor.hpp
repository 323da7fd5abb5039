#pragma once

// Dense float tensors with a tape-based reverse-mode differentiator.
//
// A Tensor is a reference-counted handle: copying a Tensor aliases the same
// storage. Use clone() for an independent copy. Ops record onto a Tape only
// when a tape is supplied and at least one input requires a gradient, so
// evaluation code passes nullptr and pays nothing for autodiff.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace beear {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor randn(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const;
  float at(std::size_t row, std::size_t col) const { return impl_->data[row * impl_->shape.back() + col]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Grad buffer, allocated (zero-filled) on first access.
  std::span<float> grad();
  std::span<const float> grad_or_empty() const { return impl_->grad; }
  void zero_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  bool all_finite() const;

  std::shared_ptr<detail::TensorStorage> storage() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> impl) : impl_(std::move(impl)) {}
  friend class Tape;
  friend Tensor make_result(Shape shape, bool requires_grad);

  std::shared_ptr<detail::TensorStorage> impl_;
};

// Bitwise equality of shape and data (gradients ignored).
bool bit_equal(const Tensor& a, const Tensor& b);

// Ordered record of executed ops. One-shot: backward() consumes it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& output, std::function<void()> adjoint);
  // Seeds d(loss)=1 and replays adjoints in reverse order. Populates grad on
  // every requires_grad leaf reachable from loss, then clears the tape.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    std::shared_ptr<detail::TensorStorage> output;
    std::function<void()> adjoint;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Ops. Each takes an optional tape; passing nullptr skips recording.
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, float factor);
// x[rows x d] + bias[d] broadcast over rows.
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias);
Tensor sum(Tape* tape, const Tensor& a);
Tensor gelu(Tape* tape, const Tensor& x);
// Softmax over the last axis with max subtraction.
Tensor softmax(Tape* tape, const Tensor& x);
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
// Gathers rows of table[V x d] for each id.
Tensor embedding(Tape* tape, const Tensor& table, std::span<const TokenId> ids);
// Multi-head causal self-attention on already-projected q, k, v [T x d].
Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);
// h[T x d] with delta[n x d] added to rows [start, start + n).
Tensor add_rows(Tape* tape, const Tensor& h, const Tensor& delta, std::size_t start);
// Mean negative log-likelihood over positions with mask[i] set.
Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const std::uint8_t> mask);

}  // namespace beear
