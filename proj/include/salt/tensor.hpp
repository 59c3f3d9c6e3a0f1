#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Design: a Tensor is a shared handle to contiguous row-major storage plus an
// optional gradient buffer. Every differentiable op computes its output
// eagerly and, when a tape is supplied and some input needs gradients,
// records one tape node holding a backward closure. backward() sweeps the
// tape in reverse construction order (which is a valid reverse-topological
// order), runs each reachable closure exactly once, and accumulates
// gradients additively. detach() produces a value copy with no tape link, so
// traversal stops there by construction.
//
// The scalar type is a template parameter: float for training, double for
// finite-difference verification. Both instantiations are compiled into the
// library.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "salt/common.hpp"

namespace salt {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);

// Integer (time, row, col) grid coordinate of one token, consumed by the
// rotary position op.
struct Pos3 {
  int32_t t = 0;
  int32_t y = 0;
  int32_t x = 0;
  bool operator==(const Pos3&) const = default;
};

// Half-open row range [begin, begin+len) identifying one clip's rows inside a
// batch-stacked matrix.
struct RowSpan {
  int64_t begin = 0;
  int64_t len = 0;
};

template <typename T>
class TapeT;

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);
  static TensorT from_values(Shape shape, std::vector<T> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }
  // Matrix view helpers: all leading dims collapsed into rows, last dim = cols.
  int64_t rows() const { return ndim() == 0 ? 1 : numel() / cols(); }
  int64_t cols() const { return ndim() == 0 ? 1 : impl_->shape.back(); }

  std::vector<T>& values() { return impl_->values; }
  const std::vector<T>& values() const { return impl_->values; }
  T* data() { return impl_->values.data(); }
  const T* data() const { return impl_->values.data(); }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<T>& grad();              // allocates zeros on first use
  const std::vector<T>& grad() const;  // requires an allocated buffer
  void zero_grad();

  int node() const { return impl_->node; }
  void set_node(int id) { impl_->node = id; }

  // Identity of the underlying storage (for aliasing checks in tests).
  const void* storage_id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    int node = -1;
  };
  std::shared_ptr<Impl> impl_;
  explicit TensorT(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

template <typename T>
class TapeT {
 public:
  // Records one op; parents lists the tape ids of differentiable inputs that
  // are themselves tape outputs (leaves are handled inside the closure).
  int record(std::vector<int> parents, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every closure reachable from `loss`
  // in reverse insertion order, exactly once each.
  void backward(const TensorT<T>& loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// ---- differentiable ops ------------------------------------------------
// Every op validates shapes, computes eagerly, and records onto `tape` when
// it is non-null and some input requires gradients. Passing tape == nullptr
// gives a pure forward evaluation.

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor);

// a [m x k] times b [k x n].
template <typename T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

// x [r x in] * w [in x out] + bias [out], the fused building block of every
// model layer.
template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias);

// Contiguous column slice [begin, begin+len) of a matrix.
template <typename T>
TensorT<T> slice_cols(TapeT<T>* tape, const TensorT<T>& x, int64_t begin, int64_t len);

// Normalizes each row of x to zero mean / unit variance, then applies the
// per-column affine (gain, bias).
template <typename T>
TensorT<T> layer_norm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& bias, double eps);

// Exact Gaussian-CDF form: x * Phi(x).
template <typename T>
TensorT<T> gelu(TapeT<T>* tape, const TensorT<T>& x);

// Softmax along `axis` (negative counts from the end), max-shifted for
// overflow safety.
template <typename T>
TensorT<T> softmax(TapeT<T>* tape, const TensorT<T>& x, int axis);

// Rotary position encoding applied in place of additive embeddings: each
// head's channels split into three equal groups of pairs (time, row, col);
// pair i of a group with g pairs rotates by angle pos_axis * base^(-i/g).
// Channels beyond 6*(head_dim/6) pass through unchanged. Pure isometry.
template <typename T>
TensorT<T> rope_rotate(TapeT<T>* tape, const TensorT<T>& x, const std::vector<Pos3>& positions,
                       int heads, double base);

// Scaled dot-product attention over batch-stacked rows. q is [rq x w] and
// k, v are [rk x w] with w = heads * head_dim; q_spans[i]/kv_spans[i] give
// clip i's query and key/value rows. Softmax(q k^T * scale) v per head, heads
// re-merged into the last dim.
template <typename T>
TensorT<T> attention(TapeT<T>* tape, const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                     const std::vector<RowSpan>& q_spans, const std::vector<RowSpan>& kv_spans,
                     int heads, double scale);

template <typename T>
TensorT<T> concat_rows(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

// Builds an output whose row i is x's row out_map[i], or `filler` when
// out_map[i] < 0. Used to interleave context latents with learned mask
// tokens.
template <typename T>
TensorT<T> compose_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& filler,
                        const std::vector<int64_t>& out_map);

template <typename T>
TensorT<T> gather_rows(TapeT<T>* tape, const TensorT<T>& x, const std::vector<int64_t>& indices);

template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x);

// Mean absolute error over the rows selected by row_mask (element count =
// selected rows * cols). Empty selection is a degenerate-batch error. The
// subgradient at zero difference is zero.
template <typename T>
TensorT<T> l1_loss_masked(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target,
                          const std::vector<uint8_t>& row_mask);

template <typename T>
TensorT<T> l1_loss(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target);

// Mean softmax cross-entropy of logits [b x classes] against integer labels.
template <typename T>
TensorT<T> cross_entropy_logits(TapeT<T>* tape, const TensorT<T>& logits,
                                const std::vector<int>& labels);

// Value copy with no gradient requirement and no tape link; gradient
// traversal terminates here.
template <typename T>
TensorT<T> detach(const TensorT<T>& x);

// ---- non-differentiable helpers ----------------------------------------

template <typename T>
bool all_finite(const TensorT<T>& x);

// sqrt of the summed squared gradients across a parameter set.
template <typename T>
double gradient_global_norm(const std::vector<TensorT<T>>& params);

// Scales every gradient by max_norm/norm when norm exceeds max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_gradient_norm(std::vector<TensorT<T>>& params, double max_norm);

using Tensor64 = TensorT<double>;
using Tape64 = TapeT<double>;

}  // namespace salt

// ---- implementation --------------------------------------------------------
// Header-resident so both scalar instantiations come from implicit
// instantiation (explicit instantiation of closures trips older GCC).

#include "salt/tensor_impl.hpp"
