#pragma once

// Implementation detail of tensor.hpp; include that header instead.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <utility>

namespace salt {

namespace detail {

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check(d >= 0, ErrorKind::Dimension, "negative dimension in shape ", shape_str(shape));
    n *= d;
  }
  return n;
}

// ---- GEMM kernels -------------------------------------------------------
// Row-major with explicit leading dims so attention can address per-head
// column blocks of a wider matrix. Accumulation order over k is fixed and
// sequential, which keeps results bit-reproducible.

// C [m x n] = (acc ? C : 0) + A [m x k] * B [k x n]
template <typename T>
void gemm_nn(const T* a, int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, int64_t m,
             int64_t n, int64_t k, bool acc) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * ldc;
    if (!acc) std::fill(ci, ci + n, T(0));
    const T* ai = a + i * lda;
    for (int64_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * ldb;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C [m x n] = (acc ? C : 0) + A [m x k] * B^T, with B stored [n x k].
// B is transposed into a scratch tile first so the hot loop is the same
// stride-1 saxpy as gemm_nn; per-element accumulation order over k is
// unchanged. The transpose cost is O(nk), dwarfed by the O(mnk) product.
template <typename T>
void gemm_nt(const T* a, int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, int64_t m,
             int64_t n, int64_t k, bool acc) {
  thread_local std::vector<T> scratch;
  scratch.resize(static_cast<size_t>(k) * static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    const T* bj = b + j * ldb;
    for (int64_t p = 0; p < k; ++p) scratch[static_cast<size_t>(p * n + j)] = bj[p];
  }
  gemm_nn(a, lda, scratch.data(), n, c, ldc, m, n, k, acc);
}

// C [m x n] = (acc ? C : 0) + A^T * B, with A stored [k x m], B stored [k x n]
template <typename T>
void gemm_tn(const T* a, int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, int64_t m,
             int64_t n, int64_t k, bool acc) {
  if (!acc) {
    for (int64_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
  }
  for (int64_t p = 0; p < k; ++p) {
    const T* ap = a + p * lda;
    const T* bp = b + p * ldb;
    for (int64_t i = 0; i < m; ++i) {
      const T api = ap[i];
      if (api == T(0)) continue;
      T* ci = c + i * ldc;
      for (int64_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <typename T>
double phi_cdf(T x) {
  return 0.5 * (1.0 + std::erf(static_cast<double>(x) / std::numbers::sqrt2));
}

template <typename T>
double phi_pdf(T x) {
  const double xd = static_cast<double>(x);
  return std::exp(-0.5 * xd * xd) * (1.0 / std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace detail

// ---- TensorT ------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  auto impl = std::make_shared<Impl>();
  const int64_t n = detail::shape_numel(shape);
  impl->shape = std::move(shape);
  impl->values.assign(static_cast<size_t>(n), T(0));
  return TensorT(std::move(impl));
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  TensorT t = zeros(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from_values(Shape shape, std::vector<T> values) {
  const int64_t n = detail::shape_numel(shape);
  check(n == static_cast<int64_t>(values.size()), ErrorKind::Dimension,
        "from_values: shape ", shape_str(shape), " wants ", n, " elements, got ", values.size());
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return TensorT(std::move(impl));
}

template <typename T>
T TensorT<T>::item() const {
  check(defined() && numel() == 1, ErrorKind::Contract, "item: tensor is not a scalar");
  return impl_->values[0];
}

template <typename T>
TensorT<T>& TensorT<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

template <typename T>
std::vector<T>& TensorT<T>::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T(0));
  return impl_->grad;
}

template <typename T>
const std::vector<T>& TensorT<T>::grad() const {
  check(!impl_->grad.empty(), ErrorKind::Contract, "grad: no gradient buffer allocated");
  return impl_->grad;
}

template <typename T>
void TensorT<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

// ---- TapeT --------------------------------------------------------------

template <typename T>
int TapeT<T>::record(std::vector<int> parents, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(parents), std::move(backward)});
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
void TapeT<T>::backward(const TensorT<T>& loss) {
  check(loss.defined(), ErrorKind::Contract, "backward: undefined loss tensor");
  check(loss.numel() == 1, ErrorKind::Contract, "backward: loss must be scalar, has shape ",
        shape_str(loss.shape()));
  TensorT<T> seed = loss;  // non-const handle to the same storage
  seed.grad()[0] += T(1);
  const int start = loss.node();
  if (start < 0) return;  // loss does not depend on any recorded op
  check(start < static_cast<int>(nodes_.size()), ErrorKind::Contract,
        "backward: loss was recorded on a different tape");
  std::vector<char> live(static_cast<size_t>(start) + 1, 0);
  live[static_cast<size_t>(start)] = 1;
  for (int i = start; i >= 0; --i) {
    if (!live[static_cast<size_t>(i)]) continue;
    for (int p : nodes_[static_cast<size_t>(i)].parents) live[static_cast<size_t>(p)] = 1;
    nodes_[static_cast<size_t>(i)].back();
  }
}

// ---- op plumbing ---------------------------------------------------------

namespace detail {

// Marks `out` as gradient-bearing and records `back` when the tape is active
// and at least one input participates in differentiation.
template <typename T>
void maybe_record(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs, TensorT<T>& out,
                  std::function<void()> back) {
  if (!tape) return;
  bool needed = false;
  std::vector<int> parents;
  for (const TensorT<T>* in : inputs) {
    if (in->defined() && in->requires_grad()) {
      needed = true;
      if (in->node() >= 0) parents.push_back(in->node());
    }
  }
  if (!needed) return;
  out.set_requires_grad(true);
  out.set_node(tape->record(std::move(parents), std::move(back)));
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---- ops ------------------------------------------------------------------

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check(a.shape() == b.shape(), ErrorKind::Dimension, "add: shape mismatch ",
        shape_str(a.shape()), " vs ", shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  detail::maybe_record(tape, {&a, &b}, out, [a = a, b = b, out = out]() mutable {
    const std::vector<T>& g = out.grad();
    if (a.requires_grad()) detail::accumulate(a.grad(), g);
    if (b.requires_grad()) detail::accumulate(b.grad(), g);
  });
  return out;
}

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * factor;
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, factor = factor]() mutable {
    const std::vector<T>& g = out.grad();
    std::vector<T>& gx = x.grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
  });
  return out;
}

template <typename T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2, ErrorKind::Dimension, "matmul: expects matrices, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  check(b.dim(0) == k, ErrorKind::Dimension, "matmul: inner dims differ: ", shape_str(a.shape()),
        " x ", shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros({m, n});
  detail::gemm_nn(a.data(), k, b.data(), n, out.data(), n, m, n, k, false);
  detail::maybe_record(tape, {&a, &b}, out, [a = a, b = b, out = out, m = m, n = n, k = k]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) detail::gemm_nt(g, n, b.data(), n, a.grad().data(), k, m, k, n, true);
    if (b.requires_grad()) detail::gemm_tn(a.data(), k, g, n, b.grad().data(), n, k, n, m, true);
  });
  return out;
}

template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  check(w.ndim() == 2, ErrorKind::Dimension, "linear: weight must be [in x out], got ",
        shape_str(w.shape()));
  const int64_t in = w.dim(0), outd = w.dim(1);
  check(x.cols() == in, ErrorKind::Dimension, "linear: input cols ", x.cols(),
        " do not match weight rows ", in);
  check(bias.ndim() == 1 && bias.dim(0) == outd, ErrorKind::Dimension,
        "linear: bias must be [out] = [", outd, "], got ", shape_str(bias.shape()));
  const int64_t r = x.rows();
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  detail::gemm_nn(x.data(), in, w.data(), outd, out.data(), outd, r, outd, in, false);
  const T* pb = bias.data();
  T* po = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < outd; ++j) po[i * outd + j] += pb[j];
  detail::maybe_record(tape, {&x, &w, &bias}, out, [x = x, w = w, bias = bias, out = out, r = r, in = in, outd = outd]() mutable {
    const T* g = out.grad().data();
    if (x.requires_grad()) detail::gemm_nt(g, outd, w.data(), outd, x.grad().data(), in, r, in, outd, true);
    if (w.requires_grad()) detail::gemm_tn(x.data(), in, g, outd, w.grad().data(), outd, in, outd, r, true);
    if (bias.requires_grad()) {
      std::vector<T>& gb = bias.grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < outd; ++j) gb[static_cast<size_t>(j)] += g[i * outd + j];
    }
  });
  return out;
}

template <typename T>
TensorT<T> slice_cols(TapeT<T>* tape, const TensorT<T>& x, int64_t begin, int64_t len) {
  const int64_t d = x.cols(), r = x.rows();
  check(begin >= 0 && len >= 1 && begin + len <= d, ErrorKind::Dimension, "slice_cols: range [",
        begin, ", ", begin + len, ") outside width ", d);
  Shape out_shape = x.shape();
  out_shape.back() = len;
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < r; ++i)
    std::copy(px + i * d + begin, px + i * d + begin + len, po + i * len);
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, begin = begin, len = len, d = d, r = r]() mutable {
    const T* g = out.grad().data();
    std::vector<T>& gx = x.grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < len; ++j) gx[static_cast<size_t>(i * d + begin + j)] += g[i * len + j];
  });
  return out;
}

template <typename T>
TensorT<T> layer_norm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& bias, double eps) {
  const int64_t d = x.cols(), r = x.rows();
  check(gain.ndim() == 1 && gain.dim(0) == d && bias.ndim() == 1 && bias.dim(0) == d,
        ErrorKind::Dimension, "layer_norm: affine params must be [", d, "]");
  check(eps > 0, ErrorKind::Config, "layer_norm: eps must be positive");
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(r * d));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(r));
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  for (int64_t i = 0; i < r; ++i) {
    const T* row = px + i * d;
    double mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = static_cast<T>(inv);
    for (int64_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((row[j] - mean) * inv);
      (*xhat)[static_cast<size_t>(i * d + j)] = xh;
      po[i * d + j] = xh * pg[j] + pb[j];
    }
  }
  detail::maybe_record(tape, {&x, &gain, &bias}, out, [x = x, gain = gain, bias = bias, out = out, xhat = xhat, inv_std = inv_std, r = r, d = d]() mutable {
    const T* g = out.grad().data();
    const T* xh = xhat->data();
    const T* pg = gain.data();
    if (gain.requires_grad() || bias.requires_grad()) {
      std::vector<T>* gg = gain.requires_grad() ? &gain.grad() : nullptr;
      std::vector<T>* gb = bias.requires_grad() ? &bias.grad() : nullptr;
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < d; ++j) {
          if (gg) (*gg)[static_cast<size_t>(j)] += g[i * d + j] * xh[i * d + j];
          if (gb) (*gb)[static_cast<size_t>(j)] += g[i * d + j];
        }
    }
    if (x.requires_grad()) {
      std::vector<T>& gx = x.grad();
      for (int64_t i = 0; i < r; ++i) {
        double m1 = 0, m2 = 0;
        for (int64_t j = 0; j < d; ++j) {
          const double dxh = static_cast<double>(g[i * d + j]) * pg[j];
          m1 += dxh;
          m2 += dxh * xh[i * d + j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double inv = (*inv_std)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) {
          const double dxh = static_cast<double>(g[i * d + j]) * pg[j];
          gx[static_cast<size_t>(i * d + j)] +=
              static_cast<T>((dxh - m1 - xh[i * d + j] * m2) * inv);
        }
      }
    }
  });
  return out;
}

template <typename T>
TensorT<T> gelu(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = static_cast<T>(px[i] * detail::phi_cdf(px[i]));
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, n = n]() mutable {
    const std::vector<T>& g = out.grad();
    std::vector<T>& gx = x.grad();
    const T* px = x.data();
    for (int64_t i = 0; i < n; ++i) {
      const double deriv = detail::phi_cdf(px[i]) + px[i] * detail::phi_pdf(px[i]);
      gx[static_cast<size_t>(i)] += static_cast<T>(g[static_cast<size_t>(i)] * deriv);
    }
  });
  return out;
}

template <typename T>
TensorT<T> softmax(TapeT<T>* tape, const TensorT<T>& x, int axis) {
  const int nd = x.ndim();
  check(nd >= 1, ErrorKind::Dimension, "softmax: needs at least one axis");
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, ErrorKind::Dimension, "softmax: axis out of range");
  int64_t outer = 1, inner = 1;
  const int64_t len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(px[base + j * inner]));
      double z = 0;
      for (int64_t j = 0; j < len; ++j) {
        const double e = std::exp(static_cast<double>(px[base + j * inner]) - mx);
        po[base + j * inner] = static_cast<T>(e);
        z += e;
      }
      const double invz = 1.0 / z;
      for (int64_t j = 0; j < len; ++j)
        po[base + j * inner] = static_cast<T>(po[base + j * inner] * invz);
    }
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, outer = outer, inner = inner, len = len]() mutable {
    const T* g = out.grad().data();
    const T* y = out.data();
    std::vector<T>& gx = x.grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * len * inner + in;
        double dot = 0;
        for (int64_t j = 0; j < len; ++j)
          dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
        for (int64_t j = 0; j < len; ++j)
          gx[static_cast<size_t>(base + j * inner)] +=
              static_cast<T>(y[base + j * inner] * (static_cast<double>(g[base + j * inner]) - dot));
      }
  });
  return out;
}

namespace detail {

// Shared rotation core for rope_rotate: dir=+1 forward, dir=-1 transposed
// (gradient) rotation; writes into dst (+= when accumulate).
template <typename T>
void rope_apply(const T* src, T* dst, const std::vector<Pos3>& pos, int64_t rows, int64_t width,
                int heads, double base, int dir, bool acc) {
  const int64_t dh = width / heads;
  const int64_t pairs_per_axis = dh / 6;
  const int64_t rotated = pairs_per_axis * 6;
  std::vector<double> theta(static_cast<size_t>(pairs_per_axis));
  for (int64_t i = 0; i < pairs_per_axis; ++i)
    theta[static_cast<size_t>(i)] =
        std::pow(base, -static_cast<double>(i) / static_cast<double>(pairs_per_axis));
  for (int64_t r = 0; r < rows; ++r) {
    const double pcomp[3] = {static_cast<double>(pos[static_cast<size_t>(r)].t),
                             static_cast<double>(pos[static_cast<size_t>(r)].y),
                             static_cast<double>(pos[static_cast<size_t>(r)].x)};
    for (int h = 0; h < heads; ++h) {
      const int64_t off = r * width + h * dh;
      for (int axis = 0; axis < 3; ++axis) {
        const int64_t aoff = off + axis * 2 * pairs_per_axis;
        for (int64_t i = 0; i < pairs_per_axis; ++i) {
          const double angle = pcomp[axis] * theta[static_cast<size_t>(i)] * dir;
          const T c = static_cast<T>(std::cos(angle));
          const T s = static_cast<T>(std::sin(angle));
          const T x0 = src[aoff + 2 * i];
          const T x1 = src[aoff + 2 * i + 1];
          const T y0 = c * x0 - s * x1;
          const T y1 = s * x0 + c * x1;
          if (acc) {
            dst[aoff + 2 * i] += y0;
            dst[aoff + 2 * i + 1] += y1;
          } else {
            dst[aoff + 2 * i] = y0;
            dst[aoff + 2 * i + 1] = y1;
          }
        }
      }
      // channels beyond the three equal pair groups pass through unrotated
      for (int64_t j = rotated; j < dh; ++j) {
        if (acc)
          dst[off + j] += src[off + j];
        else
          dst[off + j] = src[off + j];
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> rope_rotate(TapeT<T>* tape, const TensorT<T>& x, const std::vector<Pos3>& positions,
                       int heads, double base) {
  const int64_t w = x.cols(), r = x.rows();
  check(heads >= 1 && w % heads == 0, ErrorKind::Config, "rope_rotate: width ", w,
        " not divisible by heads ", heads);
  const int64_t dh = w / heads;
  check(dh >= 6, ErrorKind::Config, "rope_rotate: per-head dim ", dh,
        " cannot host one rotary pair per axis (needs >= 6)");
  check(static_cast<int64_t>(positions.size()) == r, ErrorKind::Dimension,
        "rope_rotate: got ", positions.size(), " positions for ", r, " rows");
  check(base > 1.0, ErrorKind::Config, "rope_rotate: base must exceed 1");
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  detail::rope_apply(x.data(), out.data(), positions, r, w, heads, base, +1, false);
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, positions = positions, heads = heads, base = base, r = r, w = w]() mutable {
    // the rotation is orthogonal, so the gradient rotates by the negated angle
    detail::rope_apply(out.grad().data(), x.grad().data(), positions, r, w, heads, base, -1, true);
  });
  return out;
}

template <typename T>
TensorT<T> attention(TapeT<T>* tape, const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                     const std::vector<RowSpan>& q_spans, const std::vector<RowSpan>& kv_spans,
                     int heads, double scale) {
  const int64_t w = q.cols();
  check(k.cols() == w && v.cols() == w, ErrorKind::Dimension,
        "attention: q/k/v widths differ: ", w, ", ", k.cols(), ", ", v.cols());
  check(k.rows() == v.rows(), ErrorKind::Dimension, "attention: k and v row counts differ");
  check(heads >= 1 && w % heads == 0, ErrorKind::Config, "attention: width ", w,
        " not divisible by heads ", heads);
  check(q_spans.size() == kv_spans.size() && !q_spans.empty(), ErrorKind::Contract,
        "attention: span lists must pair up and be non-empty");
  const int64_t dh = w / heads;
  const int64_t rq = q.rows(), rk = k.rows();
  int64_t total = 0;
  for (size_t i = 0; i < q_spans.size(); ++i) {
    const RowSpan& qs = q_spans[i];
    const RowSpan& ks = kv_spans[i];
    check(qs.len >= 1 && qs.begin >= 0 && qs.begin + qs.len <= rq, ErrorKind::Contract,
          "attention: bad query span ", qs.begin, "+", qs.len);
    check(ks.len >= 1 && ks.begin >= 0 && ks.begin + ks.len <= rk, ErrorKind::Contract,
          "attention: bad key span ", ks.begin, "+", ks.len);
    total += heads * qs.len * ks.len;
  }
  TensorT<T> out = TensorT<T>::zeros(q.shape());
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(total));
  int64_t cursor = 0;
  std::vector<int64_t> offsets(q_spans.size());
  for (size_t i = 0; i < q_spans.size(); ++i) {
    offsets[i] = cursor;
    const RowSpan& qs = q_spans[i];
    const RowSpan& ks = kv_spans[i];
    for (int h = 0; h < heads; ++h) {
      T* p = probs->data() + cursor;
      const T* qp = q.data() + qs.begin * w + h * dh;
      const T* kp = k.data() + ks.begin * w + h * dh;
      const T* vp = v.data() + ks.begin * w + h * dh;
      detail::gemm_nt(qp, w, kp, w, p, ks.len, qs.len, ks.len, dh, false);
      for (int64_t row = 0; row < qs.len; ++row) {
        T* pr = p + row * ks.len;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < ks.len; ++j)
          mx = std::max(mx, static_cast<double>(pr[j]) * scale);
        double z = 0;
        for (int64_t j = 0; j < ks.len; ++j) {
          const double e = std::exp(static_cast<double>(pr[j]) * scale - mx);
          pr[j] = static_cast<T>(e);
          z += e;
        }
        const double invz = 1.0 / z;
        for (int64_t j = 0; j < ks.len; ++j) pr[j] = static_cast<T>(pr[j] * invz);
      }
      detail::gemm_nn(p, ks.len, vp, w, out.data() + qs.begin * w + h * dh, w, qs.len, dh, ks.len, false);
      cursor += qs.len * ks.len;
    }
  }
  detail::maybe_record(tape, {&q, &k, &v}, out,
               [q = q, k = k, v = v, out = out, q_spans = q_spans, kv_spans = kv_spans, offsets = offsets, probs = probs, heads = heads, scale = scale, w = w, dh = dh]() mutable {
    const T* g = out.grad().data();
    for (size_t i = 0; i < q_spans.size(); ++i) {
      const RowSpan& qs = q_spans[i];
      const RowSpan& ks = kv_spans[i];
      int64_t cursor = offsets[i];
      std::vector<T> dp(static_cast<size_t>(qs.len * ks.len));
      for (int h = 0; h < heads; ++h) {
        const T* p = probs->data() + cursor;
        const T* go = g + qs.begin * w + h * dh;
        const T* qp = q.data() + qs.begin * w + h * dh;
        const T* kp = k.data() + ks.begin * w + h * dh;
        const T* vp = v.data() + ks.begin * w + h * dh;
        if (v.requires_grad())
          detail::gemm_tn(p, ks.len, go, w, v.grad().data() + ks.begin * w + h * dh, w, ks.len, dh, qs.len,
                  true);
        // dP = dO V^T, then dS = (dP - rowdot(dP, P)) * P * scale in place
        detail::gemm_nt(go, w, vp, w, dp.data(), ks.len, qs.len, ks.len, dh, false);
        for (int64_t row = 0; row < qs.len; ++row) {
          T* dpr = dp.data() + row * ks.len;
          const T* pr = p + row * ks.len;
          double dot = 0;
          for (int64_t j = 0; j < ks.len; ++j) dot += static_cast<double>(dpr[j]) * pr[j];
          for (int64_t j = 0; j < ks.len; ++j)
            dpr[j] = static_cast<T>((static_cast<double>(dpr[j]) - dot) * pr[j] * scale);
        }
        if (q.requires_grad())
          detail::gemm_nn(dp.data(), ks.len, kp, w, q.grad().data() + qs.begin * w + h * dh, w, qs.len, dh,
                  ks.len, true);
        if (k.requires_grad())
          detail::gemm_tn(dp.data(), ks.len, qp, w, k.grad().data() + ks.begin * w + h * dh, w, ks.len, dh,
                  qs.len, true);
        cursor += qs.len * ks.len;
      }
    }
  });
  return out;
}

template <typename T>
TensorT<T> concat_rows(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check(a.cols() == b.cols(), ErrorKind::Dimension, "concat_rows: widths differ: ", a.cols(),
        " vs ", b.cols());
  const int64_t d = a.cols(), ra = a.rows(), rb = b.rows();
  TensorT<T> out = TensorT<T>::zeros({ra + rb, d});
  std::copy(a.data(), a.data() + ra * d, out.data());
  std::copy(b.data(), b.data() + rb * d, out.data() + ra * d);
  detail::maybe_record(tape, {&a, &b}, out, [a = a, b = b, out = out, ra = ra, rb = rb, d = d]() mutable {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      std::vector<T>& ga = a.grad();
      for (int64_t i = 0; i < ra * d; ++i) ga[static_cast<size_t>(i)] += g[i];
    }
    if (b.requires_grad()) {
      std::vector<T>& gb = b.grad();
      for (int64_t i = 0; i < rb * d; ++i) gb[static_cast<size_t>(i)] += g[ra * d + i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> compose_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& filler,
                        const std::vector<int64_t>& out_map) {
  const int64_t d = x.cols();
  check(filler.numel() == d, ErrorKind::Dimension, "compose_rows: filler width ", filler.numel(),
        " does not match input width ", d);
  const int64_t rx = x.rows();
  const int64_t ro = static_cast<int64_t>(out_map.size());
  check(ro >= 1, ErrorKind::Degenerate, "compose_rows: empty output map");
  TensorT<T> out = TensorT<T>::zeros({ro, d});
  const T* px = x.data();
  const T* pf = filler.data();
  T* po = out.data();
  for (int64_t i = 0; i < ro; ++i) {
    const int64_t src = out_map[static_cast<size_t>(i)];
    check(src < rx, ErrorKind::Contract, "compose_rows: source row ", src, " out of range ", rx);
    const T* row = src >= 0 ? px + src * d : pf;
    std::copy(row, row + d, po + i * d);
  }
  detail::maybe_record(tape, {&x, &filler}, out, [x = x, filler = filler, out = out, out_map = out_map, d = d]() mutable {
    const T* g = out.grad().data();
    const int64_t ro = static_cast<int64_t>(out_map.size());
    std::vector<T>* gx = x.requires_grad() ? &x.grad() : nullptr;
    std::vector<T>* gf = filler.requires_grad() ? &filler.grad() : nullptr;
    for (int64_t i = 0; i < ro; ++i) {
      const int64_t src = out_map[static_cast<size_t>(i)];
      if (src >= 0) {
        if (gx)
          for (int64_t j = 0; j < d; ++j) (*gx)[static_cast<size_t>(src * d + j)] += g[i * d + j];
      } else if (gf) {
        for (int64_t j = 0; j < d; ++j) (*gf)[static_cast<size_t>(j)] += g[i * d + j];
      }
    }
  });
  return out;
}

template <typename T>
TensorT<T> gather_rows(TapeT<T>* tape, const TensorT<T>& x, const std::vector<int64_t>& indices) {
  const int64_t d = x.cols(), rx = x.rows();
  const int64_t ro = static_cast<int64_t>(indices.size());
  check(ro >= 1, ErrorKind::Degenerate, "gather_rows: empty index list");
  TensorT<T> out = TensorT<T>::zeros({ro, d});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < ro; ++i) {
    const int64_t src = indices[static_cast<size_t>(i)];
    check(src >= 0 && src < rx, ErrorKind::Contract, "gather_rows: index ", src,
          " out of range ", rx);
    std::copy(px + src * d, px + src * d + d, po + i * d);
  }
  detail::maybe_record(tape, {&x}, out, [x = x, out = out, indices = indices, d = d]() mutable {
    const T* g = out.grad().data();
    std::vector<T>& gx = x.grad();
    for (size_t i = 0; i < indices.size(); ++i) {
      const int64_t src = indices[i];
      for (int64_t j = 0; j < d; ++j)
        gx[static_cast<size_t>(src * d + j)] += g[static_cast<int64_t>(i) * d + j];
    }
  });
  return out;
}

template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros({1});
  double acc = 0;
  const T* px = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = static_cast<T>(acc);
  detail::maybe_record(tape, {&x}, out, [x = x, out = out]() mutable {
    const T g = out.grad()[0];
    std::vector<T>& gx = x.grad();
    for (T& gi : gx) gi += g;
  });
  return out;
}

template <typename T>
TensorT<T> l1_loss_masked(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target,
                          const std::vector<uint8_t>& row_mask) {
  check(pred.shape() == target.shape(), ErrorKind::Dimension, "l1_loss_masked: shape mismatch ",
        shape_str(pred.shape()), " vs ", shape_str(target.shape()));
  const int64_t r = pred.rows(), d = pred.cols();
  check(static_cast<int64_t>(row_mask.size()) == r, ErrorKind::Dimension,
        "l1_loss_masked: mask covers ", row_mask.size(), " rows, tensor has ", r);
  int64_t selected = 0;
  for (uint8_t m : row_mask) selected += (m != 0);
  check(selected >= 1, ErrorKind::Degenerate, "l1_loss_masked: mask selects no rows");
  const double denom = static_cast<double>(selected) * static_cast<double>(d);
  TensorT<T> out = TensorT<T>::zeros({1});
  const T* pp = pred.data();
  const T* pt = target.data();
  double acc = 0;
  for (int64_t i = 0; i < r; ++i) {
    if (!row_mask[static_cast<size_t>(i)]) continue;
    for (int64_t j = 0; j < d; ++j) acc += std::abs(static_cast<double>(pp[i * d + j]) - pt[i * d + j]);
  }
  out.data()[0] = static_cast<T>(acc / denom);
  detail::maybe_record(tape, {&pred, &target}, out, [pred = pred, target = target, out = out, row_mask = row_mask, r = r, d = d, denom = denom]() mutable {
    const double g = static_cast<double>(out.grad()[0]) / denom;
    const T* pp = pred.data();
    const T* pt = target.data();
    std::vector<T>* gp = pred.requires_grad() ? &pred.grad() : nullptr;
    std::vector<T>* gt = target.requires_grad() ? &target.grad() : nullptr;
    for (int64_t i = 0; i < r; ++i) {
      if (!row_mask[static_cast<size_t>(i)]) continue;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(pp[i * d + j]) - pt[i * d + j];
        // subgradient at exact zero difference is zero
        const double s = diff > 0 ? g : (diff < 0 ? -g : 0.0);
        if (gp) (*gp)[static_cast<size_t>(i * d + j)] += static_cast<T>(s);
        if (gt) (*gt)[static_cast<size_t>(i * d + j)] -= static_cast<T>(s);
      }
    }
  });
  return out;
}

template <typename T>
TensorT<T> l1_loss(TapeT<T>* tape, const TensorT<T>& pred, const TensorT<T>& target) {
  return l1_loss_masked(tape, pred, target, std::vector<uint8_t>(static_cast<size_t>(pred.rows()), 1));
}

template <typename T>
TensorT<T> cross_entropy_logits(TapeT<T>* tape, const TensorT<T>& logits,
                                const std::vector<int>& labels) {
  check(logits.ndim() == 2, ErrorKind::Dimension, "cross_entropy_logits: expects [batch x classes]");
  const int64_t b = logits.dim(0), c = logits.dim(1);
  check(static_cast<int64_t>(labels.size()) == b, ErrorKind::Dimension,
        "cross_entropy_logits: ", labels.size(), " labels for batch ", b);
  check(b >= 1, ErrorKind::Degenerate, "cross_entropy_logits: empty batch");
  for (int lbl : labels)
    check(lbl >= 0 && lbl < c, ErrorKind::Contract, "cross_entropy_logits: label ", lbl,
          " outside [0, ", c, ")");
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(b * c));
  const T* pl = logits.data();
  double acc = 0;
  for (int64_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(pl[i * c + j]));
    double z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(pl[i * c + j]) - mx);
    const double lse = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j)
      (*probs)[static_cast<size_t>(i * c + j)] =
          static_cast<T>(std::exp(static_cast<double>(pl[i * c + j]) - lse));
    acc -= static_cast<double>(pl[i * c + labels[static_cast<size_t>(i)]]) - lse;
  }
  TensorT<T> out = TensorT<T>::zeros({1});
  out.data()[0] = static_cast<T>(acc / static_cast<double>(b));
  detail::maybe_record(tape, {&logits}, out, [logits = logits, out = out, probs = probs, labels = labels, b = b, c = c]() mutable {
    const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(b);
    std::vector<T>& gl = logits.grad();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < c; ++j) {
        const double onehot = labels[static_cast<size_t>(i)] == j ? 1.0 : 0.0;
        gl[static_cast<size_t>(i * c + j)] +=
            static_cast<T>(((*probs)[static_cast<size_t>(i * c + j)] - onehot) * g);
      }
  });
  return out;
}

template <typename T>
TensorT<T> detach(const TensorT<T>& x) {
  return TensorT<T>::from_values(x.shape(), x.values());
}

template <typename T>
bool all_finite(const TensorT<T>& x) {
  for (const T v : x.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
double gradient_global_norm(const std::vector<TensorT<T>>& params) {
  double acc = 0;
  for (const TensorT<T>& p : params) {
    if (!p.has_grad()) continue;
    for (const T g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

template <typename T>
double clip_gradient_norm(std::vector<TensorT<T>>& params, double max_norm) {
  check(max_norm > 0, ErrorKind::Config, "clip_gradient_norm: max_norm must be positive");
  const double norm = gradient_global_norm(params);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (TensorT<T>& p : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.grad()) g *= factor;
    }
  }
  return norm;
}


}  // namespace salt
