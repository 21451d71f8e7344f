#pragma once

// Forward kernels and their vector-Jacobian products. All functions are pure:
// they read immutable inputs and return fresh tensors.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>

#include "vitforge/parallel.hpp"
#include "vitforge/tensor.hpp"

namespace vitforge::kernels {

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n], all row-major with explicit leading dims.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c,
             std::size_t ldc, bool accumulate) {
  parallel_for(m, n * k, [&](std::size_t i) {
    T* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, T{0});
    const T* arow = a + i * lda;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = arow[t];
      const T* brow = b + t * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c,
             std::size_t ldc, bool accumulate) {
  parallel_for(m, n * k, [&](std::size_t i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      T acc{0};
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  });
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             std::size_t lda, const T* b, std::size_t ldb, T* c,
             std::size_t ldc, bool accumulate) {
  parallel_for(m, n * k, [&](std::size_t i) {
    T* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, T{0});
    for (std::size_t t = 0; t < k; ++t) {
      const T av = a[t * lda + i];
      const T* brow = b + t * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

template <typename T>
void softmax_row(const T* x, T* y, std::size_t n, std::size_t stride) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i * stride]);
  // Double accumulator keeps 32-bit row sums within 1e-6 of one.
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i * stride] = std::exp(x[i * stride] - mx);
    sum += static_cast<double>(y[i * stride]);
  }
  for (std::size_t i = 0; i < n; ++i)
    y[i * stride] = static_cast<T>(static_cast<double>(y[i * stride]) / sum);
}

// One attention head over strided views. q, k, v, out are T rows of dk
// columns with the given row strides. probs receives the T x T weights.
template <typename T>
void attention_head(std::size_t tokens, std::size_t dk, const T* q,
                    std::size_t ldq, const T* k, std::size_t ldk, const T* v,
                    std::size_t ldv, T* out, std::size_t ldo, T* probs) {
  const T scale = T{1} / std::sqrt(static_cast<T>(dk));
  gemm_nt(tokens, tokens, dk, q, ldq, k, ldk, probs, tokens, false);
  for (std::size_t i = 0; i < tokens; ++i) {
    T* row = probs + i * tokens;
    for (std::size_t j = 0; j < tokens; ++j) row[j] *= scale;
    softmax_row(row, row, tokens, 1);
  }
  gemm_nn(tokens, dk, tokens, probs, tokens, v, ldv, out, ldo, false);
}

// Gradients of one head given the saved weights. dq, dk, dv are overwritten.
template <typename T>
void attention_head_backward(std::size_t tokens, std::size_t dk, const T* q,
                             std::size_t ldq, const T* k, std::size_t ldk,
                             const T* v, std::size_t ldv, const T* probs,
                             const T* dout, std::size_t lddo, T* dq,
                             std::size_t lddq, T* dkey, std::size_t lddk,
                             T* dv, std::size_t lddv) {
  const T scale = T{1} / std::sqrt(static_cast<T>(dk));
  // dV = P^T dO
  gemm_tn(tokens, dk, tokens, probs, tokens, dout, lddo, dv, lddv, false);
  // dP = dO V^T, then through softmax: dS = P * (dP - rowsum(dP * P))
  std::vector<T> ds(tokens * tokens);
  gemm_nt(tokens, tokens, dk, dout, lddo, v, ldv, ds.data(), tokens, false);
  for (std::size_t i = 0; i < tokens; ++i) {
    const T* p = probs + i * tokens;
    T* row = ds.data() + i * tokens;
    T dot{0};
    for (std::size_t j = 0; j < tokens; ++j) dot += row[j] * p[j];
    for (std::size_t j = 0; j < tokens; ++j)
      row[j] = p[j] * (row[j] - dot) * scale;
  }
  // dQ = dS K, dK = dS^T Q
  gemm_nn(tokens, dk, tokens, ds.data(), tokens, k, ldk, dq, lddq, false);
  gemm_tn(tokens, dk, tokens, ds.data(), tokens, q, ldq, dkey, lddk, false);
}

inline std::string pair_str(const Shape& a, const Shape& b) {
  return shape_str(a) + " and " + shape_str(b);
}

}  // namespace detail

// C = A x B for 2-D operands, or per leading index for 3-D operands.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    if (a.dim(1) != b.dim(0)) {
      throw DimensionError("matmul: inner extents differ for shapes " +
                           detail::pair_str(a.shape(), b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> c({m, n});
    detail::gemm_nn(m, n, k, a.data().data(), k, b.data().data(), n,
                    c.data().data(), n, false);
    return c;
  }
  if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
      throw DimensionError("batched matmul: incompatible shapes " +
                           detail::pair_str(a.shape(), b.shape()));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2),
                      n = b.dim(2);
    Tensor<T> c({batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
      detail::gemm_nn(m, n, k, a.data().data() + i * m * k, k,
                      b.data().data() + i * k * n, n,
                      c.data().data() + i * m * n, n, false);
    }
    return c;
  }
  throw DimensionError("matmul: unsupported ranks for shapes " +
                       detail::pair_str(a.shape(), b.shape()));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// Splits a shape around `axis` into (outer, extent, inner) iteration counts.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      detail::softmax_row(x.data().data() + base, y.data().data() + base,
                          s.extent, s.inner);
    }
  }
  return y;
}

// dx = y * (dy - sum(dy * y)) along axis.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy,
                           std::size_t axis) {
  require_same_shape(y.shape(), dy.shape(), "softmax_backward");
  const AxisSplit s = split_axis(y.shape(), axis);
  Tensor<T> dx(y.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T dot{0};
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t idx = base + i * s.inner;
        dot += dy[idx] * y[idx];
      }
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t idx = base + i * s.inner;
        dx[idx] = y[idx] * (dy[idx] - dot);
      }
    }
  }
  return dx;
}

inline constexpr double kLayerNormEps = 1e-6;

// Per-row statistics retained for the backward pass.
template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(kLayerNormEps),
                     LayerNormCache<T>* cache = nullptr) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d || gamma.rank() != 1 ||
      beta.rank() != 1) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) +
                         " / beta " + shape_str(beta.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  Tensor<T> y(x.shape());
  if (cache) {
    cache->mean.assign(rows, T{0});
    cache->rstd.assign(rows, T{0});
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T* yr = y.data().data() + r * d;
    T mean{0};
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i)
      yr[i] = gamma[i] * (xr[i] - mean) * rstd + beta[i];
    if (cache) {
      cache->mean[r] = mean;
      cache->rstd[r] = rstd;
    }
  }
  return y;
}

template <typename T>
struct LayerNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x,
                                      const Tensor<T>& gamma,
                                      const LayerNormCache<T>& cache,
                                      const Tensor<T>& dy) {
  require_same_shape(x.shape(), dy.shape(), "layer_norm_backward");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({d}), Tensor<T>({d})};
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    const T* dyr = dy.data().data() + r * d;
    T* dxr = g.dx.data().data() + r * d;
    const T mean = cache.mean[r], rstd = cache.rstd[r];
    T sum_dxhat{0}, sum_dxhat_xhat{0};
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (xr[i] - mean) * rstd;
      dxhat[i] = dyr[i] * gamma[i];
      g.dgamma[i] += dyr[i] * xhat[i];
      g.dbeta[i] += dyr[i];
      sum_dxhat += dxhat[i];
      sum_dxhat_xhat += dxhat[i] * xhat[i];
    }
    const T inv_d = T{1} / static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dxr[i] = rstd * (dxhat[i] - inv_d * sum_dxhat -
                       xhat[i] * inv_d * sum_dxhat_xhat);
    }
  }
  return g;
}

// Exact GELU: x * Phi(x), Phi(x) = (1 + erf(x / sqrt(2))) / 2.
template <typename T>
T gelu_scalar(T x) {
  return x * T(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x.shape(), dy.shape(), "gelu_backward");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    dx[i] = dy[i] * gelu_grad_scalar(x[i]);
  return dx;
}

// Scaled dot-product attention for a single head: softmax(Q K^T / sqrt(dk)) V.
// Optionally returns the T x T weight matrix.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    Tensor<T>* weights = nullptr) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()) + ", V " + shape_str(v.shape()) +
                         " must share (tokens, head_dim)");
  }
  const std::size_t tokens = q.dim(0), dk = q.dim(1);
  Tensor<T> out({tokens, dk});
  Tensor<T> probs({tokens, tokens});
  detail::attention_head(tokens, dk, q.data().data(), dk, k.data().data(), dk,
                         v.data().data(), dk, out.data().data(), dk,
                         probs.data().data());
  if (weights) *weights = std::move(probs);
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace vitforge::kernels
