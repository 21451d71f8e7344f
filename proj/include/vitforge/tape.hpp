#pragma once

// Reverse-mode differentiation over a linear tape. Every recorded operation
// owns a hand-written vector-Jacobian product. Nodes are appended in execution
// order, so walking the tape backwards is a valid reverse topological order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vitforge/kernels.hpp"
#include "vitforge/tensor.hpp"

namespace vitforge {

template <typename T>
class Tape;

// Handle to a tape node.
template <typename T>
struct Var {
  const Tape<T>* tape = nullptr;
  std::size_t id = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node being differentiated; reads
  // grad(id) and accumulates into the inputs' gradients.
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A leaf that owns its value.
  Var<T> leaf(Tensor<T> value, bool trainable = false) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = trainable;
    n.trainable = trainable;
    return push(std::move(n));
  }

  // A leaf that references external storage, which must outlive the tape.
  Var<T> bind(const Tensor<T>& value, bool trainable) {
    Node n;
    n.external = &value;
    n.requires_grad = trainable;
    n.trainable = trainable;
    return push(std::move(n));
  }

  // Records an operation result. The backward closure is dropped when no
  // input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward) {
    Node n;
    n.owned = std::move(value);
    for (const auto& in : inputs) {
      check(in);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const {
    check(v);
    return value(v.id);
  }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer for a node, allocated (zeroed) on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad = std::make_unique<Tensor<T>>(value(id).shape());
    return *n.grad;
  }

  // Gradient of the last backward() with respect to v; zeros if v was not
  // reached.
  Tensor<T> grad_of(Var<T> v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.grad ? *n.grad : Tensor<T>(value(v.id).shape());
  }

  void backward(Var<T> loss) {
    if (loss.tape != this || loss.id >= nodes_.size()) {
      throw ContractError("backward: loss was not produced on this tape");
    }
    if (value(loss.id).size() != 1 || value(loss.id).rank() != 0) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(value(loss.id).shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void check(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::unique_ptr<Tensor<T>> grad;
    Backward backward;
    bool requires_grad = false;
    bool trainable = false;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// Operations recorded on a tape. Each returns a new Var.
namespace ops {

namespace detail {
template <typename T>
void accumulate(Tape<T>& tape, std::size_t id, const Tensor<T>& delta) {
  if (!tape.requires_grad(id)) return;
  Tensor<T>& g = tape.grad(id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}
}  // namespace detail

template <typename T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.rank() != 2 || bv.rank() != 2) {
    throw DimensionError("matmul on tape expects rank-2 operands, got " +
                         shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out = kernels::matmul(av, bv);
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& A = t.value(ia);
    const Tensor<T>& B = t.value(ib);
    const Tensor<T>& G = t.grad(self);
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    if (t.requires_grad(ia)) {
      kernels::detail::gemm_nt(m, k, n, G.data().data(), n, B.data().data(), n,
                               t.grad(ia).data().data(), k, true);
    }
    if (t.requires_grad(ib)) {
      kernels::detail::gemm_tn(k, n, m, A.data().data(), k, G.data().data(), n,
                               t.grad(ib).data().data(), n, true);
    }
  });
}

// x[m x k] * w[k x n] + b[n]
template <typename T>
Var<T> linear(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(w);
  const Tensor<T>& bv = tape.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 ||
      xv.dim(1) != wv.dim(0) || bv.dim(0) != wv.dim(1)) {
    throw DimensionError("linear: input " + shape_str(xv.shape()) +
                         ", weight " + shape_str(wv.shape()) + ", bias " +
                         shape_str(bv.shape()) + " are incompatible");
  }
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(bv.data().begin(), bv.data().end(),
              out.data().begin() + i * n);
  kernels::detail::gemm_nn(m, n, k, xv.data().data(), k, wv.data().data(), n,
                           out.data().data(), n, true);
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return tape.record(std::move(out), {x, w, b},
                     [ix, iw, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& X = t.value(ix);
    const Tensor<T>& W = t.value(iw);
    const Tensor<T>& G = t.grad(self);
    const std::size_t m = X.dim(0), k = X.dim(1), n = W.dim(1);
    if (t.requires_grad(ix)) {
      kernels::detail::gemm_nt(m, k, n, G.data().data(), n, W.data().data(), n,
                               t.grad(ix).data().data(), k, true);
    }
    if (t.requires_grad(iw)) {
      kernels::detail::gemm_tn(k, n, m, X.data().data(), k, G.data().data(), n,
                               t.grad(iw).data().data(), n, true);
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
    }
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T> g = t.grad(self);
    detail::accumulate(t, ia, g);
    detail::accumulate(t, ib, g);
  });
}

template <typename T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& A = t.value(ia);
    const Tensor<T>& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& av = tape.value(a);
  T s{0};
  for (T v : av.data()) s += v;
  const std::size_t ia = a.id;
  return tape.record(Tensor<T>::scalar(s), {a}, [ia](Tape<T>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const T g = t.grad(self)[0];
    for (T& v : t.grad(ia).data()) v += g;
  });
}

template <typename T>
Var<T> softmax(Tape<T>& tape, Var<T> x, std::size_t axis) {
  Tensor<T> y = kernels::softmax(tape.value(x), axis);
  const std::size_t ix = x.id;
  return tape.record(std::move(y), {x}, [ix, axis](Tape<T>& t, std::size_t self) {
    detail::accumulate(t, ix,
                       kernels::softmax_backward(t.value(self), t.grad(self), axis));
  });
}

template <typename T>
Var<T> layer_norm(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta,
                  T eps = T(kernels::kLayerNormEps)) {
  auto cache = std::make_shared<kernels::LayerNormCache<T>>();
  Tensor<T> y = kernels::layer_norm(tape.value(x), tape.value(gamma),
                                    tape.value(beta), eps, cache.get());
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return tape.record(std::move(y), {x, gamma, beta},
                     [ix, ig, ib, cache](Tape<T>& t, std::size_t self) {
    auto g = kernels::layer_norm_backward(t.value(ix), t.value(ig), *cache,
                                          t.grad(self));
    detail::accumulate(t, ix, g.dx);
    detail::accumulate(t, ig, g.dgamma);
    detail::accumulate(t, ib, g.dbeta);
  });
}

template <typename T>
Var<T> gelu(Tape<T>& tape, Var<T> x) {
  Tensor<T> y = kernels::gelu(tape.value(x));
  const std::size_t ix = x.id;
  return tape.record(std::move(y), {x}, [ix](Tape<T>& t, std::size_t self) {
    detail::accumulate(t, ix, kernels::gelu_backward(t.value(ix), t.grad(self)));
  });
}

// Multi-head self-attention core over a fused projection.
// qkv: (batch * tokens) x 3D with q, k, v blocks in that order; head j uses
// columns [j*dk, (j+1)*dk) of each block. Returns (batch * tokens) x D with
// heads concatenated in order. Weights of every (image, head) pair are kept
// for the backward pass.
template <typename T>
Var<T> multi_head_attention(Tape<T>& tape, Var<T> qkv, std::size_t batch,
                            std::size_t tokens, std::size_t heads) {
  const Tensor<T>& in = tape.value(qkv);
  if (in.rank() != 2 || in.dim(0) != batch * tokens || in.dim(1) % 3 != 0 ||
      (in.dim(1) / 3) % heads != 0) {
    throw DimensionError("multi_head_attention: qkv " + shape_str(in.shape()) +
                         " incompatible with batch " + std::to_string(batch) +
                         ", tokens " + std::to_string(tokens) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dim = in.dim(1) / 3, dk = dim / heads, ld = 3 * dim;
  Tensor<T> out({batch * tokens, dim});
  auto probs = std::make_shared<std::vector<T>>(batch * heads * tokens * tokens);
  parallel_for(batch * heads, tokens * tokens * dk * 2, [&](std::size_t bh) {
    const std::size_t b = bh / heads, h = bh % heads;
    const T* base = in.data().data() + b * tokens * ld + h * dk;
    kernels::detail::attention_head(
        tokens, dk, base, ld, base + dim, ld, base + 2 * dim, ld,
        out.data().data() + b * tokens * dim + h * dk, dim,
        probs->data() + bh * tokens * tokens);
  });
  const std::size_t iq = qkv.id;
  return tape.record(std::move(out), {qkv},
                     [iq, batch, tokens, heads, dim, dk, ld, probs](
                         Tape<T>& t, std::size_t self) {
    const Tensor<T>& X = t.value(iq);
    const Tensor<T>& G = t.grad(self);
    Tensor<T> dx(X.shape());
    parallel_for(batch * heads, tokens * tokens * dk * 4, [&](std::size_t bh) {
      const std::size_t b = bh / heads, h = bh % heads;
      const std::size_t off = b * tokens * ld + h * dk;
      const T* base = X.data().data() + off;
      T* dbase = dx.data().data() + off;
      kernels::detail::attention_head_backward(
          tokens, dk, base, ld, base + dim, ld, base + 2 * dim, ld,
          probs->data() + bh * tokens * tokens,
          G.data().data() + b * tokens * dim + h * dk, dim, dbase, ld,
          dbase + dim, ld, dbase + 2 * dim, ld);
    });
    detail::accumulate(t, iq, dx);
  });
}

// Builds the token sequence [cls + pos0, patch_1 + pos1, ...] for each image.
// patch_emb: (batch * patches) x D, cls: 1 x D, pos: (patches + 1) x D.
template <typename T>
Var<T> assemble_tokens(Tape<T>& tape, Var<T> patch_emb, Var<T> cls, Var<T> pos,
                       std::size_t batch) {
  const Tensor<T>& pe = tape.value(patch_emb);
  const Tensor<T>& cv = tape.value(cls);
  const Tensor<T>& pv = tape.value(pos);
  if (pe.rank() != 2 || pe.dim(0) % batch != 0) {
    throw DimensionError("assemble_tokens: patch embeddings " +
                         shape_str(pe.shape()) + " not divisible into " +
                         std::to_string(batch) + " images");
  }
  const std::size_t patches = pe.dim(0) / batch, dim = pe.dim(1);
  const std::size_t tokens = patches + 1;
  if (cv.shape() != Shape{1, dim} || pv.shape() != Shape{tokens, dim}) {
    throw DimensionError("assemble_tokens: cls " + shape_str(cv.shape()) +
                         " / pos " + shape_str(pv.shape()) +
                         " do not match embeddings " + shape_str(pe.shape()));
  }
  Tensor<T> out({batch * tokens, dim});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t tkn = 0; tkn < tokens; ++tkn) {
      T* row = out.data().data() + (b * tokens + tkn) * dim;
      const T* src = tkn == 0 ? cv.data().data()
                              : pe.data().data() + (b * patches + tkn - 1) * dim;
      const T* p = pv.data().data() + tkn * dim;
      for (std::size_t j = 0; j < dim; ++j) row[j] = src[j] + p[j];
    }
  }
  const std::size_t ie = patch_emb.id, ic = cls.id, ip = pos.id;
  return tape.record(std::move(out), {patch_emb, cls, pos},
                     [ie, ic, ip, batch, patches, tokens, dim](
                         Tape<T>& t, std::size_t self) {
    const Tensor<T>& G = t.grad(self);
    const bool ge = t.requires_grad(ie), gc = t.requires_grad(ic),
               gp = t.requires_grad(ip);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t tkn = 0; tkn < tokens; ++tkn) {
        const T* g = G.data().data() + (b * tokens + tkn) * dim;
        if (gp) {
          T* dp = t.grad(ip).data().data() + tkn * dim;
          for (std::size_t j = 0; j < dim; ++j) dp[j] += g[j];
        }
        if (tkn == 0) {
          if (gc) {
            T* dc = t.grad(ic).data().data();
            for (std::size_t j = 0; j < dim; ++j) dc[j] += g[j];
          }
        } else if (ge) {
          T* de = t.grad(ie).data().data() + (b * patches + tkn - 1) * dim;
          for (std::size_t j = 0; j < dim; ++j) de[j] += g[j];
        }
      }
    }
  });
}

// Picks rows offset, offset + stride, ... from a (count * stride) x D matrix.
template <typename T>
Var<T> select_rows(Tape<T>& tape, Var<T> x, std::size_t stride,
                   std::size_t offset) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 2 || stride == 0 || xv.dim(0) % stride != 0 ||
      offset >= stride) {
    throw DimensionError("select_rows: invalid stride/offset for " +
                         shape_str(xv.shape()));
  }
  const std::size_t count = xv.dim(0) / stride, dim = xv.dim(1);
  Tensor<T> out({count, dim});
  for (std::size_t i = 0; i < count; ++i)
    std::copy_n(xv.data().data() + (i * stride + offset) * dim, dim,
                out.data().data() + i * dim);
  const std::size_t ix = x.id;
  return tape.record(std::move(out), {x},
                     [ix, stride, offset, count, dim](Tape<T>& t, std::size_t self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& G = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        gx[(i * stride + offset) * dim + j] += G[i * dim + j];
  });
}

// Mean negative log-likelihood of labels under softmax(logits), computed as
// logsumexp(row) - row[label].
template <typename T>
Var<T> cross_entropy(Tape<T>& tape, Var<T> logits,
                     std::span<const std::int64_t> labels) {
  const Tensor<T>& lv = tape.value(logits);
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(lv.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = lv.dim(0), classes = lv.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) +
                       " in row " + std::to_string(i) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  auto probs = std::make_shared<Tensor<T>>(kernels::softmax(lv, 1));
  T total{0};
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = lv.data().data() + i * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T s{0};
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
    total += mx + std::log(s) - row[labels[i]];
  }
  const T loss = total / static_cast<T>(rows);
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id;
  return tape.record(Tensor<T>::scalar(loss), {logits},
                     [il, probs, lab = std::move(lab), rows, classes](
                         Tape<T>& t, std::size_t self) {
    if (!t.requires_grad(il)) return;
    const T g = t.grad(self)[0] / static_cast<T>(rows);
    Tensor<T>& gl = t.grad(il);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < classes; ++c) {
        const T target = static_cast<std::size_t>(lab[i]) == c ? T{1} : T{0};
        gl[i * classes + c] += g * ((*probs)[i * classes + c] - target);
      }
    }
  });
}

}  // namespace ops
}  // namespace vitforge
