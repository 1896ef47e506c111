#pragma once

// Differentiable operations over Tensor handles. Each op computes its output
// eagerly and, when the tape is enabled and an input is tracked, records a
// closure that pushes the output gradient back into its inputs.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "leaml/kernels.hpp"
#include "leaml/tensor.hpp"

namespace leaml {

namespace detail {

template <typename T>
bool tracks(const Tape<T>& tape, std::initializer_list<const Var<T>*> inputs) {
  if (!tape.enabled()) return false;
  for (const auto* v : inputs)
    if ((*v)->requires_grad) return true;
  return false;
}

template <typename T>
Var<T> new_output(Shape shape, bool tracked) {
  const std::size_t n = shape_size(shape);
  auto out = std::make_shared<Tensor<T>>();
  out->shape = std::move(shape);
  out->data.assign(n, T(0));
  out->requires_grad = tracked;
  if (tracked) out->grad.assign(n, T(0));
  return out;
}

/// Adds an op's complete local gradient to an input in one pass, so a leaf
/// shared by several subgraphs sums whole per-op contributions.
template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape));
  }
}

}  // namespace detail

/// [m x k] * [k x n] -> [m x n]
template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(*a, "matmul");
  detail::require_matrix(*b, "matmul");
  if (a->cols() != b->rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a->shape) +
                         " and " + shape_string(b->shape));
  }
  const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
  const bool tracked = detail::tracks(tape, {&a, &b});
  auto out = detail::new_output<T>({m, n}, tracked);
  kernels::gemm_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [a, b, o, m, k, n] {
      if (a->requires_grad) {
        std::vector<T> bt(k * n);
        kernels::transpose(b->data.data(), k, n, bt.data());
        std::vector<T> ga(m * k, T(0));
        kernels::gemm_acc(o->grad.data(), bt.data(), ga.data(), m, n, k);
        detail::accumulate(a->grad, ga);
      }
      if (b->requires_grad) {
        std::vector<T> at(m * k);
        kernels::transpose(a->data.data(), m, k, at.data());
        std::vector<T> gb(k * n, T(0));
        kernels::gemm_acc(at.data(), o->grad.data(), gb.data(), k, m, n);
        detail::accumulate(b->grad, gb);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->shape != b->shape) {
    throw DimensionError("add: shapes differ: " + shape_string(a->shape) + " vs " +
                         shape_string(b->shape));
  }
  const bool tracked = detail::tracks(tape, {&a, &b});
  auto out = detail::new_output<T>(a->shape, tracked);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [a, b, o] {
      for (const auto* in : {&a, &b}) {
        if (!(*in)->requires_grad) continue;
        auto& g = (*in)->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    });
  }
  return out;
}

/// Adds a length-n bias to every row of an [m x n] matrix.
template <typename T>
Var<T> add_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias) {
  detail::require_matrix(*x, "add_bias");
  if (bias->size() != x->cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias->shape) +
                         " does not match rows of " + shape_string(x->shape));
  }
  const std::size_t m = x->rows(), n = x->cols();
  const bool tracked = detail::tracks(tape, {&x, &bias});
  auto out = detail::new_output<T>(x->shape, tracked);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out->data[r * n + c] = x->data[r * n + c] + bias->data[c];
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [x, bias, o, m, n] {
      if (x->requires_grad)
        for (std::size_t i = 0; i < m * n; ++i) x->grad[i] += o->grad[i];
      if (bias->requires_grad) {
        std::vector<T> gb(n, T(0));
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) gb[c] += o->grad[r * n + c];
        detail::accumulate(bias->grad, gb);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor) {
  const bool tracked = detail::tracks(tape, {&x});
  auto out = detail::new_output<T>(x->shape, tracked);
  for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] * factor;
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [x, o, factor] {
      for (std::size_t i = 0; i < o->size(); ++i) x->grad[i] += o->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x) {
  const bool tracked = detail::tracks(tape, {&x});
  auto out = detail::new_output<T>(x->shape, tracked);
  if (!tracked) {
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = kernels::gelu(x->data[i]);
    return out;
  }
  std::vector<T> th(x->size());
  for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = kernels::gelu(x->data[i], &th[i]);
  Tensor<T>* o = out.get();
  tape.record(out, [x, o, th = std::move(th)] {
    for (std::size_t i = 0; i < o->size(); ++i)
      x->grad[i] += o->grad[i] * kernels::gelu_grad(x->data[i], th[i]);
  });
  return out;
}

/// Row-wise layer normalization with learned gain and bias (epsilon 1e-5).
template <typename T>
Var<T> layernorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  detail::require_matrix(*x, "layernorm");
  const std::size_t m = x->rows(), n = x->cols();
  if (gain->size() != n || bias->size() != n) {
    throw DimensionError("layernorm: gain " + shape_string(gain->shape) + " / bias " +
                         shape_string(bias->shape) + " do not match " + shape_string(x->shape));
  }
  const bool tracked = detail::tracks(tape, {&x, &gain, &bias});
  auto out = detail::new_output<T>(x->shape, tracked);
  std::vector<T> xhat(tracked ? m * n : 0);
  std::vector<T> rstd(tracked ? m : 0);
  for (std::size_t r = 0; r < m; ++r) {
    kernels::layernorm_row(x->data.data() + r * n, gain->data.data(), bias->data.data(), n,
                           out->data.data() + r * n, tracked ? xhat.data() + r * n : nullptr,
                           tracked ? &rstd[r] : nullptr);
  }
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [x, gain, bias, o, m, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
      std::vector<T> dxhat(n), dgain(n, T(0)), dbias(n, T(0));
      for (std::size_t r = 0; r < m; ++r) {
        const T* dy = o->grad.data() + r * n;
        const T* h = xhat.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) {
          dgain[c] += dy[c] * h[c];
          dbias[c] += dy[c];
        }
        if (!x->requires_grad) continue;
        T mean_d = 0, mean_dh = 0;
        for (std::size_t c = 0; c < n; ++c) {
          dxhat[c] = dy[c] * gain->data[c];
          mean_d += dxhat[c];
          mean_dh += dxhat[c] * h[c];
        }
        mean_d /= static_cast<T>(n);
        mean_dh /= static_cast<T>(n);
        T* dx = x->grad.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) dx[c] += rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
      }
      if (gain->requires_grad) detail::accumulate(gain->grad, dgain);
      if (bias->requires_grad) detail::accumulate(bias->grad, dbias);
    });
  }
  return out;
}

/// Selects rows of an embedding table: out[i] = table[ids[i]].
template <typename T>
Var<T> embedding_gather(Tape<T>& tape, const Var<T>& table, std::span<const int> ids) {
  detail::require_matrix(*table, "embedding_gather");
  if (ids.empty()) throw DimensionError("embedding_gather: empty id list");
  const std::size_t v = table->rows(), d = table->cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw InvalidInput("embedding_gather: id " + std::to_string(id) + " outside table of " +
                         std::to_string(v) + " rows");
    }
  }
  const bool tracked = detail::tracks(tape, {&table});
  auto out = detail::new_output<T>({ids.size(), d}, tracked);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->data.data() + static_cast<std::size_t>(ids[i]) * d, d,
                out->data.data() + i * d);
  if (tracked) {
    Tensor<T>* o = out.get();
    std::vector<int> idv(ids.begin(), ids.end());
    tape.record(out, [table, o, d, idv = std::move(idv)] {
      std::vector<T> g(table->size(), T(0));
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = g.data() + static_cast<std::size_t>(idv[i]) * d;
        const T* src = o->grad.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      detail::accumulate(table->grad, g);
    });
  }
  return out;
}

/// Picks rows by index (indices may repeat).
template <typename T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& x, std::span<const std::size_t> rows) {
  detail::require_matrix(*x, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  const std::size_t n = x->cols();
  for (auto r : rows) {
    if (r >= x->rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " outside " +
                           shape_string(x->shape));
    }
  }
  const bool tracked = detail::tracks(tape, {&x});
  auto out = detail::new_output<T>({rows.size(), n}, tracked);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x->data.data() + rows[i] * n, n, out->data.data() + i * n);
  if (tracked) {
    Tensor<T>* o = out.get();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    tape.record(out, [x, o, n, rv = std::move(rv)] {
      std::vector<T> g(x->size(), T(0));
      for (std::size_t i = 0; i < rv.size(); ++i) {
        T* dst = g.data() + rv[i] * n;
        const T* src = o->grad.data() + i * n;
        for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
      }
      detail::accumulate(x->grad, g);
    });
  }
  return out;
}

template <typename T>
Var<T> slice_rows(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(*x, "slice_rows");
  if (begin >= end || end > x->rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_string(x->shape));
  }
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return gather_rows(tape, x, std::span<const std::size_t>(rows));
}

/// Stacks matrices with equal column counts vertically.
template <typename T>
Var<T> concat_rows(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front()->cols();
  std::size_t m = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    detail::require_matrix(*p, "concat_rows");
    if (p->cols() != n) {
      throw DimensionError("concat_rows: column mismatch between " +
                           shape_string(parts.front()->shape) + " and " + shape_string(p->shape));
    }
    m += p->rows();
    tracked = tracked || (tape.enabled() && p->requires_grad);
  }
  auto out = detail::new_output<T>({m, n}, tracked);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->size();
  }
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [parts, o] {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad)
          for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += o->grad[off + i];
        off += p->size();
      }
    });
  }
  return out;
}

/// Multi-head causal self-attention over `batch` sequences of `seq_len` rows
/// each, stacked as [batch*seq_len x d]. Row i of a sequence attends to rows
/// 0..i of the same sequence.
template <typename T>
Var<T> causal_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::size_t batch, std::size_t seq_len, std::size_t heads) {
  detail::require_matrix(*q, "causal_attention");
  if (q->shape != k->shape || q->shape != v->shape) {
    throw DimensionError("causal_attention: q/k/v shapes differ: " + shape_string(q->shape) +
                         ", " + shape_string(k->shape) + ", " + shape_string(v->shape));
  }
  const std::size_t d = q->cols();
  if (q->rows() != batch * seq_len || heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: " + shape_string(q->shape) + " incompatible with batch " +
                         std::to_string(batch) + ", length " + std::to_string(seq_len) +
                         ", heads " + std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const bool tracked = detail::tracks(tape, {&q, &k, &v});
  auto out = detail::new_output<T>(q->shape, tracked);
  // probs[b][h][i][j] for j <= i, stored densely as L x L per (b, h).
  std::vector<T> probs(tracked ? batch * heads * seq_len * seq_len : seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * seq_len * d;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        T* pr = tracked ? probs.data() + ((b * heads + h) * seq_len + i) * seq_len : probs.data();
        kernels::attend_row(q->data.data() + base + i * d + h * dh, k->data.data() + base + h * dh,
                            v->data.data() + base + h * dh, d, i + 1, dh, sc,
                            out->data.data() + base + i * d + h * dh, pr);
      }
    }
  }
  if (tracked) {
    Tensor<T>* o = out.get();
    tape.record(out, [q, k, v, o, batch, seq_len, heads, d, dh, sc, probs = std::move(probs)] {
      std::vector<T> dp(seq_len);
      std::vector<T> dq_row(dh);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq_len * d;
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < seq_len; ++i) {
            const T* pr = probs.data() + ((b * heads + h) * seq_len + i) * seq_len;
            const T* go = o->grad.data() + base + i * d + h * dh;
            T dot = 0;
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vr = v->data.data() + base + j * d + h * dh;
              T s = 0;
              for (std::size_t t = 0; t < dh; ++t) s += go[t] * vr[t];
              dp[j] = s;
              dot += pr[j] * s;
              if (v->requires_grad) {
                T* gv = v->grad.data() + base + j * d + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gv[t] += pr[j] * go[t];
              }
            }
            const T* qr = q->data.data() + base + i * d + h * dh;
            std::fill(dq_row.begin(), dq_row.end(), T(0));
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = pr[j] * (dp[j] - dot) * sc;
              const T* kr = k->data.data() + base + j * d + h * dh;
              for (std::size_t t = 0; t < dh; ++t) dq_row[t] += ds * kr[t];
              if (k->requires_grad) {
                T* gk = k->grad.data() + base + j * d + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gk[t] += ds * qr[t];
              }
            }
            if (q->requires_grad) {
              T* gq = q->grad.data() + base + i * d + h * dh;
              for (std::size_t t = 0; t < dh; ++t) gq[t] += dq_row[t];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood over rows whose mask is set. Rows with a false
/// mask contribute neither to the value nor to the gradient.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> targets,
                             std::span<const bool> mask) {
  detail::require_matrix(*logits, "softmax_cross_entropy");
  const std::size_t rows = logits->rows(), vocab = logits->cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_string(logits->shape) +
                         " vs " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InvalidInput("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                         " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) throw InvalidInput("softmax_cross_entropy: every position is masked out");
  const bool tracked = detail::tracks(tape, {&logits});
  auto out = detail::new_output<T>({1}, tracked);
  std::vector<T> lse(rows, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = logits->data.data() + r * vocab;
    lse[r] = kernels::log_sum_exp(row, vocab);
    total += lse[r] - row[targets[r]];
  }
  out->data[0] = total / static_cast<T>(count);
  if (tracked) {
    Tensor<T>* o = out.get();
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<bool> mv(mask.begin(), mask.end());
    tape.record(out, [logits, o, rows, vocab, count, lse = std::move(lse), tv = std::move(tv),
                      mv = std::move(mv)] {
      const T g = o->grad[0] / static_cast<T>(count);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mv[r]) continue;
        const T* row = logits->data.data() + r * vocab;
        T* gr = logits->grad.data() + r * vocab;
        for (std::size_t c = 0; c < vocab; ++c) gr[c] += g * std::exp(row[c] - lse[r]);
        gr[tv[r]] -= g;
      }
    });
  }
  return out;
}

}  // namespace leaml
