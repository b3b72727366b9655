#pragma once

// Differentiable operations over Tensor. Each op validates shapes, computes
// values eagerly, and (in grad mode) records a backprop closure that pulls
// the output adjoint into its parents. All loops are single-threaded and
// fixed-order, so results are bit-identical across runs.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "facet/tensor.hpp"

namespace facet {

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                          std::function<void(Tensor::Node&)> backprop) {
  Tensor out(std::move(shape), std::move(values));
  if (grad_mode_flag()) {
    bool any = false;
    for (const Tensor& p : parents)
      if (p.requires_grad()) {
        any = true;
        break;
      }
    if (any) {
      Tensor::Node* n = out.node().get();
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (const Tensor& p : parents) n->parents.push_back(p.node());
      n->backprop = std::move(backprop);
    }
  }
  return out;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Adds g into the i-th parent's buffer if that parent is trainable.
inline std::vector<double>* parent_grad(Tensor::Node& n, std::size_t i) {
  Tensor::Node* p = n.parents[i].get();
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [](Tensor::Node& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::parent_grad(n, k))
        for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] -= n.adjoint[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return detail::make_result(a.shape(), std::move(v), {a, b}, [](Tensor::Node& n) {
    const auto& av = n.parents[0]->values;
    const auto& bv = n.parents[1]->values;
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i] * bv[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  return detail::make_result(a.shape(), std::move(v), {a}, [c](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i] * c;
  });
}

// a: M x K, b: K x N
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> v(M * N, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = A[i * K + k];
      const double* Bk = B + k * N;
      double* Vi = v.data() + i * N;
      for (std::size_t j = 0; j < N; ++j) Vi[j] += aik * Bk[j];
    }
  return detail::make_result({M, N}, std::move(v), {a, b}, [M, K, N](Tensor::Node& n) {
    const double* G = n.adjoint.data();
    const double* A = n.parents[0]->values.data();
    const double* B = n.parents[1]->values.data();
    if (auto* ga = detail::parent_grad(n, 0)) {  // dA = G * B^T
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double s = 0.0;
          const double* Gi = G + i * N;
          const double* Bk = B + k * N;
          for (std::size_t j = 0; j < N; ++j) s += Gi[j] * Bk[j];
          (*ga)[i * K + k] += s;
        }
    }
    if (auto* gb = detail::parent_grad(n, 1)) {  // dB = A^T * G
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = A[i * K + k];
          const double* Gi = G + i * N;
          double* gbk = gb->data() + k * N;
          for (std::size_t j = 0; j < N; ++j) gbk[j] += aik * Gi[j];
        }
    }
  });
}

// v: K, m: K x N -> N
inline Tensor vecmat(const Tensor& x, const Tensor& m) {
  detail::require(x.ndim() == 1 && m.ndim() == 2 && x.dim(0) == m.dim(0),
                  "vecmat: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(m.shape()));
  const std::size_t K = x.dim(0), N = m.dim(1);
  std::vector<double> v(N, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double xk = x.values()[k];
    for (std::size_t j = 0; j < N; ++j) v[j] += xk * m.values()[k * N + j];
  }
  return detail::make_result({N}, std::move(v), {x, m}, [K, N](Tensor::Node& n) {
    const auto& xv = n.parents[0]->values;
    const auto& mv = n.parents[1]->values;
    if (auto* gx = detail::parent_grad(n, 0))
      for (std::size_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += n.adjoint[j] * mv[k * N + j];
        (*gx)[k] += s;
      }
    if (auto* gm = detail::parent_grad(n, 1))
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < N; ++j) (*gm)[k * N + j] += xv[k] * n.adjoint[j];
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require(a.ndim() == 2, "transpose: expects a matrix");
  const std::size_t M = a.dim(0), N = a.dim(1);
  std::vector<double> v(M * N);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) v[j * M + i] = a.values()[i * N + j];
  return detail::make_result({N, M}, std::move(v), {a}, [M, N](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) (*g)[i * N + j] += n.adjoint[j * M + i];
  });
}

inline Tensor row(const Tensor& a, std::size_t r) {
  detail::require(a.ndim() == 2 && r < a.dim(0), "row: index out of range");
  const std::size_t N = a.dim(1);
  std::vector<double> v(a.values().begin() + r * N, a.values().begin() + (r + 1) * N);
  return detail::make_result({N}, std::move(v), {a}, [r, N](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t j = 0; j < N; ++j) (*g)[r * N + j] += n.adjoint[j];
  });
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  detail::require(!rows.empty(), "stack_rows: empty input");
  const std::size_t N = rows[0].numel();
  for (const Tensor& t : rows)
    detail::require(t.ndim() == 1 && t.numel() == N, "stack_rows: rows must be equal-length vectors");
  std::vector<double> v;
  v.reserve(rows.size() * N);
  for (const Tensor& t : rows) v.insert(v.end(), t.values().begin(), t.values().end());
  return detail::make_result({rows.size(), N}, std::move(v), rows, [N](Tensor::Node& n) {
    for (std::size_t r = 0; r < n.parents.size(); ++r)
      if (auto* g = detail::parent_grad(n, r))
        for (std::size_t j = 0; j < N; ++j) (*g)[j] += n.adjoint[r * N + j];
  });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                  "concat_rows: column mismatch");
  const std::size_t N = a.dim(1), Ma = a.dim(0), Mb = b.dim(0);
  std::vector<double> v;
  v.reserve((Ma + Mb) * N);
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return detail::make_result({Ma + Mb, N}, std::move(v), {a, b}, [Ma, N](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < Ma * N; ++i) (*g)[i] += n.adjoint[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < n.parents[1]->values.size(); ++i) (*g)[i] += n.adjoint[Ma * N + i];
  });
}

inline Tensor col_slice(const Tensor& a, std::size_t c0, std::size_t c1) {
  detail::require(a.ndim() == 2 && c0 < c1 && c1 <= a.dim(1), "col_slice: bad column range");
  const std::size_t M = a.dim(0), N = a.dim(1), W = c1 - c0;
  std::vector<double> v(M * W);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < W; ++j) v[i * W + j] = a.values()[i * N + c0 + j];
  return detail::make_result({M, W}, std::move(v), {a}, [M, N, W, c0](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < W; ++j) (*g)[i * N + c0 + j] += n.adjoint[i * W + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  const std::size_t M = parts[0].dim(0);
  std::size_t N = 0;
  for (const Tensor& t : parts) {
    detail::require(t.ndim() == 2 && t.dim(0) == M, "concat_cols: row mismatch");
    N += t.dim(1);
  }
  std::vector<double> v(M * N);
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const std::size_t W = t.dim(1);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < W; ++j) v[i * N + off + j] = t.values()[i * W + j];
    off += W;
  }
  return detail::make_result({M, N}, std::move(v), parts, [M, N](Tensor::Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      const std::size_t W = n.parents[k]->shape[1];
      if (auto* g = detail::parent_grad(n, k))
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < W; ++j) (*g)[i * W + j] += n.adjoint[i * N + off + j];
      off += W;
    }
  });
}

// Row-wise softmax; accepts a vector (one row) or a matrix.
inline Tensor softmax(const Tensor& a) {
  detail::require(a.ndim() == 1 || a.ndim() == 2, "softmax: expects vector or matrix");
  const std::size_t N = a.ndim() == 1 ? a.dim(0) : a.dim(1);
  const std::size_t M = a.numel() / N;
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < M; ++i) {
    const double* x = a.values().data() + i * N;
    double* y = v.data() + i * N;
    double mx = x[0];
    for (std::size_t j = 1; j < N; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < N; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < N; ++j) y[j] /= s;
  }
  return detail::make_result(a.shape(), std::move(v), {a}, [M, N](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < M; ++i) {
        const double* y = n.values.data() + i * N;
        const double* dy = n.adjoint.data() + i * N;
        double dot = 0.0;
        for (std::size_t j = 0; j < N; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < N; ++j) (*g)[i * N + j] += (dy[j] - dot) * y[j];
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes the last axis to mean 0 / variance 1 (variance epsilon 1e-5),
// then applies the per-feature affine (gain, bias). Accepts {D} or {M, D}.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  detail::require(x.ndim() == 1 || x.ndim() == 2, "layer_norm: expects vector or matrix");
  const std::size_t D = x.ndim() == 1 ? x.dim(0) : x.dim(1);
  detail::require(gain.ndim() == 1 && gain.dim(0) == D && bias.ndim() == 1 && bias.dim(0) == D,
                  "layer_norm: gain/bias width mismatch");
  const std::size_t M = x.numel() / D;
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < M; ++i) {
    const double* xr = x.values().data() + i * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(D);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < D; ++j)
      v[i * D + j] = (xr[j] - mu) * inv * gain.values()[j] + bias.values()[j];
  }
  return detail::make_result(x.shape(), std::move(v), {x, gain, bias}, [M, D](Tensor::Node& n) {
    const auto& xv = n.parents[0]->values;
    const auto& gv = n.parents[1]->values;
    auto* gx = detail::parent_grad(n, 0);
    auto* gg = detail::parent_grad(n, 1);
    auto* gb = detail::parent_grad(n, 2);
    std::vector<double> xhat(D), dxhat(D);
    for (std::size_t i = 0; i < M; ++i) {
      const double* xr = xv.data() + i * D;
      const double* dy = n.adjoint.data() + i * D;
      double mu = 0.0;
      for (std::size_t j = 0; j < D; ++j) mu += xr[j];
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<double>(D);
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < D; ++j) xhat[j] = (xr[j] - mu) * inv;
      if (gg)
        for (std::size_t j = 0; j < D; ++j) (*gg)[j] += dy[j] * xhat[j];
      if (gb)
        for (std::size_t j = 0; j < D; ++j) (*gb)[j] += dy[j];
      if (gx) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
          dxhat[j] = dy[j] * gv[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xhat[j];
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        for (std::size_t j = 0; j < D; ++j) (*gx)[i * D + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
      }
    }
  });
}

inline Tensor gelu(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double u = x.values()[i];
    v[i] = 0.5 * u * (1.0 + std::erf(u * 0.7071067811865475244));
  }
  return detail::make_result(x.shape(), std::move(v), {x}, [](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) {
      const auto& xv = n.parents[0]->values;
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) {
        const double u = xv[i];
        const double d = 0.5 * (1.0 + std::erf(u * 0.7071067811865475244)) +
                         u * 0.3989422804014326779 * std::exp(-0.5 * u * u);
        (*g)[i] += n.adjoint[i] * d;
      }
    }
  });
}

// Elementwise max(0, x); derivative at the kink taken as 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  return detail::make_result(x.shape(), std::move(v), {x}, [](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) {
      const auto& xv = n.parents[0]->values;
      for (std::size_t i = 0; i < n.adjoint.size(); ++i)
        if (xv[i] > 0.0) (*g)[i] += n.adjoint[i];
    }
  });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(hi, std::max(lo, x.values()[i]));
  return detail::make_result(x.shape(), std::move(v), {x}, [lo, hi](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) {
      const auto& xv = n.parents[0]->values;
      for (std::size_t i = 0; i < n.adjoint.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) (*g)[i] += n.adjoint[i];
    }
  });
}

// Natural log; caller guarantees positivity (clamp first).
inline Tensor log_t(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    detail::require(x.values()[i] > 0.0, "log: non-positive input");
    v[i] = std::log(x.values()[i]);
  }
  return detail::make_result(x.shape(), std::move(v), {x}, [](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) {
      const auto& xv = n.parents[0]->values;
      for (std::size_t i = 0; i < n.adjoint.size(); ++i) (*g)[i] += n.adjoint[i] / xv[i];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({}, {s}, {x}, [](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.adjoint[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor sum_scalars(const std::vector<Tensor>& xs) {
  detail::require(!xs.empty(), "sum_scalars: empty input");
  double s = 0.0;
  for (const Tensor& t : xs) s += t.scalar_value();
  return detail::make_result({}, {s}, xs, [](Tensor::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k)
      if (auto* g = detail::parent_grad(n, k)) (*g)[0] += n.adjoint[0];
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.values()[i] * b.values()[i];
  return detail::make_result({}, {s}, {a, b}, [](Tensor::Node& n) {
    const auto& av = n.parents[0]->values;
    const auto& bv = n.parents[1]->values;
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.adjoint[0] * bv[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.adjoint[0] * av[i];
  });
}

inline Tensor pick(const Tensor& x, std::size_t i) {
  detail::require(i < x.numel(), "pick: index out of range");
  return detail::make_result({}, {x.values()[i]}, {x}, [i](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) (*g)[i] += n.adjoint[0];
  });
}

inline constexpr double kL2NormFloor = 1e-12;

// v / ||v||2, rejecting near-zero inputs.
inline Tensor l2_normalize(const Tensor& v) {
  detail::require(v.ndim() == 1, "l2_normalize: expects a vector");
  double nrm = 0.0;
  for (double x : v.values()) nrm += x * x;
  nrm = std::sqrt(nrm);
  if (nrm <= kL2NormFloor) throw std::domain_error("l2_normalize: degenerate near-zero vector");
  std::vector<double> out(v.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.values()[i] / nrm;
  return detail::make_result(v.shape(), std::move(out), {v}, [nrm](Tensor::Node& n) {
    if (auto* g = detail::parent_grad(n, 0)) {
      double d = 0.0;
      for (std::size_t i = 0; i < n.values.size(); ++i) d += n.values[i] * n.adjoint[i];
      for (std::size_t i = 0; i < n.values.size(); ++i) (*g)[i] += (n.adjoint[i] - n.values[i] * d) / nrm;
    }
  });
}

// Plain (non-squared) Euclidean distance between two vectors. At coincident
// points the gradient is taken as 0.
inline Tensor euclidean_distance(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "euclidean_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  const double dist = std::sqrt(s);
  return detail::make_result({}, {dist}, {a, b}, [dist](Tensor::Node& n) {
    if (dist < 1e-30) return;
    const auto& av = n.parents[0]->values;
    const auto& bv = n.parents[1]->values;
    const double w = n.adjoint[0] / dist;
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += w * (av[i] - bv[i]);
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= w * (av[i] - bv[i]);
  });
}

// Multi-head scaled dot-product attention over row-token matrices.
// Q, K, V: L x d with d divisible by `heads`; per head the weights are
// Softmax(Q_h K_h^T / sqrt(d/heads)) and outputs are concatenated. When
// `mean_weights` is non-null it receives the head-averaged L x L weight
// matrix (plain values, no graph).
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads, std::vector<double>* mean_weights = nullptr) {
  detail::require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention: expects matrices");
  detail::require_same_shape(q, k, "attention(q,k)");
  detail::require_same_shape(q, v, "attention(q,v)");
  const std::size_t L = q.dim(0), d = q.dim(1);
  detail::require(L >= 1, "attention: needs at least one token");
  detail::require(heads >= 1 && d % heads == 0,
                  "attention: head count " + std::to_string(heads) + " must divide width " + std::to_string(d));
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (mean_weights) mean_weights->assign(L * L, 0.0);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : col_slice(q, h * dh, (h + 1) * dh);
    Tensor kh = heads == 1 ? k : col_slice(k, h * dh, (h + 1) * dh);
    Tensor vh = heads == 1 ? v : col_slice(v, h * dh, (h + 1) * dh);
    Tensor w = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    if (mean_weights)
      for (std::size_t i = 0; i < L * L; ++i) (*mean_weights)[i] += w.values()[i] / static_cast<double>(heads);
    outs.push_back(matmul(w, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

}  // namespace facet
