// Copyright 2026 The pmam-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PMAM_AUTODIFF_HPP
#define PMAM_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/errors.hpp"

// Reverse-mode differentiation over dense f64 arrays. Nodes are created
// eagerly (values computed at construction) and reference their inputs, so a
// graph is a DAG of shared_ptrs rooted at the loss. backward() traverses it
// in reverse topological order, accumulating gradients; graphs are released
// when the loss pointer goes out of scope. Parameters are leaf nodes that
// outlive graphs.

namespace pmam::ad {

struct Node;
using Ptr = std::shared_ptr<Node>;

struct BackwardCtx;

struct Node {
  Array value;
  Array grad;  // allocated on first contribution; same shape as value
  bool requires_grad = false;
  bool is_param = false;
  std::vector<Ptr> parents;
  std::function<void(Node&, BackwardCtx&)> backprop;

  Array& ensure_grad() {
    if (grad.empty()) grad = Array(value.shape());
    return grad;
  }

  void zero_grad() {
    if (!grad.empty()) grad.fill(0.0);
  }
};

// Redirects leaf-parameter gradients into a per-call sink when set. Batch
// items can then run backward concurrently, each into its own sink, and the
// sinks are reduced in a fixed order afterwards.
struct BackwardCtx {
  std::unordered_map<const Node*, Array>* sink = nullptr;

  Array& grad_of(Node& n) {
    if (sink != nullptr && n.is_param) {
      Array& g = (*sink)[&n];
      if (g.empty()) g = Array(n.value.shape());
      return g;
    }
    return n.ensure_grad();
  }
};

namespace detail {

inline bool& no_grad_flag() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

// While alive, newly created nodes do not record parents or closures; forward
// values are identical but backward is impossible (used for embedding
// extraction and evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::no_grad_flag()) { detail::no_grad_flag() = true; }
  ~NoGradGuard() { detail::no_grad_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline Ptr constant(Array v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Ptr param(Array v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->is_param = true;
  return n;
}

inline Ptr make_node(Array value, std::vector<Ptr> parents,
                     std::function<void(Node&, BackwardCtx&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!detail::no_grad_flag()) {
    for (const auto& p : parents)
      if (p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    if (n->requires_grad) {
      n->parents = std::move(parents);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// Raw kernels (fixed loop order; deterministic).

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x d] * B[n x d]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t d,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * d;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * d;
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// In-place softmax of each row of x[m x n] with temperature tau.
inline void softmax_rows_inplace(double* x, std::size_t m, std::size_t n, double tau) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = x + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp((row[j] - mx) / tau);
      sum += row[j];
    }
    double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
}

inline void require_matrix(const Array& a, const char* op) {
  if (a.ndim() != 2) throw DimensionError(std::string(op) + ": expected 2-D, got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops.

inline Ptr add(const Ptr& a, const Ptr& b) {
  require_same_shape(a->value, b->value, "add");
  Array out = a->value.clone();
  out.add_scaled(b->value, 1.0);
  return make_node(std::move(out), {a, b}, [](Node& n, BackwardCtx& ctx) {
    ctx.grad_of(*n.parents[0]).add_scaled(n.grad, 1.0);
    ctx.grad_of(*n.parents[1]).add_scaled(n.grad, 1.0);
  });
}

inline Ptr sub(const Ptr& a, const Ptr& b) {
  require_same_shape(a->value, b->value, "sub");
  Array out = a->value.clone();
  out.add_scaled(b->value, -1.0);
  return make_node(std::move(out), {a, b}, [](Node& n, BackwardCtx& ctx) {
    ctx.grad_of(*n.parents[0]).add_scaled(n.grad, 1.0);
    ctx.grad_of(*n.parents[1]).add_scaled(n.grad, -1.0);
  });
}

inline Ptr mul(const Ptr& a, const Ptr& b) {
  require_same_shape(a->value, b->value, "mul");
  Array out(a->value.shape());
  double* o = out.data();
  const double* pa = a->value.cdata();
  const double* pb = b->value.cdata();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = pa[i] * pb[i];
  return make_node(std::move(out), {a, b}, [](Node& n, BackwardCtx& ctx) {
    const double* g = n.grad.cdata();
    const double* va = n.parents[0]->value.cdata();
    const double* vb = n.parents[1]->value.cdata();
    double* da = ctx.grad_of(*n.parents[0]).data();
    double* db = ctx.grad_of(*n.parents[1]).data();
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      da[i] += g[i] * vb[i];
      db[i] += g[i] * va[i];
    }
  });
}

inline Ptr scale(const Ptr& a, double s) {
  Array out = a->value.clone();
  double* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] *= s;
  return make_node(std::move(out), {a}, [s](Node& n, BackwardCtx& ctx) {
    ctx.grad_of(*n.parents[0]).add_scaled(n.grad, s);
  });
}

inline Ptr add_scalar(const Ptr& a, double c) {
  Array out = a->value.clone();
  double* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] += c;
  return make_node(std::move(out), {a}, [](Node& n, BackwardCtx& ctx) {
    ctx.grad_of(*n.parents[0]).add_scaled(n.grad, 1.0);
  });
}

// x[m x n] + row vector b[n] broadcast over rows.
inline Ptr add_rowvec(const Ptr& x, const Ptr& b) {
  detail::require_matrix(x->value, "add_rowvec");
  std::size_t m = x->value.dim(0), n = x->value.dim(1);
  if (b->value.size() != n)
    throw DimensionError("add_rowvec: vector length " + std::to_string(b->value.size()) +
                         " vs row width " + std::to_string(n));
  Array out = x->value.clone();
  double* o = out.data();
  const double* pb = b->value.cdata();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += pb[j];
  return make_node(std::move(out), {x, b}, [m, n](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    ctx.grad_of(*nd.parents[0]).add_scaled(nd.grad, 1.0);
    double* db = ctx.grad_of(*nd.parents[1]).data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
  });
}

inline Ptr matmul(const Ptr& a, const Ptr& b) {
  detail::require_matrix(a->value, "matmul");
  detail::require_matrix(b->value, "matmul");
  std::size_t m = a->value.dim(0), k = a->value.dim(1);
  std::size_t k2 = b->value.dim(0), n = b->value.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a->value.shape()) +
                         " vs " + shape_str(b->value.shape()));
  Array out({m, n});
  detail::gemm_acc(a->value.cdata(), b->value.cdata(), out.data(), m, k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& nd, BackwardCtx& ctx) {
    const Array& av = nd.parents[0]->value;
    const Array& bv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad)
      detail::gemm_nt_acc(nd.grad.cdata(), bv.cdata(), ctx.grad_of(*nd.parents[0]).data(), m, n, k);
    if (nd.parents[1]->requires_grad)
      detail::gemm_tn_acc(av.cdata(), nd.grad.cdata(), ctx.grad_of(*nd.parents[1]).data(), m, k, n);
  });
}

// a[m x d] * b[n x d]^T -> [m x n]
inline Ptr matmul_nt(const Ptr& a, const Ptr& b) {
  detail::require_matrix(a->value, "matmul_nt");
  detail::require_matrix(b->value, "matmul_nt");
  std::size_t m = a->value.dim(0), d = a->value.dim(1);
  std::size_t n = b->value.dim(0);
  if (b->value.dim(1) != d)
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_str(a->value.shape()) +
                         " vs " + shape_str(b->value.shape()));
  Array out({m, n});
  detail::gemm_nt_acc(a->value.cdata(), b->value.cdata(), out.data(), m, d, n);
  return make_node(std::move(out), {a, b}, [m, d, n](Node& nd, BackwardCtx& ctx) {
    const Array& av = nd.parents[0]->value;
    const Array& bv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad)
      detail::gemm_acc(nd.grad.cdata(), bv.cdata(), ctx.grad_of(*nd.parents[0]).data(), m, n, d);
    if (nd.parents[1]->requires_grad)
      detail::gemm_tn_acc(nd.grad.cdata(), av.cdata(), ctx.grad_of(*nd.parents[1]).data(), m, n, d);
  });
}

inline Ptr sigmoid(const Ptr& x) {
  Array out(x->value.shape());
  double* o = out.data();
  const double* v = x->value.cdata();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // split by sign for stability at large |x|
    if (v[i] >= 0.0) {
      o[i] = 1.0 / (1.0 + std::exp(-v[i]));
    } else {
      double e = std::exp(v[i]);
      o[i] = e / (1.0 + e);
    }
  }
  return make_node(std::move(out), {x}, [](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* y = nd.value.cdata();
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t i = 0; i < nd.value.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Ptr leaky_relu(const Ptr& x, double slope) {
  if (slope < 0.0) throw ParameterError("leaky_relu: slope must be >= 0");
  Array out(x->value.shape());
  double* o = out.data();
  const double* v = x->value.cdata();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = v[i] >= 0.0 ? v[i] : slope * v[i];
  return make_node(std::move(out), {x}, [slope](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* v = nd.parents[0]->value.cdata();
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t i = 0; i < nd.value.size(); ++i) dx[i] += g[i] * (v[i] >= 0.0 ? 1.0 : slope);
  });
}

// Row-wise softmax with temperature; 1-D input is treated as a single row.
inline Ptr softmax(const Ptr& x, double temperature) {
  if (temperature <= 0.0) throw ParameterError("softmax: temperature must be positive");
  std::size_t m = x->value.ndim() == 2 ? x->value.dim(0) : 1;
  std::size_t n = x->value.ndim() == 2 ? x->value.dim(1) : x->value.size();
  Array out = x->value.clone();
  detail::softmax_rows_inplace(out.data(), m, n, temperature);
  return make_node(std::move(out), {x}, [m, n, temperature](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* p = nd.value.cdata();
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* gr = g + i * n;
      const double* pr = p + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
      double* dr = dx + i * n;
      for (std::size_t j = 0; j < n; ++j) dr[j] += pr[j] * (gr[j] - dot) / temperature;
    }
  });
}

// Row-wise layer normalization: rows of x normalized to zero mean / unit
// variance (epsilon 1e-5), then scaled by gain and shifted by bias.
inline Ptr layer_norm(const Ptr& x, const Ptr& gain, const Ptr& bias) {
  constexpr double kEps = 1e-5;
  std::size_t m = x->value.ndim() == 2 ? x->value.dim(0) : 1;
  std::size_t n = x->value.ndim() == 2 ? x->value.dim(1) : x->value.size();
  if (gain->value.size() != n || bias->value.size() != n)
    throw DimensionError("layer_norm: gain/bias length must match row width");
  Array out(x->value.shape());
  Array xhat({m, n});  // saved for backward
  Array inv_std({m});
  {
    const double* v = x->value.cdata();
    const double* g = gain->value.cdata();
    const double* b = bias->value.cdata();
    double* o = out.data();
    double* xh = xhat.data();
    double* is = inv_std.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = v + i * n;
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += row[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<double>(n);
      double inv = 1.0 / std::sqrt(var + kEps);
      is[i] = inv;
      for (std::size_t j = 0; j < n; ++j) {
        double xn = (row[j] - mean) * inv;
        xh[i * n + j] = xn;
        o[i * n + j] = xn * g[j] + b[j];
      }
    }
  }
  return make_node(std::move(out), {x, gain, bias},
                   [m, n, xhat, inv_std](Node& nd, BackwardCtx& ctx) {
                     const double* g = nd.grad.cdata();
                     const double* xh = xhat.cdata();
                     const double* is = inv_std.cdata();
                     const double* gv = nd.parents[1]->value.cdata();
                     double* dx = ctx.grad_of(*nd.parents[0]).data();
                     double* dg = ctx.grad_of(*nd.parents[1]).data();
                     double* db = ctx.grad_of(*nd.parents[2]).data();
                     for (std::size_t i = 0; i < m; ++i) {
                       const double* gr = g + i * n;
                       const double* xr = xh + i * n;
                       double mean_h = 0.0, mean_hx = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         double h = gr[j] * gv[j];
                         mean_h += h;
                         mean_hx += h * xr[j];
                         dg[j] += gr[j] * xr[j];
                         db[j] += gr[j];
                       }
                       mean_h /= static_cast<double>(n);
                       mean_hx /= static_cast<double>(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         double h = gr[j] * gv[j];
                         dx[i * n + j] += (h - mean_h - xr[j] * mean_hx) * is[i];
                       }
                     }
                   });
}

// Cosine similarity of two equal-length vectors; epsilon 1e-12 guards zero
// norms. Returns a scalar node (shape [1]).
inline Ptr cosine_similarity(const Ptr& u, const Ptr& v) {
  constexpr double kEps = 1e-12;
  if (u->value.size() != v->value.size() || u->value.size() == 0)
    throw DimensionError("cosine_similarity: vectors must have identical nonzero length");
  std::size_t d = u->value.size();
  const double* pu = u->value.cdata();
  const double* pv = v->value.cdata();
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += pu[i] * pv[i];
    nu += pu[i] * pu[i];
    nv += pv[i] * pv[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  double denom = nu * nv + kEps;
  double c = dot / denom;
  return make_node(Array::scalar(c), {u, v}, [d, dot, nu, nv, denom](Node& nd, BackwardCtx& ctx) {
    double g = nd.grad.cat(0);
    const double* pu = nd.parents[0]->value.cdata();
    const double* pv = nd.parents[1]->value.cdata();
    double* du = ctx.grad_of(*nd.parents[0]).data();
    double* dv = ctx.grad_of(*nd.parents[1]).data();
    double cu = nu > 0.0 ? dot * nv / (nu * denom * denom) : 0.0;
    double cv = nv > 0.0 ? dot * nu / (nv * denom * denom) : 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      du[i] += g * (pv[i] / denom - cu * pu[i]);
      dv[i] += g * (pu[i] / denom - cv * pv[i]);
    }
  });
}

// Pairwise cosine similarities between rows of a[m x d] and rows of b[k x d].
inline Ptr cosine_rows(const Ptr& a, const Ptr& b) {
  constexpr double kEps = 1e-12;
  detail::require_matrix(a->value, "cosine_rows");
  detail::require_matrix(b->value, "cosine_rows");
  std::size_t m = a->value.dim(0), d = a->value.dim(1), k = b->value.dim(0);
  if (b->value.dim(1) != d) throw DimensionError("cosine_rows: row widths disagree");
  Array out({m, k});
  Array na({m}), nb({k});
  {
    const double* pa = a->value.cdata();
    const double* pb = b->value.cdata();
    double* pna = na.data();
    double* pnb = nb.data();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += pa[i * d + c] * pa[i * d + c];
      pna[i] = std::sqrt(s);
    }
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += pb[j * d + c] * pb[j * d + c];
      pnb[j] = std::sqrt(s);
    }
    double* o = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += pa[i * d + c] * pb[j * d + c];
        o[i * k + j] = dot / (pna[i] * pnb[j] + kEps);
      }
  }
  return make_node(std::move(out), {a, b}, [m, d, k, na, nb](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* cv = nd.value.cdata();
    const double* pa = nd.parents[0]->value.cdata();
    const double* pb = nd.parents[1]->value.cdata();
    const double* pna = na.cdata();
    const double* pnb = nb.cdata();
    bool need_a = nd.parents[0]->requires_grad;
    bool need_b = nd.parents[1]->requires_grad;
    double* da = need_a ? ctx.grad_of(*nd.parents[0]).data() : nullptr;
    double* db = need_b ? ctx.grad_of(*nd.parents[1]).data() : nullptr;
    // dc/da_i = b_j/denom - (c * nb / (na * denom)) * a_i, and symmetrically for b_j.
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double gij = g[i * k + j];
        if (gij == 0.0) continue;
        double denom = pna[i] * pnb[j] + kEps;
        double c = cv[i * k + j];
        if (need_a) {
          double coef = pna[i] > 0.0 ? c * pnb[j] / (pna[i] * denom) : 0.0;
          for (std::size_t cc = 0; cc < d; ++cc)
            da[i * d + cc] += gij * (pb[j * d + cc] / denom - coef * pa[i * d + cc]);
        }
        if (need_b) {
          double coef = pnb[j] > 0.0 ? c * pna[i] / (pnb[j] * denom) : 0.0;
          for (std::size_t cc = 0; cc < d; ++cc)
            db[j * d + cc] += gij * (pa[i * d + cc] / denom - coef * pb[j * d + cc]);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

inline Ptr reshape(const Ptr& x, Shape shape) {
  Array out = x->value.reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [](Node& nd, BackwardCtx& ctx) {
    Array& pg = ctx.grad_of(*nd.parents[0]);
    double* d = pg.data();
    const double* g = nd.grad.cdata();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) d[i] += g[i];
  });
}

inline Ptr gather_rows(const Ptr& x, std::vector<std::size_t> rows) {
  detail::require_matrix(x->value, "gather_rows");
  std::size_t t = x->value.dim(0), d = x->value.dim(1);
  for (std::size_t r : rows)
    if (r >= t) throw ContractError("gather_rows: index " + std::to_string(r) + " out of range");
  Array out({rows.size(), d});
  double* o = out.data();
  const double* v = x->value.cdata();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = v[rows[i] * d + j];
  return make_node(std::move(out), {x}, [rows = std::move(rows), d](Node& nd, BackwardCtx& ctx) {
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    const double* g = nd.grad.cdata();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dx[rows[i] * d + j] += g[i * d + j];
  });
}

inline Ptr concat_rows(const std::vector<Ptr>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  std::size_t d = parts[0]->value.ndim() == 2 ? parts[0]->value.dim(1) : parts[0]->value.size();
  std::size_t total = 0;
  for (const auto& p : parts) {
    std::size_t w = p->value.ndim() == 2 ? p->value.dim(1) : p->value.size();
    if (w != d) throw DimensionError("concat_rows: row widths disagree");
    total += p->value.ndim() == 2 ? p->value.dim(0) : 1;
  }
  Array out({total, d});
  double* o = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const double* v = p->value.cdata();
    std::size_t n = p->value.size();
    for (std::size_t i = 0; i < n; ++i) o[off + i] = v[i];
    off += n;
  }
  return make_node(std::move(out), parts, [](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    std::size_t off = 0;
    for (auto& p : nd.parents) {
      std::size_t n = p->value.size();
      if (p->requires_grad) {
        double* dp = ctx.grad_of(*p).data();
        for (std::size_t i = 0; i < n; ++i) dp[i] += g[off + i];
      }
      off += n;
    }
  });
}

// Rows listed in `rows` are replaced by the (broadcast) token vector.
inline Ptr replace_rows(const Ptr& x, std::vector<std::size_t> rows, const Ptr& token) {
  detail::require_matrix(x->value, "replace_rows");
  std::size_t t = x->value.dim(0), d = x->value.dim(1);
  if (token->value.size() != d) throw DimensionError("replace_rows: token length must match row width");
  for (std::size_t r : rows)
    if (r >= t) throw ContractError("replace_rows: index " + std::to_string(r) + " out of range");
  Array out = x->value.clone();
  double* o = out.data();
  const double* tok = token->value.cdata();
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = tok[j];
  return make_node(std::move(out), {x, token},
                   [rows = std::move(rows), t, d](Node& nd, BackwardCtx& ctx) {
                     const double* g = nd.grad.cdata();
                     std::vector<bool> masked(t, false);
                     for (std::size_t r : rows) masked[r] = true;
                     if (nd.parents[0]->requires_grad) {
                       double* dx = ctx.grad_of(*nd.parents[0]).data();
                       for (std::size_t i = 0; i < t; ++i)
                         if (!masked[i])
                           for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += g[i * d + j];
                     }
                     if (nd.parents[1]->requires_grad) {
                       double* dtok = ctx.grad_of(*nd.parents[1]).data();
                       for (std::size_t r : rows)
                         for (std::size_t j = 0; j < d; ++j) dtok[j] += g[r * d + j];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Reductions and losses.

inline Ptr sum_all(const Ptr& x) {
  const double* v = x->value.cdata();
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.size(); ++i) s += v[i];
  return make_node(Array::scalar(s), {x}, [](Node& nd, BackwardCtx& ctx) {
    double g = nd.grad.cat(0);
    Array& pg = ctx.grad_of(*nd.parents[0]);
    double* d = pg.data();
    for (std::size_t i = 0; i < pg.size(); ++i) d[i] += g;
  });
}

inline Ptr mean_all(const Ptr& x) {
  std::size_t n = x->value.size();
  const double* v = x->value.cdata();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return make_node(Array::scalar(s / static_cast<double>(n)), {x}, [n](Node& nd, BackwardCtx& ctx) {
    double g = nd.grad.cat(0) / static_cast<double>(n);
    Array& pg = ctx.grad_of(*nd.parents[0]);
    double* d = pg.data();
    for (std::size_t i = 0; i < pg.size(); ++i) d[i] += g;
  });
}

// Elementwise binary cross-entropy of probabilities p against fixed targets,
// with probabilities clamped to [1e-12, 1-1e-12] so that hard 0/1 targets
// never produce log(0).
inline Ptr binary_cross_entropy(const Ptr& p, const Array& targets) {
  constexpr double kClamp = 1e-12;
  require_same_shape(p->value, targets, "binary_cross_entropy");
  Array out(p->value.shape());
  double* o = out.data();
  const double* pv = p->value.cdata();
  const double* tv = targets.cdata();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double q = std::min(std::max(pv[i], kClamp), 1.0 - kClamp);
    o[i] = -tv[i] * std::log(q) - (1.0 - tv[i]) * std::log(1.0 - q);
  }
  return make_node(std::move(out), {p}, [targets](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* pv = nd.parents[0]->value.cdata();
    const double* tv = targets.cdata();
    double* dp = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t i = 0; i < nd.value.size(); ++i) {
      if (pv[i] <= kClamp || pv[i] >= 1.0 - kClamp) continue;  // clamped: zero gradient
      dp[i] += g[i] * (pv[i] - tv[i]) / (pv[i] * (1.0 - pv[i]));
    }
  });
}

// Column-wise maximum over rows of x[m x n] -> [n]; the subgradient flows to
// the first row attaining each maximum.
inline Ptr column_max(const Ptr& x) {
  detail::require_matrix(x->value, "column_max");
  std::size_t m = x->value.dim(0), n = x->value.dim(1);
  if (m == 0) throw DimensionError("column_max: empty input");
  Array out({n});
  std::vector<std::size_t> argmax(n, 0);
  {
    const double* v = x->value.cdata();
    double* o = out.data();
    for (std::size_t j = 0; j < n; ++j) o[j] = v[j];
    for (std::size_t i = 1; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (v[i * n + j] > o[j]) {
          o[j] = v[i * n + j];
          argmax[j] = i;
        }
  }
  return make_node(std::move(out), {x}, [n, argmax = std::move(argmax)](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t j = 0; j < n; ++j) dx[argmax[j] * n + j] += g[j];
  });
}

// Per-row cross-entropy -log softmax(row)[positive]; returns a [m] vector.
inline Ptr cross_entropy_rows(const Ptr& logits, std::vector<std::size_t> positives) {
  detail::require_matrix(logits->value, "cross_entropy_rows");
  std::size_t m = logits->value.dim(0), k = logits->value.dim(1);
  if (positives.size() != m) throw DimensionError("cross_entropy_rows: one positive per row required");
  for (std::size_t p : positives)
    if (p >= k) throw ContractError("cross_entropy_rows: positive index out of range");
  Array out({m});
  Array probs({m, k});  // saved softmax, reused in backward
  {
    const double* lv = logits->value.cdata();
    double* pr = probs.data();
    for (std::size_t i = 0; i < m * k; ++i) pr[i] = lv[i];
    detail::softmax_rows_inplace(pr, m, k, 1.0);
    double* o = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = lv + i * k;
      double mx = row[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double lse = 0.0;
      for (std::size_t j = 0; j < k; ++j) lse += std::exp(row[j] - mx);
      o[i] = mx + std::log(lse) - row[positives[i]];
    }
  }
  return make_node(std::move(out), {logits},
                   [m, k, probs, positives = std::move(positives)](Node& nd, BackwardCtx& ctx) {
                     const double* g = nd.grad.cdata();
                     const double* pr = probs.cdata();
                     double* dl = ctx.grad_of(*nd.parents[0]).data();
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t j = 0; j < k; ++j) dl[i * k + j] += g[i] * pr[i * k + j];
                       dl[i * k + positives[i]] -= g[i];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Sequence ops.

namespace detail {

// Shared forward kernel for linear time upsampling: out has t*factor rows;
// row j interpolates source rows floor(j/factor) and the next one, with the
// final source row replicated past the end.
inline void upsample_linear_values(const double* x, std::size_t t, std::size_t d,
                                   std::size_t factor, double* out) {
  for (std::size_t j = 0; j < t * factor; ++j) {
    double pos = static_cast<double>(j) / static_cast<double>(factor);
    std::size_t i0 = static_cast<std::size_t>(pos);
    if (i0 >= t) i0 = t - 1;
    std::size_t i1 = std::min(i0 + 1, t - 1);
    double frac = pos - static_cast<double>(i0);
    const double* r0 = x + i0 * d;
    const double* r1 = x + i1 * d;
    double* o = out + j * d;
    for (std::size_t c = 0; c < d; ++c) o[c] = (1.0 - frac) * r0[c] + frac * r1[c];
  }
}

}  // namespace detail

// Value-level upsampling for non-differentiated paths.
inline Array upsample_linear_array(const Array& x, std::size_t factor) {
  if (factor < 1) throw ParameterError("upsample_linear: factor must be >= 1");
  detail::require_matrix(x, "upsample_linear");
  std::size_t t = x.dim(0), d = x.dim(1);
  if (t < 1) throw DimensionError("upsample_linear: empty sequence");
  Array out({t * factor, d});
  detail::upsample_linear_values(x.cdata(), t, d, factor, out.data());
  return out;
}

inline Ptr upsample_linear(const Ptr& x, std::size_t factor) {
  Array out = upsample_linear_array(x->value, factor);
  std::size_t t = x->value.dim(0), d = x->value.dim(1);
  return make_node(std::move(out), {x}, [t, d, factor](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    double* dx = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t j = 0; j < t * factor; ++j) {
      double pos = static_cast<double>(j) / static_cast<double>(factor);
      std::size_t i0 = static_cast<std::size_t>(pos);
      if (i0 >= t) i0 = t - 1;
      std::size_t i1 = std::min(i0 + 1, t - 1);
      double frac = pos - static_cast<double>(i0);
      for (std::size_t c = 0; c < d; ++c) {
        dx[i0 * d + c] += (1.0 - frac) * g[j * d + c];
        dx[i1 * d + c] += frac * g[j * d + c];
      }
    }
  });
}

// 1-D convolution over time with zero padding (odd kernel, stride 1):
// x[t x c_in], w[c_out x c_in x k], b[c_out] -> [t x c_out].
inline Ptr conv1d_same(const Ptr& x, const Ptr& w, const Ptr& b) {
  detail::require_matrix(x->value, "conv1d_same");
  if (w->value.ndim() != 3) throw DimensionError("conv1d_same: weight must be 3-D");
  std::size_t t = x->value.dim(0), cin = x->value.dim(1);
  std::size_t cout = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != cin) throw DimensionError("conv1d_same: channel mismatch");
  if (k % 2 == 0) throw ParameterError("conv1d_same: kernel size must be odd");
  if (b->value.size() != cout) throw DimensionError("conv1d_same: bias length mismatch");
  std::size_t pad = k / 2;
  Array out({t, cout});
  {
    double* o = out.data();
    const double* xv = x->value.cdata();
    const double* wv = w->value.cdata();
    const double* bv = b->value.cdata();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t oc = 0; oc < cout; ++oc) o[i * cout + oc] = bv[oc];
    for (std::size_t j = 0; j < k; ++j) {
      // source row index = i + j - pad
      std::size_t lo = pad > j ? pad - j : 0;
      std::size_t hi = std::min(t, t + pad - j);
      for (std::size_t i = lo; i < hi; ++i) {
        const double* xr = xv + (i + j - pad) * cin;
        double* orow = o + i * cout;
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const double* wr = wv + (oc * cin) * k + j;  // stride k over cin
          double s = 0.0;
          for (std::size_t ic = 0; ic < cin; ++ic) s += xr[ic] * wr[ic * k];
          orow[oc] += s;
        }
      }
    }
  }
  return make_node(std::move(out), {x, w, b}, [t, cin, cout, k, pad](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    const double* xv = nd.parents[0]->value.cdata();
    const double* wv = nd.parents[1]->value.cdata();
    bool need_x = nd.parents[0]->requires_grad;
    double* dx = need_x ? ctx.grad_of(*nd.parents[0]).data() : nullptr;
    double* dw = ctx.grad_of(*nd.parents[1]).data();
    double* db = ctx.grad_of(*nd.parents[2]).data();
    for (std::size_t i = 0; i < t; ++i) {
      const double* gr = g + i * cout;
      for (std::size_t oc = 0; oc < cout; ++oc) db[oc] += gr[oc];
    }
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t lo = pad > j ? pad - j : 0;
      std::size_t hi = std::min(t, t + pad - j);
      for (std::size_t i = lo; i < hi; ++i) {
        std::size_t src = i + j - pad;
        const double* gr = g + i * cout;
        const double* xr = xv + src * cin;
        for (std::size_t oc = 0; oc < cout; ++oc) {
          double go = gr[oc];
          if (go == 0.0) continue;
          for (std::size_t ic = 0; ic < cin; ++ic) {
            dw[(oc * cin + ic) * k + j] += go * xr[ic];
            if (need_x) dx[src * cin + ic] += go * wv[(oc * cin + ic) * k + j];
          }
        }
      }
    }
  });
}

// Multi-head scaled dot-product attention. Heads partition the feature axis;
// an optional [q x n] additive bias on the logits is shared across heads (it
// carries the relative-position terms in the context network). No output
// projection is applied here.
inline Ptr attention(const Ptr& query, const Ptr& keys, const Ptr& values, const Ptr& bias,
                     std::size_t n_heads) {
  detail::require_matrix(query->value, "attention");
  detail::require_matrix(keys->value, "attention");
  detail::require_matrix(values->value, "attention");
  std::size_t q = query->value.dim(0), d = query->value.dim(1), n = keys->value.dim(0);
  if (keys->value.dim(1) != d || values->value.dim(0) != n || values->value.dim(1) != d)
    throw DimensionError("attention: query/keys/values widths disagree");
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("attention: feature width not divisible by head count");
  if (bias && (bias->value.ndim() != 2 || bias->value.dim(0) != q || bias->value.dim(1) != n))
    throw DimensionError("attention: bias must be [q x n]");
  std::size_t dh = d / n_heads;
  double scale_k = 1.0 / std::sqrt(static_cast<double>(dh));

  Array weights({n_heads, q, n});  // saved softmax weights
  Array out({q, d});
  {
    const double* qv = query->value.cdata();
    const double* kv = keys->value.cdata();
    const double* vv = values->value.cdata();
    const double* bv = bias ? bias->value.cdata() : nullptr;
    double* wv = weights.data();
    double* ov = out.data();
    for (std::size_t h = 0; h < n_heads; ++h) {
      std::size_t c0 = h * dh;
      double* wh = wv + h * q * n;
      for (std::size_t i = 0; i < q; ++i) {
        const double* qr = qv + i * d + c0;
        double* wrow = wh + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kr = kv + j * d + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
          wrow[j] = s * scale_k + (bv ? bv[i * n + j] : 0.0);
        }
      }
      detail::softmax_rows_inplace(wh, q, n, 1.0);
      for (std::size_t i = 0; i < q; ++i) {
        double* orow = ov + i * d + c0;
        const double* wrow = wh + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          double a = wrow[j];
          if (a == 0.0) continue;
          const double* vr = vv + j * d + c0;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vr[c];
        }
      }
    }
  }
  std::vector<Ptr> parents = {query, keys, values};
  if (bias) parents.push_back(bias);
  bool has_bias = static_cast<bool>(bias);
  return make_node(
      std::move(out), std::move(parents),
      [q, d, n, n_heads, dh, scale_k, weights, has_bias](Node& nd, BackwardCtx& ctx) {
        const double* g = nd.grad.cdata();
        const double* qv = nd.parents[0]->value.cdata();
        const double* kv = nd.parents[1]->value.cdata();
        const double* vv = nd.parents[2]->value.cdata();
        const double* wv = weights.cdata();
        bool need_q = nd.parents[0]->requires_grad;
        bool need_k = nd.parents[1]->requires_grad;
        bool need_v = nd.parents[2]->requires_grad;
        bool need_b = has_bias && nd.parents[3]->requires_grad;
        double* dq = need_q ? ctx.grad_of(*nd.parents[0]).data() : nullptr;
        double* dk = need_k ? ctx.grad_of(*nd.parents[1]).data() : nullptr;
        double* dv = need_v ? ctx.grad_of(*nd.parents[2]).data() : nullptr;
        double* db = need_b ? ctx.grad_of(*nd.parents[3]).data() : nullptr;
        std::vector<double> ds(q * n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          std::size_t c0 = h * dh;
          const double* wh = wv + h * q * n;
          // dA then dS (softmax backward), row by row
          for (std::size_t i = 0; i < q; ++i) {
            const double* grow = g + i * d + c0;
            const double* wrow = wh + i * n;
            double* dsr = ds.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double* vr = vv + j * d + c0;
              double da = 0.0;
              for (std::size_t c = 0; c < dh; ++c) da += grow[c] * vr[c];
              dsr[j] = da;
              dot += da * wrow[j];
            }
            for (std::size_t j = 0; j < n; ++j) dsr[j] = wrow[j] * (dsr[j] - dot);
          }
          for (std::size_t i = 0; i < q; ++i) {
            const double* dsr = ds.data() + i * n;
            const double* grow = g + i * d + c0;
            const double* wrow = wh + i * n;
            const double* qr = qv + i * d + c0;
            for (std::size_t j = 0; j < n; ++j) {
              double s = dsr[j];
              if (need_b) db[i * n + j] += s;
              const double* kr = kv + j * d + c0;
              if (need_q) {
                double* dqr = dq + i * d + c0;
                for (std::size_t c = 0; c < dh; ++c) dqr[c] += s * scale_k * kr[c];
              }
              if (need_k) {
                double* dkr = dk + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) dkr[c] += s * scale_k * qr[c];
              }
              if (need_v && wrow[j] != 0.0) {
                double* dvr = dv + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) dvr[c] += wrow[j] * grow[c];
              }
            }
          }
        }
      });
}

// Learned relative-position bias: out[i][j] = table[clip(i-j, -r, r) + r]
// where table has 2r+1 entries.
inline Ptr relative_position_bias(const Ptr& table, std::size_t t) {
  if (table->value.ndim() != 1 || table->value.size() % 2 == 0)
    throw DimensionError("relative_position_bias: table must be 1-D with odd length");
  std::ptrdiff_t r = static_cast<std::ptrdiff_t>(table->value.size() / 2);
  Array out({t, t});
  {
    double* o = out.data();
    const double* tv = table->value.cdata();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        std::ptrdiff_t rel = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(j);
        rel = std::clamp(rel, -r, r);
        o[i * t + j] = tv[static_cast<std::size_t>(rel + r)];
      }
  }
  return make_node(std::move(out), {table}, [t, r](Node& nd, BackwardCtx& ctx) {
    const double* g = nd.grad.cdata();
    double* dt = ctx.grad_of(*nd.parents[0]).data();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        std::ptrdiff_t rel = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(j);
        rel = std::clamp(rel, -r, r);
        dt[static_cast<std::size_t>(rel + r)] += g[i * t + j];
      }
  });
}

// ---------------------------------------------------------------------------
// Backward pass.

inline void backward(const Ptr& loss, BackwardCtx* external_ctx = nullptr) {
  if (!loss || loss->value.size() != 1)
    throw ContractError("backward: loss must be a scalar node");
  BackwardCtx local;
  BackwardCtx& ctx = external_ctx ? *external_ctx : local;

  // Iterative post-order DFS over requires_grad ancestors.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (loss->requires_grad) stack.emplace_back(loss.get(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0) {
      if (visited.count(node)) {
        stack.pop_back();
        continue;
      }
      visited.insert(node);
    }
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  ctx.grad_of(*loss).at(0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node, ctx);
    }
  }
}

// ---------------------------------------------------------------------------
// Parameter registry: insertion-ordered, name-addressed leaf nodes.

class ParamStore {
 public:
  Ptr add(const std::string& name, Array init) {
    if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
    Ptr p = param(std::move(init));
    index_[name] = items_.size();
    items_.emplace_back(name, p);
    return p;
  }

  // Registers an existing leaf node under this store (shared, not copied);
  // used for optimizer views over a subset of another store's parameters.
  void add_existing(const std::string& name, const Ptr& p) {
    if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, p);
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const Ptr& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Ptr>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  void zero_grads() {
    for (auto& [name, p] : items_) p->zero_grad();
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : items_) n += p->value.size();
    return n;
  }

  // Deep copy (independent values, fresh grads).
  ParamStore clone() const {
    ParamStore c;
    for (const auto& [name, p] : items_) c.add(name, p->value.clone());
    return c;
  }

  // Copies of every parameter except those whose name starts with `prefix`.
  ParamStore clone_without_prefix(const std::string& prefix) const {
    ParamStore c;
    for (const auto& [name, p] : items_)
      if (name.rfind(prefix, 0) != 0) c.add(name, p->value.clone());
    return c;
  }

 private:
  std::vector<std::pair<std::string, Ptr>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace pmam::ad

#endif  // PMAM_AUTODIFF_HPP
