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

#ifndef PMAM_PROTO_HPP
#define PMAM_PROTO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/errors.hpp"
#include "pmam/io.hpp"
#include "pmam/random.hpp"

// Prototypical distribution modeling. A prototype is a Gaussian component
// (prior, mean, diagonal covariance) of a mixture over frame embeddings; the
// per-frame responsibilities of the mixture serve as soft multi-label pseudo
// labels, so one frame can belong to several prototypes at once — the case
// hard clustering cannot express. Everything is computed in log space with
// log-sum-exp, so underflow never becomes an error.

namespace pmam::proto {

constexpr double kVarianceFloor = 1e-6;

struct PrototypeModel {
  Array priors;     // K, simplex
  Array means;      // K x D
  Array variances;  // K x D, every entry >= kVarianceFloor

  std::size_t k() const { return priors.size(); }
  std::size_t d() const { return means.dim(1); }

  void validate() const {
    if (priors.ndim() != 1 || means.ndim() != 2 || variances.ndim() != 2)
      throw DimensionError("PrototypeModel: bad ranks");
    if (means.dim(0) != k() || !variances.same_shape(means))
      throw DimensionError("PrototypeModel: K mismatch across fields");
    double sum = 0.0;
    for (std::size_t i = 0; i < k(); ++i) {
      if (priors.cat(i) < 0.0) throw ContractError("PrototypeModel: negative prior");
      sum += priors.cat(i);
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ContractError("PrototypeModel: priors must sum to 1");
    for (std::size_t i = 0; i < variances.size(); ++i)
      if (variances.cat(i) < kVarianceFloor)
        throw ContractError("PrototypeModel: variance below floor");
  }
};

struct KMeansModel {
  Array centroids;  // K x D
};

namespace detail {

constexpr double kLog2Pi = 1.8378770664093454836;

inline double log_gaussian_diag(const double* z, const double* mu, const double* var,
                                std::size_t d) {
  double acc = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double diff = z[c] - mu[c];
    acc += diff * diff / var[c] + std::log(var[c]);
  }
  return -0.5 * (acc + static_cast<double>(d) * kLog2Pi);
}

// Per-component terms that do not depend on the sample: inverse variances and
// the log normalizer (including the prior). Hoisting them makes component
// scoring a pure multiply-add loop.
struct ComponentStats {
  std::vector<double> inv_var;    // K x D
  std::vector<double> log_const;  // K: log prior - 0.5 (sum log var + D log 2pi)
};

inline ComponentStats component_stats(const Array& priors, const Array& means,
                                      const Array& variances) {
  std::size_t k = priors.size(), d = means.dim(1);
  ComponentStats s;
  s.inv_var.resize(k * d);
  s.log_const.resize(k);
  const double* var = variances.cdata();
  for (std::size_t j = 0; j < k; ++j) {
    double logdet = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      s.inv_var[j * d + c] = 1.0 / var[j * d + c];
      logdet += std::log(var[j * d + c]);
    }
    double lp = priors.cat(j) > 0.0 ? std::log(priors.cat(j))
                                    : -std::numeric_limits<double>::infinity();
    s.log_const[j] = lp - 0.5 * (logdet + static_cast<double>(d) * kLog2Pi);
  }
  return s;
}

// Log-space scoring of every frame against every component. Writes
// responsibilities into gamma_out (when non-null) and returns the total
// log-likelihood.
inline double score_frames(const ComponentStats& stats, const Array& means, const Array& embeddings,
                           Array* gamma_out) {
  std::size_t t_total = embeddings.dim(0), d = embeddings.dim(1);
  std::size_t k = stats.log_const.size();
  const double* z = embeddings.cdata();
  const double* mu = means.cdata();
  double* g = gamma_out ? gamma_out->data() : nullptr;
  double total = 0.0;
  std::vector<double> logp(k);
  for (std::size_t t = 0; t < t_total; ++t) {
    const double* zt = z + t * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const double* mj = mu + j * d;
      const double* iv = stats.inv_var.data() + j * d;
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double diff = zt[c] - mj[c];
        acc += diff * diff * iv[c];
      }
      logp[j] = stats.log_const[j] - 0.5 * acc;
      mx = std::max(mx, logp[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(logp[j] - mx);
    double lse = mx + std::log(sum);
    total += lse;
    if (g)
      for (std::size_t j = 0; j < k; ++j) g[t * k + j] = std::exp(logp[j] - lse);
  }
  return total;
}

inline double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double diff = a[c] - b[c];
    s += diff * diff;
  }
  return s;
}

// k-means++ seeding: first center uniform, then D^2-weighted draws.
inline std::vector<std::size_t> kmeanspp_seed(const Array& points, std::size_t k, Rng& rng) {
  std::size_t n = points.dim(0), d = points.dim(1);
  if (n < k) throw DataError("k-means++: fewer points than components");
  const double* p = points.cdata();
  std::vector<std::size_t> centers;
  centers.push_back(rng.index(n));
  std::vector<double> dist2(n);
  for (std::size_t i = 0; i < n; ++i)
    dist2[i] = squared_distance(p + i * d, p + centers[0] * d, d);
  while (centers.size() < k) {
    double total = 0.0;
    for (double v : dist2) total += v;
    std::size_t chosen;
    if (total <= 0.0) {
      // all remaining points coincide with existing centers; pick uniformly
      chosen = rng.index(n);
    } else {
      double target = rng.uniform() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist2[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    }
    centers.push_back(chosen);
    for (std::size_t i = 0; i < n; ++i)
      dist2[i] = std::min(dist2[i], squared_distance(p + i * d, p + chosen * d, d));
  }
  return centers;
}

}  // namespace detail

// Per-frame responsibilities gamma[t][k] = prior_k N(z_t | mu_k, var_k)
// normalized over k, computed via log-sum-exp. Rows sum to 1.
inline Array responsibilities(const PrototypeModel& model, const Array& embeddings) {
  if (embeddings.dim(1) != model.d())
    throw DimensionError("responsibilities: embedding width mismatch");
  Array gamma({embeddings.dim(0), model.k()});
  auto stats = detail::component_stats(model.priors, model.means, model.variances);
  detail::score_frames(stats, model.means, embeddings, &gamma);
  return gamma;
}

// Total log-likelihood sum_t log sum_k prior_k N(z_t | mu_k, var_k).
inline double log_likelihood(const PrototypeModel& model, const Array& embeddings) {
  if (embeddings.dim(1) != model.d())
    throw DimensionError("log_likelihood: embedding width mismatch");
  auto stats = detail::component_stats(model.priors, model.means, model.variances);
  return detail::score_frames(stats, model.means, embeddings, nullptr);
}

// Diagonal-covariance EM, k-means++ seeded. Stops when the relative
// log-likelihood improvement drops below tol or after max_iters. The
// log-likelihood sequence (one entry per E-step) is returned via ll_trace.
inline PrototypeModel fit_gmm(const Array& embeddings, std::size_t k, Rng& rng,
                              std::size_t max_iters = 50, double tol = 1e-6,
                              std::vector<double>* ll_trace = nullptr) {
  std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (n < k) throw DataError("fit_gmm: need at least K frames, got " + std::to_string(n));
  if (k == 0) throw ParameterError("fit_gmm: K must be positive");

  const double* z = embeddings.cdata();
  PrototypeModel model;
  model.priors = Array::full({k}, 1.0 / static_cast<double>(k));
  model.means = Array({k, d});
  model.variances = Array({k, d});
  {
    auto seeds = detail::kmeanspp_seed(embeddings, k, rng);
    double* mu = model.means.data();
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < d; ++c) mu[j * d + c] = z[seeds[j] * d + c];
    // global per-dimension variance as the starting spread
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) mean[c] += z[i * d + c];
    for (std::size_t c = 0; c < d; ++c) mean[c] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double diff = z[i * d + c] - mean[c];
        var[c] += diff * diff;
      }
    double* v = model.variances.data();
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < d; ++c)
        v[j * d + c] = std::max(var[c] / static_cast<double>(n), kVarianceFloor);
  }

  double prev_ll = -std::numeric_limits<double>::infinity();
  Array gamma({n, k});
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    auto stats = detail::component_stats(model.priors, model.means, model.variances);
    double ll = detail::score_frames(stats, model.means, embeddings, &gamma);
    if (ll_trace) ll_trace->push_back(ll);

    // M-step
    const double* g = gamma.cdata();
    std::vector<double> nk(k, 0.0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < k; ++j) nk[j] += g[t * k + j];

    double* mu = model.means.data();
    double* var = model.variances.data();
    double* pr = model.priors.data();
    for (std::size_t j = 0; j < k; ++j) {
      if (nk[j] < 1e-10) {
        // dead component: reseed on the point the component explains worst
        std::size_t worst = 0;
        double worst_ll = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < n; ++t) {
          double frame_ll = detail::log_gaussian_diag(z + t * d, mu + j * d, var + j * d, d);
          if (frame_ll < worst_ll) {
            worst_ll = frame_ll;
            worst = t;
          }
        }
        for (std::size_t c = 0; c < d; ++c) {
          mu[j * d + c] = z[worst * d + c];
          var[j * d + c] = std::max(var[j * d + c], kVarianceFloor);
        }
        nk[j] = 1.0;
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) mu[j * d + c] = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        double w = g[t * k + j];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) mu[j * d + c] += w * z[t * d + c];
      }
      for (std::size_t c = 0; c < d; ++c) mu[j * d + c] /= nk[j];
      for (std::size_t c = 0; c < d; ++c) var[j * d + c] = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        double w = g[t * k + j];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          double diff = z[t * d + c] - mu[j * d + c];
          var[j * d + c] += w * diff * diff;
        }
      }
      for (std::size_t c = 0; c < d; ++c)
        var[j * d + c] = std::max(var[j * d + c] / nk[j], kVarianceFloor);
    }
    double nk_total = 0.0;
    for (std::size_t j = 0; j < k; ++j) nk_total += nk[j];
    for (std::size_t j = 0; j < k; ++j) pr[j] = nk[j] / nk_total;

    if (iter > 0 && std::abs(ll - prev_ll) < tol * (1.0 + std::abs(prev_ll))) break;
    prev_ll = ll;
  }
  return model;
}

// Lloyd's algorithm with k-means++ seeding. Pseudo labels are one-hot at the
// nearest centroid (ties to the lowest index); empty clusters are re-seeded
// on the point farthest from its assigned centroid.
struct KMeansFit {
  KMeansModel model;
  Array one_hot;                   // N x K
  std::vector<double> wcss_trace;  // within-cluster sum of squares per iteration
};

inline KMeansFit fit_kmeans(const Array& embeddings, std::size_t k, Rng& rng,
                            std::size_t max_iters = 50) {
  std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (n < k) throw DataError("fit_kmeans: need at least K points, got " + std::to_string(n));
  if (k == 0) throw ParameterError("fit_kmeans: K must be positive");
  const double* z = embeddings.cdata();

  Array centroids({k, d});
  {
    auto seeds = detail::kmeanspp_seed(embeddings, k, rng);
    double* c = centroids.data();
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t cc = 0; cc < d; ++cc) c[j * d + cc] = z[seeds[j] * d + cc];
  }

  std::vector<std::size_t> assign(n, 0), prev_assign;
  std::vector<double> wcss_trace;
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    const double* c = centroids.cdata();
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < k; ++j) {
        double dist = detail::squared_distance(z + i * d, c + j * d, d);
        if (dist < best) {
          best = dist;
          best_j = j;
        }
      }
      assign[i] = best_j;
      wcss += best;
    }
    wcss_trace.push_back(wcss);
    if (assign == prev_assign) break;
    prev_assign = assign;

    std::vector<std::size_t> counts(k, 0);
    Array next({k, d});
    double* nx = next.data();
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t cc = 0; cc < d; ++cc) nx[assign[i] * d + cc] += z[i * d + cc];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        // farthest point from its centroid becomes the new seed
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          double dist = detail::squared_distance(z + i * d, c + assign[i] * d, d);
          if (dist > far_d) {
            far_d = dist;
            far = i;
          }
        }
        for (std::size_t cc = 0; cc < d; ++cc) nx[j * d + cc] = z[far * d + cc];
      } else {
        for (std::size_t cc = 0; cc < d; ++cc) nx[j * d + cc] /= static_cast<double>(counts[j]);
      }
    }
    centroids = std::move(next);
  }

  KMeansFit fit;
  fit.model.centroids = std::move(centroids);
  fit.one_hot = Array({n, k});
  double* oh = fit.one_hot.data();
  const double* c = fit.model.centroids.cdata();
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double dist = detail::squared_distance(z + i * d, c + j * d, d);
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    oh[i * k + best_j] = 1.0;
  }
  fit.wcss_trace = std::move(wcss_trace);
  return fit;
}

// One-hot labels for new points against fitted centroids.
inline Array kmeans_one_hot(const KMeansModel& model, const Array& embeddings) {
  std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  std::size_t k = model.centroids.dim(0);
  if (model.centroids.dim(1) != d) throw DimensionError("kmeans_one_hot: width mismatch");
  Array oh({n, k});
  double* o = oh.data();
  const double* z = embeddings.cdata();
  const double* c = model.centroids.cdata();
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double dist = detail::squared_distance(z + i * d, c + j * d, d);
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    o[i * k + best_j] = 1.0;
  }
  return oh;
}

// Uniform subsample of at most cap rows (row order preserved).
inline Array subsample_rows(const Array& points, std::size_t cap, Rng& rng) {
  std::size_t n = points.dim(0), d = points.dim(1);
  if (n <= cap) return points;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  Array out({cap, d});
  double* o = out.data();
  const double* p = points.cdata();
  for (std::size_t i = 0; i < cap; ++i)
    for (std::size_t c = 0; c < d; ++c) o[i * d + c] = p[idx[i] * d + c];
  return out;
}

// ---------------------------------------------------------------------------
// Persistence. Pseudo-label file: magic "PMAMPSL", version u32, T u32, K u32,
// T*K little-endian f64. Prototype model file: K u32, D u32, then priors,
// means, variances as little-endian f64 blocks.

constexpr std::uint32_t kPslFormatVersion = 1;

inline void save_pseudo_labels(const std::filesystem::path& path, const Array& gamma) {
  auto os = io::open_out(path);
  io::write_magic(os, "PMAMPSL");
  io::write_u32(os, kPslFormatVersion);
  io::write_u32(os, static_cast<std::uint32_t>(gamma.dim(0)));
  io::write_u32(os, static_cast<std::uint32_t>(gamma.dim(1)));
  io::write_f64_block(os, gamma.cdata(), gamma.size());
  if (!os) throw IoError("failed writing pseudo labels: " + path.string());
}

inline Array load_pseudo_labels(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "PMAMPSL");
  std::uint32_t version = io::read_u32(is);
  if (version != kPslFormatVersion)
    throw LoadError("unsupported pseudo-label format version " + std::to_string(version));
  std::size_t t = io::read_u32(is);
  std::size_t k = io::read_u32(is);
  Array gamma({t, k});
  io::read_f64_block(is, gamma.data(), t * k);
  return gamma;
}

inline void save_prototype_model(const std::filesystem::path& path, const PrototypeModel& model) {
  auto os = io::open_out(path);
  io::write_u32(os, static_cast<std::uint32_t>(model.k()));
  io::write_u32(os, static_cast<std::uint32_t>(model.d()));
  io::write_f64_block(os, model.priors.cdata(), model.priors.size());
  io::write_f64_block(os, model.means.cdata(), model.means.size());
  io::write_f64_block(os, model.variances.cdata(), model.variances.size());
  if (!os) throw IoError("failed writing prototype model: " + path.string());
}

inline PrototypeModel load_prototype_model(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  std::size_t k = io::read_u32(is);
  std::size_t d = io::read_u32(is);
  PrototypeModel m;
  m.priors = Array({k});
  m.means = Array({k, d});
  m.variances = Array({k, d});
  io::read_f64_block(is, m.priors.data(), k);
  io::read_f64_block(is, m.means.data(), k * d);
  io::read_f64_block(is, m.variances.data(), k * d);
  return m;
}

}  // namespace pmam::proto

#endif  // PMAM_PROTO_HPP
