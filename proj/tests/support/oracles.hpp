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

// Independent oracles used by the test suites: central finite differences,
// naive statistics, and brute-force reference computations. Everything here
// deliberately avoids the library's optimized code paths.

#ifndef PMAM_TESTS_ORACLES_HPP
#define PMAM_TESTS_ORACLES_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/random.hpp"

namespace pmam::testing {

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-3});
  return std::abs(a - b) / denom;
}

// Largest relative error between analytic gradients of build() and central
// finite differences with step h, over every element of every parameter.
// build() must construct the loss graph from the parameters' current values.
inline double max_grad_rel_err(const std::vector<ad::Ptr>& params,
                               const std::function<ad::Ptr()>& build, double h = 1e-5) {
  for (const auto& p : params) p->zero_grad();
  ad::Ptr loss = build();
  ad::backward(loss);
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p->ensure_grad().clone());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      double orig = p->value.cat(j);
      p->value.at(j) = orig + h;
      double fp = build()->value.cat(0);
      p->value.at(j) = orig - h;
      double fm = build()->value.cat(0);
      p->value.at(j) = orig;
      double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[pi].cat(j), fd));
    }
  }
  return worst;
}

inline Array random_array(Rng& rng, Shape shape, double lo = -1.5, double hi = 1.5) {
  Array a(std::move(shape));
  double* d = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = rng.uniform(lo, hi);
  return a;
}

// Pearson correlation with population moments; the point-biserial coefficient
// is this applied to a binary x. Returns 0 on zero variance.
inline double naive_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace pmam::testing

#endif  // PMAM_TESTS_ORACLES_HPP
