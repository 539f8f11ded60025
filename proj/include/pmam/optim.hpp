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

#ifndef PMAM_OPTIM_HPP
#define PMAM_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pmam/autodiff.hpp"
#include "pmam/errors.hpp"

namespace pmam {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay and bias correction. Learning rates are
// per-parameter so the caller can keep two groups (transformer branch vs the
// rest) on distinct rates. Moment state is keyed by the parameter's position
// in the store, which is stable by construction.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ad::ParamStore& params, AdamWConfig cfg) : cfg_(cfg) { reset(params); }

  void reset(const ad::ParamStore& params) {
    m_.clear();
    v_.clear();
    for (const auto& [name, p] : params.items()) {
      m_.push_back(Array(p->value.shape()));
      v_.push_back(Array(p->value.shape()));
    }
    step_ = 0;
  }

  // One update over all parameters; lr[i] applies to params.items()[i].
  // Gradient buffers are left untouched (call zero_grads separately).
  void step(ad::ParamStore& params, const std::vector<double>& lr) {
    if (lr.size() != params.size()) throw ContractError("AdamW::step: lr per parameter required");
    for (double r : lr)
      if (r <= 0.0) throw ParameterError("AdamW::step: learning rate must be positive");
    if (m_.size() != params.size()) throw ContractError("AdamW::step: optimizer not initialized");
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.items()[i].second;
      const Array& grad = p->grad.empty() ? (p->ensure_grad()) : p->grad;
      double* theta = p->value.data();
      double* m = m_[i].data();
      double* v = v_[i].data();
      const double* g = grad.cdata();
      double rate = lr[i];
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        theta[j] -= rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[j]);
      }
    }
  }

  std::uint64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<Array>& moments_m() const { return m_; }
  const std::vector<Array>& moments_v() const { return v_; }

  void restore(std::vector<Array> m, std::vector<Array> v, std::uint64_t step) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Array> m_, v_;
  std::uint64_t step_ = 0;
};

// Per-parameter learning rates from a two-group split: names starting with
// `group_prefix` use lr_group, everything else lr_rest.
inline std::vector<double> two_group_lr(const ad::ParamStore& params, const std::string& group_prefix,
                                        double lr_group, double lr_rest) {
  std::vector<double> lr;
  lr.reserve(params.size());
  for (const auto& [name, p] : params.items())
    lr.push_back(name.rfind(group_prefix, 0) == 0 ? lr_group : lr_rest);
  return lr;
}

}  // namespace pmam

#endif  // PMAM_OPTIM_HPP
