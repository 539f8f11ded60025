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

#ifndef PMAM_NN_HPP
#define PMAM_NN_HPP

#include <cmath>
#include <string>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/random.hpp"

// Shared building blocks for the encoder and context networks: initializers
// and the pre-norm transformer block.

namespace pmam::nn {

inline Array xavier(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Array w(std::move(shape));
  double* d = w.data();
  for (std::size_t i = 0; i < w.size(); ++i) d[i] = rng.uniform(-a, a);
  return w;
}

inline Array small_normal(Rng& rng, Shape shape, double std_dev = 0.02) {
  Array w(std::move(shape));
  double* d = w.data();
  for (std::size_t i = 0; i < w.size(); ++i) d[i] = rng.normal(0.0, std_dev);
  return w;
}

inline void init_linear(ad::ParamStore& params, Rng& rng, const std::string& name, std::size_t in,
                        std::size_t out, bool bias = true) {
  params.add(name + ".w", xavier(rng, {in, out}, in, out));
  if (bias) params.add(name + ".b", Array({out}));
}

inline void init_layer_norm(ad::ParamStore& params, const std::string& name, std::size_t width) {
  params.add(name + ".g", Array::full({width}, 1.0));
  params.add(name + ".b", Array({width}));
}

inline ad::Ptr linear(const ad::ParamStore& params, const std::string& name, const ad::Ptr& x) {
  auto y = ad::matmul(x, params.get(name + ".w"));
  if (params.has(name + ".b")) y = ad::add_rowvec(y, params.get(name + ".b"));
  return y;
}

inline ad::Ptr norm(const ad::ParamStore& params, const std::string& name, const ad::Ptr& x) {
  return ad::layer_norm(x, params.get(name + ".g"), params.get(name + ".b"));
}

// Residual output projections (wo, ffn.out.w) start at zero, so a fresh block
// is the identity map and untrained token embeddings stay linear in the
// input; the projections move off zero after the first update.
inline void init_transformer_block(ad::ParamStore& params, Rng& rng, const std::string& prefix,
                                   std::size_t d, std::size_t ffn_mult) {
  init_layer_norm(params, prefix + ".ln1", d);
  params.add(prefix + ".wq", xavier(rng, {d, d}, d, d));
  params.add(prefix + ".wk", xavier(rng, {d, d}, d, d));
  params.add(prefix + ".wv", xavier(rng, {d, d}, d, d));
  params.add(prefix + ".wo", Array({d, d}));
  params.add(prefix + ".bo", Array({d}));
  init_layer_norm(params, prefix + ".ln2", d);
  init_linear(params, rng, prefix + ".ffn.in", d, d * ffn_mult);
  params.add(prefix + ".ffn.out.w", Array({d * ffn_mult, d}));
  params.add(prefix + ".ffn.out.b", Array({d}));
}

// Pre-norm transformer block; `bias` (may be null) is added to the attention
// logits of every head.
inline ad::Ptr transformer_block(const ad::ParamStore& params, const std::string& prefix,
                                 const ad::Ptr& x, const ad::Ptr& bias, std::size_t n_heads,
                                 double leaky_slope) {
  auto normed = norm(params, prefix + ".ln1", x);
  auto att = ad::attention(ad::matmul(normed, params.get(prefix + ".wq")),
                           ad::matmul(normed, params.get(prefix + ".wk")),
                           ad::matmul(normed, params.get(prefix + ".wv")), bias, n_heads);
  auto h = ad::add(x, ad::add_rowvec(ad::matmul(att, params.get(prefix + ".wo")),
                                     params.get(prefix + ".bo")));
  auto ff_in = norm(params, prefix + ".ln2", h);
  auto ff = linear(params, prefix + ".ffn.out",
                   ad::leaky_relu(linear(params, prefix + ".ffn.in", ff_in), leaky_slope));
  return ad::add(h, ff);
}

}  // namespace pmam::nn

#endif  // PMAM_NN_HPP
