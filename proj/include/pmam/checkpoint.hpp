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

#ifndef PMAM_CHECKPOINT_HPP
#define PMAM_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/errors.hpp"
#include "pmam/io.hpp"
#include "pmam/optim.hpp"

// Versioned serialization of all learnable parameters plus optimizer moments
// and RNG state. save -> load -> save produces identical bytes.

namespace pmam {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string stage;      // "pretrain_iter<N>" or "finetuned"
  std::string rng_state;  // training stream state at save time
  std::uint64_t opt_step = 0;
  std::vector<std::pair<std::string, Array>> params;
  std::vector<std::pair<std::string, Array>> opt_m;
  std::vector<std::pair<std::string, Array>> opt_v;
};

namespace detail {

inline void write_blocks(std::ostream& os, const std::vector<std::pair<std::string, Array>>& blocks) {
  io::write_u32(os, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, a] : blocks) {
    io::write_string(os, name);
    io::write_u32(os, static_cast<std::uint32_t>(a.ndim()));
    for (std::size_t i = 0; i < a.ndim(); ++i) io::write_u32(os, static_cast<std::uint32_t>(a.dim(i)));
    io::write_f64_block(os, a.cdata(), a.size());
  }
}

inline std::vector<std::pair<std::string, Array>> read_blocks(std::istream& is) {
  std::uint32_t count = io::read_u32(is);
  std::vector<std::pair<std::string, Array>> blocks;
  blocks.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    std::uint32_t ndim = io::read_u32(is);
    Shape shape(ndim);
    for (std::uint32_t j = 0; j < ndim; ++j) shape[j] = io::read_u32(is);
    Array a(shape);
    io::read_f64_block(is, a.data(), a.size());
    blocks.emplace_back(std::move(name), std::move(a));
  }
  return blocks;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto os = io::open_out(path);
  io::write_magic(os, "PMAMCKPT");
  io::write_u32(os, Checkpoint::kVersion);
  io::write_string(os, ckpt.stage);
  io::write_string(os, ckpt.rng_state);
  io::write_u64(os, ckpt.opt_step);
  detail::write_blocks(os, ckpt.params);
  detail::write_blocks(os, ckpt.opt_m);
  detail::write_blocks(os, ckpt.opt_v);
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "PMAMCKPT");
  std::uint32_t version = io::read_u32(is);
  if (version != Checkpoint::kVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.stage = io::read_string(is);
  ckpt.rng_state = io::read_string(is);
  ckpt.opt_step = io::read_u64(is);
  ckpt.params = detail::read_blocks(is);
  ckpt.opt_m = detail::read_blocks(is);
  ckpt.opt_v = detail::read_blocks(is);
  return ckpt;
}

// Snapshot of a parameter store (and optionally its optimizer).
inline Checkpoint make_checkpoint(const std::string& stage, const ad::ParamStore& params,
                                  const AdamW* opt = nullptr, const std::string& rng_state = "") {
  Checkpoint ckpt;
  ckpt.stage = stage;
  ckpt.rng_state = rng_state;
  for (const auto& [name, p] : params.items()) ckpt.params.emplace_back(name, p->value.clone());
  if (opt) {
    ckpt.opt_step = opt->step_count();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.opt_m.emplace_back(params.items()[i].first, opt->moments_m()[i].clone());
      ckpt.opt_v.emplace_back(params.items()[i].first, opt->moments_v()[i].clone());
    }
  }
  return ckpt;
}

// Rebuilds a parameter store with the checkpoint's values (checkpoint order).
inline ad::ParamStore params_from_checkpoint(const Checkpoint& ckpt) {
  ad::ParamStore store;
  for (const auto& [name, a] : ckpt.params) store.add(name, a.clone());
  return store;
}

// Loads parameter values into an existing, structurally identical store.
inline void load_params_into(const Checkpoint& ckpt, ad::ParamStore& store) {
  if (ckpt.params.size() != store.size())
    throw LoadError("checkpoint/model parameter count mismatch");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& [cname, cval] = ckpt.params[i];
    const auto& [sname, sp] = store.items()[i];
    if (cname != sname || !cval.same_shape(sp->value))
      throw LoadError("checkpoint/model mismatch at parameter '" + sname + "'");
    sp->value = cval.clone();
  }
}

inline void restore_optimizer(const Checkpoint& ckpt, const ad::ParamStore& params, AdamW& opt) {
  if (ckpt.opt_m.empty()) {
    opt.reset(params);
    return;
  }
  if (ckpt.opt_m.size() != params.size() || ckpt.opt_v.size() != params.size())
    throw LoadError("checkpoint optimizer state does not match parameter count");
  std::vector<Array> m, v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.opt_m[i].first != params.items()[i].first)
      throw LoadError("checkpoint optimizer block order mismatch");
    m.push_back(ckpt.opt_m[i].second.clone());
    v.push_back(ckpt.opt_v[i].second.clone());
  }
  opt.restore(std::move(m), std::move(v), ckpt.opt_step);
}

}  // namespace pmam

#endif  // PMAM_CHECKPOINT_HPP
