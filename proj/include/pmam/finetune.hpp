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

#ifndef PMAM_FINETUNE_HPP
#define PMAM_FINETUNE_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/autodiff.hpp"
#include "pmam/encoder.hpp"
#include "pmam/errors.hpp"
#include "pmam/mam.hpp"
#include "pmam/nn.hpp"
#include "pmam/random.hpp"

// Semi-supervised fine-tuning: the self-supervised predictor is replaced by a
// sigmoid classifier head over the context representations; strong clips
// supervise frames, weak clips supervise clip-level maxima, and a mean-teacher
// copy of the model supplies consistency targets on everything else.

namespace pmam::ft {

// Classifier head over context width d with C outputs; small uniform weights.
inline void init_classifier_params(ad::ParamStore& params, std::size_t d, std::size_t c, Rng& rng) {
  Array w({d, c});
  double* wd = w.data();
  for (std::size_t i = 0; i < w.size(); ++i) wd[i] = rng.uniform(-0.01, 0.01);
  params.add("head.w", std::move(w));
  params.add("head.b", Array({c}));
}

// Teacher parameters mirror the student store exactly (same names, shapes).
struct TeacherState {
  ad::ParamStore params;
  double ema_decay = 0.99;
};

inline TeacherState make_teacher(const ad::ParamStore& student, double ema_decay) {
  if (ema_decay < 0.0 || ema_decay > 1.0)
    throw ParameterError("make_teacher: ema decay must lie in [0,1]");
  return TeacherState{student.clone(), ema_decay};
}

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
inline void ema_update(TeacherState& teacher, const ad::ParamStore& student, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ParameterError("ema_update: alpha must lie in [0,1]");
  if (teacher.params.size() != student.size())
    throw ContractError("ema_update: teacher/student structure mismatch");
  for (std::size_t i = 0; i < student.size(); ++i) {
    const auto& [sname, sp] = student.items()[i];
    const auto& [tname, tp] = teacher.params.items()[i];
    if (sname != tname || !sp->value.same_shape(tp->value))
      throw ContractError("ema_update: parameter mismatch at '" + sname + "'");
    double* t = tp->value.data();
    const double* s = sp->value.cdata();
    for (std::size_t j = 0; j < sp->value.size(); ++j)
      t[j] = alpha * t[j] + (1.0 - alpha) * s[j];
  }
}

// Frame probabilities from a context sequence: sigmoid(context W + b), [T x C].
inline ad::Ptr head_probs(const ad::ParamStore& params, const ad::Ptr& context) {
  return ad::sigmoid(nn::linear(params, "head", context));
}

// Full forward pass (no masking during fine-tuning): features -> encoder ->
// context network -> classifier head -> per-frame probabilities [T x C].
inline ad::Ptr frame_probs(const ad::ParamStore& params, const enc::EncoderConfig& ecfg,
                           const mam::ContextConfig& ccfg, const Array& features) {
  return head_probs(params, mam::context_forward(params, ccfg, enc::encode(params, ecfg, features)));
}

// Value-only context pass for frozen-backbone epochs and evaluation.
inline Array context_values(const ad::ParamStore& params, const enc::EncoderConfig& ecfg,
                            const mam::ContextConfig& ccfg, const Array& features) {
  ad::NoGradGuard guard;
  return mam::context_forward(params, ccfg, enc::encode(params, ecfg, features))->value;
}

// Frame-level BCE against the strong label matrix [C x T]; mean per
// frame-category.
inline ad::Ptr strong_supervised_loss(const ad::Ptr& probs, const Array& label_matrix) {
  std::size_t t = probs->value.dim(0), c = probs->value.dim(1);
  if (label_matrix.ndim() != 2 || label_matrix.dim(0) != c || label_matrix.dim(1) != t)
    throw DataError("strong_supervised_loss: label matrix must be [C x T]");
  return ad::mean_all(ad::binary_cross_entropy(probs, transposed(label_matrix)));
}

// Clip-level BCE on per-category maxima against the weak label set; mean per
// category.
inline ad::Ptr weak_supervised_loss(const ad::Ptr& probs, const std::vector<std::size_t>& weak_set,
                                    std::size_t n_categories) {
  if (probs->value.dim(1) != n_categories)
    throw DataError("weak_supervised_loss: category count mismatch");
  Array target({n_categories});
  for (std::size_t cat : weak_set) {
    if (cat >= n_categories) throw DataError("weak_supervised_loss: category out of range");
    target.at(cat) = 1.0;
  }
  return ad::mean_all(ad::binary_cross_entropy(ad::column_max(probs), target));
}

// Mean squared error between student and teacher frame probabilities; the
// teacher side is a constant (no gradient).
inline ad::Ptr consistency_loss(const ad::Ptr& student_probs, const Array& teacher_probs) {
  require_same_shape(student_probs->value, teacher_probs, "consistency_loss");
  auto diff = ad::sub(student_probs, ad::constant(teacher_probs));
  return ad::mean_all(ad::mul(diff, diff));
}

// Linear ramp of the consistency weight over the first ramp_epochs epochs.
inline double consistency_weight(std::size_t epoch, std::size_t ramp_epochs, double max_weight) {
  if (ramp_epochs == 0) return max_weight;
  double f = static_cast<double>(epoch) / static_cast<double>(ramp_epochs);
  return max_weight * std::min(1.0, f);
}

}  // namespace pmam::ft

#endif  // PMAM_FINETUNE_HPP
