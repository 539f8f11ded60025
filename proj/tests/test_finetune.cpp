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

#include <catch_amalgamated.hpp>
#include <cmath>

#include "pmam/finetune.hpp"
#include "pmam/random.hpp"
#include "support/oracles.hpp"

using namespace pmam;
using namespace pmam::ft;
using pmam::testing::max_grad_rel_err;
using pmam::testing::random_array;

TEST_CASE("ema update closed forms") {
  ad::ParamStore student;
  student.add("a", Array({2}, {1.0, -3.0}));
  auto teacher = make_teacher(student, 0.99);

  SECTION("alpha = 1 leaves the teacher unchanged") {
    Array before = teacher.params.get("a")->value.clone();
    student.get("a")->value.fill(7.0);
    ema_update(teacher, student, 1.0);
    REQUIRE(teacher.params.get("a")->value.bit_equal(before));
  }

  SECTION("alpha = 0 copies the student") {
    student.get("a")->value.fill(7.0);
    ema_update(teacher, student, 0.0);
    REQUIRE(teacher.params.get("a")->value.bit_equal(student.get("a")->value));
  }

  SECTION("alpha = 0.99 with teacher 0 and student 1") {
    teacher.params.get("a")->value.fill(0.0);
    student.get("a")->value.fill(1.0);
    ema_update(teacher, student, 0.99);
    for (int i = 0; i < 2; ++i)
      REQUIRE(teacher.params.get("a")->value.cat(i) == Catch::Approx(0.01).margin(1e-15));
  }

  SECTION("alpha outside [0,1] is rejected") {
    REQUIRE_THROWS_AS(ema_update(teacher, student, 1.5), ParameterError);
    REQUIRE_THROWS_AS(ema_update(teacher, student, -0.1), ParameterError);
    REQUIRE_THROWS_AS(make_teacher(student, 2.0), ParameterError);
  }
}

TEST_CASE("zero-initialized head yields probability one half everywhere") {
  ad::ParamStore params;
  Rng rng(1);
  init_classifier_params(params, 6, 4, rng);
  params.get("head.w")->value.fill(0.0);
  params.get("head.b")->value.fill(0.0);
  auto probs = head_probs(params, ad::constant(random_array(rng, {9, 6})));
  REQUIRE(probs->value.shape() == Shape{9, 4});
  for (std::size_t i = 0; i < probs->value.size(); ++i) REQUIRE(probs->value.cat(i) == 0.5);
}

TEST_CASE("strong supervised loss closed forms") {
  ad::ParamStore params;
  Rng rng(2);
  init_classifier_params(params, 4, 2, rng);

  Array labels({2, 3}, {1, 0, 1, 0, 1, 0});  // C x T

  // perfect probabilities: loss vanishes up to the clamp epsilon
  Array perfect({3, 2});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 2; ++c) perfect.at(t, c) = labels.cat(c, t);
  auto loss = strong_supervised_loss(ad::constant(perfect), labels);
  REQUIRE(loss->value.cat(0) < 1e-10);

  // uniform probabilities: log 2 per frame-category
  auto half = strong_supervised_loss(ad::constant(Array::full({3, 2}, 0.5)), labels);
  REQUIRE(half->value.cat(0) == Catch::Approx(0.6931472).margin(1e-6));

  REQUIRE_THROWS_AS(strong_supervised_loss(ad::constant(perfect), Array({3, 2})), DataError);
}

TEST_CASE("weak supervised loss pools by per-category maximum") {
  Array probs({4, 3});  // T x C
  probs.at(0, 0) = 1.0;  // category 0 present with max prob 1 (clamped)
  probs.at(2, 1) = 0.3;
  // category 2 stays 0

  auto loss = weak_supervised_loss(ad::constant(probs), {0}, 3);
  // cat 0: -log(1 - 1e-12) ~ 0; cat 1: -log(0.7); cat 2: -log(1 - 0) ~ 0 via clamp
  double expect = (-std::log(1.0 - 1e-12) - std::log(0.7) - std::log(1.0 - 1e-12)) / 3.0;
  REQUIRE(loss->value.cat(0) == Catch::Approx(expect).margin(1e-9));

  // clip-level probability equals a brute-force max over frames
  Rng rng(3);
  auto p = random_array(rng, {7, 4}, 0.01, 0.99);
  auto pooled = ad::column_max(ad::constant(p));
  for (std::size_t c = 0; c < 4; ++c) {
    double mx = 0.0;
    for (std::size_t t = 0; t < 7; ++t) mx = std::max(mx, p.cat(t, c));
    REQUIRE(pooled->value.cat(c) == mx);
  }

  REQUIRE_THROWS_AS(weak_supervised_loss(ad::constant(probs), {5}, 3), DataError);
}

TEST_CASE("column max gradient flows to the argmax entries") {
  Rng rng(4);
  auto x = ad::param(random_array(rng, {5, 3}));
  auto w = ad::constant(random_array(rng, {1, 3}));
  double err = max_grad_rel_err({x}, [&] {
    return ad::sum_all(ad::mul(ad::reshape(ad::column_max(x), {1, 3}), w));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("consistency loss and its stop-gradient contract") {
  Rng rng(5);
  Array teacher = random_array(rng, {6, 3}, 0.1, 0.9);
  auto student = ad::param(teacher.clone());
  auto zero = consistency_loss(student, teacher);
  REQUIRE(zero->value.cat(0) == 0.0);

  Array shifted = teacher.clone();
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted.at(i) += 0.1;
  auto off = consistency_loss(ad::constant(shifted), teacher);
  REQUIRE(off->value.cat(0) == Catch::Approx(0.01).margin(1e-12));

  // only the student side receives gradient
  student->zero_grad();
  ad::backward(consistency_loss(student, shifted));
  double g = 0.0;
  for (std::size_t i = 0; i < student->grad.size(); ++i) g += std::abs(student->grad.cat(i));
  REQUIRE(g > 0.0);

  REQUIRE_THROWS_AS(consistency_loss(student, Array({2, 2})), DimensionError);
}

TEST_CASE("consistency weight ramps linearly then saturates") {
  REQUIRE(consistency_weight(0, 10, 2.0) == 0.0);
  REQUIRE(consistency_weight(5, 10, 2.0) == Catch::Approx(1.0));
  REQUIRE(consistency_weight(10, 10, 2.0) == 2.0);
  REQUIRE(consistency_weight(15, 10, 2.0) == 2.0);
  REQUIRE(consistency_weight(3, 0, 2.0) == 2.0);
}

TEST_CASE("teacher mirrors student structure and rejects mismatches") {
  ad::ParamStore student;
  student.add("a", Array({2}));
  student.add("b", Array({3}));
  auto teacher = make_teacher(student, 0.99);
  REQUIRE(teacher.params.size() == 2);

  ad::ParamStore other;
  other.add("a", Array({2}));
  REQUIRE_THROWS_AS(ema_update(teacher, other, 0.5), ContractError);
}
