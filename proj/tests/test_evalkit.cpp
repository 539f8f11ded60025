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
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pmam/evalkit.hpp"
#include "pmam/random.hpp"
#include "support/oracles.hpp"

using namespace pmam;
using namespace pmam::evalkit;
using pmam::testing::naive_pearson;
using pmam::testing::random_array;

TEST_CASE("median filter basics") {
  std::vector<double> spike{0, 1, 0};
  REQUIRE(median_filter(spike, 1) == spike);
  REQUIRE(median_filter(spike, 3) == std::vector<double>{0, 0, 0});

  std::vector<double> flat(10, 0.42);
  REQUIRE(median_filter(flat, 7) == flat);

  REQUIRE_THROWS_AS(median_filter(spike, 2), ParameterError);

  // binary input with runs at least as long as the window is a fixed point
  std::vector<double> runs{0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  auto once = median_filter(runs, 3);
  REQUIRE(once == runs);
  REQUIRE(median_filter(once, 3) == once);
}

TEST_CASE("binarize and extract maximal runs") {
  Array low = Array::full({6, 2}, 0.1);
  auto none = binarize_and_extract(low, 0.5);
  REQUIRE(none[0].empty());
  REQUIRE(none[1].empty());

  Array probs({12, 1});
  for (std::size_t t = 5; t < 9; ++t) probs.at(t, 0) = 0.9;
  auto single = binarize_and_extract(probs, 0.5);
  REQUIRE(single[0] == std::vector<Interval>{{5, 9}});

  Array alternating({6, 1});
  for (std::size_t t = 0; t < 6; t += 2) alternating.at(t, 0) = 1.0;
  auto runs = binarize_and_extract(alternating, 0.5);
  REQUIRE(runs[0].size() == 3);

  REQUIRE_THROWS_AS(binarize_and_extract(probs, 0.0), ParameterError);
  REQUIRE_THROWS_AS(binarize_and_extract(probs, 1.0), ParameterError);
}

TEST_CASE("frame macro F1 closed forms") {
  Array truth({4, 2});
  truth.at(0, 0) = 1.0;
  truth.at(1, 0) = 1.0;
  truth.at(2, 1) = 1.0;

  REQUIRE(frame_macro_f1(truth, truth) == 1.0);

  Array inverted({4, 2});
  for (std::size_t i = 0; i < inverted.size(); ++i) inverted.at(i) = 1.0 - truth.cat(i);
  REQUIRE(frame_macro_f1(inverted, truth) == 0.0);

  // TP=1, FP=1, FN=1 in category 0; category 1 perfect
  Array pred({4, 2});
  pred.at(0, 0) = 1.0;  // TP
  pred.at(3, 0) = 1.0;  // FP
  // frame 1 cat 0 missed: FN
  pred.at(2, 1) = 1.0;
  REQUIRE(frame_macro_f1(pred, truth) == Catch::Approx((0.5 + 1.0) / 2.0).margin(1e-12));

  // category with no positives anywhere scores 1
  Array empty_truth({4, 2});
  Array empty_pred({4, 2});
  REQUIRE(frame_macro_f1(empty_pred, empty_truth) == 1.0);
}

TEST_CASE("event F1 intersection criterion") {
  EventList a(2), b(2);
  a[0] = {{0, 10}, {20, 30}};
  a[1] = {{5, 8}};
  REQUIRE(event_f1_intersection(a, a, 0.3) == 1.0);
  REQUIRE(event_f1_intersection(a, a, 1.0) == 1.0);

  b[0] = {{40, 50}};
  b[1] = {{30, 40}};
  REQUIRE(event_f1_intersection(a, b, 0.5) == 0.0);

  // pred (0,10) vs truth (0,5) at rho 0.5: intersection 5 covers half of both
  EventList pred(1), truth(1);
  pred[0] = {{0, 10}};
  truth[0] = {{0, 5}};
  REQUIRE(event_f1_intersection(pred, truth, 0.5) == 1.0);
  REQUIRE(event_f1_intersection(pred, truth, 0.6) == 0.0);

  // the criterion is symmetric
  REQUIRE(event_f1_intersection(truth, pred, 0.5) == event_f1_intersection(pred, truth, 0.5));

  REQUIRE_THROWS_AS(event_f1_intersection(a, b, 0.0), ParameterError);
  REQUIRE_THROWS_AS(event_f1_intersection(a, b, 1.5), ParameterError);
}

TEST_CASE("events from label matrix merge overlapping annotations") {
  Array labels({1, 10});
  for (std::size_t t = 2; t < 5; ++t) labels.at(0, t) = 1.0;
  for (std::size_t t = 4; t < 8; ++t) labels.at(0, t) = 1.0;
  auto events = events_from_label_matrix(labels);
  REQUIRE(events[0] == std::vector<Interval>{{2, 8}});
}

TEST_CASE("point-biserial hand-computed value") {
  Array gamma({3, 1}, {2.0, 1.0, 0.0});
  Array truth({3, 1}, {1.0, 0.0, 0.0});
  auto m = point_biserial_matrix(gamma, truth, false);
  REQUIRE(m.values.cat(0, 0) == Catch::Approx(0.866).margin(5e-4));
}

TEST_CASE("point-biserial self-correlation, degenerate columns, and none row") {
  Array truth({6, 2});
  truth.at(0, 0) = 1.0;
  truth.at(1, 0) = 1.0;
  truth.at(3, 1) = 1.0;

  Array gamma({6, 3});
  for (std::size_t t = 0; t < 6; ++t) {
    gamma.at(t, 0) = truth.cat(t, 0);  // identical to category 0
    gamma.at(t, 1) = 0.25;             // constant
    gamma.at(t, 2) = truth.cat(t, 1) * 0.8 + 0.1;
  }
  auto m = point_biserial_matrix(gamma, truth, true);
  REQUIRE(m.values.shape() == Shape{3, 3});
  REQUIRE(m.values.cat(0, 0) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(m.values.cat(0, 1) == 0.0);
  REQUIRE(m.zero_variance[1]);
  REQUIRE_FALSE(m.zero_variance[0]);

  // none row: frames 2, 4, 5 have no active category
  std::vector<double> none_ind{0, 0, 1, 0, 1, 1};
  std::vector<double> g2{gamma.cat(0, 2), gamma.cat(1, 2), gamma.cat(2, 2),
                         gamma.cat(3, 2), gamma.cat(4, 2), gamma.cat(5, 2)};
  REQUIRE(m.values.cat(2, 2) == Catch::Approx(naive_pearson(none_ind, g2)).margin(1e-12));
}

TEST_CASE("point-biserial equals the naive Pearson oracle on random data") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t n = 40;
    Array gamma = random_array(rng, {n, 4}, 0.0, 1.0);
    Array truth({n, 3});
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < 3; ++c) truth.at(t, c) = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto m = point_biserial_matrix(gamma, truth, false);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 4; ++j) {
        std::vector<double> x(n), y(n);
        for (std::size_t t = 0; t < n; ++t) {
          x[t] = truth.cat(t, c);
          y[t] = gamma.cat(t, j);
        }
        REQUIRE(std::abs(m.values.cat(c, j) - naive_pearson(x, y)) < 1e-12);
      }
  }
}

TEST_CASE("prototype reordering recovers a planted permutation") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t k = 4;
    std::vector<std::size_t> planted(k);
    std::iota(planted.begin(), planted.end(), 0);
    rng.shuffle(planted);
    // matrix with one strong entry per row: row r peaks at column planted[r]
    CorrelationMatrix m;
    m.values = Array({k, k});
    m.zero_variance.assign(k, false);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < k; ++j)
        m.values.at(r, j) = (j == planted[r]) ? rng.uniform(0.7, 0.95) : rng.uniform(-0.2, 0.2);

    auto reordered = reorder_prototypes(m);
    REQUIRE(reordered.permutation == planted);

    // brute force over all 24 permutations: greedy matches the best total
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    double best = -1e9;
    std::vector<std::size_t> best_perm;
    do {
      double total = 0.0;
      for (std::size_t r = 0; r < k; ++r) total += m.values.cat(r, perm[r]);
      if (total > best) {
        best = total;
        best_perm = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    REQUIRE(best_perm == planted);

    // diagonal-dominant matrix is a fixed point
    auto again = reorder_prototypes(reordered.matrix);
    std::vector<std::size_t> identity(k);
    std::iota(identity.begin(), identity.end(), 0);
    REQUIRE(again.permutation == identity);

    // output is a permutation of all prototype indices
    auto sorted = reordered.permutation;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(sorted == identity);
  }
}

TEST_CASE("timeline export schema and round-trip") {
  Rng rng(3);
  Array gamma = random_array(rng, {8, 3}, 0.0, 1.0);
  Array labels({2, 8});
  labels.at(0, 2) = 1.0;
  labels.at(1, 5) = 1.0;
  auto path = std::filesystem::temp_directory_path() / "pmam_test_timeline.csv";
  export_timeline(gamma, labels, path);

  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  REQUIRE(header == "frame,g0,g1,g2,truth_0,truth_1");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string tok;
    std::vector<double> vals;
    while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
    REQUIRE(vals.size() == 6);
    std::size_t t = static_cast<std::size_t>(vals[0]);
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(std::abs(vals[1 + j] - gamma.cat(t, j)) < 1e-9);
    REQUIRE(vals[4] == labels.cat(0, t));
    REQUIRE(vals[5] == labels.cat(1, t));
    ++rows;
  }
  REQUIRE(rows == 8);
}
