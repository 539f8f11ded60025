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

#ifndef PMAM_EVALKIT_HPP
#define PMAM_EVALKIT_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "pmam/array.hpp"
#include "pmam/errors.hpp"
#include "pmam/io.hpp"

// Post-processing, detection metrics, and pseudo-label analysis: median
// filtering of frame probabilities, run-length event decoding, frame-level
// macro F1, intersection-criterion event F1, and the point-biserial
// correlation between pseudo labels and true event activity.

namespace pmam::evalkit {

struct Interval {
  std::size_t onset;
  std::size_t offset;  // exclusive

  bool operator==(const Interval&) const = default;
};

// Detected events per category; intervals sorted and non-overlapping within a
// category.
using EventList = std::vector<std::vector<Interval>>;

// Sliding median with edge replication; window must be odd.
inline std::vector<double> median_filter(const std::vector<double>& probs, std::size_t window) {
  if (window % 2 == 0 || window < 1) throw ParameterError("median_filter: window must be odd");
  if (window == 1 || probs.empty()) return probs;
  std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);
  std::ptrdiff_t t_total = static_cast<std::ptrdiff_t>(probs.size());
  std::vector<double> out(probs.size());
  std::vector<double> buf(window);
  for (std::ptrdiff_t t = 0; t < t_total; ++t) {
    for (std::ptrdiff_t j = -half; j <= half; ++j) {
      std::ptrdiff_t src = std::clamp(t + j, std::ptrdiff_t{0}, t_total - 1);
      buf[static_cast<std::size_t>(j + half)] = probs[static_cast<std::size_t>(src)];
    }
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out[static_cast<std::size_t>(t)] = buf[static_cast<std::size_t>(half)];
  }
  return out;
}

// Frames at or above the threshold become active; maximal runs of active
// frames become events. probs is [T x C].
inline EventList binarize_and_extract(const Array& probs, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw ParameterError("binarize_and_extract: threshold must lie in (0,1)");
  if (probs.ndim() != 2) throw DimensionError("binarize_and_extract: probs must be [T x C]");
  std::size_t t_total = probs.dim(0), c_total = probs.dim(1);
  EventList events(c_total);
  for (std::size_t c = 0; c < c_total; ++c) {
    bool active = false;
    std::size_t start = 0;
    for (std::size_t t = 0; t < t_total; ++t) {
      bool on = probs.cat(t, c) >= threshold;
      if (on && !active) {
        active = true;
        start = t;
      } else if (!on && active) {
        events[c].push_back({start, t});
        active = false;
      }
    }
    if (active) events[c].push_back({start, t_total});
  }
  return events;
}

// Canonical event list of a [C x T] binary label matrix (overlapping
// same-category annotations merge into maximal runs).
inline EventList events_from_label_matrix(const Array& labels) {
  if (labels.ndim() != 2) throw DimensionError("events_from_label_matrix: labels must be [C x T]");
  return binarize_and_extract(transposed(labels), 0.5);
}

// ---------------------------------------------------------------------------
// Frame-level macro F1, pooled over clips.

class FrameF1Accumulator {
 public:
  explicit FrameF1Accumulator(std::size_t n_categories)
      : tp_(n_categories, 0), fp_(n_categories, 0), fn_(n_categories, 0) {}

  // pred and truth are [T x C] with 0/1 entries.
  void add(const Array& pred, const Array& truth) {
    require_same_shape(pred, truth, "FrameF1Accumulator::add");
    if (pred.ndim() != 2 || pred.dim(1) != tp_.size())
      throw ContractError("FrameF1Accumulator::add: category count mismatch");
    std::size_t t_total = pred.dim(0), c_total = pred.dim(1);
    for (std::size_t t = 0; t < t_total; ++t)
      for (std::size_t c = 0; c < c_total; ++c) {
        bool p = pred.cat(t, c) != 0.0;
        bool g = truth.cat(t, c) != 0.0;
        if (p && g) ++tp_[c];
        else if (p && !g) ++fp_[c];
        else if (!p && g) ++fn_[c];
      }
  }

  // Per-category F1 averaged over categories; a category with no positives in
  // either truth or prediction scores 1.
  double macro_f1() const {
    double total = 0.0;
    for (std::size_t c = 0; c < tp_.size(); ++c) {
      double denom = 2.0 * static_cast<double>(tp_[c]) + static_cast<double>(fp_[c]) +
                     static_cast<double>(fn_[c]);
      total += denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(tp_[c]) / denom;
    }
    return total / static_cast<double>(tp_.size());
  }

 private:
  std::vector<std::size_t> tp_, fp_, fn_;
};

inline double frame_macro_f1(const Array& pred, const Array& truth) {
  if (pred.ndim() != 2) throw ContractError("frame_macro_f1: inputs must be [T x C]");
  FrameF1Accumulator acc(pred.dim(1));
  acc.add(pred, truth);
  return acc.macro_f1();
}

// ---------------------------------------------------------------------------
// Event F1 with a symmetric intersection criterion: a predicted event matches
// a same-category truth event when the intersection covers at least rho of
// both. Greedy one-to-one matching in onset order.

class EventF1Accumulator {
 public:
  explicit EventF1Accumulator(double rho) : rho_(rho) {
    if (rho <= 0.0 || rho > 1.0) throw ParameterError("event f1: rho must lie in (0,1]");
  }

  void add(const EventList& pred, const EventList& truth) {
    if (pred.size() != truth.size()) throw ContractError("event f1: category count mismatch");
    for (std::size_t c = 0; c < pred.size(); ++c) {
      n_pred_ += pred[c].size();
      n_truth_ += truth[c].size();
      std::vector<bool> used(truth[c].size(), false);
      for (const auto& p : pred[c]) {
        for (std::size_t i = 0; i < truth[c].size(); ++i) {
          if (used[i]) continue;
          const auto& g = truth[c][i];
          std::size_t lo = std::max(p.onset, g.onset);
          std::size_t hi = std::min(p.offset, g.offset);
          double inter = hi > lo ? static_cast<double>(hi - lo) : 0.0;
          if (inter >= rho_ * static_cast<double>(g.offset - g.onset) &&
              inter >= rho_ * static_cast<double>(p.offset - p.onset)) {
            used[i] = true;
            ++n_match_;
            break;
          }
        }
      }
    }
  }

  double f1() const {
    if (n_pred_ + n_truth_ == 0) return 1.0;
    return 2.0 * static_cast<double>(n_match_) / static_cast<double>(n_pred_ + n_truth_);
  }

 private:
  double rho_;
  std::size_t n_match_ = 0, n_pred_ = 0, n_truth_ = 0;
};

inline double event_f1_intersection(const EventList& pred, const EventList& truth, double rho) {
  EventF1Accumulator acc(rho);
  acc.add(pred, truth);
  return acc.f1();
}

// ---------------------------------------------------------------------------
// Point-biserial correlation matrix between pseudo labels and true labels.

struct CorrelationMatrix {
  Array values;                  // (C [+1]) x K, the last row is the "none" indicator
  std::vector<bool> zero_variance;  // per column: gamma column had zero variance
  bool includes_none = false;
};

// Pearson correlation (population moments) between each category indicator
// (plus optionally the no-event indicator) and each pseudo-label column.
// pseudo is [T x K], truth is [T x C] with 0/1 entries, rows aligned.
inline CorrelationMatrix point_biserial_matrix(const Array& pseudo, const Array& truth,
                                               bool include_none) {
  if (pseudo.ndim() != 2 || truth.ndim() != 2 || pseudo.dim(0) != truth.dim(0))
    throw DimensionError("point_biserial_matrix: row counts must agree");
  std::size_t n = pseudo.dim(0), k = pseudo.dim(1), c_total = truth.dim(1);
  std::size_t rows = c_total + (include_none ? 1 : 0);

  CorrelationMatrix out;
  out.values = Array({rows, k});
  out.zero_variance.assign(k, false);
  out.includes_none = include_none;

  std::vector<double> g_mean(k, 0.0), g_var(k, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < k; ++j) g_mean[j] += pseudo.cat(t, j);
  for (std::size_t j = 0; j < k; ++j) g_mean[j] /= static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < k; ++j) {
      double d = pseudo.cat(t, j) - g_mean[j];
      g_var[j] += d * d;
    }
  for (std::size_t j = 0; j < k; ++j) {
    g_var[j] /= static_cast<double>(n);
    if (g_var[j] == 0.0) out.zero_variance[j] = true;
  }

  for (std::size_t r = 0; r < rows; ++r) {
    double y_mean = 0.0;
    auto indicator = [&](std::size_t t) -> double {
      if (r < c_total) return truth.cat(t, r);
      for (std::size_t c = 0; c < c_total; ++c)
        if (truth.cat(t, c) != 0.0) return 0.0;
      return 1.0;  // no event active at this frame
    };
    for (std::size_t t = 0; t < n; ++t) y_mean += indicator(t);
    y_mean /= static_cast<double>(n);
    double y_var = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      double d = indicator(t) - y_mean;
      y_var += d * d;
    }
    y_var /= static_cast<double>(n);

    for (std::size_t j = 0; j < k; ++j) {
      if (y_var == 0.0 || g_var[j] == 0.0) {
        out.values.at(r, j) = 0.0;
        continue;
      }
      double cov = 0.0;
      for (std::size_t t = 0; t < n; ++t)
        cov += (indicator(t) - y_mean) * (pseudo.cat(t, j) - g_mean[j]);
      cov /= static_cast<double>(n);
      out.values.at(r, j) = cov / std::sqrt(y_var * g_var[j]);
    }
  }
  return out;
}

// Greedy prototype reordering: category rows claim their best unassigned
// column in order; leftover columns append in index order. Returns the
// permuted matrix and the column permutation applied.
struct ReorderedMatrix {
  CorrelationMatrix matrix;
  std::vector<std::size_t> permutation;  // new column j came from permutation[j]
};

inline ReorderedMatrix reorder_prototypes(const CorrelationMatrix& input) {
  std::size_t rows = input.values.dim(0), k = input.values.dim(1);
  std::size_t c_total = input.includes_none ? rows - 1 : rows;
  std::vector<bool> taken(k, false);
  std::vector<std::size_t> perm;
  perm.reserve(k);
  for (std::size_t r = 0; r < c_total && perm.size() < k; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_j = k;
    for (std::size_t j = 0; j < k; ++j)
      if (!taken[j] && input.values.cat(r, j) > best) {
        best = input.values.cat(r, j);
        best_j = j;
      }
    if (best_j < k) {
      taken[best_j] = true;
      perm.push_back(best_j);
    }
  }
  for (std::size_t j = 0; j < k; ++j)
    if (!taken[j]) perm.push_back(j);

  ReorderedMatrix out;
  out.permutation = perm;
  out.matrix.includes_none = input.includes_none;
  out.matrix.values = Array({rows, k});
  out.matrix.zero_variance.assign(k, false);
  for (std::size_t j = 0; j < k; ++j) {
    out.matrix.zero_variance[j] = input.zero_variance[perm[j]];
    for (std::size_t r = 0; r < rows; ++r)
      out.matrix.values.at(r, j) = input.values.cat(r, perm[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plot-ready timeline export: frame index, pseudo-label columns, then truth
// columns. gamma is [T x K], labels [C x T].
inline void export_timeline(const Array& gamma, const Array& labels,
                            const std::filesystem::path& path) {
  if (gamma.ndim() != 2 || labels.ndim() != 2 || gamma.dim(0) != labels.dim(1))
    throw DimensionError("export_timeline: frame counts must agree");
  std::size_t t_total = gamma.dim(0), k = gamma.dim(1), c_total = labels.dim(0);
  auto os = io::open_out(path);
  os << "frame";
  for (std::size_t j = 0; j < k; ++j) os << ",g" << j;
  for (std::size_t c = 0; c < c_total; ++c) os << ",truth_" << c;
  os << "\n";
  os.precision(17);
  for (std::size_t t = 0; t < t_total; ++t) {
    os << t;
    for (std::size_t j = 0; j < k; ++j) os << "," << gamma.cat(t, j);
    for (std::size_t c = 0; c < c_total; ++c) os << "," << labels.cat(c, t);
    os << "\n";
  }
  if (!os) throw IoError("export_timeline: write failed: " + path.string());
}

}  // namespace pmam::evalkit

#endif  // PMAM_EVALKIT_HPP
