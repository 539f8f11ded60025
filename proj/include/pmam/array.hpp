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

#ifndef PMAM_ARRAY_HPP
#define PMAM_ARRAY_HPP

#include <cmath>
#include <cstddef>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pmam/errors.hpp"

namespace pmam {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major array of f64. Storage is shared copy-on-write: arrays are
// cheap to pass by value and to alias between graph nodes; any mutable access
// detaches a shared buffer first. Mutation must not race with readers, which
// holds because parameters are only updated between (possibly parallel)
// forward/backward phases.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_size(shape_), 0.0)) {}

  Array(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_size(shape_))
      throw DimensionError("Array: data length " + std::to_string(data_->size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Array scalar(double v) { return Array({1}, {v}); }

  static Array full(Shape shape, double v) {
    Array a(std::move(shape));
    a.fill(v);
    return a;
  }

  bool empty() const { return data_ == nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_ ? data_->size() : 0; }

  // Shares storage; total element count must be unchanged.
  Array reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("Array::reshaped: cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(shape));
    Array a;
    a.shape_ = std::move(shape);
    a.data_ = data_;
    return a;
  }

  const double* cdata() const { return data_->data(); }

  double* data() {
    detach();
    return data_->data();
  }

  double cat(std::size_t i) const { return (*data_)[i]; }
  double cat(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }
  double cat(std::size_t i, std::size_t j, std::size_t k) const {
    return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
  }

  double& at(std::size_t i) {
    detach();
    return (*data_)[i];
  }
  double& at(std::size_t i, std::size_t j) {
    detach();
    return (*data_)[i * shape_[1] + j];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    detach();
    return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(double v) {
    detach();
    for (auto& x : *data_) x = v;
  }

  void add_scaled(const Array& other, double s) {
    if (other.size() != size()) throw DimensionError("Array::add_scaled: size mismatch");
    double* d = data();
    const double* o = other.cdata();
    for (std::size_t i = 0; i < size(); ++i) d[i] += s * o[i];
  }

  bool all_finite() const {
    if (!data_) return true;
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }

  // Deep copy regardless of sharing.
  Array clone() const {
    if (!data_) return Array();
    return Array(shape_, *data_);
  }

  bool bit_equal(const Array& other) const {
    if (shape_ != other.shape_) return false;
    if (!data_ || !other.data_) return data_ == other.data_;
    const double* a = cdata();
    const double* b = other.cdata();
    for (std::size_t i = 0; i < size(); ++i)
      if (a[i] != b[i] && !(std::isnan(a[i]) && std::isnan(b[i]))) return false;
    return true;
  }

 private:
  void detach() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

inline Array transposed(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("transposed: expected 2-D, got " + shape_str(a.shape()));
  std::size_t m = a.dim(0), n = a.dim(1);
  Array out({n, m});
  double* o = out.data();
  const double* v = a.cdata();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = v[i * n + j];
  return out;
}

inline void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace pmam

#endif  // PMAM_ARRAY_HPP
