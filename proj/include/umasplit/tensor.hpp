/*
 * Copyright 2026 the uma-split authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "umasplit/common.hpp"

namespace umasplit {

class Tape;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense 64-bit float tensor. A Tensor is a plain value until it is watched
/// by (or produced on) a Tape, at which point it also carries a node
/// reference into that tape's computation graph so reverse-mode gradients
/// can reach it. Storage is shared between handles; graph recording never
/// mutates values.
class Tensor {
 public:
  Tensor() : values_(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (values_->size() != shape_numel(shape_)) {
      throw ShapeError("tensor value count " + std::to_string(values_->size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return values_->data(); }
  const double* data() const { return values_->data(); }
  std::vector<double>& values() { return *values_; }
  const std::vector<double>& values() const { return *values_; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*values_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  const std::string& name() const { return name_; }
  Tensor& set_name(std::string n) {
    name_ = std::move(n);
    return *this;
  }

  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool in_graph() const { return node_ >= 0; }

  /// Deep copy of shape and values, detached from any graph.
  Tensor clone() const {
    Tensor t(shape_, *values_);
    t.requires_grad_ = requires_grad_;
    t.name_ = name_;
    return t;
  }

  const void* storage_key() const { return values_.get(); }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  bool requires_grad_ = false;
  std::string name_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace umasplit
