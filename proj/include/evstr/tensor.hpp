// Copyright 2026 The evstr Authors
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

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "evstr/common.hpp"

namespace evstr {

/// Dense row-major array. Most of the library treats tensors as matrices:
/// `rows()` is the leading dimension and `cols()` the product of the rest.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, S fill = S(0))
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  explicit Tensor(std::vector<std::size_t> shape, S fill = S(0))
      : shape_(std::move(shape)),
        data_(std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                              std::multiplies<>()),
              fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<S> data)
      : shape_{rows, cols}, data_(std::move(data)) {
    if (data_.size() != rows * cols) throw ShapeError("tensor data does not match shape");
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : data_.size() / rows(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> span() { return data_; }
  std::span<const S> span() const { return data_; }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    std::transform(data_.begin(), data_.end(), out.vec().begin(),
                   [](S v) { return static_cast<T>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<S> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace kernels {

// C (n x m) += A (n x k) * B (k x m)
template <class S>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const S* a, const S* b, S* c) {
  for (std::size_t i = 0; i < n; ++i) {
    S* crow = c + i * m;
    const S* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (n x m) += A (n x k) * B^T, B is (m x k). B is transposed into a
// scratch buffer so the inner loop streams contiguous rows.
template <class S>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const S* a, const S* b, S* c) {
  std::vector<S> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  gemm_nn(n, k, m, a, bt.data(), c);
}

// C (k x m) += A^T * B, A is (n x k), B is (n x m)
template <class S>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const S* a, const S* b, S* c) {
  for (std::size_t i = 0; i < n; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      S* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels
}  // namespace evstr
