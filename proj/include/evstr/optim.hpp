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

#include <cmath>
#include <vector>

#include "evstr/layers.hpp"

namespace evstr {

/// Cosine annealing from lr_max at epoch 0 to lr_min at epoch `total`.
inline double cosine_lr(double epoch, double total, double lr_max, double lr_min) {
  if (total <= 0) return lr_max;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * epoch / total));
}

/// SGD with classical momentum: v <- mu v - lr g; w <- w + v.
template <class S>
class Sgd {
 public:
  Sgd(std::vector<Var<S>> params, double momentum) : params_(std::move(params)), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.value().shape());
  }

  explicit Sgd(const Registry<S>& registry, double momentum)
      : Sgd(collect(registry), momentum) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  double momentum() const { return momentum_; }
  const std::vector<Tensor<S>>& velocity() const { return velocity_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    const S mu = static_cast<S>(momentum_);
    const S lr = static_cast<S>(lr_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.grad().same_shape(p.value())) continue;  // never reached by backward
      auto& v = velocity_[k];
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] - lr * g[i];
        w[i] += v[i];
      }
    }
  }

 private:
  static std::vector<Var<S>> collect(const Registry<S>& r) {
    std::vector<Var<S>> out;
    for (const auto& [name, v] : r.params) out.push_back(v);
    return out;
  }

  std::vector<Var<S>> params_;
  std::vector<Tensor<S>> velocity_;
  double momentum_ = 0.9;
  double lr_ = 0.0;
};

}  // namespace evstr
