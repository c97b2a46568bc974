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
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evstr/autograd.hpp"

namespace evstr {

/// Flat, named view of a model's trainable parameters and persistent
/// buffers (batch-norm running statistics).
template <class S>
struct Registry {
  std::vector<std::pair<std::string, Var<S>>> params;
  std::vector<std::pair<std::string, Tensor<S>*>> buffers;

  void param(const std::string& name, const Var<S>& v) { params.emplace_back(name, v); }
  void buffer(const std::string& name, Tensor<S>& t) { buffers.emplace_back(name, &t); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, v] : params) v.zero_grad();
  }
};

struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;  // drives dropout masks and voxel sampling
};

template <class S>
Var<S> make_param(Tensor<S> value) {
  return Var<S>(std::move(value), true);
}

/// Fully connected layer, weights uniform in +-1/sqrt(fan_in).
template <class S>
struct Linear {
  Var<S> weight;  // in x out
  Var<S> bias;    // 1 x out, undefined when bias-free

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor<S> w(in, out);
    for (auto& v : w.vec()) v = static_cast<S>(rng.uniform(-bound, bound));
    weight = make_param(std::move(w));
    if (with_bias) {
      Tensor<S> b(1, out);
      for (auto& v : b.vec()) v = static_cast<S>(rng.uniform(-bound, bound));
      bias = make_param(std::move(b));
    }
  }

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }

  Var<S> operator()(const Var<S>& x) const { return ops::linear(x, weight, bias); }

  void collect(Registry<S>& r, const std::string& prefix) const {
    r.param(prefix + ".weight", weight);
    if (bias.defined()) r.param(prefix + ".bias", bias);
  }
};

template <class S>
struct BatchNorm {
  Var<S> gamma, beta;
  Tensor<S> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t d)
      : gamma(make_param(Tensor<S>(1, d, S(1)))),
        beta(make_param(Tensor<S>(1, d, S(0)))),
        running_mean(1, d, S(0)),
        running_var(1, d, S(1)) {}

  Var<S> operator()(const Var<S>& x, const ForwardContext& ctx) {
    return ops::batch_norm(x, gamma, beta, running_mean, running_var, ctx.training, momentum, eps);
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    r.param(prefix + ".gamma", gamma);
    r.param(prefix + ".beta", beta);
    r.buffer(prefix + ".running_mean", running_mean);
    r.buffer(prefix + ".running_var", running_var);
  }
};

template <class S>
struct LayerNorm {
  Var<S> gamma, beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gamma(make_param(Tensor<S>(1, d, S(1)))), beta(make_param(Tensor<S>(1, d, S(0)))) {}

  Var<S> operator()(const Var<S>& x) const { return ops::layer_norm(x, gamma, beta, eps); }

  void collect(Registry<S>& r, const std::string& prefix) const {
    r.param(prefix + ".gamma", gamma);
    r.param(prefix + ".beta", beta);
  }
};

/// Stack of linear -> BN -> ReLU stages. `final_relu = false` drops the
/// ReLU of the last stage (linear -> BN), for outputs feeding a softmax or a
/// residual sum.
template <class S>
struct Mlp {
  std::vector<Linear<S>> linears;
  std::vector<BatchNorm<S>> norms;
  bool final_relu = true;

  Mlp() = default;
  Mlp(const std::vector<std::size_t>& dims, Rng& rng, bool final_relu_ = true)
      : final_relu(final_relu_) {
    if (dims.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      linears.emplace_back(dims[i], dims[i + 1], rng);
      norms.emplace_back(dims[i + 1]);
    }
  }

  bool defined() const { return !linears.empty(); }
  std::size_t in() const { return linears.front().in(); }
  std::size_t out() const { return linears.back().out(); }

  Var<S> operator()(Var<S> x, const ForwardContext& ctx) {
    for (std::size_t i = 0; i < linears.size(); ++i) {
      x = norms[i](linears[i](x), ctx);
      if (i + 1 < linears.size() || final_relu) x = ops::relu(x);
    }
    return x;
  }

  /// Applies only the first linear map; callers that gather rows between
  /// the linear map and the normalization use this with `finish`.
  Var<S> first_linear(const Var<S>& x) const { return linears.front()(x); }

  Var<S> finish(Var<S> x, const ForwardContext& ctx) {
    x = norms.front()(x, ctx);
    if (linears.size() > 1 || final_relu) x = ops::relu(x);
    for (std::size_t i = 1; i < linears.size(); ++i) {
      x = norms[i](linears[i](x), ctx);
      if (i + 1 < linears.size() || final_relu) x = ops::relu(x);
    }
    return x;
  }

  /// Sum over stages of rows * in * out.
  std::uint64_t macs(std::uint64_t rows) const {
    std::uint64_t m = 0;
    for (const auto& l : linears) m += rows * l.in() * l.out();
    return m;
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    if (linears.size() == 1) {
      linears[0].collect(r, prefix + ".linear");
      norms[0].collect(r, prefix + ".bn");
      return;
    }
    for (std::size_t i = 0; i < linears.size(); ++i) {
      linears[i].collect(r, prefix + ".linear" + std::to_string(i));
      norms[i].collect(r, prefix + ".bn" + std::to_string(i));
    }
  }
};

}  // namespace evstr
