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
#include <vector>

#include "evstr/layers.hpp"
#include "evstr/set_batch.hpp"

namespace evstr {

struct VsalConfig {
  std::size_t dim = 128;           // D
  std::size_t bias_hidden = 0;     // hidden width of the bias encoder; 0 means D/4
  std::size_t mlp_hidden = 512;    // hidden width of the output MLP; 0 means one stage
  bool absolute_pe = true;
  bool relative_bias = true;
  bool sqrt_dk_scale = false;      // scale logits by sqrt(D/4) instead of sqrt(D)
  bool literal_mlp = false;

  std::size_t qk_dim() const { return dim / 4; }
  std::size_t bias_width() const { return bias_hidden ? bias_hidden : std::max<std::size_t>(1, dim / 4); }
  double scale() const {
    return 1.0 / std::sqrt(static_cast<double>(sqrt_dk_scale ? qk_dim() : dim));
  }
};

/// Global self-attention over a voxel set with a learned absolute
/// embedding of the coordinates and a learned scalar bias per voxel pair.
template <class S>
class Vsal {
 public:
  Vsal() = default;
  Vsal(const VsalConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.dim % 4 != 0 || cfg.dim == 0) throw ConfigError("VSAL width must be divisible by 4");
    const std::size_t d = cfg.dim;
    position_ = Mlp<S>({3, d}, rng, true);
    query_ = Linear<S>(d, cfg.qk_dim(), rng, false);
    key_ = Linear<S>(d, cfg.qk_dim(), rng, false);
    value_ = Linear<S>(d, d, rng, false);
    bias_hidden_ = Mlp<S>({6, cfg.bias_width()}, rng, true);
    bias_out_ = Linear<S>(cfg.bias_width(), 1, rng);
    if (cfg.mlp_hidden)
      out_ = Mlp<S>({d, cfg.mlp_hidden, d}, rng, cfg.literal_mlp);
    else
      out_ = Mlp<S>({d, d}, rng, cfg.literal_mlp);
  }

  const VsalConfig& config() const { return cfg_; }

  /// Absolute positional embedding P = MLP(C).
  Var<S> absolute_pe(const Tensor<S>& coords, const ForwardContext& ctx) {
    return position_(Var<S>(coords), ctx);
  }

  /// Pair rows concat(c_i, c_i - c_j), set-major then row-major per set.
  static Tensor<S> pair_rows(const SetBatch<S>& in) {
    std::size_t total = 0;
    for (std::size_t s = 0; s < in.sets(); ++s) total += in.rows(s) * in.rows(s);
    Tensor<S> pairs(total, 6);
    std::size_t q = 0;
    for (std::size_t s = 0; s < in.sets(); ++s)
      for (std::size_t i = in.offsets[s]; i < in.offsets[s + 1]; ++i)
        for (std::size_t j = in.offsets[s]; j < in.offsets[s + 1]; ++j, ++q)
          for (int c = 0; c < 3; ++c) {
            pairs(q, c) = in.coords(i, c);
            pairs(q, 3 + c) = in.coords(i, c) - in.coords(j, c);
          }
    return pairs;
  }

  /// Relative position bias, flattened n x n per set.
  Var<S> relative_bias(const SetBatch<S>& in, const ForwardContext& ctx) {
    return bias_out_(bias_hidden_(Var<S>(pair_rows(in)), ctx));
  }

  SetBatch<S> operator()(const SetBatch<S>& in, const ForwardContext& ctx,
                         std::vector<S>* attention = nullptr) {
    if (in.features.cols() != cfg_.dim)
      throw ShapeError("vsal: expected width " + std::to_string(cfg_.dim) + ", got " +
                       std::to_string(in.features.cols()));
    Var<S> x = cfg_.absolute_pe ? ops::add(in.features, absolute_pe(in.coords, ctx)) : in.features;
    Var<S> q = query_(x), k = key_(x), v = value_(x);
    Var<S> bias = cfg_.relative_bias ? relative_bias(in, ctx) : Var<S>();
    Var<S> a = ops::block_attention(q, k, v, bias, in.offsets, 1, static_cast<S>(cfg_.scale()),
                                    attention);
    SetBatch<S> out;
    out.features = ops::add(out_(a, ctx), in.features);
    out.coords = in.coords;
    out.offsets = in.offsets;
    return out;
  }

  std::uint64_t macs(std::uint64_t n) const {
    const std::uint64_t d = cfg_.dim, dk = cfg_.qk_dim();
    std::uint64_t m = 0;
    if (cfg_.absolute_pe) m += position_.macs(n);
    m += n * d * (2 * dk + d);       // Q, K, V
    if (cfg_.relative_bias) m += bias_hidden_.macs(n * n) + n * n * cfg_.bias_width();
    m += n * n * dk + n * n * d;     // QK^T and attention-weighted V
    m += out_.macs(n);
    return m;
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    if (cfg_.absolute_pe) position_.collect(r, prefix + ".position");
    query_.collect(r, prefix + ".query");
    key_.collect(r, prefix + ".key");
    value_.collect(r, prefix + ".value");
    if (cfg_.relative_bias) {
      bias_hidden_.collect(r, prefix + ".bias_enc");
      bias_out_.collect(r, prefix + ".bias_out");
    }
    out_.collect(r, prefix + ".out");
  }

  Mlp<S>& position() { return position_; }
  Mlp<S>& bias_hidden() { return bias_hidden_; }
  Linear<S>& bias_out() { return bias_out_; }
  Linear<S>& query() { return query_; }
  Linear<S>& key() { return key_; }
  Linear<S>& value() { return value_; }
  Mlp<S>& output() { return out_; }

 private:
  VsalConfig cfg_;
  Mlp<S> position_;
  Linear<S> query_, key_, value_;
  Mlp<S> bias_hidden_;
  Linear<S> bias_out_;
  Mlp<S> out_;
};

}  // namespace evstr
