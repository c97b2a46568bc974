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

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evstr/layers.hpp"
#include "evstr/mnel.hpp"
#include "evstr/set_batch.hpp"
#include "evstr/voxelizer.hpp"
#include "evstr/vsal.hpp"

namespace evstr {

enum class Task { object, action };
enum class TemporalKind { attention, avgpool, recurrent };

inline const char* to_string(Task t) { return t == Task::object ? "object" : "action"; }
inline const char* to_string(TemporalKind k) {
  switch (k) {
    case TemporalKind::attention: return "attention";
    case TemporalKind::avgpool: return "avgpool";
    case TemporalKind::recurrent: return "recurrent";
  }
  return "?";
}

struct EncoderConfig {
  std::size_t feature_dim = 32;                     // D_f
  std::array<std::size_t, 3> mnel_dims{64, 64, 128};
  std::size_t neighbors = 24;                       // N_n
  std::size_t subspaces = 3;                        // S
  double sample_rate = 0.75;                        // U
  std::size_t dim = 128;                            // D
  std::size_t vsal_mlp_hidden = 512;
  std::size_t bias_hidden = 0;
  bool multi_scale = true;
  bool attentive = true;
  bool absolute_pe = true;
  bool relative_bias = true;
  bool sqrt_dk_scale = false;
  bool literal_mlp = false;
};

struct S2tmConfig {
  std::size_t segments = 4;   // K
  std::size_t token_dim = 512;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  std::size_t ffn_dim = 1024;
  TemporalKind temporal = TemporalKind::attention;
};

struct ModelConfig {
  Task task = Task::object;
  std::size_t num_classes = 101;
  EncoderConfig encoder;
  std::array<std::size_t, 2> head_dims{512, 256};
  double dropout = 0.5;
  S2tmConfig s2tm;

  std::size_t segments() const { return task == Task::action ? s2tm.segments : 1; }
};

/// Rows entering each of the five encoder layers for N_v input voxels.
inline std::array<std::size_t, 5> encoder_row_counts(std::size_t num_voxels, double rate) {
  std::array<std::size_t, 5> rows{};
  rows[0] = num_voxels;
  for (int i = 1; i < 4; ++i) rows[i] = sampled_count(rows[i - 1], rate);
  rows[4] = rows[3];
  return rows;
}

/// Voxel feature encoding, three MNEL + sampling stages, two VSAL layers
/// and the fusion MLP over their concatenated outputs.
template <class S>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::size_t patch_size, Rng& rng) : cfg_(cfg) {
    if (cfg.mnel_dims[2] != cfg.dim)
      throw ConfigError("last MNEL width (" + std::to_string(cfg.mnel_dims[2]) +
                        ") must equal the VSAL width (" + std::to_string(cfg.dim) + ")");
    voxel_mlp_ = Mlp<S>({patch_size, cfg.feature_dim}, rng, true);
    std::size_t in = cfg.feature_dim;
    for (int i = 0; i < 3; ++i) {
      MnelConfig m;
      m.in = in;
      m.out = cfg.mnel_dims[i];
      m.neighbors = cfg.neighbors;
      m.subspaces = cfg.subspaces;
      m.multi_scale = cfg.multi_scale;
      m.attentive = cfg.attentive;
      m.literal_mlp = cfg.literal_mlp;
      mnel_[i] = Mnel<S>(m, rng);
      in = m.out;
    }
    VsalConfig v;
    v.dim = cfg.dim;
    v.mlp_hidden = cfg.vsal_mlp_hidden;
    v.bias_hidden = cfg.bias_hidden;
    v.absolute_pe = cfg.absolute_pe;
    v.relative_bias = cfg.relative_bias;
    v.sqrt_dk_scale = cfg.sqrt_dk_scale;
    v.literal_mlp = cfg.literal_mlp;
    for (auto& layer : vsal_) layer = Vsal<S>(v, rng);
    fusion_ = Mlp<S>({2 * cfg.dim, cfg.dim}, rng, true);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Stacks voxel sets into a batch (features = flattened patches).
  static SetBatch<S> stack(std::span<const VoxelSet* const> sets) {
    if (sets.empty()) throw ShapeError("encoder: empty batch");
    const std::size_t p = sets.front()->patch_size;
    std::size_t rows = 0;
    for (const auto* s : sets) {
      if (s->patch_size != p) throw ShapeError("encoder: voxel sets with different patch sizes");
      rows += s->size();
    }
    Tensor<S> feats(rows, p), coords(rows, 3);
    SetBatch<S> b;
    std::size_t r = 0;
    for (const auto* s : sets) {
      for (std::size_t i = 0; i < s->size(); ++i, ++r) {
        for (std::size_t k = 0; k < p; ++k) feats(r, k) = static_cast<S>(s->patches[i * p + k]);
        for (int c = 0; c < 3; ++c) coords(r, c) = static_cast<S>(s->coords[i * 3 + c]);
      }
      b.offsets.push_back(r);
    }
    b.features = Var<S>(std::move(feats));
    b.coords = std::move(coords);
    return b;
  }

  /// Uniform random downsampling of every set; seeds depend on the set
  /// index and stage so each set is sampled independently.
  SetBatch<S> downsample(const SetBatch<S>& in, std::uint64_t seed, int stage) const {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> offsets{0};
    for (std::size_t s = 0; s < in.sets(); ++s) {
      const auto idx = downsample_indices(in.rows(s), cfg_.sample_rate,
                                          mix_seed(seed, s * 8 + static_cast<std::size_t>(stage)));
      for (auto i : idx) rows.push_back(in.offsets[s] + i);
      offsets.push_back(rows.size());
    }
    return gather_sets(in, rows, std::move(offsets));
  }

  /// Voxel features f_i = MLP(flattened patch).
  Var<S> encode_voxel_features(const Var<S>& patches, const ForwardContext& ctx) {
    if (patches.cols() != voxel_mlp_.in())
      throw ShapeError("voxel features: patch width " + std::to_string(patches.cols()) +
                       " does not match configured " + std::to_string(voxel_mlp_.in()));
    return voxel_mlp_(patches, ctx);
  }

  /// Runs the encoder. `layer_rows`, when given, receives the row count of
  /// the first set at the input of each of the five layers.
  SetBatch<S> operator()(std::span<const VoxelSet* const> sets, const ForwardContext& ctx,
                         std::vector<std::size_t>* layer_rows = nullptr) {
    SetBatch<S> x = stack(sets);
    x.features = encode_voxel_features(x.features, ctx);
    for (int i = 0; i < 3; ++i) {
      if (layer_rows) layer_rows->push_back(x.rows(0));
      x = downsample(mnel_[i](x, ctx), ctx.seed, i);
    }
    if (layer_rows) layer_rows->push_back(x.rows(0));
    SetBatch<S> a1 = vsal_[0](x, ctx);
    if (layer_rows) layer_rows->push_back(a1.rows(0));
    SetBatch<S> a2 = vsal_[1](a1, ctx);
    SetBatch<S> out;
    out.features = fusion_(ops::concat_cols(a1.features, a2.features), ctx);
    out.coords = std::move(a2.coords);
    out.offsets = std::move(a2.offsets);
    return out;
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    voxel_mlp_.collect(r, prefix + ".voxel_mlp");
    for (int i = 0; i < 3; ++i) mnel_[i].collect(r, prefix + ".mnel" + std::to_string(i + 1));
    for (int i = 0; i < 2; ++i) vsal_[i].collect(r, prefix + ".vsal" + std::to_string(i + 1));
    fusion_.collect(r, prefix + ".fusion");
  }

  Mlp<S>& voxel_mlp() { return voxel_mlp_; }
  Mnel<S>& mnel(int i) { return mnel_[i]; }
  Vsal<S>& vsal(int i) { return vsal_[i]; }
  Mlp<S>& fusion() { return fusion_; }

 private:
  EncoderConfig cfg_;
  Mlp<S> voxel_mlp_;
  std::array<Mnel<S>, 3> mnel_;
  std::array<Vsal<S>, 2> vsal_;
  Mlp<S> fusion_;
};

/// concat(max-pool, average-pool) over the rows of each set.
template <class S>
Var<S> pool_sets(const SetBatch<S>& x) {
  return ops::concat_cols(ops::segment_max(x.features, x.offsets),
                          ops::segment_mean(x.features, x.offsets));
}

/// Segment-sequence temporal module. The default is a class-token
/// transformer encoder layer (pre-norm, GELU feed-forward); the average
/// pooling and recurrent variants share the same output contract.
template <class S>
class S2tm {
 public:
  S2tm() = default;
  S2tm(const S2tmConfig& cfg, std::size_t in_dim, Rng& rng) : cfg_(cfg) {
    const std::size_t e = cfg.token_dim;
    token_map_ = Mlp<S>({in_dim, e}, rng, true);
    if (cfg.temporal == TemporalKind::attention) {
      Tensor<S> cls(1, e), pos(cfg.segments + 1, e);
      for (auto& v : cls.vec()) v = static_cast<S>(rng.normal(0.0, 0.02));
      for (auto& v : pos.vec()) v = static_cast<S>(rng.normal(0.0, 0.02));
      cls_ = make_param(std::move(cls));
      pos_ = make_param(std::move(pos));
      const std::size_t inner = cfg.heads * cfg.head_dim;
      norm1_ = LayerNorm<S>(e);
      query_ = Linear<S>(e, inner, rng);
      key_ = Linear<S>(e, inner, rng);
      value_ = Linear<S>(e, inner, rng);
      proj_ = Linear<S>(inner, e, rng);
      norm2_ = LayerNorm<S>(e);
      ffn1_ = Linear<S>(e, cfg.ffn_dim, rng);
      ffn2_ = Linear<S>(cfg.ffn_dim, e, rng);
    } else if (cfg.temporal == TemporalKind::recurrent) {
      for (auto& l : gru_x_) l = Linear<S>(e, e, rng);
      for (auto& l : gru_h_) l = Linear<S>(e, e, rng);
    }
  }

  const S2tmConfig& config() const { return cfg_; }

  /// Maps pooled per-segment features (B*K x in_dim, sample-major) to tokens.
  Var<S> map_tokens(const Var<S>& pooled, const ForwardContext& ctx) { return token_map_(pooled, ctx); }

  /// tokens: B*K x E, sample-major. Returns B x E class representations.
  Var<S> temporal(const Var<S>& tokens) {
    const std::size_t k = cfg_.segments;
    if (tokens.rows() == 0 || tokens.rows() % k != 0)
      throw ConfigError("s2tm: " + std::to_string(tokens.rows()) +
                        " tokens is not a multiple of K = " + std::to_string(k));
    const std::size_t b = tokens.rows() / k;
    switch (cfg_.temporal) {
      case TemporalKind::avgpool: return ops::segment_mean(tokens, uniform_offsets(b, k));
      case TemporalKind::recurrent: return recurrent(tokens, b);
      case TemporalKind::attention: break;
    }
    // [cls, t_1 .. t_K] per sample, plus positional embeddings.
    std::vector<std::size_t> order;
    for (std::size_t s = 0; s < b; ++s) {
      order.push_back(0);
      for (std::size_t t = 0; t < k; ++t) order.push_back(1 + s * k + t);
    }
    Var<S> z = ops::add_tiled(ops::gather_rows(ops::concat_rows(cls_, tokens), order), pos_);
    Var<S> h = norm1_(z);
    Var<S> a = ops::block_attention(query_(h), key_(h), value_(h), Var<S>(),
                                    uniform_offsets(b, k + 1), cfg_.heads,
                                    static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim))));
    z = ops::add(z, proj_(a));
    z = ops::add(z, ffn2_(ops::gelu(ffn1_(norm2_(z)))));
    std::vector<std::size_t> cls_rows;
    for (std::size_t s = 0; s < b; ++s) cls_rows.push_back(s * (k + 1));
    return ops::gather_rows(z, cls_rows);
  }

  Var<S> operator()(const Var<S>& pooled, const ForwardContext& ctx) {
    return temporal(map_tokens(pooled, ctx));
  }

  std::uint64_t macs(std::uint64_t in_dim) const {
    const std::uint64_t k = cfg_.segments, e = cfg_.token_dim;
    std::uint64_t m = token_map_.macs(k);
    (void)in_dim;
    if (cfg_.temporal == TemporalKind::attention) {
      const std::uint64_t n = k + 1, inner = cfg_.heads * cfg_.head_dim;
      m += n * e * inner * 3 + n * inner * e;            // q, k, v, projection
      m += 2 * n * n * inner;                            // scores and weighted values
      m += 2 * n * e * cfg_.ffn_dim;                     // feed-forward
    } else if (cfg_.temporal == TemporalKind::recurrent) {
      m += 6 * k * e * e + 3 * k * e;
    }
    return m;
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    token_map_.collect(r, prefix + ".token_map");
    if (cfg_.temporal == TemporalKind::attention) {
      r.param(prefix + ".cls_token", cls_);
      r.param(prefix + ".pos_embed", pos_);
      norm1_.collect(r, prefix + ".norm1");
      query_.collect(r, prefix + ".query");
      key_.collect(r, prefix + ".key");
      value_.collect(r, prefix + ".value");
      proj_.collect(r, prefix + ".proj");
      norm2_.collect(r, prefix + ".norm2");
      ffn1_.collect(r, prefix + ".ffn1");
      ffn2_.collect(r, prefix + ".ffn2");
    } else if (cfg_.temporal == TemporalKind::recurrent) {
      static constexpr const char* gates[3] = {"update", "reset", "candidate"};
      for (int g = 0; g < 3; ++g) {
        gru_x_[g].collect(r, prefix + ".gru." + gates[g] + "_x");
        gru_h_[g].collect(r, prefix + ".gru." + gates[g] + "_h");
      }
    }
  }

  Var<S>& cls_token() { return cls_; }
  Var<S>& pos_embed() { return pos_; }
  LayerNorm<S>& norm1() { return norm1_; }
  LayerNorm<S>& norm2() { return norm2_; }
  Linear<S>& query() { return query_; }
  Linear<S>& key() { return key_; }
  Linear<S>& value() { return value_; }
  Linear<S>& proj() { return proj_; }
  Linear<S>& ffn1() { return ffn1_; }
  Linear<S>& ffn2() { return ffn2_; }

 private:
  // Gated recurrent cell over the K tokens; returns the final state.
  Var<S> recurrent(const Var<S>& tokens, std::size_t b) {
    const std::size_t k = cfg_.segments;
    Var<S> h(Tensor<S>(b, cfg_.token_dim));
    for (std::size_t t = 0; t < k; ++t) {
      std::vector<std::size_t> rows;
      for (std::size_t s = 0; s < b; ++s) rows.push_back(s * k + t);
      Var<S> x = ops::gather_rows(tokens, rows);
      Var<S> z = ops::sigmoid(ops::add(gru_x_[0](x), gru_h_[0](h)));
      Var<S> r = ops::sigmoid(ops::add(gru_x_[1](x), gru_h_[1](h)));
      Var<S> n = ops::tanh(ops::add(gru_x_[2](x), ops::mul(r, gru_h_[2](h))));
      // h' = (1 - z) * n + z * h
      h = ops::add(ops::mul(ops::affine(z, S(-1), S(1)), n), ops::mul(z, h));
    }
    return h;
  }

  S2tmConfig cfg_;
  Mlp<S> token_map_;
  Var<S> cls_, pos_;
  LayerNorm<S> norm1_, norm2_;
  Linear<S> query_, key_, value_, proj_, ffn1_, ffn2_;
  std::array<Linear<S>, 3> gru_x_, gru_h_;
};

/// Pooling head: FC -> BN -> ReLU -> dropout (twice), then FC to classes.
template <class S>
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t in, const std::array<std::size_t, 2>& dims, std::size_t classes,
                 double dropout, Rng& rng)
      : fc1_({in, dims[0]}, rng, true), fc2_({dims[0], dims[1]}, rng, true),
        fc3_(dims[1], classes, rng), dropout_(dropout) {}

  Var<S> operator()(const Var<S>& x, const ForwardContext& ctx) {
    Var<S> h = ops::dropout(fc1_(x, ctx), dropout_, ctx.training, mix_seed(ctx.seed, 101));
    h = ops::dropout(fc2_(h, ctx), dropout_, ctx.training, mix_seed(ctx.seed, 102));
    return fc3_(h);
  }

  std::uint64_t macs() const { return fc1_.macs(1) + fc2_.macs(1) + fc3_.in() * fc3_.out(); }

  void collect(Registry<S>& r, const std::string& prefix) {
    fc1_.collect(r, prefix + ".fc1");
    fc2_.collect(r, prefix + ".fc2");
    fc3_.collect(r, prefix + ".fc3");
  }

 private:
  Mlp<S> fc1_, fc2_;
  Linear<S> fc3_;
  double dropout_ = 0.5;
};

struct LayerInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t in = 0;
  std::size_t out = 0;
  std::uint64_t macs = 0;
};

/// Object classifier (encoder + pooling head) or action recognizer
/// (weight-shared encoder per segment + temporal module + one FC layer).
template <class S>
class EvstrModel {
 public:
  EvstrModel(const ModelConfig& cfg, std::size_t patch_size, std::uint64_t seed)
      : cfg_(cfg), patch_size_(patch_size) {
    if (cfg.num_classes < 2) throw ConfigError("need at least 2 classes");
    Rng rng(seed);
    encoder_ = Encoder<S>(cfg.encoder, patch_size, rng);
    if (cfg.task == Task::object) {
      head_ = ClassifierHead<S>(2 * cfg.encoder.dim, cfg.head_dims, cfg.num_classes, cfg.dropout, rng);
    } else {
      s2tm_ = S2tm<S>(cfg.s2tm, 2 * cfg.encoder.dim, rng);
      action_fc_ = Linear<S>(cfg.s2tm.token_dim, cfg.num_classes, rng);
    }
    encoder_.collect(registry_, "encoder");
    if (cfg.task == Task::object) {
      head_.collect(registry_, "head");
    } else {
      s2tm_.collect(registry_, "s2tm");
      action_fc_.collect(registry_, "classifier");
    }
  }

  EvstrModel(const EvstrModel&) = delete;
  EvstrModel& operator=(const EvstrModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t patch_size() const { return patch_size_; }
  Registry<S>& registry() { return registry_; }
  const Registry<S>& registry() const { return registry_; }
  Encoder<S>& encoder() { return encoder_; }
  S2tm<S>& s2tm() { return s2tm_; }

  /// Logits for a batch. `sets` holds K voxel sets per sample, sample-major
  /// (K = 1 for the object task).
  Var<S> operator()(std::span<const VoxelSet* const> sets, const ForwardContext& ctx) {
    const std::size_t k = cfg_.segments();
    if (sets.empty() || sets.size() % k != 0)
      throw ConfigError(std::to_string(sets.size()) + " voxel sets do not split into samples of K = " +
                        std::to_string(k) + " segments");
    Var<S> pooled = pool_sets(encoder_(sets, ctx));
    if (cfg_.task == Task::object) return head_(pooled, ctx);
    return action_fc_(s2tm_(pooled, ctx));
  }

  std::size_t count_parameters() const { return registry_.scalar_count(); }

  /// Per-layer MAC breakdown for one sample with N_v voxels per set.
  std::vector<LayerInfo> layer_table(std::size_t num_voxels) const {
    const auto& e = cfg_.encoder;
    const auto rows = encoder_row_counts(num_voxels, e.sample_rate);
    const std::uint64_t k = cfg_.segments();
    auto& enc = const_cast<Encoder<S>&>(encoder_);
    std::vector<LayerInfo> t;
    t.push_back({"voxel_mlp", rows[0], patch_size_, e.feature_dim, k * enc.voxel_mlp().macs(rows[0])});
    std::size_t in = e.feature_dim;
    for (int i = 0; i < 3; ++i) {
      t.push_back({"mnel" + std::to_string(i + 1), rows[i], in, e.mnel_dims[i],
                   k * enc.mnel(i).macs(rows[i])});
      in = e.mnel_dims[i];
    }
    for (int i = 0; i < 2; ++i)
      t.push_back({"vsal" + std::to_string(i + 1), rows[3 + i], e.dim, e.dim,
                   k * enc.vsal(i).macs(rows[3 + i])});
    t.push_back({"fusion", rows[4], 2 * e.dim, e.dim, k * enc.fusion().macs(rows[4])});
    if (cfg_.task == Task::object) {
      t.push_back({"head", 1, 2 * e.dim, cfg_.num_classes, head_.macs()});
    } else {
      t.push_back({"s2tm", cfg_.s2tm.segments, 2 * e.dim, cfg_.s2tm.token_dim,
                   s2tm_.macs(2 * e.dim)});
      t.push_back({"classifier", 1, cfg_.s2tm.token_dim, cfg_.num_classes,
                   std::uint64_t{cfg_.s2tm.token_dim} * cfg_.num_classes});
    }
    return t;
  }

  /// Multiply-accumulates of one forward pass: every linear map counts
  /// rows * in * out, attention counts n^2 * (d_k + d_v) per head, and the
  /// neighbour re-weighting counts one MAC per neighbour, channel and
  /// subspace. Normalization and activations are ignored.
  std::uint64_t estimate_macs(std::size_t num_voxels) const {
    std::uint64_t total = 0;
    for (const auto& l : layer_table(num_voxels)) total += l.macs;
    return total;
  }

 private:
  ModelConfig cfg_;
  std::size_t patch_size_ = 0;
  Encoder<S> encoder_;
  ClassifierHead<S> head_;
  S2tm<S> s2tm_;
  Linear<S> action_fc_;
  Registry<S> registry_;
};

}  // namespace evstr
