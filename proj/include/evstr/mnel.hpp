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

// Multi-scale neighbour embedding: every voxel attends over its k nearest
// neighbours (self included) in nested distance subspaces, using weights
// that fuse the neighbour's encoded feature with its encoded relative
// position, and adds a projected shortcut of its own feature.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "evstr/layers.hpp"
#include "evstr/set_batch.hpp"

namespace evstr {

/// Exact k nearest neighbours under squared Euclidean distance on rows of
/// `coords` (n x 3). Row i of the result starts with i itself; the other
/// k-1 entries are the closest remaining points ordered by (distance,
/// index). Brute force, O(n^2 log k).
template <class T>
std::vector<std::uint32_t> knn(std::span<const T> coords, std::size_t k) {
  const std::size_t n = coords.size() / 3;
  if (k == 0 || n < k)
    throw ShapeError("knn: need at least " + std::to_string(k) + " voxels, got " + std::to_string(n));
  std::vector<std::uint32_t> out(n * k);
  std::vector<std::pair<double, std::uint32_t>> cand;
  cand.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    const double xi = coords[i * 3], yi = coords[i * 3 + 1], ti = coords[i * 3 + 2];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = xi - coords[j * 3], dy = yi - coords[j * 3 + 1], dt = ti - coords[j * 3 + 2];
      cand.emplace_back(dx * dx + dy * dy + dt * dt, static_cast<std::uint32_t>(j));
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end());
    out[i * k] = static_cast<std::uint32_t>(i);
    for (std::size_t j = 0; j + 1 < k; ++j) out[i * k + j + 1] = cand[j].second;
  }
  return out;
}

/// concat(c_i, c_i - c_j)
template <class T>
std::array<T, 6> relative_relation(std::span<const T, 3> ci, std::span<const T, 3> cj) {
  return {ci[0], ci[1], ci[2], ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]};
}

struct MnelConfig {
  std::size_t in = 32;
  std::size_t out = 64;
  std::size_t neighbors = 24;
  std::size_t subspaces = 3;
  bool multi_scale = true;  // false: one subspace over all neighbours
  bool attentive = true;    // false: channel-wise max pooling per subspace
  bool literal_mlp = false; // true: ReLU after every MLP, including pre-softmax/residual ones

  std::size_t embed() const { return std::max<std::size_t>(1, in / 2); }
  std::size_t effective_subspaces() const { return multi_scale ? subspaces : 1; }
};

template <class S>
class Mnel {
 public:
  Mnel() = default;
  Mnel(const MnelConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.subspaces == 0 || cfg.neighbors % cfg.subspaces != 0)
      throw ConfigError("subspace count must divide the neighbour count");
    const std::size_t de = cfg.embed();
    feature_enc_ = Mlp<S>({cfg.in, de}, rng, true);
    relation_enc_ = Mlp<S>({6, de}, rng, true);
    fuse_ = Mlp<S>({2 * de, de}, rng, cfg.literal_mlp);
    out_ = Mlp<S>({de, cfg.out}, rng, cfg.literal_mlp);
    if (cfg.in != cfg.out) shortcut_ = Mlp<S>({cfg.in, cfg.out}, rng, cfg.literal_mlp);
  }

  const MnelConfig& config() const { return cfg_; }

  /// Global neighbour row indices (R * N_n) for every set in the batch.
  static std::vector<std::size_t> neighbor_rows(const SetBatch<S>& in, std::size_t k) {
    std::vector<std::size_t> rows;
    rows.reserve(in.total_rows() * k);
    for (std::size_t s = 0; s < in.sets(); ++s) {
      const auto local = knn<S>(in.set_coords(s), k);
      for (auto j : local) rows.push_back(in.offsets[s] + j);
    }
    return rows;
  }

  /// (R * N_n) x 6 relation rows, neighbour-major per centre.
  static Tensor<S> relation_rows(const SetBatch<S>& in, const std::vector<std::size_t>& nb,
                                 std::size_t k) {
    Tensor<S> rel(nb.size(), 6);
    for (std::size_t q = 0; q < nb.size(); ++q) {
      const std::size_t i = q / k;
      const auto r = relative_relation<S>(std::span<const S, 3>(in.coords.data() + i * 3, 3),
                                          std::span<const S, 3>(in.coords.data() + nb[q] * 3, 3));
      std::copy(r.begin(), r.end(), rel.data() + q * 6);
    }
    return rel;
  }

  SetBatch<S> operator()(const SetBatch<S>& in, const ForwardContext& ctx,
                         std::vector<std::vector<S>>* scores = nullptr) {
    if (in.features.cols() != cfg_.in)
      throw ShapeError("mnel: expected width " + std::to_string(cfg_.in) + ", got " +
                       std::to_string(in.features.cols()));
    const std::size_t k = cfg_.neighbors;
    const auto nb = neighbor_rows(in, k);
    // The feature encoder is per-neighbour; its linear map commutes with the
    // gather, so it runs on the R unique rows and BN/ReLU run on R * N_n.
    Var<S> f_nb = feature_enc_.finish(ops::gather_rows(feature_enc_.first_linear(in.features), nb), ctx);
    Var<S> weights;
    if (cfg_.attentive) {
      Var<S> rel(relation_rows(in, nb, k));
      Var<S> r_nb = relation_enc_(rel, ctx);
      weights = fuse_(ops::concat_cols(f_nb, r_nb), ctx);
    }
    Var<S> agg = ops::multiscale_aggregate(f_nb, weights, k, cfg_.effective_subspaces(),
                                           cfg_.attentive, scores);
    Var<S> embedded = out_(agg, ctx);
    Var<S> skip = shortcut_.defined() ? shortcut_(in.features, ctx) : in.features;
    SetBatch<S> out;
    out.features = ops::add(embedded, skip);
    out.coords = in.coords;
    out.offsets = in.offsets;
    return out;
  }

  std::uint64_t macs(std::uint64_t rows) const {
    const std::uint64_t k = cfg_.neighbors, de = cfg_.embed();
    std::uint64_t m = feature_enc_.macs(rows);
    if (cfg_.attentive) m += relation_enc_.macs(rows * k) + fuse_.macs(rows * k);
    // Hadamard re-weighting, one multiply-add per neighbour, channel and subspace.
    const std::uint64_t s = cfg_.effective_subspaces();
    std::uint64_t weighted = 0;
    for (std::uint64_t i = 1; i <= s; ++i) weighted += i * k / s;
    m += rows * weighted * de;
    m += out_.macs(rows);
    if (shortcut_.defined()) m += shortcut_.macs(rows);
    return m;
  }

  void collect(Registry<S>& r, const std::string& prefix) {
    feature_enc_.collect(r, prefix + ".feature_enc");
    if (cfg_.attentive) {
      relation_enc_.collect(r, prefix + ".relation_enc");
      fuse_.collect(r, prefix + ".fuse");
    }
    out_.collect(r, prefix + ".out");
    if (shortcut_.defined()) shortcut_.collect(r, prefix + ".shortcut");
  }

  Mlp<S>& feature_encoder() { return feature_enc_; }
  Mlp<S>& relation_encoder() { return relation_enc_; }
  Mlp<S>& fusion() { return fuse_; }
  Mlp<S>& output() { return out_; }
  Mlp<S>& shortcut() { return shortcut_; }

 private:
  MnelConfig cfg_;
  Mlp<S> feature_enc_, relation_enc_, fuse_, out_, shortcut_;
};

}  // namespace evstr
