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
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evstr/common.hpp"
#include "evstr/event_io.hpp"

namespace evstr {

struct VoxelGridConfig {
  int voxel_h = 10;
  int voxel_w = 10;
  double voxel_t = 1.0;
  double compensation = 4.0;  // T
  std::size_t num_voxels = 1024;

  std::size_t patch_size() const { return static_cast<std::size_t>(voxel_h) * voxel_w; }
  int temporal_bins() const {
    return std::max(1, static_cast<int>(std::ceil(compensation / voxel_t - 1e-9)));
  }

  void validate(std::uint16_t width, std::uint16_t height) const {
    if (voxel_h < 1 || voxel_w < 1 || voxel_t <= 0.0 || num_voxels < 1 || compensation <= 0.0)
      throw ConfigError("voxel sizes, voxel count and T must be positive");
    if (width % voxel_w != 0 || height % voxel_h != 0)
      throw ConfigError("sensor " + std::to_string(width) + "x" + std::to_string(height) +
                        " is not divisible by voxel size " + std::to_string(voxel_w) + "x" +
                        std::to_string(voxel_h));
  }
};

struct NormalizedEvent {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  double t = 0.0;  // in [0, T]
  int p = 1;
};

/// Maps timestamps affinely onto [0, T].
inline std::vector<NormalizedEvent> normalize_time(const EventStream& stream, double compensation) {
  if (stream.empty()) throw EmptyStreamError("cannot normalize an empty stream");
  const std::uint64_t t1 = stream.first_time();
  const std::uint64_t tm = stream.last_time();
  if (tm <= t1) throw DegenerateError("stream has zero duration (t_M == t_1)");
  const double span = static_cast<double>(tm - t1);
  std::vector<NormalizedEvent> out;
  out.reserve(stream.size());
  for (const Event& e : stream.events)
    out.push_back({e.x, e.y, compensation * static_cast<double>(e.t - t1) / span, e.p});
  return out;
}

using GridCoord = std::array<int, 3>;  // (x^c, y^c, t^c)

struct RawVoxel {
  GridCoord coord{};
  std::vector<NormalizedEvent> events;  // stream order

  std::size_t count() const { return events.size(); }
};

inline GridCoord voxel_of(const NormalizedEvent& e, const VoxelGridConfig& cfg) {
  const int bins = cfg.temporal_bins();
  const int tc = std::min(static_cast<int>(std::floor(e.t / cfg.voxel_t)), bins - 1);
  return {e.x / cfg.voxel_w, e.y / cfg.voxel_h, std::max(tc, 0)};
}

/// Bins events into grid cells; returns the non-empty cells in ascending
/// coordinate order.
inline std::vector<RawVoxel> build_voxel_grid(std::span<const NormalizedEvent> events,
                                              const VoxelGridConfig& cfg) {
  std::map<GridCoord, RawVoxel> cells;
  for (const auto& e : events) {
    const GridCoord c = voxel_of(e, cfg);
    auto [it, inserted] = cells.try_emplace(c);
    if (inserted) it->second.coord = c;
    it->second.events.push_back(e);
  }
  std::vector<RawVoxel> out;
  out.reserve(cells.size());
  for (auto& [c, v] : cells) out.push_back(std::move(v));
  return out;
}

/// Accumulates p*t* per local pixel; result is row-major H_v x W_v.
inline std::vector<float> integrate_patch(const RawVoxel& voxel, const VoxelGridConfig& cfg) {
  std::vector<double> acc(cfg.patch_size(), 0.0);
  for (const auto& e : voxel.events) {
    const int lx = e.x % cfg.voxel_w;
    const int ly = e.y % cfg.voxel_h;
    acc[static_cast<std::size_t>(ly) * cfg.voxel_w + lx] += e.p * e.t;
  }
  return std::vector<float>(acc.begin(), acc.end());
}

/// Fixed-size voxel set: coordinates, flattened patches and event counts.
struct VoxelSet {
  std::size_t patch_size = 0;
  std::vector<float> coords;   // N x 3
  std::vector<float> patches;  // N x patch_size
  std::vector<std::uint32_t> counts;

  std::size_t size() const { return counts.size(); }

  friend bool operator==(const VoxelSet&, const VoxelSet&) = default;
};

/// Keeps the N_v densest voxels (ties by ascending coordinate). When fewer
/// exist, every voxel is kept and the set is padded with seeded uniform
/// re-draws of kept voxels.
inline VoxelSet select_voxels(const std::vector<RawVoxel>& raw, const VoxelGridConfig& cfg,
                              std::uint64_t seed) {
  if (raw.empty()) throw EmptyStreamError("no non-empty voxels to select from");
  std::vector<std::size_t> order(raw.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (raw[a].count() != raw[b].count()) return raw[a].count() > raw[b].count();
    return raw[a].coord < raw[b].coord;
  });
  const std::size_t n = cfg.num_voxels;
  if (order.size() > n) order.resize(n);
  const std::size_t kept = order.size();
  Rng rng(seed);
  while (order.size() < n) order.push_back(order[rng.index(kept)]);

  VoxelSet set;
  set.patch_size = cfg.patch_size();
  set.coords.reserve(n * 3);
  set.patches.reserve(n * set.patch_size);
  for (std::size_t i : order) {
    const RawVoxel& v = raw[i];
    for (int c : v.coord) set.coords.push_back(static_cast<float>(c));
    const auto patch = integrate_patch(v, cfg);
    set.patches.insert(set.patches.end(), patch.begin(), patch.end());
    set.counts.push_back(static_cast<std::uint32_t>(v.count()));
  }
  return set;
}

/// Full conversion: normalize, bin, integrate and select.
inline VoxelSet voxelize(const EventStream& stream, const VoxelGridConfig& cfg, std::uint64_t seed) {
  cfg.validate(stream.width, stream.height);
  const auto normalized = normalize_time(stream, cfg.compensation);
  return select_voxels(build_voxel_grid(normalized, cfg), cfg, seed);
}

/// Row indices kept by a random downsampling stage with rate U.
inline std::vector<std::size_t> downsample_indices(std::size_t n, double rate, std::uint64_t seed) {
  if (rate <= 0.0 || rate > 1.0) throw ConfigError("sampling rate must be in (0, 1]");
  const std::size_t count = sampled_count(n, rate);
  if (count < 1) throw ShapeError("sampling " + std::to_string(n) + " rows at rate " +
                                  std::to_string(rate) + " leaves no rows");
  return sample_without_replacement(n, count, seed);
}

/// Row-paired uniform sampling of coordinates (N x 3) and features (N x D).
template <class T>
std::pair<std::vector<T>, std::vector<T>> random_downsample(std::span<const T> coords,
                                                            std::span<const T> features,
                                                            std::size_t width, double rate,
                                                            std::uint64_t seed) {
  const std::size_t n = coords.size() / 3;
  if (features.size() != n * width) throw ShapeError("coords/features row count mismatch");
  const auto idx = downsample_indices(n, rate, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  out.first.reserve(idx.size() * 3);
  out.second.reserve(idx.size() * width);
  for (std::size_t i : idx) {
    out.first.insert(out.first.end(), coords.begin() + i * 3, coords.begin() + i * 3 + 3);
    out.second.insert(out.second.end(), features.begin() + i * width,
                      features.begin() + (i + 1) * width);
  }
  return out;
}

// EVX1 dump: magic, u32 N_v, u32 patch length, then per voxel 3 x f32
// coords, patch f32 values, u32 count. All little-endian.
inline constexpr char kVoxelMagic[4] = {'E', 'V', 'X', '1'};

inline std::vector<std::uint8_t> write_voxel_set(const VoxelSet& set) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kVoxelMagic), std::end(kVoxelMagic));
  auto put_u32 = [&](std::uint32_t v) { detail::put_le<std::uint32_t>(out, v); };
  auto put_f32 = [&](float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(bits);
  };
  put_u32(static_cast<std::uint32_t>(set.size()));
  put_u32(static_cast<std::uint32_t>(set.patch_size));
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (int c = 0; c < 3; ++c) put_f32(set.coords[i * 3 + c]);
    for (std::size_t k = 0; k < set.patch_size; ++k) put_f32(set.patches[i * set.patch_size + k]);
    put_u32(set.counts[i]);
  }
  return out;
}

inline VoxelSet read_voxel_set(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kVoxelMagic, 4) != 0)
    throw ParseError("offset 0: missing EVX1 header");
  VoxelSet set;
  const std::uint32_t n = detail::get_le<std::uint32_t>(bytes, 4);
  set.patch_size = detail::get_le<std::uint32_t>(bytes, 8);
  const std::size_t record = (3 + set.patch_size + 1) * 4;
  if (bytes.size() != 12 + n * record) throw ParseError("EVX1 payload size does not match header");
  auto get_f32 = [&](std::size_t off) {
    const std::uint32_t bits = detail::get_le<std::uint32_t>(bytes, off);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  };
  std::size_t off = 12;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c, off += 4) set.coords.push_back(get_f32(off));
    for (std::size_t k = 0; k < set.patch_size; ++k, off += 4) set.patches.push_back(get_f32(off));
    set.counts.push_back(detail::get_le<std::uint32_t>(bytes, off));
    off += 4;
  }
  return set;
}

}  // namespace evstr
