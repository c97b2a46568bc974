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


#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "evstr/voxelizer.hpp"

namespace evstr {
namespace {

EventStream make_stream(std::vector<Event> ev, std::uint16_t w = 20, std::uint16_t h = 20) {
  EventStream s;
  s.width = w;
  s.height = h;
  s.events = std::move(ev);
  return s;
}

RawVoxel raw_voxel(GridCoord c, std::size_t count) {
  RawVoxel v;
  v.coord = c;
  for (std::size_t i = 0; i < count; ++i) v.events.push_back({0, 0, 1.0, 1});
  return v;
}

TEST(NormalizeTime, LinearMap) {
  const auto n = normalize_time(make_stream({{0, 0, 100, 1}, {0, 0, 200, 1}, {0, 0, 300, 1}}), 4.0);
  ASSERT_EQ(n.size(), 3u);
  EXPECT_DOUBLE_EQ(n[0].t, 0.0);
  EXPECT_DOUBLE_EQ(n[1].t, 2.0);
  EXPECT_DOUBLE_EQ(n[2].t, 4.0);
}

TEST(NormalizeTime, EndpointsMapToZeroAndT) {
  const auto n = normalize_time(make_stream({{0, 0, 0, 1}, {0, 0, 10, -1}}), 8.0);
  EXPECT_DOUBLE_EQ(n.front().t, 0.0);
  EXPECT_DOUBLE_EQ(n.back().t, 8.0);
  EXPECT_EQ(n.back().p, -1);
}

TEST(NormalizeTime, InvariantToAffineTimeChange) {
  Rng rng(9);
  std::vector<Event> a, b;
  std::uint64_t t = 0;
  for (int i = 0; i < 200; ++i) {
    t += rng.index(50);
    a.push_back({1, 2, t, 1});
    b.push_back({1, 2, 3 * t + 12345, 1});
  }
  const auto na = normalize_time(make_stream(a), 8.0);
  const auto nb = normalize_time(make_stream(b), 8.0);
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_NEAR(na[i].t, nb[i].t, 1e-12);
}

TEST(NormalizeTime, ZeroDurationIsDegenerate) {
  EXPECT_THROW(normalize_time(make_stream({{0, 0, 5, 1}, {1, 1, 5, 1}}), 4.0), DegenerateError);
  EXPECT_THROW(normalize_time(make_stream({}), 4.0), EmptyStreamError);
}

TEST(VoxelGrid, FloorDivision) {
  VoxelGridConfig cfg;
  const std::vector<NormalizedEvent> ev{{12, 7, 0.3, 1}};
  const auto grid = build_voxel_grid(ev, cfg);
  ASSERT_EQ(grid.size(), 1u);
  EXPECT_EQ(grid[0].coord, (GridCoord{1, 0, 0}));
}

TEST(VoxelGrid, EndOfWindowClampsToLastBin) {
  VoxelGridConfig cfg;
  cfg.compensation = 4.0;
  const std::vector<NormalizedEvent> ev{{0, 0, 4.0, 1}, {0, 0, 3.999, 1}};
  const auto grid = build_voxel_grid(ev, cfg);
  ASSERT_EQ(grid.size(), 1u);
  EXPECT_EQ(grid[0].coord[2], 3);
  EXPECT_EQ(grid[0].count(), 2u);
}

TEST(VoxelGrid, ConservesEventsAndIsSorted) {
  SceneConfig sc;
  sc.seed = 11;
  sc.width = 60;
  sc.height = 40;
  const auto stream = synthesize_stream(sc);
  VoxelGridConfig cfg;
  const auto grid = build_voxel_grid(normalize_time(stream, cfg.compensation), cfg);
  std::size_t total = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    total += grid[i].count();
    if (i) {
      EXPECT_LT(grid[i - 1].coord, grid[i].coord);
    }
    for (const auto& e : grid[i].events) EXPECT_EQ(voxel_of(e, cfg), grid[i].coord);
  }
  EXPECT_EQ(total, stream.size());
}

TEST(IntegratePatch, SignedTimestampSum) {
  VoxelGridConfig cfg;
  RawVoxel v;
  v.events = {{13, 4, 0.5, 1}, {13, 4, 0.7, -1}};
  const auto patch = integrate_patch(v, cfg);
  ASSERT_EQ(patch.size(), 100u);
  for (std::size_t i = 0; i < patch.size(); ++i) {
    if (i == 4 * 10 + 3)
      EXPECT_NEAR(patch[i], -0.2f, 1e-6f);
    else
      EXPECT_EQ(patch[i], 0.0f);
  }
}

TEST(IntegratePatch, ZeroTimestampGivesZeroPatch) {
  VoxelGridConfig cfg;
  RawVoxel v;
  v.events = {{1, 1, 0.0, 1}};
  const auto patch = integrate_patch(v, cfg);
  EXPECT_TRUE(std::all_of(patch.begin(), patch.end(), [](float f) { return f == 0.0f; }));
}

// Brute force: for every pixel of every voxel, scan the whole stream.
TEST(IntegratePatch, MatchesPerPixelScan) {
  SceneConfig sc;
  sc.shape = ShapeKind::square;
  sc.motion = MotionKind::expand;
  sc.seed = 5;
  sc.width = sc.height = 40;
  VoxelGridConfig cfg;
  cfg.voxel_h = 4;
  cfg.voxel_w = 5;
  cfg.voxel_t = 0.5;
  const auto n = normalize_time(synthesize_stream(sc), cfg.compensation);
  for (const auto& v : build_voxel_grid(n, cfg)) {
    const auto patch = integrate_patch(v, cfg);
    for (int ly = 0; ly < cfg.voxel_h; ++ly)
      for (int lx = 0; lx < cfg.voxel_w; ++lx) {
        double expect = 0.0;
        for (const auto& e : n) {
          const int bin = std::min(static_cast<int>(e.t / cfg.voxel_t), cfg.temporal_bins() - 1);
          if (e.x == v.coord[0] * cfg.voxel_w + lx && e.y == v.coord[1] * cfg.voxel_h + ly &&
              bin == v.coord[2])
            expect += e.p * e.t;
        }
        ASSERT_NEAR(patch[ly * cfg.voxel_w + lx], expect, 1e-4 * std::max(1.0, std::abs(expect)));
      }
  }
}

TEST(SelectVoxels, KeepsDensest) {
  VoxelGridConfig cfg;
  cfg.num_voxels = 2;
  const std::vector<RawVoxel> raw{raw_voxel({0, 0, 0}, 5), raw_voxel({1, 0, 0}, 9),
                                  raw_voxel({2, 0, 0}, 1)};
  const auto set = select_voxels(raw, cfg, 0);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.counts, (std::vector<std::uint32_t>{9, 5}));
  EXPECT_EQ(set.coords[0], 1.0f);
  EXPECT_EQ(set.coords[3], 0.0f);
}

TEST(SelectVoxels, ExactCountKeepsAllByDescendingCount) {
  VoxelGridConfig cfg;
  cfg.num_voxels = 3;
  const std::vector<RawVoxel> raw{raw_voxel({0, 0, 0}, 2), raw_voxel({1, 0, 0}, 7),
                                  raw_voxel({0, 1, 0}, 2)};
  const auto set = select_voxels(raw, cfg, 0);
  EXPECT_EQ(set.counts, (std::vector<std::uint32_t>{7, 2, 2}));
  // Equal counts fall back to ascending coordinate.
  EXPECT_EQ(set.coords[3], 0.0f);
  EXPECT_EQ(set.coords[4], 0.0f);
  EXPECT_EQ(set.coords[7], 1.0f);
}

TEST(SelectVoxels, PadsWithCopiesOfRealVoxels) {
  VoxelGridConfig cfg;
  cfg.num_voxels = 512;
  std::vector<RawVoxel> raw;
  for (int i = 0; i < 300; ++i) raw.push_back(raw_voxel({i % 20, i / 20, 0}, 1 + i % 7));
  const auto a = select_voxels(raw, cfg, 77);
  const auto b = select_voxels(raw, cfg, 77);
  ASSERT_EQ(a.size(), 512u);
  EXPECT_EQ(a, b);
  std::set<std::array<float, 3>> real, seen;
  for (const auto& v : raw) real.insert({float(v.coord[0]), float(v.coord[1]), float(v.coord[2])});
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::array<float, 3> c{a.coords[3 * i], a.coords[3 * i + 1], a.coords[3 * i + 2]};
    EXPECT_TRUE(real.count(c));
    seen.insert(c);
  }
  EXPECT_EQ(seen.size(), 300u);
  EXPECT_NE(select_voxels(raw, cfg, 78), a);
}

TEST(Voxelize, GeometryMustDivide) {
  VoxelGridConfig cfg;
  EXPECT_THROW(voxelize(make_stream({{0, 0, 0, 1}, {1, 1, 5, 1}}, 25, 20), cfg, 0), ConfigError);
}

TEST(Voxelize, FixedSizeOutput) {
  SceneConfig sc;
  sc.seed = 2;
  VoxelGridConfig cfg;
  cfg.voxel_h = cfg.voxel_w = 4;
  cfg.num_voxels = 512;
  const auto stream = synthesize_stream(sc);
  const auto set = voxelize(stream, cfg, 1);
  EXPECT_EQ(set.size(), 512u);
  EXPECT_EQ(set.patch_size, 16u);
  EXPECT_EQ(set.coords.size(), 512u * 3);
  EXPECT_EQ(set.patches.size(), 512u * 16);
}

TEST(Downsample, FullRateIsIdentity) {
  const auto idx = downsample_indices(100, 1.0, 3);
  ASSERT_EQ(idx.size(), 100u);
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
}

TEST(Downsample, RowCountAndDistinctRows) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto idx = downsample_indices(1024, 0.75, seed);
    ASSERT_EQ(idx.size(), 768u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 768u);
    EXPECT_LT(idx.back(), 1024u);
  }
  EXPECT_EQ(downsample_indices(512, 0.75, 0).size(), 384u);
  EXPECT_NE(downsample_indices(1024, 0.75, 0), downsample_indices(1024, 0.75, 1));
}

TEST(Downsample, RejectsBadRate) {
  EXPECT_THROW(downsample_indices(10, 0.0, 0), ConfigError);
  EXPECT_THROW(downsample_indices(10, 1.5, 0), ConfigError);
  EXPECT_THROW(downsample_indices(1, 0.5, 0), ShapeError);
}

TEST(Downsample, KeepsRowsPaired) {
  std::vector<double> coords, feats;
  for (int i = 0; i < 40; ++i) {
    coords.insert(coords.end(), {double(i), double(2 * i), double(3 * i)});
    feats.insert(feats.end(), {double(i) + 0.5, double(-i)});
  }
  const auto [c, f] = random_downsample<double>(coords, feats, 2, 0.75, 12);
  ASSERT_EQ(c.size(), 30u * 3);
  ASSERT_EQ(f.size(), 30u * 2);
  for (std::size_t r = 0; r < 30; ++r) {
    EXPECT_EQ(c[3 * r + 1], 2 * c[3 * r]);
    EXPECT_EQ(f[2 * r], c[3 * r] + 0.5);
    EXPECT_EQ(f[2 * r + 1], -c[3 * r]);
  }
}

TEST(VoxelFile, RoundTripIsExact) {
  SceneConfig sc;
  sc.seed = 8;
  VoxelGridConfig cfg;
  cfg.voxel_h = cfg.voxel_w = 8;
  cfg.num_voxels = 64;
  const auto set = voxelize(synthesize_stream(sc), cfg, 4);
  const auto bytes = write_voxel_set(set);
  EXPECT_EQ(bytes.size(), 12 + 64 * (3 + 64 + 1) * 4u);
  EXPECT_EQ(read_voxel_set(bytes), set);
  auto bad = bytes;
  bad.pop_back();
  EXPECT_THROW(read_voxel_set(bad), ParseError);
}

}  // namespace
}  // namespace evstr
