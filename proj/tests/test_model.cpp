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
#include <cmath>
#include <numeric>
#include <random>

#include "evstr/checkpoint.hpp"
#include "evstr/grad_check.hpp"
#include "evstr/model.hpp"

namespace evstr {
namespace {

using Vec = std::vector<double>;

VoxelSet random_set(std::size_t n, std::size_t patch, Rng& rng) {
  VoxelSet s;
  s.patch_size = patch;
  for (std::size_t i = 0; i < n; ++i) {
    // Distinct coordinates, jittered off the grid so no distances tie.
    s.coords.push_back(static_cast<float>(i % 8 + rng.uniform(0.0, 0.3)));
    s.coords.push_back(static_cast<float>(i / 8 % 8 + rng.uniform(0.0, 0.3)));
    s.coords.push_back(static_cast<float>(i / 64 + rng.uniform(0.0, 0.3)));
    for (std::size_t k = 0; k < patch; ++k) s.patches.push_back(static_cast<float>(rng.normal()));
    s.counts.push_back(1);
  }
  return s;
}

std::vector<const VoxelSet*> ptrs(const std::vector<VoxelSet>& v) {
  std::vector<const VoxelSet*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

ModelConfig small_config(Task task) {
  ModelConfig m;
  m.task = task;
  m.num_classes = 4;
  m.encoder.feature_dim = 8;
  m.encoder.mnel_dims = {8, 8, 16};
  m.encoder.dim = 16;
  m.encoder.neighbors = 6;
  m.encoder.vsal_mlp_hidden = 32;
  m.head_dims = {24, 12};
  m.s2tm.segments = 3;
  m.s2tm.token_dim = 16;
  m.s2tm.heads = 2;
  m.s2tm.head_dim = 8;
  m.s2tm.ffn_dim = 20;
  return m;
}

Tensor<double> random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor<double> t(r, c);
  for (auto& v : t.vec()) v = rng.normal(0.0, scale);
  return t;
}

// --- Independent parameter and MAC counts --------------------------------

std::uint64_t linear_params(std::uint64_t i, std::uint64_t o, bool bias = true) { return i * o + (bias ? o : 0); }
std::uint64_t stage_params(std::uint64_t i, std::uint64_t o) { return linear_params(i, o) + 2 * o; }

std::uint64_t mnel_params(std::uint64_t in, std::uint64_t out) {
  const std::uint64_t de = in / 2;
  return stage_params(in, de) + stage_params(6, de) + stage_params(2 * de, de) + stage_params(de, out) +
         (in != out ? stage_params(in, out) : 0);
}

std::uint64_t vsal_params(std::uint64_t d, std::uint64_t hidden) {
  return stage_params(3, d) + 2 * d * (d / 4) + d * d + stage_params(6, d / 4) + linear_params(d / 4, 1) +
         stage_params(d, hidden) + stage_params(hidden, d);
}

std::uint64_t encoder_params(const ModelConfig& m, std::uint64_t patch) {
  const auto& e = m.encoder;
  return stage_params(patch, e.feature_dim) + mnel_params(e.feature_dim, e.mnel_dims[0]) +
         mnel_params(e.mnel_dims[0], e.mnel_dims[1]) + mnel_params(e.mnel_dims[1], e.mnel_dims[2]) +
         2 * vsal_params(e.dim, e.vsal_mlp_hidden) + stage_params(2 * e.dim, e.dim);
}

TEST(RowCounts, FollowIteratedFloor) {
  EXPECT_EQ(encoder_row_counts(1024, 0.75), (std::array<std::size_t, 5>{1024, 768, 576, 432, 432}));
  EXPECT_EQ(encoder_row_counts(512, 0.75), (std::array<std::size_t, 5>{512, 384, 288, 216, 216}));
  EXPECT_EQ(encoder_row_counts(100, 0.5), (std::array<std::size_t, 5>{100, 50, 25, 12, 12}));
}

TEST(Encoder, ObservedRowCountsAndOutputShape) {
  ModelConfig m;  // full-width defaults
  Rng rng(1);
  Encoder<float> enc(m.encoder, 100, rng);
  const std::vector<VoxelSet> sets{random_set(1024, 100, rng)};
  std::vector<std::size_t> rows;
  const auto out = enc(ptrs(sets), {false, 0}, &rows);
  EXPECT_EQ(rows, (std::vector<std::size_t>{1024, 768, 576, 432, 432}));
  EXPECT_EQ(out.features.value().shape(), (std::vector<std::size_t>{432, 128}));
}

TEST(Encoder, VoxelFeatureWidthAndZeroInput) {
  ModelConfig m;
  Rng rng(2);
  Encoder<double> enc(m.encoder, 100, rng);
  for (auto& l : enc.voxel_mlp().linears) l.bias.mutable_value().fill(0.0);
  const auto f = enc.encode_voxel_features(Var<double>(Tensor<double>(5, 100)), {true, 0}).value();
  EXPECT_EQ(f.shape(), (std::vector<std::size_t>{5, 32}));
  for (double v : f.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(enc.encode_voxel_features(Var<double>(Tensor<double>(5, 64)), {true, 0}), ShapeError);
}

TEST(Encoder, LastMnelWidthMustMatchAttentionWidth) {
  ModelConfig m;
  m.encoder.mnel_dims = {64, 64, 96};
  Rng rng(3);
  EXPECT_THROW(Encoder<float>(m.encoder, 100, rng), ConfigError);
}

TEST(Pooling, ConstantRowsGiveDuplicatedHalves) {
  SetBatch<double> b;
  Tensor<double> f(6, 3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) f(i, j) = i < 4 ? double(j) - 1.5 : 7.0;
  b.features = Var<double>(f);
  b.offsets = {0, 4, 6};
  const auto p = pool_sets(b).value();
  ASSERT_EQ(p.shape(), (std::vector<std::size_t>{2, 6}));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(p(s, j), p(s, j + 3));
}

TEST(ObjectModel, HeadIsInvariantToRowOrderOfEncodedSet) {
  const ModelConfig m = small_config(Task::object);
  Rng rng(4);
  ClassifierHead<double> head(2 * m.encoder.dim, m.head_dims, m.num_classes, m.dropout, rng);
  const auto a = random_tensor(20, 16, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  SetBatch<double> x, xp;
  x.features = Var<double>(a);
  x.offsets = {0, 20};
  xp.features = ops::gather_rows(Var<double>(a), perm);
  xp.offsets = {0, 20};
  const auto y = head(pool_sets(x), {false, 0}).value();
  const auto yp = head(pool_sets(xp), {false, 0}).value();
  ASSERT_EQ(y.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], yp[i], 1e-5);
}

TEST(ObjectModel, LogitsShapeAndDropoutOnlyInTraining) {
  const ModelConfig m = small_config(Task::object);
  EvstrModel<float> model(m, 16, 5);
  Rng rng(5);
  const std::vector<VoxelSet> sets{random_set(40, 16, rng), random_set(40, 16, rng)};
  const auto e1 = model(ptrs(sets), {false, 1}).value();
  const auto e2 = model(ptrs(sets), {false, 2}).value();
  EXPECT_EQ(e1.shape(), (std::vector<std::size_t>{2, 4}));
  // Eval with U < 1 still samples voxels per seed; with U = 1 it is seed-free.
  ModelConfig full = m;
  full.encoder.sample_rate = 1.0;
  EvstrModel<float> dense(full, 16, 5);
  EXPECT_EQ(dense(ptrs(sets), {false, 1}).value(), dense(ptrs(sets), {false, 2}).value());
  const auto t1 = dense(ptrs(sets), {true, 1}).value();
  EXPECT_EQ(t1, dense(ptrs(sets), {true, 1}).value());
  EXPECT_NE(t1, dense(ptrs(sets), {true, 2}).value());
  (void)e2;
}

TEST(ActionModel, SegmentRowOrderDoesNotMatter) {
  ModelConfig m = small_config(Task::action);
  m.encoder.sample_rate = 1.0;  // sampling would pick different rows
  EvstrModel<double> model(m, 16, 6);
  Rng rng(6);
  std::vector<VoxelSet> sets;
  for (int k = 0; k < 3; ++k) sets.push_back(random_set(30, 16, rng));
  const auto y = model(ptrs(sets), {false, 0}).value();
  VoxelSet& s = sets[1];
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(2));
  VoxelSet p = s;
  for (std::size_t i = 0; i < 30; ++i) {
    std::copy_n(s.coords.begin() + perm[i] * 3, 3, p.coords.begin() + i * 3);
    std::copy_n(s.patches.begin() + perm[i] * 16, 16, p.patches.begin() + i * 16);
  }
  s = p;
  const auto yp = model(ptrs(sets), {false, 0}).value();
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{1, 4}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], yp[i], 1e-5);
}

TEST(ActionModel, SegmentCountMustMatch) {
  const ModelConfig m = small_config(Task::action);
  EvstrModel<float> model(m, 16, 7);
  Rng rng(7);
  std::vector<VoxelSet> sets;
  for (int k = 0; k < 4; ++k) sets.push_back(random_set(30, 16, rng));
  EXPECT_THROW(model(ptrs(sets), {false, 0}), ConfigError);
  sets.resize(6);
  for (auto& s : sets)
    if (s.size() == 0) s = random_set(30, 16, rng);
  EXPECT_EQ(model(ptrs(sets), {false, 0}).value().shape(), (std::vector<std::size_t>{2, 4}));
}

TEST(S2tm, SequenceLengthIsSegmentsPlusOne) {
  for (std::size_t k : {1u, 4u, 6u}) {
    ModelConfig m = small_config(Task::action);
    m.s2tm.segments = k;
    EvstrModel<float> model(m, 16, 8);
    EXPECT_EQ(model.s2tm().pos_embed().value().rows(), k + 1);
    Rng rng(8);
    std::vector<VoxelSet> sets;
    for (std::size_t i = 0; i < k; ++i) sets.push_back(random_set(30, 16, rng));
    EXPECT_EQ(model(ptrs(sets), {false, 0}).value().shape(), (std::vector<std::size_t>{1, 4}));
  }
}

Vec layer_norm_row(const LayerNorm<double>& ln, const Vec& x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  double v = 0;
  for (double a : x) v += (a - m) * (a - m) / x.size();
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = ln.gamma.value()[i] * (x[i] - m) / std::sqrt(v + ln.eps) + ln.beta.value()[i];
  return y;
}

Vec affine_row(const Linear<double>& l, const Vec& x) {
  Vec y(l.out());
  for (std::size_t o = 0; o < l.out(); ++o) {
    y[o] = l.bias.value()[o];
    for (std::size_t i = 0; i < l.in(); ++i) y[o] += x[i] * l.weight.value()(i, o);
  }
  return y;
}

// Class-token transformer layer written out for one sample.
Vec temporal_oracle(S2tm<double>& t, const Tensor<double>& tokens) {
  const auto& cfg = t.config();
  const std::size_t k = cfg.segments, e = cfg.token_dim, h = cfg.heads, dh = cfg.head_dim;
  std::vector<Vec> z(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    z[i].resize(e);
    for (std::size_t j = 0; j < e; ++j)
      z[i][j] = (i == 0 ? t.cls_token().value()[j] : tokens(i - 1, j)) + t.pos_embed().value()(i, j);
  }
  std::vector<Vec> q(k + 1), kk(k + 1), v(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    const Vec n = layer_norm_row(t.norm1(), z[i]);
    q[i] = affine_row(t.query(), n);
    kk[i] = affine_row(t.key(), n);
    v[i] = affine_row(t.value(), n);
  }
  Vec attn(h * dh, 0.0);  // only the class-token query matters
  for (std::size_t hd = 0; hd < h; ++hd) {
    Vec w(k + 1);
    for (std::size_t j = 0; j <= k; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < dh; ++d) dot += q[0][hd * dh + d] * kk[j][hd * dh + d];
      w[j] = std::exp(dot / std::sqrt(double(dh)));
    }
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t j = 0; j <= k; ++j)
      for (std::size_t d = 0; d < dh; ++d) attn[hd * dh + d] += w[j] / s * v[j][hd * dh + d];
  }
  Vec c = z[0];
  const Vec pr = affine_row(t.proj(), attn);
  for (std::size_t j = 0; j < e; ++j) c[j] += pr[j];
  Vec f = affine_row(t.ffn1(), layer_norm_row(t.norm2(), c));
  for (double& a : f) a = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
  const Vec f2 = affine_row(t.ffn2(), f);
  for (std::size_t j = 0; j < e; ++j) c[j] += f2[j];
  return c;
}

TEST(S2tm, AttentionMatchesDirectEvaluation) {
  S2tmConfig cfg;
  cfg.segments = 4;
  cfg.token_dim = 12;
  cfg.heads = 3;
  cfg.head_dim = 5;
  cfg.ffn_dim = 10;
  Rng rng(9);
  S2tm<double> t(cfg, 6, rng);
  for (auto* ln : {&t.norm1()}) {
    for (auto& g : ln->gamma.mutable_value().vec()) g = rng.uniform(0.5, 1.5);
    for (auto& b : ln->beta.mutable_value().vec()) b = rng.normal(0.0, 0.2);
  }
  for (auto& p : t.cls_token().mutable_value().vec()) p = rng.normal();
  const auto tokens = random_tensor(8, 12, rng);  // two samples
  const auto y = t.temporal(Var<double>(tokens)).value();
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{2, 12}));
  for (std::size_t s = 0; s < 2; ++s) {
    Tensor<double> one(4, 12);
    std::copy_n(tokens.data() + s * 48, 48, one.data());
    const Vec ref = temporal_oracle(t, one);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(y(s, j), ref[j], 1e-10);
  }
}

TEST(S2tm, ZeroQueryKeyAndFeedForwardReduceToMeanValue) {
  S2tmConfig cfg;
  cfg.segments = 3;
  cfg.token_dim = 8;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.ffn_dim = 6;
  Rng rng(10);
  S2tm<double> t(cfg, 4, rng);
  for (auto* l : {&t.query(), &t.key(), &t.ffn2()}) {
    l->weight.mutable_value().fill(0.0);
    l->bias.mutable_value().fill(0.0);
  }
  const auto tokens = random_tensor(3, 8, rng);
  const auto y = t.temporal(Var<double>(tokens)).value();
  // Uniform attention: the class token gains proj(mean of values).
  Vec mean_v(8, 0.0);
  for (std::size_t i = 0; i <= 3; ++i) {
    Vec z(8);
    for (std::size_t j = 0; j < 8; ++j)
      z[j] = (i == 0 ? t.cls_token().value()[j] : tokens(i - 1, j)) + t.pos_embed().value()(i, j);
    const Vec v = affine_row(t.value(), layer_norm_row(t.norm1(), z));
    for (std::size_t j = 0; j < 8; ++j) mean_v[j] += v[j] / 4.0;
  }
  const Vec pr = affine_row(t.proj(), mean_v);
  for (std::size_t j = 0; j < 8; ++j)
    EXPECT_NEAR(y[j], t.cls_token().value()[j] + t.pos_embed().value()(0, j) + pr[j], 1e-12);
}

TEST(S2tm, AveragePoolAndRecurrentVariants) {
  S2tmConfig cfg;
  cfg.segments = 3;
  cfg.token_dim = 5;
  Rng rng(11);
  const auto tokens = random_tensor(6, 5, rng);
  cfg.temporal = TemporalKind::avgpool;
  S2tm<double> avg(cfg, 4, rng);
  const auto ya = avg.temporal(Var<double>(tokens)).value();
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_NEAR(ya(s, j), (tokens(3 * s, j) + tokens(3 * s + 1, j) + tokens(3 * s + 2, j)) / 3, 1e-15);
  cfg.temporal = TemporalKind::recurrent;
  S2tm<double> gru(cfg, 4, rng);
  Registry<double> reg;
  gru.collect(reg, "t");
  auto lin = [&](const std::string& name, const Vec& x) {
    const Tensor<double>* w = nullptr;
    const Tensor<double>* b = nullptr;
    for (auto& [n, v] : reg.params) {
      if (n == "t.gru." + name + ".weight") w = &v.value();
      if (n == "t.gru." + name + ".bias") b = &v.value();
    }
    Vec y(5);
    for (std::size_t o = 0; o < 5; ++o) {
      y[o] = (*b)[o];
      for (std::size_t i = 0; i < 5; ++i) y[o] += x[i] * (*w)(i, o);
    }
    return y;
  };
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const auto yr = gru.temporal(Var<double>(tokens)).value();
  for (std::size_t s = 0; s < 2; ++s) {
    Vec h(5, 0.0);
    for (std::size_t t = 0; t < 3; ++t) {
      Vec x(tokens.data() + (3 * s + t) * 5, tokens.data() + (3 * s + t + 1) * 5);
      const Vec zx = lin("update_x", x), zh = lin("update_h", h), rx = lin("reset_x", x),
                rh = lin("reset_h", h), nx = lin("candidate_x", x), nh = lin("candidate_h", h);
      for (std::size_t j = 0; j < 5; ++j) {
        const double z = sig(zx[j] + zh[j]), r = sig(rx[j] + rh[j]);
        const double n = std::tanh(nx[j] + r * nh[j]);
        h[j] = (1 - z) * n + z * h[j];
      }
    }
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(yr(s, j), h[j], 1e-12);
  }
}

TEST(S2tm, GradientsMatchFiniteDifferences) {
  for (auto kind : {TemporalKind::attention, TemporalKind::recurrent, TemporalKind::avgpool}) {
    S2tmConfig cfg;
    cfg.segments = 3;
    cfg.token_dim = 8;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.ffn_dim = 6;
    cfg.temporal = kind;
    Rng rng(12);
    S2tm<double> t(cfg, 6, rng);
    Var<double> pooled(random_tensor(6, 6, rng), true);
    Registry<double> reg;
    reg.param("pooled", pooled);
    t.collect(reg, "s2tm");
    const auto w = random_tensor(2, 8, rng);
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.tol = 1e-3;
    const auto rep = grad_check([&] { return ops::weighted_sum(t(pooled, {true, 0}), w); }, reg, opt);
    EXPECT_TRUE(rep.passed) << to_string(kind) << " " << rep.max_rel_error;
  }
}

TEST(Complexity, ParameterCountMatchesHandCount) {
  for (Task task : {Task::object, Task::action}) {
    const ModelConfig m = small_config(task);
    EvstrModel<float> model(m, 16, 0);
    std::uint64_t expect = encoder_params(m, 16);
    if (task == Task::object) {
      expect += stage_params(32, 24) + stage_params(24, 12) + linear_params(12, 4);
    } else {
      const std::uint64_t e = 16, inner = 16, k = 3;
      expect += stage_params(32, e) + e + (k + 1) * e + 4 * e + 3 * linear_params(e, inner) +
                linear_params(inner, e) + linear_params(e, 20) + linear_params(20, e) + linear_params(e, 4);
    }
    EXPECT_EQ(model.count_parameters(), expect) << to_string(task);
  }
}

TEST(Complexity, SingleLinearLayer) {
  Rng rng(0);
  Registry<float> r;
  Linear<float>(4, 3, rng).collect(r, "l");
  EXPECT_EQ(r.scalar_count(), 15u);
}

TEST(Complexity, MacEstimateMatchesHandCount) {
  ModelConfig m = small_config(Task::object);
  EvstrModel<float> model(m, 16, 0);
  const std::uint64_t nv = 64;
  const auto rows = encoder_row_counts(nv, 0.75);  // 64 48 36 27 27
  auto mnel = [&](std::uint64_t r, std::uint64_t in, std::uint64_t out) {
    const std::uint64_t de = in / 2, k = 6;
    // encoders, fusion, re-weighting over nested subspaces 2+4+6, output, shortcut
    return r * in * de + r * k * 6 * de + r * k * 2 * de * de + r * (2 + 4 + 6) * de + r * de * out +
           (in != out ? r * in * out : 0);
  };
  auto vsal = [&](std::uint64_t n) {
    const std::uint64_t d = 16, dk = 4, db = 4, h = 32;
    return n * 3 * d + n * d * (2 * dk + d) + n * n * 6 * db + n * n * db + n * n * (dk + d) +
           n * d * h + n * h * d;
  };
  const std::uint64_t expect = rows[0] * 16 * 8 + mnel(rows[0], 8, 8) + mnel(rows[1], 8, 8) +
                               mnel(rows[2], 8, 16) + vsal(rows[3]) + vsal(rows[4]) + rows[4] * 32 * 16 +
                               32 * 24 + 24 * 12 + 12 * 4;
  EXPECT_EQ(model.estimate_macs(nv), expect);
}

TEST(Complexity, ReferenceObjectConfigurationIsInBand) {
  ModelConfig m;  // defaults: 101 classes, 10x10 voxels, N_v = 1024
  EvstrModel<float> model(m, 100, 0);
  const auto params = model.count_parameters();
  const auto macs = model.estimate_macs(1024);
  EXPECT_GE(params, 500000u);
  EXPECT_LE(params, 1500000u);
  EXPECT_GE(macs, 100000000u);
  EXPECT_LE(macs, 1000000000u);
  const auto table = model.layer_table(1024);
  ASSERT_GE(table.size(), 6u);
  EXPECT_EQ(table[1].rows, 1024u);
  EXPECT_EQ(table[2].rows, 768u);
  EXPECT_EQ(table[3].rows, 576u);
  EXPECT_EQ(table[4].rows, 432u);
  EXPECT_EQ(table[5].rows, 432u);
}

TEST(Ablations, EveryVariantRunsWithSameContract) {
  Rng rng(13);
  std::vector<VoxelSet> sets;
  for (int i = 0; i < 6; ++i) sets.push_back(random_set(40, 16, rng));
  for (int variant = 0; variant < 9; ++variant) {
    ModelConfig m = small_config(variant < 7 ? Task::action : Task::object);
    switch (variant) {
      case 0: m.encoder.multi_scale = false; break;
      case 1: m.encoder.attentive = false; break;
      case 2: m.encoder.absolute_pe = false; break;
      case 3: m.encoder.relative_bias = false; break;
      case 4: m.s2tm.temporal = TemporalKind::avgpool; break;
      case 5: m.s2tm.temporal = TemporalKind::recurrent; break;
      case 6: m.encoder.literal_mlp = true; break;
      case 7: m.encoder.sqrt_dk_scale = true; break;
      case 8: m.encoder.vsal_mlp_hidden = 0; break;
    }
    EvstrModel<float> model(m, 16, 1);
    const std::size_t samples = 6 / m.segments();
    auto logits = model(ptrs(sets), {true, 3});
    EXPECT_EQ(logits.value().shape(), (std::vector<std::size_t>{samples, 4})) << variant;
    std::vector<int> labels(samples, 1);
    auto loss = ops::cross_entropy(logits, labels);
    EXPECT_TRUE(std::isfinite(loss.value()[0]));
    backward(loss);
    EXPECT_GT(model.estimate_macs(40), 0u);
  }
}

TEST(Checkpoint, ReloadedModelGivesIdenticalLogits) {
  for (Task task : {Task::object, Task::action}) {
    const ModelConfig m = small_config(task);
    EvstrModel<float> a(m, 16, 21);
    Rng rng(14);
    std::vector<VoxelSet> sets;
    for (int i = 0; i < 6; ++i) sets.push_back(random_set(40, 16, rng));
    // A training pass moves the running statistics away from their defaults.
    a(ptrs(sets), {true, 5});
    const auto bytes = encode_checkpoint(snapshot(a.registry(), "x"));
    EvstrModel<float> b(m, 16, 99);
    restore(b.registry(), decode_checkpoint(bytes));
    EXPECT_EQ(a(ptrs(sets), {false, 7}).value(), b(ptrs(sets), {false, 7}).value());
  }
}

TEST(FullModel, GradientsMatchFiniteDifferences) {
  ModelConfig m = small_config(Task::action);
  m.s2tm.segments = 2;
  EvstrModel<double> model(m, 4, 3);
  Rng rng(15);
  std::vector<VoxelSet> sets;
  for (int i = 0; i < 4; ++i) sets.push_back(random_set(32, 4, rng));
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.tol = 1e-3;
  opt.max_coords = 6;
  const auto rep = grad_check(
      [&] { return ops::cross_entropy(model(ptrs(sets), {true, 11}), {0, 3}); }, model.registry(), opt);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

}  // namespace
}  // namespace evstr
