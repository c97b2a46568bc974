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

// Library side of the command-line tool: dataset synthesis, conversion,
// training, evaluation, gradient checks and model reports.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "evstr/checkpoint.hpp"
#include "evstr/config.hpp"
#include "evstr/event_io.hpp"
#include "evstr/grad_check.hpp"
#include "evstr/model.hpp"
#include "evstr/optim.hpp"
#include "evstr/voxelizer.hpp"

namespace evstr {

namespace fs = std::filesystem;

/// Raised when an output would overwrite existing files.
class ExistsError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// synth

struct SynthResult {
  std::size_t files = 0;
  std::string train_manifest;
  std::string test_manifest;
};

inline SynthResult run_synth(const SynthConfig& cfg, const std::string& out_dir, bool force) {
  const fs::path root(out_dir);
  const char* ext = cfg.format == "csv" ? ".csv" : ".bin";
  struct Job {
    std::string rel;
    int label;
    std::uint64_t seed;
  };
  std::vector<Job> jobs[2];
  const char* split_names[2] = {"train", "test"};
  const std::size_t per_class[2] = {cfg.train_per_class, cfg.test_per_class};
  for (int split = 0; split < 2; ++split)
    for (std::size_t c = 0; c < cfg.classes.size(); ++c)
      for (std::size_t i = 0; i < per_class[split]; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%s/c%02zu_%04zu%s", split_names[split], c, i, ext);
        jobs[split].push_back({name, static_cast<int>(c),
                               mix_seed(mix_seed(cfg.seed, split + 1), c * 1000003ULL + i)});
      }
  if (!force) {
    for (const char* m : {"train.txt", "test.txt"})
      if (fs::exists(root / m)) throw ExistsError((root / m).string() + " exists (use --force)");
    for (const auto& split : jobs)
      for (const auto& j : split)
        if (fs::exists(root / j.rel)) throw ExistsError((root / j.rel).string() + " exists (use --force)");
  }
  SynthResult result;
  for (int split = 0; split < 2; ++split) {
    fs::create_directories(root / split_names[split]);
    std::vector<ManifestEntry> entries;
    for (const auto& j : jobs[split]) {
      SceneConfig scene;
      scene.shape = cfg.classes[j.label].first;
      scene.motion = cfg.classes[j.label].second;
      scene.threshold = cfg.threshold;
      scene.duration = cfg.duration;
      scene.timestep = cfg.timestep;
      scene.width = cfg.width;
      scene.height = cfg.height;
      scene.motion_scale = cfg.motion_scale;
      scene.seed = j.seed;
      EventStream stream = synthesize_stream(scene);
      write_file((root / j.rel).string(), write_events(stream, format_from_path(j.rel)));
      entries.push_back({j.rel, j.label});
      ++result.files;
    }
    const auto manifest = (root / (std::string(split_names[split]) + ".txt")).string();
    write_manifest(manifest, entries);
    (split == 0 ? result.train_manifest : result.test_manifest) = manifest;
  }
  return result;
}

// ---------------------------------------------------------------------------
// convert

/// Loads an event file, checking its geometry against a configured sensor
/// size (0 accepts whatever binary files declare).
inline EventStream load_stream_checked(const std::string& path, std::uint16_t width, std::uint16_t height) {
  EventStream s = load_events(path, width, height);
  if ((width && s.width != width) || (height && s.height != height))
    throw ConfigError(path + ": sensor " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                      " does not match configured " + std::to_string(width) + "x" +
                      std::to_string(height));
  return s;
}

inline VoxelSet run_convert(const std::string& events_path, const std::string& out_path,
                            const RunConfig& cfg) {
  const EventStream s = load_stream_checked(events_path, cfg.width, cfg.height);
  cfg.voxel.validate(s.width, s.height);
  VoxelSet set = voxelize(s, cfg.voxel, cfg.seed);
  write_file(out_path, write_voxel_set(set));
  return set;
}

// ---------------------------------------------------------------------------
// datasets

/// Samples of one split. Object samples hold one cached voxel set; action
/// samples hold K event segments that are voxelized on demand.
struct Dataset {
  std::vector<ManifestEntry> entries;  // paths resolved
  std::vector<VoxelSet> voxels;        // object task
  std::vector<std::vector<EventStream>> segments;  // action task
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint64_t split_tag = 0;

  std::size_t size() const { return entries.size(); }
};

namespace detail {
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}
}  // namespace detail

/// Seed of the voxel sampling of segment `k` of sample `i`; `epoch` is 0
/// for evaluation and 1-based for training epochs.
inline std::uint64_t voxel_seed(const RunConfig& cfg, std::uint64_t split_tag, std::size_t epoch,
                                std::size_t i, std::size_t k) {
  return mix_seed(mix_seed(mix_seed(cfg.seed, split_tag), epoch), i * 64 + k);
}

/// Reads a manifest and its event files. For the object task each stream is
/// voxelized once; when `cache_dir` is non-empty the voxel sets are stored
/// there as EVX1 files and reused by later runs with the same settings.
inline Dataset load_dataset(const std::string& manifest, const RunConfig& cfg, std::uint64_t split_tag,
                            const std::string& cache_dir = {}) {
  Dataset ds;
  ds.split_tag = split_tag;
  ds.width = cfg.width;
  ds.height = cfg.height;
  const fs::path base = fs::path(manifest).parent_path();
  ds.entries = read_manifest(manifest);
  if (ds.entries.empty()) throw ParseError(manifest + ": no samples");
  if (!cache_dir.empty()) fs::create_directories(cache_dir);
  const std::string vox_key = "h=" + std::to_string(cfg.voxel.voxel_h) + ",w=" + std::to_string(cfg.voxel.voxel_w) +
                              ",t=" + detail::fmt_double(cfg.voxel.voxel_t) +
                              ",T=" + detail::fmt_double(cfg.voxel.compensation) +
                              ",n=" + std::to_string(cfg.voxel.num_voxels);
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    auto& e = ds.entries[i];
    const fs::path p(e.path);
    e.path = (p.is_absolute() ? p : base / p).string();
    if (e.label >= static_cast<int>(cfg.model.num_classes))
      throw ConfigError(manifest + ": label " + std::to_string(e.label) + " outside the model's " +
                        std::to_string(cfg.model.num_classes) + " classes");
    std::string cache_file;
    if (cfg.model.task == Task::object && !cache_dir.empty()) {
      const std::uint64_t seed = voxel_seed(cfg, split_tag, 0, i, 0);
      char name[48];
      std::snprintf(name, sizeof name, "%016llx.evx1",
                    static_cast<unsigned long long>(detail::fnv1a(
                        e.path + "|" + vox_key + "|" + std::to_string(seed) + "|" +
                        std::to_string(cfg.width) + "x" + std::to_string(cfg.height))));
      cache_file = (fs::path(cache_dir) / name).string();
      if (fs::exists(cache_file)) {
        ds.voxels.push_back(read_voxel_set(read_file(cache_file)));
        continue;
      }
    }
    EventStream s = load_stream_checked(e.path, ds.width, ds.height);
    if (ds.width == 0) {
      ds.width = s.width;
      ds.height = s.height;
    }
    cfg.voxel.validate(s.width, s.height);
    if (cfg.model.task == Task::object) {
      ds.voxels.push_back(voxelize(s, cfg.voxel, voxel_seed(cfg, split_tag, 0, i, 0)));
      if (!cache_file.empty()) write_file(cache_file, write_voxel_set(ds.voxels.back()));
    } else {
      ds.segments.push_back(split_segments(s, cfg.model.s2tm.segments));
    }
  }
  return ds;
}

/// Voxel sets of a batch, K per sample, sample-major.
inline std::vector<VoxelSet> batch_voxels(const Dataset& ds, const RunConfig& cfg,
                                          const std::vector<std::size_t>& idx, std::size_t epoch) {
  std::vector<VoxelSet> out;
  for (std::size_t i : idx) {
    if (cfg.model.task == Task::object) {
      out.push_back(ds.voxels[i]);
    } else {
      for (std::size_t k = 0; k < ds.segments[i].size(); ++k)
        out.push_back(voxelize(ds.segments[i][k], cfg.voxel, voxel_seed(cfg, ds.split_tag, epoch, i, k)));
    }
  }
  return out;
}

inline std::vector<const VoxelSet*> pointers(const std::vector<VoxelSet>& sets) {
  std::vector<const VoxelSet*> p;
  for (const auto& s : sets) p.push_back(&s);
  return p;
}

/// Splits shuffled indices into batches; a trailing batch of one sample is
/// merged into the previous one because batch normalization needs two rows.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                          std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < order.size(); b += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch_size)));
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

inline EvalResult evaluate(EvstrModel<float>& model, const Dataset& ds, const RunConfig& cfg) {
  const std::size_t c = cfg.model.num_classes;
  EvalResult r;
  r.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t correct = 0;
  for (std::size_t b = 0; b < order.size(); b += cfg.eval_batch_size) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.eval_batch_size)));
    const auto sets = batch_voxels(ds, cfg, idx, 0);
    const auto ptrs = pointers(sets);
    ForwardContext ctx{false, mix_seed(cfg.seed, 0xE7A1ULL + b)};
    const Var<float> logits = model(ptrs, ctx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      int best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (logits.value()(i, k) > logits.value()(i, static_cast<std::size_t>(best))) best = static_cast<int>(k);
      const int truth = ds.entries[idx[i]].label;
      r.predictions.push_back(best);
      ++r.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(best)];
      correct += best == truth;
    }
  }
  r.samples = ds.size();
  r.accuracy = ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
  return r;
}

inline std::string confusion_csv(const EvalResult& r) {
  std::string out = "label";
  for (std::size_t k = 0; k < r.confusion.size(); ++k) out += ",pred_" + std::to_string(k);
  out += "\n";
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    out += std::to_string(t);
    for (auto v : r.confusion[t]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// training

inline constexpr std::uint64_t kTrainSplit = 1;
inline constexpr std::uint64_t kTestSplit = 2;

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double test_acc = 0.0;
};

struct TrainSummary {
  std::vector<EpochMetrics> history;
  double best_acc = -1.0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
  EvalResult final_eval;
  std::size_t parameters = 0;
};

inline std::string metrics_header() { return "epoch,lr,train_loss,test_acc\n"; }

inline std::string metrics_row(const EpochMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", m.epoch, m.lr, m.train_loss, m.test_acc);
  return buf;
}

inline void save_checkpoint(const std::string& path, const Registry<float>& reg, RunConfig cfg,
                            std::size_t epochs, double lr) {
  cfg.trained_epochs = epochs;
  cfg.last_lr = lr;
  write_file(path, encode_checkpoint(snapshot(reg, cfg.to_text())));
}

/// Trains on `cfg.train_manifest`, evaluating on `cfg.test_manifest` after
/// every epoch. Writes metrics.csv, best.evck (on every improvement) and
/// last.evck into `out_dir`.
inline TrainSummary run_train(RunConfig cfg, const std::string& out_dir, std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  if (cfg.train_manifest.empty() || cfg.test_manifest.empty())
    throw ConfigError("train_manifest and test_manifest are required");
  fs::create_directories(out_dir);
  const std::string cache = cfg.model.task == Task::object
                                ? (cfg.cache_dir.empty() ? (fs::path(out_dir) / "cache").string() : cfg.cache_dir)
                                : std::string();
  const Dataset train = load_dataset(cfg.train_manifest, cfg, kTrainSplit, cache);
  cfg.width = train.width;
  cfg.height = train.height;
  const Dataset test = load_dataset(cfg.test_manifest, cfg, kTestSplit, cache);
  if (train.size() < 2) throw ConfigError("need at least 2 training samples");

  EvstrModel<float> model(cfg.model, cfg.voxel.patch_size(), mix_seed(cfg.seed, 0x1417ULL));
  Sgd<float> opt(model.registry(), cfg.momentum);
  TrainSummary summary;
  summary.parameters = model.count_parameters();
  log << "training " << to_string(cfg.model.task) << " model: " << summary.parameters << " parameters, "
      << train.size() << " train / " << test.size() << " test samples\n";

  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  std::string metrics = metrics_header();
  write_text(metrics_path, metrics);

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(static_cast<double>(epoch), static_cast<double>(cfg.epochs), cfg.lr_max, cfg.lr_min);
    opt.set_lr(lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(mix_seed(cfg.seed, 0x5A11ULL + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    const auto batches = make_batches(order, cfg.batch_size);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const auto sets = batch_voxels(train, cfg, idx, epoch + 1);
      const auto ptrs = pointers(sets);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train.entries[i].label);
      ForwardContext ctx{true, mix_seed(mix_seed(cfg.seed, epoch + 1), b)};
      Var<float> loss = ops::cross_entropy(model(ptrs, ctx), labels);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        const std::string dump = (fs::path(out_dir) / "nonfinite_batch.txt").string();
        std::ostringstream d;
        d << "epoch " << epoch + 1 << " batch " << b << " loss " << value << " lr " << lr << "\n";
        for (std::size_t i : idx) d << train.entries[i].path << ' ' << train.entries[i].label << "\n";
        write_text(dump, d.str());
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b) + "; offending batch written to " + dump);
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
      loss_sum += value * static_cast<double>(idx.size());
      seen += idx.size();
    }
    const EvalResult ev = evaluate(model, test, cfg);
    const EpochMetrics m{epoch + 1, lr, loss_sum / static_cast<double>(seen), ev.accuracy};
    summary.history.push_back(m);
    metrics += metrics_row(m);
    write_text(metrics_path, metrics);
    if (ev.accuracy > summary.best_acc) {
      summary.best_acc = ev.accuracy;
      summary.best_epoch = epoch + 1;
      save_checkpoint((fs::path(out_dir) / "best.evck").string(), model.registry(), cfg, epoch + 1, lr);
    }
    summary.final_eval = ev;
    char line[160];
    std::snprintf(line, sizeof line, "epoch %zu/%zu lr %.3g loss %.4f test_acc %.4f\n", epoch + 1, cfg.epochs, lr,
                  m.train_loss, m.test_acc);
    log << line << std::flush;
  }
  save_checkpoint((fs::path(out_dir) / "last.evck").string(), model.registry(), cfg, cfg.epochs,
                  summary.history.back().lr);
  write_text((fs::path(out_dir) / "confusion.csv").string(), confusion_csv(summary.final_eval));
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char line[200];
  std::snprintf(line, sizeof line, "summary: best_acc %.4f (epoch %zu) final_acc %.4f wall %.1fs\n",
                summary.best_acc, summary.best_epoch, summary.final_eval.accuracy, summary.seconds);
  log << line;
  return summary;
}

/// Model and run configuration restored from a checkpoint file.
struct LoadedModel {
  RunConfig cfg;
  std::unique_ptr<EvstrModel<float>> model;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  const CheckpointData ck = decode_checkpoint(read_file(path));
  LoadedModel lm;
  lm.cfg = parse_run_config(ck.config);
  lm.model = std::make_unique<EvstrModel<float>>(lm.cfg.model, lm.cfg.voxel.patch_size(), 0);
  restore(lm.model->registry(), ck);
  return lm;
}

/// Evaluates a checkpoint on a manifest; writes confusion.csv when
/// `out_dir` is non-empty.
inline EvalResult run_eval(const std::string& checkpoint, const std::string& manifest,
                           const std::string& out_dir, std::ostream& log) {
  LoadedModel lm = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(manifest, lm.cfg, kTestSplit);
  EvalResult r = evaluate(*lm.model, ds, lm.cfg);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "confusion.csv").string(), confusion_csv(r));
  }
  char line[128];
  std::snprintf(line, sizeof line, "accuracy %.6f (%zu samples)\n", r.accuracy, r.samples);
  log << line;
  return r;
}

// ---------------------------------------------------------------------------
// gradient checks on seeded tiny instances

namespace detail {

inline Tensor<double> random_tensor(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor<double> t(r, c);
  for (auto& v : t.vec()) v = rng.normal(0.0, sd);
  return t;
}

/// Distinct random coordinates on a small integer grid, as voxel centres.
inline Tensor<double> random_coords(std::size_t n, Rng& rng) {
  Tensor<double> c(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    c(i, 0) = static_cast<double>(rng.index(16)) + rng.uniform(-0.25, 0.25);
    c(i, 1) = static_cast<double>(rng.index(16)) + rng.uniform(-0.25, 0.25);
    c(i, 2) = static_cast<double>(rng.index(4)) + rng.uniform(-0.25, 0.25);
  }
  return c;
}

inline VoxelSet random_voxel_set(std::size_t n, std::size_t patch, Rng& rng) {
  VoxelSet s;
  s.patch_size = patch;
  for (std::size_t i = 0; i < n; ++i) {
    s.coords.push_back(static_cast<float>(rng.index(16)));
    s.coords.push_back(static_cast<float>(rng.index(16)));
    s.coords.push_back(static_cast<float>(rng.index(4)));
    for (std::size_t k = 0; k < patch; ++k) s.patches.push_back(static_cast<float>(rng.normal(0.0, 1.0)));
    s.counts.push_back(1);
  }
  return s;
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"linear", "bn", "mnel", "vsal", "s2tm", "full"};
  return names;
}

/// Tiny configuration used by `gradcheck full`: an action model with two
/// segments of 24 voxels each.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.task = Task::action;
  m.num_classes = 3;
  m.encoder.feature_dim = 8;
  m.encoder.mnel_dims = {8, 8, 16};
  m.encoder.dim = 16;
  m.encoder.neighbors = 6;
  m.encoder.subspaces = 3;
  m.encoder.vsal_mlp_hidden = 32;
  m.s2tm.segments = 2;
  m.s2tm.token_dim = 16;
  m.s2tm.heads = 2;
  m.s2tm.head_dim = 8;
  m.s2tm.ffn_dim = 32;
  return m;
}

/// Voxels per set in the full-model check.
inline constexpr std::size_t kTinyVoxels = 32;

/// Runs the finite-difference check on a seeded tiny instance of a
/// component. Atomic layers use tolerance 1e-4, compositions 1e-3. The
/// objective is a fixed random projection of the output.
inline GradCheckReport run_gradcheck(const std::string& component, std::uint64_t seed,
                                     double corrupt_scale = 1.0) {
  Rng rng(mix_seed(seed, detail::fnv1a(component)));
  GradCheckOptions opt;
  opt.eps = 1e-5;
  opt.corrupt_scale = corrupt_scale;
  opt.seed = seed;
  const ForwardContext train{true, mix_seed(seed, 77)};
  if (component == "linear" || component == "bn") {
    opt.tol = 1e-4;
    const Var<double> x = make_param(detail::random_tensor(7, 5, rng));
    const Tensor<double> proj = detail::random_tensor(7, 4, rng);
    if (component == "linear") {
      auto layer = std::make_shared<Linear<double>>(5, 4, rng);
      Registry<double> reg;
      reg.param("input", x);
      layer->collect(reg, "linear");
      return grad_check([=] { return ops::weighted_sum((*layer)(x), proj); }, reg, opt);
    }
    auto layer = std::make_shared<BatchNorm<double>>(5);
    for (auto& v : layer->gamma.mutable_value().vec()) v = rng.uniform(0.5, 1.5);
    for (auto& v : layer->beta.mutable_value().vec()) v = rng.normal(0.0, 0.5);
    const Tensor<double> proj5 = detail::random_tensor(7, 5, rng);
    Registry<double> reg;
    reg.param("input", x);
    layer->collect(reg, "bn");
    return grad_check([=] { return ops::weighted_sum((*layer)(x, train), proj5); }, reg, opt);
  }
  opt.tol = 1e-3;
  if (component == "mnel" || component == "vsal") {
    const std::size_t n = 12, din = component == "mnel" ? 4 : 8, dout = component == "mnel" ? 6 : 8;
    SetBatch<double> in;
    in.features = make_param(detail::random_tensor(2 * n, din, rng));
    in.coords = Tensor<double>(2 * n, 3);
    for (int s = 0; s < 2; ++s) {
      const Tensor<double> c = detail::random_coords(n, rng);
      std::copy(c.data(), c.data() + c.size(), in.coords.data() + s * n * 3);
    }
    in.offsets = uniform_offsets(2, n);
    const Tensor<double> proj = detail::random_tensor(2 * n, dout, rng);
    Registry<double> reg;
    reg.param("input", in.features);
    if (component == "mnel") {
      MnelConfig mc;
      mc.in = din;
      mc.out = dout;
      mc.neighbors = 6;
      mc.subspaces = 3;
      auto layer = std::make_shared<Mnel<double>>(mc, rng);
      layer->collect(reg, "mnel");
      return grad_check([=] { return ops::weighted_sum((*layer)(in, train).features, proj); }, reg, opt);
    }
    VsalConfig vc;
    vc.dim = din;
    vc.mlp_hidden = 12;
    auto layer = std::make_shared<Vsal<double>>(vc, rng);
    layer->collect(reg, "vsal");
    return grad_check([=] { return ops::weighted_sum((*layer)(in, train).features, proj); }, reg, opt);
  }
  if (component == "s2tm") {
    S2tmConfig sc;
    sc.segments = 3;
    sc.token_dim = 8;
    sc.heads = 2;
    sc.head_dim = 4;
    sc.ffn_dim = 12;
    auto layer = std::make_shared<S2tm<double>>(sc, 6, rng);
    const Var<double> pooled = make_param(detail::random_tensor(2 * sc.segments, 6, rng));
    const Tensor<double> proj = detail::random_tensor(2, sc.token_dim, rng);
    Registry<double> reg;
    reg.param("input", pooled);
    layer->collect(reg, "s2tm");
    return grad_check([=] { return ops::weighted_sum((*layer)(pooled, train), proj); }, reg, opt);
  }
  if (component == "full") {
    const ModelConfig mc = tiny_model_config();
    auto model = std::make_shared<EvstrModel<double>>(mc, 4, mix_seed(seed, 5));
    auto sets = std::make_shared<std::vector<VoxelSet>>();
    for (int i = 0; i < 4; ++i) sets->push_back(detail::random_voxel_set(kTinyVoxels, 4, rng));
    const std::vector<int> labels{0, 2};
    return grad_check(
        [=] {
          const auto ptrs = pointers(*sets);
          return ops::cross_entropy((*model)(ptrs, train), labels);
        },
        model->registry(), opt);
  }
  throw ConfigError("unknown gradcheck component '" + component + "'");
}

// ---------------------------------------------------------------------------
// info

/// Reference complexity of the object-classification network with 1024
/// voxels, printed next to the estimate.
inline constexpr double kReferenceParams = 0.93e6;
inline constexpr double kReferenceMacs = 0.34e9;

struct InfoReport {
  std::vector<LayerInfo> layers;
  std::size_t parameters = 0;
  std::uint64_t macs = 0;
  std::string text;
};

inline InfoReport run_info(const RunConfig& cfg) {
  EvstrModel<float> model(cfg.model, cfg.voxel.patch_size(), 0);
  InfoReport r;
  r.layers = model.layer_table(cfg.voxel.num_voxels);
  r.parameters = model.count_parameters();
  r.macs = model.estimate_macs(cfg.voxel.num_voxels);
  std::ostringstream o;
  char line[200];
  std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %14s\n", "layer", "rows", "in", "out", "MACs");
  o << line;
  for (const auto& l : r.layers) {
    std::snprintf(line, sizeof line, "%-12s %8zu %8zu %8zu %14llu\n", l.name.c_str(), l.rows, l.in, l.out,
                  static_cast<unsigned long long>(l.macs));
    o << line;
  }
  if (cfg.model.task == Task::object) {
    const auto& e = cfg.model.encoder;
    const auto rows = encoder_row_counts(cfg.voxel.num_voxels, e.sample_rate);
    std::snprintf(line, sizeof line, "encoder output: %zu x %zu\n", rows[4], e.dim);
    o << line;
  }
  std::snprintf(line, sizeof line, "parameters: %zu (%.3fM)   reference: %.2fM\n", r.parameters,
                static_cast<double>(r.parameters) / 1e6, kReferenceParams / 1e6);
  o << line;
  std::snprintf(line, sizeof line, "MACs:       %llu (%.3fG)   reference: %.2fG\n",
                static_cast<unsigned long long>(r.macs), static_cast<double>(r.macs) / 1e9, kReferenceMacs / 1e9);
  o << line;
  r.text = o.str();
  return r;
}

}  // namespace evstr
