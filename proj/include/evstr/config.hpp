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

// Textual run configuration. One `key = value` per line, `#` starts a
// comment, lists are comma separated. Unknown keys are rejected.

#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evstr/event_io.hpp"
#include "evstr/model.hpp"
#include "evstr/voxelizer.hpp"

namespace evstr {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(detail::trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(key, std::string(detail::trim(line.substr(eq + 1))));
    if (end == text.size()) break;
  }
  return out;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* b = v.data();
  const char* e = v.data() + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || p != e) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const std::size_t end = std::min(v.find(',', pos), v.size());
    const auto item = trim(v.substr(pos, end - pos));
    if (!item.empty()) out.emplace_back(item);
    pos = end + 1;
  }
  return out;
}

// Binds config keys to struct fields for both parsing and printing.
class Binder {
 public:
  using Setter = std::function<void(const std::string&)>;
  using Getter = std::function<std::string()>;

  void size(const std::string& key, std::size_t& f) {
    add(key, [&f, key](const std::string& v) { f = parse_number<std::size_t>(key, v); },
        [&f] { return std::to_string(f); });
  }
  void u64(const std::string& key, std::uint64_t& f) {
    add(key, [&f, key](const std::string& v) { f = parse_number<std::uint64_t>(key, v); },
        [&f] { return std::to_string(f); });
  }
  void integer(const std::string& key, int& f) {
    add(key, [&f, key](const std::string& v) { f = parse_number<int>(key, v); },
        [&f] { return std::to_string(f); });
  }
  void u16(const std::string& key, std::uint16_t& f) {
    add(key, [&f, key](const std::string& v) { f = parse_number<std::uint16_t>(key, v); },
        [&f] { return std::to_string(f); });
  }
  void real(const std::string& key, double& f) {
    add(key, [&f, key](const std::string& v) { f = parse_number<double>(key, v); },
        [&f] { return fmt_double(f); });
  }
  void flag(const std::string& key, bool& f) {
    add(key, [&f, key](const std::string& v) { f = parse_bool(key, v); },
        [&f] { return std::string(f ? "true" : "false"); });
  }
  void text(const std::string& key, std::string& f) {
    add(key, [&f](const std::string& v) { f = v; }, [&f] { return f; });
  }
  template <std::size_t N>
  void sizes(const std::string& key, std::array<std::size_t, N>& f) {
    add(key,
        [&f, key](const std::string& v) {
          const auto items = split_list(v);
          if (items.size() != N)
            throw ConfigError(key + " needs " + std::to_string(N) + " comma-separated values");
          for (std::size_t i = 0; i < N; ++i) f[i] = parse_number<std::size_t>(key, items[i]);
        },
        [&f] {
          std::string s;
          for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(f[i]);
          return s;
        });
  }
  void custom(const std::string& key, Setter set, Getter get) { add(key, std::move(set), std::move(get)); }

  void apply(const KeyValues& kv) const {
    for (const auto& [k, v] : kv) {
      auto it = index_.find(k);
      if (it == index_.end()) throw ConfigError("unknown config key '" + k + "'");
      entries_[it->second].set(v);
    }
  }

  std::string dump() const {
    std::string out;
    for (const auto& e : entries_) out += e.key + " = " + e.get() + "\n";
    return out;
  }

 private:
  struct Entry {
    std::string key;
    Setter set;
    Getter get;
  };
  void add(const std::string& key, Setter set, Getter get) {
    index_[key] = entries_.size();
    entries_.push_back({key, std::move(set), std::move(get)});
  }
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace detail

inline Task parse_task(std::string_view s) {
  if (s == "object") return Task::object;
  if (s == "action") return Task::action;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected object or action)");
}

inline TemporalKind parse_temporal(std::string_view s) {
  if (s == "attention") return TemporalKind::attention;
  if (s == "avgpool") return TemporalKind::avgpool;
  if (s == "recurrent") return TemporalKind::recurrent;
  throw ConfigError("unknown temporal module '" + std::string(s) + "'");
}

struct RunConfig {
  std::string train_manifest;
  std::string test_manifest;
  std::uint16_t width = 0;   // sensor size; 0 takes it from binary event files
  std::uint16_t height = 0;
  VoxelGridConfig voxel;
  ModelConfig model;
  std::size_t epochs = 250;
  std::size_t batch_size = 32;
  std::size_t eval_batch_size = 32;
  double lr_max = 3e-2;
  double lr_min = 1e-6;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::string cache_dir;     // object task: EVX1 cache; empty means <out>/cache

  // Written into checkpoints; ignored when training.
  std::size_t trained_epochs = 0;
  double last_lr = 0.0;

  /// Defaults of the full-size recipes for each task.
  static RunConfig defaults(Task task) {
    RunConfig c;
    c.model.task = task;
    if (task == Task::action) {
      c.epochs = 300;
      c.batch_size = 16;
      c.eval_batch_size = 16;
      c.lr_max = 1e-2;
      c.lr_min = 1e-7;
      c.voxel.compensation = 8;
    }
    return c;
  }

  detail::Binder bind() {
    detail::Binder b;
    b.custom("task", [this](const std::string& v) { model.task = parse_task(v); },
             [this] { return std::string(to_string(model.task)); });
    b.text("train_manifest", train_manifest);
    b.text("test_manifest", test_manifest);
    b.u16("width", width);
    b.u16("height", height);
    b.integer("voxel_h", voxel.voxel_h);
    b.integer("voxel_w", voxel.voxel_w);
    b.real("voxel_t", voxel.voxel_t);
    b.real("compensation", voxel.compensation);
    b.size("num_voxels", voxel.num_voxels);
    b.size("num_classes", model.num_classes);
    auto& e = model.encoder;
    b.size("feature_dim", e.feature_dim);
    b.sizes("mnel_dims", e.mnel_dims);
    b.size("neighbors", e.neighbors);
    b.size("subspaces", e.subspaces);
    b.real("sample_rate", e.sample_rate);
    b.size("dim", e.dim);
    b.size("vsal_mlp_hidden", e.vsal_mlp_hidden);
    b.size("bias_hidden", e.bias_hidden);
    b.flag("multi_scale", e.multi_scale);
    b.flag("attentive", e.attentive);
    b.flag("absolute_pe", e.absolute_pe);
    b.flag("relative_bias", e.relative_bias);
    b.flag("sqrt_dk_scale", e.sqrt_dk_scale);
    b.flag("literal_mlp", e.literal_mlp);
    b.sizes("head_dims", model.head_dims);
    b.real("dropout", model.dropout);
    auto& s = model.s2tm;
    b.size("segments", s.segments);
    b.size("token_dim", s.token_dim);
    b.size("heads", s.heads);
    b.size("head_dim", s.head_dim);
    b.size("ffn_dim", s.ffn_dim);
    b.custom("temporal", [&s](const std::string& v) { s.temporal = parse_temporal(v); },
             [&s] { return std::string(to_string(s.temporal)); });
    b.size("epochs", epochs);
    b.size("batch_size", batch_size);
    b.size("eval_batch_size", eval_batch_size);
    b.real("lr_max", lr_max);
    b.real("lr_min", lr_min);
    b.real("momentum", momentum);
    b.u64("seed", seed);
    b.text("cache_dir", cache_dir);
    b.size("trained_epochs", trained_epochs);
    b.real("last_lr", last_lr);
    return b;
  }

  std::string to_text() const { return const_cast<RunConfig*>(this)->bind().dump(); }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch normalization)");
    if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be positive");
    if (!(lr_max > 0) || lr_min < 0 || lr_min > lr_max) throw ConfigError("need 0 <= lr_min <= lr_max, lr_max > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
    if (model.num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (model.dropout < 0 || model.dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
    const auto& e = model.encoder;
    if (!(e.sample_rate > 0) || e.sample_rate > 1) throw ConfigError("sample_rate must be in (0, 1]");
    const auto rows = encoder_row_counts(voxel.num_voxels, e.sample_rate);
    if (rows[2] < e.neighbors)
      throw ConfigError("num_voxels too small: the third MNEL sees " + std::to_string(rows[2]) +
                        " voxels but needs " + std::to_string(e.neighbors) + " neighbours");
    if (model.task == Task::action) {
      if (model.s2tm.segments == 0) throw ConfigError("segments must be positive");
      if (model.s2tm.heads == 0 || model.s2tm.head_dim == 0) throw ConfigError("heads and head_dim must be positive");
    }
  }
};

/// Parses a run config. The `task` key, when present, selects the defaults
/// the remaining keys are applied on top of.
inline RunConfig parse_run_config(std::string_view text) {
  const KeyValues kv = parse_key_values(text);
  Task task = Task::object;
  for (const auto& [k, v] : kv)
    if (k == "task") task = parse_task(v);
  RunConfig c = RunConfig::defaults(task);
  c.bind().apply(kv);
  return c;
}

/// Reads a run config file. Relative manifest and cache paths are taken
/// relative to the directory holding the file.
inline RunConfig load_run_config(const std::string& path) {
  const auto bytes = read_file(path);
  RunConfig c = parse_run_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  for (std::string* p : {&c.train_manifest, &c.test_manifest, &c.cache_dir})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (dir / *p).string();
  return c;
}


/// Dataset synthesis recipe: one class per `shape:motion` entry.
struct SynthConfig {
  std::vector<std::pair<ShapeKind, MotionKind>> classes{
      {ShapeKind::disk, MotionKind::translate},
      {ShapeKind::bar, MotionKind::rotate},
      {ShapeKind::square, MotionKind::expand}};
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  double threshold = 0.2;
  std::uint64_t duration = 100000;
  std::uint64_t timestep = 1000;
  std::uint16_t width = 64;
  std::uint16_t height = 64;
  double motion_scale = 1.0;
  std::string format = "bin";
  std::uint64_t seed = 0;

  detail::Binder bind() {
    detail::Binder b;
    b.custom(
        "classes",
        [this](const std::string& v) {
          classes.clear();
          for (const auto& item : detail::split_list(v)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos)
              throw ConfigError("class '" + item + "' must be shape:motion");
            classes.emplace_back(parse_shape(item.substr(0, colon)), parse_motion(item.substr(colon + 1)));
          }
          if (classes.size() < 2) throw ConfigError("need at least 2 classes");
        },
        [this] {
          std::string s;
          for (std::size_t i = 0; i < classes.size(); ++i)
            s += std::string(i ? "," : "") + to_string(classes[i].first) + ":" + to_string(classes[i].second);
          return s;
        });
    b.size("train_per_class", train_per_class);
    b.size("test_per_class", test_per_class);
    b.real("threshold", threshold);
    b.u64("duration", duration);
    b.u64("timestep", timestep);
    b.u16("width", width);
    b.u16("height", height);
    b.real("motion_scale", motion_scale);
    b.custom("format",
             [this](const std::string& v) {
               if (v != "bin" && v != "csv") throw ConfigError("format must be bin or csv");
               format = v;
             },
             [this] { return format; });
    b.u64("seed", seed);
    return b;
  }

  std::string to_text() const { return const_cast<SynthConfig*>(this)->bind().dump(); }
};

inline SynthConfig parse_synth_config(std::string_view text) {
  SynthConfig c;
  c.bind().apply(parse_key_values(text));
  return c;
}

inline SynthConfig load_synth_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_synth_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace evstr
