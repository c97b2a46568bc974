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
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "evstr/common.hpp"

namespace evstr {

struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint64_t t = 0;  // microseconds
  std::int8_t p = 1;    // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events plus sensor geometry. Labels live in dataset
/// manifests, so `label` is only populated by loaders that know it.
struct EventStream {
  std::vector<Event> events;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::optional<int> label;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
  std::uint64_t first_time() const { return events.front().t; }
  std::uint64_t last_time() const { return events.back().t; }
};

enum class EventFormat { csv, bin };

inline EventFormat format_from_path(std::string_view path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return EventFormat::csv;
  return EventFormat::bin;
}

inline void check_event(const Event& e, std::uint16_t width, std::uint16_t height,
                        const std::string& where) {
  if (e.x >= width || e.y >= height)
    throw ParseError(where + ": event (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                     ") outside " + std::to_string(width) + "x" + std::to_string(height) +
                     " sensor");
  if (e.p != 1 && e.p != -1)
    throw ParseError(where + ": polarity must be 1 or -1, got " + std::to_string(e.p));
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_int(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(U(in[offset + i]) << (8 * i));
  return static_cast<T>(u);
}

inline void sort_by_time(std::vector<Event>& events) {
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
}

}  // namespace detail

/// Parses `x,y,t,p` lines. CSV carries no geometry, so the caller supplies it.
inline EventStream parse_events_csv(std::string_view text, std::uint16_t width,
                                    std::uint16_t height) {
  EventStream stream;
  stream.width = width;
  stream.height = height;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = detail::trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const std::string where = "line " + std::to_string(line_no);
    std::string_view fields[4];
    std::size_t start = 0;
    int n = 0;
    for (; n < 4; ++n) {
      const std::size_t comma = line.find(',', start);
      if (n < 3 && comma == std::string_view::npos) break;
      fields[n] = line.substr(start, (n < 3 ? comma : line.size()) - start);
      start = comma + 1;
    }
    Event e;
    int p = 0;
    if (n != 4 || !detail::parse_int(fields[0], e.x) || !detail::parse_int(fields[1], e.y) ||
        !detail::parse_int(fields[2], e.t) || !detail::parse_int(fields[3], p))
      throw ParseError(where + ": malformed record '" + std::string(line) + "'");
    if (p != 1 && p != -1) throw ParseError(where + ": polarity must be 1 or -1");
    e.p = static_cast<std::int8_t>(p);
    check_event(e, width, height, where);
    stream.events.push_back(e);
  }
  if (stream.events.empty()) throw EmptyStreamError("event input contains no events");
  detail::sort_by_time(stream.events);
  return stream;
}

inline constexpr char kEventMagic[4] = {'E', 'V', 'S', '1'};
inline constexpr std::size_t kEventHeaderBytes = 12;
inline constexpr std::size_t kEventRecordBytes = 13;

inline EventStream parse_events_bin(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw EmptyStreamError("event input is empty");
  if (bytes.size() < kEventHeaderBytes || std::memcmp(bytes.data(), kEventMagic, 4) != 0)
    throw ParseError("offset 0: missing EVS1 header");
  EventStream stream;
  stream.width = detail::get_le<std::uint16_t>(bytes, 4);
  stream.height = detail::get_le<std::uint16_t>(bytes, 6);
  const std::uint32_t count = detail::get_le<std::uint32_t>(bytes, 8);
  if (bytes.size() != kEventHeaderBytes + std::size_t{count} * kEventRecordBytes)
    throw ParseError("offset " + std::to_string(bytes.size()) + ": expected " +
                     std::to_string(count) + " records of " + std::to_string(kEventRecordBytes) +
                     " bytes");
  if (count == 0) throw EmptyStreamError("event file contains no events");
  stream.events.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t off = kEventHeaderBytes + std::size_t{i} * kEventRecordBytes;
    Event e;
    e.x = detail::get_le<std::uint16_t>(bytes, off);
    e.y = detail::get_le<std::uint16_t>(bytes, off + 2);
    e.t = detail::get_le<std::uint64_t>(bytes, off + 4);
    e.p = detail::get_le<std::int8_t>(bytes, off + 12);
    check_event(e, stream.width, stream.height, "offset " + std::to_string(off));
    stream.events.push_back(e);
  }
  detail::sort_by_time(stream.events);
  return stream;
}

inline EventStream parse_events(std::span<const std::uint8_t> bytes, EventFormat format,
                                std::uint16_t width = 0, std::uint16_t height = 0) {
  if (format == EventFormat::bin) return parse_events_bin(bytes);
  if (bytes.empty()) throw EmptyStreamError("event input is empty");
  if (width == 0 || height == 0)
    throw ConfigError("CSV events carry no geometry; configure width and height");
  return parse_events_csv(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), width, height);
}

inline std::vector<std::uint8_t> write_events(const EventStream& stream, EventFormat format) {
  std::vector<std::uint8_t> out;
  if (format == EventFormat::csv) {
    std::string text;
    for (const Event& e : stream.events) {
      text += std::to_string(e.x);
      text += ',';
      text += std::to_string(e.y);
      text += ',';
      text += std::to_string(e.t);
      text += ',';
      text += std::to_string(int{e.p});
      text += '\n';
    }
    out.assign(text.begin(), text.end());
    return out;
  }
  out.reserve(kEventHeaderBytes + stream.events.size() * kEventRecordBytes);
  out.insert(out.end(), std::begin(kEventMagic), std::end(kEventMagic));
  detail::put_le<std::uint16_t>(out, stream.width);
  detail::put_le<std::uint16_t>(out, stream.height);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(stream.events.size()));
  for (const Event& e : stream.events) {
    detail::put_le<std::uint16_t>(out, e.x);
    detail::put_le<std::uint16_t>(out, e.y);
    detail::put_le<std::uint64_t>(out, e.t);
    detail::put_le<std::int8_t>(out, e.p);
  }
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Loads an event file; the format follows the extension (.csv or binary).
inline EventStream load_events(const std::string& path, std::uint16_t width = 0,
                               std::uint16_t height = 0) {
  const auto bytes = read_file(path);
  return parse_events(bytes, format_from_path(path), width, height);
}

/// Splits a stream into K windows of equal duration
/// [t_1 + k*span/K, t_1 + (k+1)*span/K) with span = t_M - t_1 + 1.
inline std::vector<EventStream> split_segments(const EventStream& stream, std::size_t k) {
  if (k == 0) throw ConfigError("segment count must be >= 1");
  if (stream.empty()) throw EmptyStreamError("cannot segment an empty stream");
  std::vector<EventStream> segments(k);
  for (auto& s : segments) {
    s.width = stream.width;
    s.height = stream.height;
    s.label = stream.label;
  }
  const std::uint64_t t1 = stream.first_time();
  const std::uint64_t span = stream.last_time() - t1 + 1;
  for (const Event& e : stream.events) {
    // floor((t - t1) * K / span) without floating point
    const auto idx = static_cast<std::size_t>(
        (static_cast<unsigned __int128>(e.t - t1) * k) / span);
    segments[idx].events.push_back(e);
  }
  for (std::size_t i = 0; i < k; ++i)
    if (segments[i].empty())
      throw DegenerateError("segment " + std::to_string(i) + " of " + std::to_string(k) +
                            " contains no events");
  return segments;
}

// ---------------------------------------------------------------------------
// Dataset manifests: one `<path> <label-id>` line per sample.

struct ManifestEntry {
  std::string path;
  int label = 0;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view v = detail::trim(line);
    if (v.empty() || v.front() == '#') continue;
    const std::size_t sp = v.find_last_of(" \t");
    ManifestEntry entry;
    if (sp == std::string_view::npos || !detail::parse_int(v.substr(sp + 1), entry.label) ||
        entry.label < 0)
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected '<path> <label-id>'");
    entry.path = std::string(detail::trim(v.substr(0, sp)));
    entries.push_back(std::move(entry));
  }
  return entries;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest " + path);
  for (const auto& e : entries) out << e.path << ' ' << e.label << '\n';
}

// ---------------------------------------------------------------------------
// Brightness-threshold simulator.

/// Threshold-crossing event generator over an arbitrary log-intensity field.
/// `log_intensity(x, y, t_us)` is sampled every `timestep` microseconds; each
/// pixel keeps the level of its last event and emits one event per crossing
/// of +-C, with the timestamp interpolated linearly between samples.
///
/// When `levels` is non-null it receives, per emitted event, the reference
/// level the pixel reached (in emission order before time sorting, then
/// permuted alongside the events).
template <class LogIntensityFn>
EventStream simulate_events(std::uint16_t width, std::uint16_t height, std::uint64_t duration,
                            std::uint64_t timestep, double threshold,
                            LogIntensityFn&& log_intensity,
                            std::vector<double>* levels = nullptr) {
  if (threshold <= 0.0) throw ConfigError("contrast threshold must be positive");
  if (timestep == 0 || duration == 0 || duration % timestep != 0)
    throw ConfigError("timestep must be positive and divide the duration");
  const std::size_t pixels = std::size_t{width} * height;
  std::vector<double> prev(pixels), ref(pixels);
  for (std::uint16_t y = 0; y < height; ++y)
    for (std::uint16_t x = 0; x < width; ++x)
      prev[std::size_t{y} * width + x] = ref[std::size_t{y} * width + x] = log_intensity(x, y, 0.0);

  // Tolerance absorbs rounding when a ramp lands exactly on a multiple of C.
  const double tol = 1e-9 * std::max(1.0, threshold);
  std::vector<Event> events;
  std::vector<double> emitted_levels;
  const std::uint64_t steps = duration / timestep;
  for (std::uint64_t s = 1; s <= steps; ++s) {
    const double t0 = static_cast<double>((s - 1) * timestep);
    const double t1 = static_cast<double>(s * timestep);
    for (std::uint16_t y = 0; y < height; ++y) {
      for (std::uint16_t x = 0; x < width; ++x) {
        const std::size_t i = std::size_t{y} * width + x;
        const double l0 = prev[i];
        const double l1 = log_intensity(x, y, t1);
        const double dl = l1 - l0;
        auto emit = [&](int polarity) {
          const double level = ref[i] + polarity * threshold;
          double frac = dl != 0.0 ? (level - l0) / dl : 1.0;
          frac = std::clamp(frac, 0.0, 1.0);
          Event e;
          e.x = x;
          e.y = y;
          e.t = static_cast<std::uint64_t>(std::llround(t0 + frac * (t1 - t0)));
          e.p = static_cast<std::int8_t>(polarity);
          events.push_back(e);
          emitted_levels.push_back(level);
          ref[i] = level;
        };
        while (l1 - ref[i] >= threshold - tol) emit(+1);
        while (ref[i] - l1 >= threshold - tol) emit(-1);
        prev[i] = l1;
      }
    }
  }
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return events[a].t < events[b].t; });
  EventStream stream;
  stream.width = width;
  stream.height = height;
  stream.events.reserve(events.size());
  for (std::size_t i : order) stream.events.push_back(events[i]);
  if (levels) {
    levels->clear();
    for (std::size_t i : order) levels->push_back(emitted_levels[i]);
  }
  return stream;
}

enum class ShapeKind { disk, bar, square };
enum class MotionKind { translate, rotate, expand };

inline ShapeKind parse_shape(std::string_view s) {
  if (s == "disk") return ShapeKind::disk;
  if (s == "bar") return ShapeKind::bar;
  if (s == "square") return ShapeKind::square;
  throw ConfigError("unknown shape kind '" + std::string(s) + "'");
}

inline MotionKind parse_motion(std::string_view s) {
  if (s == "translate") return MotionKind::translate;
  if (s == "rotate") return MotionKind::rotate;
  if (s == "expand") return MotionKind::expand;
  throw ConfigError("unknown motion kind '" + std::string(s) + "'");
}

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::bar: return "bar";
    case ShapeKind::square: return "square";
  }
  return "?";
}

inline const char* to_string(MotionKind k) {
  switch (k) {
    case MotionKind::translate: return "translate";
    case MotionKind::rotate: return "rotate";
    case MotionKind::expand: return "expand";
  }
  return "?";
}

struct SceneConfig {
  ShapeKind shape = ShapeKind::disk;
  MotionKind motion = MotionKind::translate;
  double threshold = 0.2;         // C, log-intensity units
  std::uint64_t duration = 100000;  // us
  std::uint64_t timestep = 1000;    // us
  std::uint16_t width = 64;
  std::uint16_t height = 64;
  std::uint64_t seed = 0;
  /// Multiplies the sampled motion magnitude; 0 gives a static scene.
  double motion_scale = 1.0;
};

/// Scene parameters drawn from the seed. Exposed so tests can inspect what
/// was rendered.
struct SceneInstance {
  double cx = 0, cy = 0;      // initial centre (pixels)
  double vx = 0, vy = 0;      // translation over the full duration (pixels)
  double angle = 0;           // initial orientation (radians)
  double spin = 0;            // rotation over the full duration (radians)
  double size = 0;            // radius / half-extent (pixels)
  double growth = 0;          // relative size change over the duration
  double aspect = 0.25;       // bar half-width / half-length
  double background = 0.2;
  double foreground = 0.8;
};

inline SceneInstance sample_scene(const SceneConfig& cfg) {
  Rng rng(cfg.seed);
  SceneInstance s;
  const double w = cfg.width, h = cfg.height;
  const double m = std::min(w, h);
  s.cx = w * rng.uniform(0.4, 0.6);
  s.cy = h * rng.uniform(0.4, 0.6);
  s.angle = rng.uniform(0.0, M_PI);
  s.size = m * rng.uniform(0.12, 0.18);
  const double dir = rng.uniform(0.0, 2.0 * M_PI);
  const double travel = m * rng.uniform(0.2, 0.3);
  const double spin_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double spin = rng.uniform(0.5, 0.8) * M_PI;
  const double growth = rng.uniform(0.5, 0.8);
  const bool bright = rng.uniform() < 0.5;
  s.background = bright ? 0.2 : 0.8;
  s.foreground = bright ? 0.8 : 0.2;
  switch (cfg.motion) {
    case MotionKind::translate:
      s.vx = cfg.motion_scale * travel * std::cos(dir);
      s.vy = cfg.motion_scale * travel * std::sin(dir);
      s.cx -= 0.5 * s.vx;
      s.cy -= 0.5 * s.vy;
      break;
    case MotionKind::rotate: s.spin = cfg.motion_scale * spin_sign * spin; break;
    case MotionKind::expand: s.growth = cfg.motion_scale * growth; break;
  }
  if (cfg.shape == ShapeKind::bar) s.size *= 1.8;
  return s;
}

/// Analytic log-intensity of the rendered scene at pixel centre (x, y) and
/// normalised time a in [0, 1]. Edges are smoothed over about one pixel so
/// brightness changes are continuous in time.
inline double scene_log_intensity(const SceneConfig& cfg, const SceneInstance& s, double x,
                                  double y, double a) {
  const double cx = s.cx + s.vx * a;
  const double cy = s.cy + s.vy * a;
  const double angle = s.angle + s.spin * a;
  const double size = s.size * (1.0 + s.growth * a);
  const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
  const double u = std::cos(angle) * dx + std::sin(angle) * dy;
  const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
  double sd = 0.0;  // positive inside
  switch (cfg.shape) {
    case ShapeKind::disk: sd = size - std::hypot(dx, dy); break;
    case ShapeKind::bar: sd = std::min(size - std::abs(u), size * s.aspect - std::abs(v)); break;
    case ShapeKind::square: sd = size - std::max(std::abs(u), std::abs(v)); break;
  }
  const double coverage = 1.0 / (1.0 + std::exp(-2.0 * sd));
  return std::log(s.background + (s.foreground - s.background) * coverage);
}

/// Renders the configured scene and returns its events.
inline EventStream synthesize_stream(const SceneConfig& cfg, std::vector<double>* levels = nullptr) {
  const SceneInstance scene = sample_scene(cfg);
  const double duration = static_cast<double>(cfg.duration);
  EventStream stream = simulate_events(
      cfg.width, cfg.height, cfg.duration, cfg.timestep, cfg.threshold,
      [&](std::uint16_t x, std::uint16_t y, double t) {
        return scene_log_intensity(cfg, scene, x, y, t / duration);
      },
      levels);
  if (stream.empty())
    throw EmptyStreamError(std::string("scene ") + to_string(cfg.shape) + "/" +
                           to_string(cfg.motion) + " produced no events");
  return stream;
}

}  // namespace evstr
