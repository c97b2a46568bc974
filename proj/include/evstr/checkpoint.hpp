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

// EVCK layout (little-endian):
//   "EVCK" | u32 version | u32 tensor count
//   per tensor: u16 name length | name | u8 rank | rank x u32 dims | f32 payload
//   u32 config length | config text

#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evstr/event_io.hpp"
#include "evstr/layers.hpp"

namespace evstr {

inline constexpr char kCheckpointMagic[4] = {'E', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct CheckpointData {
  std::vector<NamedTensor> tensors;
  std::string config;
};

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& ck) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& nt : ck.tensors) {
    if (nt.name.size() > 0xFFFF) throw Error("tensor name too long: " + nt.name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    const auto& shape = nt.tensor.shape();
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : nt.tensor.vec()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_le<std::uint32_t>(out, bits);
    }
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config.size()));
  out.insert(out.end(), ck.config.begin(), ck.config.end());
  return out;
}

inline CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  auto need = [&](std::size_t n) {
    if (off + n > bytes.size())
      throw ParseError("offset " + std::to_string(off) + ": truncated checkpoint");
  };
  need(12);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw ParseError("offset 0: missing EVCK header");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(bytes, 8);
  off = 12;
  CheckpointData ck;
  for (std::uint32_t t = 0; t < count; ++t) {
    need(2);
    const auto len = detail::get_le<std::uint16_t>(bytes, off);
    off += 2;
    need(len + 1);
    NamedTensor nt;
    nt.name.assign(reinterpret_cast<const char*>(bytes.data() + off), len);
    off += len;
    const std::size_t rank = bytes[off++];
    need(rank * 4);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
      d = detail::get_le<std::uint32_t>(bytes, off);
      off += 4;
    }
    nt.tensor = Tensor<float>(shape);
    need(nt.tensor.size() * 4);
    for (auto& f : nt.tensor.vec()) {
      const std::uint32_t bits = detail::get_le<std::uint32_t>(bytes, off);
      std::memcpy(&f, &bits, 4);
      off += 4;
    }
    ck.tensors.push_back(std::move(nt));
  }
  need(4);
  const auto clen = detail::get_le<std::uint32_t>(bytes, off);
  off += 4;
  need(clen);
  ck.config.assign(reinterpret_cast<const char*>(bytes.data() + off), clen);
  off += clen;
  if (off != bytes.size()) throw ParseError("offset " + std::to_string(off) + ": trailing bytes");
  return ck;
}

/// Snapshot of every parameter and buffer in `registry`.
template <class S>
CheckpointData snapshot(const Registry<S>& registry, std::string config) {
  CheckpointData ck;
  ck.config = std::move(config);
  for (const auto& [name, v] : registry.params)
    ck.tensors.push_back({name, v.value().template cast<float>()});
  for (const auto& [name, t] : registry.buffers) ck.tensors.push_back({name, t->template cast<float>()});
  return ck;
}

/// Copies checkpoint tensors into the registry. Every registry entry must
/// be present with an identical shape.
template <class S>
void restore(Registry<S>& registry, const CheckpointData& ck) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& nt : ck.tensors) by_name[nt.name] = &nt.tensor;
  auto fetch = [&](const std::string& name, Tensor<S>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor " + name);
    if (it->second->shape() != dst.shape())
      throw ConfigError("checkpoint tensor " + name + " has shape " +
                        shape_string(it->second->shape()) + ", model expects " +
                        shape_string(dst.shape()));
    dst = it->second->template cast<S>();
  };
  for (auto& [name, v] : registry.params) fetch(name, v.mutable_value());
  for (auto& [name, t] : registry.buffers) fetch(name, *t);
  if (by_name.size() != registry.params.size() + registry.buffers.size())
    throw ConfigError("checkpoint has tensors the model does not define");
}

}  // namespace evstr
