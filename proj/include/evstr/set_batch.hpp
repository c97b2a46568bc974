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

#include <vector>

#include "evstr/autograd.hpp"

namespace evstr {

/// Several voxel sets stacked along rows. Set s occupies rows
/// [offsets[s], offsets[s+1]) of both `features` and `coords`.
template <class S>
struct SetBatch {
  Var<S> features;           // R x D
  Tensor<S> coords;          // R x 3
  std::vector<std::size_t> offsets{0};

  std::size_t sets() const { return offsets.size() - 1; }
  std::size_t rows(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
  std::size_t total_rows() const { return offsets.back(); }
  std::span<const S> set_coords(std::size_t s) const {
    return std::span<const S>(coords.data() + offsets[s] * 3, rows(s) * 3);
  }
};

/// Offsets for `count` consecutive blocks of `n` rows.
inline std::vector<std::size_t> uniform_offsets(std::size_t count, std::size_t n) {
  std::vector<std::size_t> off(count + 1);
  for (std::size_t i = 0; i <= count; ++i) off[i] = i * n;
  return off;
}

/// Row gather applied to features and coordinates together.
template <class S>
SetBatch<S> gather_sets(const SetBatch<S>& in, const std::vector<std::size_t>& rows,
                        std::vector<std::size_t> offsets) {
  SetBatch<S> out;
  out.features = ops::gather_rows(in.features, rows);
  out.coords = Tensor<S>(rows.size(), 3);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int c = 0; c < 3; ++c) out.coords(r, c) = in.coords(rows[r], c);
  out.offsets = std::move(offsets);
  return out;
}

}  // namespace evstr
