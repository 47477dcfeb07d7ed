/*
 * Copyright 2026 the uma-split authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "umasplit/nn.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Split module: each aggregated frame e_i becomes two candidate emission
// slots, s_{2i-1} = LayerNorm(e_i) and s_{2i} = LayerNorm(FFN(e_i)) with an
// expansion factor of 4, so one segment can carry up to two tokens. The two
// layer norms learn independent gains and biases.
// ---------------------------------------------------------------------------

inline void init_split(ParamMap& m, std::size_t dim, Rng& rng) {
  init_layer_norm(m, "split.ln1", dim);
  init_linear(m, "split.ffn.1", dim, 4 * dim, rng);
  init_linear(m, "split.ffn.2", 4 * dim, dim, rng);
  init_layer_norm(m, "split.ln2", dim);
}

/// [I, D] -> [2I, D], rows interleaved first-slot, second-slot per segment.
inline Tensor split_frames(const Tensor& e_l, const ParamMap& m) {
  if (e_l.rank() != 2) throw ShapeError("split_frames expects [I, D]");
  std::size_t count = e_l.dim(0), dim = e_l.dim(1);
  Tensor first = layer_norm_at(e_l, m, "split.ln1");
  Tensor second = layer_norm_at(ffn_swish(e_l, m, "split.ffn"), m, "split.ln2");
  // Row i of the concat is [first_i | second_i]; flattening it yields the
  // interleaved order s_1, s_2, s_3, ... = a_1, b_1, a_2, ...
  return reshape(concat({first, second}, 1), {2 * count, dim});
}

/// Emission slot j (0-based) of the split output belongs to segment j/2;
/// even rows are the first slot.
inline std::size_t split_row_segment(std::size_t row) { return row / 2; }
inline bool split_row_is_first_slot(std::size_t row) { return row % 2 == 0; }

}  // namespace umasplit
