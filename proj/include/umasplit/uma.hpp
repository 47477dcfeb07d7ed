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

#include <string>
#include <vector>

#include "umasplit/nn.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Unimodal aggregation: a per-frame scalar weight, valley detection on the
// weight curve, and a weighted mean over each between-valleys segment. The
// valley indices are constants of the pass; gradients reach the weights only
// through the aggregation itself.
// ---------------------------------------------------------------------------

/// Frame ranges are 1-based inclusive; valley indices use the same axis with
/// sentinels 0 and T.
struct UmaSegmentation {
  std::vector<std::size_t> valleys;    // 0, interior valleys..., T
  std::vector<SegmentSpan> segments;   // one per aggregated output frame
  std::size_t frame_count = 0;         // T
};

/// How a valley frame is assigned: to both neighboring segments (the
/// inclusive-sum reading) or only to the segment it opens.
enum class BoundaryMode { kShared, kRight };

inline BoundaryMode boundary_mode_from_string(const std::string& s) {
  if (s == "shared") return BoundaryMode::kShared;
  if (s == "right") return BoundaryMode::kRight;
  throw FormatError("unknown boundary mode '" + s + "' (expected shared|right)");
}

inline const char* boundary_mode_name(BoundaryMode m) {
  return m == BoundaryMode::kShared ? "shared" : "right";
}

/// The output layer starts at zero so every alpha_t is exactly 0.5: the tie
/// rule then makes every interior frame a valley, training begins from the
/// finest segmentation, and no target is too long for the aggregated
/// sequence before the weights have differentiated.
inline void init_uma(ParamMap& m, std::size_t dim, Rng& rng) {
  init_linear(m, "uma.ffn.1", dim, 2 * dim, rng);
  init_linear(m, "uma.ffn.2", 2 * dim, 1, rng);
  for (double& v : m.at("uma.ffn.2.w").values()) v = 0.0;
}

/// alpha_t = sigmoid(FFN(e_t)), expansion factor 2, scalar output. [T].
inline Tensor predict_weights(const Tensor& e_h, const ParamMap& m) {
  if (e_h.rank() != 2) throw ShapeError("predict_weights expects [T, D]");
  Tensor z = linear(swish(linear(e_h, m, "uma.ffn.1")), m, "uma.ffn.2");
  return sigmoid(reshape(z, {e_h.dim(0)}));
}

/// Interior valleys are every t in [2, T-1] with alpha_t <= both neighbors
/// (ties count); 0 and T are always valleys. Indices only, no gradients.
inline UmaSegmentation find_valleys(const std::vector<double>& alpha,
                                    BoundaryMode mode = BoundaryMode::kShared) {
  std::size_t t_len = alpha.size();
  if (t_len == 0) throw ShapeError("find_valleys: empty weight sequence");
  UmaSegmentation seg;
  seg.frame_count = t_len;
  seg.valleys.push_back(0);
  for (std::size_t t = 2; t_len >= 3 && t <= t_len - 1; ++t)
    if (alpha[t - 1] <= alpha[t - 2] && alpha[t - 1] <= alpha[t]) seg.valleys.push_back(t);
  seg.valleys.push_back(t_len);
  std::size_t count = seg.valleys.size() - 1;
  for (std::size_t i = 1; i <= count; ++i) {
    std::size_t lo = std::max<std::size_t>(seg.valleys[i - 1], 1);
    std::size_t hi = seg.valleys[i];
    if (mode == BoundaryMode::kRight && i < count) hi = seg.valleys[i] - 1;
    seg.segments.push_back(SegmentSpan{lo, hi});
  }
  return seg;
}

inline UmaSegmentation find_valleys(const Tensor& alpha,
                                    BoundaryMode mode = BoundaryMode::kShared) {
  if (alpha.rank() != 1) throw ShapeError("find_valleys expects a rank-1 weight sequence");
  return find_valleys(alpha.values(), mode);
}

/// Weighted mean of each segment's frames; differentiable in frames and
/// weights, with the segmentation held fixed.
inline Tensor aggregate(const Tensor& e_h, const Tensor& alpha, const UmaSegmentation& seg) {
  if (e_h.dim(0) != seg.frame_count || alpha.size() != seg.frame_count)
    throw ShapeError("aggregate: segmentation was built for a different frame count");
  return segment_weighted_mean(e_h, alpha, seg.segments);
}

/// Structural check used by tests and the acceptance gate; returns an empty
/// string when the segmentation satisfies every invariant.
inline std::string segmentation_violation(const UmaSegmentation& seg, BoundaryMode mode) {
  std::size_t t_len = seg.frame_count;
  const auto& v = seg.valleys;
  if (t_len == 0) return "empty frame range";
  if (v.size() < 2 || v.front() != 0 || v.back() != t_len)
    return "valley sentinels missing";
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] <= v[i - 1]) return "valleys not strictly increasing";
  std::size_t count = seg.segments.size();
  if (count != v.size() - 1) return "segment count does not match valley count";
  if (count < 1 || count > t_len) return "segment count outside [1, T]";
  for (std::size_t i = 0; i < count; ++i) {
    const SegmentSpan& s = seg.segments[i];
    if (s.begin < 1 || s.end < s.begin || s.end > t_len) return "segment range invalid";
  }
  if (seg.segments.front().begin != 1) return "first segment must start at frame 1";
  if (seg.segments.back().end != t_len) return "last segment must end at frame T";
  for (std::size_t i = 1; i < count; ++i) {
    std::size_t prev_end = seg.segments[i - 1].end;
    std::size_t next_begin = seg.segments[i].begin;
    if (mode == BoundaryMode::kShared) {
      if (next_begin != prev_end) return "adjacent segments must share the valley frame";
    } else {
      if (next_begin != prev_end + 1) return "adjacent segments must tile without overlap";
    }
  }
  return "";
}

}  // namespace umasplit
