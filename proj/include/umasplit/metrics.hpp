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

#include <algorithm>
#include <optional>
#include <vector>

#include "umasplit/ctc.hpp"
#include "umasplit/tensor.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Token error rate: Levenshtein distance with unit costs, normalized by the
// reference length. An empty reference cannot normalize, so the rate falls
// back to counting insertions against a length of one and the result is
// flagged.
// ---------------------------------------------------------------------------

struct ErrorRate {
  std::size_t edits = 0;
  double rate = 0.0;
  bool empty_reference = false;
};

inline std::size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      diag = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
    }
  }
  return row[b.size()];
}

inline ErrorRate error_rate(const std::vector<int>& hyp, const std::vector<int>& ref) {
  ErrorRate er;
  er.edits = levenshtein(hyp, ref);
  er.empty_reference = ref.empty();
  er.rate = static_cast<double>(er.edits) / static_cast<double>(std::max<std::size_t>(ref.size(), 1));
  return er;
}

// ---------------------------------------------------------------------------
// Frame-rate bookkeeping. One raw frame is 10 ms; the post-aggregation rate
// is defined through the length ratio I/T', which makes the identity
// rate_after = rate_before * I/T' hold exactly rather than up to rounding.
// ---------------------------------------------------------------------------

struct UtteranceRates {
  double duration_s = 0.0;
  double token_rate = 0.0;        // reference tokens per second
  double frame_rate_before = 0.0; // subsampled frames per second
  double frame_rate_after = 0.0;  // aggregated frames per second
};

inline UtteranceRates utterance_rates(std::size_t token_count, double duration_s,
                                      std::size_t subsampled_frames,
                                      std::size_t aggregated_frames) {
  if (duration_s <= 0.0) throw NumericalError("utterance duration must be positive");
  if (subsampled_frames == 0) throw ShapeError("rates need at least one subsampled frame");
  UtteranceRates r;
  r.duration_s = duration_s;
  r.token_rate = static_cast<double>(token_count) / duration_s;
  r.frame_rate_before = static_cast<double>(subsampled_frames) / duration_s;
  r.frame_rate_after =
      r.frame_rate_before *
      (static_cast<double>(aggregated_frames) / static_cast<double>(subsampled_frames));
  return r;
}

// ---------------------------------------------------------------------------
// Per-frame slot outcomes after aggregation. With the split active each
// aggregated frame owns two output rows; without it, one. A frame is
// "non-blank" when any slot emits a token, and "two non-blank" when both
// slots emit distinct tokens.
// ---------------------------------------------------------------------------

struct SlotOutcome {
  int first = kBlankId;
  int second = -1;  // -1 when the frame has a single slot
};

inline int argmax_row(const Tensor& lp, std::size_t row) {
  std::size_t cols = lp.dim(1);
  const double* r = lp.data() + row * cols;
  std::size_t best = 0;
  for (std::size_t c = 1; c < cols; ++c)
    if (r[c] > r[best]) best = c;
  return static_cast<int>(best);
}

inline std::vector<SlotOutcome> slot_outcomes(const Tensor& lp, bool split) {
  if (lp.rank() != 2) throw ShapeError("slot outcomes expect [rows, V+1] log-probs");
  std::size_t rows = lp.dim(0);
  if (split && rows % 2 != 0)
    throw ShapeError("split outputs must pair rows, got an odd count");
  std::vector<SlotOutcome> out;
  if (split) {
    out.reserve(rows / 2);
    for (std::size_t i = 0; i < rows; i += 2)
      out.push_back({argmax_row(lp, i), argmax_row(lp, i + 1)});
  } else {
    out.reserve(rows);
    for (std::size_t i = 0; i < rows; ++i) out.push_back({argmax_row(lp, i), -1});
  }
  return out;
}

struct UmaStats {
  double token_rate = 0.0;
  double frame_rate_before = 0.0;
  double frame_rate_after = 0.0;
  double nonblank_ratio = 0.0;
  std::optional<double> two_nonblank_ratio;  // unset when no frame emitted
};

/// Corpus-level accumulator; rates are duration-weighted totals.
struct UmaStatsAccum {
  double tokens = 0.0;
  double seconds = 0.0;
  double frames_before = 0.0;
  double frames_after = 0.0;
  std::size_t agg_frames = 0;
  std::size_t nonblank_frames = 0;
  std::size_t two_nonblank_frames = 0;

  void add_utterance(std::size_t token_count, double duration_s, std::size_t subsampled_frames,
                     std::size_t aggregated_frames) {
    tokens += static_cast<double>(token_count);
    seconds += duration_s;
    frames_before += static_cast<double>(subsampled_frames);
    frames_after += static_cast<double>(aggregated_frames);
  }

  void add_outcome(const SlotOutcome& o) {
    ++agg_frames;
    bool nb1 = o.first != kBlankId;
    bool nb2 = o.second > 0;
    if (nb1 || nb2) ++nonblank_frames;
    if (nb1 && nb2 && o.first != o.second) ++two_nonblank_frames;
  }

  UmaStats finish() const {
    if (seconds <= 0.0) throw NumericalError("statistics need a positive total duration");
    UmaStats s;
    s.token_rate = tokens / seconds;
    s.frame_rate_before = frames_before / seconds;
    s.frame_rate_after = frames_before <= 0.0
                             ? 0.0
                             : s.frame_rate_before * (frames_after / frames_before);
    s.nonblank_ratio = agg_frames == 0
                           ? 0.0
                           : static_cast<double>(nonblank_frames) / static_cast<double>(agg_frames);
    if (nonblank_frames > 0)
      s.two_nonblank_ratio =
          static_cast<double>(two_nonblank_frames) / static_cast<double>(nonblank_frames);
    return s;
  }
};

}  // namespace umasplit
