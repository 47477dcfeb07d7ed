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

#include <cmath>
#include <string>
#include <vector>

#include "umasplit/autodiff.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// CTC over log-probabilities [N, V+1] with blank fixed at column 0. The loss
// is the log-space forward recursion assembled from recorded ops, so
// reverse mode differentiates it like any other graph; impossible lattice
// cells carry a large negative sentinel instead of -inf to keep every
// intermediate finite.
// ---------------------------------------------------------------------------

inline constexpr int kBlankId = 0;
inline constexpr double kLogZero = -1e30;

/// Minimum frame count that admits an alignment: one frame per label plus a
/// separating blank between equal neighbors.
inline std::size_t ctc_min_frames(const std::vector<int>& y) {
  std::size_t need = y.size();
  for (std::size_t i = 1; i < y.size(); ++i) need += y[i] == y[i - 1] ? 1 : 0;
  return need;
}

inline bool ctc_computable(std::size_t frames, const std::vector<int>& y) {
  return frames >= ctc_min_frames(y);
}

namespace detail {

inline void validate_log_probs(const Tensor& lp, const std::vector<int>& y) {
  if (lp.rank() != 2 || lp.dim(1) < 2)
    throw ShapeError("ctc: log-probs must be [N, V+1] with V >= 1");
  std::size_t vocab = lp.dim(1);
  for (int id : y)
    if (id < 1 || static_cast<std::size_t>(id) >= vocab)
      throw ShapeError("ctc: label " + std::to_string(id) + " outside [1, " +
                       std::to_string(vocab - 1) + "]");
  // Loose normalization sanity check; catches raw logits while still
  // admitting finite-difference probes of individual entries.
  for (std::size_t r = 0; r < lp.dim(0); ++r) {
    const double* row = lp.data() + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    if (std::abs(mx + std::log(s)) > 1e-3)
      throw NumericalError("ctc: log-probability row " + std::to_string(r) +
                           " does not normalize");
  }
}

inline double logaddexp_val(double a, double b) {
  double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

}  // namespace detail

/// Negative log-likelihood of the label sequence under the CTC alignment
/// model. Throws CtcIncomputable when no alignment fits in N frames.
inline Tensor ctc_loss(const Tensor& lp, const std::vector<int>& y) {
  detail::validate_log_probs(lp, y);
  std::size_t n = lp.dim(0), vocab = lp.dim(1);
  if (!ctc_computable(n, y)) throw CtcIncomputable("CTC incomputable");

  // Blank-interleaved target: blank, y1, blank, y2, ..., blank.
  std::vector<std::size_t> z;
  z.push_back(kBlankId);
  for (int id : y) {
    z.push_back(static_cast<std::size_t>(id));
    z.push_back(kBlankId);
  }
  std::size_t states = z.size();

  // States that may not take the two-step skip: blanks, and labels equal to
  // the label two states back.
  std::vector<std::uint8_t> no_skip(states, 1);
  for (std::size_t s = 2; s < states; ++s)
    no_skip[s] = (z[s] == kBlankId || z[s] == z[s - 2]) ? 1 : 0;

  auto state_emissions = [&](std::size_t t) {
    Tensor row = reshape(slice(lp, {Range{t, 1, 1}, Range{0, vocab, 1}}), {vocab, 1});
    return reshape(gather_rows(row, z), {states});
  };

  // Only the first two states may start a path.
  std::vector<std::uint8_t> not_start(states, 1);
  not_start[0] = 0;
  if (states > 1) not_start[1] = 0;
  Tensor alpha = masked_fill(state_emissions(0), not_start, kLogZero);

  Tensor logzero1({1}, kLogZero);
  Tensor logzero2({2}, kLogZero);
  for (std::size_t t = 1; t < n; ++t) {
    Tensor stay = alpha;
    if (states >= 2) {
      Tensor step = concat({logzero1, slice(alpha, {Range{0, states - 1, 1}})}, 0);
      stay = logaddexp(stay, step);
    }
    if (states >= 3) {
      Tensor skip = concat({logzero2, slice(alpha, {Range{0, states - 2, 1}})}, 0);
      skip = masked_fill(skip, no_skip, kLogZero);
      stay = logaddexp(stay, skip);
    }
    alpha = add(state_emissions(t), stay);
  }

  Tensor total;
  if (states == 1) {
    total = reshape(alpha, {});
  } else {
    Tensor last = slice(alpha, {Range{states - 1, 1, 1}});
    Tensor prev = slice(alpha, {Range{states - 2, 1, 1}});
    total = reshape(logaddexp(last, prev), {});
  }
  return scale(total, -1.0);
}

/// Exhaustive-alignment oracle: sums the probability of every frame string
/// that collapses to y. Pure value computation.
inline double ctc_loss_bruteforce_value(const Tensor& lp, const std::vector<int>& y) {
  detail::validate_log_probs(lp, y);
  std::size_t n = lp.dim(0), vocab = lp.dim(1);
  double space = std::pow(static_cast<double>(vocab), static_cast<double>(n));
  if (space > 1e7) throw std::length_error("ctc brute force: state space too large");

  std::vector<std::size_t> a(n, 0);
  auto advance = [&]() {
    for (std::size_t t = n; t-- > 0;) {
      if (++a[t] < vocab) return true;
      a[t] = 0;
    }
    return false;
  };
  std::vector<int> collapsed;
  double acc = 0.0;
  bool found = false;
  do {
    collapsed.clear();
    double logp = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      logp += lp.values()[t * vocab + a[t]];
      if (a[t] != 0 && (t == 0 || a[t] != a[t - 1])) collapsed.push_back(static_cast<int>(a[t]));
    }
    if (collapsed.size() == y.size() && std::equal(collapsed.begin(), collapsed.end(), y.begin())) {
      acc = found ? detail::logaddexp_val(acc, logp) : logp;
      found = true;
    }
  } while (advance());
  if (!found) throw CtcIncomputable("CTC incomputable");
  return -acc;
}

/// Per-frame argmax, collapse runs, drop blanks. Ties pick the lowest id.
inline std::vector<int> greedy_decode(const Tensor& lp) {
  if (lp.rank() != 2 || lp.dim(1) < 2)
    throw ShapeError("greedy decode: log-probs must be [N, V+1]");
  std::size_t n = lp.dim(0), vocab = lp.dim(1);
  std::vector<int> out;
  std::size_t prev = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double* row = lp.data() + t * vocab;
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (row[j] > row[best]) best = j;
    if (best != 0 && best != prev) out.push_back(static_cast<int>(best));
    prev = best;
  }
  return out;
}

}  // namespace umasplit
