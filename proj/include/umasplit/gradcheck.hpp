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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "umasplit/autodiff.hpp"
#include "umasplit/common.hpp"
#include "umasplit/tensor.hpp"

namespace umasplit {

/// Builds a scalar objective from one input tensor using recorded ops.
using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Summarizes any data-dependent control flow of the objective (e.g. a
/// segmentation) so the checker can skip coordinates where a perturbation
/// changes the program path and the central difference is meaningless.
using PathFingerprint = std::function<std::string(const Tensor&)>;

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Central-difference check of reverse-mode gradients, coordinate by
/// coordinate. Relative error is |analytic - fd| / max(1, |analytic|).
/// A non-finite objective at a perturbed point raises NumericalError
/// naming the coordinate. An explicit coordinate list restricts the sweep
/// (the analytic pass always covers everything).
inline FdReport finite_difference_report(const ScalarFn& f, const Tensor& x, double eps,
                                         const PathFingerprint& fingerprint = {},
                                         const std::vector<std::size_t>& coords = {}) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw NumericalError("finite difference step must be in (0, 1e-2]");
  Tensor base = x.clone();
  base.set_requires_grad(true);

  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor xw = tape.watch(base, "fd-input");
    Tensor y = f(xw);
    if (y.size() != 1) throw ShapeError("finite difference requires a scalar objective");
    if (!std::isfinite(y.item()))
      throw NumericalError("finite difference: non-finite objective at the base point");
    tape.backward(y);
    analytic = tape.grad_of(xw);
  }
  for (double v : analytic.values())
    if (!std::isfinite(v)) throw NumericalError("finite difference: non-finite analytic gradient");

  NoGradGuard no_grad;
  FdReport report;
  std::string base_path = fingerprint ? fingerprint(base) : std::string();
  Tensor probe = base.clone();
  double* p = probe.data();
  std::vector<std::size_t> sweep = coords;
  if (sweep.empty())
    for (std::size_t i = 0; i < probe.size(); ++i) sweep.push_back(i);
  for (std::size_t i : sweep) {
    if (i >= probe.size())
      throw ShapeError("finite difference: coordinate " + std::to_string(i) + " out of range");
    double saved = p[i];
    p[i] = saved + eps;
    if (fingerprint && fingerprint(probe) != base_path) {
      p[i] = saved;
      ++report.skipped;
      continue;
    }
    double y_plus, y_minus;
    try {
      y_plus = f(probe).item();
      p[i] = saved - eps;
      if (fingerprint && fingerprint(probe) != base_path) {
        p[i] = saved;
        ++report.skipped;
        continue;
      }
      y_minus = f(probe).item();
    } catch (const NumericalError&) {
      y_plus = y_minus = std::nan("");
    }
    p[i] = saved;
    if (!std::isfinite(y_plus) || !std::isfinite(y_minus))
      throw NumericalError("finite difference: non-finite objective at coordinate " +
                           std::to_string(i));
    double fd = (y_plus - y_minus) / (2.0 * eps);
    double a = analytic.values()[i];
    double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.checked;
  }
  return report;
}

/// Max relative error over all coordinates.
inline double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps) {
  return finite_difference_report(f, x, eps).max_rel_err;
}

namespace detail {

// Scalar objective that mixes all coordinates with fixed random weights so
// every gradient entry is exercised.
inline Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

inline Tensor rand_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline Tensor fd_slice(const Tensor& x, std::size_t start, Shape shape) {
  std::size_t n = shape_numel(shape);
  Tensor flat = slice(x, {Range{start, n, 1}});
  return reshape(flat, std::move(shape));
}

}  // namespace detail

/// Runs the finite-difference check on a small random case for every
/// primitive op; returns op name -> max relative error. Multi-input ops
/// pull all operands out of one flat input so a single check covers every
/// gradient path.
inline std::map<std::string, double> op_gradient_suite(std::uint64_t seed, double eps = 1e-5) {
  std::map<std::string, double> out;
  Rng rng(seed);
  auto run = [&](OpKind kind, const Tensor& x, const ScalarFn& f) {
    double err = finite_difference_check(f, x, eps);
    auto [it, inserted] = out.emplace(op_kind_name(kind), err);
    if (!inserted) it->second = std::max(it->second, err);
  };

  {
    Tensor w = detail::rand_tensor(rng, {3, 2}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {20}, -1.0, 1.0);
    run(OpKind::kMatmul, x, [w](const Tensor& v) {
      Tensor a = detail::fd_slice(v, 0, {3, 4});
      Tensor b = detail::fd_slice(v, 12, {4, 2});
      return detail::weighted_sum(matmul(a, b), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 3}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {9}, -1.0, 1.0);
    run(OpKind::kAdd, x, [w](const Tensor& v) {
      Tensor a = detail::fd_slice(v, 0, {2, 3});
      Tensor b = detail::fd_slice(v, 6, {3});
      return detail::weighted_sum(add(a, b), w);
    });
    run(OpKind::kMul, x, [w](const Tensor& v) {
      Tensor a = detail::fd_slice(v, 0, {2, 3});
      Tensor b = detail::fd_slice(v, 6, {3});
      return detail::weighted_sum(mul(a, b), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 3}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {2, 3}, -1.5, 1.5);
    run(OpKind::kScale, x,
        [w](const Tensor& v) { return detail::weighted_sum(scale(v, -1.7), w); });
    run(OpKind::kSigmoid, x,
        [w](const Tensor& v) { return detail::weighted_sum(sigmoid(v), w); });
    run(OpKind::kSwish, x, [w](const Tensor& v) { return detail::weighted_sum(swish(v), w); });
    run(OpKind::kTanh, x, [w](const Tensor& v) { return detail::weighted_sum(tanh(v), w); });
    run(OpKind::kExp, x, [w](const Tensor& v) { return detail::weighted_sum(exp(v), w); });
    Tensor xp = detail::rand_tensor(rng, {2, 3}, 0.5, 2.0);
    run(OpKind::kLog, xp, [w](const Tensor& v) { return detail::weighted_sum(log(v), w); });
    run(OpKind::kMaskedFill, x, [w](const Tensor& v) {
      return detail::weighted_sum(masked_fill(v, {1, 0, 0, 1, 0, 0}, -3.0), w);
    });
    run(OpKind::kReshape, x,
        [w](const Tensor& v) { return detail::weighted_sum(reshape(v, {2, 3}), w); });
    run(OpKind::kSum, x, [](const Tensor& v) { return sum(v); });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 4}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {2, 4}, -2.0, 2.0);
    run(OpKind::kSoftmax, x,
        [w](const Tensor& v) { return detail::weighted_sum(softmax(v), w); });
    run(OpKind::kLogSoftmax, x,
        [w](const Tensor& v) { return detail::weighted_sum(log_softmax(v), w); });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 4}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {16}, -1.0, 1.0);
    run(OpKind::kLayerNorm, x, [w](const Tensor& v) {
      Tensor in = detail::fd_slice(v, 0, {2, 4});
      Tensor gain = detail::fd_slice(v, 8, {4});
      Tensor bias = detail::fd_slice(v, 12, {4});
      return detail::weighted_sum(layer_norm(in, gain, bias), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 5}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {10}, -1.0, 1.0);
    run(OpKind::kConcat, x, [w](const Tensor& v) {
      Tensor a = detail::fd_slice(v, 0, {2, 2});
      Tensor b = detail::fd_slice(v, 4, {2, 3});
      return detail::weighted_sum(concat({a, b}, 1), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 2}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {3, 5}, -1.0, 1.0);
    run(OpKind::kSlice, x, [w](const Tensor& v) {
      return detail::weighted_sum(slice(v, {Range{0, 2, 2}, Range{1, 2, 2}}), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {3, 2}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {2, 3}, -1.0, 1.0);
    run(OpKind::kTranspose, x,
        [w](const Tensor& v) { return detail::weighted_sum(transpose(v), w); });
  }
  {
    Tensor w = detail::rand_tensor(rng, {4, 3}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {4, 3}, -1.0, 1.0);
    run(OpKind::kGather, x, [w](const Tensor& v) {
      return detail::weighted_sum(gather_rows(v, {0, 2, 2, 1}), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {3, 3}, -1.0, 1.0);
    Tensor x(Shape{20});
    for (std::size_t i = 0; i < 15; ++i) x.values()[i] = rng.normal();
    for (std::size_t i = 15; i < 20; ++i) x.values()[i] = 0.1 + 0.9 * rng.uniform();
    std::vector<SegmentSpan> segs{{1, 2}, {2, 4}, {4, 5}};
    run(OpKind::kSegmentWeightedMean, x, [w, segs](const Tensor& v) {
      Tensor frames = detail::fd_slice(v, 0, {5, 3});
      Tensor alpha = detail::fd_slice(v, 15, {5});
      return detail::weighted_sum(segment_weighted_mean(frames, alpha, segs), w);
    });
  }
  {
    Tensor w = detail::rand_tensor(rng, {2, 3}, -1.0, 1.0);
    Tensor x = detail::rand_tensor(rng, {12}, -2.0, 2.0);
    run(OpKind::kLogAddExp, x, [w](const Tensor& v) {
      Tensor a = detail::fd_slice(v, 0, {2, 3});
      Tensor b = detail::fd_slice(v, 6, {2, 3});
      return detail::weighted_sum(logaddexp(a, b), w);
    });
  }
  return out;
}

}  // namespace umasplit
