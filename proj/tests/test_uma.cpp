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

#include <catch2/catch_amalgamated.hpp>
#include <sstream>
#include <vector>

#include "umasplit/gradcheck.hpp"
#include "umasplit/uma.hpp"

using namespace umasplit;
using Catch::Approx;

namespace {

std::vector<std::size_t> valleys_of(const std::vector<double>& alpha) {
  return find_valleys(alpha).valleys;
}

std::string fingerprint_valleys(const UmaSegmentation& seg) {
  std::ostringstream ss;
  for (std::size_t v : seg.valleys) ss << v << ',';
  return ss.str();
}

}  // namespace

TEST_CASE("weight prediction is a per-frame sigmoid scalar", "[uma]") {
  Rng rng(17);
  ParamMap m;
  init_uma(m, 4, rng);
  for (std::size_t t : {std::size_t{1}, std::size_t{5}, std::size_t{100}}) {
    Tensor e(Shape{t, 4});
    for (double& v : e.values()) v = rng.normal();
    Tensor alpha = predict_weights(e, m);
    REQUIRE(alpha.shape() == Shape{t});
    for (double v : alpha.values()) {
      REQUIRE(v > 0.0);
      REQUIRE(v < 1.0);
    }
  }

  SECTION("all-zero weights leave the sigmoid at one half") {
    for (auto& [k, v] : m)
      for (double& x : v.values()) x = 0.0;
    Tensor e(Shape{3, 4}, 0.7);
    Tensor alpha = predict_weights(e, m);
    for (double v : alpha.values()) REQUIRE(v == 0.5);
  }
}

TEST_CASE("valley detection with ties and sentinels", "[uma]") {
  REQUIRE(valleys_of({0.9, 0.4, 0.7, 0.3, 0.8}) == std::vector<std::size_t>{0, 2, 4, 5});
  REQUIRE(valleys_of({0.1, 0.2, 0.3}) == std::vector<std::size_t>{0, 3});
  REQUIRE(valleys_of({0.5, 0.5, 0.5}) == std::vector<std::size_t>{0, 2, 3});
  REQUIRE(valleys_of({0.7}) == std::vector<std::size_t>{0, 1});
  REQUIRE(valleys_of({0.7, 0.2}) == std::vector<std::size_t>{0, 2});

  UmaSegmentation seg = find_valleys(std::vector<double>{0.9, 0.4, 0.7, 0.3, 0.8});
  REQUIRE(seg.segments.size() == 3);
  REQUIRE(seg.segments[0].begin == 1);
  REQUIRE(seg.segments[0].end == 2);
  REQUIRE(seg.segments[1].begin == 2);
  REQUIRE(seg.segments[1].end == 4);
  REQUIRE(seg.segments[2].begin == 4);
  REQUIRE(seg.segments[2].end == 5);
  REQUIRE(segmentation_violation(seg, BoundaryMode::kShared).empty());
}

TEST_CASE("right boundary mode tiles frames without overlap", "[uma]") {
  UmaSegmentation seg =
      find_valleys(std::vector<double>{0.9, 0.4, 0.7, 0.3, 0.8}, BoundaryMode::kRight);
  REQUIRE(seg.segments.size() == 3);
  REQUIRE(seg.segments[0].begin == 1);
  REQUIRE(seg.segments[0].end == 1);
  REQUIRE(seg.segments[1].begin == 2);
  REQUIRE(seg.segments[1].end == 3);
  REQUIRE(seg.segments[2].begin == 4);
  REQUIRE(seg.segments[2].end == 5);
  REQUIRE(segmentation_violation(seg, BoundaryMode::kRight).empty());
}

TEST_CASE("random weight curves always yield a lawful segmentation", "[uma]") {
  Rng rng(2024);
  for (int trial = 0; trial < 2000; ++trial) {
    std::size_t t = 1 + rng.uniform_int(0, 29);
    std::vector<double> alpha(t);
    for (double& v : alpha) v = rng.uniform();
    for (BoundaryMode mode : {BoundaryMode::kShared, BoundaryMode::kRight}) {
      UmaSegmentation seg = find_valleys(alpha, mode);
      INFO("T=" << t << " mode=" << boundary_mode_name(mode));
      REQUIRE(segmentation_violation(seg, mode).empty());
      std::size_t count = seg.segments.size();
      REQUIRE(count >= 1);
      REQUIRE(count <= t);
      // Continuous draws never tie, so interior valleys cannot be adjacent.
      REQUIRE(count <= t / 2 + 1);
    }
  }
}

TEST_CASE("tied plateaus can exceed the no-tie segment bound", "[uma]") {
  UmaSegmentation seg = find_valleys(std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5});
  REQUIRE(seg.segments.size() == 4);  // above floor(5/2)+1; the weak 1..T bound still holds
  REQUIRE(segmentation_violation(seg, BoundaryMode::kShared).empty());
}

TEST_CASE("aggregation is the alpha-weighted segment mean", "[uma]") {
  SECTION("hand-evaluated two-segment case") {
    Tensor e({4, 1}, {1, 2, 3, 4});
    Tensor alpha({4}, {0.9, 0.1, 0.9, 0.1});
    UmaSegmentation seg = find_valleys(alpha);
    REQUIRE(seg.valleys == std::vector<std::size_t>{0, 2, 4});
    Tensor c = aggregate(e, alpha, seg);
    REQUIRE(c.shape() == Shape{2, 1});
    REQUIRE(c.values()[0] == Approx(1.1));                 // (0.9*1 + 0.1*2) / 1.0
    REQUIRE(c.values()[1] == Approx(3.3 / 1.1));           // (0.1*2 + 0.9*3 + 0.1*4) / 1.1
  }
  SECTION("uniform weights reduce to arithmetic means") {
    Tensor e({3, 2}, {1, 10, 2, 20, 6, 60});
    Tensor alpha({3}, {0.4, 0.4, 0.4});
    UmaSegmentation seg = find_valleys(alpha);  // flat: interior valley at 2
    Tensor c = aggregate(e, alpha, seg);
    REQUIRE(c.values()[0] == Approx(1.5));
    REQUIRE(c.values()[1] == Approx(15.0));
    REQUIRE(c.values()[2] == Approx(4.0));
    REQUIRE(c.values()[3] == Approx(40.0));
  }
  SECTION("one segment gives the global weighted mean") {
    Tensor e({3, 1}, {1, 2, 3});
    Tensor alpha({3}, {0.2, 0.5, 0.9});
    UmaSegmentation seg = find_valleys(alpha);
    REQUIRE(seg.segments.size() == 1);
    Tensor c = aggregate(e, alpha, seg);
    REQUIRE(c.values()[0] == Approx((0.2 + 1.0 + 2.7) / 1.6));
  }
  SECTION("outputs stay in the coordinate-wise hull of their segment") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
      std::size_t t = 2 + rng.uniform_int(0, 10), d = 3;
      Tensor e(Shape{t, d});
      for (double& v : e.values()) v = rng.normal();
      Tensor alpha(Shape{t});
      for (double& v : alpha.values()) v = 0.05 + 0.9 * rng.uniform();
      UmaSegmentation seg = find_valleys(alpha);
      Tensor c = aggregate(e, alpha, seg);
      for (std::size_t i = 0; i < seg.segments.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) {
          double lo = 1e300, hi = -1e300;
          for (std::size_t fr = seg.segments[i].begin; fr <= seg.segments[i].end; ++fr) {
            lo = std::min(lo, e.values()[(fr - 1) * d + j]);
            hi = std::max(hi, e.values()[(fr - 1) * d + j]);
          }
          REQUIRE(c.values()[i * d + j] >= lo - 1e-12);
          REQUIRE(c.values()[i * d + j] <= hi + 1e-12);
        }
    }
  }
  SECTION("mismatched segmentation is rejected") {
    Tensor e({4, 1}, {1, 2, 3, 4});
    Tensor alpha({4}, 0.5);
    UmaSegmentation seg = find_valleys(std::vector<double>{0.5, 0.5});
    REQUIRE_THROWS_AS(aggregate(e, alpha, seg), ShapeError);
  }
}

TEST_CASE("gradients through weight prediction and aggregation match FD",
          "[uma][gradcheck]") {
  Rng rng(31);
  std::size_t t = 6, d = 3;
  ParamMap m;
  init_uma(m, d, rng);
  // The zero-started output layer sits on a tie plateau where probes move
  // the valleys; shift it so the check runs at a stable segmentation.
  for (double& v : m.at("uma.ffn.2.w").values()) v = 0.4 * rng.normal();
  Tensor e(Shape{t, d});
  for (double& v : e.values()) v = rng.normal();
  Tensor w(Shape{0, 0});  // reshaped below once the segment count is known

  auto pipeline = [&](const Tensor& frames, const ParamMap& params) {
    Tensor alpha = predict_weights(frames, params);
    UmaSegmentation seg = find_valleys(alpha.values());
    return aggregate(frames, alpha, seg);
  };
  std::size_t segs;
  {
    NoGradGuard ng;
    segs = pipeline(e, m).dim(0);
  }
  w = Tensor(Shape{segs, d});
  Rng wr(8);
  for (double& v : w.values()) v = wr.normal();

  SECTION("with respect to the frames, at stable points") {
    auto report = finite_difference_report(
        [&](const Tensor& v) { return sum(mul(pipeline(v, m), w)); }, e, 1e-6,
        [&](const Tensor& v) {
          NoGradGuard ng;
          return fingerprint_valleys(find_valleys(predict_weights(v, m).values()));
        });
    REQUIRE(report.checked > 0);
    REQUIRE(report.max_rel_err < 1e-5);
  }
  SECTION("with respect to the weight-head parameters") {
    auto report = finite_difference_report(
        [&](const Tensor& v) {
          ParamMap patched = m;
          patched.at("uma.ffn.2.w") = v;
          return sum(mul(pipeline(e, patched), w));
        },
        m.at("uma.ffn.2.w"), 1e-6, [&](const Tensor& v) {
          NoGradGuard ng;
          ParamMap patched = m;
          patched.at("uma.ffn.2.w") = v;
          return fingerprint_valleys(find_valleys(predict_weights(e, patched).values()));
        });
    REQUIRE(report.checked > 0);
    REQUIRE(report.max_rel_err < 1e-5);
  }
}
