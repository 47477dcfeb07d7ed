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

#include "umasplit/gradcheck.hpp"
#include "umasplit/split.hpp"

using namespace umasplit;
using Catch::Approx;

TEST_CASE("split doubles the frame count and interleaves slots", "[split]") {
  std::size_t d = 6;
  Rng rng(41);
  ParamMap m;
  init_split(m, d, rng);

  for (std::size_t count : {std::size_t{1}, std::size_t{4}}) {
    Tensor e(Shape{count, d});
    for (double& v : e.values()) v = rng.normal();
    Tensor s = split_frames(e, m);
    REQUIRE(s.shape() == Shape{2 * count, d});

    Tensor first = layer_norm_at(e, m, "split.ln1");
    Tensor second = layer_norm_at(ffn_swish(e, m, "split.ffn"), m, "split.ln2");
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        REQUIRE(s.values()[(2 * i) * d + j] == first.values()[i * d + j]);
        REQUIRE(s.values()[(2 * i + 1) * d + j] == second.values()[i * d + j]);
      }
    for (std::size_t row = 0; row < 2 * count; ++row) {
      REQUIRE(split_row_segment(row) == row / 2);
      REQUIRE(split_row_is_first_slot(row) == (row % 2 == 0));
    }
  }
}

TEST_CASE("the two slot norms have independent parameters", "[split]") {
  Rng rng(42);
  ParamMap m;
  init_split(m, 4, rng);
  REQUIRE(m.count("split.ln1.g") == 1);
  REQUIRE(m.count("split.ln1.b") == 1);
  REQUIRE(m.count("split.ln2.g") == 1);
  REQUIRE(m.count("split.ln2.b") == 1);
  REQUIRE(m.size() == 8);  // two norms plus the two-layer expansion FFN

  m.at("split.ln2.g").values()[0] = 3.0;
  REQUIRE(m.at("split.ln1.g").values()[0] == 1.0);
}

TEST_CASE("a zeroed split FFN makes every second slot identical", "[split]") {
  std::size_t d = 5;
  Rng rng(43);
  ParamMap m;
  init_split(m, d, rng);
  for (const char* name : {"split.ffn.1.w", "split.ffn.1.b", "split.ffn.2.w", "split.ffn.2.b"})
    for (double& v : m.at(name).values()) v = 0.0;

  Tensor e(Shape{3, d});
  for (double& v : e.values()) v = rng.normal();
  Tensor s = split_frames(e, m);
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t j = 0; j < d; ++j)
      REQUIRE(s.values()[(2 * i + 1) * d + j] == Approx(s.values()[1 * d + j]).margin(1e-12));
}

TEST_CASE("gradients through the split module match finite differences",
          "[split][gradcheck]") {
  std::size_t d = 4;
  Rng rng(44);
  ParamMap m;
  init_split(m, d, rng);
  Tensor e(Shape{2, d});
  for (double& v : e.values()) v = rng.normal();
  Tensor w(Shape{4, d});
  for (double& v : w.values()) v = rng.normal();

  double err = finite_difference_check(
      [&](const Tensor& v) { return sum(mul(split_frames(v, m), w)); }, e, 1e-5);
  REQUIRE(err < 1e-6);

  double perr = finite_difference_check(
      [&](const Tensor& v) {
        ParamMap patched = m;
        patched.at("split.ln2.g") = v;
        return sum(mul(split_frames(e, patched), w));
      },
      m.at("split.ln2.g"), 1e-5);
  REQUIRE(perr < 1e-6);
}
