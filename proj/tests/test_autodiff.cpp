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
#include <cmath>
#include <string>
#include <vector>

#include "umasplit/autodiff.hpp"
#include "umasplit/gradcheck.hpp"

using namespace umasplit;
using Catch::Approx;

namespace {

void require_values(const Tensor& t, const std::vector<double>& expect, double tol = 1e-12) {
  REQUIRE(t.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    REQUIRE(t.values()[i] == Approx(expect[i]).margin(tol));
}

}  // namespace

TEST_CASE("matmul computes the textbook product", "[autodiff][forward]") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 2});
  require_values(c, {58, 64, 139, 154});

  SECTION("inner dimension mismatch is rejected") {
    Tensor bad({2, 2}, {1, 2, 3, 4});
    REQUIRE_THROWS_AS(matmul(a, bad), ShapeError);
  }
}

TEST_CASE("add and mul broadcast a trailing suffix or a scalar", "[autodiff][forward]") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor row({2}, {10, 20});
  require_values(add(a, row), {11, 22, 13, 24});
  require_values(mul(a, row), {10, 40, 30, 80});
  require_values(add(a, Tensor::scalar(5.0)), {6, 7, 8, 9});
  require_values(add(row, a), {11, 22, 13, 24});
  require_values(sub(a, row), {-9, -18, -7, -16});

  Tensor col({2, 1}, {1, 2});
  REQUIRE_THROWS_AS(add(a, col), ShapeError);
}

TEST_CASE("softmax and log-softmax act on the last axis", "[autodiff][forward]") {
  Tensor x({2}, {0.0, std::log(3.0)});
  require_values(softmax(x), {0.25, 0.75});

  Tensor logits({2, 3}, {1.0, -2.0, 0.5, 3.0, 3.0, 3.0});
  Tensor p = softmax(logits);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += p.values()[r * 3 + j];
    REQUIRE(s == Approx(1.0));
  }
  Tensor lp = log_softmax(logits);
  for (std::size_t i = 0; i < lp.size(); ++i)
    REQUIRE(std::exp(lp.values()[i]) == Approx(p.values()[i]));
}

TEST_CASE("layer norm normalizes rows then applies gain and bias", "[autodiff][forward]") {
  Tensor x({1, 2}, {1, 3});
  Tensor gain({2}, {2, 2});
  Tensor bias({2}, {1, -1});
  require_values(layer_norm(x, gain, bias), {-1, 1}, 1e-6);
  REQUIRE_THROWS_AS(layer_norm(x, Tensor({3}, {1, 1, 1}), bias), ShapeError);
}

TEST_CASE("concat, slice, transpose, reshape move values without surprises",
          "[autodiff][forward]") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({1, 2}, {5, 6});
  require_values(concat({a, b}, 0), {1, 2, 3, 4, 5, 6});
  Tensor c({2, 1}, {9, 8});
  require_values(concat({a, c}, 1), {1, 2, 9, 3, 4, 8});
  REQUIRE_THROWS_AS(concat({a, b}, 1), ShapeError);

  Tensor t({3, 5}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14});
  Tensor s = slice(t, {Range{0, 2, 2}, Range{1, 2, 2}});
  REQUIRE(s.shape() == Shape{2, 2});
  require_values(s, {1, 3, 11, 13});
  REQUIRE_THROWS_AS(slice(t, {Range{0, 4, 1}, Range{0, 5, 1}}), ShapeError);

  Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
  require_values(transpose(m), {1, 4, 2, 5, 3, 6});
  require_values(reshape(m, {3, 2}), {1, 2, 3, 4, 5, 6});
  REQUIRE_THROWS_AS(reshape(m, {4, 2}), ShapeError);
}

TEST_CASE("gather copies table rows with repeats", "[autodiff][forward]") {
  Tensor table({3, 2}, {1, 2, 3, 4, 5, 6});
  require_values(gather_rows(table, {2, 0, 2}), {5, 6, 1, 2, 5, 6});
  REQUIRE_THROWS_AS(gather_rows(table, {3}), ShapeError);
}

TEST_CASE("segment weighted mean averages shared-boundary segments", "[autodiff][forward]") {
  Tensor frames({3, 2}, {1, 10, 3, 30, 5, 50});
  Tensor alpha({3}, {1, 1, 2});
  std::vector<SegmentSpan> segs{{1, 2}, {2, 3}};
  Tensor c = segment_weighted_mean(frames, alpha, segs);
  REQUIRE(c.shape() == Shape{2, 2});
  require_values(c, {2, 20, 13.0 / 3.0, 130.0 / 3.0}, 1e-12);

  SECTION("an all-zero weight segment is flagged, not divided by") {
    Tensor zeros({3}, {0, 0, 0});
    REQUIRE_THROWS_AS(segment_weighted_mean(frames, zeros, segs), NumericalError);
  }
  SECTION("segments must stay inside the frame range") {
    REQUIRE_THROWS_AS(segment_weighted_mean(frames, alpha, {{1, 4}}), ShapeError);
    REQUIRE_THROWS_AS(segment_weighted_mean(frames, alpha, {{0, 2}}), ShapeError);
  }
}

TEST_CASE("masked fill and logaddexp", "[autodiff][forward]") {
  Tensor t({2, 2}, {1, 2, 3, 4});
  require_values(masked_fill(t, {1, 0, 0, 1}, -7.0), {-7, 2, 3, -7});
  REQUIRE_THROWS_AS(masked_fill(t, {1, 0}, 0.0), ShapeError);

  Tensor a({2}, {0.0, -1e30});
  Tensor b({2}, {0.0, 5.0});
  Tensor y = logaddexp(a, b);
  REQUIRE(y.values()[0] == Approx(std::log(2.0)));
  REQUIRE(y.values()[1] == Approx(5.0));
}

TEST_CASE("backward returns gradients for every named parameter", "[autodiff][backward]") {
  Tensor w({3}, {1, 2, 3});
  w.set_requires_grad(true).set_name("w");
  Tensor x({3}, {4, 5, 6});

  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(mul(w, x));
  REQUIRE(y.item() == Approx(32.0));
  auto grads = tape.backward(y);
  REQUIRE(grads.size() == 1);
  require_values(grads.at("w"), {4, 5, 6});
}

TEST_CASE("a parameter used twice accumulates both paths", "[autodiff][backward]") {
  Tensor w({2}, {1.0, -2.0});
  w.set_requires_grad(true).set_name("w");
  Tensor a({2}, {3, 4});
  Tensor b({2}, {10, 20});

  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(add(mul(w, a), mul(w, b)));
  auto grads = tape.backward(y);
  require_values(grads.at("w"), {13, 24});
}

TEST_CASE("a named leaf the output never reaches gets zero gradients",
          "[autodiff][backward]") {
  Tensor w({2}, {1, 1});
  w.set_requires_grad(true).set_name("w");
  Tensor unused({3}, {9, 9, 9});
  unused.set_requires_grad(true).set_name("unused");

  Tape tape;
  TapeScope scope(tape);
  tape.watch(unused);
  Tensor y = sum(mul(w, w));
  auto grads = tape.backward(y);
  REQUIRE(grads.size() == 2);
  require_values(grads.at("unused"), {0, 0, 0});
  require_values(grads.at("w"), {2, 2});
}

TEST_CASE("gradients flow to watched inputs via grad_of", "[autodiff][backward]") {
  Tensor x({2}, {3.0, -1.0});
  x.set_requires_grad(true);

  Tape tape;
  TapeScope scope(tape);
  Tensor xw = tape.watch(x, "features");
  Tensor y = sum(mul(xw, xw));
  tape.backward(y);
  require_values(tape.grad_of(xw), {6.0, -2.0});
}

TEST_CASE("tape misuse is rejected loudly", "[autodiff][backward]") {
  Tensor w({2}, {1, 2});
  w.set_requires_grad(true).set_name("w");

  Tape tape;
  TapeScope scope(tape);
  Tensor y2 = mul(w, w);

  SECTION("non-scalar outputs cannot start backward") {
    REQUIRE_THROWS_MATCHES(tape.backward(y2), ShapeError,
                           Catch::Matchers::Message("backward requires scalar"));
  }
  SECTION("a tape is single-use") {
    Tensor y = sum(y2);
    tape.backward(y);
    REQUIRE_THROWS_AS(tape.backward(y), std::logic_error);
    REQUIRE_THROWS_AS(mul(w, w), std::logic_error);
  }
  SECTION("tensors cannot cross tapes") {
    Tape other;
    TapeScope inner(other);
    REQUIRE_THROWS_AS(mul(y2, w), std::logic_error);
  }
  SECTION("plain tensors are not on the tape") {
    Tensor plain({1}, {0.5});
    REQUIRE_THROWS_AS(tape.grad_of(plain), std::logic_error);
  }
}

TEST_CASE("NoGradGuard suspends recording on this thread", "[autodiff][backward]") {
  Tensor w({2}, {1, 2});
  w.set_requires_grad(true).set_name("w");

  Tape tape;
  TapeScope scope(tape);
  {
    NoGradGuard guard;
    Tensor y = sum(mul(w, w));
    REQUIRE_FALSE(y.in_graph());
    REQUIRE(tape.node_count() == 0);
  }
  Tensor y = sum(mul(w, w));
  REQUIRE(y.in_graph());
  REQUIRE(tape.node_count() > 0);
}

TEST_CASE("ops run outside any tape scope are pure value computations",
          "[autodiff][backward]") {
  Tensor w({2}, {1, 2});
  w.set_requires_grad(true);
  Tensor y = sum(mul(w, w));
  REQUIRE_FALSE(y.in_graph());
  REQUIRE(y.item() == Approx(5.0));
}

TEST_CASE("runtime finite checks catch overflow in op outputs", "[autodiff][finite]") {
  Tensor big({1}, {1000.0});
  REQUIRE_THROWS_AS(exp(big), NumericalError);
}

TEST_CASE("finite differences agree with reverse mode on every op",
          "[autodiff][gradcheck]") {
  auto errs = op_gradient_suite(20260815);
  REQUIRE(errs.size() == 21);
  for (const auto& [op, err] : errs) {
    INFO("op " << op);
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("the checker reports the coordinate of a non-finite probe",
          "[autodiff][gradcheck]") {
  Tensor x({1}, {1e-6});
  auto f = [](const Tensor& v) { return sum(log(v)); };
  try {
    finite_difference_check(f, x, 1e-5);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    REQUIRE(std::string(e.what()).find("coordinate 0") != std::string::npos);
  }
}

TEST_CASE("a path fingerprint skips coordinates that change control flow",
          "[autodiff][gradcheck]") {
  Tensor x({2}, {0.5e-5, 1.0});
  auto f = [](const Tensor& v) {
    if (v.values()[0] >= 0.0) return sum(mul(v, v));
    return sum(v);
  };
  auto fp = [](const Tensor& v) { return std::string(v.values()[0] >= 0.0 ? "+" : "-"); };
  auto report = finite_difference_report(f, x, 1e-5, fp);
  REQUIRE(report.skipped == 1);
  REQUIRE(report.checked == 1);
  REQUIRE(report.max_rel_err < 1e-6);
}

TEST_CASE("deterministic rng reproduces and separates streams", "[rng]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
  Rng c(Rng::mix(42, 0)), d(Rng::mix(42, 1));
  REQUIRE(c.uniform() != d.uniform());
  Rng e(7);
  for (int i = 0; i < 1000; ++i) {
    int v = e.uniform_int(3, 5);
    REQUIRE(v >= 3);
    REQUIRE(v <= 5);
  }
}
