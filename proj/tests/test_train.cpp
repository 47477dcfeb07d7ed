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
#include <sstream>

#include "umasplit/train.hpp"

using namespace umasplit;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.feat_dim = 8;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.heads = 2;
  cfg.conv_channels = 4;
  cfg.high_rate_layers = 2;
  cfg.low_rate_layers = 2;
  cfg.vocab_size = 3;
  cfg.conditioning_layers = {1, 2};
  cfg.low_rate_inter_layers = {1};
  return cfg;
}

SynthConfig easy_language() {
  SynthConfig s;
  s.vocab_size = 3;
  s.frames_lo = 8;
  s.frames_hi = 10;
  s.tokens_lo = 1;
  s.tokens_hi = 2;
  s.noise_std = 0.05;
  return s;
}

}  // namespace

TEST_CASE("warmup schedule peaks at the warmup step") {
  double peak = lr_schedule(400, 2e-3, 400);
  CHECK(peak == Catch::Approx(2e-3 / 20.0));
  CHECK(lr_schedule(200, 2e-3, 400) == Catch::Approx(0.5 * peak));
  CHECK(lr_schedule(1600, 2e-3, 400) == Catch::Approx(0.5 * peak));
  CHECK(lr_schedule(1, 1.0, 1) == 1.0);
  CHECK_THROWS_AS(lr_schedule(0, 1e-3, 400), NumericalError);
}

TEST_CASE("one optimizer step moves a unit-gradient scalar by the learning rate") {
  ParamMap params;
  params.emplace("p", Tensor(Shape{1}, 1.0));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor(Shape{1}, 1.0));
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.warmup = 1;
  cfg.weight_decay = 0.0;
  AdamWState st;
  auto lr = adamw_step(params, grads, st, cfg);
  REQUIRE(lr.has_value());
  CHECK(*lr == Catch::Approx(0.1));
  // Bias-corrected moments are exactly the gradient on step one, so the
  // update is lr * g / (|g| + eps).
  CHECK(params.at("p").item() == Catch::Approx(0.9).margin(1e-9));
  CHECK(st.step == 1);
}

TEST_CASE("decoupled decay shrinks an idle parameter by (1 - lr*wd)") {
  ParamMap params;
  params.emplace("p", Tensor(Shape{1}, 1.0));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor(Shape{1}, 0.0));
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.warmup = 1;
  cfg.weight_decay = 0.01;
  AdamWState st;
  adamw_step(params, grads, st, cfg);
  CHECK(params.at("p").item() == Catch::Approx(1.0 * (1.0 - 0.1 * 0.01)));
}

TEST_CASE("a non-finite gradient skips the whole step") {
  ParamMap params;
  params.emplace("p", Tensor(Shape{2}, 1.0));
  std::map<std::string, Tensor> grads;
  Tensor g(Shape{2}, 1.0);
  g.values()[1] = std::numeric_limits<double>::quiet_NaN();
  grads.emplace("p", g);
  AdamWConfig cfg;
  AdamWState st;
  CHECK_FALSE(adamw_step(params, grads, st, cfg).has_value());
  CHECK(params.at("p").values() == std::vector<double>{1.0, 1.0});
  CHECK(st.step == 0);
}

TEST_CASE("parameters without a recorded gradient only decay") {
  ParamMap params;
  params.emplace("used", Tensor(Shape{1}, 1.0));
  params.emplace("idle", Tensor(Shape{1}, 1.0));
  std::map<std::string, Tensor> grads;
  grads.emplace("used", Tensor(Shape{1}, 1.0));
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.warmup = 1;
  cfg.weight_decay = 0.01;
  AdamWState st;
  adamw_step(params, grads, st, cfg);
  CHECK(params.at("idle").item() == Catch::Approx(1.0 - 0.1 * 0.01));
  CHECK(params.at("used").item() < 0.95);
}

TEST_CASE("checkpoint averaging picks the best and ignores input order") {
  auto make = [](std::size_t step, double val, double v) {
    Checkpoint ck;
    ck.step = step;
    ck.val_loss = val;
    ck.params.emplace("w", Tensor(Shape{2}, v));
    return ck;
  };
  std::vector<Checkpoint> cks = {make(100, 3.0, 1.0), make(200, 1.0, 5.0),
                                 make(300, 2.0, -5.0)};

  SECTION("k = 1 selects the lowest validation loss") {
    ParamMap avg = average_checkpoints(cks, 1);
    CHECK(avg.at("w").values() == std::vector<double>{5.0, 5.0});
  }

  SECTION("opposite tensors cancel") {
    ParamMap avg = average_checkpoints(cks, 2);
    CHECK(avg.at("w").values() == std::vector<double>{0.0, 0.0});
  }

  SECTION("permutation of the input changes nothing, bit for bit") {
    ParamMap a = average_checkpoints(cks, 3);
    std::vector<Checkpoint> shuffled = {cks[2], cks[0], cks[1]};
    ParamMap b = average_checkpoints(shuffled, 3);
    CHECK(a.at("w").values() == b.at("w").values());
  }

  SECTION("validation-loss ties break toward the earlier step") {
    std::vector<Checkpoint> tied = {make(200, 1.0, 7.0), make(100, 1.0, 3.0)};
    ParamMap avg = average_checkpoints(tied, 1);
    CHECK(avg.at("w").values() == std::vector<double>{3.0, 3.0});
  }

  SECTION("malformed requests are rejected") {
    CHECK_THROWS_AS(average_checkpoints(cks, 4), FormatError);
    CHECK_THROWS_AS(average_checkpoints(cks, 0), FormatError);
    std::vector<Checkpoint> bad = cks;
    bad[1].params.at("w") = Tensor(Shape{3}, 0.0);
    CHECK_THROWS_AS(average_checkpoints(bad, 3), ShapeError);
    bad = cks;
    bad[1].params.clear();
    bad[1].params.emplace("v", Tensor(Shape{2}, 0.0));
    CHECK_THROWS_AS(average_checkpoints(bad, 3), ShapeError);
  }
}

TEST_CASE("edit distance counts substitutions, insertions and deletions") {
  // kitten -> sitting, letters mapped to small ints.
  std::vector<int> kitten = {1, 2, 3, 3, 4, 5};
  std::vector<int> sitting = {6, 2, 3, 3, 2, 5, 7};
  ErrorRate er = error_rate(kitten, sitting);
  CHECK(er.edits == 3);
  CHECK(er.rate == Catch::Approx(3.0 / 7.0));
  CHECK_FALSE(er.empty_reference);

  CHECK(error_rate({1, 2}, {1, 2}).edits == 0);
  CHECK(error_rate({}, {1, 2}).edits == 2);

  ErrorRate empty_ref = error_rate({4, 4}, {});
  CHECK(empty_ref.edits == 2);
  CHECK(empty_ref.rate == 2.0);
  CHECK(empty_ref.empty_reference);
  CHECK(error_rate({}, {}).rate == 0.0);
}

TEST_CASE("frame rates derive from duration and the length ratio") {
  UtteranceRates r = utterance_rates(5, 2.0, 40, 10);
  CHECK(r.token_rate == 2.5);
  CHECK(r.frame_rate_before == 20.0);
  CHECK(r.frame_rate_after == 5.0);
  // The identity holds bitwise, not merely approximately.
  CHECK(r.frame_rate_after == r.frame_rate_before * (10.0 / 40.0));
  CHECK_THROWS_AS(utterance_rates(5, 0.0, 40, 10), NumericalError);
}

TEST_CASE("slot statistics follow the worked example") {
  // Three aggregated frames emitting (a,a), (blank,blank), (a,b).
  std::size_t vocab = 2;
  Tensor lp(Shape{6, vocab + 1}, std::log(0.1));
  auto set_peak = [&](std::size_t row, std::size_t id) {
    lp.values()[row * (vocab + 1) + id] = std::log(0.8);
  };
  set_peak(0, 1);
  set_peak(1, 1);
  set_peak(2, 0);
  set_peak(3, 0);
  set_peak(4, 1);
  set_peak(5, 2);

  std::vector<SlotOutcome> outcomes = slot_outcomes(lp, true);
  REQUIRE(outcomes.size() == 3);
  CHECK(outcomes[0].first == 1);
  CHECK(outcomes[0].second == 1);
  CHECK(outcomes[1].first == 0);
  CHECK(outcomes[2].second == 2);

  UmaStatsAccum accum;
  accum.add_utterance(3, 1.0, 12, 3);
  for (const SlotOutcome& o : outcomes) accum.add_outcome(o);
  UmaStats stats = accum.finish();
  CHECK(stats.nonblank_ratio == Catch::Approx(2.0 / 3.0));
  REQUIRE(stats.two_nonblank_ratio.has_value());
  CHECK(*stats.two_nonblank_ratio == Catch::Approx(0.5));

  SECTION("an all-blank decode leaves the pair ratio undefined") {
    UmaStatsAccum blank;
    blank.add_utterance(1, 1.0, 4, 1);
    blank.add_outcome({0, 0});
    UmaStats s = blank.finish();
    CHECK(s.nonblank_ratio == 0.0);
    CHECK_FALSE(s.two_nonblank_ratio.has_value());
  }

  SECTION("odd row counts cannot pair") {
    CHECK_THROWS_AS(slot_outcomes(Tensor(Shape{3, 3}, std::log(1.0 / 3.0)), true), ShapeError);
  }
}

TEST_CASE("batch filtering never keeps a sample a head would reject") {
  ModelConfig mc = tiny_model();
  ParamMap params = init_model(mc, 5);
  SynthConfig sc = easy_language();
  sc.tokens_hi = 4;  // some targets will overflow short utterances
  sc.frames_lo = 6;
  sc.frames_hi = 9;
  sc.pair_prob = 0.5;
  std::vector<Sample> batch = generate_dataset(sc, 99, 40);
  // A hand-planted degenerate: too short even for the subsampler.
  Sample stub;
  stub.features = Tensor(Shape{5, 8}, 0.1);
  stub.tokens = {1};
  batch.push_back(stub);

  std::vector<std::size_t> keep = filter_batch(batch, mc, params);
  std::vector<bool> kept(batch.size(), false);
  for (std::size_t i : keep) kept[i] = true;
  CHECK_FALSE(kept.back());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (kept[i]) {
      CHECK_NOTHROW(total_loss(forward(batch[i].features, mc, params), batch[i].tokens));
    } else {
      CHECK_THROWS(total_loss(forward(batch[i].features, mc, params), batch[i].tokens));
    }
  }
}

TEST_CASE("training runs, logs, checkpoints and improves on an easy language") {
  ModelConfig mc = tiny_model();
  SynthConfig sc = easy_language();
  std::vector<Sample> data = generate_dataset(sc, 4242, 48);

  TrainConfig tc;
  tc.steps = 120;
  tc.batch = 4;
  tc.base_lr = 3e-3;
  tc.warmup = 40;
  tc.checkpoint_interval = 40;
  tc.average_k = 2;
  tc.seed = 7;

  std::ostringstream log;
  TrainResult res = train(mc, tc, data, &log);

  CHECK(res.train_count == 46);
  CHECK(res.val_count == 2);
  REQUIRE(res.history.size() == 120);
  REQUIRE(res.checkpoints.size() == 3);
  CHECK(res.checkpoints[0].step == 40);
  CHECK(res.checkpoints[2].step == 120);
  for (const Checkpoint& ck : res.checkpoints) CHECK(std::isfinite(ck.val_loss));

  SECTION("log lines carry six tab-separated fields") {
    std::istringstream in(log.str());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
      ++lines;
      CHECK(std::count(line.begin(), line.end(), '\t') == 5);
    }
    CHECK(lines == 120);
  }

  SECTION("loss trends down over the run") {
    auto window_mean = [&](std::size_t begin, std::size_t end) {
      double s = 0.0;
      for (std::size_t i = begin; i < end; ++i) s += res.history[i].total;
      return s / static_cast<double>(end - begin);
    };
    CHECK(window_mean(80, 120) < window_mean(0, 40));
  }

  SECTION("the averaged model is usable for evaluation") {
    EvalResult ev = evaluate(mc, res.params, data);
    CHECK(ev.evaluated == data.size());
    CHECK(ev.ref_tokens > 0);
    CHECK(std::isfinite(ev.token_error_rate));
  }

  SECTION("worker count does not change evaluation results") {
    EvalResult one = evaluate(mc, res.params, data, 1);
    EvalResult three = evaluate(mc, res.params, data, 3);
    CHECK(one.token_error_rate == three.token_error_rate);
    CHECK(one.edits == three.edits);
    CHECK(one.stats.nonblank_ratio == three.stats.nonblank_ratio);
  }

  SECTION("same seed reproduces the run bit for bit") {
    std::ostringstream log2;
    TrainResult res2 = train(mc, tc, data, &log2);
    CHECK(log.str() == log2.str());
    bool same = true;
    for (const auto& [name, t] : res.params)
      if (res2.params.at(name).values() != t.values()) same = false;
    CHECK(same);
  }

  SECTION("a different seed trains a different model") {
    TrainConfig other = tc;
    other.seed = 8;
    TrainResult res2 = train(mc, other, data, nullptr);
    bool differs = false;
    for (const auto& [name, t] : res.params)
      if (res2.params.at(name).values() != t.values()) differs = true;
    CHECK(differs);
  }
}

TEST_CASE("warm starts adopt matching tensors and leave the rest fresh") {
  ModelConfig mc = tiny_model();
  SynthConfig sc = easy_language();
  std::vector<Sample> data = generate_dataset(sc, 616, 32);

  TrainConfig donor_tc;
  donor_tc.steps = 80;
  donor_tc.batch = 4;
  donor_tc.base_lr = 3e-3;
  donor_tc.warmup = 20;
  donor_tc.checkpoint_interval = 40;
  donor_tc.average_k = 1;
  donor_tc.seed = 5;
  TrainResult donor = train(mc, donor_tc, data, nullptr);

  TrainConfig tc = donor_tc;
  tc.steps = 8;

  // Resuming from trained weights starts at a far lower loss than scratch.
  TrainResult cold = train(mc, tc, data, nullptr);
  TrainResult resumed = train(mc, tc, data, nullptr, &donor.params);
  CHECK(resumed.history.front().total < 0.5 * cold.history.front().total);

  // An ablated model adopts the overlap and initializes its own head fresh.
  ModelConfig ns = mc;
  ns.use_split = false;
  TrainResult ns_resumed = train(ns, tc, data, nullptr, &donor.params);
  CHECK(ns_resumed.history.front().total < 0.9 * cold.history.front().total);
  for (const auto& [name, t] : ns_resumed.params) CHECK(name.rfind("split.", 0) != 0);
}

TEST_CASE("dropout masks can be limited to a warm phase") {
  ModelConfig mc = tiny_model();
  SynthConfig sc = easy_language();
  std::vector<Sample> data = generate_dataset(sc, 515, 24);

  TrainConfig tc;
  tc.steps = 16;
  tc.batch = 4;
  tc.base_lr = 1e-3;
  tc.warmup = 8;
  tc.checkpoint_interval = 16;
  tc.average_k = 1;
  tc.seed = 9;
  tc.dropout = 0.4;

  // 0 means no limit, so an explicit limit at the last step matches it.
  TrainConfig full = tc;
  full.dropout_steps = tc.steps;
  std::ostringstream log_a, log_b;
  train(mc, tc, data, &log_a);
  train(mc, full, data, &log_b);
  CHECK(log_a.str() == log_b.str());

  // Cutting masks off mid-run shares the masked prefix and then diverges.
  TrainConfig cut = tc;
  cut.dropout_steps = 5;
  std::ostringstream log_c;
  TrainResult res_c = train(mc, cut, data, &log_c);
  std::vector<StepLog> hist_a;
  {
    std::ostringstream ignored;
    hist_a = train(mc, tc, data, &ignored).history;
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(hist_a[i].total == res_c.history[i].total);
  bool diverged = false;
  for (std::size_t i = 5; i < res_c.history.size(); ++i)
    if (hist_a[i].total != res_c.history[i].total) diverged = true;
  CHECK(diverged);

  // The limit travels through the config map like every other field.
  TrainConfig round = apply_train_config(train_config_to_map(cut));
  CHECK(round.dropout_steps == 5);
  CHECK(round.dropout == cut.dropout);
}
