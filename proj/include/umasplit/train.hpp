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
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "umasplit/autodiff.hpp"
#include "umasplit/metrics.hpp"
#include "umasplit/model.hpp"
#include "umasplit/synth.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and an inverse-square-root warmup
// schedule. Steps carrying a non-finite gradient are skipped whole: no
// moment update, no decay, no step-count advance.
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double base_lr = 1e-3;
  std::size_t warmup = 500;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 1e-6;
};

struct AdamWState {
  std::map<std::string, Tensor> m1, m2;
  std::size_t step = 0;
};

/// Peaks at base_lr * warmup^-0.5 when step == warmup.
inline double lr_schedule(std::size_t step, double base_lr, std::size_t warmup) {
  if (step == 0 || warmup == 0) throw NumericalError("lr schedule needs step and warmup >= 1");
  double s = static_cast<double>(step);
  double w = static_cast<double>(warmup);
  return base_lr * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

inline bool all_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads)
    for (double v : g.values())
      if (!std::isfinite(v)) return false;
  return true;
}

/// Applies one update in place; returns the learning rate used, or nothing
/// when the gradients were non-finite and the step was skipped.
inline std::optional<double> adamw_step(ParamMap& params,
                                        const std::map<std::string, Tensor>& grads,
                                        AdamWState& st, const AdamWConfig& cfg) {
  if (!all_finite(grads)) return std::nullopt;
  st.step += 1;
  double lr = lr_schedule(st.step, cfg.base_lr, cfg.warmup);
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (st.m1.find(name) == st.m1.end()) {
      st.m1.emplace(name, Tensor(p.shape(), 0.0));
      st.m2.emplace(name, Tensor(p.shape(), 0.0));
    }
    Tensor& m1 = st.m1.at(name);
    Tensor& m2 = st.m2.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double g = git == grads.end() ? 0.0 : git->second.values()[i];
      double& a = m1.values()[i];
      double& b = m2.values()[i];
      a = cfg.beta1 * a + (1.0 - cfg.beta1) * g;
      b = cfg.beta2 * b + (1.0 - cfg.beta2) * g * g;
      double update = (a / bc1) / (std::sqrt(b / bc2) + cfg.eps);
      p.values()[i] = p.values()[i] * (1.0 - lr * cfg.weight_decay) - lr * update;
    }
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Checkpoint averaging: the k checkpoints with the lowest validation loss
// (ties broken toward the earlier step) are averaged element-wise. Summation
// runs in step order, so the result is invariant to input permutation.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::size_t step = 0;
  double val_loss = 0.0;
  ParamMap params;
};

inline ParamMap clone_params(const ParamMap& m) {
  ParamMap out;
  for (const auto& [name, t] : m) out.emplace(name, t.clone());
  return out;
}

inline ParamMap average_checkpoints(const std::vector<Checkpoint>& cks, std::size_t k) {
  if (k == 0 || cks.empty()) throw FormatError("need at least one checkpoint to average");
  if (k > cks.size())
    throw FormatError("cannot average " + std::to_string(k) + " of " +
                      std::to_string(cks.size()) + " checkpoints");
  std::vector<std::size_t> idx(cks.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (cks[a].val_loss != cks[b].val_loss) return cks[a].val_loss < cks[b].val_loss;
    return cks[a].step < cks[b].step;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return cks[a].step < cks[b].step; });

  ParamMap out = clone_params(cks[idx[0]].params);
  for (std::size_t j = 1; j < k; ++j) {
    const ParamMap& src = cks[idx[j]].params;
    if (src.size() != out.size())
      throw ShapeError("checkpoint averaging: parameter sets differ in size");
    for (auto& [name, acc] : out) {
      auto it = src.find(name);
      if (it == src.end())
        throw ShapeError("checkpoint averaging: missing parameter '" + name + "'");
      if (it->second.shape() != acc.shape())
        throw ShapeError("checkpoint averaging: shape mismatch at '" + name + "'");
      for (std::size_t i = 0; i < acc.size(); ++i) acc.values()[i] += it->second.values()[i];
    }
  }
  for (auto& [name, acc] : out)
    for (double& v : acc.values()) v /= static_cast<double>(k);
  return out;
}

// ---------------------------------------------------------------------------
// Length filtering. A sample survives only if every CTC head can fit the
// target; the decision needs the aggregated length, hence a forward pass.
// ---------------------------------------------------------------------------

inline bool sample_trainable(const Sample& s, const ModelConfig& mc, const ParamMap& params) {
  if (subsampled_len(s.features.dim(0)) == 0) return false;
  ForwardOutput out = forward(s.features, mc, params);
  return losses_computable(out, s.tokens);
}

/// Indices of the samples every head can train on.
inline std::vector<std::size_t> filter_batch(const std::vector<Sample>& batch,
                                             const ModelConfig& mc, const ParamMap& params) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (sample_trainable(batch[i], mc, params)) keep.push_back(i);
  return keep;
}

// ---------------------------------------------------------------------------
// Training loop. Deterministic given the seed: parameter init, batch order
// and dropout each use a fixed substream. The log is tab-separated
// `step lr total l_ctc l_inter skipped` with full-precision numbers, so two
// runs with one seed produce byte-identical logs and checkpoints.
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  double base_lr = 1e-3;
  std::size_t warmup = 500;
  double weight_decay = 1e-6;
  double dropout = 0.0;
  std::size_t dropout_steps = 0;  // masks applied through this step; 0 = every step
  std::size_t checkpoint_interval = 250;
  std::size_t average_k = 10;
  double val_fraction = 0.05;
  std::uint64_t seed = 1;
  std::string out_dir;  // when set, checkpoints and the log land here
};

inline ConfigMap train_config_to_map(const TrainConfig& cfg) {
  ConfigMap c;
  c["steps"] = std::to_string(cfg.steps);
  c["batch"] = std::to_string(cfg.batch);
  c["base_lr"] = f64_to_string(cfg.base_lr);
  c["warmup"] = std::to_string(cfg.warmup);
  c["weight_decay"] = f64_to_string(cfg.weight_decay);
  c["train_dropout"] = f64_to_string(cfg.dropout);
  c["train_dropout_steps"] = std::to_string(cfg.dropout_steps);
  c["checkpoint_interval"] = std::to_string(cfg.checkpoint_interval);
  c["average_k"] = std::to_string(cfg.average_k);
  c["val_fraction"] = f64_to_string(cfg.val_fraction);
  c["seed"] = std::to_string(cfg.seed);
  return c;
}

/// Applies recognized keys onto `base`; unknown keys are ignored.
inline TrainConfig apply_train_config(const ConfigMap& c, TrainConfig base = TrainConfig{}) {
  auto get_size = [&](const char* key, std::size_t& field) {
    if (c.count(key)) field = static_cast<std::size_t>(config_get_i64(c, key, 0));
  };
  get_size("steps", base.steps);
  get_size("batch", base.batch);
  get_size("warmup", base.warmup);
  get_size("train_dropout_steps", base.dropout_steps);
  get_size("checkpoint_interval", base.checkpoint_interval);
  get_size("average_k", base.average_k);
  if (c.count("base_lr")) base.base_lr = config_get_f64(c, "base_lr", 0.0);
  if (c.count("weight_decay")) base.weight_decay = config_get_f64(c, "weight_decay", 0.0);
  if (c.count("train_dropout")) base.dropout = config_get_f64(c, "train_dropout", 0.0);
  if (c.count("val_fraction")) base.val_fraction = config_get_f64(c, "val_fraction", 0.0);
  if (c.count("seed")) base.seed = static_cast<std::uint64_t>(config_get_i64(c, "seed", 0));
  return base;
}

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double ctc = 0.0;
  double inter = 0.0;
  std::size_t skipped = 0;  // samples of this batch that no head could fit
};

struct TrainResult {
  ParamMap params;               // average of the best checkpoints
  std::vector<StepLog> history;
  std::vector<Checkpoint> checkpoints;  // validation snapshots (params cloned)
  std::size_t nan_skips = 0;     // optimizer steps dropped for non-finite grads
  std::size_t numeric_errors = 0;
  std::size_t filtered_samples = 0;
  std::size_t seen_samples = 0;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
};

inline std::string step_log_line(const StepLog& s) {
  return std::to_string(s.step) + "\t" + f64_to_string(s.lr) + "\t" + f64_to_string(s.total) +
         "\t" + f64_to_string(s.ctc) + "\t" + f64_to_string(s.inter) + "\t" +
         std::to_string(s.skipped);
}

namespace detail {

/// Mean total loss over the computable validation samples; +inf when none.
inline double validation_loss(const std::vector<Sample>& data, std::size_t begin, std::size_t end,
                              const ModelConfig& mc, const ParamMap& params) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = begin; i < end; ++i) {
    if (subsampled_len(data[i].features.dim(0)) == 0) continue;
    ForwardOutput out = forward(data[i].features, mc, params);
    if (!losses_computable(out, data[i].tokens)) continue;
    sum += total_loss(out, data[i].tokens).total.item();
    n += 1;
  }
  return n == 0 ? std::numeric_limits<double>::infinity() : sum / static_cast<double>(n);
}

}  // namespace detail

inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc,
                         const std::vector<Sample>& data, std::ostream* log = nullptr,
                         const ParamMap* warm_start = nullptr) {
  validate(mc);
  if (data.empty()) throw FormatError("training needs at least one sample");
  if (tc.batch == 0 || tc.steps == 0) throw FormatError("training needs steps and batch >= 1");

  TrainResult res;
  res.val_count = data.size() >= 4
                      ? std::max<std::size_t>(
                            1, static_cast<std::size_t>(std::llround(
                                   tc.val_fraction * static_cast<double>(data.size()))))
                      : 0;
  if (res.val_count >= data.size()) res.val_count = data.size() - 1;
  res.train_count = data.size() - res.val_count;

  // A warm start adopts every donor tensor whose name and shape this model
  // also has; the rest keep their fresh initialization. Ablated variants can
  // therefore resume from a fuller model and vice versa.
  ParamMap params = init_model(mc, Rng::mix(tc.seed, 0));
  if (warm_start) {
    for (auto& [name, t] : params) {
      auto it = warm_start->find(name);
      if (it != warm_start->end() && it->second.shape() == t.shape()) t = it->second.clone();
    }
  }
  Rng batch_rng(Rng::mix(tc.seed, 1));
  Rng dropout_rng(Rng::mix(tc.seed, 2));
  ModelConfig train_mc = mc;
  train_mc.dropout = tc.dropout;

  AdamWConfig ocfg;
  ocfg.base_lr = tc.base_lr;
  ocfg.warmup = tc.warmup;
  ocfg.weight_decay = tc.weight_decay;
  AdamWState opt;

  std::vector<std::size_t> order(res.train_count);
  std::iota(order.begin(), order.end(), 0);
  batch_rng.shuffle(order);
  std::size_t cursor = 0;

  for (std::size_t step = 1; step <= tc.steps; ++step) {
    // Masks can be limited to a warm phase; turning them off makes the
    // length filter deterministic for the rest of the run.
    bool masks_on = tc.dropout > 0.0 && (tc.dropout_steps == 0 || step <= tc.dropout_steps);
    Rng* drop = masks_on ? &dropout_rng : nullptr;
    std::map<std::string, Tensor> grad_sum;
    double total_sum = 0.0, ctc_sum = 0.0, inter_sum = 0.0;
    std::size_t kept = 0, skipped = 0;

    for (std::size_t b = 0; b < tc.batch; ++b) {
      if (cursor == order.size()) {
        batch_rng.shuffle(order);
        cursor = 0;
      }
      const Sample& s = data[order[cursor++]];
      ++res.seen_samples;
      if (subsampled_len(s.features.dim(0)) == 0) {
        ++skipped;
        continue;
      }
      try {
        Tape tape;
        TapeScope scope(tape);
        ForwardOutput out = forward(s.features, train_mc, params, drop);
        if (!losses_computable(out, s.tokens)) {
          ++skipped;
          continue;
        }
        LossBreakdown lb = total_loss(out, s.tokens);
        total_sum += lb.total.item();
        ctc_sum += lb.ctc.item();
        inter_sum += lb.inter.item();
        std::map<std::string, Tensor> grads = tape.backward(lb.total);
        for (auto& [name, g] : grads) {
          auto it = grad_sum.find(name);
          if (it == grad_sum.end()) {
            grad_sum.emplace(name, std::move(g));
          } else {
            for (std::size_t i = 0; i < it->second.size(); ++i)
              it->second.values()[i] += g.values()[i];
          }
        }
        ++kept;
      } catch (const NumericalError&) {
        ++res.numeric_errors;
        ++skipped;
      }
    }
    res.filtered_samples += skipped;

    StepLog entry;
    entry.step = step;
    entry.skipped = skipped;
    if (kept > 0) {
      double inv = 1.0 / static_cast<double>(kept);
      for (auto& [name, g] : grad_sum)
        for (double& v : g.values()) v *= inv;
      entry.total = total_sum * inv;
      entry.ctc = ctc_sum * inv;
      entry.inter = inter_sum * inv;
      std::optional<double> lr = adamw_step(params, grad_sum, opt, ocfg);
      if (lr) {
        entry.lr = *lr;
      } else {
        ++res.nan_skips;
        entry.lr = 0.0;
      }
    } else {
      // The whole batch was filtered: nothing to learn from this step.
      entry.total = entry.ctc = entry.inter = 0.0;
      entry.lr = 0.0;
    }
    if (log) *log << step_log_line(entry) << "\n";
    res.history.push_back(entry);

    bool at_checkpoint = tc.checkpoint_interval > 0 && step % tc.checkpoint_interval == 0;
    if ((at_checkpoint || step == tc.steps) && res.val_count > 0) {
      Checkpoint ck;
      ck.step = step;
      ck.val_loss = detail::validation_loss(data, res.train_count, data.size(), mc, params);
      ck.params = clone_params(params);
      if (!tc.out_dir.empty()) {
        ConfigMap sidecar = model_config_to_map(mc);
        sidecar["step"] = std::to_string(ck.step);
        sidecar["val_loss"] = f64_to_string(ck.val_loss);
        sidecar["seed"] = std::to_string(tc.seed);
        save_checkpoint(tc.out_dir + "/ckpt_" + std::to_string(ck.step) + ".umaw", params,
                        sidecar);
      }
      res.checkpoints.push_back(std::move(ck));
    }
  }

  if (res.checkpoints.empty()) {
    res.params = clone_params(params);
  } else {
    std::size_t k = std::min<std::size_t>(tc.average_k, res.checkpoints.size());
    res.params = average_checkpoints(res.checkpoints, k);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Greedy evaluation: corpus token error rate plus aggregation statistics.
// Workers split the corpus by index; per-sample results are merged in index
// order, so the outcome does not depend on the worker count.
// ---------------------------------------------------------------------------

struct EvalResult {
  double token_error_rate = 0.0;  // total edits / total reference tokens
  std::size_t edits = 0;
  std::size_t ref_tokens = 0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // utterances too short to subsample
  UmaStats stats;
};

inline EvalResult evaluate(const ModelConfig& mc, const ParamMap& params,
                           const std::vector<Sample>& data, std::size_t workers = 1) {
  struct PerSample {
    bool ok = false;
    std::size_t edits = 0;
    std::size_t t_sub = 0, agg = 0;
    std::vector<SlotOutcome> outcomes;
  };
  std::vector<PerSample> rows(data.size());
  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (subsampled_len(data[i].features.dim(0)) == 0) continue;
      ForwardOutput out = forward(data[i].features, mc, params);
      PerSample& r = rows[i];
      r.ok = true;
      r.edits = error_rate(greedy_decode(out.final_log_probs), data[i].tokens).edits;
      r.t_sub = out.subsampled_frames;
      r.agg = out.segmentation.segments.size();
      r.outcomes = slot_outcomes(out.final_log_probs, mc.use_split);
    }
  };

  std::size_t n = data.size();
  if (workers <= 1 || n < 2) {
    run_range(0, n);
  } else {
    std::size_t w = std::min(workers, n);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t) {
      std::size_t begin = n * t / w, end = n * (t + 1) / w;
      pool.emplace_back(run_range, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }

  EvalResult res;
  UmaStatsAccum accum;
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows[i].ok) {
      ++res.skipped;
      continue;
    }
    ++res.evaluated;
    res.edits += rows[i].edits;
    res.ref_tokens += data[i].tokens.size();
    accum.add_utterance(data[i].tokens.size(), sample_duration_seconds(data[i]), rows[i].t_sub,
                        rows[i].agg);
    for (const SlotOutcome& o : rows[i].outcomes) accum.add_outcome(o);
  }
  res.token_error_rate = res.ref_tokens == 0
                             ? (res.edits == 0 ? 0.0 : 1.0)
                             : static_cast<double>(res.edits) / static_cast<double>(res.ref_tokens);
  if (res.evaluated > 0) res.stats = accum.finish();
  return res;
}

}  // namespace umasplit
