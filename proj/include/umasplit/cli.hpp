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

#include <filesystem>
#include <fstream>
#include <optional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "umasplit/gradcheck.hpp"
#include "umasplit/model.hpp"
#include "umasplit/synth.hpp"
#include "umasplit/train.hpp"

namespace umasplit::cli {

// Exit codes: 0 success, 1 usage, 2 data or model format, 3 numerical.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFormat = 2;
inline constexpr int kExitNumerical = 3;

namespace detail {

inline std::pair<std::size_t, std::size_t> parse_range(const std::string& s,
                                                       const std::string& flag) {
  auto parse_one = [&](const std::string& part) {
    try {
      std::size_t pos = 0;
      unsigned long long v = std::stoull(part, &pos);
      if (pos != part.size()) throw std::invalid_argument("trailing");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw FormatError(flag + ": expected 'lo:hi' or a single count, got '" + s + "'");
    }
  };
  auto colon = s.find(':');
  if (colon == std::string::npos) {
    std::size_t v = parse_one(s);
    return {v, v};
  }
  std::size_t lo = parse_one(s.substr(0, colon));
  std::size_t hi = parse_one(s.substr(colon + 1));
  if (hi < lo) throw FormatError(flag + ": range '" + s + "' is empty");
  return {lo, hi};
}

inline std::size_t max_token_id(const std::vector<Sample>& data) {
  int top = 1;
  for (const Sample& s : data)
    for (int id : s.tokens) top = std::max(top, id);
  return static_cast<std::size_t>(top);
}

inline std::string ratio_or_na(const std::optional<double>& v) {
  return v ? f64_to_string(*v) : std::string("n/a");
}

}  // namespace detail

/// Parses and executes one invocation. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale non-autoregressive transducer with unimodal aggregation "
               "and two-slot frame splitting"};
  app.name("umasplit");
  app.require_subcommand(0, 1);

  std::string config_path, out_path, data_path, model_path;
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  // -- gen-data ------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string frames_range = "16:24", tokens_range = "3:6";
  std::size_t gen_vocab = 30, gen_count = 100, gen_feat = 8;
  double pair_prob = 0.0, noise_std = 0.1;
  std::uint64_t vocab_seed = kDefaultVocabSeed;
  gen->add_option("--config", config_path, "key=value defaults; flags win");
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out_path, "Output dataset path")->required();
  auto* o_vocab = gen->add_option("--vocab", gen_vocab, "Token vocabulary size");
  auto* o_frames = gen->add_option("--frames-per-token", frames_range,
                                   "Raw frames per syllable, lo:hi");
  auto* o_tokens = gen->add_option("--tokens", tokens_range, "Syllables per utterance, lo:hi");
  auto* o_pair = gen->add_option("--pair-prob", pair_prob,
                                 "Chance a syllable carries two tokens");
  auto* o_noise = gen->add_option("--noise-std", noise_std, "Feature noise level");
  auto* o_count = gen->add_option("--count", gen_count, "Number of utterances");
  auto* o_feat = gen->add_option("--feat-dim", gen_feat, "Feature dimension");
  auto* o_vseed = gen->add_option("--vocab-seed", vocab_seed, "Embedding table seed");

  // -- train ---------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a model on a dataset");
  std::size_t steps = 3000, batch = 16, warmup = 500, ck_interval = 250, avg_k = 10;
  std::size_t dropout_steps = 0, train_vocab = 0;
  double lr = 1e-3, weight_decay = 1e-6, dropout = 0.0, val_fraction = 0.05;
  std::string init_path;
  tr->add_option("--config", config_path, "key=value defaults; flags win");
  tr->add_option("--seed", seed, "Training seed");
  tr->add_option("--data", data_path, "Training dataset")->required();
  tr->add_option("--out", out_path, "Output directory for log and checkpoints");
  tr->add_option("--init", init_path, "Warm-start weights (matching tensors are adopted)");
  auto* o_steps = tr->add_option("--steps", steps, "Optimizer steps");
  auto* o_batch = tr->add_option("--batch", batch, "Samples per step");
  auto* o_lr = tr->add_option("--lr", lr, "Base learning rate");
  auto* o_warmup = tr->add_option("--warmup", warmup, "Warmup steps");
  auto* o_wd = tr->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
  auto* o_do = tr->add_option("--dropout", dropout, "Dropout during training");
  auto* o_dos = tr->add_option("--dropout-steps", dropout_steps,
                               "Apply dropout through this step only (0: every step)");
  auto* o_ck = tr->add_option("--checkpoint-interval", ck_interval, "Steps between checkpoints");
  auto* o_avgk = tr->add_option("--average-k", avg_k, "Checkpoints averaged into the result");
  auto* o_valf = tr->add_option("--val-fraction", val_fraction, "Tail fraction held out");
  auto* o_tvocab = tr->add_option("--vocab", train_vocab,
                                  "Vocabulary size (default: largest id in the data)");
  auto* o_nosplit = tr->add_flag("--no-split", "Emit one slot per aggregated frame");
  auto* o_nosc = tr->add_flag("--no-self-conditioning",
                              "Keep intermediate losses but drop the feedback");

  // -- eval ----------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Greedy-decode a dataset and report error rates");
  ev->add_option("--model", model_path, "Checkpoint path")->required();
  ev->add_option("--data", data_path, "Evaluation dataset")->required();
  ev->add_option("--workers", workers, "Worker threads for evaluation");

  // -- inspect-uma ---------------------------------------------------------
  auto* ins = app.add_subcommand("inspect-uma", "Dump weights, valleys and segments");
  std::size_t utt_index = 0;
  ins->add_option("--model", model_path, "Checkpoint path")->required();
  ins->add_option("--data", data_path, "Dataset")->required();
  ins->add_option("--utt-index", utt_index, "Utterance to inspect");

  // -- stats ---------------------------------------------------------------
  auto* st = app.add_subcommand("stats", "Aggregation statistics over a dataset");
  st->add_option("--model", model_path, "Checkpoint path")->required();
  st->add_option("--data", data_path, "Dataset")->required();
  st->add_option("--workers", workers, "Worker threads");

  // -- grad-check ----------------------------------------------------------
  auto* gc = app.add_subcommand("grad-check", "Compare every op against finite differences");
  double gc_eps = 1e-5;
  gc->add_option("--seed", seed, "Probe seed");
  gc->add_option("--eps", gc_eps, "Finite-difference step");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (app.get_subcommands().empty()) {
    out << app.help();
    return kExitUsage;
  }

  try {
    ConfigMap file_cfg;
    if (!config_path.empty()) file_cfg = load_config_file(config_path);

    if (gen->parsed()) {
      SynthConfig sc = apply_synth_config(file_cfg);
      if (o_vocab->count()) sc.vocab_size = gen_vocab;
      if (o_frames->count() || file_cfg.count("frames_lo") == 0) {
        auto [lo, hi] = detail::parse_range(frames_range, "--frames-per-token");
        sc.frames_lo = lo;
        sc.frames_hi = hi;
      }
      if (o_tokens->count() || file_cfg.count("tokens_lo") == 0) {
        auto [lo, hi] = detail::parse_range(tokens_range, "--tokens");
        sc.tokens_lo = lo;
        sc.tokens_hi = hi;
      }
      if (o_pair->count()) sc.pair_prob = pair_prob;
      if (o_noise->count()) sc.noise_std = noise_std;
      if (o_feat->count()) sc.feat_dim = gen_feat;
      if (o_vseed->count()) sc.vocab_seed = vocab_seed;
      std::size_t count = gen_count;
      if (!o_count->count() && file_cfg.count("count"))
        count = static_cast<std::size_t>(config_get_i64(file_cfg, "count", 0));
      validate(sc);
      std::vector<Sample> data = generate_dataset(sc, seed, count);
      write_dataset_file(out_path, data);
      out << "wrote\t" << out_path << "\n";
      out << "utterances\t" << data.size() << "\n";
      return kExitOk;
    }

    if (tr->parsed()) {
      std::vector<Sample> data = read_dataset_file(data_path);
      if (data.empty()) throw FormatError("training dataset is empty");

      ModelConfig mc = apply_model_config(file_cfg);
      mc.feat_dim = data[0].features.dim(1);
      if (o_tvocab->count()) {
        mc.vocab_size = train_vocab;
      } else if (!file_cfg.count("vocab_size")) {
        mc.vocab_size = detail::max_token_id(data);
      }
      if (o_nosplit->count()) mc.use_split = false;
      if (o_nosc->count()) mc.use_self_conditioning = false;

      TrainConfig tc = apply_train_config(file_cfg);
      if (o_steps->count()) tc.steps = steps;
      if (o_batch->count()) tc.batch = batch;
      if (o_lr->count()) tc.base_lr = lr;
      if (o_warmup->count()) tc.warmup = warmup;
      if (o_wd->count()) tc.weight_decay = weight_decay;
      if (o_do->count()) tc.dropout = dropout;
      if (o_dos->count()) tc.dropout_steps = dropout_steps;
      if (o_ck->count()) tc.checkpoint_interval = ck_interval;
      if (o_avgk->count()) tc.average_k = avg_k;
      if (o_valf->count()) tc.val_fraction = val_fraction;
      tc.seed = seed;

      std::ofstream log_file;
      std::ostream* log = &out;
      if (!out_path.empty()) {
        std::filesystem::create_directories(out_path);
        tc.out_dir = out_path;
        log_file.open(out_path + "/train.log", std::ios::trunc);
        if (!log_file) throw FormatError("cannot open '" + out_path + "/train.log'");
        log = &log_file;
      }

      std::optional<LoadedCheckpoint> warm;
      if (!init_path.empty()) warm.emplace(load_checkpoint(init_path));
      TrainResult res = train(mc, tc, data, log, warm ? &warm->params : nullptr);

      double best_val = std::numeric_limits<double>::infinity();
      for (const Checkpoint& ck : res.checkpoints) best_val = std::min(best_val, ck.val_loss);
      if (!out_path.empty()) {
        ConfigMap sidecar = model_config_to_map(mc);
        sidecar["seed"] = std::to_string(tc.seed);
        if (!res.checkpoints.empty()) sidecar["best_val_loss"] = f64_to_string(best_val);
        save_checkpoint(out_path + "/model.umaw", res.params, sidecar);
        out << "model\t" << out_path << "/model.umaw\n";
      }
      out << "steps\t" << res.history.size() << "\n";
      out << "train_samples\t" << res.train_count << "\n";
      out << "val_samples\t" << res.val_count << "\n";
      out << "checkpoints\t" << res.checkpoints.size() << "\n";
      if (!res.checkpoints.empty()) out << "best_val_loss\t" << f64_to_string(best_val) << "\n";
      out << "filtered_samples\t" << res.filtered_samples << "\n";
      out << "nan_skips\t" << res.nan_skips << "\n";
      out << "params\t" << parameter_count(res.params) << "\n";
      return kExitOk;
    }

    if (ev->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(model_path);
      std::vector<Sample> data = read_dataset_file(data_path);
      EvalResult r = evaluate(ck.config, ck.params, data, workers);
      out << "ter\t" << f64_to_string(r.token_error_rate) << "\n";
      out << "edits\t" << r.edits << "\n";
      out << "ref_tokens\t" << r.ref_tokens << "\n";
      out << "evaluated\t" << r.evaluated << "\n";
      out << "skipped\t" << r.skipped << "\n";
      return kExitOk;
    }

    if (ins->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(model_path);
      std::vector<Sample> data = read_dataset_file(data_path);
      if (utt_index >= data.size())
        throw FormatError("--utt-index " + std::to_string(utt_index) + " is out of range for " +
                          std::to_string(data.size()) + " utterances");
      ForwardOutput o = forward(data[utt_index].features, ck.config, ck.params);
      out << "frame_index\talpha\tis_valley\tsegment_id\n";
      for (std::size_t t = 1; t <= o.segmentation.frame_count; ++t) {
        bool valley = std::find(o.segmentation.valleys.begin(), o.segmentation.valleys.end(),
                                t) != o.segmentation.valleys.end();
        std::size_t seg_id = 0;
        for (std::size_t i = 0; i < o.segmentation.segments.size(); ++i) {
          if (o.segmentation.segments[i].begin <= t && t <= o.segmentation.segments[i].end) {
            seg_id = i + 1;
            break;
          }
        }
        out << t << "\t" << f64_to_string(o.alpha.values()[t - 1]) << "\t" << (valley ? 1 : 0)
            << "\t" << seg_id << "\n";
      }
      return kExitOk;
    }

    if (st->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(model_path);
      std::vector<Sample> data = read_dataset_file(data_path);
      EvalResult r = evaluate(ck.config, ck.params, data, workers);
      out << "token_rate\tframe_rate_before\tframe_rate_after\tnonblank_ratio"
             "\ttwo_nonblank_ratio\tparams\n";
      out << f64_to_string(r.stats.token_rate) << "\t" << f64_to_string(r.stats.frame_rate_before)
          << "\t" << f64_to_string(r.stats.frame_rate_after) << "\t"
          << f64_to_string(r.stats.nonblank_ratio) << "\t"
          << detail::ratio_or_na(r.stats.two_nonblank_ratio) << "\t"
          << parameter_count(ck.params) << "\n";
      return kExitOk;
    }

    if (gc->parsed()) {
      std::map<std::string, double> report = op_gradient_suite(seed, gc_eps);
      double worst = 0.0;
      for (const auto& [op, rel] : report) {
        out << op << "\t" << f64_to_string(rel) << "\n";
        worst = std::max(worst, rel);
      }
      out << "max\t" << f64_to_string(worst) << "\n";
      if (!std::isfinite(worst)) throw NumericalError("gradient check produced a non-finite error");
      return kExitOk;
    }
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const CtcIncomputable& e) {
    err << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFormat;
  }
  return kExitUsage;
}

inline std::string full_help_text() {
  std::ostringstream out, err;
  run({"--help"}, out, err);
  return out.str();
}

}  // namespace umasplit::cli
