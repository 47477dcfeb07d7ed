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
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "umasplit/ctc.hpp"
#include "umasplit/nn.hpp"
#include "umasplit/serialize.hpp"
#include "umasplit/split.hpp"
#include "umasplit/uma.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// The full transducer: conv subsampling, a high-rate encoder with
// self-conditioned intermediate heads, unimodal-aggregation downsampling to
// token rate, a low-rate encoder whose intermediate and final heads see the
// two-slot split of every aggregated frame, and one shared output head.
// All heads are trained with CTC; the model emits in a single pass.
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t feat_dim = 8;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t conv_channels = 32;
  std::size_t high_rate_layers = 4;
  std::size_t low_rate_layers = 6;
  std::size_t vocab_size = 30;                     // token ids 1..V; blank is 0
  std::vector<std::size_t> conditioning_layers;    // empty = defaults for depth
  std::vector<std::size_t> low_rate_inter_layers{2, 4};
  bool use_split = true;
  bool use_self_conditioning = true;
  BoundaryMode boundary = BoundaryMode::kShared;
  double dropout = 0.0;
};

/// Conditioning sits at rounded 1/2 and 3/4 depth plus the top layer.
inline std::vector<std::size_t> default_conditioning_layers(std::size_t layers) {
  std::vector<std::size_t> v;
  for (double frac : {0.5, 0.75, 1.0}) {
    auto site = static_cast<std::size_t>(
        std::llround(static_cast<double>(layers) * frac));
    v.push_back(std::max<std::size_t>(site, 1));
  }
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline std::vector<std::size_t> conditioning_sites(const ModelConfig& cfg) {
  return cfg.conditioning_layers.empty()
             ? default_conditioning_layers(cfg.high_rate_layers)
             : cfg.conditioning_layers;
}

inline void validate(const ModelConfig& cfg) {
  if (cfg.model_dim == 0 || cfg.heads == 0 || cfg.model_dim % cfg.heads != 0)
    throw FormatError("model: dimension must be a positive multiple of the head count");
  if (cfg.feat_dim < 7) throw FormatError("model: feature dimension too small for subsampling");
  if (cfg.ffn_dim == 0 || cfg.conv_channels == 0)
    throw FormatError("model: ffn width and conv channels must be positive");
  if (cfg.high_rate_layers == 0 || cfg.low_rate_layers == 0)
    throw FormatError("model: both encoders need at least one layer");
  if (cfg.vocab_size == 0) throw FormatError("model: vocab must hold at least one token");
  auto in_range_sorted = [](const std::vector<std::size_t>& v, std::size_t hi) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1 || v[i] > hi) return false;
      if (i > 0 && v[i] <= v[i - 1]) return false;
    }
    return true;
  };
  if (!in_range_sorted(conditioning_sites(cfg), cfg.high_rate_layers))
    throw FormatError("model: conditioning layers must be strictly increasing within the high-rate encoder");
  if (!in_range_sorted(cfg.low_rate_inter_layers, cfg.low_rate_layers))
    throw FormatError("model: intermediate layers must be strictly increasing within the low-rate encoder");
}

inline ParamMap init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  ParamMap m;
  init_subsample(m, cfg.feat_dim, cfg.conv_channels, cfg.model_dim, rng);
  for (std::size_t i = 1; i <= cfg.high_rate_layers; ++i)
    init_encoder_block(m, "high." + std::to_string(i), cfg.model_dim, cfg.ffn_dim, rng);
  for (std::size_t site : conditioning_sites(cfg))
    init_layer_norm(m, "high." + std::to_string(site) + ".cond_ln", cfg.model_dim);
  init_uma(m, cfg.model_dim, rng);
  for (std::size_t i = 1; i <= cfg.low_rate_layers; ++i)
    init_encoder_block(m, "low." + std::to_string(i), cfg.model_dim, cfg.ffn_dim, rng);
  if (cfg.use_split) init_split(m, cfg.model_dim, rng);
  init_output_head(m, cfg.model_dim, cfg.vocab_size + 1, rng);
  return m;
}

inline std::size_t parameter_count(const ParamMap& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m) n += t.size();
  return n;
}

/// Re-arms tensors loaded from disk as trainable named leaves.
inline void prepare_parameters(ParamMap& m) {
  for (auto& [name, t] : m) t.set_requires_grad(true).set_name(name);
}

struct IntermediateHead {
  std::string name;      // "high.2", "low.4", ...
  Tensor log_probs;      // [frames, V+1]
  std::size_t frames;    // time base this head emits at
};

struct ForwardOutput {
  Tensor final_log_probs;                        // [2I, V+1] (split) or [I, V+1]
  std::vector<IntermediateHead> intermediates;   // high-rate sites then low-rate
  UmaSegmentation segmentation;
  Tensor alpha;                                  // [T']
  std::size_t subsampled_frames = 0;             // T'
};

inline ForwardOutput forward(const Tensor& features, const ModelConfig& cfg, const ParamMap& m,
                             Rng* dropout_rng = nullptr) {
  ForwardOutput out;
  Tensor x = conv_subsample(features, m, cfg.conv_channels);
  out.subsampled_frames = x.dim(0);
  x = add(x, sinusoidal_pe(out.subsampled_frames, cfg.model_dim));

  std::vector<std::size_t> sites = conditioning_sites(cfg);
  for (std::size_t i = 1; i <= cfg.high_rate_layers; ++i) {
    std::string prefix = "high." + std::to_string(i);
    x = encoder_block(x, m, prefix, cfg.heads, cfg.dropout, dropout_rng);
    if (std::find(sites.begin(), sites.end(), i) != sites.end()) {
      Conditioned c = self_condition(x, m, prefix, cfg.use_self_conditioning);
      out.intermediates.push_back({prefix, c.log_probs, out.subsampled_frames});
      x = c.hidden;
    }
  }

  out.alpha = predict_weights(x, m);
  out.segmentation = find_valleys(out.alpha, cfg.boundary);
  Tensor e = aggregate(x, out.alpha, out.segmentation);
  // Aggregated frames are a fresh sequence; they get their own positions.
  e = add(e, sinusoidal_pe(e.dim(0), cfg.model_dim));

  for (std::size_t i = 1; i <= cfg.low_rate_layers; ++i) {
    std::string prefix = "low." + std::to_string(i);
    e = encoder_block(e, m, prefix, cfg.heads, cfg.dropout, dropout_rng);
    if (std::find(cfg.low_rate_inter_layers.begin(), cfg.low_rate_inter_layers.end(), i) !=
        cfg.low_rate_inter_layers.end()) {
      Tensor h = cfg.use_split ? split_frames(e, m) : e;
      out.intermediates.push_back({prefix, output_log_probs(h, m), h.dim(0)});
    }
  }

  Tensor h = cfg.use_split ? split_frames(e, m) : e;
  out.final_log_probs = output_log_probs(h, m);
  return out;
}

/// True when every head's frame budget admits the target.
inline bool losses_computable(const ForwardOutput& out, const std::vector<int>& y) {
  if (!ctc_computable(out.final_log_probs.dim(0), y)) return false;
  for (const IntermediateHead& h : out.intermediates)
    if (!ctc_computable(h.frames, y)) return false;
  return true;
}

struct LossBreakdown {
  Tensor ctc;     // final head
  Tensor inter;   // mean over intermediate heads
  Tensor total;   // equal mix of the two
};

namespace detail {
inline Tensor head_ctc(const Tensor& lp, const std::vector<int>& y, const std::string& name) {
  if (!ctc_computable(lp.dim(0), y)) {
    std::ostringstream msg;
    msg << "CTC incomputable at head " << name << ": " << y.size() << " labels need "
        << ctc_min_frames(y) << " frames, head has " << lp.dim(0);
    throw CtcIncomputable(msg.str());
  }
  return ctc_loss(lp, y);
}
}  // namespace detail

/// The final head is checked first, so a target that does not even fit the
/// final output length is reported against it.
inline LossBreakdown total_loss(const ForwardOutput& out, const std::vector<int>& y) {
  if (out.intermediates.empty())
    throw ShapeError("total loss needs at least one intermediate head");
  LossBreakdown lb;
  lb.ctc = detail::head_ctc(out.final_log_probs, y, "final");
  Tensor sum = detail::head_ctc(out.intermediates[0].log_probs, y, out.intermediates[0].name);
  for (std::size_t i = 1; i < out.intermediates.size(); ++i)
    sum = add(sum, detail::head_ctc(out.intermediates[i].log_probs, y, out.intermediates[i].name));
  lb.inter = scale(sum, 1.0 / static_cast<double>(out.intermediates.size()));
  lb.total = scale(add(lb.ctc, lb.inter), 0.5);
  return lb;
}

// ---------------------------------------------------------------------------
// Config maps: the textual sidecar of a checkpoint, and the file format the
// CLI reads. Unknown keys are left for other consumers; list values are
// comma-separated.
// ---------------------------------------------------------------------------

namespace detail {
inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<std::size_t>(config_get_i64({{key, item}}, key, 0)));
  return out;
}
}  // namespace detail

inline ConfigMap model_config_to_map(const ModelConfig& cfg) {
  ConfigMap c;
  c["feat_dim"] = std::to_string(cfg.feat_dim);
  c["model_dim"] = std::to_string(cfg.model_dim);
  c["ffn_dim"] = std::to_string(cfg.ffn_dim);
  c["heads"] = std::to_string(cfg.heads);
  c["conv_channels"] = std::to_string(cfg.conv_channels);
  c["high_rate_layers"] = std::to_string(cfg.high_rate_layers);
  c["low_rate_layers"] = std::to_string(cfg.low_rate_layers);
  c["vocab_size"] = std::to_string(cfg.vocab_size);
  c["conditioning_layers"] = detail::join_sizes(conditioning_sites(cfg));
  c["low_rate_inter_layers"] = detail::join_sizes(cfg.low_rate_inter_layers);
  c["use_split"] = cfg.use_split ? "1" : "0";
  c["use_self_conditioning"] = cfg.use_self_conditioning ? "1" : "0";
  c["boundary"] = boundary_mode_name(cfg.boundary);
  c["dropout"] = f64_to_string(cfg.dropout);
  return c;
}

/// Applies any recognized keys in `c` on top of `base`; unknown keys are
/// ignored so one file can carry model and training settings together.
inline ModelConfig apply_model_config(const ConfigMap& c, ModelConfig base = ModelConfig{}) {
  auto get_size = [&](const char* key, std::size_t& field) {
    if (c.count(key)) field = static_cast<std::size_t>(config_get_i64(c, key, 0));
  };
  get_size("feat_dim", base.feat_dim);
  get_size("model_dim", base.model_dim);
  get_size("ffn_dim", base.ffn_dim);
  get_size("heads", base.heads);
  get_size("conv_channels", base.conv_channels);
  get_size("high_rate_layers", base.high_rate_layers);
  get_size("low_rate_layers", base.low_rate_layers);
  get_size("vocab_size", base.vocab_size);
  if (c.count("conditioning_layers"))
    base.conditioning_layers = detail::parse_sizes(c.at("conditioning_layers"), "conditioning_layers");
  if (c.count("low_rate_inter_layers"))
    base.low_rate_inter_layers = detail::parse_sizes(c.at("low_rate_inter_layers"), "low_rate_inter_layers");
  if (c.count("use_split")) base.use_split = config_get_i64(c, "use_split", 0) != 0;
  if (c.count("use_self_conditioning"))
    base.use_self_conditioning = config_get_i64(c, "use_self_conditioning", 0) != 0;
  if (c.count("boundary")) base.boundary = boundary_mode_from_string(c.at("boundary"));
  if (c.count("dropout")) base.dropout = config_get_f64(c, "dropout", 0.0);
  return base;
}

// ---------------------------------------------------------------------------
// A checkpoint is a parameter container plus a config sidecar ("<path>.cfg"),
// written atomically as a pair. Extra entries (step, validation loss) ride in
// the sidecar.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ParamMap& params,
                            const ConfigMap& sidecar) {
  save_params_file(params, path);
  save_config_file(sidecar, path + ".cfg");
}

struct LoadedCheckpoint {
  ParamMap params;
  ModelConfig config;
  ConfigMap sidecar;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  LoadedCheckpoint ck;
  ck.params = load_params_file(path);
  prepare_parameters(ck.params);
  ck.sidecar = load_config_file(path + ".cfg");
  ck.config = apply_model_config(ck.sidecar);
  validate(ck.config);
  return ck;
}

}  // namespace umasplit
