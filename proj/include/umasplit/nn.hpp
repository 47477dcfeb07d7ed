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
#include "umasplit/serialize.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Network building blocks over a flat name -> tensor parameter map. Blocks
// are addressed by string prefixes ("high.3.attn"), which keeps checkpoint
// files, the optimizer, and gradient maps trivially aligned.
// ---------------------------------------------------------------------------

inline const Tensor& param(const ParamMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw std::logic_error("missing parameter '" + name + "'");
  return it->second;
}

inline Tensor& create_param(ParamMap& m, const std::string& name, Tensor t) {
  t.set_requires_grad(true).set_name(name);
  auto [it, inserted] = m.emplace(name, std::move(t));
  if (!inserted) throw std::logic_error("duplicate parameter '" + name + "'");
  return it->second;
}

inline void init_matrix(ParamMap& m, const std::string& name, std::size_t in, std::size_t out,
                        Rng& rng) {
  Tensor w(Shape{in, out});
  double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& v : w.values()) v = (2.0 * rng.uniform() - 1.0) * limit;
  create_param(m, name, std::move(w));
}

inline void init_linear(ParamMap& m, const std::string& prefix, std::size_t in, std::size_t out,
                        Rng& rng) {
  init_matrix(m, prefix + ".w", in, out, rng);
  create_param(m, prefix + ".b", Tensor(Shape{out}, 0.0));
}

inline void init_layer_norm(ParamMap& m, const std::string& prefix, std::size_t dim) {
  create_param(m, prefix + ".g", Tensor(Shape{dim}, 1.0));
  create_param(m, prefix + ".b", Tensor(Shape{dim}, 0.0));
}

inline Tensor linear(const Tensor& x, const ParamMap& m, const std::string& prefix) {
  return add(matmul(x, param(m, prefix + ".w")), param(m, prefix + ".b"));
}

inline Tensor layer_norm_at(const Tensor& x, const ParamMap& m, const std::string& prefix) {
  return layer_norm(x, param(m, prefix + ".g"), param(m, prefix + ".b"));
}

/// Inverted dropout; a null rng (evaluation) is the identity.
inline Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  if (p >= 1.0) throw NumericalError("dropout probability must be below 1");
  double keep = 1.0 - p;
  Tensor mask(x.shape());
  for (double& v : mask.values()) v = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, mask);
}

/// Fixed sinusoidal position encoding, [len, dim].
inline Tensor sinusoidal_pe(std::size_t len, std::size_t dim) {
  Tensor pe(Shape{len, dim});
  double* d = pe.data();
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i * 2 < dim; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      double angle = static_cast<double>(t) * freq;
      d[t * dim + 2 * i] = std::sin(angle);
      if (2 * i + 1 < dim) d[t * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Convolutional frontend: two valid 3x3 convolutions with stride 2 on the
// [time, feature] plane (1 -> C -> C channels), swish between them, then a
// per-frame projection of the flattened feature axis to the model dim.
// Patches are gathered with strided slices so the whole frontend stays
// inside the recorded op set.
// ---------------------------------------------------------------------------

inline std::size_t conv_out_len(std::size_t n) { return n < 3 ? 0 : (n - 3) / 2 + 1; }

/// Output length after both strided convolutions.
inline std::size_t subsampled_len(std::size_t t) { return conv_out_len(conv_out_len(t)); }

inline void init_subsample(ParamMap& m, std::size_t feat_dim, std::size_t channels,
                           std::size_t model_dim, Rng& rng) {
  std::size_t f2 = conv_out_len(conv_out_len(feat_dim));
  if (f2 == 0) throw ShapeError("feature dimension too small for subsampling");
  init_linear(m, "subsample.conv1", 9, channels, rng);
  init_linear(m, "subsample.conv2", 9 * channels, channels, rng);
  init_linear(m, "subsample.proj", f2 * channels, model_dim, rng);
}

namespace detail {

// im2col for a valid 3x3/stride-2 conv over [T, F, C] (C may be 1 with a
// rank-2 input). Returns [T' * F', 9C] with offset-major, channel-minor
// columns.
inline Tensor conv_patches(const Tensor& x, std::size_t t_in, std::size_t f_in, std::size_t ch) {
  std::size_t t_out = conv_out_len(t_in), f_out = conv_out_len(f_in);
  Tensor grid = ch == 1 ? reshape(x, {t_in, f_in}) : x;
  std::vector<Tensor> cols;
  for (std::size_t di = 0; di < 3; ++di) {
    for (std::size_t dj = 0; dj < 3; ++dj) {
      Tensor patch;
      if (ch == 1) {
        patch = slice(grid, {Range{di, t_out, 2}, Range{dj, f_out, 2}});
      } else {
        patch = slice(grid, {Range{di, t_out, 2}, Range{dj, f_out, 2}, Range{0, ch, 1}});
      }
      cols.push_back(reshape(patch, {t_out * f_out, ch}));
    }
  }
  return concat(cols, 1);
}

}  // namespace detail

/// [T, F] features -> [T', model_dim], T' = conv_out_len(conv_out_len(T)).
inline Tensor conv_subsample(const Tensor& x, const ParamMap& m, std::size_t channels) {
  if (x.rank() != 2) throw ShapeError("subsampling expects [time, features]");
  std::size_t t = x.dim(0), f = x.dim(1);
  if (subsampled_len(t) == 0) throw ShapeError("utterance too short for subsampling");
  std::size_t f2 = subsampled_len(f);
  if (f2 == 0) throw ShapeError("feature dimension too small for subsampling");
  std::size_t t1 = conv_out_len(t), f1 = conv_out_len(f);
  std::size_t t2 = conv_out_len(t1);

  Tensor h = linear(detail::conv_patches(x, t, f, 1), m, "subsample.conv1");
  h = swish(h);
  h = reshape(h, {t1, f1, channels});
  h = linear(detail::conv_patches(h, t1, f1, channels), m, "subsample.conv2");
  h = reshape(h, {t2, f2 * channels});
  return linear(h, m, "subsample.proj");
}

// ---------------------------------------------------------------------------
// Pre-norm transformer encoder block with full-context multi-head attention
// and a swish feed-forward inner layer.
// ---------------------------------------------------------------------------

inline void init_encoder_block(ParamMap& m, const std::string& prefix, std::size_t dim,
                               std::size_t ffn_dim, Rng& rng) {
  init_layer_norm(m, prefix + ".ln1", dim);
  init_linear(m, prefix + ".attn.q", dim, dim, rng);
  init_linear(m, prefix + ".attn.k", dim, dim, rng);
  init_linear(m, prefix + ".attn.v", dim, dim, rng);
  init_linear(m, prefix + ".attn.o", dim, dim, rng);
  init_layer_norm(m, prefix + ".ln2", dim);
  init_linear(m, prefix + ".ffn.1", dim, ffn_dim, rng);
  init_linear(m, prefix + ".ffn.2", ffn_dim, dim, rng);
}

inline Tensor multi_head_attention(const Tensor& x, const ParamMap& m, const std::string& prefix,
                                   std::size_t heads) {
  std::size_t t = x.dim(0), d = x.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  std::size_t dk = d / heads;
  Tensor q = linear(x, m, prefix + ".q");
  Tensor k = linear(x, m, prefix + ".k");
  Tensor v = linear(x, m, prefix + ".v");
  std::vector<Tensor> outs;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<Range> cols{Range{0, t, 1}, Range{h * dk, dk, 1}};
    Tensor qh = slice(q, cols);
    Tensor kh = slice(k, cols);
    Tensor vh = slice(v, cols);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    outs.push_back(matmul(softmax(scores), vh));
  }
  return linear(concat(outs, 1), m, prefix + ".o");
}

inline Tensor ffn_swish(const Tensor& x, const ParamMap& m, const std::string& prefix) {
  return linear(swish(linear(x, m, prefix + ".1")), m, prefix + ".2");
}

inline Tensor encoder_block(const Tensor& x, const ParamMap& m, const std::string& prefix,
                            std::size_t heads, double dropout_p = 0.0, Rng* rng = nullptr) {
  Tensor attn = multi_head_attention(layer_norm_at(x, m, prefix + ".ln1"), m, prefix + ".attn",
                                     heads);
  Tensor h = add(x, dropout(attn, dropout_p, rng));
  Tensor f = ffn_swish(layer_norm_at(h, m, prefix + ".ln2"), m, prefix + ".ffn");
  return add(h, dropout(f, dropout_p, rng));
}

// ---------------------------------------------------------------------------
// Conditioning head: every emission site normalizes with its own gain/bias,
// projects to the vocabulary through the shared output head, and (when
// feedback is enabled) folds the posterior back into the representation
// through the shared back projection.
// ---------------------------------------------------------------------------

inline void init_output_head(ParamMap& m, std::size_t dim, std::size_t vocab_with_blank,
                             Rng& rng) {
  init_linear(m, "head", dim, vocab_with_blank, rng);
  // Zero start: conditioning is inert until the head learns something.
  create_param(m, "cond.back.w", Tensor(Shape{vocab_with_blank, dim}, 0.0));
  create_param(m, "cond.back.b", Tensor(Shape{dim}, 0.0));
}

inline Tensor output_log_probs(const Tensor& h, const ParamMap& m) {
  return log_softmax(linear(h, m, "head"));
}

struct Conditioned {
  Tensor log_probs;  // [sites, vocab+1]
  Tensor hidden;     // representation handed to the next layer
};

inline Conditioned self_condition(const Tensor& h, const ParamMap& m,
                                  const std::string& site_prefix, bool inject) {
  Tensor n = layer_norm_at(h, m, site_prefix + ".cond_ln");
  Tensor logits = linear(n, m, "head");
  Conditioned out;
  out.log_probs = log_softmax(logits);
  if (inject) {
    out.hidden = add(n, linear(softmax(logits), m, "cond.back"));
  } else {
    out.hidden = h;
  }
  return out;
}

}  // namespace umasplit
