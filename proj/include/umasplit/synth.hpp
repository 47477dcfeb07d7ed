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
#include <fstream>
#include <string>
#include <vector>

#include "umasplit/common.hpp"
#include "umasplit/serialize.hpp"
#include "umasplit/tensor.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Synthetic utterances with known token-to-frame alignment. Each "syllable"
// owns one acoustic span: a fixed embedding vector (or the mean of two, for
// fine-grained two-token syllables) plus white noise. Span lengths are in
// raw frames, before any subsampling; one frame represents 10 ms.
// ---------------------------------------------------------------------------

inline constexpr double kFrameSeconds = 0.01;
inline constexpr std::uint64_t kDefaultVocabSeed = 0x756d6173706c6974ull;

struct SynthConfig {
  std::size_t vocab_size = 30;        // token ids 1..V; 0 stays the blank
  std::size_t frames_lo = 16;         // raw frames per syllable span
  std::size_t frames_hi = 24;
  std::size_t tokens_lo = 3;          // syllables per utterance
  std::size_t tokens_hi = 6;
  std::size_t feat_dim = 8;
  double noise_std = 0.1;
  double pair_prob = 0.0;             // chance a syllable carries two tokens
  std::uint64_t vocab_seed = kDefaultVocabSeed;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.vocab_size < 1) throw FormatError("synth: vocab must hold at least one token");
  if (cfg.frames_lo < 1 || cfg.frames_hi < cfg.frames_lo)
    throw FormatError("synth: frames-per-token range is empty");
  if (cfg.tokens_lo < 1 || cfg.tokens_hi < cfg.tokens_lo)
    throw FormatError("synth: tokens-per-utterance range is empty");
  if (cfg.noise_std < 0.0) throw FormatError("synth: noise level must be nonnegative");
  if (cfg.pair_prob < 0.0 || cfg.pair_prob > 1.0)
    throw FormatError("synth: pair probability must lie in [0,1]");
  if (cfg.pair_prob > 0.0 && cfg.vocab_size < 2)
    throw FormatError("synth: two-token syllables need a vocab of at least 2");
}

inline ConfigMap synth_config_to_map(const SynthConfig& cfg) {
  ConfigMap c;
  c["vocab_size"] = std::to_string(cfg.vocab_size);
  c["frames_lo"] = std::to_string(cfg.frames_lo);
  c["frames_hi"] = std::to_string(cfg.frames_hi);
  c["tokens_lo"] = std::to_string(cfg.tokens_lo);
  c["tokens_hi"] = std::to_string(cfg.tokens_hi);
  c["feat_dim"] = std::to_string(cfg.feat_dim);
  c["noise_std"] = f64_to_string(cfg.noise_std);
  c["pair_prob"] = f64_to_string(cfg.pair_prob);
  c["vocab_seed"] = std::to_string(cfg.vocab_seed);
  return c;
}

/// Applies recognized keys onto `base`; unknown keys are ignored.
inline SynthConfig apply_synth_config(const ConfigMap& c, SynthConfig base = SynthConfig{}) {
  auto get_size = [&](const char* key, std::size_t& field) {
    if (c.count(key)) field = static_cast<std::size_t>(config_get_i64(c, key, 0));
  };
  get_size("vocab_size", base.vocab_size);
  get_size("frames_lo", base.frames_lo);
  get_size("frames_hi", base.frames_hi);
  get_size("tokens_lo", base.tokens_lo);
  get_size("tokens_hi", base.tokens_hi);
  get_size("feat_dim", base.feat_dim);
  if (c.count("noise_std")) base.noise_std = config_get_f64(c, "noise_std", 0.0);
  if (c.count("pair_prob")) base.pair_prob = config_get_f64(c, "pair_prob", 0.0);
  if (c.count("vocab_seed"))
    base.vocab_seed = static_cast<std::uint64_t>(config_get_i64(c, "vocab_seed", 0));
  return base;
}

/// 1-based inclusive raw-frame range owned by one syllable.
struct SpanInfo {
  std::vector<int> token_ids;
  std::size_t start = 1;
  std::size_t end = 1;
};

struct Sample {
  Tensor features;              // [T, F]
  std::vector<int> tokens;      // concatenated span ids
  std::vector<SpanInfo> spans;
};

inline double sample_duration_seconds(const Sample& s) {
  return static_cast<double>(s.features.dim(0)) * kFrameSeconds;
}

/// Unit-norm Gaussian embedding per token id (row 0 belongs to the blank and
/// is never emitted). Frozen by the vocab seed, independent of sample seeds,
/// so separately generated train and test sets share one acoustic code.
inline Tensor token_embeddings(std::size_t vocab_size, std::size_t feat_dim,
                               std::uint64_t vocab_seed) {
  Rng rng(vocab_seed);
  Tensor table(Shape{vocab_size + 1, feat_dim});
  for (std::size_t r = 0; r <= vocab_size; ++r) {
    double norm2 = 0.0;
    double* row = table.data() + r * feat_dim;
    for (std::size_t j = 0; j < feat_dim; ++j) {
      row[j] = rng.normal();
      norm2 += row[j] * row[j];
    }
    double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
    for (std::size_t j = 0; j < feat_dim; ++j) row[j] *= inv;
  }
  return table;
}

/// Deterministic in (cfg, seed). Two-token syllables emit their ids in
/// ascending order, making the target recoverable from the (order-free)
/// mean embedding. A syllable never opens with the token the previous one
/// ended on, so targets carry no adjacent repeats; subword vocabularies
/// behave the same way, since a merge would have absorbed the repetition.
inline Sample generate_sample(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  Tensor table = token_embeddings(cfg.vocab_size, cfg.feat_dim, cfg.vocab_seed);

  std::size_t syllables =
      static_cast<std::size_t>(rng.uniform_int(cfg.tokens_lo, cfg.tokens_hi));
  Sample out;
  std::vector<std::vector<double>> span_vecs;
  std::vector<std::size_t> span_lens;
  int previous_last = 0;  // 0 is the blank id, which no draw can produce
  for (std::size_t s = 0; s < syllables; ++s) {
    SpanInfo span;
    bool two = rng.uniform() < cfg.pair_prob;
    // Rejection needs spare ids; vocabularies too small to honor a
    // constraint simply drop it.
    int a = previous_last;
    while (a == previous_last) {
      a = static_cast<int>(rng.uniform_int(1, cfg.vocab_size));
      if (cfg.vocab_size < 2) break;
    }
    if (two) {
      int b = a;
      while (b == a || (b == previous_last && cfg.vocab_size > 2))
        b = static_cast<int>(rng.uniform_int(1, cfg.vocab_size));
      span.token_ids = {std::min(a, b), std::max(a, b)};
    } else {
      span.token_ids = {a};
    }
    previous_last = span.token_ids.back();
    std::size_t len = static_cast<std::size_t>(rng.uniform_int(cfg.frames_lo, cfg.frames_hi));
    std::vector<double> vec(cfg.feat_dim, 0.0);
    for (int id : span.token_ids)
      for (std::size_t j = 0; j < cfg.feat_dim; ++j)
        vec[j] += table.values()[static_cast<std::size_t>(id) * cfg.feat_dim + j];
    for (double& v : vec) v /= static_cast<double>(span.token_ids.size());
    span_vecs.push_back(std::move(vec));
    span_lens.push_back(len);
    for (int id : span.token_ids) out.tokens.push_back(id);
    out.spans.push_back(std::move(span));
  }

  std::size_t total = 0;
  for (std::size_t len : span_lens) total += len;
  out.features = Tensor(Shape{total, cfg.feat_dim});
  double* f = out.features.data();
  std::size_t frame = 0;
  for (std::size_t s = 0; s < syllables; ++s) {
    out.spans[s].start = frame + 1;
    for (std::size_t i = 0; i < span_lens[s]; ++i, ++frame)
      for (std::size_t j = 0; j < cfg.feat_dim; ++j)
        f[frame * cfg.feat_dim + j] = span_vecs[s][j] + cfg.noise_std * rng.normal();
    out.spans[s].end = frame;
  }
  return out;
}

/// One sample per index, with per-sample substreams of the dataset seed.
inline std::vector<Sample> generate_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                            std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(cfg, Rng::mix(seed, i)));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container: "UMAD", u32 version, u32 record count; per record
// u32 T, u32 F, T*F f64 features, u32 token count + ids, u32 span count +
// per span (u32 id count, ids, u32 start, u32 end). Little-endian, bit-exact.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'U', 'M', 'A', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const std::vector<Sample>& samples) {
  os.write(kDatasetMagic, 4);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<std::uint32_t>(samples.size()));
  for (const Sample& s : samples) {
    write_u32(os, static_cast<std::uint32_t>(s.features.dim(0)));
    write_u32(os, static_cast<std::uint32_t>(s.features.dim(1)));
    for (double v : s.features.values()) write_f64(os, v);
    write_u32(os, static_cast<std::uint32_t>(s.tokens.size()));
    for (int id : s.tokens) write_u32(os, static_cast<std::uint32_t>(id));
    write_u32(os, static_cast<std::uint32_t>(s.spans.size()));
    for (const SpanInfo& span : s.spans) {
      write_u32(os, static_cast<std::uint32_t>(span.token_ids.size()));
      for (int id : span.token_ids) write_u32(os, static_cast<std::uint32_t>(id));
      write_u32(os, static_cast<std::uint32_t>(span.start));
      write_u32(os, static_cast<std::uint32_t>(span.end));
    }
  }
  if (!os) throw FormatError("dataset write failed");
}

inline std::vector<Sample> read_dataset(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "magic");
  if (std::string(magic, 4) != std::string(kDatasetMagic, 4))
    throw FormatError("bad magic: expected UMAD");
  std::uint32_t version = read_u32(is, "version");
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version));
  std::uint32_t count = read_u32(is, "record count");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    Sample s;
    std::uint32_t t = read_u32(is, "frame count");
    std::uint32_t f = read_u32(is, "feature dim");
    s.features = Tensor(Shape{t, f});
    for (std::size_t i = 0; i < static_cast<std::size_t>(t) * f; ++i)
      s.features.values()[i] = read_f64(is, "features");
    std::uint32_t ntok = read_u32(is, "token count");
    for (std::uint32_t i = 0; i < ntok; ++i)
      s.tokens.push_back(static_cast<int>(read_u32(is, "token id")));
    std::uint32_t nspans = read_u32(is, "span count");
    for (std::uint32_t i = 0; i < nspans; ++i) {
      SpanInfo span;
      std::uint32_t nids = read_u32(is, "span token count");
      for (std::uint32_t j = 0; j < nids; ++j)
        span.token_ids.push_back(static_cast<int>(read_u32(is, "span token id")));
      span.start = read_u32(is, "span start");
      span.end = read_u32(is, "span end");
      s.spans.push_back(std::move(span));
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_dataset_file(const std::string& path, const std::vector<Sample>& samples) {
  atomic_write_file(path, [&](std::ostream& os) { write_dataset(os, samples); });
}

inline std::vector<Sample> read_dataset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset file '" + path + "'");
  return read_dataset(is);
}

}  // namespace umasplit
