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
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "umasplit/tensor.hpp"

namespace umasplit {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over dense double tensors.
//
// A Tape records one forward pass as a dynamic graph: nodes are appended in
// evaluation order (which is already a topological order), each carrying a
// closure that scatters its output adjoint into its parents' adjoint
// buffers. Sequence segmentation makes shapes data-dependent, so the graph
// is rebuilt on every pass; a tape is single-use.
//
// Recording is opt-in through a thread-local active tape (TapeScope).
// Tensors flagged requires_grad are registered as named leaves the first
// time an op touches them, so model code can use parameters directly.
// Without an active tape (or under NoGradGuard) every op is a pure value
// computation, which keeps concurrent read-only evaluation trivially safe.
// ---------------------------------------------------------------------------

enum class OpKind {
  kMatmul,
  kAdd,
  kMul,
  kScale,
  kSigmoid,
  kSwish,
  kTanh,
  kExp,
  kLog,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kConcat,
  kSlice,
  kTranspose,
  kGather,
  kSegmentWeightedMean,
  kMaskedFill,
  kLogAddExp,
  kReshape,
  kSum,
  kLeaf,
};

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "elementwise-mul";
    case OpKind::kScale: return "scalar-scale";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSwish: return "swish";
    case OpKind::kTanh: return "tanh";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log-softmax";
    case OpKind::kLayerNorm: return "layer-norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kGather: return "embedding-gather";
    case OpKind::kSegmentWeightedMean: return "segment-weighted-mean";
    case OpKind::kMaskedFill: return "masked-fill";
    case OpKind::kLogAddExp: return "logaddexp";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSum: return "sum";
    case OpKind::kLeaf: return "leaf";
  }
  return "?";
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&, const std::vector<double>&)>;

  struct Node {
    OpKind kind = OpKind::kLeaf;
    Shape shape;
    std::vector<int> parents;
    BackFn backprop;
    std::string leaf_name;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a tensor as a graph leaf (idempotent per storage). The name,
  /// or the tensor's own name, keys its entry in the gradient map.
  Tensor watch(const Tensor& t, const std::string& name = "") {
    if (!grad_enabled()) return t;
    if (consumed_) throw std::logic_error("watch: tape already consumed by backward");
    if (t.tape_ == this && t.in_graph()) return t;
    if (t.tape_ != nullptr) throw std::logic_error("watch: tensor belongs to another tape");
    auto it = leaf_cache_.find(t.storage_key());
    Tensor out = t;
    if (it != leaf_cache_.end()) {
      out.tape_ = this;
      out.node_ = it->second;
      return out;
    }
    Node n;
    n.kind = OpKind::kLeaf;
    n.shape = t.shape();
    n.leaf_name = name.empty() ? t.name() : name;
    n.needs_grad = t.requires_grad();
    int id = add_node(std::move(n));
    leaf_cache_.emplace(t.storage_key(), id);
    out.tape_ = this;
    out.node_ = id;
    return out;
  }

  /// Runs reverse accumulation from a scalar output and returns dL/dp for
  /// every named leaf (zeros for leaves the output does not reach). The
  /// tape is consumed: no further ops may be recorded on it.
  std::map<std::string, Tensor> backward(const Tensor& output) {
    if (output.tape_ != this || !output.in_graph())
      throw std::logic_error("backward: output was not recorded on this tape");
    if (output.size() != 1) throw ShapeError("backward requires scalar");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    grad_buffer(output.node_)[0] = 1.0;
    for (int i = output.node_; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.backprop) continue;
      if (grads_[static_cast<std::size_t>(i)].empty()) continue;
      n.backprop(*this, grads_[static_cast<std::size_t>(i)]);
    }
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.kind != OpKind::kLeaf || n.leaf_name.empty() || !n.needs_grad) continue;
      Tensor g(n.shape);
      if (!grads_[i].empty()) g.values() = grads_[i];
      out.emplace(n.leaf_name, std::move(g));
    }
    return out;
  }

  /// Gradient of the last backward() w.r.t. any tensor recorded on this
  /// tape. Zeros if the output never reached it.
  Tensor grad_of(const Tensor& t) const {
    if (t.tape_ != this || !t.in_graph())
      throw std::logic_error("grad_of: tensor was not recorded on this tape");
    const Node& n = nodes_[static_cast<std::size_t>(t.node_)];
    Tensor g(n.shape);
    const auto& buf = grads_[static_cast<std::size_t>(t.node_)];
    if (!buf.empty()) g.values() = buf;
    return g;
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // -- internals used by op implementations --

  int add_node(Node n) {
    if (consumed_) throw std::logic_error("op recorded on consumed tape");
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Node& node_at(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

  void bind_output(Tensor& t, int node) {
    t.tape_ = this;
    t.node_ = node;
  }

  /// Adjoint buffer for a node, zero-initialized on first use.
  std::vector<double>& grad_buffer(int i) {
    auto& buf = grads_[static_cast<std::size_t>(i)];
    if (buf.empty()) buf.assign(shape_numel(nodes_[static_cast<std::size_t>(i)].shape), 0.0);
    return buf;
  }

 private:
  friend class Tensor;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int> leaf_cache_;
  bool consumed_ = false;
};

inline Tape*& active_tape_slot() {
  thread_local Tape* t = nullptr;
  return t;
}

inline Tape* active_tape() { return grad_enabled() ? active_tape_slot() : nullptr; }

/// Makes a tape the recording target for ops on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(active_tape_slot()) { active_tape_slot() = &t; }
  ~TapeScope() { active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

#if defined(UMASPLIT_FINITE_CHECKS)
inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value after ") + op);
}
#else
inline void check_finite(const Tensor&, const char*) {}
#endif

namespace detail {

struct OpCtx {
  Tape* tape = nullptr;
  std::vector<int> parents;
  bool live = false;  // at least one parent carries gradient
};

inline OpCtx resolve(const std::vector<const Tensor*>& inputs) {
  OpCtx ctx;
  Tape* tape = active_tape();
  if (tape == nullptr) return ctx;
  for (const Tensor* t : inputs) {
    if (t->tape() != nullptr && t->tape() != tape)
      throw std::logic_error("operand recorded on a different tape");
  }
  ctx.tape = tape;
  for (const Tensor* t : inputs) {
    int id = -1;
    if (t->in_graph()) {
      id = t->node();
    } else if (t->requires_grad()) {
      id = tape->watch(*t).node();
    }
    ctx.parents.push_back(id);
    if (id >= 0 && tape->node_at(id).needs_grad) ctx.live = true;
  }
  if (!ctx.live) ctx.tape = nullptr;
  return ctx;
}

inline OpCtx resolve(std::initializer_list<const Tensor*> inputs) {
  return resolve(std::vector<const Tensor*>(inputs));
}

inline Tensor attach(OpCtx& ctx, OpKind kind, Tensor out, Tape::BackFn fn) {
  if (ctx.tape == nullptr || !ctx.live) return out;
  Tape::Node n;
  n.kind = kind;
  n.shape = out.shape();
  n.parents = ctx.parents;
  n.backprop = std::move(fn);
  n.needs_grad = true;
  int id = ctx.tape->add_node(std::move(n));
  ctx.tape->bind_output(out, id);
  return out;
}

// Accumulates into a parent's adjoint buffer if the parent is in the graph.
inline double* parent_grad(Tape& tape, int parent) {
  return parent >= 0 ? tape.grad_buffer(parent).data() : nullptr;
}

using Values = std::shared_ptr<std::vector<double>>;

inline Values keep(const Tensor& t) {
  return std::make_shared<std::vector<double>>(t.values());
}

// C[n,m] += A[n,k] * B[k,m]
inline void gemm_acc(std::size_t n, std::size_t k, std::size_t m, const double* A,
                     const double* B, double* C) {
  for (std::size_t i = 0; i < n; ++i) {
    double* Ci = C + i * m;
    const double* Ai = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double a = Ai[p];
      const double* Bp = B + p * m;
      for (std::size_t j = 0; j < m; ++j) Ci[j] += a * Bp[j];
    }
  }
}

// dA[n,k] += G[n,m] * B^T  (B is [k,m])
inline void gemm_acc_nt(std::size_t n, std::size_t k, std::size_t m, const double* G,
                        const double* B, double* dA) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* Gi = G + i * m;
    double* dAi = dA + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* Bp = B + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += Gi[j] * Bp[j];
      dAi[p] += s;
    }
  }
}

// dB[k,m] += A^T * G  (A is [n,k], G is [n,m])
inline void gemm_acc_tn(std::size_t n, std::size_t k, std::size_t m, const double* A,
                        const double* G, double* dB) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* Ai = A + i * k;
    const double* Gi = G + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      double a = Ai[p];
      if (a == 0.0) continue;
      double* dBp = dB + p * m;
      for (std::size_t j = 0; j < m; ++j) dBp[j] += a * Gi[j];
    }
  }
}

// Broadcast agreement for add/mul: identical shapes, scalar, or the smaller
// operand's shape a trailing suffix of the larger (leading-batch broadcast).
inline void require_broadcastable(const Tensor& big, const Tensor& small, const char* op) {
  if (small.size() == 1) return;
  const Shape& bs = big.shape();
  const Shape& ss = small.shape();
  if (ss.size() > bs.size())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(bs) + " vs " + shape_str(ss));
  for (std::size_t i = 0; i < ss.size(); ++i) {
    if (ss[ss.size() - 1 - i] != bs[bs.size() - 1 - i])
      throw ShapeError(std::string(op) + ": shape " + shape_str(ss) +
                       " is not a trailing suffix of " + shape_str(bs));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Each computes its value eagerly and, when a live tape is
// active, appends a node whose closure implements the exact adjoint rule.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out(Shape{n, m});
  detail::gemm_acc(n, k, m, a.data(), b.data(), out.data());
  check_finite(out, "matmul");
  auto ctx = detail::resolve({&a, &b});
  if (!ctx.live) return out;
  auto av = detail::keep(a);
  auto bv = detail::keep(b);
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kMatmul, std::move(out),
                        [n, k, m, av, bv, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* da = detail::parent_grad(tape, parents[0]))
                            detail::gemm_acc_nt(n, k, m, g.data(), bv->data(), da);
                          if (double* db = detail::parent_grad(tape, parents[1]))
                            detail::gemm_acc_tn(n, k, m, av->data(), g.data(), db);
                        });
}

namespace detail {

// Shared add/mul implementation; the second operand may broadcast.
inline Tensor binary_broadcast(const Tensor& a, const Tensor& b, bool is_mul) {
  const Tensor* big = &a;
  const Tensor* small = &b;
  bool swapped = false;
  if (big->size() < small->size()) {
    std::swap(big, small);
    swapped = true;
  }
  require_broadcastable(*big, *small, is_mul ? "elementwise-mul" : "add");
  if (big->size() % std::max<std::size_t>(small->size(), 1) != 0)
    throw ShapeError("broadcast: sizes do not divide");
  std::size_t n = big->size(), bn = small->size();
  Tensor out(big->shape());
  const double* x = big->data();
  const double* y = small->data();
  double* o = out.data();
  if (is_mul) {
    for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i % bn];
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i % bn];
  }
  check_finite(out, is_mul ? "elementwise-mul" : "add");
  auto ctx = resolve({big, small});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  Values xv = is_mul ? keep(*big) : nullptr;
  Values yv = is_mul ? keep(*small) : nullptr;
  (void)swapped;
  return attach(ctx, is_mul ? OpKind::kMul : OpKind::kAdd, std::move(out),
                [n, bn, is_mul, xv, yv, parents](Tape& tape, const std::vector<double>& g) {
                  if (double* dbig = parent_grad(tape, parents[0])) {
                    if (is_mul) {
                      const double* y = yv->data();
                      for (std::size_t i = 0; i < n; ++i) dbig[i] += g[i] * y[i % bn];
                    } else {
                      for (std::size_t i = 0; i < n; ++i) dbig[i] += g[i];
                    }
                  }
                  if (double* dsmall = parent_grad(tape, parents[1])) {
                    if (is_mul) {
                      const double* x = xv->data();
                      for (std::size_t i = 0; i < n; ++i) dsmall[i % bn] += g[i] * x[i];
                    } else {
                      for (std::size_t i = 0; i < n; ++i) dsmall[i % bn] += g[i];
                    }
                  }
                });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_broadcast(a, b, false); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_broadcast(a, b, true); }

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* o = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = x[i] * c;
  check_finite(out, "scalar-scale");
  auto ctx = detail::resolve({&a});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kScale, std::move(out),
                        [c, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* da = detail::parent_grad(tape, parents[0]))
                            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

namespace detail {

inline double sigmoid_val(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Elementwise op with a backward rule of the form dx = g * dfn(x, y).
template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, OpKind kind, Fwd fwd, Bwd dfn) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* o = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = fwd(x[i]);
  check_finite(out, op_kind_name(kind));
  auto ctx = resolve({&a});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  Values xv = keep(a);
  Values yv = keep(out);
  return attach(ctx, kind, std::move(out),
                [xv, yv, dfn, parents](Tape& tape, const std::vector<double>& g) {
                  if (double* da = parent_grad(tape, parents[0])) {
                    const double* x = xv->data();
                    const double* y = yv->data();
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfn(x[i], y[i]);
                  }
                });
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_elementwise(
      a, OpKind::kSigmoid, [](double x) { return detail::sigmoid_val(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor swish(const Tensor& a) {
  return detail::unary_elementwise(
      a, OpKind::kSwish, [](double x) { return x * detail::sigmoid_val(x); },
      [](double x, double) {
        double s = detail::sigmoid_val(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_elementwise(
      a, OpKind::kTanh, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      a, OpKind::kExp, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_elementwise(
      a, OpKind::kLog, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

namespace detail {

inline std::pair<std::size_t, std::size_t> row_view(const Tensor& t, const char* op) {
  if (t.rank() < 1) throw ShapeError(std::string(op) + ": rank-0 input");
  std::size_t d = t.shape().back();
  if (d == 0) throw ShapeError(std::string(op) + ": empty last axis");
  return {t.size() / d, d};
}

}  // namespace detail

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  auto [rows, d] = detail::row_view(a, "softmax");
  Tensor out(a.shape());
  const double* x = a.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double* orow = o + r * d;
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < d; ++j) orow[j] /= sum;
  }
  check_finite(out, "softmax");
  auto ctx = detail::resolve({&a});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto yv = detail::keep(out);
  return detail::attach(ctx, OpKind::kSoftmax, std::move(out),
                        [rows = rows, d = d, yv, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* da = detail::parent_grad(tape, parents[0])) {
                            const double* y = yv->data();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double* yr = y + r * d;
                              const double* gr = g.data() + r * d;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                              double* dar = da + r * d;
                              for (std::size_t j = 0; j < d; ++j) dar[j] += yr[j] * (gr[j] - dot);
                            }
                          }
                        });
}

/// Log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& a) {
  auto [rows, d] = detail::row_view(a, "log-softmax");
  Tensor out(a.shape());
  const double* x = a.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double* orow = o + r * d;
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += std::exp(xr[j] - mx);
    double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < d; ++j) orow[j] = xr[j] - lse;
  }
  check_finite(out, "log-softmax");
  auto ctx = detail::resolve({&a});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto yv = detail::keep(out);
  return detail::attach(ctx, OpKind::kLogSoftmax, std::move(out),
                        [rows = rows, d = d, yv, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* da = detail::parent_grad(tape, parents[0])) {
                            const double* y = yv->data();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double* yr = y + r * d;
                              const double* gr = g.data() + r * d;
                              double gsum = 0.0;
                              for (std::size_t j = 0; j < d; ++j) gsum += gr[j];
                              double* dar = da + r * d;
                              for (std::size_t j = 0; j < d; ++j)
                                dar[j] += gr[j] - std::exp(yr[j]) * gsum;
                            }
                          }
                        });
}

inline constexpr double kLayerNormEps = 1e-12;

/// Layer normalization over the last axis with learnable per-feature
/// gain/bias; eps is added to the population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  auto [rows, d] = detail::row_view(x, "layer-norm");
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer-norm: gain/bias must match feature dim " + std::to_string(d));
  Tensor out(x.shape());
  std::vector<double> xhat(x.size());
  std::vector<double> inv(rows);
  const double* xd = x.data();
  const double* gd = gain.data();
  const double* bd = bias.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double iv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv[r] = iv;
    double* xh = xhat.data() + r * d;
    double* orow = o + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mu) * iv;
      orow[j] = xh[j] * gd[j] + bd[j];
    }
  }
  check_finite(out, "layer-norm");
  auto ctx = detail::resolve({&x, &gain, &bias});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto ivv = std::make_shared<std::vector<double>>(std::move(inv));
  auto gv = detail::keep(gain);
  return detail::attach(
      ctx, OpKind::kLayerNorm, std::move(out),
      [rows = rows, d = d, xh, ivv, gv, parents](Tape& tape, const std::vector<double>& g) {
        double* dx = detail::parent_grad(tape, parents[0]);
        double* dg = detail::parent_grad(tape, parents[1]);
        double* db = detail::parent_grad(tape, parents[2]);
        const double* gaind = gv->data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* xhr = xh->data() + r * d;
          if (dg != nullptr)
            for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xhr[j];
          if (db != nullptr)
            for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
          if (dx != nullptr) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              double q = gr[j] * gaind[j];
              m1 += q;
              m2 += q * xhr[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            double iv = (*ivv)[r];
            double* dxr = dx + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              double q = gr[j] * gaind[j];
              dxr[j] += iv * (q - m1 - xhr[j] * m2);
            }
          }
        }
      });
}

/// Concatenation along an axis; all other dims must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = s0;
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.dim(i) != s0[i])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  out_shape[axis] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor out(out_shape);
  double* o = out.data();
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) chunk[p] = parts[p].dim(axis) * inner;
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].data() + r * chunk[p];
      std::copy(src, src + chunk[p], o);
      o += chunk[p];
    }
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  auto ctx = detail::resolve(ptrs);
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kConcat, std::move(out),
                        [outer, chunk, parents](Tape& tape, const std::vector<double>& g) {
                          std::size_t total = 0;
                          for (std::size_t c : chunk) total += c;
                          for (std::size_t p = 0; p < parents.size(); ++p) {
                            double* dp = detail::parent_grad(tape, parents[p]);
                            if (dp == nullptr) continue;
                            std::size_t before = 0;
                            for (std::size_t q = 0; q < p; ++q) before += chunk[q];
                            for (std::size_t r = 0; r < outer; ++r) {
                              const double* gr = g.data() + r * total + before;
                              double* dst = dp + r * chunk[p];
                              for (std::size_t j = 0; j < chunk[p]; ++j) dst[j] += gr[j];
                            }
                          }
                        });
}

/// Half-open strided range over one axis: picks start, start+step, ...
/// (count elements).
struct Range {
  std::size_t start = 0;
  std::size_t count = 0;
  std::size_t step = 1;
};

namespace detail {

inline void slice_map(const Shape& in_shape, const std::vector<Range>& ranges,
                      const std::function<void(std::size_t src, std::size_t dst)>& visit) {
  std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t out_numel = 1;
  for (const Range& r : ranges) out_numel *= r.count;
  for (std::size_t flat = 0; flat < out_numel; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i)
      src += (ranges[i].start + idx[i] * ranges[i].step) * in_stride[i];
    visit(src, flat);
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < ranges[i].count) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

inline Tensor slice(const Tensor& t, const std::vector<Range>& ranges) {
  if (ranges.size() != t.rank()) throw ShapeError("slice: need one range per axis");
  Shape out_shape;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const Range& r = ranges[i];
    if (r.count == 0 || r.step == 0 || r.start + (r.count - 1) * r.step >= t.dim(i))
      throw ShapeError("slice: range out of bounds on axis " + std::to_string(i));
    out_shape.push_back(r.count);
  }
  Tensor out(out_shape);
  const double* src = t.data();
  double* dst = out.data();
  detail::slice_map(t.shape(), ranges, [&](std::size_t s, std::size_t d) { dst[d] = src[s]; });
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  Shape in_shape = t.shape();
  return detail::attach(ctx, OpKind::kSlice, std::move(out),
                        [in_shape, ranges, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0])) {
                            detail::slice_map(in_shape, ranges,
                                              [&](std::size_t s, std::size_t d) { dt[s] += g[d]; });
                          }
                        });
}

inline Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
  std::size_t n = t.dim(0), m = t.dim(1);
  Tensor out(Shape{m, n});
  const double* x = t.data();
  double* o = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) o[j * n + i] = x[i * m + j];
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kTranspose, std::move(out),
                        [n, m, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0])) {
                            for (std::size_t j = 0; j < m; ++j)
                              for (std::size_t i = 0; i < n; ++i) dt[i * m + j] += g[j * n + i];
                          }
                        });
}

/// Gathers rows of a [M,D] table by index; rows may repeat.
inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  if (t.rank() != 2) throw ShapeError("embedding-gather: rank-2 table required");
  std::size_t m = t.dim(0), d = t.dim(1);
  for (std::size_t i : idx)
    if (i >= m) throw ShapeError("embedding-gather: index out of range");
  Tensor out(Shape{idx.size(), d});
  const double* x = t.data();
  double* o = out.data();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(x + idx[r] * d, x + (idx[r] + 1) * d, o + r * d);
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kGather, std::move(out),
                        [idx, d, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0])) {
                            for (std::size_t r = 0; r < idx.size(); ++r) {
                              const double* gr = g.data() + r * d;
                              double* dst = dt + idx[r] * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j];
                            }
                          }
                        });
}

/// 1-based inclusive frame range.
struct SegmentSpan {
  std::size_t begin = 1;
  std::size_t end = 1;
};

/// Weighted mean of frame vectors per segment:
///   c_i = sum_{t in seg_i} alpha_t e_t / sum_{t in seg_i} alpha_t.
/// Segment boundaries are constants of the pass; gradients flow into both
/// the frames and the weights.
inline Tensor segment_weighted_mean(const Tensor& frames, const Tensor& alpha,
                                    const std::vector<SegmentSpan>& segments) {
  if (frames.rank() != 2) throw ShapeError("segment-weighted-mean: frames must be [T,D]");
  std::size_t t_len = frames.dim(0), d = frames.dim(1);
  if (alpha.size() != t_len)
    throw ShapeError("segment-weighted-mean: weights must have one entry per frame");
  if (segments.empty()) throw ShapeError("segment-weighted-mean: no segments");
  for (const SegmentSpan& s : segments)
    if (s.begin < 1 || s.end < s.begin || s.end > t_len)
      throw ShapeError("segment-weighted-mean: segment out of range");
  std::size_t count = segments.size();
  Tensor out(Shape{count, d});
  std::vector<double> dens(count);
  const double* e = frames.data();
  const double* a = alpha.data();
  double* o = out.data();
  for (std::size_t i = 0; i < count; ++i) {
    double den = 0.0;
    double* ci = o + i * d;
    for (std::size_t t = segments[i].begin - 1; t < segments[i].end; ++t) {
      den += a[t];
      const double* et = e + t * d;
      for (std::size_t j = 0; j < d; ++j) ci[j] += a[t] * et[j];
    }
    if (den < 1e-12) throw NumericalError("degenerate segment weight");
    dens[i] = den;
    for (std::size_t j = 0; j < d; ++j) ci[j] /= den;
  }
  check_finite(out, "segment-weighted-mean");
  auto ctx = detail::resolve({&frames, &alpha});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto ev = detail::keep(frames);
  auto av = detail::keep(alpha);
  auto cv = detail::keep(out);
  auto denv = std::make_shared<std::vector<double>>(std::move(dens));
  return detail::attach(
      ctx, OpKind::kSegmentWeightedMean, std::move(out),
      [segments, d, ev, av, cv, denv, parents](Tape& tape, const std::vector<double>& g) {
        double* de = detail::parent_grad(tape, parents[0]);
        double* da = detail::parent_grad(tape, parents[1]);
        for (std::size_t i = 0; i < segments.size(); ++i) {
          const double* gi = g.data() + i * d;
          const double* ci = cv->data() + i * d;
          double den = (*denv)[i];
          for (std::size_t t = segments[i].begin - 1; t < segments[i].end; ++t) {
            double at = (*av)[t];
            const double* et = ev->data() + t * d;
            if (de != nullptr) {
              double* det = de + t * d;
              double w = at / den;
              for (std::size_t j = 0; j < d; ++j) det[j] += w * gi[j];
            }
            if (da != nullptr) {
              double s = 0.0;
              for (std::size_t j = 0; j < d; ++j) s += gi[j] * (et[j] - ci[j]);
              da[t] += s / den;
            }
          }
        }
      });
}

/// Replaces masked positions with a constant; gradients stop at the mask.
inline Tensor masked_fill(const Tensor& t, const std::vector<std::uint8_t>& mask, double value) {
  if (mask.size() != t.size()) throw ShapeError("masked-fill: mask size mismatch");
  Tensor out(t.shape());
  const double* x = t.data();
  double* o = out.data();
  for (std::size_t i = 0; i < t.size(); ++i) o[i] = mask[i] ? value : x[i];
  check_finite(out, "masked-fill");
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
  return detail::attach(ctx, OpKind::kMaskedFill, std::move(out),
                        [m, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0]))
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (!(*m)[i]) dt[i] += g[i];
                        });
}

/// Elementwise log(exp(a)+exp(b)), computed stably.
inline Tensor logaddexp(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("logaddexp: shape mismatch");
  Tensor out(a.shape());
  const double* xa = a.data();
  const double* xb = b.data();
  double* o = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    double hi = std::max(xa[i], xb[i]);
    double lo = std::min(xa[i], xb[i]);
    o[i] = hi + std::log1p(std::exp(lo - hi));
  }
  check_finite(out, "logaddexp");
  auto ctx = detail::resolve({&a, &b});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  auto av = detail::keep(a);
  auto bv = detail::keep(b);
  auto yv = detail::keep(out);
  return detail::attach(ctx, OpKind::kLogAddExp, std::move(out),
                        [av, bv, yv, parents](Tape& tape, const std::vector<double>& g) {
                          double* da = detail::parent_grad(tape, parents[0]);
                          double* db = detail::parent_grad(tape, parents[1]);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            double y = (*yv)[i];
                            if (da != nullptr) da[i] += g[i] * std::exp((*av)[i] - y);
                            if (db != nullptr) db[i] += g[i] * std::exp((*bv)[i] - y);
                          }
                        });
}

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.size())
    throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  Tensor out(shape, t.values());
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  return detail::attach(ctx, OpKind::kReshape, std::move(out),
                        [parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0]))
                            for (std::size_t i = 0; i < g.size(); ++i) dt[i] += g[i];
                        });
}

/// Sum of all elements, as a rank-0 scalar.
inline Tensor sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum");
  auto ctx = detail::resolve({&t});
  if (!ctx.live) return out;
  auto parents = ctx.parents;
  std::size_t n = t.size();
  return detail::attach(ctx, OpKind::kSum, std::move(out),
                        [n, parents](Tape& tape, const std::vector<double>& g) {
                          if (double* dt = detail::parent_grad(tape, parents[0]))
                            for (std::size_t i = 0; i < n; ++i) dt[i] += g[0];
                        });
}

}  // namespace umasplit
