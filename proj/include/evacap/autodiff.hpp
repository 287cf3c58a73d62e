// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Tape owns every intermediate value of one forward pass. Ops are free
// functions taking Var handles; each op computes its value eagerly and, when
// any input requires a gradient, records a closure that propagates the output
// gradient to its inputs. Tape::backward walks the records in reverse order.
//
// A tape is single-owner and single-threaded. Parameters live in a ParamStore
// and are referenced (not copied) by the tape, so a store must outlive every
// tape that reads from it and must not be mutated while a tape is live.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "evacap/tensor.hpp"

namespace evacap::ad {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
};

/// Named trainable tensors. Iteration order is by name, which fixes the
/// layout of checkpoints and of optimizer state.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t num_scalars() const;

  const std::map<std::string, Tensor>& items() const { return params_; }
  std::map<std::string, Tensor>& items() { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// Per-parameter gradients, shape-congruent with the ParamStore they came from.
using Gradient = std::map<std::string, Tensor>;

Gradient zero_gradient(const ParamStore& store);
/// dst += weight * src for every entry.
void accumulate(Gradient& dst, const Gradient& src, double weight = 1.0);

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Inference mode: values are computed but nothing is recorded for backward.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// A differentiable leaf whose gradient can be read back with grad().
  Var input(Tensor value);
  /// Leaf bound to a store entry; repeated calls return the same Var.
  Var param(const ParamStore& store, const std::string& name);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Propagates `seed` (shape of out) back through the tape. May be called once.
  void backward(Var out, const Tensor& seed);
  /// Seeds a [1x1] output with 1.
  void backward(Var scalar_out);

  /// Gradient of a leaf after backward(); zeros if the leaf was not reached.
  Tensor grad(Var v) const;
  /// Gradients for every entry of `store`; parameters this tape never touched
  /// get zero tensors.
  Gradient param_gradient(const ParamStore& store) const;

  std::uint64_t flops() const { return flops_; }
  void add_flops(std::uint64_t n) { flops_ += n; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, bool requires_grad, BackwardFn fn);
  bool any_requires_grad(std::initializer_list<Var> vars) const;
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of an input, allocated on first use. Returns
  /// nullptr if the node does not require a gradient.
  Tensor* grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var v, const char* what) const;
  const Tensor& node_value(const Node& n) const { return n.external ? *n.external : n.value; }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
  const ParamStore* bound_store_ = nullptr;
  std::uint64_t flops_ = 0;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
/// a·bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a [1xn] row to every row of a [mxn] matrix.
Var add_row(Var a, Var bias);
/// Multiplies every element of `a` by the [1x1] value `s`.
Var scale_by(Var a, Var s);
Var softmax_rows(Var a);
/// Softmax with entries j > i masked out (causal self-attention).
Var softmax_rows_causal(Var a);
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
/// tanh approximation of GELU.
Var gelu(Var a);
Var sigmoid(Var a);

/// Mean over rows of the row Shannon entropy divided by ln(cols), clamped to
/// [0, 1]; 0 when cols == 1. Entries equal to 0 contribute 0. Rows must sum
/// to 1 within 1e-6.
Var normalized_row_entropy(Var p);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);
/// Gathers rows of `table` by id.
Var embedding(Var table, const std::vector<int>& ids);
/// Stops gradient flow.
Var detach(Var a);

/// Sum of all entries as [1x1].
Var sum(Var a);
Var mean(Var a);
/// Σ w⊙a as [1x1], w a constant of a's shape.
Var weighted_sum(Var a, const Tensor& w);
/// Mean token negative log-likelihood of row-wise logits; positions whose
/// target equals `ignore_id` are excluded.
Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_id = -1);

}  // namespace evacap::ad
