// SPDX-License-Identifier: Apache-2.0
#pragma once

// Entropy-aware gated cross-attention.
//
// Audio tokens query visual tokens:
//
//   P   = softmax((A·Wq)(V·Wk)ᵀ / √d)          attention, T_a × T_v
//   F   = P·(V·Wv)                              attended visual features
//   E   = mean_i(-Σ_j P_ij ln P_ij) / ln T_v     normalized entropy in [0, 1]
//   g   = σ(w_g·E + b_g)                         scalar gate per sample
//   out = (1 - g)·A + g·F
//
// A diffuse attention pattern (high E) signals that no visual token explains
// the audio; a learned negative w_g then closes the gate.
//
// Two routes are provided: plain tensor functions for inference and
// inspection, and tape-recorded ops for training. FusionTrace wraps the tape
// route for callers that want gradients of one isolated fusion call.

#include <memory>
#include <vector>

#include "evacap/autodiff.hpp"
#include "evacap/rng.hpp"
#include "evacap/tensor.hpp"

namespace evacap::fusion {

struct FusionParams {
  Tensor w_q;  // d x d
  Tensor w_k;  // d x d
  Tensor w_v;  // d x d
  double w_g = 0.0;
  double b_g = 0.0;

  std::size_t dim() const { return w_q.rows(); }

  /// Gaussian projections with std `scale`/√d; neutral gate (w_g = b_g = 0).
  static FusionParams init(std::size_t d, Rng& rng, double scale = 1.0);
  static FusionParams identity(std::size_t d);
};

struct FusionOptions {
  /// Head count for the attention; d must be divisible by it. Entropy is
  /// averaged over heads.
  std::size_t heads = 1;
  /// Treat the entropy as a constant when differentiating.
  bool detach_entropy = false;
};

struct CrossAttention {
  Tensor features;   // T_a x d
  Tensor attention;  // T_a x T_v
};

struct FusionOutput {
  Tensor fused;      // T_a x d
  Tensor attention;  // T_a x T_v (mean over heads when heads > 1)
  Tensor attended;   // F, T_a x d
  double entropy = 0.0;
  double gate = 0.0;
};

CrossAttention cross_attend(const Tensor& audio, const Tensor& visual, const FusionParams& params);

/// Normalized mean row entropy of a row-stochastic matrix; 0 when it has a
/// single column. Throws InvalidInput if a row is off by more than 1e-6.
double attention_entropy(const Tensor& attention);

double gate_value(double entropy, const FusionParams& params);

FusionOutput fuse(const Tensor& audio, const Tensor& visual, const FusionParams& params,
                  const FusionOptions& options = {});

// ---- tape route ------------------------------------------------------------

struct FusionVars {
  ad::Var w_q, w_k, w_v, w_g, b_g;
};

struct FusionNodes {
  ad::Var fused;
  ad::Var attended;
  std::vector<ad::Var> attention;  // one per head
  ad::Var entropy;
  ad::Var gate;
};

FusionNodes fuse(ad::Var audio, ad::Var visual, const FusionVars& params, const FusionOptions& options = {});

struct FusionGradient {
  Tensor w_q, w_k, w_v;
  double w_g = 0.0;
  double b_g = 0.0;
  Tensor audio, visual;
};

/// A recorded fusion call that can be differentiated once.
class FusionTrace {
 public:
  FusionTrace() = default;

  static FusionTrace record(const Tensor& audio, const Tensor& visual, const FusionParams& params,
                            const FusionOptions& options = {});

  bool recorded() const { return state_ != nullptr; }
  /// Throws StateError if nothing was recorded.
  const FusionOutput& output() const;

 private:
  friend FusionGradient fuse_backward(FusionTrace& trace, const Tensor& upstream);

  struct State;
  std::shared_ptr<State> state_;
};

/// Gradients of ⟨upstream, fused⟩ with respect to the parameters and both
/// inputs. Throws StateError on an empty trace or a second call.
FusionGradient fuse_backward(FusionTrace& trace, const Tensor& upstream);

}  // namespace evacap::fusion
