// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy audio-visual captioner.
//
//   audio  [T_a_frames x d_in_audio]  --patch--> audio encoder  --> A [T_a x d]
//   visual [T_v x (P * d_in_visual)]  one row per video frame, P patches each
//
//   gated      : frames are mean-pooled over their patches, encoded to
//                V [T_v x d], and fused with A by entropy-gated cross-attention.
//                Decoder memory is the fused [T_a x d] sequence.
//   concat     : every patch becomes a token; the encoded [T_v*P x d] sequence
//                is appended to A and the decoder attends over all of it.
//   audio_only : decoder memory is A.
//
// All three modes share one parameter set, so a checkpoint trained in one mode
// can be evaluated in another.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evacap/autodiff.hpp"
#include "evacap/fusion.hpp"
#include "evacap/tensor.hpp"

#include <json.hpp>

namespace evacap::model {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

enum class FusionMode { gated, concat, audio_only };

std::string to_string(FusionMode mode);
FusionMode fusion_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_enc_layers = 1;
  std::size_t n_heads = 2;
  std::size_t n_dec_layers = 2;
  std::size_t mlp_ratio = 2;
  std::size_t T_a = 8;  // audio frames per clip
  std::size_t T_v = 4;  // video frames per clip
  std::size_t d_in_audio = 12;
  std::size_t audio_patch = 1;  // consecutive audio frames folded into one token
  std::size_t d_in_visual = 12;  // width of one visual patch
  std::size_t patches_per_frame = 1;
  std::size_t vocab_size = 24;
  std::size_t max_caption_len = 6;
  FusionMode fusion_mode = FusionMode::gated;
  std::size_t fusion_heads = 1;
  bool detach_entropy = false;
  std::uint64_t seed = 0;

  /// Throws InvalidInput on zero extents or d_model not divisible by heads.
  void validate() const;
  std::size_t visual_row_width() const { return patches_per_frame * d_in_visual; }
  std::size_t audio_tokens(std::size_t frames) const { return frames / audio_patch; }
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const nlohmann::json& j);

/// Decoder input [BOS, c1..cn] for a content caption.
std::vector<int> teacher_inputs(const std::vector<int>& caption);
/// Decoder targets [c1..cn, EOS].
std::vector<int> teacher_targets(const std::vector<int>& caption);

struct ForwardResult {
  Tensor logits;  // L x vocab
  std::optional<fusion::FusionOutput> fusion;
  std::size_t memory_length = 0;
  std::uint64_t decoder_flops = 0;
};

struct DecodeOptions {
  /// Ignore the end token and always emit max_len tokens (benchmarking).
  bool force_steps = false;
};

/// Differentiable pieces of one forward pass.
struct TapeForward {
  ad::Var logits;
  ad::Var memory;
  std::optional<fusion::FusionNodes> fusion;
  std::uint64_t decoder_flops = 0;
};

class Captioner {
 public:
  explicit Captioner(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  fusion::FusionParams fusion_params() const;
  void set_fusion_params(const fusion::FusionParams& p);

  // ---- tape level ----------------------------------------------------------

  ad::Var encode_audio(ad::Tape& tape, const Tensor& audio) const;
  /// One token per frame (patches mean-pooled).
  ad::Var encode_visual_frames(ad::Tape& tape, const Tensor& visual) const;
  /// One token per patch.
  ad::Var encode_visual_patches(ad::Tape& tape, const Tensor& visual) const;

  /// Decoder memory for `mode`; `fusion` is set when gated fusion ran.
  ad::Var build_memory(ad::Tape& tape, const Tensor& audio, const Tensor& visual, FusionMode mode,
                       std::optional<fusion::FusionNodes>* fusion = nullptr) const;
  /// Logits [L x vocab] for decoder input tokens attending to `memory`.
  ad::Var decode_logits(ad::Tape& tape, ad::Var memory, const std::vector<int>& input_tokens) const;

  /// Teacher-forced pass; throws InvalidInput if the caption exceeds
  /// max_caption_len or holds ids outside the vocabulary.
  TapeForward forward(ad::Tape& tape, const Tensor& audio, const Tensor& visual, const std::vector<int>& caption,
                      FusionMode mode) const;

  // ---- tensor level --------------------------------------------------------

  /// Runs the audio (is_audio) or frame-level visual encoder.
  Tensor encode(const Tensor& features, bool is_audio) const;

  ForwardResult forward(const Tensor& audio, const Tensor& visual, const std::vector<int>& caption,
                        FusionMode mode) const;
  ForwardResult forward_gated(const Tensor& audio, const Tensor& visual, const std::vector<int>& caption) const {
    return forward(audio, visual, caption, FusionMode::gated);
  }
  ForwardResult forward_concat(const Tensor& audio, const Tensor& visual, const std::vector<int>& caption) const {
    return forward(audio, visual, caption, FusionMode::concat);
  }
  ForwardResult forward_audio_only(const Tensor& audio, const std::vector<int>& caption) const {
    return forward(audio, Tensor{}, caption, FusionMode::audio_only);
  }

  /// Greedy argmax decoding (ties go to the lowest id); stops after the end
  /// token unless options.force_steps. The end token is not returned.
  std::vector<int> decode_greedy(const Tensor& audio, const Tensor& visual, std::size_t max_len, FusionMode mode,
                                 const DecodeOptions& options = {}) const;
  /// Gate value of the gated path for one sample (no decoding).
  fusion::FusionOutput inspect_fusion(const Tensor& audio, const Tensor& visual) const;

  // ---- checkpoints ---------------------------------------------------------

  /// Binary container: magic, JSON config header, then named little-endian
  /// float64 blocks.
  void save(const std::string& path) const;
  static Captioner load(const std::string& path);

 private:
  ad::Var encoder_stack(ad::Tape& tape, ad::Var x, const std::string& prefix) const;
  ad::Var self_attention(ad::Tape& tape, ad::Var x, const std::string& prefix, bool causal) const;
  ad::Var cross_attention(ad::Tape& tape, ad::Var x, ad::Var memory, const std::string& prefix) const;
  ad::Var mlp(ad::Tape& tape, ad::Var x, const std::string& prefix) const;
  ad::Var norm(ad::Tape& tape, ad::Var x, const std::string& prefix) const;
  ad::Var p(ad::Tape& tape, const std::string& name) const { return tape.param(params_, name); }
  Tensor audio_tokens(const Tensor& audio) const;
  void check_caption(const std::vector<int>& caption) const;

  ModelConfig config_;
  ad::ParamStore params_;
};

/// Sinusoidal position table [n x d].
Tensor sinusoidal_positions(std::size_t n, std::size_t d);

}  // namespace evacap::model
