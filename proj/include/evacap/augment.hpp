// SPDX-License-Identifier: Apache-2.0
#pragma once

// Stochastic Modality Shuffling: with probability p_mix a batch has its
// visual streams re-paired by one uniformly drawn permutation, producing
// audio/visual pairs that no longer belong together. Audio and captions stay
// in place; only the pairing changes.

#include <cstddef>
#include <vector>

#include "evacap/rng.hpp"
#include "evacap/tensor.hpp"

namespace evacap::augment {

/// Bijection on [0, B). Position i receives the element at mapping[i].
struct Permutation {
  std::vector<std::size_t> mapping;
  std::size_t fixed_points = 0;

  /// Validates the bijection and counts fixed points.
  static Permutation from_mapping(std::vector<std::size_t> mapping);
  static Permutation identity(std::size_t n);
  std::size_t size() const { return mapping.size(); }
};

struct Batch {
  std::vector<Tensor> audio;
  std::vector<Tensor> visual;
  std::vector<std::vector<int>> captions;
  /// True where visual[i] is not the original partner of audio[i].
  std::vector<bool> mismatch_flags;

  std::size_t size() const { return audio.size(); }
  /// Throws InvalidInput unless all four lists have the same length.
  void validate() const;
};

/// Fisher-Yates shuffle driven by `rng`; uniform over all B! permutations.
Permutation sample_permutation(std::size_t batch_size, Rng& rng);

/// Applies one Bernoulli(p_mix) draw for the whole batch; on success the
/// visual list is re-ordered by a fresh permutation and mismatch flags mark
/// displaced entries. On failure the batch is returned with all flags false.
Batch sms_apply(const Batch& batch, double p_mix, Rng& rng);

}  // namespace evacap::augment
