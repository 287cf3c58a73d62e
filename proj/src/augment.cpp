// SPDX-License-Identifier: Apache-2.0
#include "evacap/augment.hpp"

#include <numeric>
#include <utility>

#include "evacap/errors.hpp"

namespace evacap::augment {

Permutation Permutation::from_mapping(std::vector<std::size_t> mapping) {
  std::vector<bool> seen(mapping.size(), false);
  Permutation p;
  for (std::size_t i = 0; i < mapping.size(); ++i) {
    const std::size_t m = mapping[i];
    if (m >= mapping.size() || seen[m]) throw InvalidInput("permutation mapping is not a bijection");
    seen[m] = true;
    if (m == i) ++p.fixed_points;
  }
  p.mapping = std::move(mapping);
  return p;
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  return from_mapping(std::move(m));
}

void Batch::validate() const {
  const std::size_t n = audio.size();
  if (visual.size() != n || captions.size() != n || mismatch_flags.size() != n) {
    throw InvalidInput("batch lists differ in length");
  }
}

Permutation sample_permutation(std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw InvalidInput("sample_permutation: batch size must be >= 1");
  std::vector<std::size_t> m(batch_size);
  std::iota(m.begin(), m.end(), std::size_t{0});
  for (std::size_t i = batch_size - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(i + 1));
    std::swap(m[i], m[j]);
  }
  return Permutation::from_mapping(std::move(m));
}

Batch sms_apply(const Batch& batch, double p_mix, Rng& rng) {
  batch.validate();
  if (!(p_mix >= 0.0 && p_mix <= 1.0)) throw InvalidInput("sms_apply: p_mix must lie in [0, 1]");
  Batch out = batch;
  out.mismatch_flags.assign(batch.size(), false);
  if (batch.size() == 0 || !rng.bernoulli(p_mix)) return out;

  const Permutation perm = sample_permutation(batch.size(), rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.visual[i] = batch.visual[perm.mapping[i]];
    out.mismatch_flags[i] = perm.mapping[i] != i;
  }
  return out;
}

}  // namespace evacap::augment
