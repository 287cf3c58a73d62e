// SPDX-License-Identifier: Apache-2.0
#include "evacap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>

#include "evacap/errors.hpp"

namespace evacap::metrics {

namespace {

using NgramCounts = std::map<Tokens, std::size_t>;

NgramCounts count_ngrams(const Tokens& s, int n) {
  NgramCounts counts;
  const auto k = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + k <= s.size(); ++i) ++counts[Tokens(s.begin() + i, s.begin() + i + k)];
  return counts;
}

struct OrderStats {
  std::size_t matched = 0;
  std::size_t total = 0;
};

// Clipped matches per order 1..max_n for one sentence.
std::array<OrderStats, 4> sentence_stats(const Tokens& hyp, const std::vector<Tokens>& refs, int max_n) {
  std::array<OrderStats, 4> stats{};
  for (int n = 1; n <= max_n; ++n) {
    const NgramCounts h = count_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    auto& st = stats[static_cast<std::size_t>(n - 1)];
    for (const auto& [g, c] : h) {
      auto it = max_ref.find(g);
      st.matched += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
      st.total += c;
    }
  }
  return stats;
}

// Reference length closest to the hypothesis length; ties go to the shorter.
std::size_t closest_ref_length(std::size_t hyp_len, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(hyp_len));
    const auto db = std::abs(static_cast<long>(best) - static_cast<long>(hyp_len));
    if (d < db || (d == db && r.size() < best)) best = r.size();
  }
  return best;
}

double brevity_penalty(std::size_t hyp_len, std::size_t ref_len) {
  if (hyp_len == 0) return 0.0;
  if (hyp_len >= ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

double combine(const std::array<OrderStats, 4>& stats, int n, double bp) {
  double product = 1.0;
  for (int k = 0; k < n; ++k) {
    const auto& st = stats[static_cast<std::size_t>(k)];
    if (st.total == 0 || st.matched == 0) return 0.0;
    product *= static_cast<double>(st.matched) / static_cast<double>(st.total);
  }
  return bp * (n == 1 ? product : std::pow(product, 1.0 / n));
}

void check_order(int n) {
  if (n < 1 || n > 4) throw InvalidInput("BLEU order must be in 1..4");
}

void check_refs(const std::vector<Tokens>& refs) {
  if (refs.empty()) throw InvalidInput("metric needs at least one reference");
}

}  // namespace

double bleu_n(const Tokens& hypothesis, const std::vector<Tokens>& references, int n) {
  check_order(n);
  check_refs(references);
  if (hypothesis.empty()) return 0.0;
  const auto stats = sentence_stats(hypothesis, references, n);
  const double bp = brevity_penalty(hypothesis.size(), closest_ref_length(hypothesis.size(), references));
  return combine(stats, n, bp);
}

std::array<double, 4> corpus_bleu(const std::vector<Tokens>& hypotheses,
                                  const std::vector<std::vector<Tokens>>& references) {
  if (hypotheses.size() != references.size()) throw InvalidInput("corpus_bleu: hypothesis/reference count mismatch");
  std::array<OrderStats, 4> pooled{};
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    check_refs(references[i]);
    const auto st = sentence_stats(hypotheses[i], references[i], 4);
    for (std::size_t k = 0; k < 4; ++k) {
      pooled[k].matched += st[k].matched;
      pooled[k].total += st[k].total;
    }
    hyp_len += hypotheses[i].size();
    ref_len += closest_ref_length(hypotheses[i].size(), references[i]);
  }
  const double bp = brevity_penalty(hyp_len, ref_len);
  std::array<double, 4> out{};
  for (int n = 1; n <= 4; ++n) out[static_cast<std::size_t>(n - 1)] = combine(pooled, n, bp);
  return out;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& hypothesis, const std::vector<Tokens>& references, double beta) {
  check_refs(references);
  if (hypothesis.empty()) return 0.0;
  double best_p = 0.0, best_r = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(hypothesis, ref));
    best_p = std::max(best_p, lcs / static_cast<double>(hypothesis.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) return 0.0;
  const double b2 = beta * beta;
  return ((1.0 + b2) * best_p * best_r) / (best_r + b2 * best_p);
}

double corpus_rouge_l(const std::vector<Tokens>& hypotheses, const std::vector<std::vector<Tokens>>& references) {
  if (hypotheses.size() != references.size()) throw InvalidInput("corpus_rouge_l: count mismatch");
  if (hypotheses.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += rouge_l(hypotheses[i], references[i]);
  return s / static_cast<double>(hypotheses.size());
}

double token_accuracy(const std::vector<Tokens>& hypotheses, const std::vector<std::vector<Tokens>>& references) {
  if (hypotheses.size() != references.size()) throw InvalidInput("token_accuracy: count mismatch");
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    check_refs(references[i]);
    const Tokens& h = hypotheses[i];
    const Tokens& r = references[i].front();
    for (std::size_t k = 0; k < std::min(h.size(), r.size()); ++k) hits += h[k] == r[k];
    total += std::max(h.size(), r.size());
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

}  // namespace evacap::metrics
