// SPDX-License-Identifier: Apache-2.0
#pragma once

// Caption metrics over token-id sequences. Conventions follow the MS-COCO
// caption evaluation toolkit: BLEU uses clipped n-gram counts and the
// closest reference length for the brevity penalty; ROUGE-L is the LCS
// F-measure with beta = 1.2, taking the best precision and best recall over
// the references.

#include <array>
#include <vector>

namespace evacap::metrics {

using Tokens = std::vector<int>;

/// Sentence-level BLEU of order n (1..4): brevity penalty times the geometric
/// mean of modified precisions of orders 1..n. 0 for an empty hypothesis or
/// when any order has no match.
double bleu_n(const Tokens& hypothesis, const std::vector<Tokens>& references, int n);

/// Corpus-level BLEU_1..BLEU_4 with counts and lengths pooled over the corpus.
std::array<double, 4> corpus_bleu(const std::vector<Tokens>& hypotheses,
                                  const std::vector<std::vector<Tokens>>& references);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

double rouge_l(const Tokens& hypothesis, const std::vector<Tokens>& references, double beta = 1.2);

/// Mean sentence ROUGE-L.
double corpus_rouge_l(const std::vector<Tokens>& hypotheses, const std::vector<std::vector<Tokens>>& references);

/// Position-wise matches against the first reference divided by the longer
/// of the two lengths, pooled over the corpus.
double token_accuracy(const std::vector<Tokens>& hypotheses, const std::vector<std::vector<Tokens>>& references);

}  // namespace evacap::metrics
