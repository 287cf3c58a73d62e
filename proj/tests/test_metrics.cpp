// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "evacap/errors.hpp"
#include "evacap/metrics.hpp"

using namespace evacap;
using metrics::Tokens;

namespace {

// Words a..z map to ids 10..35.
Tokens words(const std::string& s) {
  Tokens t;
  for (char c : s)
    if (c != ' ') t.push_back(10 + (c - 'a'));
  return t;
}

// Textbook LCS table, kept separate from the library routine.
std::size_t lcs_oracle(const Tokens& a, const Tokens& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t[a.size()][b.size()];
}

}  // namespace

TEST_SUITE("bleu") {
  TEST_CASE("identical pair scores one at every order") {
    const Tokens s = words("a b c d e");
    for (int n = 1; n <= 4; ++n) CHECK(metrics::bleu_n(s, {s}, n) == 1.0);
    const auto corpus = metrics::corpus_bleu({s, words("x y z w")}, {{s}, {words("x y z w")}});
    for (double v : corpus) CHECK(v == 1.0);
  }

  TEST_CASE("disjoint pair scores zero") {
    for (int n = 1; n <= 4; ++n) CHECK(metrics::bleu_n(words("a b c d"), {words("w x y z")}, n) == 0.0);
  }

  TEST_CASE("three of four unigrams") {
    CHECK(metrics::bleu_n(words("a b c d"), {words("a b x d")}, 1) == 0.75);
    // Bigrams: ab bc cd against ab bx xd, one match.
    CHECK(metrics::bleu_n(words("a b c d"), {words("a b x d")}, 2) == doctest::Approx(std::sqrt(0.75 / 3.0)));
  }

  TEST_CASE("clipping counts each reference token once") {
    // "a a a a" against "a b c d": one clipped match out of four.
    CHECK(metrics::bleu_n(words("a a a a"), {words("a b c d")}, 1) == 0.25);
  }

  TEST_CASE("brevity penalty uses the closest reference length") {
    const double bp = std::exp(1.0 - 4.0 / 2.0);
    CHECK(metrics::bleu_n(words("a b"), {words("a b c d")}, 1) == bp);
    // Length 3 is closer to 2 than length 6 is.
    CHECK(metrics::bleu_n(words("a b"), {words("a b c d e f"), words("a b c")}, 1) == std::exp(1.0 - 3.0 / 2.0));
  }

  TEST_CASE("empty hypothesis and invalid order") {
    CHECK(metrics::bleu_n({}, {words("a")}, 1) == 0.0);
    CHECK_THROWS_AS(metrics::bleu_n(words("a"), {words("a")}, 5), InvalidInput);
    CHECK_THROWS_AS(metrics::bleu_n(words("a"), {}, 1), InvalidInput);
  }

  TEST_CASE("corpus counts are pooled before dividing") {
    // 3/4 and 1/2 unigram matches pool to 4/6, not to the mean 5/8.
    const auto c = metrics::corpus_bleu({words("a b c d"), words("e f")}, {{words("a b x d")}, {words("e z")}});
    CHECK(c[0] == 4.0 / 6.0);
  }
}

TEST_SUITE("rouge") {
  TEST_CASE("identical and disjoint") {
    CHECK(metrics::rouge_l(words("a b c"), {words("a b c")}) == 1.0);
    CHECK(metrics::rouge_l(words("a b c"), {words("x y z")}) == 0.0);
    CHECK(metrics::rouge_l({}, {words("a")}) == 0.0);
  }

  TEST_CASE("subsequence example") {
    const Tokens hyp = words("a c e"), ref = words("a b c d e");
    CHECK(lcs_oracle(hyp, ref) == 3);
    CHECK(metrics::lcs_length(hyp, ref) == 3);
    const double p = 3.0 / 3.0, r = 3.0 / 5.0, b2 = 1.2 * 1.2;
    const double f = ((1.0 + b2) * p * r) / (r + b2 * p);
    CHECK(f == doctest::Approx(1.464 / 2.04).epsilon(1e-15));
    CHECK(metrics::rouge_l(hyp, {ref}) == f);
  }

  TEST_CASE("LCS agrees with the table oracle on assorted pairs") {
    const std::vector<std::pair<std::string, std::string>> pairs{
        {"a b c b d a b", "b d c a b a"}, {"a", "b"}, {"a a a", "a"}, {"x y z", "z y x"}, {"a b", "a b"}};
    for (const auto& [x, y] : pairs) CHECK(metrics::lcs_length(words(x), words(y)) == lcs_oracle(words(x), words(y)));
  }

  TEST_CASE("best precision and best recall are taken over references") {
    // Ref 1 gives P = 2/2, R = 2/4; ref 2 gives P = 1/2, R = 1/1.
    const double v = metrics::rouge_l(words("a b"), {words("a b c d"), words("a")});
    const double b2 = 1.2 * 1.2;
    CHECK(v == ((1.0 + b2) * 1.0 * 1.0) / (1.0 + b2 * 1.0));
  }
}

TEST_SUITE("token_accuracy") {
  TEST_CASE("position-wise matches over the longer length") {
    CHECK(metrics::token_accuracy({words("a b c")}, {{words("a x c d")}}) == 0.5);
    CHECK(metrics::token_accuracy({words("a b")}, {{words("a b")}}) == 1.0);
  }
}
