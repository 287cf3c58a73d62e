// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "evacap/augment.hpp"
#include "evacap/errors.hpp"
#include "oracle.hpp"

using namespace evacap;
using augment::Batch;
using augment::Permutation;

namespace {

Batch make_batch(std::size_t b, Rng& rng) {
  Batch batch;
  for (std::size_t i = 0; i < b; ++i) {
    batch.audio.push_back(oracle::random(3, 2, rng));
    batch.visual.push_back(oracle::random(2, 2, rng));
    batch.captions.push_back({static_cast<int>(i) + 3});
    batch.mismatch_flags.push_back(false);
  }
  return batch;
}

}  // namespace

TEST_SUITE("permutation") {
  TEST_CASE("mapping validation") {
    CHECK_THROWS_AS(Permutation::from_mapping({0, 0, 1}), InvalidInput);
    CHECK_THROWS_AS(Permutation::from_mapping({0, 3, 1}), InvalidInput);
    CHECK(Permutation::from_mapping({1, 0, 2}).fixed_points == 1);
    CHECK(Permutation::identity(4).fixed_points == 4);
  }

  TEST_CASE("empty batch is rejected") {
    Rng r(0);
    CHECK_THROWS_AS(augment::sample_permutation(0, r), InvalidInput);
  }

  TEST_CASE("a single element can only map to itself") {
    Rng r(0);
    const auto p = augment::sample_permutation(1, r);
    CHECK(p.mapping == std::vector<std::size_t>{0});
    CHECK(p.fixed_points == 1);
  }

  TEST_CASE("seeded golden permutation") {
    for (int k = 0; k < 3; ++k) {
      Rng r(1234);
      const auto p = augment::sample_permutation(4, r);
      CHECK(p.mapping == std::vector<std::size_t>{2, 3, 1, 0});
      CHECK(p.fixed_points == 0);
    }
  }

  TEST_CASE("all 120 permutations of five are equally likely") {
    Rng r(99);
    const int n = 100000;
    std::map<std::vector<std::size_t>, int> counts;
    for (int i = 0; i < n; ++i) ++counts[augment::sample_permutation(5, r).mapping];
    CHECK(counts.size() == 120);

    const double p = 1.0 / 120.0;
    const double expected = n * p;
    const double sigma = std::sqrt(n * p * (1.0 - p));
    double chi2 = 0.0;
    for (const auto& [perm, c] : counts) {
      CHECK(std::abs(c - expected) <= 3.0 * sigma);
      chi2 += (c - expected) * (c - expected) / expected;
    }
    // 99.9% quantile of chi-square with 119 degrees of freedom.
    CHECK(chi2 < 172.42);
  }
}

TEST_SUITE("sms") {
  TEST_CASE("probability zero is a bit-identical passthrough") {
    Rng r(1), draws(2);
    const Batch b = make_batch(6, r);
    for (int k = 0; k < 50; ++k) {
      const Batch out = augment::sms_apply(b, 0.0, draws);
      CHECK(out.visual == b.visual);
      CHECK(out.audio == b.audio);
      CHECK(out.captions == b.captions);
      CHECK(std::none_of(out.mismatch_flags.begin(), out.mismatch_flags.end(), [](bool f) { return f; }));
    }
  }

  TEST_CASE("single-element batches never change") {
    Rng r(3);
    const Batch b = make_batch(1, r);
    for (double p : {0.0, 0.5, 1.0}) {
      const Batch out = augment::sms_apply(b, p, r);
      CHECK(out.visual == b.visual);
      CHECK_FALSE(out.mismatch_flags[0]);
    }
  }

  TEST_CASE("visual multiset is preserved and flags mark displaced entries") {
    Rng r(4);
    const Batch b = make_batch(8, r);
    for (int k = 0; k < 200; ++k) {
      const Batch out = augment::sms_apply(b, 1.0, r);
      CHECK(out.audio == b.audio);
      CHECK(out.captions == b.captions);
      std::vector<std::size_t> source;
      for (std::size_t i = 0; i < 8; ++i) {
        const auto it = std::find(b.visual.begin(), b.visual.end(), out.visual[i]);
        REQUIRE(it != b.visual.end());
        source.push_back(static_cast<std::size_t>(it - b.visual.begin()));
        CHECK(out.mismatch_flags[i] == (source.back() != i));
      }
      std::sort(source.begin(), source.end());
      for (std::size_t i = 0; i < 8; ++i) CHECK(source[i] == i);
    }
  }

  TEST_CASE("mean mismatched fraction at B = 8 and p = 0.5") {
    // Per batch X = D/B with D = displaced count. With probability p a
    // uniform permutation is drawn: E[D] = B - 1 and E[D^2] = (B-1)^2 + 1.
    const double B = 8.0, p = 0.5;
    const double mean = p * (B - 1.0) / B;
    const double second = p * ((B - 1.0) * (B - 1.0) + 1.0) / (B * B);
    const int batches = 10000;
    const double sigma = std::sqrt((second - mean * mean) / batches);
    CHECK(mean == 0.4375);

    Rng r(5);
    const Batch b = make_batch(8, r);
    Rng draws(2024);
    double total = 0.0;
    for (int k = 0; k < batches; ++k) {
      const Batch out = augment::sms_apply(b, p, draws);
      total += static_cast<double>(std::count(out.mismatch_flags.begin(), out.mismatch_flags.end(), true)) / B;
    }
    CHECK(std::abs(total / batches - mean) <= 3.0 * sigma);
  }

  TEST_CASE("invalid arguments") {
    Rng r(6);
    Batch b = make_batch(3, r);
    CHECK_THROWS_AS(augment::sms_apply(b, -0.1, r), InvalidInput);
    CHECK_THROWS_AS(augment::sms_apply(b, 1.5, r), InvalidInput);
    b.visual.pop_back();
    CHECK_THROWS_AS(augment::sms_apply(b, 0.5, r), InvalidInput);
  }
}
