// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "evacap/data.hpp"
#include "evacap/errors.hpp"
#include "evacap/train.hpp"
#include "oracle.hpp"

using namespace evacap;

namespace {

data::SyntheticTaskSpec small_task(std::size_t n_train = 40) {
  data::SyntheticTaskSpec s;
  s.n_train = n_train;
  s.n_val = 8;
  s.n_test = 16;
  return s;
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_dec_layers = 1;
  return c;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("generation is deterministic and matches the recorded checksum") {
    const data::SyntheticTaskSpec spec;
    const auto a = data::generate_synthetic(spec), b = data::generate_synthetic(spec);
    CHECK(data::dataset_checksum(a.train) == data::dataset_checksum(b.train));
    CHECK(data::dataset_checksum(a.train) == doctest::Approx(770492.46556632116).epsilon(1e-12));
    CHECK(data::dataset_checksum(a.val) == doctest::Approx(74560.843308682699).epsilon(1e-12));
    CHECK(data::dataset_checksum(a.test) == doctest::Approx(254146.49424418967).epsilon(1e-12));
    CHECK(a.train.size() == 600);
    CHECK(a.test.front().caption.size() == 4);
  }

  TEST_CASE("without visually informative clips the caption follows the class") {
    data::SyntheticTaskSpec spec = small_task(100);
    spec.visual_informative = 0.0;
    const data::Vocabulary v{spec.n_classes, spec.n_attributes};
    for (const auto& s : data::generate_synthetic(spec).train) {
      const std::size_t c = static_cast<std::size_t>(s.caption[0] - v.class_token(0));
      CHECK(s.caption[1] == v.verb_token(c));
      CHECK(s.caption[2] == v.attribute_token(c % spec.n_attributes));
      CHECK(s.caption[3] == v.object_token(c % spec.n_attributes));
    }
  }

  TEST_CASE("noise-free clips of one class share their audio") {
    data::SyntheticTaskSpec spec = small_task(60);
    spec.noise_level = 0.0;
    const auto ds = data::generate_synthetic(spec);
    for (const auto& x : ds.train)
      for (const auto& y : ds.train)
        if (x.caption[0] == y.caption[0]) CHECK(x.audio == y.audio);
  }

  TEST_CASE("jsonl round trip is exact") {
    const auto ds = data::generate_synthetic(small_task());
    const auto path = std::filesystem::temp_directory_path() / "evacap_test_samples.jsonl";
    data::write_jsonl(path.string(), ds.test);
    const auto back = data::read_jsonl(path.string());
    REQUIRE(back.size() == ds.test.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].id == ds.test[i].id);
      CHECK(back[i].audio == ds.test[i].audio);
      CHECK(back[i].visual == ds.test[i].visual);
      CHECK(back[i].caption == ds.test[i].caption);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("spec validation") {
    data::SyntheticTaskSpec s;
    s.visual_informative = 1.5;
    CHECK_THROWS_AS(data::generate_synthetic(s), InvalidInput);
    CHECK_THROWS_AS(data::task_from_json({{"classes", 3}}), InvalidInput);
    CHECK(data::SyntheticTaskSpec{}.vocab_needed() == 21);
  }
}

TEST_SUITE("loss") {
  TEST_CASE("uniform logits cost ln V") {
    const Tensor logits({3, 11});
    CHECK(train::cross_entropy(logits, {1, 5, 10}) == doctest::Approx(std::log(11.0)).epsilon(1e-14));
  }

  TEST_CASE("confident correct logits cost almost nothing") {
    Tensor logits({2, 5});
    logits(0, 3) = 100.0;
    logits(1, 1) = 100.0;
    CHECK(train::cross_entropy(logits, {3, 1}) < 1e-10);
  }

  TEST_CASE("random three-position case against direct summation") {
    Rng r(1);
    const Tensor logits = oracle::random(3, 6, r, 2.0);
    const std::vector<int> targets{4, 0, 5};
    double expected = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits(i, j));
      expected += std::log(z) - logits(i, static_cast<std::size_t>(targets[i]));
    }
    // Target 0 is the padding id and is skipped.
    double no_pad = 0.0;
    for (std::size_t i : {0u, 2u}) {
      double z = 0.0;
      for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits(i, j));
      no_pad += std::log(z) - logits(i, static_cast<std::size_t>(targets[i]));
    }
    CHECK(train::cross_entropy(logits, targets) == doctest::Approx(no_pad / 2.0).epsilon(1e-13));
    ad::Tape t;
    CHECK(ad::cross_entropy(t.constant(logits), targets).value().item() ==
          doctest::Approx(expected / 3.0).epsilon(1e-13));
  }

  TEST_CASE("out-of-range targets are rejected") {
    CHECK_THROWS_AS(train::cross_entropy(Tensor({1, 4}), {4}), InvalidInput);
    CHECK_THROWS_AS(train::cross_entropy(Tensor({1, 4}), {-1}), InvalidInput);
  }
}

TEST_SUITE("training") {
  TEST_CASE("zero learning rate leaves the model untouched") {
    const auto ds = data::generate_synthetic(small_task(24));
    model::Captioner m(small_model());
    const auto before = m.params().items();
    train::OptimizerConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const auto report = train::train(m, ds.train, 0.0, cfg);
    CHECK(m.params().items() == before);
    REQUIRE(report.epoch_loss.size() == 3);
    // Batch order changes per epoch, so the mean is equal up to rounding.
    CHECK(report.epoch_loss[1] == doctest::Approx(report.epoch_loss[0]).epsilon(1e-12));
    CHECK(report.epoch_loss[2] == doctest::Approx(report.epoch_loss[0]).epsilon(1e-12));
  }

  TEST_CASE("no shuffling means no mismatched gate statistic") {
    const auto ds = data::generate_synthetic(small_task(24));
    model::Captioner m(small_model());
    train::OptimizerConfig cfg;
    cfg.epochs = 1;
    const auto report = train::train(m, ds.train, 0.0, cfg);
    CHECK(report.gate_matched_mean.has_value());
    CHECK_FALSE(report.gate_mismatched_mean.has_value());
  }

  TEST_CASE("non-finite loss aborts") {
    const auto ds = data::generate_synthetic(small_task(8));
    model::Captioner m(small_model());
    m.params().get("decoder.out.b")[0] = std::numeric_limits<double>::quiet_NaN();
    train::OptimizerConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train::train(m, ds.train, 0.0, cfg), DivergenceError);
  }

  TEST_CASE("invalid settings are rejected") {
    const auto ds = data::generate_synthetic(small_task(8));
    model::Captioner m(small_model());
    train::OptimizerConfig cfg;
    CHECK_THROWS_AS(train::train(m, ds.train, 1.2, cfg), InvalidInput);
    CHECK_THROWS_AS(train::train(m, {}, 0.0, cfg), InvalidInput);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train::train(m, ds.train, 0.0, cfg), InvalidInput);
  }

  TEST_CASE("Adam first step moves each weight by about the learning rate") {
    ad::ParamStore store;
    store.add("w", Tensor::from_rows({{1.0, -2.0}}));
    ad::Gradient g{{"w", Tensor::from_rows({{0.5, -3.0}})}};
    train::OptimizerConfig cfg;
    cfg.lr = 0.01;
    train::Adam adam(cfg);
    adam.step(store, g);
    // Bias-corrected m/sqrt(v) equals sign(g) on the first step.
    CHECK(store.get("w")[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(store.get("w")[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    CHECK(adam.steps() == 1);
  }

  TEST_CASE("micro run drops below half the uniform loss") {
    data::SyntheticTaskSpec spec;
    spec.n_train = 200;
    const auto ds = data::generate_synthetic(spec);
    model::ModelConfig mc;
    model::Captioner m(mc);
    train::OptimizerConfig cfg;
    cfg.epochs = 20;
    const auto report = train::train(m, ds.train, 0.0, cfg);
    MESSAGE("final micro-run loss " << report.epoch_loss.back());
    CHECK(report.epoch_loss.back() < std::log(static_cast<double>(mc.vocab_size)) / 2.0);
    CHECK(report.epoch_loss.back() < report.epoch_loss.front());
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("probability zero equals plain evaluation") {
    const auto ds = data::generate_synthetic(small_task());
    const model::Captioner m(small_model());
    const auto plain = train::evaluate(m, ds.test);
    const auto rows = train::mismatch_sweep(m, ds.test, {0.0});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].metrics.bleu == plain.bleu);
    CHECK(rows[0].metrics.rouge_l == plain.rouge_l);
    CHECK(rows[0].metrics.mismatched == 0);
  }

  TEST_CASE("four-row grid with retention against probability zero") {
    const auto ds = data::generate_synthetic(small_task());
    const model::Captioner m(small_model());
    const auto rows = train::mismatch_sweep(m, ds.test, {0.0, 0.05, 0.5, 1.0});
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
      for (const auto& name : train::EvalMetrics::metric_names()) {
        const double base = rows[0].metrics.metric(name);
        if (base != 0.0) CHECK(r.retention.at(name) == r.metrics.metric(name) / base);
      }
    }
    CHECK(rows[3].metrics.mismatched > 0);
    const std::string table = train::format_sweep(rows, "sweep");
    CHECK(table.find("100%") != std::string::npos);
    CHECK(train::sweep_records(rows, "gated").size() == 4 * train::EvalMetrics::metric_names().size());
  }

  TEST_CASE("sweep is reproducible") {
    const auto ds = data::generate_synthetic(small_task());
    const model::Captioner m(small_model());
    const auto a = train::mismatch_sweep(m, ds.test, {0.5, 1.0}, 7);
    const auto b = train::mismatch_sweep(m, ds.test, {0.5, 1.0}, 7);
    CHECK(train::sweep_records(a, "x") == train::sweep_records(b, "x"));
  }
}
