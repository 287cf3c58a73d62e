// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "evacap/autodiff.hpp"
#include "evacap/errors.hpp"
#include "evacap/rng.hpp"
#include "evacap/tensor.hpp"
#include "oracle.hpp"

using namespace evacap;

TEST_SUITE("tensor") {
  TEST_CASE("shapes must have positive extents") {
    CHECK_THROWS_AS(Tensor({0, 3}), InvalidInput);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InvalidInput);
    CHECK(Tensor().empty());
  }

  TEST_CASE("identity leaves a matrix unchanged") {
    const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor::identity(2), m) == m);
    CHECK(matmul(m, Tensor::identity(2)) == m);
  }

  TEST_CASE("hand-evaluated product") {
    const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
    const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
    CHECK(matmul(a, b) == Tensor::from_rows({{19, 22}, {43, 50}}));
    CHECK(matmul_nt(a, b) == matmul(a, transpose(b)));
    CHECK(matmul_tn(a, b) == matmul(transpose(a), b));
  }

  TEST_CASE("scaled score of a single query against two keys") {
    const Tensor q = Tensor::from_rows({{1, 0}});
    const Tensor s = scale(matmul_nt(q, Tensor::identity(2)), 1.0 / std::sqrt(2.0));
    CHECK(s(0, 0) == doctest::Approx(0.70710678).epsilon(1e-9));
    CHECK(s(0, 1) == 0.0);
  }

  TEST_CASE("mismatched shapes are rejected") {
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), InvalidInput);
    CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), InvalidInput);
  }

  TEST_CASE("softmax examples") {
    const Tensor z = softmax_rows(Tensor({1, 4}));
    for (double v : z.data()) CHECK(v == doctest::Approx(0.25));

    const Tensor p = softmax_rows(Tensor::from_rows({{0.70710678, 0.0}}));
    const auto ref = oracle::softmax({0.70710678, 0.0});
    CHECK(std::abs(p[0] - 0.66977) < 1e-4);
    CHECK(std::abs(p[1] - 0.33023) < 1e-4);
    CHECK(p[0] == doctest::Approx(ref[0]).epsilon(1e-14));

    const Tensor big = softmax_rows(Tensor::from_rows({{1000.0, 0.0}}));
    CHECK(big.all_finite());
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);
  }

  TEST_CASE("stable sigmoid stays strictly inside the unit interval") {
    for (double x : {-1e6, -800.0, -50.0, 0.0, 50.0, 800.0, 1e6}) {
      const double s = stable_sigmoid(x);
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
    CHECK(stable_sigmoid(0.0) == 0.5);
    CHECK(stable_sigmoid(-50.0) < 1e-20);
  }
}

TEST_SUITE("rng") {
  TEST_CASE("seeded streams repeat") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("uniform_int covers its range and nothing else") {
    Rng r(3);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
      const auto v = r.uniform_int(7);
      CHECK(v < 7);
      seen.insert(v);
    }
    CHECK(seen.size() == 7);
  }

  TEST_CASE("normal has roughly unit moments") {
    Rng r(5);
    double s = 0, ss = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      ss += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(ss / n - 1.0) < 0.02);
  }
}

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Tape gradient of sum(W ⊙ op(inputs)) against central differences.
double op_error(const std::vector<Tensor>& inputs, const Builder& op, std::uint64_t seed = 11) {
  Tensor w;
  {
    ad::Tape t;
    std::vector<ad::Var> vs;
    for (const auto& x : inputs) vs.push_back(t.constant(x));
    Rng r(seed);
    const Tensor& out = op(t, vs).value();
    w = oracle::random(out.rows(), out.cols(), r);
  }
  auto f = [&](const std::vector<Tensor>& xs) {
    ad::Tape t;
    t.set_grad_enabled(false);
    std::vector<ad::Var> vs;
    for (const auto& x : xs) vs.push_back(t.constant(x));
    return ad::weighted_sum(op(t, vs), w).value().item();
  };
  ad::Tape t;
  std::vector<ad::Var> vs;
  for (const auto& x : inputs) vs.push_back(t.input(x));
  t.backward(ad::weighted_sum(op(t, vs), w));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    worst = std::max(worst, oracle::max_relative_error(t.grad(vs[i]), oracle::numeric_gradient(f, inputs, i)));
  }
  return worst;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("square at three") {
    ad::Tape t;
    const ad::Var x = t.input(Tensor::scalar(3.0));
    t.backward(ad::mul(x, x));
    CHECK(t.grad(x).item() == 6.0);
  }

  TEST_CASE("constant function has zero gradient") {
    ad::Tape t;
    const ad::Var x = t.input(Tensor::scalar(3.0));
    const ad::Var c = t.constant(Tensor::scalar(5.0));
    t.backward(ad::add(c, ad::scale(c, 2.0)));
    CHECK(t.grad(x).item() == 0.0);
  }

  TEST_CASE("backward is single use and rejects foreign handles") {
    ad::Tape t, other;
    const ad::Var x = t.input(Tensor::scalar(2.0));
    const ad::Var y = ad::mul(x, x);
    t.backward(y);
    CHECK_THROWS_AS(t.backward(y), StateError);
    const ad::Var z = other.input(Tensor::scalar(1.0));
    CHECK_THROWS_AS(t.grad(z), StateError);
  }

  TEST_CASE("softmax and dot composite") {
    Rng r(1);
    const double err = op_error({oracle::random(3, 4, r), oracle::random(4, 5, r)},
                                [](ad::Tape&, const std::vector<ad::Var>& v) {
                                  return ad::softmax_rows(ad::matmul(v[0], v[1]));
                                });
    CHECK(err < 1e-4);
  }

  TEST_CASE("every op matches central differences") {
    Rng r(2);
    const Tensor a = oracle::random(3, 4, r), b = oracle::random(3, 4, r), c = oracle::random(4, 2, r);
    const Tensor row = oracle::random(1, 4, r), s = oracle::random(1, 1, r), sq = oracle::random(4, 4, r);
    using V = const std::vector<ad::Var>&;
    struct Case {
      const char* name;
      std::vector<Tensor> inputs;
      Builder op;
    };
    const std::vector<Case> cases{
        {"matmul", {a, c}, [](ad::Tape&, V v) { return ad::matmul(v[0], v[1]); }},
        {"matmul_nt", {a, b}, [](ad::Tape&, V v) { return ad::matmul_nt(v[0], v[1]); }},
        {"add", {a, b}, [](ad::Tape&, V v) { return ad::add(v[0], v[1]); }},
        {"sub", {a, b}, [](ad::Tape&, V v) { return ad::sub(v[0], v[1]); }},
        {"mul", {a, b}, [](ad::Tape&, V v) { return ad::mul(v[0], v[1]); }},
        {"scale", {a}, [](ad::Tape&, V v) { return ad::scale(v[0], -1.7); }},
        {"add_row", {a, row}, [](ad::Tape&, V v) { return ad::add_row(v[0], v[1]); }},
        {"scale_by", {a, s}, [](ad::Tape&, V v) { return ad::scale_by(v[0], v[1]); }},
        {"softmax", {a}, [](ad::Tape&, V v) { return ad::softmax_rows(v[0]); }},
        {"softmax_causal", {sq}, [](ad::Tape&, V v) { return ad::softmax_rows_causal(v[0]); }},
        {"layer_norm", {a, row, row}, [](ad::Tape&, V v) { return ad::layer_norm(v[0], v[1], v[2]); }},
        {"gelu", {a}, [](ad::Tape&, V v) { return ad::gelu(v[0]); }},
        {"sigmoid", {a}, [](ad::Tape&, V v) { return ad::sigmoid(v[0]); }},
        {"entropy", {a}, [](ad::Tape&, V v) { return ad::normalized_row_entropy(ad::softmax_rows(v[0])); }},
        {"concat_rows", {a, b}, [](ad::Tape&, V v) { return ad::concat_rows({v[0], v[1]}); }},
        {"concat_cols", {a, b}, [](ad::Tape&, V v) { return ad::concat_cols({v[0], v[1]}); }},
        {"slice_rows", {a}, [](ad::Tape&, V v) { return ad::slice_rows(v[0], 1, 2); }},
        {"slice_cols", {a}, [](ad::Tape&, V v) { return ad::slice_cols(v[0], 1, 2); }},
        {"embedding", {a}, [](ad::Tape&, V v) { return ad::embedding(v[0], {2, 0, 2, 1}); }},
        {"sum", {a}, [](ad::Tape&, V v) { return ad::sum(v[0]); }},
        {"mean", {a}, [](ad::Tape&, V v) { return ad::mean(v[0]); }},
        {"cross_entropy", {a}, [](ad::Tape&, V v) { return ad::cross_entropy(v[0], {1, 3, 0}, 0); }},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      CHECK(op_error(c.inputs, c.op) < 1e-4);
    }
  }

  TEST_CASE("detach blocks the gradient") {
    ad::Tape t;
    const ad::Var x = t.input(Tensor::scalar(2.0));
    t.backward(ad::mul(x, ad::detach(x)));
    CHECK(t.grad(x).item() == 2.0);
  }

  TEST_CASE("entropy gradient at an exact zero probability is finite") {
    ad::Tape t;
    const ad::Var p = t.input(Tensor::from_rows({{0.5, 0.5, 0.0}}));
    t.backward(ad::normalized_row_entropy(p));
    CHECK(t.grad(p).all_finite());
    CHECK(t.grad(p)[2] == 0.0);
  }

  TEST_CASE("no-grad mode records nothing backward") {
    ad::Tape t;
    t.set_grad_enabled(false);
    const ad::Var x = t.input(Tensor::scalar(2.0));
    const ad::Var y = ad::mul(x, x);
    CHECK(y.value().item() == 4.0);
    CHECK_FALSE(t.requires_grad(y));
  }

  TEST_CASE("parameters are read from the store by reference") {
    ad::ParamStore store;
    store.add("w", Tensor::from_rows({{2.0, -1.0}}));
    ad::Tape t;
    const ad::Var w = t.param(store, "w");
    CHECK(t.param(store, "w").id == w.id);
    t.backward(ad::sum(ad::mul(w, w)));
    const auto g = t.param_gradient(store);
    CHECK(g.at("w") == Tensor::from_rows({{4.0, -2.0}}));
  }

  TEST_CASE("matmul flops are counted") {
    ad::Tape t;
    ad::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 5})));
    CHECK(t.flops() == 2u * 2u * 3u * 5u);
  }
}
