// SPDX-License-Identifier: Apache-2.0
#include "evacap/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "evacap/fusion.hpp"
#include "evacap/model.hpp"
#include "evacap/rng.hpp"

namespace evacap::gradcheck {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

CheckResult check_store(const std::string& name, ad::ParamStore& store, const std::function<double()>& loss,
                        const ad::Gradient& analytic, double eps, double floor) {
  CheckResult r;
  r.name = name;
  for (auto& [pname, t] : store.items()) {
    const Tensor& g = analytic.at(pname);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + eps;
      const double up = loss();
      t[i] = saved - eps;
      const double down = loss();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(g[i], numeric, floor));
      ++r.entries;
    }
  }
  return r;
}

namespace {

Tensor random_matrix(std::size_t m, std::size_t n, Rng& rng, double scale = 1.0) {
  Tensor t({m, n});
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

SuiteReport fusion_suite(std::size_t configurations, std::uint64_t seed) {
  static constexpr std::size_t kLengths[] = {1, 2, 5, 9};
  static constexpr std::size_t kDims[] = {4, 8};
  Rng rng(seed);
  SuiteReport report;
  for (std::size_t c = 0; c < configurations; ++c) {
    const std::size_t ta = kLengths[rng.uniform_int(4)];
    const std::size_t tv = kLengths[rng.uniform_int(4)];
    const std::size_t d = kDims[rng.uniform_int(2)];
    // Inputs and parameters all live in one store so a single loop covers them.
    ad::ParamStore store;
    store.add("audio", random_matrix(ta, d, rng));
    store.add("visual", random_matrix(tv, d, rng));
    store.add("w_q", random_matrix(d, d, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    store.add("w_k", random_matrix(d, d, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    store.add("w_v", random_matrix(d, d, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    store.add("w_g", Tensor::scalar(rng.uniform(-3.0, 3.0)));
    store.add("b_g", Tensor::scalar(rng.uniform(-1.5, 1.5)));
    const Tensor weights = random_matrix(ta, d, rng);

    auto build = [&](ad::Tape& tape) {
      fusion::FusionVars vars{tape.param(store, "w_q"), tape.param(store, "w_k"), tape.param(store, "w_v"),
                              tape.param(store, "w_g"), tape.param(store, "b_g")};
      auto nodes = fusion::fuse(tape.param(store, "audio"), tape.param(store, "visual"), vars);
      return ad::weighted_sum(nodes.fused, weights);
    };
    ad::Tape tape;
    const ad::Var loss = build(tape);
    tape.backward(loss);
    const ad::Gradient g = tape.param_gradient(store);
    auto f = [&] {
      ad::Tape t;
      t.set_grad_enabled(false);
      return build(t).value().item();
    };
    auto r = check_store("fuse[T_a=" + std::to_string(ta) + ",T_v=" + std::to_string(tv) + ",d=" + std::to_string(d) +
                             "]",
                         store, f, g);
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    report.results.push_back(std::move(r));
  }
  return report;
}

SuiteReport model_suite(std::uint64_t seed) {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_enc_layers = 1;
  cfg.n_heads = 2;
  cfg.n_dec_layers = 2;
  cfg.mlp_ratio = 2;
  cfg.T_a = 3;
  cfg.T_v = 2;
  cfg.d_in_audio = 4;
  cfg.d_in_visual = 3;
  cfg.patches_per_frame = 2;
  cfg.vocab_size = 11;
  cfg.max_caption_len = 3;
  cfg.seed = seed;
  model::Captioner m(cfg);
  // Move the gate off its neutral point so w_g receives a gradient.
  m.params().get("fusion.w_g") = Tensor::scalar(0.7);
  m.params().get("fusion.b_g") = Tensor::scalar(-0.3);

  Rng rng(seed + 1);
  const Tensor audio = random_matrix(cfg.T_a, cfg.d_in_audio, rng);
  const Tensor visual = random_matrix(cfg.T_v, cfg.visual_row_width(), rng);
  const std::vector<int> caption{3, 7, 5};

  SuiteReport report;
  for (auto mode : {model::FusionMode::gated, model::FusionMode::concat, model::FusionMode::audio_only}) {
    auto build = [&](ad::Tape& tape) {
      auto f = m.forward(tape, audio, visual, caption, mode);
      return ad::cross_entropy(f.logits, model::teacher_targets(caption));
    };
    ad::Tape tape;
    const ad::Var loss = build(tape);
    tape.backward(loss);
    const ad::Gradient g = tape.param_gradient(m.params());
    auto f = [&] {
      ad::Tape t;
      t.set_grad_enabled(false);
      return build(t).value().item();
    };
    auto r = check_store("captioner[" + model::to_string(mode) + "]", m.params(), f, g);
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    report.results.push_back(std::move(r));
  }
  return report;
}

}  // namespace evacap::gradcheck
