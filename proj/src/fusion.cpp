// SPDX-License-Identifier: Apache-2.0
#include "evacap/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "evacap/errors.hpp"

namespace evacap::fusion {

namespace {

void check_inputs(const Tensor& audio, const Tensor& visual, std::size_t d, std::size_t heads) {
  if (audio.rank() != 2 || visual.rank() != 2) throw InvalidInput("fusion: audio and visual must be matrices");
  if (audio.cols() != d || visual.cols() != d) {
    throw InvalidInput("fusion: feature width mismatch, audio " + shape_str(audio.shape()) + ", visual " +
                       shape_str(visual.shape()) + ", projection dim " + std::to_string(d));
  }
  if (heads == 0 || d % heads != 0) throw InvalidInput("fusion: dim not divisible by head count");
}

Tensor columns(const Tensor& x, std::size_t start, std::size_t count) {
  Tensor out({x.rows(), count});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, start + j);
  return out;
}

}  // namespace

FusionParams FusionParams::init(std::size_t d, Rng& rng, double scale) {
  const double std = scale / std::sqrt(static_cast<double>(d));
  auto gaussian = [&] {
    Tensor t({d, d});
    for (auto& v : t.data()) v = std * rng.normal();
    return t;
  };
  FusionParams p;
  p.w_q = gaussian();
  p.w_k = gaussian();
  p.w_v = gaussian();
  return p;
}

FusionParams FusionParams::identity(std::size_t d) {
  FusionParams p;
  p.w_q = Tensor::identity(d);
  p.w_k = Tensor::identity(d);
  p.w_v = Tensor::identity(d);
  return p;
}

CrossAttention cross_attend(const Tensor& audio, const Tensor& visual, const FusionParams& params) {
  check_inputs(audio, visual, params.dim(), 1);
  const Tensor q = matmul(audio, params.w_q);
  const Tensor k = matmul(visual, params.w_k);
  const Tensor v = matmul(visual, params.w_v);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));
  CrossAttention out;
  out.attention = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_d));
  out.features = matmul(out.attention, v);
  return out;
}

double attention_entropy(const Tensor& attention) {
  if (attention.rank() != 2) throw InvalidInput("attention_entropy: expected a matrix");
  const std::size_t m = attention.rows(), n = attention.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (double p : attention.row(i)) {
      if (!(p >= 0.0)) throw InvalidInput("attention_entropy: negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw InvalidInput("attention_entropy: row " + std::to_string(i) + " is not a distribution");
    }
  }
  if (n == 1) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double h = 0.0;
    for (double p : attention.row(i))
      if (p > 0.0) h -= p * std::log(p);
    total += h;
  }
  return std::clamp(total / static_cast<double>(m) / std::log(static_cast<double>(n)), 0.0, 1.0);
}

double gate_value(double entropy, const FusionParams& params) {
  return stable_sigmoid(params.w_g * entropy + params.b_g);
}

FusionOutput fuse(const Tensor& audio, const Tensor& visual, const FusionParams& params,
                  const FusionOptions& options) {
  const std::size_t d = params.dim();
  check_inputs(audio, visual, d, options.heads);
  FusionOutput out;
  if (options.heads == 1) {
    CrossAttention ca = cross_attend(audio, visual, params);
    out.attention = std::move(ca.attention);
    out.attended = std::move(ca.features);
    out.entropy = attention_entropy(out.attention);
  } else {
    const std::size_t dh = d / options.heads;
    const Tensor q = matmul(audio, params.w_q);
    const Tensor k = matmul(visual, params.w_k);
    const Tensor v = matmul(visual, params.w_v);
    out.attended = Tensor({audio.rows(), d});
    out.attention = Tensor({audio.rows(), visual.rows()});
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < options.heads; ++h) {
      const Tensor p = softmax_rows(scale(matmul_nt(columns(q, h * dh, dh), columns(k, h * dh, dh)), inv_sqrt));
      const Tensor f = matmul(p, columns(v, h * dh, dh));
      for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < dh; ++j) out.attended(i, h * dh + j) = f(i, j);
      for (std::size_t i = 0; i < p.size(); ++i) out.attention[i] += p[i] / static_cast<double>(options.heads);
      out.entropy += attention_entropy(p) / static_cast<double>(options.heads);
    }
  }
  out.gate = gate_value(out.entropy, params);
  out.fused = Tensor(audio.shape());
  for (std::size_t i = 0; i < audio.size(); ++i) {
    out.fused[i] = (1.0 - out.gate) * audio[i] + out.gate * out.attended[i];
  }
  return out;
}

// ---- tape route ------------------------------------------------------------

FusionNodes fuse(ad::Var audio, ad::Var visual, const FusionVars& params, const FusionOptions& options) {
  const std::size_t d = params.w_q.value().rows();
  check_inputs(audio.value(), visual.value(), d, options.heads);
  const std::size_t dh = d / options.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const ad::Var q = ad::matmul(audio, params.w_q);
  const ad::Var k = ad::matmul(visual, params.w_k);
  const ad::Var v = ad::matmul(visual, params.w_v);

  FusionNodes out;
  std::vector<ad::Var> head_features;
  std::vector<ad::Var> head_entropy;
  for (std::size_t h = 0; h < options.heads; ++h) {
    const ad::Var qh = options.heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    const ad::Var kh = options.heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    const ad::Var vh = options.heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    const ad::Var p = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    out.attention.push_back(p);
    head_features.push_back(ad::matmul(p, vh));
    head_entropy.push_back(ad::normalized_row_entropy(p));
  }
  out.attended = options.heads == 1 ? head_features.front() : ad::concat_cols(head_features);
  ad::Var entropy = head_entropy.front();
  for (std::size_t h = 1; h < head_entropy.size(); ++h) entropy = ad::add(entropy, head_entropy[h]);
  if (options.heads > 1) entropy = ad::scale(entropy, 1.0 / static_cast<double>(options.heads));
  out.entropy = options.detach_entropy ? ad::detach(entropy) : entropy;

  out.gate = ad::sigmoid(ad::add(ad::mul(params.w_g, out.entropy), params.b_g));
  // (1 - g)·A + g·F  ==  A + g·(F - A)
  out.fused = ad::add(audio, ad::scale_by(ad::sub(out.attended, audio), out.gate));
  return out;
}

struct FusionTrace::State {
  ad::ParamStore store;
  ad::Tape tape;
  ad::Var audio, visual;
  FusionNodes nodes;
  FusionOutput output;
  bool consumed = false;
};

FusionTrace FusionTrace::record(const Tensor& audio, const Tensor& visual, const FusionParams& params,
                                const FusionOptions& options) {
  FusionTrace trace;
  trace.state_ = std::make_shared<State>();
  State& s = *trace.state_;
  s.store.add("w_q", params.w_q);
  s.store.add("w_k", params.w_k);
  s.store.add("w_v", params.w_v);
  s.store.add("w_g", Tensor::scalar(params.w_g));
  s.store.add("b_g", Tensor::scalar(params.b_g));
  FusionVars vars{s.tape.param(s.store, "w_q"), s.tape.param(s.store, "w_k"), s.tape.param(s.store, "w_v"),
                  s.tape.param(s.store, "w_g"), s.tape.param(s.store, "b_g")};
  s.audio = s.tape.input(audio);
  s.visual = s.tape.input(visual);
  s.nodes = fuse(s.audio, s.visual, vars, options);

  s.output.fused = s.nodes.fused.value();
  s.output.attended = s.nodes.attended.value();
  s.output.entropy = s.nodes.entropy.value().item();
  s.output.gate = s.nodes.gate.value().item();
  s.output.attention = Tensor(s.nodes.attention.front().value().shape());
  for (auto p : s.nodes.attention) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < pv.size(); ++i)
      s.output.attention[i] += pv[i] / static_cast<double>(s.nodes.attention.size());
  }
  return trace;
}

const FusionOutput& FusionTrace::output() const {
  if (!state_) throw StateError("FusionTrace: no forward pass recorded");
  return state_->output;
}

FusionGradient fuse_backward(FusionTrace& trace, const Tensor& upstream) {
  if (!trace.state_) throw StateError("fuse_backward: no forward pass recorded");
  auto& s = *trace.state_;
  if (s.consumed) throw StateError("fuse_backward: trace already differentiated");
  s.consumed = true;
  s.tape.backward(s.nodes.fused, upstream);
  const ad::Gradient g = s.tape.param_gradient(s.store);
  FusionGradient out;
  out.w_q = g.at("w_q");
  out.w_k = g.at("w_k");
  out.w_v = g.at("w_v");
  out.w_g = g.at("w_g").item();
  out.b_g = g.at("b_g").item();
  out.audio = s.tape.grad(s.audio);
  out.visual = s.tape.grad(s.visual);
  return out;
}

}  // namespace evacap::fusion
