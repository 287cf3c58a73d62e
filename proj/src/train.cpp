// SPDX-License-Identifier: Apache-2.0
#include "evacap/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "evacap/augment.hpp"
#include "evacap/errors.hpp"
#include "evacap/metrics.hpp"

namespace evacap::train {

using nlohmann::json;

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw InvalidInput("optimizer: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw InvalidInput("optimizer: betas in [0,1)");
  if (!(eps > 0.0)) throw InvalidInput("optimizer: eps must be > 0");
  if (batch_size == 0) throw InvalidInput("optimizer: batch_size must be >= 1");
  if (!(gate_variance_weight >= 0.0)) throw InvalidInput("optimizer: gate_variance_weight must be >= 0");
}

json to_json(const OptimizerConfig& c) {
  return json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"gate_variance_weight", c.gate_variance_weight},
              {"seed", c.seed}};
}

OptimizerConfig optimizer_from_json(const json& j) {
  if (!j.is_object()) throw InvalidInput("optimizer config must be an object");
  OptimizerConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw InvalidInput("optimizer config: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("eps", c.eps);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("gate_variance_weight", c.gate_variance_weight);
    get("seed", c.seed);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("optimizer config: ") + e.what());
  }
  c.validate();
  return c;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  return ad::cross_entropy(tape.constant(logits), targets, model::kPad).value().item();
}

void Adam::step(ad::ParamStore& params, const ad::Gradient& grad) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, value] : params.items()) {
    auto git = grad.find(name);
    if (git == grad.end()) continue;
    const Tensor& g = git->second;
    if (!g.same_shape(value)) throw InvalidInput("Adam: gradient shape mismatch for " + name);
    auto [mit, _m] = m_.try_emplace(name, Tensor(value.shape()));
    auto [vit, _v] = v_.try_emplace(name, Tensor(value.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

void GateStats::add(double gate, bool mismatched) {
  if (mismatched) {
    mismatched_sum += gate;
    ++mismatched_count;
  } else {
    matched_sum += gate;
    ++matched_count;
  }
}

std::optional<double> GateStats::matched_mean() const {
  if (matched_count == 0) return std::nullopt;
  return matched_sum / static_cast<double>(matched_count);
}

std::optional<double> GateStats::mismatched_mean() const {
  if (mismatched_count == 0) return std::nullopt;
  return mismatched_sum / static_cast<double>(mismatched_count);
}

const std::vector<std::string>& EvalMetrics::metric_names() {
  static const std::vector<std::string> names{"BLEU_1", "BLEU_2", "BLEU_3", "BLEU_4", "ROUGE_L", "token_accuracy"};
  return names;
}

double EvalMetrics::metric(const std::string& name) const {
  for (std::size_t k = 0; k < 4; ++k)
    if (name == "BLEU_" + std::to_string(k + 1)) return bleu[k];
  if (name == "ROUGE_L") return rouge_l;
  if (name == "token_accuracy") return token_accuracy;
  throw InvalidInput("unknown metric " + name);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const EvalMetrics& m) {
  json j;
  for (const auto& name : EvalMetrics::metric_names()) j[name] = m.metric(name);
  j["samples"] = m.samples;
  j["mismatched"] = m.mismatched;
  j["gate_matched_mean"] = optional_json(m.gates.matched_mean());
  j["gate_mismatched_mean"] = optional_json(m.gates.mismatched_mean());
  return j;
}

}  // namespace

json to_json(const TrainReport& r) {
  json j;
  j["epoch_loss"] = r.epoch_loss;
  j["gate_matched_mean"] = optional_json(r.gate_matched_mean);
  j["gate_mismatched_mean"] = optional_json(r.gate_mismatched_mean);
  json rows = json::array();
  for (const auto& row : r.sweep) {
    json jr;
    jr["probability"] = row.probability;
    jr["metrics"] = metrics_json(row.metrics);
    jr["retention"] = row.retention;
    rows.push_back(std::move(jr));
  }
  j["sweep"] = std::move(rows);
  return j;
}

TrainReport train(model::Captioner& model, const std::vector<data::Sample>& dataset, double p_mix,
                  const OptimizerConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw InvalidInput("train: empty dataset");
  if (!(p_mix >= 0.0 && p_mix <= 1.0)) throw InvalidInput("train: shuffle probability must lie in [0, 1]");
  const model::FusionMode mode = model.config().fusion_mode;
  Rng rng(cfg.seed);
  Adam adam(cfg);
  TrainReport report;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const augment::Permutation order = augment::sample_permutation(dataset.size(), rng);
    GateStats gates;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < dataset.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(dataset.size(), start + cfg.batch_size);
      std::vector<data::Sample> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(dataset[order.mapping[i]]);
      const augment::Batch batch = augment::sms_apply(data::to_batch(chunk), p_mix, rng);
      const std::size_t B = batch.size();

      ad::Tape tape;
      std::vector<ad::Var> losses, gate_vars;
      for (std::size_t i = 0; i < B; ++i) {
        model::TapeForward f = model.forward(tape, batch.audio[i], batch.visual[i], batch.captions[i], mode);
        losses.push_back(ad::cross_entropy(f.logits, model::teacher_targets(batch.captions[i]), model::kPad));
        if (f.fusion) {
          gate_vars.push_back(f.fusion->gate);
          gates.add(f.fusion->gate.value().item(), batch.mismatch_flags[i]);
        }
      }
      ad::Var ce = ad::scale(ad::sum(ad::concat_rows(losses)), 1.0 / static_cast<double>(B));
      ad::Var loss = ce;
      if (cfg.gate_variance_weight > 0.0 && gate_vars.size() > 1) {
        const ad::Var g = ad::concat_rows(gate_vars);
        const ad::Var mu = ad::mean(g);
        const ad::Var var = ad::sub(ad::mean(ad::mul(g, g)), ad::mul(mu, mu));
        loss = ad::add(loss, ad::scale(var, cfg.gate_variance_weight));
      }
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                              std::to_string(start));
      }
      tape.backward(loss);
      adam.step(model.params(), tape.param_gradient(model.params()));
      loss_sum += ce.value().item() * static_cast<double>(B);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(dataset.size()));
    if (epoch + 1 == cfg.epochs) {
      report.gate_matched_mean = gates.matched_mean();
      report.gate_mismatched_mean = gates.mismatched_mean();
    }
  }
  return report;
}

EvalMetrics evaluate(const model::Captioner& model, const std::vector<data::Sample>& samples,
                     const std::vector<bool>* mismatch_flags) {
  if (mismatch_flags && mismatch_flags->size() != samples.size()) {
    throw InvalidInput("evaluate: mismatch flag count differs from sample count");
  }
  const model::FusionMode mode = model.config().fusion_mode;
  EvalMetrics m;
  std::vector<metrics::Tokens> hyps;
  std::vector<std::vector<metrics::Tokens>> refs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    hyps.push_back(model.decode_greedy(s.audio, s.visual, model.config().max_caption_len, mode));
    refs.push_back({s.caption});
    const bool mism = mismatch_flags && (*mismatch_flags)[i];
    m.mismatched += mism;
    if (mode == model::FusionMode::gated && !s.visual.empty()) m.gates.add(model.inspect_fusion(s.audio, s.visual).gate, mism);
  }
  m.samples = samples.size();
  m.bleu = metrics::corpus_bleu(hyps, refs);
  m.rouge_l = metrics::corpus_rouge_l(hyps, refs);
  m.token_accuracy = metrics::token_accuracy(hyps, refs);
  return m;
}

std::vector<SweepRow> mismatch_sweep(const model::Captioner& model, const std::vector<data::Sample>& test,
                                     const std::vector<double>& probabilities, std::uint64_t eval_seed,
                                     std::size_t eval_batch_size) {
  if (test.empty()) throw InvalidInput("mismatch_sweep: empty test set");
  if (eval_batch_size == 0) throw InvalidInput("mismatch_sweep: eval batch size must be positive");
  auto run = [&](double p) {
    Rng rng(eval_seed);
    std::vector<data::Sample> samples = test;
    std::vector<bool> flags;
    for (std::size_t start = 0; start < test.size(); start += eval_batch_size) {
      const std::size_t end = std::min(test.size(), start + eval_batch_size);
      const std::vector<data::Sample> chunk(test.begin() + static_cast<std::ptrdiff_t>(start),
                                            test.begin() + static_cast<std::ptrdiff_t>(end));
      const augment::Batch shuffled = augment::sms_apply(data::to_batch(chunk), p, rng);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        samples[start + i].visual = shuffled.visual[i];
        flags.push_back(shuffled.mismatch_flags[i]);
      }
    }
    SweepRow row;
    row.probability = p;
    row.metrics = evaluate(model, samples, &flags);
    return row;
  };

  std::vector<SweepRow> rows;
  for (double p : probabilities) rows.push_back(run(p));
  std::optional<EvalMetrics> reference;
  for (const auto& r : rows)
    if (r.probability == 0.0) reference = r.metrics;
  if (!reference) reference = run(0.0).metrics;
  for (auto& r : rows) {
    for (const auto& name : EvalMetrics::metric_names()) {
      const double base_v = reference->metric(name);
      r.retention[name] = base_v != 0.0 ? r.metrics.metric(name) / base_v : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return rows;
}

std::string format_sweep(const std::vector<SweepRow>& rows, const std::string& title) {
  std::ostringstream os;
  char buf[256];
  os << title << '\n';
  std::snprintf(buf, sizeof(buf), "%-6s %7s %7s %7s %7s %7s %7s %9s %9s %8s\n", "Prob", "B1", "B2", "B3", "B4",
                "R_L", "TokAcc", "g(match)", "g(mism)", "ret(B1)");
  os << buf;
  auto opt = [](const std::optional<double>& v) {
    char b[32];
    if (v) std::snprintf(b, sizeof(b), "%.4f", *v);
    else std::snprintf(b, sizeof(b), "-");
    return std::string(b);
  };
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof(buf), "%5.0f%% %7.3f %7.3f %7.3f %7.3f %7.3f %7.3f %9s %9s %8.3f\n",
                  r.probability * 100.0, m.bleu[0], m.bleu[1], m.bleu[2], m.bleu[3], m.rouge_l, m.token_accuracy,
                  opt(m.gates.matched_mean()).c_str(), opt(m.gates.mismatched_mean()).c_str(),
                  r.retention.at("BLEU_1"));
    os << buf;
  }
  return os.str();
}

std::vector<json> sweep_records(const std::vector<SweepRow>& rows, const std::string& mode) {
  std::vector<json> out;
  for (const auto& r : rows) {
    for (const auto& name : EvalMetrics::metric_names()) {
      const double ret = r.retention.at(name);
      out.push_back(json{{"mode", mode},
                         {"probability", r.probability},
                         {"metric", name},
                         {"value", r.metrics.metric(name)},
                         {"retention", std::isnan(ret) ? json(nullptr) : json(ret)}});
    }
  }
  return out;
}

}  // namespace evacap::train
