// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evacap/autodiff.hpp"
#include "evacap/data.hpp"
#include "evacap/model.hpp"

#include <json.hpp>

namespace evacap::train {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  /// Optional penalty on the within-batch variance of gate values. Off by
  /// default; it is an add-on, not part of the captioning objective.
  double gate_variance_weight = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_from_json(const nlohmann::json& j);

/// Mean token negative log-likelihood; tokens equal to kPad are skipped.
/// Throws InvalidInput for ids outside the vocabulary.
double cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(const OptimizerConfig& cfg) : cfg_(cfg) {}
  void step(ad::ParamStore& params, const ad::Gradient& grad);
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::size_t t_ = 0;
};

struct GateStats {
  double matched_sum = 0.0;
  std::size_t matched_count = 0;
  double mismatched_sum = 0.0;
  std::size_t mismatched_count = 0;

  void add(double gate, bool mismatched);
  std::optional<double> matched_mean() const;
  std::optional<double> mismatched_mean() const;
};

struct EvalMetrics {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double token_accuracy = 0.0;
  std::size_t samples = 0;
  std::size_t mismatched = 0;
  GateStats gates;

  /// Named metric lookup: BLEU_1..BLEU_4, ROUGE_L, token_accuracy.
  double metric(const std::string& name) const;
  static const std::vector<std::string>& metric_names();
};

struct SweepRow {
  double probability = 0.0;
  EvalMetrics metrics;
  /// metric(P) / metric(0) for every named metric; NaN when metric(0) == 0.
  std::map<std::string, double> retention;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  /// Gate statistics over the final epoch's training batches.
  std::optional<double> gate_matched_mean;
  std::optional<double> gate_mismatched_mean;
  std::vector<SweepRow> sweep;
};

nlohmann::json to_json(const TrainReport& r);

/// Trains in place. The fusion mode comes from the model config. SMS is
/// applied to each batch before encoding. Throws DivergenceError on a
/// non-finite loss.
TrainReport train(model::Captioner& model, const std::vector<data::Sample>& dataset, double p_mix,
                  const OptimizerConfig& cfg);

/// Greedy-decodes every sample and scores it against its caption.
/// `mismatch_flags` (optional, same length) routes gate values into the
/// matched/mismatched buckets.
EvalMetrics evaluate(const model::Captioner& model, const std::vector<data::Sample>& samples,
                     const std::vector<bool>* mismatch_flags = nullptr);

/// One row per probability. The test set is cut into consecutive batches of
/// `eval_batch_size` and each batch goes through SMS with a generator seeded
/// from `eval_seed`, so every row and every model sees the same draws.
std::vector<SweepRow> mismatch_sweep(const model::Captioner& model, const std::vector<data::Sample>& test,
                                     const std::vector<double>& probabilities, std::uint64_t eval_seed = 2024,
                                     std::size_t eval_batch_size = 8);

/// Plain-text table of a sweep.
std::string format_sweep(const std::vector<SweepRow>& rows, const std::string& title);
/// Machine-readable rows: one object per (probability, metric).
std::vector<nlohmann::json> sweep_records(const std::vector<SweepRow>& rows, const std::string& mode);

}  // namespace evacap::train
