// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference checks of tape gradients, used by the
// `gradcheck` CLI command. Only forward passes are used to form the numeric
// side.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evacap/autodiff.hpp"

namespace evacap::gradcheck {

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from being judged on pure rounding noise: at eps 1e-6 the
/// central difference of an O(1) loss carries ~1e-10 of it.
double relative_error(double analytic, double numeric, double floor = 1e-4);

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

/// Compares `analytic` against central differences of `loss` for every entry
/// of every tensor in `store` (store is perturbed in place and restored).
CheckResult check_store(const std::string& name, ad::ParamStore& store, const std::function<double()>& loss,
                        const ad::Gradient& analytic, double eps = 1e-6, double floor = 1e-4);

struct SuiteReport {
  std::vector<CheckResult> results;
  double max_rel_error = 0.0;
  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Random fusion configurations (T_a, T_v in {1,2,5,9}, d in {4,8}, gate
/// weights and biases drawn at random) covering all fusion parameters and both
/// inputs.
SuiteReport fusion_suite(std::size_t configurations, std::uint64_t seed);

/// Every parameter of a micro captioner (d_model 8, one encoder layer,
/// vocabulary 11) under the gated, concat and audio-only paths.
SuiteReport model_suite(std::uint64_t seed);

}  // namespace evacap::gradcheck
