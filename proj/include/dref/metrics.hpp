// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dref/common.hpp"

namespace dref {

/// Confusion counts, indexed [gold][predicted].
using Confusion = std::array<std::array<double, kNumClasses>, kNumClasses>;

inline double f1_from_confusion(const Confusion& m, Label c) {
  const std::size_t k = index_of(c), o = index_of(other(c));
  const double tp = m[k][k], fp = m[o][k], fn = m[k][o];
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

inline double macro_f1_from_confusion(const Confusion& m) {
  return 0.5 * (f1_from_confusion(m, Label::hate) + f1_from_confusion(m, Label::non_hate));
}

/// Unweighted mean of the two per-class F1 scores. A class that is never
/// predicted and never gold contributes 0.
inline double macro_f1(std::span<const Label> predictions, std::span<const Label> labels) {
  if (predictions.size() != labels.size()) throw Error("macro_f1: predictions and labels differ in length");
  if (predictions.empty()) throw Error("macro_f1: empty input");
  Confusion m{};
  for (std::size_t i = 0; i < labels.size(); ++i) m[index_of(labels[i])][index_of(predictions[i])] += 1.0;
  return macro_f1_from_confusion(m);
}

struct SignificanceResult {
  double p_value = 1.0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;
  bool significant = false;

  friend bool operator==(const SignificanceResult&, const SignificanceResult&) = default;
};

inline constexpr std::size_t kDefaultResamples = 10000;

/// Paired bootstrap over instances: p is the share of resamples on which
/// system A does not beat system B (ties count against A).
inline SignificanceResult paired_bootstrap(std::span<const Label> preds_a, std::span<const Label> preds_b,
                                           std::span<const Label> labels, std::size_t n_resamples = kDefaultResamples,
                                           std::uint64_t seed = 0) {
  if (preds_a.size() != labels.size() || preds_b.size() != labels.size()) {
    throw Error("paired_bootstrap: prediction and label lists are not aligned");
  }
  if (labels.empty()) throw Error("paired_bootstrap: empty input");
  if (n_resamples < 1000) throw Error("paired_bootstrap: n_resamples must be >= 1000");
  const std::size_t n = labels.size();
  Rng rng(seed);
  std::size_t not_better = 0;
  for (std::size_t r = 0; r < n_resamples; ++r) {
    Confusion ma{}, mb{};
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t i = rng.below(n);
      const std::size_t g = index_of(labels[i]);
      ma[g][index_of(preds_a[i])] += 1.0;
      mb[g][index_of(preds_b[i])] += 1.0;
    }
    if (macro_f1_from_confusion(ma) <= macro_f1_from_confusion(mb)) ++not_better;
  }
  SignificanceResult out;
  out.p_value = static_cast<double>(not_better) / static_cast<double>(n_resamples);
  out.n_resamples = n_resamples;
  out.seed = seed;
  out.significant = out.p_value < 0.05;
  return out;
}

}  // namespace dref
