// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit tests and the acceptance harness.

#pragma once

#include <cmath>
#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dref/dref.hpp"

namespace dref::testing {

/// Model with every parameter drawn from U(-scale, scale).
inline ModelParams random_params(std::size_t vocab, std::size_t d, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  ModelParams p = init_params(vocab, d, seed);
  for (std::size_t r = 1; r < vocab; ++r) {
    for (std::size_t k = 0; k < d; ++k) p.embedding(r, k) = rng.uniform(-scale, scale);
  }
  zip_weights(p.weights, p.weights, [&](auto& a, auto&) {
    for (auto& x : a) x = rng.uniform(-scale, scale);
  });
  return p;
}

/// Instance of `len` random non-reserved ids (no PAD).
inline EncodedInstance random_instance(std::size_t vocab, std::size_t len, Rng& rng, std::string id = "x") {
  EncodedInstance e;
  e.id = std::move(id);
  for (std::size_t i = 0; i < len; ++i) {
    const auto tok = static_cast<std::int32_t>(kFirstTokenId + rng.below(vocab - kFirstTokenId));
    e.ids.push_back(tok);
    e.tokens.push_back("t" + std::to_string(tok));
  }
  e.label = rng.uniform() < 0.5 ? Label::hate : Label::non_hate;
  return e;
}

/// |a - b| <= rel * max(|a|, |b|) + abs_floor.
inline bool close_rel(double a, double b, double rel, double abs_floor = 0.0) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

/// Synthetic planted-token benchmark: one planted hate token "zork" with
/// correlation 0.95 in the source and 0.5 in the target. Four genuine hate
/// tokens; 20% of source instances carry no genuine token, so the planted
/// token is the only hate cue there.
inline SyntheticSpec planted_benchmark(std::uint64_t seed) {
  SyntheticSpec s;
  s.vocab_size = 300;
  s.source_train_size = 2000;
  s.source_val_size = 400;
  s.target_val_size = 400;
  s.target_test_size = 1000;
  s.mean_length = 7;
  s.planted_frequency = 0.2;
  s.source_genuine_coverage = 0.8;
  s.target_genuine_coverage = 1.0;
  s.seed = seed;
  s.planted_tokens = {{"zork", Label::hate, 0.95, 0.5}};
  s.genuine_signal_tokens = {{"vile", Label::hate}, {"scum", Label::hate}, {"vermin", Label::hate}, {"filth", Label::hate}};
  return s;
}

/// Direct enumeration of every scored occurrence.
inline GlobalRanking brute_force_ranking(const ModelParams& p, const std::vector<EncodedInstance>& data,
                                  AttributionMethod method, const ExtractionConfig& cfg) {
  std::map<std::string, std::size_t> freq;
  for (const auto& inst : data) {
    for (const auto& t : inst.tokens) freq[t] += 1;
  }
  std::array<std::map<std::string, std::vector<double>>, kNumClasses> occ;
  for (const auto& inst : data) {
    const Label pred = forward(p, inst).predicted_class;
    const auto rec = attribute(p, inst, method, pred, cfg.ig_steps);
    const auto toks = scored_tokens(inst);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (cfg.stopwords.contains(toks[i]) || freq[toks[i]] < cfg.min_token_freq) continue;
      occ[index_of(pred)][toks[i]].push_back(rec.normalized_scores[i]);
    }
  }
  GlobalRanking r;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (const auto& [tok, xs] : occ[c]) {
      double s = 0.0;
      for (double x : xs) s += x;
      r.lists[c].emplace_back(tok, s / static_cast<double>(xs.size()));
    }
    std::sort(r.lists[c].begin(), r.lists[c].end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
  }
  return r;
}

/// Penalty value in double precision. The predicted class and, for IG, the
/// interpolation path are frozen at `ref`, matching what the tape treats as
/// constants.
inline double penalty_value(const ModelParams& p, const ModelParams& ref, const std::vector<EncodedInstance>& batch,
                     const std::set<std::int32_t>& ids, AttributionMethod method, double lambda, std::size_t steps) {
  double total = 0.0;
  for (const auto& inst : batch) {
    const auto emb = gather_embeddings(p, inst.ids);
    const auto act = run_forward(p.weights, emb);
    const Label c = forward(ref, inst).predicted_class;
    std::vector<double> phi;
    if (method == AttributionMethod::integrated_gradients) {
      const auto frozen = gather_embeddings(ref, inst.ids);
      const auto dims = integrated_gradients_kernel(p.weights, emb, Matrix<double>(emb.rows, emb.cols), c, steps, &frozen);
      for (std::size_t i = 0; i < dims.rows; ++i) {
        double s = 0.0;
        for (double x : dims.row(i)) s += x;
        phi.push_back(s);
      }
    } else {
      phi = token_attributions(method, p.weights, emb, act, c, steps);
    }
    for (std::size_t i = 0; i < phi.size(); ++i) {
      if (ids.contains(inst.ids[i])) total += phi[i] * phi[i];
    }
  }
  return lambda * total;
}

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double value_error = 0.0;  ///< |tape penalty - double penalty|
  std::string worst;         ///< description of the first mismatch
};

/// Compares the tape gradients of lambda * L_atr with central differences on
/// a d = 8 model, over every dense weight and every touched embedding entry.
inline GradientCheck penalty_gradient_check(AttributionMethod method, std::uint64_t seed, double rel = 1e-3) {
  Rng rng(seed * 31 + static_cast<std::uint64_t>(method));
  const std::size_t V = 12, d = 8, steps = 6;
  const auto p = random_params(V, d, 70 + seed);
  std::vector<EncodedInstance> batch;
  for (int b = 0; b < 3; ++b) batch.push_back(random_instance(V, 4 + rng.below(3), rng));
  const std::set<std::int32_t> ids = {batch[0].ids[0], batch[1].ids[1], batch[2].ids[2]};
  const double lambda = 2.0;
  const auto got = attribution_loss(p, batch, ids, method, lambda, steps);

  GradientCheck out;
  out.value_error = std::abs(got.added_loss - penalty_value(p, p, batch, ids, method, lambda, steps));
  const double h = 1e-5;
  auto compare = [&](double analytic, const std::function<void(ModelParams&, double)>& poke, const std::string& what) {
    ModelParams plus = p, minus = p;
    poke(plus, h);
    poke(minus, -h);
    const double num = (penalty_value(plus, p, batch, ids, method, lambda, steps) -
                        penalty_value(minus, p, batch, ids, method, lambda, steps)) /
                       (2 * h);
    ++out.checked;
    if (!close_rel(analytic, num, rel, 1e-7)) {
      if (out.failed++ == 0) out.worst = what + ": " + std::to_string(analytic) + " vs " + std::to_string(num);
    }
  };
  std::vector<const std::vector<double>*> grads;
  zip_weights(got.gradients.weights, got.gradients.weights, [&](const auto& a, const auto&) { grads.push_back(&a); });
  for (std::size_t blk = 0; blk < grads.size(); ++blk) {
    for (std::size_t k = 0; k < grads[blk]->size(); ++k) {
      compare((*grads[blk])[k], [&](ModelParams& q, double dh) {
        std::vector<std::vector<double>*> qb;
        zip_weights(q.weights, q.weights, [&](auto& a, auto&) { qb.push_back(&a); });
        (*qb[blk])[k] += dh;
      }, "weight block " + std::to_string(blk) + " entry " + std::to_string(k));
    }
  }
  for (const auto& [id, row] : got.gradients.embedding_rows) {
    for (std::size_t k = 0; k < d; ++k) {
      compare(row[k], [&](ModelParams& q, double dh) { q.embedding(static_cast<std::size_t>(id), k) += dh; },
              "embedding row " + std::to_string(id) + " dim " + std::to_string(k));
    }
  }
  return out;
}

// Yates-corrected statistics from scipy.stats.chi2_contingency(correction=True).
struct Chi2Case {
  int a, b, c, d;
  double chi2;
};

inline constexpr Chi2Case kScipyCases[] = {
    {1, 22, 4, 77, 0.000000000000},        {56, 10, 45, 77, 37.725520884480},   {43, 99, 95, 84, 15.864846764941},
    {108, 86, 22, 103, 44.068446129090},   {78, 12, 36, 20, 8.838374691068},    {116, 87, 110, 34, 12.905311265140},
    {76, 72, 90, 15, 30.640857974346},     {62, 77, 99, 79, 3.360133422356},    {54, 55, 41, 19, 4.814877311522},
    {34, 18, 27, 102, 30.819162529408},    {2, 11, 52, 33, 7.795603851486},     {99, 2, 56, 54, 57.547888156039},
    {118, 44, 20, 24, 10.528957012342},    {57, 71, 39, 52, 0.011639883613},    {79, 36, 115, 25, 5.556201332459},
    {112, 105, 114, 95, 0.259281476145},   {63, 73, 25, 42, 1.139628786758},    {56, 113, 95, 68, 20.157196263237},
    {71, 52, 50, 108, 18.133934154363},    {1, 39, 49, 83, 16.205446100348},    {0, 38, 10, 32, 8.277837450770},
    {84, 51, 28, 65, 21.457097833572},     {59, 57, 70, 75, 0.084493921776},    {23, 19, 88, 116, 1.460250586721},
    {66, 54, 74, 5, 32.325790088858},      {45, 43, 51, 89, 4.210700450118},    {59, 102, 56, 5, 51.719002091936},
    {81, 95, 69, 112, 1.973740794172},     {50, 95, 1, 5, 0.215090770791},      {95, 104, 62, 90, 1.413992469256},
    {0, 87, 60, 37, 77.063713659189},      {21, 108, 53, 118, 7.794660053626},  {42, 7, 31, 43, 21.684373795797},
    {84, 87, 88, 38, 11.940254283966},     {46, 68, 73, 50, 7.799299847112},    {23, 93, 62, 115, 7.141378481846},
    {113, 106, 115, 74, 3.154447254615},   {36, 20, 13, 113, 54.682733619764},  {33, 3, 5, 36, 45.306985199997},
    {117, 34, 13, 80, 90.709373667518},    {1, 58, 11, 12, 24.618775660596},    {2, 102, 72, 112, 46.249684686093},
    {59, 67, 72, 56, 1.896614330130},      {68, 69, 106, 37, 16.813002655553},  {110, 21, 23, 31, 30.381178124938},
    {113, 30, 94, 70, 15.410844106185},    {77, 10, 79, 9, 0.000695993422},     {65, 94, 110, 118, 1.764744141080},
    {28, 92, 72, 88, 13.092916666667},     {97, 57, 17, 94, 57.874862136255},
};

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dref_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string source_path(const std::string& rel) { return std::string(DREF_SOURCE_DIR) + "/" + rel; }

}  // namespace dref::testing
