// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Dynamic refinement loop: after every epoch, tokens that drive target
// validation errors are extracted; during the next epoch they are masked in
// the training data or their attributions are penalized.

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dref/attribution.hpp"
#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/extraction.hpp"
#include "dref/metrics.hpp"
#include "dref/model.hpp"

namespace dref {

enum class PenaltyMode : std::uint8_t { vanilla, tok_mask, reg, comb, pre_def_only };

inline std::string_view to_string(PenaltyMode m) {
  switch (m) {
    case PenaltyMode::vanilla: return "vanilla";
    case PenaltyMode::tok_mask: return "tok_mask";
    case PenaltyMode::reg: return "reg";
    case PenaltyMode::comb: return "comb";
    case PenaltyMode::pre_def_only: return "pre_def_only";
  }
  return "?";
}

inline PenaltyMode parse_mode(std::string_view s) {
  if (s == "vanilla") return PenaltyMode::vanilla;
  if (s == "tok_mask") return PenaltyMode::tok_mask;
  if (s == "reg") return PenaltyMode::reg;
  if (s == "comb") return PenaltyMode::comb;
  if (s == "pre_def_only") return PenaltyMode::pre_def_only;
  throw Error("unknown mode '" + std::string(s) + "'");
}

inline bool uses_lexicon(PenaltyMode m) { return m == PenaltyMode::comb || m == PenaltyMode::pre_def_only; }
inline bool uses_extraction(PenaltyMode m) {
  return m == PenaltyMode::tok_mask || m == PenaltyMode::reg || m == PenaltyMode::comb;
}
inline bool uses_penalty(PenaltyMode m) { return m == PenaltyMode::reg || m == PenaltyMode::comb || m == PenaltyMode::pre_def_only; }

/// Lambda grids used for tuning.
inline const std::vector<double>& lambda_grid(AttributionMethod m) {
  static const std::vector<double> attention_dl = {0.1, 0.5, 1, 10, 20, 30, 40, 50, 60};
  static const std::vector<double> ig = {1, 10, 20, 30, 40, 50, 60};
  return m == AttributionMethod::integrated_gradients ? ig : attention_dl;
}
inline const std::vector<double>& k_grid() {
  static const std::vector<double> g = {0.10, 0.20, 0.30, 0.40};
  return g;
}

struct RefineConfig {
  PenaltyMode mode = PenaltyMode::reg;
  AttributionMethod method = AttributionMethod::scaled_attention;
  double lambda = 1.0;
  double k_fraction = 0.1;
  std::size_t top_n = 500;
  std::size_t epochs = 6;
  std::uint64_t seed = 0;
  std::optional<std::string> lexicon_path;
  std::optional<TokenSet> lexicon;  ///< loaded from lexicon_path when absent

  std::size_t dim = kDefaultDim;
  std::size_t min_freq = kDefaultMinFreq;
  std::size_t ig_steps = kDefaultIgSteps;  ///< IG steps for extraction and for the penalty
  TokenSet stopwords = default_stopwords();
  TrainConfig train;
  std::size_t jobs = 1;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("lambda must be a finite value >= 0");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw Error("k must lie in (0, 1]");
    if (top_n < 1) throw Error("topn must be >= 1");
    if (dim < 1) throw Error("dim must be >= 1");
    if (ig_steps < 1) throw Error("ig_steps must be >= 1");
    const bool has_lexicon = lexicon_path.has_value() || lexicon.has_value();
    if (uses_lexicon(mode) && !has_lexicon) throw Error("mode " + std::string(to_string(mode)) + " requires a lexicon");
    if (!uses_lexicon(mode) && has_lexicon) {
      throw Error("mode " + std::string(to_string(mode)) + " does not take a lexicon");
    }
  }

  ExtractionConfig extraction() const {
    ExtractionConfig e;
    e.k_fraction = k_fraction;
    e.top_n = top_n;
    e.min_token_freq = min_freq;
    e.stopwords = stopwords;
    e.ig_steps = ig_steps;
    e.jobs = jobs;
    return e;
  }

  TokenSet resolved_lexicon() const {
    if (lexicon) return *lexicon;
    if (lexicon_path) return load_token_list(*lexicon_path);
    return {};
  }
};

/// Replaces every occurrence of a listed token with the MASK token.
inline Corpus apply_tok_mask(const Corpus& corpus, const TokenSet& tokens) {
  Corpus out = corpus;
  if (tokens.empty()) return out;
  for (auto& inst : out.instances) {
    for (auto& t : inst.tokens) {
      if (tokens.contains(t)) t = kMaskToken;
    }
  }
  return out;
}

inline TokenSet combine_with_lexicon(const SpuriousTokenSet& spurious, const TokenSet& lexicon) {
  TokenSet out = spurious.combined;
  out.insert(lexicon.begin(), lexicon.end());
  return out;
}

/// Vocabulary ids of the listed tokens. Tokens outside the vocabulary share
/// the UNK id and cannot be singled out, so they are dropped.
inline std::set<std::int32_t> penalized_ids(const Vocabulary& vocab, const TokenSet& tokens) {
  std::set<std::int32_t> ids;
  for (const auto& t : tokens) {
    const auto id = vocab.id(t);
    if (id != kUnkId) ids.insert(id);
  }
  return ids;
}

/// Per-instance penalty: sum over occurrences of penalized ids of phi^2,
/// where phi is the raw attribution toward the predicted class.
inline AttributionLossFn make_attribution_penalty(std::set<std::int32_t> ids, AttributionMethod method,
                                                  std::size_t ig_steps) {
  return [ids = std::move(ids), method, ig_steps](const TapeInstance& x) -> ad::Var {
    std::vector<std::size_t> hits;
    for (std::size_t i = 0; i < x.ids.size(); ++i) {
      if (ids.contains(x.ids[i])) hits.push_back(i);
    }
    if (hits.empty()) return ad::Var(0.0);
    const auto phi = token_attributions(method, x.weights, x.embeddings, x.activations, x.predicted, ig_steps);
    std::vector<ad::Var> squares;
    squares.reserve(hits.size());
    for (auto i : hits) {
      if (!std::isfinite(phi[i].v)) {
        throw Error("attribution loss: non-finite attribution for token " + std::to_string(i) + " of '" +
                    std::string(x.id) + "'");
      }
      squares.push_back(phi[i] * phi[i]);
    }
    return ad::sum(squares);
  };
}

struct AttributionLossResult {
  double attribution_loss = 0.0;  ///< L_atr
  double added_loss = 0.0;        ///< lambda * L_atr
  Gradients gradients;            ///< of lambda * L_atr
};

/// lambda * L_atr over a batch and its parameter gradients.
inline AttributionLossResult attribution_loss(const ModelParams& p, const std::vector<EncodedInstance>& batch,
                                              const std::set<std::int32_t>& token_ids, AttributionMethod method,
                                              double lambda, std::size_t ig_steps = kDefaultIgSteps) {
  if (!(lambda >= 0.0)) throw Error("attribution_loss: lambda must be >= 0");
  AttributionLossResult out;
  out.gradients = Gradients::zeros(p.d);
  if (token_ids.empty() || batch.empty()) return out;
  const auto penalty = make_attribution_penalty(token_ids, method, ig_steps);
  ad::Tape tape;
  TapeParams lifted(tape, p);
  std::vector<ad::Var> terms;
  for (const auto& inst : batch) {
    const auto ids = non_pad_ids(inst.ids);
    if (ids.empty()) continue;
    const auto emb = lifted.embeddings(ids);
    const auto act = run_forward(lifted.weights(), emb);
    terms.push_back(penalty(TapeInstance{inst.id, lifted.weights(), emb, ids, act, predicted_label(act.logits)}));
  }
  const ad::Var l_atr = ad::sum(terms);
  const ad::Var total = l_atr * ad::Var(lambda);
  out.attribution_loss = l_atr.v;
  out.added_loss = total.v;
  out.gradients = lifted.gradients(tape.backward(total));
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;        ///< 1-based
  TokenSet penalized;           ///< tokens masked or regularized during this epoch
  SpuriousTokenSet extracted;   ///< set extracted at the end of this epoch
  EpochStats train;
  std::optional<double> source_val_f1;
  double target_val_f1 = 0.0;
};

struct RefineRun {
  ModelParams params;       ///< checkpoint of the selected epoch
  ModelParams last_params;  ///< parameters after the final epoch
  std::vector<EpochRecord> history;
  std::size_t selected_epoch = 0;  ///< 1-based
};

inline std::vector<Label> predicted_labels(const ModelParams& p, const std::vector<EncodedInstance>& data,
                                           std::size_t jobs = 1) {
  std::vector<Label> out;
  out.reserve(data.size());
  for (const auto& pr : predict(p, data, jobs)) out.push_back(pr.predicted);
  return out;
}

inline std::vector<Label> gold_labels(const std::vector<EncodedInstance>& data) {
  std::vector<Label> out;
  out.reserve(data.size());
  for (const auto& x : data) out.push_back(x.label);
  return out;
}

inline double evaluate_macro_f1(const ModelParams& p, const std::vector<EncodedInstance>& data, std::size_t jobs = 1) {
  const auto pred = predicted_labels(p, data, jobs);
  const auto gold = gold_labels(data);
  return macro_f1(pred, gold);
}

/// Runs the refinement loop for config.epochs epochs and keeps the epoch
/// with the best target-validation macro-F1 (earliest on ties).
inline RefineRun run_dref(const Corpus& source_train, const Corpus& target_val, const RefineConfig& config,
                          const Vocabulary& vocab, const Corpus* source_val = nullptr) {
  config.validate();
  if (source_train.empty()) throw Error("run_dref: empty source training corpus");
  if (target_val.empty()) throw Error("run_dref: empty target validation corpus");
  const TokenSet lexicon = config.resolved_lexicon();
  const ExtractionConfig ext = config.extraction();

  const auto train_data = encode(vocab, source_train);
  const auto target_data = encode(vocab, target_val);
  std::vector<EncodedInstance> source_val_data;
  if (source_val) source_val_data = encode(vocab, *source_val);

  RefineRun run;
  ModelParams params = init_params(vocab.size(), config.dim, config.seed);
  OptimizerState opt = OptimizerState::for_params(params);
  TokenSet previous;  // S_{ep_{i-1}}; replaced, not accumulated
  double best = -1.0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    switch (config.mode) {
      case PenaltyMode::vanilla: break;
      case PenaltyMode::tok_mask:
      case PenaltyMode::reg: rec.penalized = previous; break;
      case PenaltyMode::comb: rec.penalized = combine_with_lexicon(make_spurious_set(0, previous, {}), lexicon); break;
      case PenaltyMode::pre_def_only: rec.penalized = lexicon; break;
    }

    LossSpec loss;
    std::vector<EncodedInstance> masked;
    const std::vector<EncodedInstance>* epoch_data = &train_data;
    if (config.mode == PenaltyMode::tok_mask && !rec.penalized.empty()) {
      masked = encode(vocab, apply_tok_mask(source_train, rec.penalized));
      epoch_data = &masked;
    }
    if (uses_penalty(config.mode)) {
      auto ids = penalized_ids(vocab, rec.penalized);
      if (!ids.empty() && config.lambda > 0.0) {
        loss.lambda = config.lambda;
        loss.attribution_loss = make_attribution_penalty(std::move(ids), config.method, config.ig_steps);
      }
    }
    rec.train = train_epoch(params, *epoch_data, loss, opt, config.train, derive_seed(config.seed, 0x7000 + epoch));

    if (uses_extraction(config.mode)) {
      const auto ranking = global_ranking(params, train_data, config.method, ext, epoch);
      rec.extracted = extract_spurious(params, target_data, ranking, config.method, ext);
    } else {
      rec.extracted.epoch_index = epoch;
    }
    previous = rec.extracted.combined;

    rec.target_val_f1 = evaluate_macro_f1(params, target_data, config.jobs);
    if (source_val) rec.source_val_f1 = evaluate_macro_f1(params, source_val_data, config.jobs);
    if (rec.target_val_f1 > best) {
      best = rec.target_val_f1;
      run.selected_epoch = epoch;
      run.params = params;
    }
    run.history.push_back(std::move(rec));
  }
  run.last_params = std::move(params);
  return run;
}

inline nlohmann::ordered_json to_json(const RefineConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = std::string(to_string(c.mode));
  j["method"] = std::string(to_string(c.method));
  j["lambda"] = c.lambda;
  j["k"] = c.k_fraction;
  j["topn"] = c.top_n;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  if (c.lexicon_path) j["lexicon"] = *c.lexicon_path;
  j["dim"] = c.dim;
  j["min_freq"] = c.min_freq;
  j["ig_steps"] = c.ig_steps;
  j["learning_rate"] = c.train.learning_rate;
  j["weight_decay"] = c.train.weight_decay;
  j["batch_size"] = c.train.batch_size;
  return j;
}

/// Manifest body: config, per-epoch metrics and token sets.
inline nlohmann::ordered_json to_json(const RefineRun& run, const RefineConfig& config) {
  nlohmann::ordered_json j;
  j["config"] = to_json(config);
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& r : run.history) {
    nlohmann::ordered_json e;
    e["epoch"] = r.epoch;
    e["penalized"] = std::vector<std::string>(r.penalized.begin(), r.penalized.end());
    e["extracted"] = to_json(r.extracted);
    e["classification_loss"] = r.train.mean_classification_loss;
    e["attribution_loss"] = r.train.mean_attribution_loss;
    e["train_accuracy"] = r.train.train_accuracy;
    e["source_val_macro_f1"] = r.source_val_f1 ? nlohmann::ordered_json(*r.source_val_f1) : nlohmann::ordered_json();
    e["target_val_macro_f1"] = r.target_val_f1;
    epochs.push_back(std::move(e));
  }
  j["epochs"] = std::move(epochs);
  j["selected_epoch"] = run.selected_epoch;
  return j;
}

}  // namespace dref
