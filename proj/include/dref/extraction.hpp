// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dref/attribution.hpp"
#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/model.hpp"

namespace dref {

using TokenSet = std::set<std::string>;

struct ExtractionConfig {
  double k_fraction = 0.1;
  std::size_t top_n = 500;
  std::size_t min_token_freq = kDefaultMinFreq;
  TokenSet stopwords = default_stopwords();
  std::size_t ig_steps = kDefaultIgSteps;
  std::size_t jobs = 1;

  void validate() const {
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw Error("k_fraction must lie in (0, 1]");
    if (top_n < 1) throw Error("top_N must be >= 1");
  }
};

using RankedList = std::vector<std::pair<std::string, double>>;

/// Class-specific global token rankings, descending by mean normalized
/// attribution (ties broken lexicographically).
struct GlobalRanking {
  std::size_t epoch_index = 0;
  std::array<RankedList, kNumClasses> lists;

  const RankedList& list(Label c) const { return lists[index_of(c)]; }

  TokenSet top_n(Label c, std::size_t n) const {
    TokenSet out;
    const auto& l = list(c);
    for (std::size_t i = 0; i < std::min(n, l.size()); ++i) out.insert(l[i].first);
    return out;
  }

  friend bool operator==(const GlobalRanking&, const GlobalRanking&) = default;
};

struct SpuriousTokenSet {
  std::size_t epoch_index = 0;
  TokenSet fp_branch;
  TokenSet fn_branch;
  TokenSet combined;

  friend bool operator==(const SpuriousTokenSet&, const SpuriousTokenSet&) = default;
};

inline SpuriousTokenSet make_spurious_set(std::size_t epoch, TokenSet fp, TokenSet fn) {
  SpuriousTokenSet s{epoch, std::move(fp), std::move(fn), {}};
  s.combined = s.fp_branch;
  s.combined.insert(s.fn_branch.begin(), s.fn_branch.end());
  return s;
}

inline bool is_reserved_token(const std::string& t) { return t == kPadToken || t == kUnkToken || t == kMaskToken; }

/// A record's attributions toward the predicted class, with the matching
/// token strings.
struct ScoredInstance {
  Label predicted = Label::non_hate;
  AttributionRecord record;
  std::vector<std::string> tokens;
};

inline std::vector<ScoredInstance> score_instances(const ModelParams& p, const std::vector<EncodedInstance>& data,
                                                   AttributionMethod method, std::size_t ig_steps, std::size_t jobs) {
  std::vector<ScoredInstance> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t j) {
    const Label pred = forward(p, data[j]).predicted_class;
    out[j] = ScoredInstance{pred, attribute(p, data[j], method, pred, ig_steps), scored_tokens(data[j])};
  });
  return out;
}

/// Mean sigmoid-normalized attribution per (token, predicted class) over
/// every occurrence. Stop-words, reserved tokens and tokens rarer than
/// min_token_freq in `data` are excluded.
inline GlobalRanking rank_scored(const std::vector<ScoredInstance>& scored, const std::map<std::string, std::size_t>& freq,
                                 const ExtractionConfig& cfg, std::size_t epoch_index) {
  std::array<std::map<std::string, std::pair<double, std::size_t>>, kNumClasses> acc;
  for (const auto& s : scored) {
    auto& bucket = acc[index_of(s.predicted)];
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const auto& tok = s.tokens[i];
      if (is_reserved_token(tok) || cfg.stopwords.contains(tok)) continue;
      auto f = freq.find(tok);
      if (f == freq.end() || f->second < cfg.min_token_freq) continue;
      auto& [total, count] = bucket[tok];
      total += s.record.normalized_scores[i];
      ++count;
    }
  }
  GlobalRanking r;
  r.epoch_index = epoch_index;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto& list = r.lists[c];
    for (const auto& [tok, tc] : acc[c]) list.emplace_back(tok, tc.first / static_cast<double>(tc.second));
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
  }
  return r;
}

inline std::map<std::string, std::size_t> token_frequencies(const std::vector<EncodedInstance>& data) {
  std::map<std::string, std::size_t> counts;
  for (const auto& inst : data) {
    for (const auto& t : inst.tokens) ++counts[t];
  }
  return counts;
}

inline GlobalRanking global_ranking(const ModelParams& p, const std::vector<EncodedInstance>& source_train,
                                    AttributionMethod method, const ExtractionConfig& cfg,
                                    std::size_t epoch_index = 0) {
  cfg.validate();
  const auto scored = score_instances(p, source_train, method, cfg.ig_steps, cfg.jobs);
  return rank_scored(scored, token_frequencies(source_train), cfg, epoch_index);
}

inline std::size_t topk_count(double k_fraction, std::size_t token_count) {
  const double raw = k_fraction * static_cast<double>(token_count);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::max<std::size_t>(1, std::min(k, token_count));
}

/// The k highest-scored tokens of one instance (ties to the earlier
/// position), in rank order with duplicates collapsed.
inline std::vector<std::string> local_topk(const AttributionRecord& record, const std::vector<std::string>& tokens,
                                           double k_fraction) {
  if (record.raw_scores.empty()) throw Error("local_topk: record has no scores");
  if (record.raw_scores.size() != tokens.size()) throw Error("local_topk: token/score count mismatch");
  const std::size_t k = topk_count(k_fraction, tokens.size());
  std::vector<std::size_t> order(tokens.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return record.raw_scores[a] > record.raw_scores[b]; });
  std::vector<std::string> out;
  for (std::size_t r = 0; r < k; ++r) {
    const auto& t = tokens[order[r]];
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

enum class Outcome { tp, fp, fn, tn };

inline Outcome outcome(Label gold, Label predicted) {
  if (predicted == Label::hate) return gold == Label::hate ? Outcome::tp : Outcome::fp;
  return gold == Label::hate ? Outcome::fn : Outcome::tn;
}

/// Set algebra over per-instance top-k sets:
///   fp = (U top-k(FP) \ U top-k(TP)) n top-N(hate ranking)
///   fn = (U top-k(FN) \ U top-k(TN)) n top-N(non-hate ranking)
inline SpuriousTokenSet extract_from_topk(const std::vector<std::pair<Outcome, std::vector<std::string>>>& topk,
                                          const GlobalRanking& ranking, std::size_t top_n, std::size_t epoch) {
  std::map<Outcome, TokenSet> unions;
  for (const auto& [o, toks] : topk) unions[o].insert(toks.begin(), toks.end());
  auto branch = [&](Outcome err, Outcome ok, Label cls) {
    TokenSet out;
    const TokenSet allowed = ranking.top_n(cls, top_n);
    for (const auto& t : unions[err]) {
      if (!unions[ok].contains(t) && allowed.contains(t)) out.insert(t);
    }
    return out;
  };
  return make_spurious_set(epoch, branch(Outcome::fp, Outcome::tp, Label::hate),
                           branch(Outcome::fn, Outcome::tn, Label::non_hate));
}

inline SpuriousTokenSet extract_spurious(const ModelParams& p, const std::vector<EncodedInstance>& target_val,
                                         const GlobalRanking& ranking, AttributionMethod method,
                                         const ExtractionConfig& cfg) {
  cfg.validate();
  const auto scored = score_instances(p, target_val, method, cfg.ig_steps, cfg.jobs);
  std::vector<std::pair<Outcome, std::vector<std::string>>> topk;
  topk.reserve(scored.size());
  for (std::size_t j = 0; j < scored.size(); ++j) {
    topk.emplace_back(outcome(target_val[j].label, scored[j].predicted),
                      local_topk(scored[j].record, scored[j].tokens, cfg.k_fraction));
  }
  return extract_from_topk(topk, ranking, cfg.top_n, ranking.epoch_index);
}

// ---------------------------------------------------------------------------
// Chi-squared keyword baseline

/// Critical value of chi^2 with one degree of freedom.
inline double chi2_critical_value(double confidence) {
  if (std::abs(confidence - 0.90) < 1e-12) return 2.705543454095404;
  if (std::abs(confidence - 0.95) < 1e-12) return 3.841458820694124;
  if (std::abs(confidence - 0.99) < 1e-12) return 6.634896601021214;
  throw Error("unsupported confidence level " + std::to_string(confidence) + " (use 0.90, 0.95 or 0.99)");
}

/// Yates-corrected chi^2 for [[a, b], [c, d]]. The continuity correction is
/// capped at |O - E| per cell, so equal proportions score exactly 0.
/// Returns nullopt when an expected count is zero.
inline std::optional<double> yates_chi_squared(double a, double b, double c, double d) {
  const double n = a + b + c + d;
  const double rows[2] = {a + b, c + d};
  const double cols[2] = {a + c, b + d};
  const double obs[2][2] = {{a, b}, {c, d}};
  double chi2 = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double expected = rows[i] * cols[j] / n;
      if (!(expected > 0.0)) return std::nullopt;
      const double dev = std::abs(obs[i][j] - expected);
      const double corrected = dev - std::min(0.5, dev);
      chi2 += corrected * corrected / expected;
    }
  }
  return chi2;
}

struct ChiSquaredResult {
  TokenSet tokens;
  std::map<std::string, double> statistics;
  std::size_t skipped = 0;  ///< tokens with a zero expected cell
};

/// Tokens of `source` (frequency >= min_freq) whose instance-level presence
/// differs between `source` and `target_ref` at the given confidence.
inline ChiSquaredResult chi_squared_tokens(const Corpus& source, const Corpus& target_ref, double confidence = 0.95,
                                           std::size_t min_freq = kDefaultMinFreq) {
  if (source.empty() || target_ref.empty()) throw Error("chi_squared_tokens: corpora must be non-empty");
  const double critical = chi2_critical_value(confidence);
  auto presence = [](const Corpus& c) {
    std::map<std::string, std::size_t> df;
    for (const auto& inst : c.instances) {
      for (const auto& t : TokenSet(inst.tokens.begin(), inst.tokens.end())) ++df[t];
    }
    return df;
  };
  const auto src_df = presence(source);
  const auto tgt_df = presence(target_ref);
  const auto freq = token_frequencies(source);
  const auto ns = static_cast<double>(source.size());
  const auto nt = static_cast<double>(target_ref.size());

  ChiSquaredResult out;
  for (const auto& [tok, f] : freq) {
    if (f < min_freq) continue;
    const double a = static_cast<double>(src_df.at(tok));
    auto it = tgt_df.find(tok);
    const double c = it == tgt_df.end() ? 0.0 : static_cast<double>(it->second);
    const auto chi2 = yates_chi_squared(a, ns - a, c, nt - c);
    if (!chi2) {
      ++out.skipped;
      continue;
    }
    out.statistics[tok] = *chi2;
    if (*chi2 > critical) out.tokens.insert(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const SpuriousTokenSet& s) {
  nlohmann::ordered_json j;
  j["epoch"] = s.epoch_index;
  j["fp_branch"] = std::vector<std::string>(s.fp_branch.begin(), s.fp_branch.end());
  j["fn_branch"] = std::vector<std::string>(s.fn_branch.begin(), s.fn_branch.end());
  return j;
}

inline SpuriousTokenSet spurious_from_json(const nlohmann::json& j) {
  return make_spurious_set(j.at("epoch").get<std::size_t>(), j.at("fp_branch").get<TokenSet>(),
                           j.at("fn_branch").get<TokenSet>());
}

inline nlohmann::ordered_json to_json(const GlobalRanking& r, std::size_t limit) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch_index;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < std::min(limit, r.lists[c].size()); ++i) {
      list.push_back({r.lists[c][i].first, r.lists[c][i].second});
    }
    j[std::string(to_string(label_at(c)))] = std::move(list);
  }
  return j;
}

}  // namespace dref
