// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dref/attribution.hpp"
#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/metrics.hpp"
#include "dref/refine.hpp"

namespace dref {

struct ScoreReport {
  std::string label;  ///< "source->target"
  std::vector<std::uint64_t> seeds;
  std::vector<double> macro_f1;
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
};

inline ScoreReport make_score_report(std::string label, std::vector<std::uint64_t> seeds, std::vector<double> scores) {
  if (seeds.size() != scores.size()) throw Error("score report: seeds and scores differ in length");
  ScoreReport r{std::move(label), std::move(seeds), std::move(scores), 0.0, 0.0};
  if (r.macro_f1.empty()) return r;
  double s = 0.0;
  for (double x : r.macro_f1) s += x;
  r.mean = s / static_cast<double>(r.macro_f1.size());
  double v = 0.0;
  for (double x : r.macro_f1) v += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(v / static_cast<double>(r.macro_f1.size()));
  return r;
}

/// Corpora for one source->target pair.
struct CorpusPair {
  std::string source;
  std::string target;
  Corpus source_train;
  std::optional<Corpus> source_val;
  Corpus target_val;
  Corpus target_test;
};

struct Experiment {
  std::size_t pair = 0;  ///< index into the pair list
  RefineConfig config;   ///< seed is overridden per run
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  double target_test_f1 = 0.0;
  std::vector<Label> predictions;  ///< on target test, in corpus order
  RefineRun run;
};

struct ExperimentResult {
  std::string source;
  std::string target;
  RefineConfig config;
  bool failed = false;
  std::string error;
  ScoreReport report;
  std::optional<SignificanceResult> vs_vanilla;  ///< absent for the anchor and failed cells
  std::vector<SeedOutcome> runs;
};

struct CrossCorpusOptions {
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t bootstrap_seed = 0;
  std::size_t jobs = 1;  ///< concurrent seed runs
};

inline bool is_anchor(const RefineConfig& c) { return c.mode == PenaltyMode::vanilla; }

/// One refine run on a pair, evaluated on the target test split.
inline SeedOutcome run_seed(const CorpusPair& pair, RefineConfig config, std::uint64_t seed) {
  config.seed = seed;
  const Vocabulary vocab = build_vocab(pair.source_train, config.min_freq, config.stopwords);
  SeedOutcome out;
  out.seed = seed;
  out.run = run_dref(pair.source_train, pair.target_val, config, vocab, pair.source_val ? &*pair.source_val : nullptr);
  const auto test = encode(vocab, pair.target_test);
  out.predictions = predicted_labels(out.run.params, test, 1);
  out.target_test_f1 = macro_f1(out.predictions, gold_labels(test));
  return out;
}

/// Runs every experiment for every seed. A vanilla anchor is added for any
/// pair that lacks one; non-anchor cells are compared with it by a paired
/// bootstrap over the predictions pooled across seeds.
inline std::vector<ExperimentResult> cross_corpus_run(const std::vector<CorpusPair>& pairs,
                                                      std::vector<Experiment> experiments,
                                                      const std::vector<std::uint64_t>& seeds,
                                                      const CrossCorpusOptions& opts = {}) {
  if (seeds.empty()) throw Error("cross_corpus_run: no seeds");
  for (const auto& e : experiments) {
    if (e.pair >= pairs.size()) throw Error("cross_corpus_run: experiment refers to a missing corpus pair");
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const bool has_anchor = std::any_of(experiments.begin(), experiments.end(),
                                        [&](const Experiment& e) { return e.pair == p && is_anchor(e.config); });
    if (has_anchor) continue;
    const auto first = std::find_if(experiments.begin(), experiments.end(),
                                    [&](const Experiment& e) { return e.pair == p; });
    if (first == experiments.end()) continue;
    Experiment anchor{p, first->config};
    anchor.config.mode = PenaltyMode::vanilla;
    anchor.config.lexicon.reset();
    anchor.config.lexicon_path.reset();
    experiments.insert(experiments.begin(), std::move(anchor));
  }

  // Flatten (experiment, seed) tasks so all runs share the job pool.
  struct Task {
    std::size_t exp, seed;
    std::optional<SeedOutcome> result;
    std::string error;
  };
  std::vector<Task> tasks;
  for (std::size_t e = 0; e < experiments.size(); ++e) {
    for (std::size_t s = 0; s < seeds.size(); ++s) tasks.push_back({e, s, std::nullopt, {}});
  }
  parallel_for(tasks.size(), opts.jobs, [&](std::size_t t) {
    auto& task = tasks[t];
    const auto& ex = experiments[task.exp];
    try {
      task.result = run_seed(pairs[ex.pair], ex.config, seeds[task.seed]);
    } catch (const std::exception& err) {
      task.error = err.what();
    }
  });

  std::vector<ExperimentResult> results(experiments.size());
  for (std::size_t e = 0; e < experiments.size(); ++e) {
    const auto& ex = experiments[e];
    auto& r = results[e];
    r.source = pairs[ex.pair].source;
    r.target = pairs[ex.pair].target;
    r.config = ex.config;
  }
  for (auto& task : tasks) {
    auto& r = results[task.exp];
    if (!task.result) {
      if (!r.failed) r.error = "seed " + std::to_string(seeds[task.seed]) + ": " + task.error;
      r.failed = true;
      continue;
    }
    r.runs.push_back(std::move(*task.result));
  }
  for (auto& r : results) {
    if (r.failed) {
      r.runs.clear();
      r.report = make_score_report(r.source + "->" + r.target, {}, {});
      continue;
    }
    std::vector<double> f1;
    for (const auto& run : r.runs) f1.push_back(run.target_test_f1);
    r.report = make_score_report(r.source + "->" + r.target, seeds, std::move(f1));
  }

  for (std::size_t e = 0; e < experiments.size(); ++e) {
    auto& r = results[e];
    if (r.failed || is_anchor(r.config)) continue;
    std::optional<std::size_t> anchor;
    for (std::size_t a = 0; a < experiments.size(); ++a) {
      if (experiments[a].pair == experiments[e].pair && is_anchor(experiments[a].config)) {
        anchor = a;
        break;
      }
    }
    if (!anchor || results[*anchor].failed) continue;
    const auto& gold_one = pairs[experiments[e].pair].target_test;
    std::vector<Label> a, b, gold;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      a.insert(a.end(), r.runs[s].predictions.begin(), r.runs[s].predictions.end());
      const auto& vp = results[*anchor].runs[s].predictions;
      b.insert(b.end(), vp.begin(), vp.end());
      for (const auto& inst : gold_one.instances) gold.push_back(inst.label);
    }
    r.vs_vanilla = paired_bootstrap(a, b, gold, opts.n_resamples, opts.bootstrap_seed);
  }
  return results;
}

inline nlohmann::ordered_json results_json(const std::vector<ExperimentResult>& results) {
  nlohmann::ordered_json exps = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json j;
    j["source"] = r.source;
    j["target"] = r.target;
    j["mode"] = std::string(to_string(r.config.mode));
    j["method"] = std::string(to_string(r.config.method));
    j["seeds"] = r.report.seeds;
    j["macro_f1"] = r.report.macro_f1;
    j["mean"] = r.failed ? nlohmann::ordered_json() : nlohmann::ordered_json(r.report.mean);
    j["std"] = r.failed ? nlohmann::ordered_json() : nlohmann::ordered_json(r.report.std);
    j["p_vs_vanilla"] = r.vs_vanilla ? nlohmann::ordered_json(r.vs_vanilla->p_value) : nlohmann::ordered_json();
    if (r.failed) j["error"] = r.error;
    exps.push_back(std::move(j));
  }
  nlohmann::ordered_json out;
  out["experiments"] = std::move(exps);
  return out;
}

/// Aligned summary table; F1 in points.
inline std::string format_table(const std::vector<ExperimentResult>& results) {
  std::size_t pair_width = 4;
  for (const auto& r : results) pair_width = std::max(pair_width, r.source.size() + 2 + r.target.size());
  const int pw = static_cast<int>(pair_width);
  std::ostringstream os;
  char line[512];
  std::snprintf(line, sizeof line, "%-*s  %-13s %-17s %16s %9s\n", pw, "pair", "mode", "method", "macro-F1", "p");
  os << line;
  for (const auto& r : results) {
    std::string score = "failed";
    if (!r.failed) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * r.report.mean, 100.0 * r.report.std);
      score = buf;
    }
    std::string p = "-";
    if (r.vs_vanilla) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f%s", r.vs_vanilla->p_value, r.vs_vanilla->significant ? "*" : "");
      p = buf;
    }
    std::snprintf(line, sizeof line, "%-*s  %-13s %-17s %16s %9s\n", pw, (r.source + "->" + r.target).c_str(),
                  std::string(to_string(r.config.mode)).c_str(), std::string(to_string(r.config.method)).c_str(),
                  score.c_str(), p.c_str());
    os << line;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Heatmaps

inline std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Min-max rescale to [0, 1]. A constant vector maps to 0.5 everywhere.
inline std::vector<double> minmax_rescale(const std::vector<double>& x) {
  if (x.empty()) return {};
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  std::vector<double> out(x.size(), 0.5);
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
  return out;
}

inline std::string render_heatmap(const std::vector<std::string>& tokens, const AttributionRecord& record) {
  if (tokens.size() != record.normalized_scores.size()) {
    throw Error("heatmap: " + std::to_string(tokens.size()) + " tokens but " +
                std::to_string(record.normalized_scores.size()) + " scores for '" + record.instance_id + "'");
  }
  const auto opacity = minmax_rescale(record.normalized_scores);
  std::string out = "<div class=\"dref-heatmap\" data-instance=\"" + html_escape(record.instance_id) +
                    "\" data-method=\"" + std::string(to_string(record.method)) + "\" data-target=\"" +
                    std::string(to_string(record.target_class)) + "\">";
  char buf[64];
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.3f", opacity[i]);
    if (i) out += ' ';
    out += "<span style=\"background-color: rgba(220, 40, 40, ";
    out += buf;
    out += ")\">";
    out += html_escape(tokens[i]);
    out += "</span>";
  }
  out += "</div>";
  return out;
}

inline std::string render_heatmap(const EncodedInstance& inst, const AttributionRecord& record) {
  if (inst.id != record.instance_id) throw Error("heatmap: record for '" + record.instance_id + "' given instance '" + inst.id + "'");
  return render_heatmap(scored_tokens(inst), record);
}

inline std::string heatmap_page(const std::string& title, const std::vector<std::string>& fragments) {
  std::string out = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" + html_escape(title) +
                    "</title>\n<style>body { font-family: monospace; line-height: 2; } span { padding: 2px; }</style>\n"
                    "</head>\n<body>\n";
  for (const auto& f : fragments) out += f + "\n";
  out += "</body>\n</html>\n";
  return out;
}

}  // namespace dref
