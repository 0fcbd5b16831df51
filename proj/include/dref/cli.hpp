// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every subcommand reads one JSON spec; flags
// override spec fields and the merged spec is echoed to the output
// directory as effective_spec.json.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dref/attribution.hpp"
#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/eval.hpp"
#include "dref/extraction.hpp"
#include "dref/metrics.hpp"
#include "dref/model.hpp"
#include "dref/refine.hpp"

namespace dref::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Spec problems (missing file, bad field). Mapped to exit code 1.
struct SpecError : Error {
  using Error::Error;
};

struct Overrides {
  std::optional<std::string> spec;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::string> mode;
  std::optional<std::string> method;
  std::optional<double> lambda;
  std::optional<double> k;
  std::optional<std::size_t> topn;
  std::optional<std::size_t> epochs;
};

// ---------------------------------------------------------------------------
// Spec reading

/// Reads fields from a JSON object, remembering which keys were used so
/// that unknown keys can be reported.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw SpecError(where_ + ": expected a JSON object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return required<T>(key);
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return required<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) throw SpecError(where_ + ": missing field '" + key + "'");
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (j_.at(key).is_number_integer() && j_.at(key).get<std::int64_t>() < 0) {
          throw SpecError(where_ + ": field '" + key + "' must be non-negative");
        }
      }
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw SpecError(where_ + ": field '" + key + "' has the wrong type");
    }
  }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void reject_unknown() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.contains(k)) throw SpecError(where_ + ": unknown field '" + k + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> used_;
};

inline nlohmann::json read_json_file(const std::string& path) {
  if (!fs::exists(path)) throw SpecError("spec file not found: " + path);
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("malformed JSON in " + path + ": " + e.what());
  } catch (const Error& e) {
    throw SpecError(e.what());
  }
}

/// Resolves a path relative to the spec file's directory.
inline std::string resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

struct ExperimentEntry {
  RefineConfig config;
  ojson effective;
};

struct RunSpec {
  std::string spec_path;
  fs::path base_dir;
  std::string out_dir;

  std::string source = "source";
  std::string target = "target";
  std::optional<std::string> source_train, source_val, target_val, target_test;

  RefineConfig config;
  std::vector<std::uint64_t> seeds;
  std::vector<ExperimentEntry> experiments;

  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t bootstrap_seed = 0;
  double chi2_confidence = 0.95;

  std::optional<std::string> checkpoint, baseline_checkpoint;
  std::optional<std::string> visualize_corpus;
  std::vector<std::string> instances;
  std::size_t heatmap_limit = 5;

  std::optional<std::string> predictions_a, predictions_b, gold;

  ojson effective;  ///< merged spec, paths as written
};

/// Applies the refine-related fields of `f` on top of `base`.
inline RefineConfig read_refine_fields(Fields& f, RefineConfig base, const fs::path& dir, ojson& eff) {
  try {
    if (f.has("mode")) base.mode = parse_mode(f.required<std::string>("mode"));
    if (f.has("method")) base.method = parse_method(f.required<std::string>("method"));
  } catch (const SpecError&) {
    throw;
  } catch (const Error& e) {
    throw SpecError(e.what());
  }
  base.lambda = f.get("lambda", base.lambda);
  base.k_fraction = f.get("k", base.k_fraction);
  base.top_n = f.get("topn", base.top_n);
  base.epochs = f.get("epochs", base.epochs);
  if (f.has("lexicon")) {
    const auto p = f.required<std::string>("lexicon");
    base.lexicon_path = resolve(dir, p);
    base.lexicon.reset();
    eff["lexicon"] = p;
  }
  return base;
}

inline void echo_refine_fields(const RefineConfig& c, ojson& eff) {
  eff["mode"] = std::string(to_string(c.mode));
  eff["method"] = std::string(to_string(c.method));
  eff["lambda"] = c.lambda;
  eff["k"] = c.k_fraction;
  eff["topn"] = c.top_n;
  eff["epochs"] = c.epochs;
}

inline RunSpec load_run_spec(const std::string& path, const Overrides& ov) {
  const nlohmann::json j = read_json_file(path);
  RunSpec s;
  s.spec_path = path;
  s.base_dir = fs::path(path).parent_path();
  Fields f(j, path);
  ojson& eff = s.effective;

  auto path_field = [&](const std::string& key) -> std::optional<std::string> {
    auto v = f.optional<std::string>(key);
    if (!v) return std::nullopt;
    eff[key] = *v;
    const auto r = resolve(s.base_dir, *v);
    if (!fs::exists(r)) throw SpecError(path + ": " + key + " file not found: " + r);
    return r;
  };

  s.source = f.get<std::string>("source", s.source);
  s.target = f.get<std::string>("target", s.target);
  eff["source"] = s.source;
  eff["target"] = s.target;
  s.source_train = path_field("source_train");
  s.source_val = path_field("source_val");
  s.target_val = path_field("target_val");
  s.target_test = path_field("target_test");

  RefineConfig& c = s.config;
  c = read_refine_fields(f, c, s.base_dir, eff);
  if (ov.mode) c.mode = parse_mode(*ov.mode);
  if (ov.method) c.method = parse_method(*ov.method);
  if (ov.lambda) c.lambda = *ov.lambda;
  if (ov.k) c.k_fraction = *ov.k;
  if (ov.topn) c.top_n = *ov.topn;
  if (ov.epochs) c.epochs = *ov.epochs;
  echo_refine_fields(c, eff);
  if (c.lexicon_path && !fs::exists(*c.lexicon_path)) throw SpecError(path + ": lexicon file not found: " + *c.lexicon_path);

  c.dim = f.get("dim", c.dim);
  c.min_freq = f.get("min_freq", c.min_freq);
  c.ig_steps = f.get("ig_steps", c.ig_steps);
  c.train.learning_rate = f.get("learning_rate", c.train.learning_rate);
  c.train.weight_decay = f.get("weight_decay", c.train.weight_decay);
  c.train.batch_size = f.get("batch_size", c.train.batch_size);
  c.jobs = ov.jobs.value_or(f.get<std::size_t>("jobs", 1));
  if (c.jobs < 1) throw SpecError(path + ": jobs must be >= 1");
  if (c.train.batch_size < 1) throw SpecError(path + ": batch_size must be >= 1");
  if (!(c.train.learning_rate > 0.0)) throw SpecError(path + ": learning_rate must be > 0");
  if (auto sw = path_field("stopwords")) c.stopwords = load_token_list(*sw);
  eff["dim"] = c.dim;
  eff["min_freq"] = c.min_freq;
  eff["ig_steps"] = c.ig_steps;
  eff["learning_rate"] = c.train.learning_rate;
  eff["weight_decay"] = c.train.weight_decay;
  eff["batch_size"] = c.train.batch_size;
  eff["jobs"] = c.jobs;

  if (ov.seed) {
    s.seeds = {*ov.seed};
  } else if (f.has("seeds")) {
    s.seeds = f.required<std::vector<std::uint64_t>>("seeds");
    if (s.seeds.empty()) throw SpecError(path + ": seeds must not be empty");
  } else {
    s.seeds = {f.get<std::uint64_t>("seed", 0)};
  }
  f.has("seed");
  f.has("seeds");
  c.seed = s.seeds.front();
  eff["seeds"] = s.seeds;

  if (f.has("experiments")) {
    const auto& list = f.raw("experiments");
    if (!list.is_array()) throw SpecError(path + ": experiments must be an array");
    ojson effs = ojson::array();
    for (std::size_t i = 0; i < list.size(); ++i) {
      Fields ef(list[i], path + ": experiments[" + std::to_string(i) + "]");
      ExperimentEntry e;
      RefineConfig base = c;
      base.lexicon.reset();
      base.lexicon_path.reset();
      e.config = read_refine_fields(ef, base, s.base_dir, e.effective);
      ef.reject_unknown();
      if (e.config.lexicon_path && !fs::exists(*e.config.lexicon_path)) {
        throw SpecError(path + ": lexicon file not found: " + *e.config.lexicon_path);
      }
      echo_refine_fields(e.config, e.effective);
      effs.push_back(e.effective);
      s.experiments.push_back(std::move(e));
    }
    eff["experiments"] = std::move(effs);
  }

  s.n_resamples = f.get("n_resamples", s.n_resamples);
  s.bootstrap_seed = f.get("bootstrap_seed", s.bootstrap_seed);
  s.chi2_confidence = f.get("chi2_confidence", s.chi2_confidence);
  eff["n_resamples"] = s.n_resamples;
  eff["bootstrap_seed"] = s.bootstrap_seed;
  eff["chi2_confidence"] = s.chi2_confidence;

  s.checkpoint = path_field("checkpoint");
  s.baseline_checkpoint = path_field("baseline_checkpoint");
  s.visualize_corpus = path_field("visualize_corpus");
  s.instances = f.get<std::vector<std::string>>("instances", {});
  s.heatmap_limit = f.get("heatmap_limit", s.heatmap_limit);
  if (!s.instances.empty()) eff["instances"] = s.instances;
  eff["heatmap_limit"] = s.heatmap_limit;

  s.predictions_a = path_field("predictions_a");
  s.predictions_b = path_field("predictions_b");
  s.gold = path_field("gold");

  if (ov.out) {
    s.out_dir = *ov.out;
    f.has("out");
  } else if (auto o = f.optional<std::string>("out")) {
    s.out_dir = resolve(s.base_dir, *o);
  } else {
    throw SpecError(path + ": no output directory (set \"out\" or pass --out)");
  }
  f.reject_unknown();
  return s;
}

// ---------------------------------------------------------------------------
// Output helpers

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string need(const std::optional<std::string>& v, const RunSpec& s, const char* key) {
  if (!v) throw SpecError(s.spec_path + ": missing field '" + std::string(key) + "'");
  return *v;
}

inline ojson vocab_json(const Vocabulary& v) {
  ojson j;
  j["hash"] = hex64(v.hash());
  ojson toks = ojson::array();
  for (const auto& t : v.tokens()) toks.push_back({{"token", t}, {"frequency", v.frequency(t)}});
  j["tokens"] = std::move(toks);
  return j;
}

inline std::string predictions_jsonl(const std::vector<Prediction>& preds, const std::vector<EncodedInstance>& data) {
  std::string out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ojson j;
    j["id"] = preds[i].id;
    j["gold"] = std::string(to_string(data[i].label));
    j["predicted"] = std::string(to_string(preds[i].predicted));
    j["p_hate"] = preds[i].probabilities[index_of(Label::hate)];
    j["p_non_hate"] = preds[i].probabilities[index_of(Label::non_hate)];
    out += j.dump() + "\n";
  }
  return out;
}

/// Reads "id" -> predicted label from a predictions file.
inline std::map<std::string, Label> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions " + path);
  std::map<std::string, Label> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out[j.at("id").get<std::string>()] = parse_label(j.at("predicted").get<std::string>());
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": bad prediction record: " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

inline RefineRun train_or_refine(const RunSpec& s, RefineConfig config, std::ostream& out, bool refine) {
  const fs::path dir(s.out_dir);
  const Corpus train = load_corpus(need(s.source_train, s, "source_train"), Split::train);
  const Corpus tval = load_corpus(need(s.target_val, s, "target_val"), Split::val);
  std::optional<Corpus> sval;
  if (s.source_val) sval = load_corpus(*s.source_val, Split::val);
  const Vocabulary vocab = build_vocab(train, config.min_freq, config.stopwords);

  RefineRun run = run_dref(train, tval, config, vocab, sval ? &*sval : nullptr);
  save_checkpoint((dir / "checkpoint.json").string(), run.params, vocab);
  write_json(dir / "vocab.json", vocab_json(vocab));

  ojson manifest = to_json(run, config);
  manifest["source"] = s.source;
  manifest["target"] = s.target;
  manifest["checkpoint"] = "checkpoint.json";
  manifest["vocab_hash"] = hex64(vocab.hash());
  if (refine && uses_extraction(config.mode)) {
    ojson files = ojson::array();
    for (const auto& r : run.history) {
      const std::string name = "spurious_epoch_" + std::to_string(r.epoch) + ".json";
      write_json(dir / name, to_json(r.extracted));
      files.push_back(name);
    }
    manifest["spurious_sets"] = std::move(files);
  }
  if (s.target_test) {
    const auto test = encode(vocab, load_corpus(*s.target_test, Split::test));
    const auto preds = predict(run.params, test, config.jobs);
    write_text(dir / "predictions_target_test.jsonl", predictions_jsonl(preds, test));
    std::vector<Label> p;
    for (const auto& x : preds) p.push_back(x.predicted);
    manifest["target_test_macro_f1"] = macro_f1(p, gold_labels(test));
    manifest["predictions"] = "predictions_target_test.jsonl";
  }
  write_json(dir / "manifest.json", manifest);

  for (const auto& r : run.history) {
    out << "epoch " << r.epoch << ": loss " << r.train.mean_classification_loss << ", target-val macro-F1 "
        << r.target_val_f1;
    if (uses_extraction(config.mode)) out << ", extracted " << r.extracted.combined.size() << " tokens";
    out << "\n";
  }
  out << "selected epoch " << run.selected_epoch << "\n";
  return run;
}

inline void cmd_train(const RunSpec& s, std::ostream& out) {
  RefineConfig c = s.config;
  c.mode = PenaltyMode::vanilla;
  c.lexicon.reset();
  c.lexicon_path.reset();
  train_or_refine(s, c, out, false);
}

inline void cmd_refine(const RunSpec& s, std::ostream& out) { train_or_refine(s, s.config, out, true); }

inline void cmd_extract(const RunSpec& s, std::ostream& out) {
  const fs::path dir(s.out_dir);
  const RefineConfig& c = s.config;
  const Corpus train = load_corpus(need(s.source_train, s, "source_train"), Split::train);
  const Corpus tval = load_corpus(need(s.target_val, s, "target_val"), Split::val);
  const Vocabulary vocab = build_vocab(train, c.min_freq, c.stopwords);
  const ModelParams p = load_checkpoint(need(s.checkpoint, s, "checkpoint"), vocab);
  const auto ext = c.extraction();
  const auto train_data = encode(vocab, train);
  const auto tval_data = encode(vocab, tval);

  const auto ranking = global_ranking(p, train_data, c.method, ext);
  const auto spurious = extract_spurious(p, tval_data, ranking, c.method, ext);
  write_json(dir / "global_ranking.json", to_json(ranking, c.top_n));
  write_json(dir / "spurious.json", to_json(spurious));

  std::string dump;
  for (const auto& inst : tval_data) {
    const auto rec = attribute_predicted(p, inst, c.method, c.ig_steps);
    dump += to_json(rec, scored_tokens(inst)).dump() + "\n";
  }
  write_text(dir / "attributions_target_val.jsonl", dump);

  const auto chi = chi_squared_tokens(train, tval, s.chi2_confidence, c.min_freq);
  std::string lines;
  for (const auto& t : chi.tokens) lines += t + "\n";
  write_text(dir / "chi2_tokens.txt", lines);

  out << "fp branch: " << spurious.fp_branch.size() << " tokens, fn branch: " << spurious.fn_branch.size()
      << " tokens, chi2: " << chi.tokens.size() << " tokens\n";
}

inline void cmd_evaluate(const RunSpec& s, std::ostream& out) {
  const fs::path dir(s.out_dir);
  CorpusPair pair;
  pair.source = s.source;
  pair.target = s.target;
  pair.source_train = load_corpus(need(s.source_train, s, "source_train"), Split::train);
  if (s.source_val) pair.source_val = load_corpus(*s.source_val, Split::val);
  pair.target_val = load_corpus(need(s.target_val, s, "target_val"), Split::val);
  pair.target_test = load_corpus(need(s.target_test, s, "target_test"), Split::test);

  std::vector<Experiment> exps;
  if (s.experiments.empty()) {
    exps.push_back({0, s.config});
  } else {
    for (const auto& e : s.experiments) exps.push_back({0, e.config});
  }
  for (auto& e : exps) e.config.jobs = 1;
  CrossCorpusOptions opts;
  opts.n_resamples = s.n_resamples;
  opts.bootstrap_seed = s.bootstrap_seed;
  opts.jobs = s.config.jobs;
  const auto results = cross_corpus_run({pair}, exps, s.seeds, opts);

  write_json(dir / "results.json", results_json(results));
  const auto table = format_table(results);
  write_text(dir / "results.txt", table);
  out << table;
  for (const auto& r : results) {
    if (r.failed) out << "failed: " << to_string(r.config.mode) << ": " << r.error << "\n";
  }
}

inline void cmd_bootstrap(const RunSpec& s, std::ostream& out) {
  const fs::path dir(s.out_dir);
  const Corpus gold = load_corpus(need(s.gold, s, "gold"), Split::test);
  const auto a = load_predictions(need(s.predictions_a, s, "predictions_a"));
  const auto b = load_predictions(need(s.predictions_b, s, "predictions_b"));
  std::vector<Label> pa, pb, labels;
  for (const auto& inst : gold.instances) {
    auto ia = a.find(inst.id), ib = b.find(inst.id);
    if (ia == a.end() || ib == b.end()) throw Error("bootstrap: no prediction for instance '" + inst.id + "'");
    pa.push_back(ia->second);
    pb.push_back(ib->second);
    labels.push_back(inst.label);
  }
  const auto r = paired_bootstrap(pa, pb, labels, s.n_resamples, s.bootstrap_seed);
  ojson j;
  j["macro_f1_a"] = macro_f1(pa, labels);
  j["macro_f1_b"] = macro_f1(pb, labels);
  j["p_value"] = r.p_value;
  j["n_resamples"] = r.n_resamples;
  j["seed"] = r.seed;
  j["significant"] = r.significant;
  write_json(dir / "significance.json", j);
  out << "p = " << r.p_value << (r.significant ? " (significant)" : " (not significant)") << "\n";
}

inline std::string safe_file_part(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

inline void cmd_visualize(const RunSpec& s, std::ostream& out) {
  const fs::path dir(s.out_dir);
  const RefineConfig& c = s.config;
  const Corpus train = load_corpus(need(s.source_train, s, "source_train"), Split::train);
  const Vocabulary vocab = build_vocab(train, c.min_freq, c.stopwords);
  const ModelParams p = load_checkpoint(need(s.checkpoint, s, "checkpoint"), vocab);
  std::optional<ModelParams> base;
  if (s.baseline_checkpoint) base = load_checkpoint(*s.baseline_checkpoint, vocab);

  std::string corpus_path;
  if (s.visualize_corpus) {
    corpus_path = *s.visualize_corpus;
  } else {
    corpus_path = need(s.target_test, s, "target_test");
  }
  const auto data = encode(vocab, load_corpus(corpus_path, Split::test));
  std::vector<const EncodedInstance*> chosen;
  if (s.instances.empty()) {
    for (std::size_t i = 0; i < std::min(s.heatmap_limit, data.size()); ++i) chosen.push_back(&data[i]);
  } else {
    for (const auto& id : s.instances) {
      auto it = std::find_if(data.begin(), data.end(), [&](const EncodedInstance& x) { return x.id == id; });
      if (it == data.end()) throw Error("visualize: no instance '" + id + "' in " + corpus_path);
      chosen.push_back(&*it);
    }
  }
  for (const auto* inst : chosen) {
    std::vector<std::string> frags;
    if (base) {
      const auto rb = attribute_predicted(*base, *inst, c.method, c.ig_steps);
      frags.push_back("<p>baseline (predicted " + std::string(to_string(rb.target_class)) + ")</p>");
      frags.push_back(render_heatmap(*inst, rb));
    }
    const auto rec = attribute_predicted(p, *inst, c.method, c.ig_steps);
    frags.push_back("<p>model (predicted " + std::string(to_string(rec.target_class)) + ", gold " +
                    std::string(to_string(inst->label)) + ")</p>");
    frags.push_back(render_heatmap(*inst, rec));
    const std::string name = "heatmap_" + safe_file_part(inst->id) + ".html";
    write_text(dir / name, heatmap_page(inst->id, frags));
    out << name << "\n";
  }
}

/// synth: the spec is a synthetic-corpus description; writes four corpora
/// and a run.json pointing at them.
inline void cmd_synth(const std::string& spec_path, const Overrides& ov, std::ostream& out) {
  const nlohmann::json j = read_json_file(spec_path);
  Fields f(j, spec_path);
  SyntheticSpec sp;
  sp.vocab_size = f.get("vocab_size", sp.vocab_size);
  sp.instances_per_split = f.get("instances_per_split", sp.instances_per_split);
  sp.mean_length = f.get("mean_length", sp.mean_length);
  sp.seed = ov.seed.value_or(f.get("seed", sp.seed));
  sp.planted_frequency = f.get("planted_frequency", sp.planted_frequency);
  sp.hate_fraction = f.get("hate_fraction", sp.hate_fraction);
  sp.source_genuine_coverage = f.get("source_genuine_coverage", sp.source_genuine_coverage);
  sp.target_genuine_coverage = f.get("target_genuine_coverage", sp.target_genuine_coverage);
  sp.source_train_size = f.get("source_train_size", sp.source_train_size);
  sp.source_val_size = f.get("source_val_size", sp.source_val_size);
  sp.target_val_size = f.get("target_val_size", sp.target_val_size);
  sp.target_test_size = f.get("target_test_size", sp.target_test_size);
  try {
    if (f.has("planted_tokens")) {
      for (const auto& e : f.raw("planted_tokens")) {
        sp.planted_tokens.push_back({e.at("token").get<std::string>(), parse_label(e.at("class").get<std::string>()),
                                     e.at("source_correlation").get<double>(), e.at("target_correlation").get<double>()});
      }
    }
    if (f.has("genuine_signal_tokens")) {
      for (const auto& e : f.raw("genuine_signal_tokens")) {
        sp.genuine_signal_tokens.push_back(
            {e.at("token").get<std::string>(), parse_label(e.at("class").get<std::string>())});
      }
    }
  } catch (const std::exception& e) {
    throw SpecError(spec_path + ": bad token entry: " + e.what());
  }
  ojson run = ojson::object();
  if (f.has("run")) {
    const auto& r = f.raw("run");
    if (!r.is_object()) throw SpecError(spec_path + ": run must be an object");
    run = ojson::parse(r.dump());
  }
  std::string out_dir;
  if (ov.out) {
    out_dir = *ov.out;
    f.has("out");
  } else if (auto o = f.optional<std::string>("out")) {
    out_dir = resolve(fs::path(spec_path).parent_path(), *o);
  } else {
    throw SpecError(spec_path + ": no output directory (set \"out\" or pass --out)");
  }
  f.reject_unknown();
  try {
    validate(sp);
  } catch (const Error& e) {
    throw SpecError(spec_path + ": " + e.what());
  }

  const auto corpora = generate_synthetic(sp);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  save_corpus((dir / "source_train.jsonl").string(), corpora.source_train);
  save_corpus((dir / "source_val.jsonl").string(), corpora.source_val);
  save_corpus((dir / "target_val.jsonl").string(), corpora.target_val);
  save_corpus((dir / "target_test.jsonl").string(), corpora.target_test);

  ojson spec_out;
  spec_out["source"] = "synthetic_source";
  spec_out["target"] = "synthetic_target";
  spec_out["source_train"] = "source_train.jsonl";
  spec_out["source_val"] = "source_val.jsonl";
  spec_out["target_val"] = "target_val.jsonl";
  spec_out["target_test"] = "target_test.jsonl";
  for (const auto& [k, v] : run.items()) spec_out[k] = v;
  write_json(dir / "run.json", spec_out);

  ojson eff = ojson::parse(j.dump());
  eff["seed"] = sp.seed;
  write_json(dir / "effective_spec.json", eff);
  out << "wrote " << corpora.source_train.size() << "/" << corpora.source_val.size() << "/"
      << corpora.target_val.size() << "/" << corpora.target_test.size()
      << " instances (source train/val, target val/test) to " << out_dir << "\n";
}

// ---------------------------------------------------------------------------

inline void add_common_flags(CLI::App& sub, Overrides& ov) {
  sub.add_option("--spec", ov.spec, "JSON spec file")->required();
  sub.add_option("--out", ov.out, "output directory");
  sub.add_option("--seed", ov.seed, "random seed (replaces the spec's seed list)");
  sub.add_option("--jobs", ov.jobs, "maximum concurrent tasks")->check(CLI::PositiveNumber);
  sub.add_option("--mode", ov.mode, "penalization mode")
      ->check(CLI::IsMember({"vanilla", "tok_mask", "reg", "comb", "pre_def_only"}));
  sub.add_option("--method", ov.method, "attribution method")
      ->check(CLI::IsMember({"scaled_attention", "ig", "deeplift"}));
  sub.add_option("--lambda", ov.lambda, "attribution-loss weight")->check(CLI::NonNegativeNumber);
  sub.add_option("--k", ov.k, "local top-k fraction of the instance length")->check(CLI::Range(0.0, 1.0));
  sub.add_option("--topn", ov.topn, "size of the global top-N lists")->check(CLI::PositiveNumber);
  sub.add_option("--epochs", ov.epochs, "training epochs")->check(CLI::PositiveNumber);
}

/// Runs the command line `args` (without the program name). Returns the
/// process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic model refinement for cross-corpus hate speech classification", "dref"};
  app.require_subcommand(1);
  Overrides ov;
  static const char* names[] = {"train", "refine", "extract", "evaluate", "bootstrap", "visualize", "synth"};
  static const char* help[] = {"train a vanilla classifier",
                               "train with spurious-token extraction and penalization",
                               "extract spurious tokens and chi-squared tokens from a checkpoint",
                               "run refine over seeds and compare against vanilla",
                               "paired bootstrap test between two prediction files",
                               "write attribution heatmaps",
                               "generate synthetic corpora with planted tokens"};
  std::map<std::string, CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(names); ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    add_common_flags(*sub, ov);
    subs[names[i]] = sub;
  }

  if (!args.empty() && !args[0].starts_with("-") && !subs.contains(args[0])) {
    err << "dref: unknown subcommand '" << args[0] << "'\n" << app.help();
    return 2;
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dref: " << e.what() << "\n" << app.help();
    return 2;
  }

  std::string cmd;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) cmd = name;
  }
  try {
    if (cmd == "synth") {
      cmd_synth(*ov.spec, ov, out);
      return 0;
    }
    RunSpec s = load_run_spec(*ov.spec, ov);
    try {
      s.config.validate();
      for (const auto& e : s.experiments) e.config.validate();
    } catch (const SpecError&) {
      throw;
    } catch (const Error& e) {
      throw SpecError(*ov.spec + ": " + e.what());
    }
    fs::create_directories(s.out_dir);
    ojson eff = s.effective;
    eff["command"] = cmd;
    write_json(fs::path(s.out_dir) / "effective_spec.json", eff);
    if (cmd == "train") cmd_train(s, out);
    else if (cmd == "refine") cmd_refine(s, out);
    else if (cmd == "extract") cmd_extract(s, out);
    else if (cmd == "evaluate") cmd_evaluate(s, out);
    else if (cmd == "bootstrap") cmd_bootstrap(s, out);
    else if (cmd == "visualize") cmd_visualize(s, out);
    return 0;
  } catch (const SpecError& e) {
    err << "dref " << cmd << ": invalid spec: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "dref " << cmd << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dref::cli
