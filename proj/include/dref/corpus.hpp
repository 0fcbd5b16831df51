// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dref/common.hpp"

namespace dref {

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + std::string(s) + "'");
}

struct Instance {
  std::string id;
  std::vector<std::string> tokens;
  Label label = Label::non_hate;
  std::string raw_text;

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct Corpus {
  std::string name;
  Split split = Split::train;
  std::vector<Instance> instances;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

// ---------------------------------------------------------------------------
// Preprocessing

inline constexpr std::size_t kDefaultHandleMinCount = 10;

namespace detail {

inline bool is_word_byte(unsigned char c) {
  return std::isalnum(c) || c == '\'' || c >= 0x80;
}

inline bool is_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

inline bool has_letter(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalpha(c) || c >= 0x80; });
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool is_url(std::string_view w) {
  auto starts = [&](std::string_view p) {
    return w.size() >= p.size() && lower(w.substr(0, p.size())) == p;
  };
  return starts("http://") || starts("https://") || starts("www.");
}

/// Maximal runs of word bytes; apostrophes at run edges are trimmed.
inline std::vector<std::string> word_runs(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && !is_word_byte(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && is_word_byte(static_cast<unsigned char>(s[j]))) ++j;
    std::string_view run = s.substr(i, j - i);
    while (!run.empty() && run.front() == '\'') run.remove_prefix(1);
    while (!run.empty() && run.back() == '\'') run.remove_suffix(1);
    if (!run.empty()) out.emplace_back(run);
    i = j;
  }
  return out;
}

/// "KillAllMen" -> Kill|All|Men, "HTMLParser" -> HTML|Parser, "top10" -> top|10.
inline std::vector<std::string> camel_split(std::string_view s) {
  std::vector<std::string> parts;
  auto kind = [](unsigned char c) {
    if (std::isupper(c)) return 1;
    if (std::isdigit(c)) return 2;
    return 0;
  };
  std::size_t start = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    const int prev = kind(static_cast<unsigned char>(s[i - 1]));
    const int cur = kind(static_cast<unsigned char>(s[i]));
    bool boundary = false;
    if (prev == 0 && cur == 1) boundary = true;
    if ((prev == 2) != (cur == 2)) boundary = true;
    if (prev == 1 && cur == 1 && i + 1 < s.size() && kind(static_cast<unsigned char>(s[i + 1])) == 0 &&
        std::isalpha(static_cast<unsigned char>(s[i + 1]))) {
      boundary = true;
    }
    if (boundary) {
      parts.emplace_back(s.substr(start, i - start));
      start = i;
    }
  }
  if (start < s.size()) parts.emplace_back(s.substr(start));
  return parts;
}

}  // namespace detail

/// Word-level tokenizer for social-media text. Context (a segmentation
/// dictionary and corpus-wide handle counts) is optional; without it hashtags
/// are only camel-case split and every handle counts as infrequent.
class Preprocessor {
 public:
  Preprocessor() = default;
  Preprocessor(std::unordered_set<std::string> dictionary, std::unordered_map<std::string, std::size_t> handle_counts,
               std::size_t handle_min_count = kDefaultHandleMinCount)
      : dictionary_(std::move(dictionary)),
        handle_counts_(std::move(handle_counts)),
        handle_min_count_(handle_min_count) {}

  /// Builds context from a collection of raw texts: every plain word becomes
  /// a dictionary entry and every handle is counted.
  static Preprocessor fit(const std::vector<std::string>& raw_texts,
                          std::size_t handle_min_count = kDefaultHandleMinCount) {
    std::unordered_set<std::string> dict;
    std::unordered_map<std::string, std::size_t> handles;
    for (const auto& text : raw_texts) {
      std::istringstream in(text);
      std::string w;
      while (in >> w) {
        if (detail::is_url(w)) continue;
        if (w[0] == '@') {
          auto runs = detail::word_runs(w.substr(1));
          if (!runs.empty()) ++handles["@" + detail::lower(runs.front())];
          continue;
        }
        if (w[0] == '#') continue;
        for (auto& r : detail::word_runs(w)) {
          if (!detail::is_digits(r)) dict.insert(detail::lower(r));
        }
      }
    }
    return Preprocessor(std::move(dict), std::move(handles), handle_min_count);
  }

  std::vector<std::string> operator()(std::string_view raw_text) const {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < raw_text.size()) {
      while (i < raw_text.size() && std::isspace(static_cast<unsigned char>(raw_text[i]))) ++i;
      std::size_t j = i;
      while (j < raw_text.size() && !std::isspace(static_cast<unsigned char>(raw_text[j]))) ++j;
      if (j > i) process_word(raw_text.substr(i, j - i), out);
      i = j;
    }
    return out;
  }

  const std::unordered_set<std::string>& dictionary() const { return dictionary_; }

 private:
  void emit(const std::string& run, std::vector<std::string>& out) const {
    if (!detail::has_letter(run)) return;  // numbers, "'''"
    out.push_back(detail::lower(run));
  }

  void process_word(std::string_view w, std::vector<std::string>& out) const {
    if (detail::is_url(w)) return;
    if (w.front() == '@') {
      auto runs = detail::word_runs(w.substr(1));
      if (runs.empty()) return;
      std::string handle = "@" + detail::lower(runs.front());
      auto it = handle_counts_.find(handle);
      if (it != handle_counts_.end() && it->second >= handle_min_count_) out.push_back(handle);
      for (std::size_t r = 1; r < runs.size(); ++r) emit(runs[r], out);
      return;
    }
    if (w.front() == '#') {
      for (auto& run : detail::word_runs(w.substr(1))) {
        for (auto& piece : detail::camel_split(run)) {
          for (auto& seg : segment(detail::lower(piece))) emit(seg, out);
        }
      }
      return;
    }
    for (auto& run : detail::word_runs(w)) emit(run, out);
  }

  /// Greedy longest-match over the dictionary; a chunk that cannot be fully
  /// covered is kept whole.
  std::vector<std::string> segment(const std::string& chunk) const {
    if (dictionary_.empty() || dictionary_.contains(chunk)) return {chunk};
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos < chunk.size()) {
      std::size_t best = 0;
      for (std::size_t len = chunk.size() - pos; len >= 1; --len) {
        if (dictionary_.contains(chunk.substr(pos, len))) {
          best = len;
          break;
        }
      }
      if (best == 0) return {chunk};
      parts.push_back(chunk.substr(pos, best));
      pos += best;
    }
    return parts;
  }

  std::unordered_set<std::string> dictionary_;
  std::unordered_map<std::string, std::size_t> handle_counts_;
  std::size_t handle_min_count_ = kDefaultHandleMinCount;
};

/// Context-free preprocessing: URLs, punctuation and numbers removed,
/// hashtags camel-case split, handles dropped, result lowercased.
inline std::vector<std::string> preprocess(std::string_view raw_text) { return Preprocessor{}(raw_text); }

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files

struct LoadReport {
  std::size_t records = 0;
  std::size_t dropped = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string file_stem(const std::string& path) {
  auto slash = path.find_last_of('/');
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dot = base.find('.');
  return dot == std::string::npos ? base : base.substr(0, dot);
}

/// Loads a JSON-lines corpus: one {"id", "text", "label"} object per line.
inline Corpus load_corpus(const std::string& path, Split split, LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus " + path);

  struct Raw {
    std::string id, text;
    Label label;
  };
  std::vector<Raw> raws;
  std::string line;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j.contains("label") ||
        !j["id"].is_string() || !j["text"].is_string() || !j["label"].is_string()) {
      throw Error(path + ":" + std::to_string(line_no) + ": expected string fields id, text, label");
    }
    Raw r{j["id"].get<std::string>(), j["text"].get<std::string>(), Label::non_hate};
    try {
      r.label = parse_label(j["label"].get<std::string>());
    } catch (const Error&) {
      throw Error(path + ":" + std::to_string(line_no) + ": record '" + r.id + "' has unknown label '" +
                  j["label"].get<std::string>() + "'");
    }
    if (!seen.insert(r.id).second) {
      throw Error(path + ":" + std::to_string(line_no) + ": duplicate id '" + r.id + "'");
    }
    raws.push_back(std::move(r));
  }

  std::vector<std::string> texts;
  texts.reserve(raws.size());
  for (const auto& r : raws) texts.push_back(r.text);
  const Preprocessor pre = Preprocessor::fit(texts);

  Corpus corpus{file_stem(path), split, {}};
  LoadReport rep;
  rep.records = raws.size();
  for (auto& r : raws) {
    auto tokens = pre(r.text);
    if (tokens.empty()) {
      ++rep.dropped;
      continue;
    }
    corpus.instances.push_back(Instance{std::move(r.id), std::move(tokens), r.label, std::move(r.text)});
  }
  if (report) *report = rep;
  return corpus;
}

/// Writes preprocessed token content back as JSON-lines (text = joined tokens).
inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& inst : corpus.instances) {
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["text"] = join_tokens(inst.tokens);
    j["label"] = std::string(to_string(inst.label));
    out << j.dump() << '\n';
  }
}

/// One lowercase token per line; blank lines and '#' comments skipped.
inline std::set<std::string> load_token_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open token list " + path);
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    out.insert(detail::lower(line.substr(first)));
  }
  return out;
}

/// Fixed English stop-word list (v1). Mirrors data/stopwords_en.txt.
inline const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",       "about",    "above",  "after",   "again",      "against", "all",     "am",     "an",
      "and",     "any",      "are",    "as",      "at",         "be",      "because", "been",   "before",
      "being",   "below",    "between", "both",   "but",        "by",      "can",     "could",  "did",
      "do",      "does",     "doing",  "down",    "during",     "each",    "few",     "for",    "from",
      "further", "had",      "has",    "have",    "having",     "he",      "her",     "here",   "hers",
      "herself", "him",      "himself", "his",    "how",        "i",       "if",      "in",     "into",
      "is",      "it",       "it's",   "its",     "itself",     "just",    "me",      "more",   "most",
      "my",      "myself",   "no",     "nor",     "not",        "now",     "of",      "off",    "on",
      "once",    "only",     "or",     "other",   "our",        "ours",    "ourselves", "out",  "over",
      "own",     "same",     "she",    "should",  "so",         "some",    "such",    "than",   "that",
      "the",     "their",    "theirs", "them",    "themselves", "then",    "there",   "these",  "they",
      "this",    "those",    "through", "to",     "too",        "under",   "until",   "up",     "very",
      "was",     "we",       "were",   "what",    "when",       "where",   "which",   "while",  "who",
      "whom",    "why",      "will",   "with",    "would",      "you",     "your",    "yours",  "yourself",
      "yourselves"};
  return words;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitCorpora {
  Corpus train, val, test;
};

/// Seeded shuffle then contiguous cut. Val and test sizes are floor-rounded;
/// the remainder goes to train.
inline SplitCorpora split_corpus(const Corpus& corpus, double train_ratio, double val_ratio, double test_ratio,
                                 std::uint64_t seed) {
  if (train_ratio <= 0 || val_ratio <= 0 || test_ratio <= 0) throw Error("split ratios must be positive");
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
  const std::size_t n = corpus.size();
  const auto n_val = static_cast<std::size_t>(std::floor(val_ratio * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(test_ratio * static_cast<double>(n) + 1e-9));
  const std::size_t n_train = n - n_val - n_test;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  SplitCorpora out{{corpus.name, Split::train, {}}, {corpus.name, Split::val, {}}, {corpus.name, Split::test, {}}};
  for (std::size_t i = 0; i < n; ++i) {
    const Instance& inst = corpus.instances[order[i]];
    if (i < n_train) {
      out.train.instances.push_back(inst);
    } else if (i < n_train + n_val) {
      out.val.instances.push_back(inst);
    } else {
      out.test.instances.push_back(inst);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kMaskId = 2;
inline constexpr std::int32_t kFirstTokenId = 3;
inline const std::string kPadToken = "<pad>";
inline const std::string kUnkToken = "<unk>";
inline const std::string kMaskToken = "<mask>";

inline constexpr std::size_t kDefaultMinFreq = 5;

class Vocabulary {
 public:
  Vocabulary() : itos_{kPadToken, kUnkToken, kMaskToken} {
    for (std::int32_t i = 0; i < kFirstTokenId; ++i) stoi_[itos_[static_cast<std::size_t>(i)]] = i;
  }

  /// Appends a real token (no-op if present). Frequency must be >= 1.
  std::int32_t add(const std::string& token, std::size_t frequency) {
    if (frequency == 0) throw Error("vocabulary frequency must be >= 1 for '" + token + "'");
    if (token == kPadToken || token == kUnkToken || token == kMaskToken) {
      throw Error("reserved token cannot be added: " + token);
    }
    auto [it, inserted] = stoi_.emplace(token, static_cast<std::int32_t>(itos_.size()));
    if (inserted) {
      itos_.push_back(token);
      freq_[token] = frequency;
    }
    return it->second;
  }

  std::int32_t id(const std::string& token) const {
    auto it = stoi_.find(token);
    return it == stoi_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const { return stoi_.contains(token); }
  const std::string& token(std::int32_t id) const { return itos_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return itos_.size(); }

  std::size_t frequency(const std::string& token) const {
    auto it = freq_.find(token);
    return it == freq_.end() ? 0 : it->second;
  }

  void set_stopwords(std::set<std::string> words) { stopwords_ = std::move(words); }
  bool is_stopword(const std::string& token) const { return stopwords_.contains(token); }
  const std::set<std::string>& stopwords() const { return stopwords_; }

  /// Hash over the id-ordered token list; checkpoints use it to detect a
  /// vocabulary mismatch.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : itos_) {
      h = fnv1a(t, h);
      h = fnv1a(std::string_view("\n", 1), h);
    }
    return h;
  }

  const std::vector<std::string>& tokens() const { return itos_; }

 private:
  std::vector<std::string> itos_;
  std::unordered_map<std::string, std::int32_t> stoi_;
  std::unordered_map<std::string, std::size_t> freq_;
  std::set<std::string> stopwords_ = default_stopwords();
};

inline std::map<std::string, std::size_t> token_frequencies(const Corpus& corpus) {
  std::map<std::string, std::size_t> counts;
  for (const auto& inst : corpus.instances) {
    for (const auto& t : inst.tokens) ++counts[t];
  }
  return counts;
}

/// Tokens below min_freq fall back to UNK. Ids are assigned by descending
/// frequency, then lexicographically.
inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq = kDefaultMinFreq,
                              std::set<std::string> stopwords = default_stopwords()) {
  if (corpus.empty()) throw Error("build_vocab: empty corpus");
  auto counts = token_frequencies(corpus);
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq && tok != kPadToken && tok != kUnkToken && tok != kMaskToken) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, n] : kept) v.add(tok, n);
  v.set_stopwords(std::move(stopwords));
  return v;
}

// ---------------------------------------------------------------------------
// Encoded instances (model input)

struct EncodedInstance {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::int32_t> ids;
  Label label = Label::non_hate;
};

inline EncodedInstance encode(const Vocabulary& vocab, const Instance& inst) {
  EncodedInstance e{inst.id, inst.tokens, {}, inst.label};
  e.ids.reserve(inst.tokens.size());
  for (const auto& t : inst.tokens) e.ids.push_back(vocab.id(t));
  return e;
}

inline std::vector<EncodedInstance> encode(const Vocabulary& vocab, const Corpus& corpus) {
  std::vector<EncodedInstance> out;
  out.reserve(corpus.size());
  for (const auto& inst : corpus.instances) out.push_back(encode(vocab, inst));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora with planted spurious correlations

struct PlantedToken {
  std::string token;
  Label cls = Label::hate;
  double source_correlation = 0.0;  ///< share of carrier instances labelled `cls` in the source
  double target_correlation = 0.0;  ///< same share in the target
};

struct GenuineToken {
  std::string token;
  Label cls = Label::hate;
};

struct SyntheticSpec {
  std::size_t vocab_size = 300;
  std::size_t instances_per_split = 1000;
  std::vector<PlantedToken> planted_tokens;
  std::vector<GenuineToken> genuine_signal_tokens;
  std::size_t mean_length = 8;
  std::uint64_t seed = 0;

  double planted_frequency = 0.2;  ///< fraction of instances carrying each planted token
  double hate_fraction = 0.5;
  double source_genuine_coverage = 1.0;  ///< share of source instances that carry a genuine token
  double target_genuine_coverage = 1.0;
  std::size_t source_train_size = 0;  ///< 0 = instances_per_split
  std::size_t source_val_size = 0;
  std::size_t target_val_size = 0;
  std::size_t target_test_size = 0;
};

struct SyntheticCorpora {
  Corpus source_train, source_val, target_val, target_test;
};

namespace detail {

inline std::string filler_word(std::size_t i) {
  static constexpr std::string_view cons = "bdfgklmnprstvz";
  static constexpr std::string_view vows = "aeiou";
  const std::size_t syl = cons.size() * vows.size();
  std::string w;
  for (int k = 0; k < 3; ++k) {
    const std::size_t s = i % syl;
    i /= syl;
    w += cons[s / vows.size()];
    w += vows[s % vows.size()];
  }
  return w;
}

}  // namespace detail

inline void validate(const SyntheticSpec& spec) {
  std::set<std::string> planted, genuine;
  for (const auto& p : spec.planted_tokens) {
    if (!(p.source_correlation >= 0 && p.source_correlation <= 1 && p.target_correlation >= 0 &&
          p.target_correlation <= 1)) {
      throw Error("planted token '" + p.token + "': correlations must lie in [0,1]");
    }
    planted.insert(p.token);
  }
  for (const auto& g : spec.genuine_signal_tokens) genuine.insert(g.token);
  for (const auto& t : planted) {
    if (genuine.contains(t)) throw Error("token '" + t + "' is both planted and genuine");
  }
  if (spec.vocab_size < planted.size() + genuine.size() + 1) {
    throw Error("vocab_size too small for the named tokens plus filler");
  }
  if (spec.mean_length < 1) throw Error("mean_length must be >= 1");
  if (!(spec.planted_frequency >= 0 && spec.planted_frequency <= 1)) throw Error("planted_frequency must lie in [0,1]");
  if (!(spec.hate_fraction >= 0 && spec.hate_fraction <= 1)) throw Error("hate_fraction must lie in [0,1]");
  if (!(spec.source_genuine_coverage >= 0 && spec.source_genuine_coverage <= 1 && spec.target_genuine_coverage >= 0 &&
        spec.target_genuine_coverage <= 1)) {
    throw Error("genuine coverage must lie in [0,1]");
  }
}

/// Generates source (train/val) and target (val/test) corpora. Labels are
/// fixed by genuine tokens; each planted token is then inserted into a fixed
/// share of instances, split between its class and the other class so that
/// the carrier-class rate equals the requested correlation.
inline SyntheticCorpora generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  std::set<std::string> named;
  for (const auto& p : spec.planted_tokens) named.insert(p.token);
  for (const auto& g : spec.genuine_signal_tokens) named.insert(g.token);
  const auto& stop = default_stopwords();

  std::vector<std::string> filler;
  const std::size_t n_filler = spec.vocab_size - named.size();
  for (std::size_t i = 0; filler.size() < n_filler; ++i) {
    std::string w = detail::filler_word(i);
    if (!named.contains(w) && !stop.contains(w)) filler.push_back(std::move(w));
  }

  std::vector<std::string> genuine_by_class[kNumClasses];
  for (const auto& g : spec.genuine_signal_tokens) genuine_by_class[index_of(g.cls)].push_back(g.token);

  auto make = [&](const std::string& name, Split split, std::size_t n, bool source, std::uint64_t tag) {
    Rng rng(derive_seed(spec.seed, tag));
    Corpus c{name, split, {}};
    const auto n_hate = static_cast<std::size_t>(std::llround(spec.hate_fraction * static_cast<double>(n)));
    std::vector<Label> labels(n, Label::non_hate);
    for (std::size_t i = 0; i < n_hate; ++i) labels[i] = Label::hate;
    rng.shuffle(labels.begin(), labels.end());
    const double coverage = source ? spec.source_genuine_coverage : spec.target_genuine_coverage;

    const std::size_t lo = spec.mean_length > 2 ? spec.mean_length - 2 : 1;
    const std::size_t hi = spec.mean_length + 2;
    for (std::size_t i = 0; i < n; ++i) {
      Instance inst;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%06zu", i);
      inst.id = name + "-" + buf;
      inst.label = labels[i];
      const std::size_t len = lo + rng.below(hi - lo + 1);
      const auto& gen = genuine_by_class[index_of(inst.label)];
      for (std::size_t k = 0; k < len; ++k) inst.tokens.push_back(filler[rng.below(filler.size())]);
      if (!gen.empty() && rng.uniform() < coverage) inst.tokens[rng.below(len)] = gen[rng.below(gen.size())];
      c.instances.push_back(std::move(inst));
    }

    for (const auto& p : spec.planted_tokens) {
      const double corr = source ? p.source_correlation : p.target_correlation;
      const auto carriers = static_cast<std::size_t>(std::llround(spec.planted_frequency * static_cast<double>(n)));
      const auto in_class = static_cast<std::size_t>(std::llround(corr * static_cast<double>(carriers)));
      const std::size_t in_other = carriers - in_class;
      std::vector<std::size_t> pool[kNumClasses];
      for (std::size_t i = 0; i < n; ++i) pool[index_of(c.instances[i].label)].push_back(i);
      auto& own = pool[index_of(p.cls)];
      auto& rest = pool[index_of(other(p.cls))];
      if (in_class > own.size() || in_other > rest.size()) {
        throw Error("infeasible synthetic spec: planted token '" + p.token + "' needs " + std::to_string(in_class) +
                    "/" + std::to_string(in_other) + " carriers but " + name + " has " +
                    std::to_string(own.size()) + "/" + std::to_string(rest.size()) + " instances per class");
      }
      rng.shuffle(own.begin(), own.end());
      rng.shuffle(rest.begin(), rest.end());
      auto plant = [&](std::size_t idx) {
        auto& toks = c.instances[idx].tokens;
        toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(rng.below(toks.size() + 1)), p.token);
      };
      for (std::size_t k = 0; k < in_class; ++k) plant(own[k]);
      for (std::size_t k = 0; k < in_other; ++k) plant(rest[k]);
    }
    for (auto& inst : c.instances) inst.raw_text = join_tokens(inst.tokens);
    return c;
  };

  auto size_or = [&](std::size_t s) { return s ? s : spec.instances_per_split; };
  SyntheticCorpora out;
  out.source_train = make("source_train", Split::train, size_or(spec.source_train_size), true, 1);
  out.source_val = make("source_val", Split::val, size_or(spec.source_val_size), true, 2);
  out.target_val = make("target_val", Split::val, size_or(spec.target_val_size), false, 3);
  out.target_test = make("target_test", Split::test, size_or(spec.target_test_size), false, 4);
  return out;
}

}  // namespace dref
