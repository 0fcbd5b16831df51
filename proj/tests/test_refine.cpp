// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

using namespace dref;
using dref::testing::random_instance;
using dref::testing::random_params;

namespace {

SyntheticCorpora small_benchmark(std::uint64_t seed) {
  auto s = dref::testing::planted_benchmark(seed);
  s.source_train_size = 400;
  s.source_val_size = 100;
  s.target_val_size = 100;
  s.target_test_size = 100;
  return generate_synthetic(s);
}

RefineConfig small_config(PenaltyMode mode) {
  RefineConfig c;
  c.mode = mode;
  c.epochs = 3;
  c.dim = 8;
  c.lambda = 10.0;
  c.seed = 5;
  if (uses_lexicon(mode)) c.lexicon = TokenSet{"vile", "notaword"};
  return c;
}

}  // namespace

TEST(PenaltyMode, NamesAndFlags) {
  for (auto m : {PenaltyMode::vanilla, PenaltyMode::tok_mask, PenaltyMode::reg, PenaltyMode::comb,
                 PenaltyMode::pre_def_only}) {
    EXPECT_EQ(parse_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_mode("mask"), Error);
  EXPECT_TRUE(uses_lexicon(PenaltyMode::comb));
  EXPECT_TRUE(uses_lexicon(PenaltyMode::pre_def_only));
  EXPECT_FALSE(uses_lexicon(PenaltyMode::reg));
  EXPECT_TRUE(uses_extraction(PenaltyMode::tok_mask));
  EXPECT_FALSE(uses_extraction(PenaltyMode::pre_def_only));
  EXPECT_FALSE(uses_penalty(PenaltyMode::tok_mask));
  EXPECT_FALSE(uses_penalty(PenaltyMode::vanilla));
}

TEST(Grids, Values) {
  EXPECT_EQ(lambda_grid(AttributionMethod::integrated_gradients).front(), 1.0);
  EXPECT_EQ(lambda_grid(AttributionMethod::deeplift).front(), 0.1);
  EXPECT_EQ(lambda_grid(AttributionMethod::scaled_attention).back(), 60.0);
  EXPECT_EQ(k_grid().size(), 4u);
}

TEST(RefineConfig, Validation) {
  RefineConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mode = PenaltyMode::comb;
  EXPECT_THROW(c.validate(), Error);
  c.lexicon = TokenSet{"x"};
  EXPECT_NO_THROW(c.validate());
  c.mode = PenaltyMode::reg;
  EXPECT_THROW(c.validate(), Error);
  c.lexicon.reset();
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), Error);
  c.lambda = 1.0;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), Error);
  c.epochs = 1;
  c.k_fraction = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(RefineConfig, LexiconFromFile) {
  RefineConfig c;
  c.mode = PenaltyMode::pre_def_only;
  c.lexicon_path = dref::testing::source_path("data/group_identifiers.txt");
  const auto lex = c.resolved_lexicon();
  EXPECT_TRUE(lex.contains("muslim"));
  EXPECT_TRUE(lex.contains("women"));
}

TEST(TokMask, ReplacesListedTokens) {
  Corpus c;
  c.instances.push_back({"a", {"x", "y", "x"}, Label::hate, ""});
  const auto m = apply_tok_mask(c, {"x"});
  EXPECT_EQ(m.instances[0].tokens, (std::vector<std::string>{kMaskToken, "y", kMaskToken}));
  EXPECT_EQ(apply_tok_mask(c, {}), c);
}

TEST(Comb, UnionWithLexicon) {
  const auto s = make_spurious_set(1, {"a"}, {"b"});
  EXPECT_EQ(combine_with_lexicon(s, {"c", "a"}), (TokenSet{"a", "b", "c"}));
}

TEST(PenalizedIds, DropsUnknownTokens) {
  Vocabulary v;
  const auto x = v.add("x", 3);
  EXPECT_EQ(penalized_ids(v, {"x", "nope"}), (std::set<std::int32_t>{x}));
}

TEST(AttributionLoss, ZeroWhenNothingPenalized) {
  Rng rng(1);
  const auto p = random_params(10, 4, 2);
  const std::vector<EncodedInstance> batch = {random_instance(10, 5, rng)};
  const auto none = attribution_loss(p, batch, {}, AttributionMethod::deeplift, 5.0);
  EXPECT_EQ(none.added_loss, 0.0);
  const auto zero_lambda = attribution_loss(p, batch, {batch[0].ids[0]}, AttributionMethod::deeplift, 0.0);
  EXPECT_EQ(zero_lambda.added_loss, 0.0);
  EXPECT_GT(zero_lambda.attribution_loss, 0.0);
  EXPECT_THROW(attribution_loss(p, batch, {batch[0].ids[0]}, AttributionMethod::deeplift, -1.0), Error);
}

TEST(AttributionLoss, ParameterGradientsMatchFiniteDifferences) {
  for (auto m : {AttributionMethod::scaled_attention, AttributionMethod::deeplift,
                 AttributionMethod::integrated_gradients}) {
    for (std::uint64_t seed : {1u, 2u}) {
      const auto r = dref::testing::penalty_gradient_check(m, seed);
      EXPECT_GT(r.checked, 64u);
      EXPECT_EQ(r.failed, 0u) << to_string(m) << " seed " << seed << ": " << r.worst;
      EXPECT_LT(r.value_error, 1e-10);
    }
  }
}

TEST(RunDref, VanillaHasNoTokenSets) {
  const auto data = small_benchmark(1);
  const auto cfg = small_config(PenaltyMode::vanilla);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto run = run_dref(data.source_train, data.target_val, cfg, vocab, &data.source_val);
  ASSERT_EQ(run.history.size(), 3u);
  for (const auto& r : run.history) {
    EXPECT_TRUE(r.penalized.empty());
    EXPECT_TRUE(r.extracted.combined.empty());
    EXPECT_EQ(r.train.mean_attribution_loss, 0.0);
    EXPECT_TRUE(r.source_val_f1.has_value());
  }
}

TEST(RunDref, RegReplacesPreviousSet) {
  const auto data = small_benchmark(2);
  const auto cfg = small_config(PenaltyMode::reg);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto run = run_dref(data.source_train, data.target_val, cfg, vocab);
  ASSERT_EQ(run.history.size(), 3u);
  EXPECT_TRUE(run.history[0].penalized.empty());
  for (std::size_t i = 1; i < run.history.size(); ++i) {
    EXPECT_EQ(run.history[i].penalized, run.history[i - 1].extracted.combined);
    EXPECT_EQ(run.history[i].extracted.epoch_index, i + 1);
  }
}

TEST(RunDref, CombAddsLexiconEveryEpoch) {
  const auto data = small_benchmark(3);
  const auto cfg = small_config(PenaltyMode::comb);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto run = run_dref(data.source_train, data.target_val, cfg, vocab);
  EXPECT_EQ(run.history[0].penalized, *cfg.lexicon);
  EXPECT_GT(run.history[0].train.mean_attribution_loss, 0.0);
  for (std::size_t i = 1; i < run.history.size(); ++i) {
    EXPECT_EQ(run.history[i].penalized, combine_with_lexicon(run.history[i - 1].extracted, *cfg.lexicon));
  }
}

TEST(RunDref, PreDefinedOnlyUsesLexiconAlone) {
  const auto data = small_benchmark(4);
  const auto cfg = small_config(PenaltyMode::pre_def_only);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto run = run_dref(data.source_train, data.target_val, cfg, vocab);
  for (const auto& r : run.history) {
    EXPECT_EQ(r.penalized, *cfg.lexicon);
    EXPECT_TRUE(r.extracted.combined.empty());
  }
}

TEST(RunDref, TokMaskFollowsExtraction) {
  const auto data = small_benchmark(5);
  const auto cfg = small_config(PenaltyMode::tok_mask);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto run = run_dref(data.source_train, data.target_val, cfg, vocab);
  for (std::size_t i = 1; i < run.history.size(); ++i) {
    EXPECT_EQ(run.history[i].penalized, run.history[i - 1].extracted.combined);
    EXPECT_EQ(run.history[i].train.mean_attribution_loss, 0.0);
  }
}

TEST(RunDref, SelectsBestEarliestEpochAndIsDeterministic) {
  const auto data = small_benchmark(6);
  const auto cfg = small_config(PenaltyMode::reg);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  const auto a = run_dref(data.source_train, data.target_val, cfg, vocab);
  const auto b = run_dref(data.source_train, data.target_val, cfg, vocab);
  EXPECT_EQ(a.params.embedding.data, b.params.embedding.data);
  EXPECT_EQ(a.params.weights, b.params.weights);
  double best = -1.0;
  std::size_t want = 0;
  for (const auto& r : a.history) {
    if (r.target_val_f1 > best) {
      best = r.target_val_f1;
      want = r.epoch;
    }
  }
  EXPECT_EQ(a.selected_epoch, want);
  EXPECT_DOUBLE_EQ(evaluate_macro_f1(a.params, encode(vocab, data.target_val)), best);
  const auto j = to_json(a, cfg);
  EXPECT_EQ(j["epochs"].size(), 3u);
  EXPECT_EQ(j["selected_epoch"], want);
  EXPECT_EQ(j["config"]["mode"], "reg");
}

TEST(RunDref, RejectsEmptyInputs) {
  const auto data = small_benchmark(7);
  const auto cfg = small_config(PenaltyMode::reg);
  const auto vocab = build_vocab(data.source_train, cfg.min_freq, cfg.stopwords);
  EXPECT_THROW(run_dref(Corpus{}, data.target_val, cfg, vocab), Error);
  EXPECT_THROW(run_dref(data.source_train, Corpus{}, cfg, vocab), Error);
}
