// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <numeric>

#include "dref/common.hpp"

using namespace dref;

TEST(Label, RoundTrip) {
  EXPECT_EQ(parse_label("hate"), Label::hate);
  EXPECT_EQ(parse_label("non-hate"), Label::non_hate);
  EXPECT_EQ(to_string(Label::hate), "hate");
  EXPECT_EQ(to_string(Label::non_hate), "non-hate");
  EXPECT_EQ(other(Label::hate), Label::non_hate);
  EXPECT_EQ(label_at(index_of(Label::non_hate)), Label::non_hate);
}

TEST(Label, UnknownNamesTheValue) {
  try {
    parse_label("maybe");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("maybe"), std::string::npos);
  }
}

TEST(Rng, Deterministic) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_NE(x, c.next());
  }
}

TEST(Rng, KnownSplitMix64Output) {
  // First outputs of SplitMix64 seeded with 0.
  Rng r(0);
  EXPECT_EQ(r.next(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next(), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(13), 13u);
  }
  EXPECT_THROW(r.below(0), Error);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(3);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w.begin(), w.end());
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(DeriveSeed, DistinctTags) {
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(5, 9), derive_seed(5, 9));
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (std::size_t jobs : {1u, 2u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(101);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, PropagatesErrors) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw Error("boom");
               }),
               Error);
}

TEST(Matrix, RowMajor) {
  Matrix<double> m(2, 3);
  m(1, 2) = 5.0;
  EXPECT_EQ(m.data[5], 5.0);
  EXPECT_EQ(m.row(1)[2], 5.0);
}
