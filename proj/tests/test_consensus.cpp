#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "f2c/consensus.hpp"
#include "support.hpp"

namespace f2c {
namespace {

TEST(VoteCounts, Examples) {
  EXPECT_EQ(vote_counts(std::vector<std::size_t>{0, 0, 1, 0, 2}, 3), (std::vector<std::size_t>{3, 1, 1}));
  EXPECT_EQ(vote_counts(std::vector<std::size_t>{1, 1, 1, 1}, 2), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(vote_counts(std::vector<std::size_t>{0, 0, 1, 1}, 2), (std::vector<std::size_t>{2, 2}));
  EXPECT_THROW(vote_counts(std::vector<std::size_t>{0, 3}, 3), std::invalid_argument);
}

TEST(ConsensusLabel, Examples) {
  EXPECT_EQ(consensus_label(std::vector<std::size_t>{3, 1, 1}, 5), 0u);
  EXPECT_FALSE(consensus_label(std::vector<std::size_t>{2, 2}, 4).has_value());
  EXPECT_EQ(consensus_label(std::vector<std::size_t>{1}, 1), 0u);
}

TEST(ConsensusLabel, StrictMajorityIsUniqueExhaustively) {
  for (std::size_t V = 1; V <= 8; ++V) {
    for (std::size_t L = 1; L <= 4; ++L) {
      // Enumerate every count vector summing to V.
      std::vector<std::size_t> n(L, 0);
      std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t left) {
        if (pos + 1 == L) {
          n[pos] = left;
          std::size_t winners = 0;
          for (auto x : n) winners += 2 * x > V;
          ASSERT_LE(winners, 1u);
          const auto c = consensus_label(n, V);
          EXPECT_EQ(c.has_value(), winners == 1);
          if (c) {
            EXPECT_GT(2 * n[*c], V);
          }
          return;
        }
        for (std::size_t k = 0; k <= left; ++k) {
          n[pos] = k;
          rec(pos + 1, left - k);
        }
      };
      rec(0, V);
    }
  }
}

TEST(SplitCcNc, UnanimousConfidentExample) {
  LLMatrix ll(0, 3, 2, {-0.1, -2.0, -0.2, -1.5, -0.3, -0.4});
  Hyperparams hp;
  hp.tau_unanimous = 1.0;
  const auto o = split_cc_nc(ll, 0, std::vector<std::size_t>{0, 1, 2}, hp);
  EXPECT_EQ(o.kind, Case::UnanimousConfident);
  EXPECT_NEAR(o.margins[0], 1.9, 1e-12);
  EXPECT_NEAR(o.margins[1], 1.3, 1e-12);
  EXPECT_NEAR(o.margins[2], 0.1, 1e-12);
  EXPECT_NEAR(*o.median_margin, 1.3, 1e-12);
  EXPECT_EQ(o.cc, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_TRUE(o.nc.empty());
  EXPECT_EQ(o.w_flip, 0.0);
}

TEST(SplitCcNc, NoMajorityForTwoWaySplit) {
  const auto ll = testing::ll_with_preferences({0, 1}, 2, {1.0, 1.0});
  const auto o = analyze(ll, Hyperparams{});
  EXPECT_EQ(o.kind, Case::NoMajority);
  EXPECT_FALSE(o.c_star.has_value());
  EXPECT_TRUE(o.cc.empty() && o.nc.empty());
  // The explicit guard on |G| <= V/2.
  const auto direct = split_cc_nc(ll, 0, std::vector<std::size_t>{0}, Hyperparams{});
  EXPECT_EQ(direct.kind, Case::NoMajority);
}

TEST(SplitCcNc, SplitTakesTopKByMargin) {
  const auto ll = testing::ll_with_preferences({0, 0, 0, 1, 2}, 3, {0.5, 2.0, 1.0, 1.0, 1.0});
  Hyperparams hp;
  hp.k_max = 2;
  const auto o = split_cc_nc(ll, 0, std::vector<std::size_t>{0, 1, 2}, hp);
  EXPECT_EQ(o.kind, Case::Split);
  EXPECT_EQ(o.cc, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(o.nc, (std::vector<std::size_t>{0, 3, 4}));
  // Delta compares the mean consensus LL of T and S.
  const double mt = (ll.ll(1, 0) + ll.ll(2, 0)) / 2.0;
  const double ms = (ll.ll(0, 0) + ll.ll(3, 0) + ll.ll(4, 0)) / 3.0;
  EXPECT_NEAR(*o.delta, mt - ms, 1e-15);
  EXPECT_NEAR(o.w_flip, flip_weight(mt - ms, hp), 1e-15);
}

TEST(SplitCcNc, UnanimousButUnsureIsSplit) {
  const auto ll = testing::ll_with_preferences({1, 1, 1, 1}, 2, {0.1, 0.2, 0.3, 0.05});
  const auto o = analyze(ll, Hyperparams{});
  EXPECT_EQ(o.kind, Case::Split);
  EXPECT_EQ(o.cc, (std::vector<std::size_t>{2, 1, 0}));
  EXPECT_EQ(o.nc, (std::vector<std::size_t>{3}));
}

TEST(SplitCcNc, MarginTiesGoToLowerVariation) {
  const auto ll = testing::ll_with_preferences({0, 0, 0, 0, 1}, 2, {1.0, 1.0, 1.0, 1.0, 1.0});
  const auto o = analyze(ll, Hyperparams{});
  EXPECT_EQ(o.kind, Case::Split);
  EXPECT_EQ(o.cc, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(o.nc, (std::vector<std::size_t>{3, 4}));
}

TEST(SplitCcNc, DegenerateWhenTooFewVariations) {
  // V = 2, both agree but unsure: k = min(k_max, V - 1, |G|) = 1.
  const auto two = analyze(testing::ll_with_preferences({0, 0}, 2, {0.1, 0.1}), Hyperparams{});
  EXPECT_EQ(two.kind, Case::Degenerate);
  EXPECT_EQ(two.c_star, 0u);
  EXPECT_TRUE(two.cc.empty() && two.nc.empty());
  EXPECT_EQ(two.w_flip, 0.0);
  // V = 1 without confidence.
  const auto one = analyze(testing::ll_with_preferences({1}, 3, {0.2}), Hyperparams{});
  EXPECT_EQ(one.kind, Case::Degenerate);
  // V = 1 with confidence is unanimous.
  const auto conf = analyze(testing::ll_with_preferences({1}, 3, {2.0}), Hyperparams{});
  EXPECT_EQ(conf.kind, Case::UnanimousConfident);
}

TEST(SplitCcNc, RejectsInconsistentVoters) {
  const auto ll = testing::ll_with_preferences({0, 0, 1}, 2, {1.0, 1.0, 1.0});
  EXPECT_THROW(split_cc_nc(ll, 0, std::vector<std::size_t>{0, 2}, Hyperparams{}), std::invalid_argument);
  EXPECT_THROW(split_cc_nc(ll, 5, std::vector<std::size_t>{0}, Hyperparams{}), std::invalid_argument);
}

LLMatrix random_ll(std::mt19937_64& rng, std::size_t V, std::size_t L) {
  // Coarse grid values make ties and unanimity common.
  std::uniform_int_distribution<int> g(-8, 0);
  std::vector<double> ll(V * L);
  for (auto& x : ll) x = 0.25 * g(rng);
  return LLMatrix(0, V, L, std::move(ll));
}

TEST(Analyze, SetInvariantsOnRandomMatrices) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<std::size_t> vd(1, 8), ld(2, 4);
  std::array<int, 4> seen{};
  for (int trial = 0; trial < 5000; ++trial) {
    const std::size_t V = vd(rng), L = ld(rng);
    const auto ll = random_ll(rng, V, L);
    Hyperparams hp;
    hp.k_max = 2 + trial % 3;
    const auto o = analyze(ll, hp);
    ++seen[static_cast<int>(o.kind)];
    const auto preds = predictions(ll);
    switch (o.kind) {
      case Case::NoMajority:
        EXPECT_FALSE(o.c_star);
        EXPECT_TRUE(o.cc.empty() && o.nc.empty());
        break;
      case Case::UnanimousConfident:
        EXPECT_EQ(o.voters.size(), V);
        EXPECT_EQ(o.cc, o.voters);
        EXPECT_TRUE(o.nc.empty());
        EXPECT_GE(*o.median_margin, hp.tau_unanimous);
        break;
      case Case::Degenerate:
        EXPECT_TRUE(o.c_star);
        EXPECT_TRUE(o.cc.empty() && o.nc.empty());
        break;
      case Case::Split: {
        EXPECT_GE(o.cc.size(), 2u);
        EXPECT_LE(o.cc.size(), std::min<std::size_t>(hp.k_max, V - 1));
        EXPECT_GE(o.nc.size(), 1u);
        EXPECT_EQ(o.cc.size() + o.nc.size(), V);
        std::set<std::size_t> all(o.cc.begin(), o.cc.end());
        all.insert(o.nc.begin(), o.nc.end());
        EXPECT_EQ(all.size(), V);
        for (auto t : o.cc) EXPECT_EQ(preds[t], *o.c_star);
        EXPECT_GE(o.w_flip, hp.f_min);
        EXPECT_LE(o.w_flip, hp.f_max);
        break;
      }
    }
    if (o.c_star) {
      EXPECT_GT(2 * o.voters.size(), V);
      for (auto v : o.voters) EXPECT_EQ(preds[v], *o.c_star);
    }
  }
  for (int k = 0; k < 4; ++k) EXPECT_GT(seen[k], 0) << to_string(static_cast<Case>(k));
}

TEST(Analyze, RowShiftKeepsMarginAndGlobalShiftKeepsOutcome) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t V = 3 + trial % 6, L = 2 + trial % 3;
    std::vector<double> vals(V * L);
    for (auto& x : vals) x = nd(rng);
    const LLMatrix ll(0, V, L, vals);
    const auto base = analyze(ll, Hyperparams{});
    if (!base.c_star) continue;
    // Shift one row.
    auto row_shift = vals;
    const std::size_t r = base.voters.front();
    for (std::size_t c = 0; c < L; ++c) row_shift[r * L + c] += 0.75;
    EXPECT_NEAR(confidence_margin(LLMatrix(0, V, L, row_shift).ll_row(r), *base.c_star), base.margins[r], 1e-12);
    // Shift everything by 0.5, exactly representable, keeping differences exact.
    auto all = vals;
    for (auto& x : all) x += 0.5;
    const auto shifted = analyze(LLMatrix(0, V, L, all), Hyperparams{});
    EXPECT_EQ(shifted.kind, base.kind);
    EXPECT_EQ(shifted.cc, base.cc);
    EXPECT_EQ(shifted.nc, base.nc);
    EXPECT_NEAR(shifted.w_flip, base.w_flip, 1e-12);
  }
}

TEST(FlipWeight, Examples) {
  Hyperparams hp;
  hp.f_min = 0.1;
  hp.f_max = 0.9;
  EXPECT_DOUBLE_EQ(flip_weight(0.0, hp), 0.5);
  EXPECT_NEAR(flip_weight(1e6, hp), 0.9, 1e-15);
  EXPECT_NEAR(flip_weight(-1e6, hp), 0.1, 1e-15);
  hp.f_min = 0.0;
  hp.f_max = 1.0;
  EXPECT_NEAR(flip_weight(1.0, hp), 0.7310585786, 1e-10);
}

TEST(FlipWeight, StrictlyMonotone) {
  Hyperparams hp;
  double prev = -1.0;
  for (double d = -20.0; d <= 20.0; d += 0.25) {
    const double w = flip_weight(d, hp);
    EXPECT_GT(w, prev);
    prev = w;
  }
}

TEST(FlipWeight, TemperatureMustBePositive) {
  Hyperparams hp;
  hp.temperature = 0.0;
  EXPECT_THROW(flip_weight(1.0, hp), std::invalid_argument);
  EXPECT_THROW(hp.validate(), std::invalid_argument);
}

TEST(Median, EvenAndOdd) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}

}  // namespace
}  // namespace f2c
