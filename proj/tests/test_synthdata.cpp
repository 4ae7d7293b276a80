#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "f2c/metrics.hpp"
#include "f2c/synthdata.hpp"

namespace f2c {
namespace {

TaskConfig small_task(std::uint64_t seed = 1) {
  TaskConfig c;
  c.seed = seed;
  c.instances = 300;
  c.splits = {150, 75, 75};
  return c;
}

std::map<std::size_t, std::size_t> class_counts(const std::vector<std::size_t>& labels,
                                                const std::vector<std::size_t>& idx) {
  std::map<std::size_t, std::size_t> m;
  for (auto i : idx) ++m[labels[i]];
  return m;
}

TEST(StratifiedSplit, BalancedBinary) {
  std::vector<std::size_t> labels(100);
  for (std::size_t i = 0; i < 100; ++i) labels[i] = i % 2;
  const auto s = stratified_split(labels, 2, {0, 20, 0}, 1);
  const auto m = class_counts(labels, s.val);
  EXPECT_EQ(m.at(0), 10u);
  EXPECT_EQ(m.at(1), 10u);
}

TEST(StratifiedSplit, ThreeClasses) {
  std::vector<std::size_t> labels(99);
  for (std::size_t i = 0; i < 99; ++i) labels[i] = i % 3;
  const auto s = stratified_split(labels, 3, {0, 0, 33}, 1);
  for (auto [c, n] : class_counts(labels, s.test)) EXPECT_EQ(n, 11u) << c;
}

TEST(StratifiedSplit, SkewedLabels) {
  std::vector<std::size_t> labels(100, 0);
  for (std::size_t i = 0; i < 10; ++i) labels[i * 10] = 1;
  const auto s = stratified_split(labels, 2, {0, 10, 0}, 5);
  const auto m = class_counts(labels, s.val);
  EXPECT_EQ(m.at(0), 9u);
  EXPECT_EQ(m.at(1), 1u);
}

TEST(StratifiedSplit, DisjointAndSized) {
  std::vector<std::size_t> labels(200);
  std::mt19937_64 rng(3);
  for (auto& l : labels) l = rng() % 4;
  const auto s = stratified_split(labels, 4, {90, 50, 40}, 9);
  EXPECT_EQ(s.train.size(), 90u);
  EXPECT_EQ(s.val.size(), 50u);
  EXPECT_EQ(s.test.size(), 40u);
  std::vector<int> used(200, 0);
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (auto i : *part) ++used[i];
  for (int u : used) EXPECT_LE(u, 1);
  EXPECT_THROW(stratified_split(labels, 4, {150, 50, 40}, 9), std::invalid_argument);
}

TEST(Generate, Deterministic) {
  EXPECT_TRUE(generate(small_task(4)) == generate(small_task(4)));
  EXPECT_FALSE(generate(small_task(4)) == generate(small_task(5)));
}

TEST(Generate, ShapesAndSplits) {
  const auto ds = generate(small_task());
  EXPECT_EQ(ds.formats.size(), 8u);
  EXPECT_EQ(ds.indices(Split::Train).size() + ds.indices(Split::Val).size() + ds.indices(Split::Test).size(),
            ds.instances.size());
  std::size_t hard = 0;
  for (const auto& f : ds.formats) hard += f.noise_scale == ds.config.hard_noise;
  EXPECT_EQ(hard, 3u);
  for (const auto& inst : ds.instances) {
    EXPECT_EQ(inst.features.size(), 8u);
    EXPECT_EQ(inst.noise.size(), 8u);
  }
  EXPECT_EQ(ds.base.vocab, 5u);
  EXPECT_EQ(ds.answers.tokens.size(), 3u);
}

TEST(Generate, ValidatesConfigNamingField) {
  TaskConfig c = small_task();
  c.labels = 1;
  try {
    generate(c);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("labels"), std::string::npos);
  }
  c = small_task();
  c.splits = {300, 100, 100};
  EXPECT_THROW(generate(c), std::invalid_argument);
}

TEST(Generate, SharedFamilySharesFormatsAndBase) {
  TaskConfig a = small_task(1), b = small_task(2);
  a.family_seed = b.family_seed = 77;
  b.task_shift = 0.3;
  const auto da = generate(a), db = generate(b);
  EXPECT_TRUE(da.base == db.base);
  EXPECT_EQ(da.formats[3].map, db.formats[3].map);
  EXPECT_NE(da.instances[0].features, db.instances[0].features);
}

// Closed-form multinomial logistic regression on gold labels, trained by
// gradient descent on the clean features.
double supervised_accuracy(const Dataset& ds) {
  const std::size_t d = ds.config.dim, L = ds.config.labels;
  std::vector<double> w(L * d, 0.0), b(L, 0.0);
  const auto train = ds.indices(Split::Train), test = ds.indices(Split::Test);
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(L * d, 0.0), gb(L, 0.0);
    for (auto i : train) {
      const auto& x = ds.instances[i].features;
      std::vector<double> z(L);
      double mx = -1e300;
      for (std::size_t c = 0; c < L; ++c) {
        z[c] = b[c];
        for (std::size_t k = 0; k < d; ++k) z[c] += w[c * d + k] * x[k];
        mx = std::max(mx, z[c]);
      }
      double s = 0.0;
      for (auto& v : z) s += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < L; ++c) {
        const double g = z[c] / s - (c == ds.instances[i].gold() ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t k = 0; k < d; ++k) gw[c * d + k] += g * x[k];
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= 0.5 * gw[k] / train.size();
    for (std::size_t c = 0; c < L; ++c) b[c] -= 0.5 * gb[c] / train.size();
  }
  std::size_t correct = 0;
  for (auto i : test) {
    const auto& x = ds.instances[i].features;
    std::size_t best = 0;
    double bz = -1e300;
    for (std::size_t c = 0; c < L; ++c) {
      double z = b[c];
      for (std::size_t k = 0; k < d; ++k) z += w[c * d + k] * x[k];
      if (z > bz) {
        bz = z;
        best = c;
      }
    }
    correct += best == ds.instances[i].gold();
  }
  return static_cast<double>(correct) / test.size();
}

TEST(Generate, SeparableTaskIsLearnable) {
  TaskConfig c;
  EXPECT_GT(supervised_accuracy(generate(c)), 0.9);
}

TEST(Generate, NoSeparationIsChance) {
  TaskConfig c = small_task();
  c.instances = 1200;
  c.splits = {600, 300, 300};
  c.separation = 0.0;
  EXPECT_NEAR(supervised_accuracy(generate(c)), 1.0 / 3.0, 0.08);
}

TEST(Dedup, NoCollisionsLeavesDataset) {
  auto ds = generate(small_task());
  const auto before = ds.instances.size();
  EXPECT_EQ(dedup_rendered(ds).dropped, 0u);
  EXPECT_EQ(ds.instances.size(), before);
}

TEST(Dedup, PlantedDuplicatesAreDropped) {
  auto ds = generate(small_task());
  const auto train = ds.indices(Split::Train), val = ds.indices(Split::Val), test = ds.indices(Split::Test);
  // Copy k train instances over test/val instances.
  const std::size_t k = 7;
  std::vector<std::size_t> expect_dropped;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t target = j % 2 ? test[j] : val[j];
    const Split keep = ds.instances[target].split;
    const std::size_t id = ds.instances[target].id;
    Instance copy(id, ds.instances[train[j]].features, ds.instances[train[j]].noise, ds.instances[train[j]].gold(), keep);
    ds.instances[target] = copy;
    expect_dropped.push_back(id);
  }
  const auto before = ds.instances.size();
  const auto rep = dedup_rendered(ds);
  EXPECT_EQ(rep.dropped, k);
  EXPECT_EQ(ds.instances.size(), before - k);
  std::sort(expect_dropped.begin(), expect_dropped.end());
  auto got = rep.dropped_ids;
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, expect_dropped);
  EXPECT_EQ(ds.indices(Split::Train).size(), train.size());
}

TEST(Dedup, TrainTestCollisionDropsTestCopy) {
  auto ds = generate(small_task());
  const auto train = ds.indices(Split::Train), test = ds.indices(Split::Test);
  auto& t = ds.instances[test[0]];
  t = Instance(t.id, ds.instances[train[0]].features, ds.instances[train[0]].noise, 0, Split::Test);
  const auto id = t.id;
  const auto rep = dedup_rendered(ds);
  ASSERT_EQ(rep.dropped, 1u);
  EXPECT_EQ(rep.dropped_ids[0], id);
}

TEST(GoldFirewall, CountsReadsOnlyWhileActive) {
  const auto ds = generate(small_task());
  const auto before = GoldFirewall::violations();
  (void)ds.instances[0].gold();
  EXPECT_EQ(GoldFirewall::violations(), before);
  {
    GoldFirewall fw;
    EXPECT_TRUE(GoldFirewall::active());
    (void)ds.instances[0].gold();
    (void)ds.instances[1].gold();
  }
  EXPECT_FALSE(GoldFirewall::active());
  EXPECT_EQ(GoldFirewall::violations(), before + 2);
}

}  // namespace
}  // namespace f2c
