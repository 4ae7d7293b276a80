#ifndef F2C_SYNTHDATA_HPP
#define F2C_SYNTHDATA_HPP

// Synthetic multi-format classification tasks.
//
// A task family (family_seed) fixes the latent class geometry, the V format
// maps and the "pretrained" base scorer; a task (seed) draws instances from
// that family, optionally shifting the class means. Class signal lives in an
// L-dimensional subspace; formats perturb mostly the complementary nuisance
// subspace, which the base scorer is spuriously sensitive to.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "f2c/scorer.hpp"

namespace f2c {

// ---------------------------------------------------------------------------
// Gold-label firewall
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local int firewall_depth = 0;
inline std::atomic<std::size_t> firewall_gold_reads{0};
}  // namespace detail

/// While a scope is alive on a thread, every gold-label read on that thread
/// is counted as a violation of the unsupervised contract.
class GoldFirewall {
 public:
  GoldFirewall() { ++detail::firewall_depth; }
  ~GoldFirewall() { --detail::firewall_depth; }
  GoldFirewall(const GoldFirewall&) = delete;
  GoldFirewall& operator=(const GoldFirewall&) = delete;

  static std::size_t violations() { return detail::firewall_gold_reads.load(); }
  static void reset() { detail::firewall_gold_reads.store(0); }
  static bool active() { return detail::firewall_depth > 0; }
};

enum class Split { Train, Val, Test, Unused };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unused: return "unused";
  }
  return "unused";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unused") return Split::Unused;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

class Instance {
 public:
  Instance() = default;
  Instance(std::size_t id, std::vector<double> features, std::vector<std::vector<double>> noise, std::size_t gold,
           Split split = Split::Unused)
      : id(id), features(std::move(features)), noise(std::move(noise)), split(split), gold_(gold) {}

  std::size_t id = 0;
  std::vector<double> features;
  std::vector<std::vector<double>> noise;  // per format, added after rendering
  Split split = Split::Unused;

  std::size_t gold() const {
    if (GoldFirewall::active()) detail::firewall_gold_reads.fetch_add(1);
    return gold_;
  }

  bool operator==(const Instance& o) const {
    return id == o.id && features == o.features && noise == o.noise && split == o.split && gold_ == o.gold_;
  }

 private:
  std::size_t gold_ = 0;
};

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t total() const { return train + val + test; }
};

struct TaskConfig {
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> family_seed;  // defaults to seed
  std::size_t instances = 1200;
  std::size_t dim = 8;
  std::size_t labels = 3;
  std::size_t formats = 8;
  double separation = 4.0;
  double format_noise = 0.3;    // nuisance noise scale for regular formats
  std::size_t hard_formats = 3;
  double hard_noise = 2.0;      // nuisance noise scale for hard formats
  double rotation_scale = 0.15;
  double offset_scale = 1.0;
  double task_shift = 0.0;      // per-task perturbation of the class means
  std::size_t distractors = 2;
  std::size_t answer_length = 1;
  double prior_strength = 0.6;
  double prior_spurious = 0.8;
  SplitSizes splits{600, 300, 300};

  std::uint64_t family() const { return family_seed.value_or(seed); }
  std::size_t vocab() const { return labels + distractors; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("task config field '" + field + "' " + why);
    };
    if (labels < 2) fail("labels", "must be >= 2");
    if (formats < 2) fail("formats", "must be >= 2");
    if (instances < formats) fail("instances", "must be >= formats");
    if (dim < labels) fail("dim", "must be >= labels");
    if (hard_formats > formats) fail("hard_formats", "must be <= formats");
    if (distractors < 2) fail("distractors", "must be >= 2");
    if (answer_length < 1) fail("answer_length", "must be >= 1");
    if (!(separation >= 0.0)) fail("separation", "must be >= 0");
    if (!(format_noise >= 0.0)) fail("format_noise", "must be >= 0");
    if (!(hard_noise >= 0.0)) fail("hard_noise", "must be >= 0");
    if (!(rotation_scale >= 0.0)) fail("rotation_scale", "must be >= 0");
    if (!(offset_scale >= 0.0)) fail("offset_scale", "must be >= 0");
    if (!(task_shift >= 0.0)) fail("task_shift", "must be >= 0");
    if (splits.total() > instances) fail("splits", "sum exceeds instances");
  }
};

struct Dataset {
  TaskConfig config;
  std::vector<Instance> instances;
  std::vector<FormatSpec> formats;
  AnswerSpec answers;
  ScorerParams base;  // the untrained scorer every method starts from

  std::size_t num_labels() const { return answers.num_labels(); }
  std::size_t vocab() const { return base.vocab; }

  std::vector<double> rendered(const Instance& inst, std::size_t format) const {
    auto x = render(inst.features, formats.at(format));
    const auto& n = inst.noise.at(format);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += n[i];
    return x;
  }

  std::vector<std::vector<double>> renderings(const Instance& inst, std::span<const std::size_t> format_ids) const {
    std::vector<std::vector<double>> out;
    for (auto f : format_ids) out.push_back(rendered(inst, f));
    return out;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (instances[i].split == s) out.push_back(i);
    return out;
  }

  bool operator==(const Dataset& o) const {
    return instances == o.instances && formats.size() == o.formats.size() &&
           std::equal(formats.begin(), formats.end(), o.formats.begin(),
                      [](const FormatSpec& a, const FormatSpec& b) {
                        return a.id == b.id && a.map == b.map && a.offset == b.offset &&
                               a.noise_scale == b.noise_scale;
                      }) &&
           answers.tokens == o.answers.tokens && base == o.base;
  }
};

namespace detail {

inline std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = scale * nd(rng);
  return v;
}

/// Rows of a random orthonormal basis (Gram-Schmidt on Gaussian rows).
inline std::vector<std::vector<double>> orthonormal_rows(std::vector<std::vector<double>> rows) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) d += rows[i][k] * rows[j][k];
      for (std::size_t k = 0; k < rows[i].size(); ++k) rows[i][k] -= d * rows[j][k];
    }
    double nrm = 0.0;
    for (double x : rows[i]) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw std::runtime_error("orthonormal_rows: degenerate basis");
    for (auto& x : rows[i]) x /= nrm;
  }
  return rows;
}

inline std::vector<std::vector<double>> random_basis(std::mt19937_64& rng, std::size_t d) {
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < d; ++i) rows.push_back(gaussian_vector(rng, d));
  return orthonormal_rows(std::move(rows));
}

/// Near-identity rotation: orthonormalized I + scale * G.
inline std::vector<double> near_identity_rotation(std::mt19937_64& rng, std::size_t d, double scale) {
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < d; ++i) {
    auto r = gaussian_vector(rng, d, scale);
    r[i] += 1.0;
    rows.push_back(std::move(r));
  }
  rows = orthonormal_rows(std::move(rows));
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return flat;
}

/// Random combination of the given basis rows.
inline std::vector<double> in_span(std::mt19937_64& rng, const std::vector<std::vector<double>>& basis,
                                   std::size_t from, std::size_t to, std::size_t d, double scale) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(d, 0.0);
  for (std::size_t b = from; b < to; ++b) {
    const double w = scale * nd(rng);
    for (std::size_t k = 0; k < d; ++k) v[k] += w * basis[b][k];
  }
  return v;
}

struct Family {
  std::vector<std::vector<double>> basis;  // first L rows: signal, rest: nuisance
  std::vector<std::vector<double>> means;
  std::vector<FormatSpec> formats;
  std::vector<std::vector<double>> directions;  // per-format nuisance direction
  ScorerParams base;
};

inline Family make_family(const TaskConfig& cfg) {
  std::mt19937_64 rng(cfg.family() * 0x9E3779B97F4A7C15ULL + 17);
  const std::size_t d = cfg.dim, L = cfg.labels;
  Family fam;
  fam.basis = random_basis(rng, d);
  // Means on scaled basis directions: pairwise distance == separation.
  const double r = cfg.separation / std::sqrt(2.0);
  for (std::size_t c = 0; c < L; ++c) {
    std::vector<double> mu(d);
    for (std::size_t k = 0; k < d; ++k) mu[k] = r * fam.basis[c][k];
    fam.means.push_back(std::move(mu));
  }
  // Hard formats are a seeded choice of format ids.
  std::vector<std::size_t> order(cfg.formats);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> hard(cfg.formats, false);
  for (std::size_t i = 0; i < cfg.hard_formats; ++i) hard[order[i]] = true;
  for (std::size_t v = 0; v < cfg.formats; ++v) {
    FormatSpec f;
    f.id = static_cast<int>(v);
    f.dim = d;
    f.map = near_identity_rotation(rng, d, cfg.rotation_scale);
    // Each format has its own nuisance direction carrying its offset and noise.
    auto dir = in_span(rng, fam.basis, L, d, d, 1.0);
    double nrm = 0.0;
    for (double x : dir) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (auto& x : dir) x /= nrm;
    std::normal_distribution<double> nd(0.0, 1.0);
    const double a = cfg.offset_scale * nd(rng);
    f.offset.resize(d);
    for (std::size_t k = 0; k < d; ++k) f.offset[k] = a * dir[k];
    f.noise_scale = hard[v] ? cfg.hard_noise : cfg.format_noise;
    fam.formats.push_back(std::move(f));
    fam.directions.push_back(std::move(dir));
  }
  // Base scorer: label rows point at their class mean plus a spurious
  // nuisance component; distractor rows are small and biased down.
  const std::size_t vocab = cfg.vocab();
  fam.base = ScorerParams::zeros(vocab, d);
  for (std::size_t c = 0; c < L; ++c) {
    auto spur = in_span(rng, fam.basis, L, d, d, cfg.prior_spurious / std::sqrt(static_cast<double>(std::max<std::size_t>(d - L, 1))));
    for (std::size_t k = 0; k < d; ++k) fam.base.weight[c * d + k] = cfg.prior_strength * fam.basis[c][k] + spur[k];
  }
  for (std::size_t t = L; t < vocab; ++t) {
    auto w = gaussian_vector(rng, d, 0.05);
    for (std::size_t k = 0; k < d; ++k) fam.base.weight[t * d + k] = w[k];
    fam.base.bias[t] = -1.0;
  }
  return fam;
}

}  // namespace detail

inline AnswerSpec make_answers(const TaskConfig& cfg) {
  AnswerSpec a;
  for (std::size_t c = 0; c < cfg.labels; ++c) {
    std::vector<std::size_t> toks{c};
    for (std::size_t t = 1; t < cfg.answer_length; ++t) toks.push_back(cfg.labels + (c + t) % cfg.distractors);
    a.tokens.push_back(std::move(toks));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitAssignment {
  std::vector<std::size_t> train, val, test;  // positions into the label list, ascending
};

/// Per-class proportional allocation (largest remainder) for test, then val,
/// then train; leftovers are unused.
inline SplitAssignment stratified_split(std::span<const std::size_t> labels, std::size_t num_labels,
                                        const SplitSizes& sizes, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (sizes.total() > n) {
    throw std::invalid_argument("stratified_split: requested " + std::to_string(sizes.total()) + " of " +
                                std::to_string(n) + " instances");
  }
  std::vector<std::vector<std::size_t>> pools(num_labels);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= num_labels) throw std::invalid_argument("stratified_split: label out of range");
    pools[labels[i]].push_back(i);
  }
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  std::vector<std::size_t> cursor(num_labels, 0);

  auto take = [&](std::size_t size) {
    std::vector<std::size_t> quota(num_labels, 0);
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < num_labels; ++c) {
      const double exact = static_cast<double>(size) * static_cast<double>(pools[c].size()) / static_cast<double>(n);
      quota[c] = std::min(static_cast<std::size_t>(std::floor(exact)), pools[c].size() - cursor[c]);
      assigned += quota[c];
      rema.push_back({exact - std::floor(exact), c});
    }
    std::stable_sort(rema.begin(), rema.end(), [](auto a, auto b) { return a.first > b.first; });
    for (std::size_t pass = 0; assigned < size && pass < 2 * num_labels + 2; ++pass) {
      for (auto [r, c] : rema) {
        if (assigned == size) break;
        if (cursor[c] + quota[c] < pools[c].size()) {
          ++quota[c];
          ++assigned;
        }
      }
    }
    if (assigned != size) throw std::invalid_argument("stratified_split: infeasible split sizes");
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < num_labels; ++c) {
      for (std::size_t k = 0; k < quota[c]; ++k) out.push_back(pools[c][cursor[c] + k]);
      cursor[c] += quota[c];
    }
    std::sort(out.begin(), out.end());
    return out;
  };

  SplitAssignment s;
  s.test = take(sizes.test);
  s.val = take(sizes.val);
  s.train = take(sizes.train);
  return s;
}

struct DedupReport {
  std::size_t dropped = 0;
  std::vector<std::size_t> dropped_ids;
};

/// Drops instances whose rendering under some format coincides (max-abs
/// difference <= tol) with an instance of an earlier split. Split order is
/// train < val < test.
inline DedupReport dedup_rendered(Dataset& ds, double tol = 1e-12) {
  auto rank = [](Split s) { return static_cast<int>(s); };
  const std::size_t V = ds.formats.size();
  std::vector<std::vector<std::vector<double>>> rend(ds.instances.size());
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    for (std::size_t v = 0; v < V; ++v) rend[i].push_back(ds.rendered(ds.instances[i], v));

  auto collide = [&](std::size_t a, std::size_t b) {
    for (std::size_t v = 0; v < V; ++v) {
      bool same = true;
      for (std::size_t k = 0; k < rend[a][v].size() && same; ++k)
        same = std::abs(rend[a][v][k] - rend[b][v][k]) <= tol;
      if (same) return true;
    }
    return false;
  };

  std::vector<bool> drop(ds.instances.size(), false);
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    const Split si = ds.instances[i].split;
    if (si == Split::Unused) continue;
    for (std::size_t j = 0; j < ds.instances.size() && !drop[i]; ++j) {
      const Split sj = ds.instances[j].split;
      if (j == i || drop[j] || sj == Split::Unused || rank(sj) >= rank(si)) continue;
      if (collide(i, j)) drop[i] = true;
    }
  }
  DedupReport rep;
  std::vector<Instance> kept;
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    if (drop[i]) {
      ++rep.dropped;
      rep.dropped_ids.push_back(ds.instances[i].id);
    } else {
      kept.push_back(std::move(ds.instances[i]));
    }
  }
  ds.instances = std::move(kept);
  return rep;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline Dataset generate(const TaskConfig& cfg) {
  cfg.validate();
  auto fam = detail::make_family(cfg);
  Dataset ds;
  ds.config = cfg;
  ds.formats = fam.formats;
  ds.answers = make_answers(cfg);
  ds.base = fam.base;
  ds.answers.validate(ds.base.vocab);

  std::mt19937_64 rng(cfg.seed * 0xD1B54A32D192ED03ULL + 101);
  const std::size_t d = cfg.dim, L = cfg.labels, V = cfg.formats;
  auto means = fam.means;
  if (cfg.task_shift > 0.0) {
    for (auto& mu : means) {
      auto s = detail::gaussian_vector(rng, d, cfg.task_shift);
      for (std::size_t k = 0; k < d; ++k) mu[k] += s[k];
    }
  }
  std::vector<std::size_t> labels(cfg.instances);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % L;
  std::shuffle(labels.begin(), labels.end(), rng);

  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.instances; ++i) {
    std::vector<double> x(d);
    for (std::size_t k = 0; k < d; ++k) x[k] = means[labels[i]][k] + nd(rng);
    std::vector<std::vector<double>> noise;
    for (std::size_t v = 0; v < V; ++v) {
      const double a = ds.formats[v].noise_scale * nd(rng);
      std::vector<double> n(d);
      for (std::size_t k = 0; k < d; ++k) n[k] = a * fam.directions[v][k];
      noise.push_back(std::move(n));
    }
    ds.instances.emplace_back(i, std::move(x), std::move(noise), labels[i]);
  }

  const auto assign = stratified_split(labels, L, cfg.splits, cfg.seed);
  for (auto i : assign.train) ds.instances[i].split = Split::Train;
  for (auto i : assign.val) ds.instances[i].split = Split::Val;
  for (auto i : assign.test) ds.instances[i].split = Split::Test;
  dedup_rendered(ds);
  return ds;
}

}  // namespace f2c

#endif  // F2C_SYNTHDATA_HPP
