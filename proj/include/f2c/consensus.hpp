#ifndef F2C_CONSENSUS_HPP
#define F2C_CONSENSUS_HPP

// Majority voting across prompt formats and the CC/NC split that decides
// which variations act as alignment targets.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "f2c/scorer.hpp"

namespace f2c {

enum class Case { NoMajority, UnanimousConfident, Split, Degenerate };

inline std::string_view to_string(Case c) {
  switch (c) {
    case Case::NoMajority: return "no_majority";
    case Case::UnanimousConfident: return "unanimous_confident";
    case Case::Split: return "split";
    case Case::Degenerate: return "degenerate";
  }
  return "unknown";
}

struct Hyperparams {
  double lambda_cce = 1.0;
  double tau_unanimous = 0.5;
  std::size_t k_max = 3;
  double f_min = 0.1;
  double f_max = 1.0;
  double temperature = 1.0;
  double beta_jsd = 0.5;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("hyperparameter " + field + " " + why);
    };
    if (!(lambda_cce >= 0.0)) fail("lambda_cce", "must be >= 0");
    if (!std::isfinite(tau_unanimous)) fail("tau_unanimous", "must be finite");
    if (k_max < 2) fail("k_max", "must be >= 2");
    if (!(f_min >= 0.0)) fail("f_min", "must be >= 0");
    if (!(f_max >= f_min)) fail("f_max", "must be >= f_min");
    if (!(temperature > 0.0)) fail("t", "must be > 0");
    if (!(beta_jsd >= 0.0)) fail("beta_jsd", "must be >= 0");
  }

  bool operator==(const Hyperparams&) const = default;
};

struct ConsensusOutcome {
  Case kind = Case::NoMajority;
  std::optional<std::size_t> c_star;
  std::vector<std::size_t> voters;  // G, ascending
  std::vector<std::size_t> cc;      // T, ordered by margin descending
  std::vector<std::size_t> nc;      // S, ascending
  std::vector<double> margins;      // indexed by variation; NaN outside G
  std::optional<double> median_margin;
  std::optional<double> delta;
  double w_flip = 0.0;
};

inline std::vector<std::size_t> vote_counts(std::span<const std::size_t> predictions, std::size_t num_labels) {
  std::vector<std::size_t> n(num_labels, 0);
  for (std::size_t v = 0; v < predictions.size(); ++v) {
    if (predictions[v] >= num_labels) {
      throw std::invalid_argument("vote_counts: variation " + std::to_string(v) + " predicts label " +
                                  std::to_string(predictions[v]) + " outside [0," + std::to_string(num_labels) + ")");
    }
    ++n[predictions[v]];
  }
  return n;
}

/// Strict-majority label (n_c > V/2), if any.
inline std::optional<std::size_t> consensus_label(std::span<const std::size_t> counts, std::size_t variations) {
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (2 * counts[c] > variations) return c;
  return std::nullopt;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double flip_weight(double delta, const Hyperparams& hp) {
  if (!(hp.temperature > 0.0)) throw std::invalid_argument("flip_weight: temperature must be > 0");
  return hp.f_min + (hp.f_max - hp.f_min) * sigmoid(delta / hp.temperature);
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Margin of the consensus label over the best competing label.
inline double confidence_margin(std::span<const double> ll_row, std::size_t c_star) {
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < ll_row.size(); ++c)
    if (c != c_star) best_other = std::max(best_other, ll_row[c]);
  return ll_row[c_star] - best_other;
}

/// Splits the variations of one instance into the consensus-confident set T
/// and the remainder S, given the strict-majority label and its voters G.
inline ConsensusOutcome split_cc_nc(const LLMatrix& ll, std::size_t c_star, std::span<const std::size_t> voters,
                                    const Hyperparams& hp) {
  const std::size_t V = ll.variations();
  if (c_star >= ll.labels()) throw std::invalid_argument("split_cc_nc: consensus label out of range");
  {
    const auto preds = predictions(ll);
    std::vector<std::size_t> expected;
    for (std::size_t v = 0; v < V; ++v)
      if (preds[v] == c_star) expected.push_back(v);
    std::vector<std::size_t> given(voters.begin(), voters.end());
    std::sort(given.begin(), given.end());
    if (given != expected) {
      throw std::invalid_argument("split_cc_nc: voter set does not match the variations predicting label " +
                                  std::to_string(c_star));
    }
  }

  ConsensusOutcome out;
  out.voters.assign(voters.begin(), voters.end());
  std::sort(out.voters.begin(), out.voters.end());
  out.margins.assign(V, std::numeric_limits<double>::quiet_NaN());
  const std::size_t g = out.voters.size();

  if (2 * g <= V) return out;  // no strict majority
  out.c_star = c_star;

  std::vector<double> ms;
  for (auto v : out.voters) {
    out.margins[v] = confidence_margin(ll.ll_row(v), c_star);
    ms.push_back(out.margins[v]);
  }
  out.median_margin = median(ms);

  if (g == V && *out.median_margin >= hp.tau_unanimous) {
    out.kind = Case::UnanimousConfident;
    out.cc = out.voters;
    return out;
  }

  const std::size_t k = std::min({hp.k_max, V - 1, g});
  if (g < 2 || k < 2) {
    out.kind = Case::Degenerate;
    return out;
  }

  std::vector<std::size_t> ranked = out.voters;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](std::size_t a, std::size_t b) { return out.margins[a] > out.margins[b]; });
  out.cc.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<bool> in_cc(V, false);
  for (auto t : out.cc) in_cc[t] = true;
  for (std::size_t v = 0; v < V; ++v)
    if (!in_cc[v]) out.nc.push_back(v);

  double mean_t = 0.0, mean_s = 0.0;
  for (auto t : out.cc) mean_t += ll.ll(t, c_star);
  for (auto s : out.nc) mean_s += ll.ll(s, c_star);
  mean_t /= static_cast<double>(out.cc.size());
  mean_s /= static_cast<double>(out.nc.size());
  out.delta = mean_t - mean_s;
  out.w_flip = flip_weight(*out.delta, hp);
  out.kind = Case::Split;
  return out;
}

/// Full pipeline for one instance: predictions, votes, majority, split.
inline ConsensusOutcome analyze(const LLMatrix& ll, const Hyperparams& hp) {
  const auto preds = predictions(ll);
  const auto counts = vote_counts(preds, ll.labels());
  const auto c_star = consensus_label(counts, ll.variations());
  if (!c_star) {
    ConsensusOutcome out;
    out.margins.assign(ll.variations(), std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  std::vector<std::size_t> voters;
  for (std::size_t v = 0; v < preds.size(); ++v)
    if (preds[v] == *c_star) voters.push_back(v);
  return split_cc_nc(ll, *c_star, voters, hp);
}

}  // namespace f2c

#endif  // F2C_CONSENSUS_HPP
