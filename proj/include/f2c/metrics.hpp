#ifndef F2C_METRICS_HPP
#define F2C_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "f2c/consensus.hpp"

namespace f2c {

/// Probability that two distinct, uniformly drawn variations agree.
inline double per_item_agreement(std::span<const std::size_t> counts, std::size_t variations) {
  if (variations < 2) throw std::invalid_argument("per_item_agreement: need at least two variations");
  std::size_t total = 0, pairs = 0;
  for (auto n : counts) {
    total += n;
    pairs += n * (n > 0 ? n - 1 : 0);
  }
  if (total != variations) {
    throw std::invalid_argument("per_item_agreement: counts sum to " + std::to_string(total) + ", expected " +
                                std::to_string(variations));
  }
  return static_cast<double>(pairs) / static_cast<double>(variations * (variations - 1));
}

inline double observed_agreement(const std::vector<std::vector<std::size_t>>& counts) {
  if (counts.empty()) throw std::invalid_argument("observed_agreement: no instances");
  double acc = 0.0;
  for (const auto& n : counts) {
    std::size_t v = 0;
    for (auto x : n) v += x;
    acc += per_item_agreement(n, v);
  }
  return acc / static_cast<double>(counts.size());
}

/// Unweighted mean of per-class F1 = 2TP / (2TP + FP + FN). Every class in
/// [0, L) is counted; a class with no gold and no predicted members scores 0.
inline double macro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> gold,
                       std::size_t num_labels) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("macro_f1: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(gold.size()) + " gold labels");
  }
  if (num_labels == 0) throw std::invalid_argument("macro_f1: no labels");
  std::vector<std::size_t> tp(num_labels, 0), fp(num_labels, 0), fn(num_labels, 0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] >= num_labels || gold[i] >= num_labels) throw std::invalid_argument("macro_f1: label out of range");
    if (predicted[i] == gold[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[gold[i]];
    }
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < num_labels; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) acc += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return acc / static_cast<double>(num_labels);
}

struct MetricsReport {
  std::vector<int> format_ids;
  std::vector<double> per_format_f1;
  double f1_mean = 0.0;
  double f1_std = 0.0;
  std::optional<double> p_o;  // undefined for a single format
  std::vector<double> per_item_p;
  double majority_accuracy = 0.0;
  double coverage = 0.0;
  std::size_t covered = 0;
  std::size_t instances = 0;
};

inline double population_std(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size()));
}

/// `predicted[v][i]` is format v's prediction for instance i.
inline MetricsReport summarize(const std::vector<std::vector<std::size_t>>& predicted,
                               std::span<const std::size_t> gold, std::size_t num_labels,
                               std::vector<int> format_ids = {}) {
  const std::size_t V = predicted.size();
  if (V == 0) throw std::invalid_argument("summarize: no formats");
  if (gold.empty()) throw std::invalid_argument("summarize: no instances");
  if (format_ids.empty())
    for (std::size_t v = 0; v < V; ++v) format_ids.push_back(static_cast<int>(v));
  if (format_ids.size() != V) throw std::invalid_argument("summarize: format id list does not match predictions");

  MetricsReport r;
  r.format_ids = std::move(format_ids);
  r.instances = gold.size();
  for (const auto& row : predicted) {
    if (row.size() != gold.size()) throw std::invalid_argument("summarize: prediction rows differ in length from gold");
    r.per_format_f1.push_back(macro_f1(row, gold, num_labels));
  }
  for (double f : r.per_format_f1) r.f1_mean += f;
  r.f1_mean /= static_cast<double>(V);
  r.f1_std = population_std(r.per_format_f1);

  std::size_t correct = 0;
  std::vector<std::size_t> preds(V);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (std::size_t v = 0; v < V; ++v) preds[v] = predicted[v][i];
    const auto n = vote_counts(preds, num_labels);
    if (V >= 2) r.per_item_p.push_back(per_item_agreement(n, V));
    if (auto c = consensus_label(n, V)) {
      ++r.covered;
      if (*c == gold[i]) ++correct;
    }
  }
  if (V >= 2) {
    double acc = 0.0;
    for (double p : r.per_item_p) acc += p;
    r.p_o = acc / static_cast<double>(r.per_item_p.size());
  }
  r.coverage = static_cast<double>(r.covered) / static_cast<double>(gold.size());
  r.majority_accuracy = r.covered ? static_cast<double>(correct) / static_cast<double>(r.covered) : 0.0;
  return r;
}

}  // namespace f2c

#endif  // F2C_METRICS_HPP
