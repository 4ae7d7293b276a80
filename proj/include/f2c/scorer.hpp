#ifndef F2C_SCORER_HPP
#define F2C_SCORER_HPP

// Linear prompt-conditioned scorer: rendered features -> vocabulary logits.
// Label scores are length-normalized answer log-likelihoods.

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "f2c/numerics.hpp"

namespace f2c {

/// One prompt format: a fixed affine map over instance features.
struct FormatSpec {
  int id = 0;
  std::size_t dim = 0;
  std::vector<double> map;     // dim x dim, row-major
  std::vector<double> offset;  // dim
  double noise_scale = 0.0;    // used once, when the dataset is generated

  void validate() const {
    if (map.size() != dim * dim || offset.size() != dim) {
      throw std::invalid_argument("format " + std::to_string(id) + ": render map is " + std::to_string(map.size()) +
                                  " entries, offset " + std::to_string(offset.size()) + ", expected dim " +
                                  std::to_string(dim));
    }
    if (noise_scale < 0.0) throw std::invalid_argument("format " + std::to_string(id) + ": negative noise_scale");
  }
};

/// x -> map * x + offset
inline std::vector<double> render(std::span<const double> features, const FormatSpec& fmt) {
  if (features.size() != fmt.dim || fmt.map.size() != fmt.dim * fmt.dim || fmt.offset.size() != fmt.dim) {
    throw std::invalid_argument("render: feature dimension " + std::to_string(features.size()) +
                                " does not match format " + std::to_string(fmt.id) + " dimension " +
                                std::to_string(fmt.dim));
  }
  std::vector<double> out(fmt.dim);
  for (std::size_t r = 0; r < fmt.dim; ++r) {
    double acc = fmt.offset[r];
    for (std::size_t c = 0; c < fmt.dim; ++c) acc += fmt.map[r * fmt.dim + c] * features[c];
    out[r] = acc;
  }
  return out;
}

struct ScorerParams {
  std::size_t vocab = 0;
  std::size_t dim = 0;
  std::vector<double> weight;  // vocab x dim, row-major
  std::vector<double> bias;    // vocab

  static ScorerParams zeros(std::size_t vocab, std::size_t dim) {
    return {vocab, dim, std::vector<double>(vocab * dim, 0.0), std::vector<double>(vocab, 0.0)};
  }

  std::size_t num_values() const { return weight.size() + bias.size(); }

  void validate(std::size_t num_labels = 0) const {
    if (weight.size() != vocab * dim || bias.size() != vocab) {
      throw std::invalid_argument("scorer params: weight has " + std::to_string(weight.size()) + " entries, bias " +
                                  std::to_string(bias.size()) + ", expected vocab " + std::to_string(vocab) +
                                  " x dim " + std::to_string(dim));
    }
    if (vocab < num_labels) throw std::invalid_argument("scorer params: vocabulary smaller than label count");
    for (double w : weight)
      if (!std::isfinite(w)) throw std::invalid_argument("scorer params: non-finite weight");
    for (double b : bias)
      if (!std::isfinite(b)) throw std::invalid_argument("scorer params: non-finite bias");
  }

  std::vector<double> logits(std::span<const double> x) const {
    if (x.size() != dim) {
      throw std::invalid_argument("scorer: input dimension " + std::to_string(x.size()) + " != " +
                                  std::to_string(dim));
    }
    std::vector<double> out(vocab);
    for (std::size_t r = 0; r < vocab; ++r) {
      double acc = bias[r];
      for (std::size_t c = 0; c < dim; ++c) acc += weight[r * dim + c] * x[c];
      out[r] = acc;
    }
    return out;
  }

  bool operator==(const ScorerParams&) const = default;
};

/// Token sequence for every label.
struct AnswerSpec {
  std::vector<std::vector<std::size_t>> tokens;

  std::size_t num_labels() const { return tokens.size(); }

  void validate(std::size_t vocab) const {
    std::set<std::vector<std::size_t>> seen;
    for (std::size_t c = 0; c < tokens.size(); ++c) {
      if (tokens[c].empty()) throw std::invalid_argument("answer for label " + std::to_string(c) + " is empty");
      for (auto tok : tokens[c]) {
        if (tok >= vocab) {
          throw std::invalid_argument("answer for label " + std::to_string(c) + " uses token " + std::to_string(tok) +
                                      " outside vocabulary of " + std::to_string(vocab));
        }
      }
      if (!seen.insert(tokens[c]).second) {
        throw std::invalid_argument("answer for label " + std::to_string(c) + " duplicates another label");
      }
    }
  }

  /// One token per label: label c -> token c.
  static AnswerSpec single_token(std::size_t num_labels) {
    AnswerSpec a;
    for (std::size_t c = 0; c < num_labels; ++c) a.tokens.push_back({c});
    return a;
  }
};

struct AnswerScore {
  double ll = 0.0;
  std::vector<std::vector<double>> positions;  // log-softmax over vocab per answer position
};

/// Mean log-probability of the answer tokens. The scorer does not condition
/// on earlier answer tokens, so every position shares one distribution.
inline AnswerScore score_answer(const ScorerParams& params, std::span<const double> rendered,
                                std::span<const std::size_t> answer) {
  if (answer.empty()) throw std::invalid_argument("score_answer: empty answer sequence");
  for (auto tok : answer) {
    if (tok >= params.vocab) throw std::invalid_argument("score_answer: token " + std::to_string(tok) + " out of range");
  }
  const auto logp = log_softmax_values(params.logits(rendered));
  AnswerScore s;
  double acc = 0.0;
  for (auto tok : answer) {
    acc += logp[tok];
    s.positions.push_back(logp);
  }
  s.ll = acc / static_cast<double>(answer.size());
  return s;
}

/// V x L matrix of label log-likelihoods, with per-row softmax.
class LLMatrix {
 public:
  LLMatrix() = default;
  LLMatrix(std::size_t instance_id, std::size_t variations, std::size_t labels, std::vector<double> ll)
      : id_(instance_id), v_(variations), l_(labels), ll_(std::move(ll)) {
    if (ll_.size() != v_ * l_) throw std::invalid_argument("LLMatrix: expected V*L entries");
    pi_.resize(ll_.size());
    for (std::size_t v = 0; v < v_; ++v) {
      auto row = log_softmax_values(std::span<const double>(ll_).subspan(v * l_, l_));
      for (std::size_t c = 0; c < l_; ++c) pi_[v * l_ + c] = std::exp(row[c]);
    }
  }

  std::size_t instance_id() const { return id_; }
  std::size_t variations() const { return v_; }
  std::size_t labels() const { return l_; }
  double ll(std::size_t v, std::size_t c) const { return ll_[v * l_ + c]; }
  double pi(std::size_t v, std::size_t c) const { return pi_[v * l_ + c]; }
  std::span<const double> ll_row(std::size_t v) const { return std::span<const double>(ll_).subspan(v * l_, l_); }
  std::span<const double> pi_row(std::size_t v) const { return std::span<const double>(pi_).subspan(v * l_, l_); }
  const std::vector<double>& ll_values() const { return ll_; }

 private:
  std::size_t id_ = 0, v_ = 0, l_ = 0;
  std::vector<double> ll_, pi_;
};

/// Per variation, per label, per answer position: log-distribution over vocab.
struct AnswerDistributionSet {
  std::size_t instance_id = 0;
  std::vector<std::vector<std::vector<std::vector<double>>>> logq;  // [v][c][t][vocab]

  const std::vector<std::vector<double>>& positions(std::size_t v, std::size_t label) const {
    return logq.at(v).at(label);
  }
};

/// Argmax with ties to the lowest index.
inline std::size_t predict(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

struct ScoredInstance {
  LLMatrix ll;
  AnswerDistributionSet dists;
};

/// Scores one instance under every supplied rendering.
inline ScoredInstance build_ll_matrix(const ScorerParams& params, std::size_t instance_id,
                                      const std::vector<std::vector<double>>& renderings, const AnswerSpec& answers) {
  const std::size_t V = renderings.size(), L = answers.num_labels();
  if (V < 1) throw std::invalid_argument("build_ll_matrix: need at least one variation");
  if (L < 2) throw std::invalid_argument("build_ll_matrix: need at least two labels");
  std::vector<double> ll(V * L);
  AnswerDistributionSet dists{instance_id, {}};
  dists.logq.resize(V);
  for (std::size_t v = 0; v < V; ++v) {
    dists.logq[v].resize(L);
    for (std::size_t c = 0; c < L; ++c) {
      auto s = score_answer(params, renderings[v], answers.tokens[c]);
      ll[v * L + c] = s.ll;
      dists.logq[v][c] = std::move(s.positions);
    }
  }
  return {LLMatrix(instance_id, V, L, std::move(ll)), std::move(dists)};
}

inline std::vector<std::size_t> predictions(const LLMatrix& m) {
  std::vector<std::size_t> out(m.variations());
  for (std::size_t v = 0; v < m.variations(); ++v) out[v] = predict(m.pi_row(v));
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable scoring
// ---------------------------------------------------------------------------

struct ParamVars {
  Var weight;  // [vocab, dim]
  Var bias;    // [vocab]
};

inline ParamVars param_leaves(Tape& tape, const ScorerParams& p, bool requires_grad = true) {
  return {tape.leaf(Tensor::matrix(p.vocab, p.dim, p.weight, requires_grad)),
          tape.leaf(Tensor::vector(p.bias, requires_grad))};
}

/// Tape view of one scored instance.
struct InstanceGraph {
  std::vector<std::vector<Var>> ll;                 // [v][c] scalar
  std::vector<std::vector<std::vector<Var>>> logq;  // [v][c][t] vocab log-distribution

  std::size_t variations() const { return ll.size(); }
  std::size_t labels() const { return ll.empty() ? 0 : ll[0].size(); }

  std::vector<double> ll_values() const {
    std::vector<double> out;
    for (const auto& row : ll)
      for (Var x : row) out.push_back(x.item());
    return out;
  }
};

inline InstanceGraph score_graph(Tape& tape, const ParamVars& params,
                                 const std::vector<std::vector<double>>& renderings, const AnswerSpec& answers) {
  InstanceGraph g;
  for (const auto& x : renderings) {
    Var input = tape.constant(Tensor::vector(x));
    Var logp = log_softmax(add(matvec(params.weight, input), params.bias));
    std::vector<Var> ll_row;
    std::vector<std::vector<Var>> pos_row;
    for (const auto& answer : answers.tokens) {
      if (answer.empty()) throw std::invalid_argument("score_graph: empty answer sequence");
      std::vector<Var> picked;
      for (auto tok : answer) picked.push_back(gather(logp, tok));
      Var total = add_all(picked);
      ll_row.push_back(scale(total, 1.0 / static_cast<double>(answer.size())));
      pos_row.emplace_back(answer.size(), logp);
    }
    g.ll.push_back(std::move(ll_row));
    g.logq.push_back(std::move(pos_row));
  }
  return g;
}

/// Wraps plain distributions as constants so value-level callers can reuse
/// the tape-based losses.
inline InstanceGraph constant_graph(Tape& tape, const LLMatrix& ll, const AnswerDistributionSet& dists) {
  InstanceGraph g;
  g.ll.resize(ll.variations());
  g.logq.resize(ll.variations());
  for (std::size_t v = 0; v < ll.variations(); ++v) {
    for (std::size_t c = 0; c < ll.labels(); ++c) {
      g.ll[v].push_back(scalar_constant(tape, ll.ll(v, c)));
      std::vector<Var> pos;
      for (const auto& p : dists.positions(v, c)) pos.push_back(tape.constant(Tensor::vector(p)));
      g.logq[v].push_back(std::move(pos));
    }
  }
  return g;
}

}  // namespace f2c

#endif  // F2C_SCORER_HPP
