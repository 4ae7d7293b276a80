#ifndef F2C_LOSSES_HPP
#define F2C_LOSSES_HPP

// Consensus cross-entropy, CC-set Jensen-Shannon agreement, NC->CC flip KL,
// their case-wise total, the swarm-distillation baseline, and the
// mixture-teacher KL decomposition.
//
// Divergences act per answer position and are averaged over positions. Teacher
// sides (the CC mixture, swarm teachers) are detached from the tape.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "f2c/consensus.hpp"
#include "f2c/numerics.hpp"
#include "f2c/scorer.hpp"

namespace f2c {

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kNormTolerance = 1e-9;

struct LossBreakdown {
  double cce = 0.0;
  double jsd = 0.0;
  double flip = 0.0;
  double total = 0.0;
  Case kind = Case::NoMajority;
  std::vector<double> nlls;  // per-variation NLL of the consensus answer
  bool jsd_undersized = false;
};

// ---------------------------------------------------------------------------
// Plain-value divergences
// ---------------------------------------------------------------------------

inline void require_distribution(std::span<const double> p, const char* what) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": negative or non-finite entry");
    s += x;
  }
  if (std::abs(s - 1.0) > kNormTolerance) {
    throw std::invalid_argument(std::string(what) + ": entries sum to " + std::to_string(s) + ", not 1");
  }
}

/// KL(p || q) with the floor applied inside the logarithms.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i] * (std::log(std::max(p[i], kLogFloor)) - std::log(std::max(q[i], kLogFloor)));
  }
  return acc;
}

/// Mean KL of each distribution to their uniform mixture.
inline double generalized_jsd(const std::vector<std::vector<double>>& dists) {
  if (dists.size() < 2) throw std::invalid_argument("generalized_jsd: need at least two distributions");
  const std::size_t n = dists[0].size();
  std::vector<double> mix(n, 0.0);
  for (const auto& d : dists) {
    if (d.size() != n) throw std::invalid_argument("generalized_jsd: size mismatch");
    require_distribution(d, "generalized_jsd");
    for (std::size_t i = 0; i < n; ++i) mix[i] += d[i];
  }
  for (auto& m : mix) m /= static_cast<double>(dists.size());
  double acc = 0.0;
  for (const auto& d : dists) acc += kl_divergence(d, mix);
  return acc / static_cast<double>(dists.size());
}

struct DecompositionCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
};

/// Both sides of  sum_i w_i KL(q_i||p) = KL(qbar||p) + sum_i w_i KL(q_i||qbar).
inline DecompositionCheck mixture_decomposition_check(const std::vector<std::vector<double>>& qs,
                                                      std::span<const double> weights, std::span<const double> p) {
  if (qs.empty() || qs.size() != weights.size()) {
    throw std::invalid_argument("mixture_decomposition_check: need one weight per teacher");
  }
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("mixture_decomposition_check: negative weight");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > kNormTolerance) {
    throw std::invalid_argument("mixture_decomposition_check: weights sum to " + std::to_string(wsum));
  }
  require_distribution(p, "mixture_decomposition_check student");
  std::vector<double> qbar(p.size(), 0.0);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    if (qs[i].size() != p.size()) throw std::invalid_argument("mixture_decomposition_check: size mismatch");
    require_distribution(qs[i], "mixture_decomposition_check teacher");
    for (std::size_t y = 0; y < p.size(); ++y) qbar[y] += weights[i] * qs[i][y];
  }
  DecompositionCheck out;
  double spread = 0.0;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    out.lhs += weights[i] * kl_divergence(qs[i], p);
    spread += weights[i] * kl_divergence(qs[i], qbar);
  }
  out.rhs = kl_divergence(qbar, p) + spread;
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

// ---------------------------------------------------------------------------
// Tape divergences
// ---------------------------------------------------------------------------

/// KL(q || p) for a constant teacher q and a student given as log-probs.
inline Var kl_from_constant(Tape& tape, std::span<const double> q, Var student_logp) {
  if (q.size() != student_logp.size()) throw std::invalid_argument("kl_from_constant: size mismatch");
  std::vector<double> qv(q.begin(), q.end());
  std::vector<double> logq(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) logq[i] = q[i] > 0.0 ? std::log(std::max(q[i], kLogFloor)) : 0.0;
  Var qc = tape.constant(Tensor::vector(std::move(qv)));
  Var lq = tape.constant(Tensor::vector(std::move(logq)));
  return sum(mul(qc, sub(lq, student_logp)));
}

/// KL(exp(logq) || target) where the target is a probability vector on the
/// tape; the target log is floored.
inline Var kl_to_target(Var logq, Var target) {
  Var q = exp(logq);
  return sum(mul(q, sub(logq, log(clamp_min(target, kLogFloor)))));
}

inline Var generalized_jsd(std::span<const Var> logqs) {
  if (logqs.size() < 2) throw std::invalid_argument("generalized_jsd: need at least two distributions");
  std::vector<Var> qs;
  for (Var lq : logqs) qs.push_back(exp(lq));
  Var mix = scale(add_all(qs), 1.0 / static_cast<double>(qs.size()));
  Var logmix = log(clamp_min(mix, kLogFloor));
  std::vector<Var> kls;
  for (std::size_t k = 0; k < qs.size(); ++k) kls.push_back(sum(mul(qs[k], sub(logqs[k], logmix))));
  return scale(add_all(kls), 1.0 / static_cast<double>(kls.size()));
}

// ---------------------------------------------------------------------------
// F2C terms
// ---------------------------------------------------------------------------

/// lambda * mean_v NLL_v when a strict majority exists, else 0.
inline double cce_loss(std::span<const double> nlls, const ConsensusOutcome& outcome, const Hyperparams& hp) {
  if (!outcome.c_star || nlls.empty()) return 0.0;
  double acc = 0.0;
  for (double l : nlls) acc += l;
  return hp.lambda_cce * acc / static_cast<double>(nlls.size());
}

inline Var cce_loss(Tape& tape, const InstanceGraph& g, const ConsensusOutcome& outcome, const Hyperparams& hp) {
  if (!outcome.c_star) return scalar_constant(tape, 0.0);
  std::vector<Var> ll;
  for (std::size_t v = 0; v < g.variations(); ++v) ll.push_back(g.ll[v][*outcome.c_star]);
  return scale(add_all(ll), -hp.lambda_cce / static_cast<double>(ll.size()));
}

/// beta * position-averaged JSD over the CC set's consensus-answer
/// distributions. Sets `undersized` and returns 0 when |T| < 2.
inline Var jsd_loss(Tape& tape, const InstanceGraph& g, const ConsensusOutcome& outcome, const Hyperparams& hp,
                    bool* undersized = nullptr) {
  if (undersized) *undersized = false;
  if (!outcome.c_star || outcome.cc.size() < 2) {
    if (undersized && outcome.c_star) *undersized = true;
    return scalar_constant(tape, 0.0);
  }
  if (hp.beta_jsd == 0.0) return scalar_constant(tape, 0.0);
  const std::size_t c = *outcome.c_star;
  const std::size_t positions = g.logq[outcome.cc[0]][c].size();
  std::vector<Var> per_pos;
  for (std::size_t t = 0; t < positions; ++t) {
    std::vector<Var> members;
    for (auto v : outcome.cc) members.push_back(g.logq[v][c][t]);
    per_pos.push_back(generalized_jsd(members));
  }
  return scale(add_all(per_pos), hp.beta_jsd / static_cast<double>(positions));
}

/// w_flip * mean over S of KL(q_s || CC mixture); the mixture is a constant.
inline Var flip_kl_loss(Tape& tape, const InstanceGraph& g, const ConsensusOutcome& outcome, const Hyperparams&) {
  if (outcome.kind != Case::Split || outcome.nc.empty() || outcome.w_flip == 0.0) return scalar_constant(tape, 0.0);
  const std::size_t c = *outcome.c_star;
  const std::size_t positions = g.logq[outcome.cc[0]][c].size();
  std::vector<Var> per_pos;
  for (std::size_t t = 0; t < positions; ++t) {
    const std::size_t n = g.logq[outcome.cc[0]][c][t].size();
    std::vector<double> mix(n, 0.0);
    for (auto v : outcome.cc) {
      const auto& lq = g.logq[v][c][t].value().values();
      for (std::size_t i = 0; i < n; ++i) mix[i] += std::exp(lq[i]);
    }
    for (auto& m : mix) m /= static_cast<double>(outcome.cc.size());
    Var target = tape.constant(Tensor::vector(std::move(mix)));
    std::vector<Var> kls;
    for (auto s : outcome.nc) kls.push_back(kl_to_target(g.logq[s][c][t], target));
    per_pos.push_back(scale(add_all(kls), 1.0 / static_cast<double>(kls.size())));
  }
  return scale(add_all(per_pos), outcome.w_flip / static_cast<double>(positions));
}

struct LossTerms {
  Var total;
  LossBreakdown breakdown;
};

/// Case-wise total: 0 without a usable consensus, CCE + JSD when unanimous and
/// confident, CCE + JSD + flip on a split.
inline LossTerms f2c_total(Tape& tape, const InstanceGraph& g, const ConsensusOutcome& outcome,
                           const Hyperparams& hp) {
  LossTerms out{scalar_constant(tape, 0.0), {}};
  out.breakdown.kind = outcome.kind;
  if (outcome.c_star) {
    for (std::size_t v = 0; v < g.variations(); ++v) out.breakdown.nlls.push_back(-g.ll[v][*outcome.c_star].item());
  }
  if (outcome.kind == Case::NoMajority || outcome.kind == Case::Degenerate) return out;

  Var cce = cce_loss(tape, g, outcome, hp);
  bool undersized = false;
  Var jsd = jsd_loss(tape, g, outcome, hp, &undersized);
  std::vector<Var> parts{cce, jsd};
  out.breakdown.cce = cce.item();
  out.breakdown.jsd = jsd.item();
  out.breakdown.jsd_undersized = undersized;
  if (outcome.kind == Case::Split) {
    Var flip = flip_kl_loss(tape, g, outcome, hp);
    out.breakdown.flip = flip.item();
    parts.push_back(flip);
  }
  out.total = add_all(parts);
  out.breakdown.total = out.total.item();
  return out;
}

inline LossBreakdown f2c_total(const ScoredInstance& inst, const ConsensusOutcome& outcome, const Hyperparams& hp) {
  Tape tape;
  auto g = constant_graph(tape, inst.ll, inst.dists);
  return f2c_total(tape, g, outcome, hp).breakdown;
}

/// Mean over ordered pairs (u, v), u != v, of KL(teacher q_u || student q_v),
/// teacher detached. `dists[v]` lists the answer-position log-distributions.
inline Var swarm_loss(Tape& tape, const std::vector<std::vector<Var>>& dists) {
  const std::size_t V = dists.size();
  if (V < 2) return scalar_constant(tape, 0.0);
  const std::size_t positions = dists[0].size();
  std::vector<Var> terms;
  for (std::size_t u = 0; u < V; ++u) {
    for (std::size_t v = 0; v < V; ++v) {
      if (u == v) continue;
      std::vector<Var> per_pos;
      for (std::size_t t = 0; t < positions; ++t) {
        const auto& lq = dists[u][t].value().values();
        std::vector<double> q(lq.size());
        for (std::size_t i = 0; i < lq.size(); ++i) q[i] = std::exp(lq[i]);
        per_pos.push_back(kl_from_constant(tape, q, dists[v][t]));
      }
      terms.push_back(scale(add_all(per_pos), 1.0 / static_cast<double>(positions)));
    }
  }
  return scale(add_all(terms), 1.0 / static_cast<double>(terms.size()));
}

/// Value-level swarm loss over `dists[v][t][vocab]` log-distributions.
inline double swarm_loss(const std::vector<std::vector<std::vector<double>>>& dists) {
  Tape tape;
  std::vector<std::vector<Var>> vars;
  for (const auto& per_v : dists) {
    std::vector<Var> row;
    for (const auto& p : per_v) row.push_back(tape.constant(Tensor::vector(p)));
    vars.push_back(std::move(row));
  }
  return swarm_loss(tape, vars).item();
}

}  // namespace f2c

#endif  // F2C_LOSSES_HPP
