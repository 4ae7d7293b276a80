#ifndef F2C_TESTS_GRADCHECK_HPP
#define F2C_TESTS_GRADCHECK_HPP

// Finite-difference checks of the training losses over scorer parameters.
// Flip and swarm hold their targets fixed (stop-gradient), so the probe
// function freezes those targets at the base point while the students move.

#include <string_view>
#include <vector>

#include "f2c/losses.hpp"

namespace f2c::testing {

enum class Term { Cce, Jsd, Flip, Total, Swarm };

inline std::string_view to_string(Term t) {
  switch (t) {
    case Term::Cce: return "cce";
    case Term::Jsd: return "jsd";
    case Term::Flip: return "flip";
    case Term::Total: return "f2c_total";
    case Term::Swarm: return "swarm";
  }
  return "?";
}

struct GradCase {
  ScorerParams params;
  std::vector<std::vector<double>> renderings;
  AnswerSpec answers;
  Hyperparams hp;
  ConsensusOutcome outcome;  // fixed at the base point
};

inline GradCase make_case(ScorerParams p, std::vector<std::vector<double>> r, AnswerSpec a, Hyperparams hp = {}) {
  GradCase c{std::move(p), std::move(r), std::move(a), hp, {}};
  c.outcome = analyze(build_ll_matrix(c.params, 0, c.renderings, c.answers).ll, hp);
  return c;
}

inline std::vector<double> flatten(const ScorerParams& p) {
  auto x = p.weight;
  x.insert(x.end(), p.bias.begin(), p.bias.end());
  return x;
}

inline Var swarm_of(Tape& t, const InstanceGraph& g) {
  std::vector<std::vector<Var>> d;
  for (std::size_t v = 0; v < g.variations(); ++v) d.push_back(g.logq[v][0]);
  return swarm_loss(t, d);
}

/// The loss as the trainer differentiates it.
inline Var term_on_tape(Tape& t, const InstanceGraph& g, const GradCase& c, Term term) {
  switch (term) {
    case Term::Cce: return cce_loss(t, g, c.outcome, c.hp);
    case Term::Jsd: return jsd_loss(t, g, c.outcome, c.hp);
    case Term::Flip: return flip_kl_loss(t, g, c.outcome, c.hp);
    case Term::Total: return f2c_total(t, g, c.outcome, c.hp).total;
    case Term::Swarm: return swarm_of(t, g);
  }
  return scalar_constant(t, 0.0);
}

/// Tape gradient w.r.t. [weight, bias] at the base point.
inline std::vector<double> tape_gradient(const GradCase& c, Term term) {
  Tape t;
  const auto pv = param_leaves(t, c.params);
  const auto g = score_graph(t, pv, c.renderings, c.answers);
  const auto grads = t.backward(term_on_tape(t, g, c, term));
  auto out = grads[pv.weight];
  const auto gb = grads[pv.bias];
  out.insert(out.end(), gb.begin(), gb.end());
  return out;
}

/// Loss value at parameters `x` with detached targets frozen at the base point.
inline double frozen_value(const GradCase& c, Term term, const std::vector<double>& x) {
  const std::size_t nw = c.params.weight.size();
  Tape t;
  ParamVars moving{t.constant(Tensor::matrix(c.params.vocab, c.params.dim, {x.begin(), x.begin() + nw})),
                   t.constant(Tensor::vector({x.begin() + nw, x.end()}))};
  const auto student = score_graph(t, moving, c.renderings, c.answers);
  const auto base = score_graph(t, param_leaves(t, c.params, false), c.renderings, c.answers);
  // CC members from the base point, everything else moving.
  InstanceGraph hybrid = student;
  for (auto v : c.outcome.cc) hybrid.logq[v] = base.logq[v];
  switch (term) {
    case Term::Flip: return flip_kl_loss(t, hybrid, c.outcome, c.hp).item();
    case Term::Total: {
      double total = 0.0;
      if (c.outcome.kind == Case::NoMajority || c.outcome.kind == Case::Degenerate) return 0.0;
      total += cce_loss(t, student, c.outcome, c.hp).item();
      total += jsd_loss(t, student, c.outcome, c.hp).item();
      if (c.outcome.kind == Case::Split) total += flip_kl_loss(t, hybrid, c.outcome, c.hp).item();
      return total;
    }
    case Term::Swarm: {
      const std::size_t V = student.variations();
      if (V < 2) return 0.0;
      double acc = 0.0;
      std::size_t pairs = 0;
      for (std::size_t u = 0; u < V; ++u) {
        for (std::size_t v = 0; v < V; ++v) {
          if (u == v) continue;
          const std::size_t positions = student.logq[v][0].size();
          double per = 0.0;
          for (std::size_t pos = 0; pos < positions; ++pos) {
            std::vector<double> q;
            for (double lq : base.logq[u][0][pos].value().values()) q.push_back(std::exp(lq));
            per += kl_from_constant(t, q, student.logq[v][0][pos]).item();
          }
          acc += per / static_cast<double>(positions);
          ++pairs;
        }
      }
      return acc / static_cast<double>(pairs);
    }
    default: return term_on_tape(t, student, c, term).item();
  }
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t worst = 0;
  std::vector<double> analytic, numeric;
};

inline FdResult finite_difference_check(const GradCase& c, Term term, double step = 1e-5, double floor = 1e-6) {
  FdResult r;
  r.analytic = tape_gradient(c, term);
  auto x = flatten(c.params);
  r.numeric.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = frozen_value(c, term, x);
    x[i] = orig - step;
    const double fm = frozen_value(c, term, x);
    x[i] = orig;
    r.numeric[i] = (fp - fm) / (2.0 * step);
    const double e = relative_error(r.analytic[i], r.numeric[i], floor);
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst = i;
    }
  }
  return r;
}

}  // namespace f2c::testing

#endif  // F2C_TESTS_GRADCHECK_HPP
