#ifndef F2C_TRAINER_HPP
#define F2C_TRAINER_HPP

// Gradient descent on the unsupervised objectives, checkpoint selection, and
// the study harnesses (method comparison, cross-task transfer, held-out
// formats).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "f2c/consensus.hpp"
#include "f2c/losses.hpp"
#include "f2c/metrics.hpp"
#include "f2c/scorer.hpp"
#include "f2c/synthdata.hpp"

namespace f2c {

enum class Method { Base, Swarm, Cce, F2C };

inline constexpr std::array<std::string_view, 4> kMethodNames{"base", "swarm", "cce", "f2c"};

inline std::string_view to_string(Method m) { return kMethodNames[static_cast<std::size_t>(m)]; }

inline Method method_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i)
    if (kMethodNames[i] == s) return static_cast<Method>(i);
  throw std::invalid_argument("unknown method '" + std::string(s) + "' (valid: base, swarm, cce, f2c)");
}

/// Raised when the objective stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainConfig {
  Method method = Method::F2C;
  Hyperparams hp;
  double learning_rate = 0.05;
  std::size_t steps = 500;
  std::size_t batch_size = 0;  // 0: full batch
  std::size_t eval_interval = 25;
  std::uint64_t seed = 1;
  std::vector<std::size_t> train_formats;  // empty: all formats
  std::vector<std::size_t> eval_formats;   // empty: train_formats

  void validate() const {
    hp.validate();
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config field 'learning_rate' must be > 0");
    if (eval_interval == 0) throw std::invalid_argument("train config field 'eval_interval' must be > 0");
  }

  /// Hyperparameters the method actually optimizes with: the CCE-only
  /// variant switches off the agreement and flip terms.
  Hyperparams effective_hp() const {
    Hyperparams h = hp;
    if (method == Method::Cce) {
      h.beta_jsd = 0.0;
      h.f_min = 0.0;
      h.f_max = 0.0;
    }
    return h;
  }
};

struct Checkpoint {
  ScorerParams params;
  std::size_t step = 0;
  MetricsReport val;
};

struct StepDiagnostics {
  std::size_t step = 0;
  double objective = 0.0;
  double cce = 0.0, jsd = 0.0, flip = 0.0;
  std::array<std::size_t, 4> cases{};  // indexed by Case
  std::size_t skipped = 0;             // zero-loss instances
  std::size_t batch = 0;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<StepDiagnostics> diagnostics;
};

inline std::vector<std::size_t> all_formats(const Dataset& ds) {
  std::vector<std::size_t> f(ds.formats.size());
  std::iota(f.begin(), f.end(), 0);
  return f;
}

/// Per-format predictions then the full metric suite on one split.
inline MetricsReport evaluate(const ScorerParams& params, const Dataset& ds, Split split,
                              std::vector<std::size_t> formats = {}) {
  if (formats.empty()) formats = all_formats(ds);
  for (auto f : formats)
    if (f >= ds.formats.size()) throw std::invalid_argument("evaluate: format " + std::to_string(f) + " out of range");
  const auto idx = ds.indices(split);
  if (idx.empty()) throw std::invalid_argument("evaluate: split '" + std::string(to_string(split)) + "' is empty");
  std::vector<std::vector<std::size_t>> preds(formats.size());
  std::vector<std::size_t> gold;
  for (auto i : idx) {
    const auto& inst = ds.instances[i];
    const auto scored = build_ll_matrix(params, inst.id, ds.renderings(inst, formats), ds.answers);
    const auto p = predictions(scored.ll);
    for (std::size_t v = 0; v < formats.size(); ++v) preds[v].push_back(p[v]);
    gold.push_back(inst.gold());
  }
  std::vector<int> ids;
  for (auto f : formats) ids.push_back(static_cast<int>(f));
  return summarize(preds, gold, ds.num_labels(), ids);
}

struct InstanceStep {
  double loss = 0.0;
  LossBreakdown breakdown;
  std::vector<double> grad_weight, grad_bias;
  bool has_grad = false;
};

/// Loss and parameter gradient of one instance under the given method.
inline InstanceStep instance_step(const ScorerParams& params, const std::vector<std::vector<double>>& renderings,
                                  const AnswerSpec& answers, Method method, const Hyperparams& hp) {
  InstanceStep out;
  if (method == Method::Base) return out;
  Tape tape;
  auto pv = param_leaves(tape, params);
  auto g = score_graph(tape, pv, renderings, answers);
  Var loss = scalar_constant(tape, 0.0);
  if (method == Method::Swarm) {
    std::vector<std::vector<Var>> dists;
    for (std::size_t v = 0; v < g.variations(); ++v) dists.push_back(g.logq[v][0]);
    loss = swarm_loss(tape, dists);
    out.breakdown.total = loss.item();
  } else {
    const LLMatrix ll(0, g.variations(), g.labels(), g.ll_values());
    const auto outcome = analyze(ll, hp);
    auto terms = f2c_total(tape, g, outcome, hp);
    loss = terms.total;
    out.breakdown = std::move(terms.breakdown);
  }
  out.loss = loss.item();
  if (!std::isfinite(out.loss)) return out;
  if (tape.requires_grad(loss.id)) {
    auto grads = tape.backward(loss);
    out.grad_weight = grads[pv.weight];
    out.grad_bias = grads[pv.bias];
    out.has_grad = true;
  }
  return out;
}

inline bool is_skip(Case c) { return c == Case::NoMajority || c == Case::Degenerate; }

/// Gradient descent over the train split. Gold labels are read only by the
/// validation evaluations between steps, never by the objective.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  const Hyperparams hp = cfg.effective_hp();
  const auto train_formats = cfg.train_formats.empty() ? all_formats(ds) : cfg.train_formats;
  const auto eval_formats = cfg.eval_formats.empty() ? train_formats : cfg.eval_formats;
  for (auto f : train_formats)
    if (f >= ds.formats.size()) throw std::invalid_argument("train: format " + std::to_string(f) + " out of range");
  const auto train_idx = ds.indices(Split::Train);
  if (train_idx.empty()) throw std::invalid_argument("train: dataset has no train split");
  if (ds.indices(Split::Val).empty()) throw std::invalid_argument("train: dataset has no validation split");

  std::vector<std::vector<std::vector<double>>> rendered;
  rendered.reserve(train_idx.size());
  for (auto i : train_idx) rendered.push_back(ds.renderings(ds.instances[i], train_formats));

  TrainResult result;
  ScorerParams params = ds.base;
  result.checkpoints.push_back({params, 0, evaluate(params, ds, Split::Val, eval_formats)});
  if (cfg.method == Method::Base) return result;

  const std::size_t batch = (cfg.batch_size == 0 || cfg.batch_size >= train_idx.size()) ? train_idx.size()
                                                                                          : cfg.batch_size;
  std::mt19937_64 rng(cfg.seed * 0x2545F4914F6CDD1DULL + 7);
  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> members;
    if (batch == order.size()) {
      members = order;
    } else {
      for (std::size_t k = 0; k < batch; ++k) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        members.push_back(order[cursor++]);
      }
    }

    StepDiagnostics diag;
    diag.step = step;
    diag.batch = members.size();
    std::vector<double> gw(params.weight.size(), 0.0), gb(params.bias.size(), 0.0);
    {
      GoldFirewall firewall;
      for (auto m : members) {
        InstanceStep s;
        try {
          s = instance_step(params, rendered[m], ds.answers, cfg.method, hp);
        } catch (const std::domain_error& e) {
          throw DivergenceError(step, e.what());
        }
        if (!std::isfinite(s.loss)) throw DivergenceError(step, "non-finite instance loss");
        diag.objective += s.loss;
        if (cfg.method != Method::Swarm) {
          diag.cce += s.breakdown.cce;
          diag.jsd += s.breakdown.jsd;
          diag.flip += s.breakdown.flip;
          ++diag.cases[static_cast<std::size_t>(s.breakdown.kind)];
          if (is_skip(s.breakdown.kind)) ++diag.skipped;
        }
        if (!s.has_grad) continue;
        for (std::size_t k = 0; k < gw.size(); ++k) gw[k] += s.grad_weight[k];
        for (std::size_t k = 0; k < gb.size(); ++k) gb[k] += s.grad_bias[k];
      }
    }
    const double inv = 1.0 / static_cast<double>(members.size());
    diag.objective *= inv;
    diag.cce *= inv;
    diag.jsd *= inv;
    diag.flip *= inv;
    if (!std::isfinite(diag.objective)) throw DivergenceError(step, "non-finite objective");
    for (std::size_t k = 0; k < gw.size(); ++k) params.weight[k] -= cfg.learning_rate * gw[k] * inv;
    for (std::size_t k = 0; k < gb.size(); ++k) params.bias[k] -= cfg.learning_rate * gb[k] * inv;
    for (double w : params.weight)
      if (!std::isfinite(w)) throw DivergenceError(step, "non-finite parameter");
    result.diagnostics.push_back(diag);

    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      result.checkpoints.push_back({params, step, evaluate(params, ds, Split::Val, eval_formats)});
    }
  }
  return result;
}

/// Highest validation mean F1; ties go to the earliest step.
inline const Checkpoint& select_model(const std::vector<Checkpoint>& checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("select_model: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < checkpoints.size(); ++i)
    if (checkpoints[i].val.f1_mean > checkpoints[best].val.f1_mean) best = i;
  return checkpoints[best];
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

struct Deltas {
  double f1_mean = 0.0;
  double f1_std = 0.0;
  double p_o = 0.0;
};

inline Deltas delta(const MetricsReport& after, const MetricsReport& before) {
  return {after.f1_mean - before.f1_mean, after.f1_std - before.f1_std,
          after.p_o.value_or(0.0) - before.p_o.value_or(0.0)};
}

struct MethodRun {
  Method method = Method::Base;
  std::uint64_t seed = 0;
  std::size_t selected_step = 0;
  MetricsReport test;
  MetricsReport base_test;
  Deltas vs_base;
  ScorerParams selected;
};

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  r.std = population_std(xs);
  return r;
}

struct MethodSummary {
  Method method = Method::Base;
  MeanStd f1_mean, f1_std, p_o;
  MeanStd d_f1_mean, d_f1_std, d_p_o;
};

struct ComparisonReport {
  std::vector<MethodRun> runs;  // method-major, then seed
  std::vector<MethodSummary> summary;
};

inline MethodRun run_method(const Dataset& ds, TrainConfig cfg, const MetricsReport& base_test) {
  cfg.seed = ds.config.seed;
  const auto res = train(ds, cfg);
  const auto& best = select_model(res.checkpoints);
  MethodRun run;
  run.method = cfg.method;
  run.seed = ds.config.seed;
  run.selected_step = best.step;
  run.selected = best.params;
  run.test = evaluate(best.params, ds, Split::Test, cfg.eval_formats.empty() ? cfg.train_formats : cfg.eval_formats);
  run.base_test = base_test;
  run.vs_base = delta(run.test, base_test);
  return run;
}

/// Every config is trained on every dataset (one dataset per seed).
inline ComparisonReport run_method_comparison(const std::vector<Dataset>& datasets,
                                              const std::vector<TrainConfig>& configs) {
  if (datasets.empty() || configs.empty()) throw std::invalid_argument("run_method_comparison: nothing to compare");
  ComparisonReport rep;
  std::vector<MetricsReport> base_tests;
  for (const auto& ds : datasets) base_tests.push_back(evaluate(ds.base, ds, Split::Test));
  for (const auto& cfg : configs) {
    MethodSummary sum;
    sum.method = cfg.method;
    std::vector<double> f1, sd, po, df1, dsd, dpo;
    for (std::size_t s = 0; s < datasets.size(); ++s) {
      auto run = run_method(datasets[s], cfg, base_tests[s]);
      f1.push_back(run.test.f1_mean);
      sd.push_back(run.test.f1_std);
      po.push_back(run.test.p_o.value_or(0.0));
      df1.push_back(run.vs_base.f1_mean);
      dsd.push_back(run.vs_base.f1_std);
      dpo.push_back(run.vs_base.p_o);
      rep.runs.push_back(std::move(run));
    }
    sum.f1_mean = mean_std(f1);
    sum.f1_std = mean_std(sd);
    sum.p_o = mean_std(po);
    sum.d_f1_mean = mean_std(df1);
    sum.d_f1_std = mean_std(dsd);
    sum.d_p_o = mean_std(dpo);
    rep.summary.push_back(sum);
  }
  return rep;
}

struct TransferCell {
  std::size_t source = 0, target = 0;
  Deltas vs_base;
};

struct TransferTally {
  std::size_t positive = 0, negative = 0;
};

struct TransferMatrix {
  std::size_t tasks = 0;
  std::vector<TransferCell> cells;  // row-major source x target, diagonal included
  // Off-diagonal improvement counts; for sigma_F1 a decrease is an improvement.
  TransferTally f1_mean, p_o, f1_std;

  const TransferCell& at(std::size_t s, std::size_t t) const { return cells.at(s * tasks + t); }
};

inline void require_compatible(const Dataset& a, const Dataset& b) {
  if (a.base.dim != b.base.dim || a.base.vocab != b.base.vocab || a.formats.size() != b.formats.size() ||
      a.answers.tokens != b.answers.tokens) {
    throw std::invalid_argument("incompatible tasks: feature dimension, vocabulary, formats or answers differ");
  }
  if (!(a.base == b.base)) throw std::invalid_argument("incompatible tasks: base scorers differ");
}

/// Train on each source, evaluate the selected model on every target.
inline TransferMatrix run_ood(const std::vector<Dataset>& tasks, const TrainConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("run_ood: no tasks");
  for (const auto& t : tasks) require_compatible(tasks[0], t);
  auto tally = [](TransferTally& t, double improvement) {
    if (improvement > 0) ++t.positive;
    if (improvement < 0) ++t.negative;
  };
  TransferMatrix m;
  m.tasks = tasks.size();
  std::vector<MetricsReport> base_tests;
  for (const auto& t : tasks) base_tests.push_back(evaluate(t.base, t, Split::Test));
  for (std::size_t s = 0; s < tasks.size(); ++s) {
    TrainConfig c = cfg;
    c.seed = tasks[s].config.seed;
    const auto res = train(tasks[s], c);
    const auto& best = select_model(res.checkpoints);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      TransferCell cell{s, t, delta(evaluate(best.params, tasks[t], Split::Test), base_tests[t])};
      if (s != t) {
        tally(m.f1_mean, cell.vs_base.f1_mean);
        tally(m.p_o, cell.vs_base.p_o);
        tally(m.f1_std, -cell.vs_base.f1_std);
      }
      m.cells.push_back(cell);
    }
  }
  return m;
}

struct HeldoutPoint {
  std::size_t k = 0;  // number of training formats; 0 is the untrained reference
  std::size_t selected_step = 0;
  MetricsReport heldout;
  MetricsReport base_heldout;
};

struct HeldoutCurve {
  std::uint64_t seed = 0;
  std::vector<std::size_t> heldout_formats;
  std::vector<HeldoutPoint> points;  // K=0 reference first, then the requested K
};

/// For each K: train on formats [0,K), select on validation over those
/// formats, evaluate on the held-out formats [heldout_from, V). The held-out
/// slice defaults to [max K, V) so every K is scored on the same formats.
inline HeldoutCurve run_heldout_formats(const Dataset& ds, const std::vector<std::size_t>& ks, const TrainConfig& cfg,
                                        std::optional<std::size_t> heldout_from = std::nullopt) {
  const std::size_t V = ds.formats.size();
  if (ks.empty()) throw std::invalid_argument("run_heldout_formats: empty K list");
  for (auto k : ks) {
    if (k >= V) throw std::invalid_argument("run_heldout_formats: K=" + std::to_string(k) + " must be < V=" + std::to_string(V));
    if (k == 0) throw std::invalid_argument("run_heldout_formats: K must be >= 1");
  }
  const std::size_t from = heldout_from.value_or(*std::max_element(ks.begin(), ks.end()));
  if (from >= V) throw std::invalid_argument("run_heldout_formats: held-out slice is empty");
  for (auto k : ks) {
    if (k > from) throw std::invalid_argument("run_heldout_formats: K=" + std::to_string(k) + " overlaps the held-out formats");
  }
  std::vector<std::size_t> unseen(V - from);
  std::iota(unseen.begin(), unseen.end(), from);

  HeldoutCurve curve;
  curve.seed = ds.config.seed;
  curve.heldout_formats = unseen;
  {
    HeldoutPoint ref;
    ref.heldout = evaluate(ds.base, ds, Split::Test, unseen);
    ref.base_heldout = ref.heldout;
    curve.points.push_back(std::move(ref));
  }
  for (auto k : ks) {
    std::vector<std::size_t> seen(k);
    std::iota(seen.begin(), seen.end(), 0);
    TrainConfig c = cfg;
    c.seed = ds.config.seed;
    c.train_formats = seen;
    c.eval_formats = seen;
    const auto res = train(ds, c);
    const auto& best = select_model(res.checkpoints);
    HeldoutPoint p;
    p.k = k;
    p.selected_step = best.step;
    p.heldout = evaluate(best.params, ds, Split::Test, unseen);
    p.base_heldout = curve.points.front().heldout;
    curve.points.push_back(std::move(p));
  }
  return curve;
}

}  // namespace f2c

#endif  // F2C_TRAINER_HPP
