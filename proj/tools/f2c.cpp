// f2c: generate synthetic tasks, train, evaluate and run the study harnesses.
//
// Exit codes: 0 success, 2 usage or schema error, 3 numerical failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "f2c/io.hpp"

namespace {

using namespace f2c;
using io::json;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumerical = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string out;
  std::string formats;
  std::vector<std::string> overrides;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::string study;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// `A..B` selects formats [A, B).
std::vector<std::size_t> parse_formats(const std::string& range, std::size_t V) {
  const auto dots = range.find("..");
  if (dots == std::string::npos) throw io::SchemaError("--formats expects A..B, got '" + range + "'");
  std::size_t a = 0, b = 0;
  try {
    std::size_t used = 0;
    a = std::stoul(range.substr(0, dots), &used);
    if (used != dots) throw std::invalid_argument("");
    const std::string rest = range.substr(dots + 2);
    b = std::stoul(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw io::SchemaError("--formats expects A..B, got '" + range + "'");
  }
  if (a >= b) throw io::SchemaError("--formats " + range + " selects no formats");
  if (b > V) throw io::SchemaError("--formats " + range + " exceeds the " + std::to_string(V) + " formats of the dataset");
  std::vector<std::size_t> out;
  for (std::size_t f = a; f < b; ++f) out.push_back(f);
  return out;
}

io::Config load_config(const Options& o) {
  json doc = json::object();
  if (!o.config.empty()) doc = io::read_json_file(o.config);
  io::require_object(doc, "config");
  for (const auto& ov : o.overrides) io::apply_override(doc, ov);
  auto cfg = io::config_from_json(doc);
  if (o.seed) {
    cfg.task.seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.study.seeds = {*o.seed};
  }
  if (!o.method.empty()) {
    cfg.train.method = io::parse_method(o.method);
    cfg.study.methods = {cfg.train.method};
  }
  return cfg;
}

fs::path out_dir(const Options& o, const std::string& fallback) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("F2C_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / fallback;
}

io::RunManifest manifest(const std::string& command, const Options& o, std::vector<std::uint64_t> seeds,
                         const fs::path& dir) {
  return {command, o.config, std::move(seeds), dir.string(), o.overrides, utc_now()};
}

std::string ckpt_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.json", step);
  return buf;
}

int cmd_gen(const Options& o) {
  const auto cfg = load_config(o);
  const auto dir = out_dir(o, "gen-seed" + std::to_string(cfg.task.seed));
  io::RunLock lock(dir);
  fs::remove(dir / "manifest.json");
  const auto ds = generate(cfg.task);
  io::write_dataset(dir, ds);
  io::write_json(dir / "config.json", {{"task", io::to_json(cfg.task)}});
  io::write_manifest(dir, manifest("gen", o, {cfg.task.seed}, dir));
  std::cout << "wrote " << ds.instances.size() << " instances to " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const Options& o) {
  if (o.data.empty()) throw io::SchemaError("train: --data is required");
  auto cfg = load_config(o);
  const auto ds = io::read_dataset(o.data);
  if (!o.seed) cfg.train.seed = ds.config.seed;
  if (!o.formats.empty()) cfg.train.train_formats = parse_formats(o.formats, ds.formats.size());
  const auto dir = out_dir(o, std::string(to_string(cfg.train.method)) + "-seed" + std::to_string(cfg.train.seed));
  io::RunLock lock(dir);
  fs::remove(dir / "manifest.json");
  fs::remove_all(dir / "checkpoints");
  fs::create_directories(dir / "checkpoints");

  const std::size_t reads_before = GoldFirewall::violations();
  const auto res = train(ds, cfg.train);
  const std::size_t gold_reads = GoldFirewall::violations() - reads_before;
  const auto& best = select_model(res.checkpoints);
  const auto eval_formats = cfg.train.eval_formats.empty() ? cfg.train.train_formats : cfg.train.eval_formats;

  json config = {{"task", io::to_json(ds.config)}, {"train", io::to_json(cfg.train)}, {"data", o.data}};
  io::write_json(dir / "config.json", config);
  json ckpts = json::array();
  for (const auto& c : res.checkpoints) {
    io::write_json(dir / "checkpoints" / ckpt_name(c.step), io::checkpoint_json(c.params, cfg.train.seed, c.step, cfg.train.method));
    ckpts.push_back({{"step", c.step}, {"val", io::to_json(c.val)}});
  }
  io::write_json(dir / "selected.json", io::checkpoint_json(best.params, cfg.train.seed, best.step, cfg.train.method));
  std::vector<json> diag;
  for (const auto& d : res.diagnostics) diag.push_back(io::to_json(d));
  io::write_text(dir / "diagnostics.jsonl", io::jsonl(diag));
  io::write_text(dir / "consensus.jsonl", io::jsonl(io::consensus_rows(best.params, ds, cfg.train)));

  const auto base_test = evaluate(ds.base, ds, Split::Test, eval_formats);
  const auto test = evaluate(best.params, ds, Split::Test, eval_formats);
  json report = {{"method", std::string(to_string(cfg.train.method))},
                 {"seed", cfg.train.seed},
                 {"selected_step", best.step},
                 {"checkpoints", ckpts},
                 {"val", io::to_json(best.val)},
                 {"test", io::to_json(test)},
                 {"base_test", io::to_json(base_test)},
                 {"vs_base", io::to_json(delta(test, base_test))},
                 {"gold_reads_during_training", gold_reads}};
  io::write_json(dir / "report.json", report);
  io::write_manifest(dir, manifest("train", o, {cfg.train.seed}, dir));
  std::cout << to_string(cfg.train.method) << ": selected step " << best.step << ", test mean F1 " << test.f1_mean
            << ", run in " << dir.string() << "\n";
  return kOk;
}

int cmd_eval(const Options& o) {
  if (o.data.empty() || o.checkpoint.empty()) throw io::SchemaError("eval: --data and --checkpoint are required");
  const auto ds = io::read_dataset(o.data);
  const auto ck = io::read_checkpoint(o.checkpoint);
  if (ck.params.dim != ds.base.dim || ck.params.vocab != ds.base.vocab) {
    throw io::SchemaError("eval: checkpoint shape [" + std::to_string(ck.params.vocab) + "," +
                          std::to_string(ck.params.dim) + "] does not match dataset [" + std::to_string(ds.base.vocab) +
                          "," + std::to_string(ds.base.dim) + "]");
  }
  Split split;
  try {
    split = split_from_string(o.split);
  } catch (const std::invalid_argument& e) {
    throw io::SchemaError(e.what());
  }
  const auto formats = o.formats.empty() ? all_formats(ds) : parse_formats(o.formats, ds.formats.size());
  if (ds.indices(split).empty()) throw io::SchemaError("eval: split '" + o.split + "' is empty");
  const auto report = evaluate(ck.params, ds, split, formats);
  const auto dir = out_dir(o, "eval-seed" + std::to_string(ck.seed));
  io::RunLock lock(dir);
  fs::remove(dir / "manifest.json");
  json j = io::to_json(report);
  j["split"] = o.split;
  j["checkpoint_step"] = ck.step;
  io::write_json(dir / "eval.json", j);
  io::write_manifest(dir, manifest("eval", o, {ck.seed}, dir));
  std::cout << "mean F1 " << report.f1_mean << " over " << formats.size() << " formats\n";
  return kOk;
}

std::vector<Dataset> study_datasets(const io::Config& cfg) {
  std::vector<Dataset> out;
  if (!cfg.study.datasets.empty()) {
    std::string missing;
    for (const auto& d : cfg.study.datasets)
      if (!fs::exists(fs::path(d) / "dataset.jsonl")) missing += (missing.empty() ? "" : ", ") + d;
    if (!missing.empty()) throw io::SchemaError("study: missing dataset runs: " + missing);
    for (const auto& d : cfg.study.datasets) out.push_back(io::read_dataset(d));
    return out;
  }
  for (auto s : cfg.study.seeds) {
    TaskConfig t = cfg.task;
    t.seed = s;
    out.push_back(generate(t));
  }
  return out;
}

std::string csv_num(double x) {
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

void study_compare(const io::Config& cfg, const fs::path& dir) {
  const auto datasets = study_datasets(cfg);
  std::vector<TrainConfig> configs;
  for (auto m : cfg.study.methods) {
    TrainConfig c = cfg.train;
    c.method = m;
    configs.push_back(c);
  }
  const auto rep = run_method_comparison(datasets, configs);
  json runs = json::array(), summary = json::array();
  std::string runs_csv = "method,seed,selected_step,f1_mean,f1_std,p_o,d_f1_mean,d_f1_std,d_p_o\n";
  for (const auto& r : rep.runs) {
    runs.push_back({{"method", std::string(to_string(r.method))},
                    {"seed", r.seed},
                    {"selected_step", r.selected_step},
                    {"test", io::to_json(r.test)},
                    {"base_test", io::to_json(r.base_test)},
                    {"vs_base", io::to_json(r.vs_base)}});
    runs_csv += std::string(to_string(r.method)) + "," + std::to_string(r.seed) + "," + std::to_string(r.selected_step) +
                "," + csv_num(r.test.f1_mean) + "," + csv_num(r.test.f1_std) + "," + csv_num(r.test.p_o.value_or(0.0)) +
                "," + csv_num(r.vs_base.f1_mean) + "," + csv_num(r.vs_base.f1_std) + "," + csv_num(r.vs_base.p_o) + "\n";
  }
  std::string sum_csv =
      "method,f1_mean,f1_mean_sd,f1_std,f1_std_sd,p_o,p_o_sd,d_f1_mean,d_f1_mean_sd,d_f1_std,d_f1_std_sd,d_p_o,d_p_o_sd\n";
  for (const auto& s : rep.summary) {
    summary.push_back({{"method", std::string(to_string(s.method))},
                       {"f1_mean", io::to_json(s.f1_mean)},
                       {"f1_std", io::to_json(s.f1_std)},
                       {"p_o", io::to_json(s.p_o)},
                       {"d_f1_mean", io::to_json(s.d_f1_mean)},
                       {"d_f1_std", io::to_json(s.d_f1_std)},
                       {"d_p_o", io::to_json(s.d_p_o)}});
    sum_csv += std::string(to_string(s.method));
    for (const auto* m : {&s.f1_mean, &s.f1_std, &s.p_o, &s.d_f1_mean, &s.d_f1_std, &s.d_p_o})
      sum_csv += "," + csv_num(m->mean) + "," + csv_num(m->std);
    sum_csv += "\n";
  }
  io::write_json(dir / "compare.json", {{"study", "compare"}, {"runs", runs}, {"summary", summary}});
  io::write_text(dir / "compare_runs.csv", runs_csv);
  io::write_text(dir / "compare_summary.csv", sum_csv);
}

void study_heldout(const io::Config& cfg, const fs::path& dir) {
  const auto datasets = study_datasets(cfg);
  json curves = json::array();
  std::string csv = "seed,metric,k,value,base_value\n";
  for (const auto& ds : datasets) {
    const auto curve = run_heldout_formats(ds, cfg.study.ks, cfg.train, cfg.study.heldout_from);
    json points = json::array();
    for (const auto& p : curve.points) {
      points.push_back({{"k", p.k}, {"selected_step", p.selected_step}, {"heldout", io::to_json(p.heldout)}});
      if (p.k == 0) continue;
      const auto& b = p.base_heldout;
      const std::string head = std::to_string(curve.seed) + ",";
      const std::string k = "," + std::to_string(p.k) + ",";
      csv += head + "f1_mean" + k + csv_num(p.heldout.f1_mean) + "," + csv_num(b.f1_mean) + "\n";
      csv += head + "f1_std" + k + csv_num(p.heldout.f1_std) + "," + csv_num(b.f1_std) + "\n";
      csv += head + "p_o" + k + csv_num(p.heldout.p_o.value_or(0.0)) + "," + csv_num(b.p_o.value_or(0.0)) + "\n";
    }
    curves.push_back({{"seed", curve.seed}, {"heldout_formats", curve.heldout_formats}, {"points", points}});
  }
  io::write_json(dir / "heldout.json", {{"study", "heldout"}, {"ks", cfg.study.ks}, {"curves", curves}});
  io::write_text(dir / "heldout.csv", csv);
}

void study_ood(const io::Config& cfg, const fs::path& dir) {
  if (cfg.study.task_shifts.size() < 2) throw io::SchemaError("study: ood needs at least two entries in 'task_shifts'");
  json matrices = json::array();
  std::string csv = "seed,source,target,diagonal,metric,value\n";
  for (auto seed : cfg.study.seeds) {
    std::vector<Dataset> tasks;
    for (std::size_t i = 0; i < cfg.study.task_shifts.size(); ++i) {
      TaskConfig t = cfg.task;
      t.family_seed = seed;
      t.seed = seed * 1000 + i;
      t.task_shift = cfg.study.task_shifts[i];
      tasks.push_back(generate(t));
    }
    const auto m = run_ood(tasks, cfg.train);
    json cells = json::array();
    for (const auto& c : m.cells) {
      cells.push_back({{"source", c.source}, {"target", c.target}, {"vs_base", io::to_json(c.vs_base)}});
      const std::string head = std::to_string(seed) + "," + std::to_string(c.source) + "," + std::to_string(c.target) +
                               "," + (c.source == c.target ? "1" : "0") + ",";
      csv += head + "d_f1_mean," + csv_num(c.vs_base.f1_mean) + "\n";
      csv += head + "d_f1_std," + csv_num(c.vs_base.f1_std) + "\n";
      csv += head + "d_p_o," + csv_num(c.vs_base.p_o) + "\n";
    }
    auto tally = [](const TransferTally& t) { return json{{"positive", t.positive}, {"negative", t.negative}}; };
    matrices.push_back({{"seed", seed},
                        {"tasks", m.tasks},
                        {"cells", cells},
                        {"tally", {{"f1_mean", tally(m.f1_mean)}, {"p_o", tally(m.p_o)}, {"f1_std", tally(m.f1_std)}}}});
  }
  io::write_json(dir / "ood.json", {{"study", "ood"}, {"matrices", matrices}});
  io::write_text(dir / "ood.csv", csv);
}

int cmd_study(const Options& o) {
  const auto cfg = load_config(o);
  const auto dir = out_dir(o, "study-" + o.study);
  io::RunLock lock(dir);
  fs::remove(dir / "manifest.json");
  io::write_json(dir / "config.json", io::to_json(cfg));
  if (o.study == "compare") {
    study_compare(cfg, dir);
  } else if (o.study == "heldout") {
    study_heldout(cfg, dir);
  } else {
    study_ood(cfg, dir);
  }
  io::write_manifest(dir, manifest("study " + o.study, o, cfg.study.seeds, dir));
  std::cout << "study " << o.study << " written to " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flip-flop consistency training on synthetic prompt-format tasks"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", o.seed, "Seed (overrides the config)");
    sub->add_option("--out", o.out, "Output directory (default: $F2C_OUT_ROOT/<command>-...)");
    sub->add_option("--override", o.overrides, "Config override key=value (repeatable)");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  common(gen);

  auto* tr = app.add_subcommand("train", "Train a scorer on a dataset");
  common(tr);
  tr->add_option("--data", o.data, "Dataset directory")->required();
  tr->add_option("--method", o.method, "base | swarm | cce | f2c");
  tr->add_option("--formats", o.formats, "Train on formats A..B (half-open)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(ev);
  ev->add_option("--data", o.data, "Dataset directory")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required();
  ev->add_option("--formats", o.formats, "Evaluate formats A..B (half-open)");
  ev->add_option("--split", o.split, "train | val | test");

  auto* st = app.add_subcommand("study", "Run a study harness");
  common(st);
  st->add_option("study", o.study, "compare | ood | heldout")
      ->required()
      ->check(CLI::IsMember({"compare", "ood", "heldout"}));
  st->add_option("--method", o.method, "Restrict to one method");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    return cmd_study(o);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::domain_error& e) {
    std::cerr << "error: numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
