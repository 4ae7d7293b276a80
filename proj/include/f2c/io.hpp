#ifndef F2C_IO_HPP
#define F2C_IO_HPP

// On-disk formats: configs, dataset JSONL and its formats sidecar,
// checkpoints, reports, diagnostics streams, run manifests and lock files.

#include <openssl/evp.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2c/consensus.hpp"
#include "f2c/losses.hpp"
#include "f2c/metrics.hpp"
#include "f2c/synthdata.hpp"
#include "f2c/trainer.hpp"

namespace f2c::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

/// Malformed input: unknown or mistyped fields, shape mismatches.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Field helpers
// ---------------------------------------------------------------------------

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected an object");
}

inline void only_fields(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require_object(j, where);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw SchemaError(where + ": unknown field '" + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    const auto& v = j.at(key);
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw SchemaError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw SchemaError("");
    }
    out = v.template get<T>();
  } catch (const std::exception&) {
    throw SchemaError(where + ": field '" + key + "' has the wrong type");
  }
}

template <class T>
T need(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw SchemaError(where + ": missing field '" + key + "'");
  T out{};
  read(j, key, out, where);
  return out;
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

inline json to_json(const TaskConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["family_seed"] = c.family_seed ? json(*c.family_seed) : json(nullptr);
  j["instances"] = c.instances;
  j["dim"] = c.dim;
  j["labels"] = c.labels;
  j["formats"] = c.formats;
  j["separation"] = c.separation;
  j["format_noise"] = c.format_noise;
  j["hard_formats"] = c.hard_formats;
  j["hard_noise"] = c.hard_noise;
  j["rotation_scale"] = c.rotation_scale;
  j["offset_scale"] = c.offset_scale;
  j["task_shift"] = c.task_shift;
  j["distractors"] = c.distractors;
  j["answer_length"] = c.answer_length;
  j["prior_strength"] = c.prior_strength;
  j["prior_spurious"] = c.prior_spurious;
  j["splits"] = {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}};
  return j;
}

inline TaskConfig task_from_json(const json& j) {
  const std::string w = "task";
  only_fields(j,
              {"seed", "family_seed", "instances", "dim", "labels", "formats", "separation", "format_noise",
               "hard_formats", "hard_noise", "rotation_scale", "offset_scale", "task_shift", "distractors",
               "answer_length", "prior_strength", "prior_spurious", "splits"},
              w);
  TaskConfig c;
  read(j, "seed", c.seed, w);
  if (j.contains("family_seed") && !j["family_seed"].is_null()) {
    std::uint64_t f = 0;
    read(j, "family_seed", f, w);
    c.family_seed = f;
  }
  read(j, "instances", c.instances, w);
  read(j, "dim", c.dim, w);
  read(j, "labels", c.labels, w);
  read(j, "formats", c.formats, w);
  read(j, "separation", c.separation, w);
  read(j, "format_noise", c.format_noise, w);
  read(j, "hard_formats", c.hard_formats, w);
  read(j, "hard_noise", c.hard_noise, w);
  read(j, "rotation_scale", c.rotation_scale, w);
  read(j, "offset_scale", c.offset_scale, w);
  read(j, "task_shift", c.task_shift, w);
  read(j, "distractors", c.distractors, w);
  read(j, "answer_length", c.answer_length, w);
  read(j, "prior_strength", c.prior_strength, w);
  read(j, "prior_spurious", c.prior_spurious, w);
  if (j.contains("splits")) {
    const auto& s = j["splits"];
    only_fields(s, {"train", "val", "test"}, "task.splits");
    read(s, "train", c.splits.train, "task.splits");
    read(s, "val", c.splits.val, "task.splits");
    read(s, "test", c.splits.test, "task.splits");
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  return c;
}

inline json to_json(const Hyperparams& h) {
  return {{"lambda_cce", h.lambda_cce}, {"tau_unanimous", h.tau_unanimous}, {"k_max", h.k_max},
          {"f_min", h.f_min},           {"f_max", h.f_max},                 {"temperature", h.temperature},
          {"beta_jsd", h.beta_jsd}};
}

inline Hyperparams hp_from_json(const json& j) {
  const std::string w = "train.hp";
  only_fields(j, {"lambda_cce", "tau_unanimous", "k_max", "f_min", "f_max", "temperature", "beta_jsd"}, w);
  Hyperparams h;
  read(j, "lambda_cce", h.lambda_cce, w);
  read(j, "tau_unanimous", h.tau_unanimous, w);
  read(j, "k_max", h.k_max, w);
  read(j, "f_min", h.f_min, w);
  read(j, "f_max", h.f_max, w);
  read(j, "temperature", h.temperature, w);
  read(j, "beta_jsd", h.beta_jsd, w);
  return h;
}

inline json to_json(const TrainConfig& c) {
  return {{"method", std::string(to_string(c.method))},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"eval_interval", c.eval_interval},
          {"seed", c.seed},
          {"train_formats", c.train_formats},
          {"eval_formats", c.eval_formats},
          {"hp", to_json(c.hp)}};
}

inline Method parse_method(const std::string& s) {
  try {
    return method_from_string(s);
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
}

inline TrainConfig train_from_json(const json& j) {
  const std::string w = "train";
  only_fields(j,
              {"method", "learning_rate", "steps", "batch_size", "eval_interval", "seed", "train_formats",
               "eval_formats", "hp"},
              w);
  TrainConfig c;
  if (j.contains("method")) c.method = parse_method(need<std::string>(j, "method", w));
  read(j, "learning_rate", c.learning_rate, w);
  read(j, "steps", c.steps, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "eval_interval", c.eval_interval, w);
  read(j, "seed", c.seed, w);
  read(j, "train_formats", c.train_formats, w);
  read(j, "eval_formats", c.eval_formats, w);
  if (j.contains("hp")) c.hp = hp_from_json(j["hp"]);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  return c;
}

struct StudySpec {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<Method> methods{Method::Base, Method::Cce, Method::F2C};
  std::vector<std::size_t> ks{2, 4, 6};
  std::optional<std::size_t> heldout_from;
  std::vector<double> task_shifts{0.3, 0.3, 0.3};  // ood: one related task per entry
  std::vector<std::string> datasets;              // optional dataset dirs instead of generation
};

inline json to_json(const StudySpec& s) {
  json methods = json::array();
  for (auto m : s.methods) methods.push_back(std::string(to_string(m)));
  return {{"seeds", s.seeds},
          {"methods", methods},
          {"ks", s.ks},
          {"heldout_from", s.heldout_from ? json(*s.heldout_from) : json(nullptr)},
          {"task_shifts", s.task_shifts},
          {"datasets", s.datasets}};
}

inline StudySpec study_from_json(const json& j) {
  const std::string w = "study";
  only_fields(j, {"seeds", "methods", "ks", "heldout_from", "task_shifts", "datasets"}, w);
  StudySpec s;
  read(j, "seeds", s.seeds, w);
  if (j.contains("methods")) {
    s.methods.clear();
    for (const auto& m : need<std::vector<std::string>>(j, "methods", w)) s.methods.push_back(parse_method(m));
  }
  read(j, "ks", s.ks, w);
  if (j.contains("heldout_from") && !j["heldout_from"].is_null()) {
    std::size_t h = 0;
    read(j, "heldout_from", h, w);
    s.heldout_from = h;
  }
  read(j, "task_shifts", s.task_shifts, w);
  read(j, "datasets", s.datasets, w);
  if (s.seeds.empty()) throw SchemaError("study: field 'seeds' must not be empty");
  if (s.methods.empty()) throw SchemaError("study: field 'methods' must not be empty");
  return s;
}

struct Config {
  TaskConfig task;
  TrainConfig train;
  StudySpec study;
};

inline json to_json(const Config& c) {
  return {{"task", to_json(c.task)}, {"train", to_json(c.train)}, {"study", to_json(c.study)}};
}

inline Config config_from_json(const json& j) {
  only_fields(j, {"task", "train", "study"}, "config");
  Config c;
  if (j.contains("task")) c.task = task_from_json(j["task"]);
  if (j.contains("train")) c.train = train_from_json(j["train"]);
  if (j.contains("study")) c.study = study_from_json(j["study"]);
  return c;
}

/// Applies `key=value` to a config document. Keys are dotted paths
/// (`train.hp.f_min`) or a bare field name that is unique across sections.
/// Dashes in keys are read as underscores.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw SchemaError("override '" + assignment + "' is not key=value");
  std::string key = assignment.substr(0, eq);
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }

  std::vector<std::string> path;
  if (key.find('.') != std::string::npos) {
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) path.push_back(part);
  } else {
    const Config defaults;
    const json full = to_json(defaults);
    std::vector<std::vector<std::string>> hits;
    for (const char* section : {"task", "train", "study"}) {
      if (full[section].contains(key)) hits.push_back({section, key});
    }
    if (full["train"]["hp"].contains(key)) hits.push_back({"train", "hp", key});
    if (hits.empty()) throw SchemaError("override: unknown field '" + key + "'");
    if (hits.size() > 1) throw SchemaError("override: field '" + key + "' is ambiguous, use a dotted path");
    path = hits.front();
  }
  json* node = &doc;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object()) throw SchemaError("override: '" + key + "' does not name a config field");
    node = &(*node)[path[i]];
    if (node->is_null()) *node = json::object();
  }
  (*node)[path.back()] = value;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw SchemaError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(p.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline std::string jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

inline std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

/// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw std::runtime_error("run directory " + dir.string() + " is locked by another command");
    std::fclose(f);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

struct RunManifest {
  std::string command;
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::string created_at;
};

/// Checksums every regular file under `dir` (except the lock and the
/// manifest itself) and writes manifest.json last.
inline json write_manifest(const fs::path& dir, const RunManifest& m) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name == ".lock" || (name == "manifest.json" && e.path().parent_path() == dir)) continue;
    files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  json artifacts = json::array();
  for (const auto& f : files) {
    artifacts.push_back(
        {{"path", f.generic_string()}, {"sha256", sha256_file(dir / f)}, {"bytes", fs::file_size(dir / f)}});
  }
  json j = {{"command", m.command},       {"config_path", m.config_path}, {"seeds", m.seeds},
            {"out_dir", m.out_dir},       {"overrides", m.overrides},     {"tool_version", kToolVersion},
            {"created_at", m.created_at}, {"artifacts", artifacts}};
  write_json(dir / "manifest.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

inline json to_json(const ScorerParams& p) {
  return {{"shapes", {{"weight", {p.vocab, p.dim}}, {"bias", {p.vocab}}}}, {"weight", p.weight}, {"bias", p.bias}};
}

inline ScorerParams params_from_json(const json& j, const std::string& where) {
  require_object(j, where);
  const auto& shapes = j.contains("shapes") ? j["shapes"] : throw SchemaError(where + ": missing field 'shapes'");
  const auto ws = need<std::vector<std::size_t>>(shapes, "weight", where + ".shapes");
  const auto bs = need<std::vector<std::size_t>>(shapes, "bias", where + ".shapes");
  if (ws.size() != 2 || bs.size() != 1 || bs[0] != ws[0]) throw SchemaError(where + ": inconsistent shapes");
  ScorerParams p;
  p.vocab = ws[0];
  p.dim = ws[1];
  p.weight = need<std::vector<double>>(j, "weight", where);
  p.bias = need<std::vector<double>>(j, "bias", where);
  if (p.weight.size() != p.vocab * p.dim || p.bias.size() != p.vocab)
    throw SchemaError(where + ": array lengths do not match shapes");
  return p;
}

inline json to_json(const FormatSpec& f) {
  return {{"id", f.id}, {"dim", f.dim}, {"map", f.map}, {"offset", f.offset}, {"noise_scale", f.noise_scale}};
}

inline FormatSpec format_from_json(const json& j) {
  const std::string w = "format";
  only_fields(j, {"id", "dim", "map", "offset", "noise_scale"}, w);
  FormatSpec f;
  f.id = need<int>(j, "id", w);
  f.dim = need<std::size_t>(j, "dim", w);
  f.map = need<std::vector<double>>(j, "map", w);
  f.offset = need<std::vector<double>>(j, "offset", w);
  f.noise_scale = need<double>(j, "noise_scale", w);
  try {
    f.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  return f;
}

inline json instance_to_json(const Instance& inst) {
  return {{"id", inst.id},
          {"features", inst.features},
          {"gold", inst.gold()},
          {"split", std::string(to_string(inst.split))},
          {"noise", inst.noise}};
}

inline Instance instance_from_json(const json& j, std::size_t line) {
  const std::string w = "dataset line " + std::to_string(line);
  only_fields(j, {"id", "features", "gold", "split", "noise"}, w);
  Split split;
  try {
    split = split_from_string(need<std::string>(j, "split", w));
  } catch (const std::invalid_argument& e) {
    throw SchemaError(w + ": " + e.what());
  }
  return Instance(need<std::size_t>(j, "id", w), need<std::vector<double>>(j, "features", w),
                  need<std::vector<std::vector<double>>>(j, "noise", w), need<std::size_t>(j, "gold", w), split);
}

inline json sidecar_json(const Dataset& ds) {
  json formats = json::array();
  for (const auto& f : ds.formats) formats.push_back(to_json(f));
  return {{"task", to_json(ds.config)}, {"formats", formats}, {"answers", ds.answers.tokens}, {"base", to_json(ds.base)}};
}

inline void write_dataset(const fs::path& dir, const Dataset& ds) {
  std::vector<json> rows;
  for (const auto& inst : ds.instances) rows.push_back(instance_to_json(inst));
  write_text(dir / "dataset.jsonl", jsonl(rows));
  write_json(dir / "formats.json", sidecar_json(ds));
}

inline Dataset read_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "dataset.jsonl") || !fs::exists(dir / "formats.json"))
    throw SchemaError("dataset directory " + dir.string() + " lacks dataset.jsonl or formats.json");
  const json side = read_json_file(dir / "formats.json");
  only_fields(side, {"task", "formats", "answers", "base"}, "formats.json");
  Dataset ds;
  ds.config = task_from_json(side.contains("task") ? side["task"] : throw SchemaError("formats.json: missing field 'task'"));
  for (const auto& f : side.at("formats")) ds.formats.push_back(format_from_json(f));
  ds.answers.tokens = need<std::vector<std::vector<std::size_t>>>(side, "answers", "formats.json");
  ds.base = params_from_json(side.at("base"), "formats.json.base");
  try {
    ds.answers.validate(ds.base.vocab);
  } catch (const std::invalid_argument& e) {
    throw SchemaError(std::string("formats.json: ") + e.what());
  }
  std::ifstream in(dir / "dataset.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError("dataset line " + std::to_string(n) + ": " + e.what());
    }
    auto inst = instance_from_json(j, n);
    if (inst.features.size() != ds.base.dim || inst.noise.size() != ds.formats.size())
      throw SchemaError("dataset line " + std::to_string(n) + ": shape does not match formats.json");
    for (const auto& v : inst.noise)
      if (v.size() != ds.base.dim) throw SchemaError("dataset line " + std::to_string(n) + ": noise shape mismatch");
    if (inst.gold() >= ds.answers.num_labels())
      throw SchemaError("dataset line " + std::to_string(n) + ": gold label out of range");
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints, reports, diagnostics
// ---------------------------------------------------------------------------

inline json checkpoint_json(const ScorerParams& p, std::uint64_t seed, std::size_t step, Method method) {
  json j = to_json(p);
  j["metadata"] = {{"seed", seed}, {"step", step}, {"method", std::string(to_string(method))}};
  return j;
}

struct LoadedCheckpoint {
  ScorerParams params;
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

inline LoadedCheckpoint read_checkpoint(const fs::path& p) {
  const json j = read_json_file(p);
  only_fields(j, {"shapes", "weight", "bias", "metadata"}, p.string());
  LoadedCheckpoint c;
  c.params = params_from_json(j, p.string());
  if (j.contains("metadata")) {
    const auto& m = j["metadata"];
    read(m, "seed", c.seed, "metadata");
    read(m, "step", c.step, "metadata");
  }
  return c;
}

inline json opt(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

inline json to_json(const MetricsReport& r) {
  return {{"format_ids", r.format_ids},
          {"per_format_f1", r.per_format_f1},
          {"f1_mean", r.f1_mean},
          {"f1_std", r.f1_std},
          {"p_o", opt(r.p_o)},
          {"coverage", r.coverage},
          {"covered", r.covered},
          {"majority_accuracy", r.majority_accuracy},
          {"instances", r.instances}};
}

inline json to_json(const Deltas& d) { return {{"f1_mean", d.f1_mean}, {"f1_std", d.f1_std}, {"p_o", d.p_o}}; }

inline json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline json cases_json(const std::array<std::size_t, 4>& cases) {
  json j;
  for (std::size_t k = 0; k < 4; ++k) j[std::string(to_string(static_cast<Case>(k)))] = cases[k];
  return j;
}

inline json to_json(const StepDiagnostics& d) {
  return {{"step", d.step},       {"objective", d.objective}, {"cce", d.cce},
          {"jsd", d.jsd},         {"flip", d.flip},           {"skipped", d.skipped},
          {"batch", d.batch},     {"cases", cases_json(d.cases)}};
}

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const ConsensusOutcome& o, const LossBreakdown& b, std::size_t instance_id) {
  json margins = json::array();
  for (double m : o.margins) margins.push_back(finite_or_null(m));
  return {{"id", instance_id},
          {"case", std::string(to_string(o.kind))},
          {"c_star", o.c_star ? json(*o.c_star) : json(nullptr)},
          {"voters", o.voters},
          {"cc", o.cc},
          {"nc", o.nc},
          {"margins", margins},
          {"median_margin", opt(o.median_margin)},
          {"delta", opt(o.delta)},
          {"w_flip", o.w_flip},
          {"loss", {{"cce", b.cce}, {"jsd", b.jsd}, {"flip", b.flip}, {"total", b.total}}}};
}

/// Per-instance consensus outcomes and loss terms of `params` on the train split.
inline std::vector<json> consensus_rows(const ScorerParams& params, const Dataset& ds, const TrainConfig& cfg) {
  const auto formats = cfg.train_formats.empty() ? all_formats(ds) : cfg.train_formats;
  const Hyperparams hp = cfg.effective_hp();
  std::vector<json> rows;
  GoldFirewall firewall;
  for (auto i : ds.indices(Split::Train)) {
    const auto& inst = ds.instances[i];
    const auto scored = build_ll_matrix(params, inst.id, ds.renderings(inst, formats), ds.answers);
    const auto outcome = analyze(scored.ll, hp);
    const auto b = f2c_total(scored, outcome, hp);
    rows.push_back(to_json(outcome, b, inst.id));
  }
  return rows;
}

}  // namespace f2c::io

#endif  // F2C_IO_HPP
