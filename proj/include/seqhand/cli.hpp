#pragma once

// Command implementations behind the `seqhand` binary. run() takes the
// arguments after the program name and returns the process exit code, so
// tests drive commands in-process.
//
// Configuration is flat `key = value` text. Model keys are the ModelConfig
// names; run-level keys (paths, stage, split, ...) carry a `run.` prefix.
// Sources, later wins: base file, `--set key=value`, dedicated flags. The base
// file is `--config`, else `<checkpoint>.config` when a checkpoint is read,
// else $SEQHAND_CONFIG. Every command writes its resolved config next to its
// main output as `<output>.config`; feeding that file back reproduces the run.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "seqhand/config.hpp"
#include "seqhand/data.hpp"
#include "seqhand/errors.hpp"
#include "seqhand/metrics.hpp"
#include "seqhand/train.hpp"
#include "seqhand/verify.hpp"

namespace seqhand::cli {

enum ExitCode : int { kOk = 0, kContract = 1, kDivergence = 2, kIo = 3 };

inline constexpr const char* kConfigEnv = "SEQHAND_CONFIG";

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Options that a subcommand does not define count as absent.
inline bool given(CLI::App* app, const std::string& name) {
  const auto* opt = app->get_option_no_throw(name);
  return opt && opt->count() > 0;
}

inline bool file_exists(const std::string& path) { return std::filesystem::is_regular_file(path); }

inline void apply_sets(KeyValues& kv, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
    kv.set(KeyValues::trim(s.substr(0, eq)), KeyValues::trim(s.substr(eq + 1)));
  }
}

// Resolved key-values of one command, split into model and run sections.
struct Resolved {
  KeyValues model;
  KeyValues run;

  std::string get(const std::string& key, const std::string& fallback = "") const {
    const auto it = run.entries().find("run." + key);
    return it == run.entries().end() ? fallback : it->second;
  }
  template <class V>
  V get_as(const std::string& key, V fallback) const {
    const auto it = run.entries().find("run." + key);
    if (it == run.entries().end()) return fallback;
    V v{};
    config_detail::parse("run." + key, it->second, v);
    return v;
  }
  void set(const std::string& key, const std::string& value) { run.set("run." + key, value); }
  std::string text() const {
    KeyValues all = model;
    all.merge(run);
    return all.str();
  }
};

// Shared flags of commands that build a model.
struct Common {
  std::string config;
  std::vector<std::string> sets;
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "base config file (default: $" + std::string(kConfigEnv) + ")");
  app->add_option("--set", c.sets, "override one key, key=value (repeatable)");
}

// `flags` are run keys given on the command line; `allowed` lists every run
// key the command understands. A checkpoint's sibling config only
// contributes model keys.
inline Resolved resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags,
                        const std::set<std::string>& allowed, const std::string& checkpoint_in = "") {
  KeyValues base;
  if (!c.config.empty()) {
    base = KeyValues::load(c.config);
  } else if (!checkpoint_in.empty() && file_exists(checkpoint_in + ".config")) {
    const auto sibling = KeyValues::load(checkpoint_in + ".config");
    for (const auto& [k, v] : sibling.entries())
      if (k.rfind("run.", 0) != 0) base.set(k, v);
  } else if (const char* env = std::getenv(kConfigEnv); env && *env) {
    base = KeyValues::load(env);
  }
  apply_sets(base, c.sets);
  for (const auto& [k, v] : flags) base.set("run." + k, v);
  Resolved r;
  for (const auto& [k, v] : base.entries()) {
    if (k.rfind("run.", 0) == 0) {
      if (!allowed.count(k.substr(4))) throw ContractError("unknown config key '" + k + "'");
      r.run.set(k, v);
    } else {
      r.model.set(k, v);
    }
  }
  return r;
}

// Frame size and sequence length default to the dataset's.
inline ModelConfig model_config(Resolved& r, const data::Dataset& ds) {
  auto defaults = [&](const std::string& key, std::size_t v) {
    if (!r.model.contains(key)) r.model.set(key, std::to_string(v));
  };
  defaults("img_h", ds.img_h);
  defaults("img_w", ds.img_w);
  defaults("seq_len", ds.length);
  if (!r.model.contains("max_seq_len")) {
    defaults("max_seq_len", std::max<std::size_t>(ModelConfig{}.max_seq_len, ds.length));
  }
  return ModelConfig::from_kv(r.model);
}

inline std::vector<std::uint32_t> parse_ids(const std::string& key, const std::string& text) {
  std::vector<std::size_t> raw;
  config_detail::parse(key, text, raw);
  return {raw.begin(), raw.end()};
}

inline std::string join_ids(const std::vector<std::uint32_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
  return s;
}

// Default test group: the highest subject (or activity) id.
inline std::vector<std::uint32_t> default_test_ids(const data::Dataset& ds, data::SplitBy by) {
  std::uint32_t top = 0;
  for (const auto& m : ds.meta) top = std::max(top, by == data::SplitBy::subject ? m.subject : m.activity);
  return {top};
}

inline data::Split split_of(Resolved& r, const data::Dataset& ds) {
  const auto by = data::split_from(r.get("split", "subject"));
  r.set("split", r.get("split", "subject"));
  const auto ids = r.run.contains("run.test_ids") ? parse_ids("run.test_ids", r.get("test_ids"))
                                                  : default_test_ids(ds, by);
  r.set("test_ids", join_ids(ids));
  return data::make_split(ds, by, ids);
}

// Samples named by run.<key>: all, train or test.
inline std::vector<std::size_t> select(Resolved& r, const data::Dataset& ds, const std::string& key,
                                       const std::string& fallback) {
  const auto which = r.get(key, fallback);
  r.set(key, which);
  std::vector<std::size_t> s;
  if (which == "all") {
    s.resize(ds.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = i;
  } else if (which == "train" || which == "test") {
    const auto split = split_of(r, ds);
    s = which == "train" ? split.train : split.test;
  } else {
    throw ContractError("run." + key + " must be all, train or test, got '" + which + "'");
  }
  if (s.empty()) throw ContractError("run." + key + " = " + which + " selects no samples");
  return s;
}

struct Evaluation {
  double epe = 0;
  double auc = 0;
  metrics::PckCurve curve;
  std::size_t frames = 0;
};

inline Evaluation evaluate(const std::vector<float>& pred, const std::vector<float>& gt,
                           const std::vector<double>& thresholds, metrics::PckPooling pooling) {
  Evaluation e;
  const auto errors = metrics::joint_errors(pred, gt);
  double s = 0;
  for (const auto v : errors) s += v;
  e.epe = s / static_cast<double>(errors.size());
  e.curve = metrics::pck_curve(errors, thresholds, pooling);
  e.auc = metrics::auc(e.curve);
  e.frames = errors.size() / metrics::kJoints;
  return e;
}

inline metrics::PckPooling pooling_from(const std::string& s) {
  if (s == "joints") return metrics::PckPooling::joints;
  if (s == "frames") return metrics::PckPooling::frames;
  throw ContractError("run.pooling must be joints or frames, got '" + s + "'");
}

inline std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// gen-data

// Rounded to 1e-9 so configs show the degrees that were typed.
inline double degrees(double radians) { return std::round(radians * 180 / std::numbers::pi * 1e9) / 1e9; }

struct GenData {
  Common common;
  std::string mode, out, split, test_ids;
  std::size_t subjects = 0, activities = 0, sequences = 0, length = 0, cameras = 0, img = 0,
              workers = 0;
  std::uint64_t seed = 0;
  double occlusion = -1;
};

inline int gen_data(const GenData& g, CLI::App* app, std::ostream& out) {
  // Generator keys are run keys here; the command has no model section.
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](const char* name, const std::string& key, const std::string& v) {
    if (given(app, name)) flags.emplace_back(key, v);
  };
  flag("--mode", "mode", g.mode);
  flag("--subjects", "subjects", std::to_string(g.subjects));
  flag("--activities", "activities", std::to_string(g.activities));
  flag("--sequences", "sequences", std::to_string(g.sequences));
  flag("--length", "length", std::to_string(g.length));
  flag("--cameras", "length", std::to_string(g.cameras));
  flag("--img", "img_h", std::to_string(g.img));
  flag("--img", "img_w", std::to_string(g.img));
  flag("--seed", "seed", std::to_string(g.seed));
  flag("--occlusion", "occlusion_rate", config_detail::format(g.occlusion));
  flag("--workers", "workers", std::to_string(g.workers));
  flag("--split", "split", g.split);
  flag("--test-ids", "test_ids", g.test_ids);
  flag("--out", "out", g.out);
  auto r = resolve(g.common, flags,
                   {"mode", "subjects", "activities", "sequences", "length", "img_h", "img_w", "seed",
                    "max_angle_step_deg", "camera_spacing_deg", "camera_distance", "occlusion_rate",
                    "workers", "split", "test_ids", "out"});
  if (!r.model.entries().empty()) {
    throw ContractError("unknown config key '" + r.model.entries().begin()->first + "'");
  }
  data::GenerateOptions o;
  o.mode = data::mode_from(r.get("mode", "temporal"));
  o.subjects = r.get_as<std::size_t>("subjects", o.subjects);
  o.activities = r.get_as<std::size_t>("activities", o.activities);
  o.sequences = r.get_as<std::size_t>("sequences", o.sequences);
  o.length = r.get_as<std::size_t>("length", o.mode == data::Mode::angular ? 3 : 5);
  o.img_h = r.get_as<std::size_t>("img_h", o.img_h);
  o.img_w = r.get_as<std::size_t>("img_w", o.img_w);
  o.seed = r.get_as<std::size_t>("seed", o.seed);
  o.max_angle_step = data::deg(r.get_as<double>("max_angle_step_deg", degrees(o.max_angle_step)));
  o.camera_spacing = data::deg(r.get_as<double>("camera_spacing_deg", degrees(o.camera_spacing)));
  o.camera_distance = r.get_as<double>("camera_distance", o.camera_distance);
  o.occlusion_rate = r.get_as<double>("occlusion_rate", o.occlusion_rate);
  o.workers = r.get_as<std::size_t>("workers", o.workers);
  const auto path = r.get("out", "dataset.sthd");

  r.set("mode", data::mode_name(o.mode));
  r.set("subjects", std::to_string(o.subjects));
  r.set("activities", std::to_string(o.activities));
  r.set("sequences", std::to_string(o.sequences));
  r.set("length", std::to_string(o.length));
  r.set("img_h", std::to_string(o.img_h));
  r.set("img_w", std::to_string(o.img_w));
  r.set("seed", std::to_string(o.seed));
  r.set("max_angle_step_deg", config_detail::format(degrees(o.max_angle_step)));
  r.set("camera_spacing_deg", config_detail::format(degrees(o.camera_spacing)));
  r.set("camera_distance", config_detail::format(o.camera_distance));
  r.set("occlusion_rate", config_detail::format(o.occlusion_rate));
  r.set("workers", std::to_string(o.workers));
  r.set("out", path);

  const auto ds = data::generate_dataset(o);
  const auto split = split_of(r, ds);
  data::save_dataset(path, ds);
  write_text(path + ".split.csv", data::split_manifest(ds, split));
  write_text(path + ".config", r.text());
  out << "wrote " << path << ": " << ds.size() << " sequences of " << ds.length << " frames ("
      << data::mode_name(o.mode) << ")\n"
      << "split by " << r.get("split") << ", test ids " << r.get("test_ids") << ": train "
      << split.train.size() << ", test " << split.test.size() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct Train {
  Common common;
  std::string data, stage, checkpoint, out, subset, split, test_ids;
  std::uint64_t seed = 0;
  std::size_t progress = 0;
  bool ablation = false;
};

inline int train_cmd(const Train& t, CLI::App* app, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](const char* name, const std::string& key, const std::string& v) {
    if (given(app, name)) flags.emplace_back(key, v);
  };
  flag("--data", "data", t.data);
  flag("--stage", "stage", t.stage);
  flag("--checkpoint", "checkpoint", t.checkpoint);
  flag("--out", "out", t.out);
  flag("--subset", "subset", t.subset);
  flag("--split", "split", t.split);
  flag("--test-ids", "test_ids", t.test_ids);
  flag("--ablation", "ablation", t.ablation ? "true" : "false");
  auto common = t.common;
  if (given(app, "--seed")) common.sets.push_back("seed=" + std::to_string(t.seed));
  // Peek at the checkpoint flag so its sibling config can seed the model keys.
  auto r = resolve(common, flags,
                   {"data", "stage", "checkpoint", "out", "subset", "split", "test_ids", "ablation"},
                   given(app, "--checkpoint") ? t.checkpoint : "");
  const auto stage = r.get("stage", "both");
  if (stage != "1" && stage != "2" && stage != "both") {
    throw ContractError("run.stage must be 1, 2 or both, got '" + stage + "'");
  }
  r.set("stage", stage);
  const bool ablation = r.get_as<bool>("ablation", false);
  r.set("ablation", ablation ? "true" : "false");
  const auto data_path = r.get("data");
  if (data_path.empty()) throw ContractError("train needs --data");
  const auto ds = data::load_dataset(data_path);
  const auto samples = select(r, ds, "subset", "all");
  const auto cfg = model_config(r, ds);
  const auto out_path = r.get("out", "model.sthp");
  r.set("out", out_path);

  pipeline::Model<float> m;
  if (stage == "2") {
    const auto ck = r.get("checkpoint");
    if (ck.empty()) throw ContractError("stage 2 needs a stage-1 checkpoint (--checkpoint)");
    m = train::load_model<float>(ck, cfg);
  } else {
    m = pipeline::Model<float>::init(cfg);
  }
  train::TrainLog log;
  if (t.progress) {
    log.on_step = [&](const train::LogEntry& e) {
      if ((e.step + 1) % t.progress == 0) {
        out << "stage " << e.stage << " step " << e.step + 1 << " loss " << fixed(e.loss) << '\n';
      }
    };
  }
  if (stage != "2") {
    train::train_step1(m, ds, samples, &log);
    write_text(out_path + ".step1.csv", log.csv(1));
  }
  if (stage != "1") {
    if (ablation) {
      train::train_step2_ablation(m, ds, samples, &log);
    } else {
      train::train_step2(m, ds, samples, &log);
    }
    write_text(out_path + ".step2.csv", log.csv(2));
  }
  train::save_model(out_path, m);
  write_text(out_path + ".config", r.text());

  const bool single = ablation || stage == "1";
  const auto pred = train::predict(m, ds, samples, single);
  const double epe = metrics::epe(pred.joints3d, train::targets3d(ds, samples));
  out << "wrote " << out_path << " (stage " << static_cast<int>(m.stage) << ")\n"
      << "train EPE " << fixed(epe) << (single ? " (single-frame)" : "") << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval and export-curve

struct Eval {
  Common common;
  std::string data, checkpoint, report, curve, subset, split, test_ids, pooling, range;
  bool ablation = false, ground_truth = false;
  std::size_t workers = 1, pck_steps = 0;
  double pck_min = 0, pck_max = 0;
};

struct EvalRun {
  Resolved r;
  Evaluation e;
  bool ablation = false;
};

inline EvalRun run_eval(const Eval& v, CLI::App* app, const std::vector<std::string>& extra_keys) {
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](const char* name, const std::string& key, const std::string& val) {
    if (given(app, name)) flags.emplace_back(key, val);
  };
  flag("--data", "data", v.data);
  flag("--checkpoint", "checkpoint", v.checkpoint);
  flag("--subset", "subset", v.subset);
  flag("--split", "split", v.split);
  flag("--test-ids", "test_ids", v.test_ids);
  flag("--pooling", "pooling", v.pooling);
  flag("--ablation", "ablation", v.ablation ? "true" : "false");
  flag("--ground-truth", "ground_truth", v.ground_truth ? "true" : "false");
  flag("--workers", "workers", std::to_string(v.workers));
  flag("--pck-min", "pck_min", config_detail::format(v.pck_min));
  flag("--pck-max", "pck_max", config_detail::format(v.pck_max));
  flag("--pck-steps", "pck_steps", std::to_string(v.pck_steps));
  flag("--range", "range", v.range);
  flag("--report", "report", v.report);
  flag("--out", "curve", v.curve);
  flag("--curve", "curve", v.curve);
  std::set<std::string> allowed{"data",     "checkpoint", "subset",  "split",   "test_ids",
                                "pooling",  "ablation",   "ground_truth", "workers", "pck_min",
                                "pck_max",  "pck_steps",  "range",   "curve"};
  allowed.insert(extra_keys.begin(), extra_keys.end());
  EvalRun run;
  auto& r = run.r;
  r = resolve(v.common, flags, allowed, given(app, "--checkpoint") ? v.checkpoint : "");
  const auto data_path = r.get("data");
  if (data_path.empty()) throw ContractError("--data is required");
  const auto ds = data::load_dataset(data_path);
  const auto samples = select(r, ds, "subset", "all");

  // "table" is the usual 20-50 mm AUC band, "full" is 0-50.
  const auto range = r.get("range", "table");
  if (range != "table" && range != "full") throw ContractError("run.range must be table or full");
  r.set("range", range);
  const double lo = r.get_as<double>("pck_min", range == "table" ? 20.0 : 0.0);
  const double hi = r.get_as<double>("pck_max", 50.0);
  const auto steps = r.get_as<std::size_t>("pck_steps", 100);
  r.set("pck_min", config_detail::format(lo));
  r.set("pck_max", config_detail::format(hi));
  r.set("pck_steps", std::to_string(steps));
  const auto pooling = r.get("pooling", "joints");
  r.set("pooling", pooling);
  run.ablation = r.get_as<bool>("ablation", false);
  r.set("ablation", run.ablation ? "true" : "false");
  const bool gt_debug = r.get_as<bool>("ground_truth", false);
  r.set("ground_truth", gt_debug ? "true" : "false");
  const auto workers = r.get_as<std::size_t>("workers", 1);
  r.set("workers", std::to_string(workers));

  const auto gt = train::targets3d(ds, samples);
  std::vector<float> pred = gt;
  if (!gt_debug) {
    const auto ck = r.get("checkpoint");
    if (ck.empty()) throw ContractError("--checkpoint is required (or --ground-truth)");
    const auto cfg = model_config(r, ds);
    const auto m = train::load_model<float>(ck, cfg);
    pred = train::predict(m, ds, samples, run.ablation, workers).joints3d;
  }
  run.e = evaluate(pred, gt, metrics::uniform_thresholds(lo, hi, steps), pooling_from(pooling));
  return run;
}

inline int eval_cmd(const Eval& v, CLI::App* app, std::ostream& out) {
  auto run = run_eval(v, app, {"report"});
  auto& r = run.r;
  const auto report = r.get("report", "eval.txt");
  r.set("report", report);
  const auto curve = r.get("curve", report + ".pck.csv");
  r.set("curve", curve);
  const std::string method = run.ablation ? "single-frame" : "sequence";
  KeyValues rep;
  rep.set("method", method);
  rep.set("frames", std::to_string(run.e.frames));
  rep.set("epe", fixed(run.e.epe));
  rep.set("auc", fixed(run.e.auc));
  rep.set("pck_min", r.get("pck_min"));
  rep.set("pck_max", r.get("pck_max"));
  write_text(report, rep.str());
  write_text(curve, metrics::curve_csv(run.e.curve));
  write_text(report + ".config", r.text());
  out << "method        frames  Avg. EPE  AUC\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-12s  %6zu  %.6f  %.6f\n", method.c_str(), run.e.frames, run.e.epe,
                run.e.auc);
  out << line;
  return kOk;
}

inline int export_curve_cmd(const Eval& v, CLI::App* app, std::ostream& out) {
  auto run = run_eval(v, app, {});
  auto& r = run.r;
  const auto curve = r.get("curve", "pck.csv");
  r.set("curve", curve);
  write_text(curve, metrics::curve_csv(run.e.curve));
  write_text(curve + ".config", r.text());
  out << "wrote " << curve << " (" << run.e.curve.thresholds.size() << " thresholds, AUC "
      << fixed(run.e.auc) << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct Gradcheck {
  std::uint64_t seed = 7;
  std::string negate;
};

inline int gradcheck_cmd(const Gradcheck& g, std::ostream& out) {
  const auto reports = verify::gradcheck_suite(g.seed, g.negate);
  bool ok = true;
  char line[160];
  for (const auto& rep : reports) {
    std::snprintf(line, sizeof line, "%-36s %5zu probes  worst %.3e  %s\n", rep.name.c_str(),
                  rep.checked, rep.worst, rep.passed ? "ok" : "FAIL");
    out << line;
    ok = ok && rep.passed;
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << reports.size() << " groups, tolerance 1e-4)\n";
  return ok ? kOk : kContract;
}

// ---------------------------------------------------------------------------
// sweep-heads

struct SweepHeads {
  Common common;
  std::string data, out, subset, eval_subset, split, test_ids;
  std::vector<std::size_t> heads{1, 2, 4, 8, 16};
};

inline int sweep_heads_cmd(const SweepHeads& s, CLI::App* app, std::ostream& out, std::ostream& err) {
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](const char* name, const std::string& key, const std::string& v) {
    if (given(app, name)) flags.emplace_back(key, v);
  };
  flag("--data", "data", s.data);
  flag("--out", "out", s.out);
  flag("--subset", "subset", s.subset);
  flag("--eval-subset", "eval_subset", s.eval_subset);
  flag("--split", "split", s.split);
  flag("--test-ids", "test_ids", s.test_ids);
  if (given(app, "--heads")) flags.emplace_back("heads", config_detail::format(s.heads));
  auto r = resolve(s.common, flags, {"data", "out", "subset", "eval_subset", "split", "test_ids", "heads"});
  const auto data_path = r.get("data");
  if (data_path.empty()) throw ContractError("sweep-heads needs --data");
  const auto ds = data::load_dataset(data_path);
  const auto train_samples = select(r, ds, "subset", "train");
  const auto eval_samples = select(r, ds, "eval_subset", "test");
  std::vector<std::size_t> heads{1, 2, 4, 8, 16};
  if (r.run.contains("run.heads")) config_detail::parse("run.heads", r.get("heads"), heads);
  r.set("heads", config_detail::format(heads));
  const auto base = model_config(r, ds);
  const auto path = r.get("out", "sweep_heads.csv");
  r.set("out", path);

  std::string csv = "method,heads,epe\n";
  for (const auto h : heads) {
    if (h == 0 || base.embed_dim % h) {
      err << "warning: skipping heads = " << h << " (embed_dim " << base.embed_dim
          << " is not divisible)\n";
      continue;
    }
    auto cfg = base;
    cfg.heads = h;
    auto m = pipeline::Model<float>::init(cfg);
    train::train_step1(m, ds, train_samples);
    train::train_step2(m, ds, train_samples);
    const auto pred = train::predict(m, ds, eval_samples, false);
    const double epe = metrics::epe(pred.joints3d, train::targets3d(ds, eval_samples));
    csv += "sequence," + std::to_string(h) + "," + fixed(epe) + "\n";
    out << "heads " << h << ": EPE " << fixed(epe) << '\n';
  }
  write_text(path, csv);
  write_text(path + ".config", r.text());
  out << "wrote " << path << '\n';
  return kOk;
}

}  // namespace detail

// Maps library error categories onto exit codes.
template <class F>
int guarded(F&& body, std::ostream& err) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kContract;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kContract;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Sequence-based 3D hand pose estimation on synthetic hand data"};
  app.require_subcommand(1);

  detail::GenData gen;
  auto* gen_app = app.add_subcommand("gen-data", "generate a synthetic dataset and split manifest");
  detail::add_common(gen_app, gen.common);
  gen_app->add_option("--mode", gen.mode, "temporal or angular");
  gen_app->add_option("--subjects", gen.subjects);
  gen_app->add_option("--activities", gen.activities);
  gen_app->add_option("--sequences", gen.sequences, "sequences per subject and activity");
  gen_app->add_option("--length", gen.length, "frames per sequence (temporal)");
  gen_app->add_option("--cameras", gen.cameras, "views per sample (angular)");
  gen_app->add_option("--img", gen.img, "frame width and height");
  gen_app->add_option("--seed", gen.seed);
  gen_app->add_option("--occlusion", gen.occlusion, "probability a frame has one finger blanked");
  gen_app->add_option("--workers", gen.workers);
  gen_app->add_option("--split", gen.split, "subject or activity");
  gen_app->add_option("--test-ids", gen.test_ids, "comma-separated ids held out for test");
  gen_app->add_option("--out", gen.out, "dataset path (default dataset.sthd)");

  detail::Train tr;
  auto* train_app = app.add_subcommand("train", "run training stage 1, 2 or both");
  detail::add_common(train_app, tr.common);
  train_app->add_option("--data", tr.data);
  train_app->add_option("--stage", tr.stage, "1, 2 or both");
  train_app->add_option("--checkpoint", tr.checkpoint, "stage-1 checkpoint for --stage 2");
  train_app->add_option("--out", tr.out, "checkpoint path (default model.sthp)");
  train_app->add_option("--seed", tr.seed);
  train_app->add_option("--subset", tr.subset, "all, train or test");
  train_app->add_option("--split", tr.split, "subject or activity");
  train_app->add_option("--test-ids", tr.test_ids);
  train_app->add_option("--progress", tr.progress, "print the loss every N steps");
  train_app->add_flag("--ablation", tr.ablation, "stage 2 trains the single-frame dense layer instead of the sequence encoder");

  detail::Eval ev;
  auto add_eval = [&](CLI::App* a, bool is_eval) {
    detail::add_common(a, ev.common);
    a->add_option("--data", ev.data);
    a->add_option("--checkpoint", ev.checkpoint);
    a->add_option("--subset", ev.subset, "all, train or test");
    a->add_option("--split", ev.split);
    a->add_option("--test-ids", ev.test_ids);
    a->add_flag("--ablation", ev.ablation, "evaluate the single-frame variant");
    a->add_flag("--ground-truth", ev.ground_truth, "score ground truth against itself");
    a->add_option("--workers", ev.workers);
    a->add_option("--pck-min", ev.pck_min);
    a->add_option("--pck-max", ev.pck_max);
    a->add_option("--pck-steps", ev.pck_steps);
    a->add_option("--pooling", ev.pooling, "joints or frames");
    a->add_option("--range", ev.range, "table (20-50) or full (0-50)");
    if (is_eval) {
      a->add_option("--report", ev.report, "report path (default eval.txt)");
      a->add_option("--curve", ev.curve, "PCK CSV path (default <report>.pck.csv)");
    } else {
      a->add_option("--out", ev.curve, "PCK CSV path (default pck.csv)");
    }
  };
  auto* eval_app = app.add_subcommand("eval", "evaluate a checkpoint: EPE, PCK curve and AUC");
  add_eval(eval_app, true);
  auto* curve_app = app.add_subcommand("export-curve", "write the 3D PCK curve as CSV");
  add_eval(curve_app, false);

  detail::Gradcheck gc;
  auto* gc_app = app.add_subcommand("gradcheck", "64-bit finite-difference check of every parameter group");
  gc_app->add_option("--seed", gc.seed);
  gc_app->add_option("--negate", gc.negate, "test hook: flip the analytic gradient of one group")
      ->group("");

  detail::SweepHeads sw;
  auto* sweep_app = app.add_subcommand("sweep-heads", "train and evaluate once per attention head count");
  detail::add_common(sweep_app, sw.common);
  sweep_app->add_option("--data", sw.data);
  sweep_app->add_option("--heads", sw.heads)->delimiter(',');
  sweep_app->add_option("--out", sw.out, "CSV path (default sweep_heads.csv)");
  sweep_app->add_option("--subset", sw.subset, "training samples (default train)");
  sweep_app->add_option("--eval-subset", sw.eval_subset, "evaluation samples (default test)");
  sweep_app->add_option("--split", sw.split);
  sweep_app->add_option("--test-ids", sw.test_ids);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kContract;
  }
  return guarded(
      [&] {
        if (gen_app->parsed()) return detail::gen_data(gen, gen_app, out);
        if (train_app->parsed()) return detail::train_cmd(tr, train_app, out);
        if (eval_app->parsed()) return detail::eval_cmd(ev, eval_app, out);
        if (curve_app->parsed()) return detail::export_curve_cmd(ev, curve_app, out);
        if (gc_app->parsed()) return detail::gradcheck_cmd(gc, out);
        return detail::sweep_heads_cmd(sw, sweep_app, out, err);
      },
      err);
}

}  // namespace seqhand::cli
