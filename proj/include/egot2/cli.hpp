#pragma once

// Command-line front end: gen-data, train, train-backbone, eval, analyze.
// Exit codes: 0 ok, 1 internal, 2 config, 3 missing prerequisite, 4 incompatible.

#include <CLI11.hpp>

#include <iostream>

#include "egot2/analysis.hpp"

#ifndef EGOT2_VERSION
#define EGOT2_VERSION "0.0.0"
#endif

namespace egot2::cli {

namespace detail {

struct Logger {
  bool verbose = false;
  std::ostream* err = &std::cerr;
  void operator()(const std::string& msg) const {
    if (verbose) *err << "[egot2] " << msg << "\n";
  }
};

// Run manifest: written first in every output directory.
struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  json inputs = json::object();     // name -> {path, digest}
  json artifacts = json::object();  // name -> path (relative to the manifest directory)

  json to_json() const {
    return {{"tool", "egot2"}, {"version", EGOT2_VERSION}, {"command", command}, {"seed", seed},
            {"config", config}, {"inputs", inputs}, {"artifacts", artifacts}};
  }
  void write(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_text(path, to_json().dump(2) + "\n");
  }
};

inline json input_entry(const fs::path& p) { return {{"path", fs::absolute(p).lexically_normal().string()}, {"digest", digest_path(p)}}; }

inline RunConfig load_run_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig c = load_config(path);
  if (seed) c.seed = *seed;
  return c;
}

inline bool is_dataset_dir(const fs::path& dir) {
  const fs::path m = dir / "manifest.json";
  if (!fs::exists(m)) return false;
  try {
    const json j = json::parse(read_text(m));
    return j.value("format", "") == "egt2-dataset";
  } catch (const json::exception&) {
    return false;
  }
}

inline fs::path split_dir(const fs::path& root, const std::string& task, const std::string& split) { return root / task / split; }

// Train and validation splits of every task present under a gen-data directory.
inline DataBank load_bank(const fs::path& root, const RunConfig& c) {
  if (!fs::is_directory(root)) throw MissingPrerequisite("data directory " + root.string() + " does not exist");
  DataBank bank;
  for (const auto& t : c.suite.tasks) {
    const fs::path tr = split_dir(root, t.task_id, "train"), va = split_dir(root, t.task_id, "val");
    if (!fs::exists(tr / "manifest.json") || !fs::exists(va / "manifest.json")) continue;
    TaskData d{load_dataset(tr), load_dataset(va)};
    if (!(d.train.task == t)) throw Incompatible("dataset " + tr.string() + " was generated for a different task spec of " + t.task_id);
    bank[t.task_id] = std::move(d);
  }
  return bank;
}

inline fs::path backbone_file(const fs::path& dir, const std::string& task) { return dir / (task + ".egt2"); }

inline TaskModel<float> load_backbone(const fs::path& file) {
  Checkpoint ck = load_checkpoint_file(file);
  if (ck.meta.value("kind", "") != "backbone") throw Incompatible(file.string() + " is not a stage-I checkpoint");
  return TaskModel<float>::from_checkpoint(ck);
}

inline std::vector<std::string> required_backbones(const RunConfig& c) {
  const TrainConfig& t = c.train;
  switch (t.variant) {
    case Variant::egot2s: {
      std::vector<std::string> r{t.primary};
      if (!t.ablation.replace_aux_with_primary_copies) r.insert(r.end(), t.aux.begin(), t.aux.end());
      return r;
    }
    case Variant::egot2g: return t.tasks;
    case Variant::finetune: return {t.primary};
    case Variant::transfer: return {t.transfer_source};
    case Variant::late_fusion: {
      std::vector<std::string> r{t.primary};
      r.insert(r.end(), t.aux.begin(), t.aux.end());
      return r;
    }
    default: return {};
  }
}

inline BackboneBank load_backbones(const std::optional<std::string>& dir, const RunConfig& c, json* inputs) {
  const auto need = required_backbones(c);
  BackboneBank bank;
  if (need.empty()) return bank;
  if (!dir) {
    std::string list;
    for (const auto& n : need) list += " " + n;
    throw MissingPrerequisite("variant " + to_string(c.train.variant) + " needs stage-I checkpoints (--ckpts):" + list);
  }
  std::string missing;
  for (const auto& id : need) {
    const fs::path f = backbone_file(*dir, id);
    if (!fs::exists(f)) {
      missing += " " + f.string();
      continue;
    }
    auto m = load_backbone(f);
    if (m.spec().task_id != id) throw Incompatible(f.string() + " holds a backbone for " + m.spec().task_id + ", expected " + id);
    (*inputs)["backbone:" + id] = input_entry(f);
    bank.emplace(id, FrozenModel<float>(std::move(m)));
  }
  if (!missing.empty()) throw MissingPrerequisite("missing stage-I checkpoints:" + missing);
  return bank;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline void write_report(const fs::path& dir, const std::string& stem, const MetricReport& r) {
  write_text(dir / (stem + ".json"), to_json(r).dump(2) + "\n");
  write_text(dir / (stem + ".csv"), report_csv(r));
}

inline void write_timing(const fs::path& dir, double seconds) {
  json j = {{"wall_clock_s", seconds}};
  write_text(dir / "timing.json", j.dump(2) + "\n");
}

}  // namespace detail

struct Options {
  std::optional<std::uint64_t> seed;
  bool verbose = false;

  std::string config, out, data, ckpts, ckpt, split = "val", run, task, variant;
  std::string primary, aux, tasks, source;
  std::size_t top = 10, timelines = 4;
};

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(const Options& o, std::ostream& out, const detail::Logger& log) {
  const RunConfig c = detail::load_run_config(o.config, o.seed);
  const fs::path root(o.out);
  detail::Manifest man{"gen-data", to_json(c), c.seed};
  man.inputs["config"] = detail::input_entry(o.config);
  for (const auto& t : c.suite.tasks)
    if (c.synergy.task_dependency.count(t.task_id))
      for (const char* s : {"train", "val", "test"}) man.artifacts[t.task_id + "/" + s] = t.task_id + "/" + s;
  man.write(root / "manifest.json");
  for (const auto& [task, parts] : generate_suite(c)) {
    const char* names[] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i) save_dataset(parts[static_cast<std::size_t>(i)], detail::split_dir(root, task, names[i]));
    out << task << " train=" << parts[0].size() << " val=" << parts[1].size() << " test=" << parts[2].size() << "\n";
    log("wrote " + task);
  }
  return 0;
}

inline RunConfig apply_train_overrides(RunConfig c, const Options& o) {
  if (!o.primary.empty()) c.train.primary = o.primary;
  if (!o.aux.empty()) c.train.aux = detail::split_list(o.aux);
  if (!o.tasks.empty()) c.train.tasks = detail::split_list(o.tasks);
  if (!o.source.empty()) c.train.transfer_source = o.source;
  return c;
}

inline int cmd_train_backbones(const RunConfig& c, const DataBank& data, const fs::path& dir, std::vector<std::string> only,
                               detail::Manifest man, std::ostream& out, const detail::Logger& log) {
  egot2::detail::Stopwatch clock;
  if (only.empty())
    for (const auto& [k, _] : data) only.push_back(k);
  for (const auto& id : only) {
    (void)c.task(id);
    man.artifacts["checkpoint:" + id] = id + ".egt2";
  }
  man.artifacts["metrics"] = "metrics.json";
  man.write(dir / "manifest.json");
  MetricReport report;
  report.variant = "backbone";
  for (const auto& id : only) {
    log("stage I: " + id);
    auto trained = run_stage1(c, data, {id});
    TrainedBackbone<float>& tb = trained.at(id);
    save_checkpoint_file(detail::backbone_file(dir, id), tb.checkpoint);
    report.metrics[id] = tb.val_metrics;
    report.loss_curves[id] = tb.loss_curve;
    report.trainable_params += tb.model.params().count();
    out << id << " " << json(tb.val_metrics).dump() << "\n";
  }
  report.total_params = report.trainable_params;
  detail::write_report(dir, "metrics", report);
  detail::write_timing(dir, clock.seconds());
  return 0;
}

inline DataBank data_for(const RunConfig& c, const Options& o, detail::Manifest& man) {
  if (o.data.empty()) return train_val(generate_suite(c));
  man.inputs["data"] = detail::input_entry(o.data);
  return detail::load_bank(o.data, c);
}

inline int cmd_train(const Options& o, std::ostream& out, const detail::Logger& log) {
  RunConfig c = detail::load_run_config(o.config, o.seed);
  const fs::path dir(o.out);
  detail::Manifest man{"train --variant " + o.variant, json(), c.seed};
  man.inputs["config"] = detail::input_entry(o.config);
  if (o.variant == "backbone") {
    man.config = to_json(c);
    DataBank data = data_for(c, o, man);
    return cmd_train_backbones(c, data, dir, detail::split_list(o.tasks), man, out, log);
  }
  c = apply_train_overrides(c, o);
  c.train.variant = variant_from(o.variant);
  validate_train(c.train, c.suite.tasks);
  man.config = to_json(c);
  egot2::detail::Stopwatch clock;
  const BackboneBank bank = detail::load_backbones(o.ckpts.empty() ? std::nullopt : std::optional<std::string>(o.ckpts), c, &man.inputs);
  DataBank data = data_for(c, o, man);
  man.artifacts["checkpoint"] = "model.egt2";
  man.artifacts["metrics"] = "metrics.json";
  man.write(dir / "manifest.json");
  log("training " + to_string(c.train.variant));

  MetricReport report;
  Checkpoint ck;
  switch (c.train.variant) {
    case Variant::egot2s: {
      auto r = train_egot2s(c, bank, data);
      ck = r.to_checkpoint(c);
      report = r.report;
      break;
    }
    case Variant::egot2g: {
      auto r = train_egot2g(c, bank, data);
      ck = r.to_checkpoint(c);
      report = r.report;
      break;
    }
    default: {
      auto r = run_baseline(c, bank, data);
      ck = std::move(r.checkpoint);
      report = r.report;
    }
  }
  ck.meta["stride_s"] = c.data.stride_s;
  save_checkpoint_file(dir / "model.egt2", ck);
  detail::write_report(dir, "metrics", report);
  detail::write_timing(dir, clock.seconds());
  for (const auto& [task, m] : report.metrics) out << task << " " << json(m).dump() << "\n";
  for (const auto& n : report.notices) out << "notice: " << n << "\n";
  return 0;
}

inline int cmd_train_backbone(const Options& o, std::ostream& out, const detail::Logger& log) {
  const RunConfig c = detail::load_run_config(o.config, o.seed);
  (void)c.task(o.task);
  detail::Manifest man{"train-backbone --task " + o.task, to_json(c), c.seed};
  man.inputs["config"] = detail::input_entry(o.config);
  DataBank data = data_for(c, o, man);
  (void)need_data(data, o.task);
  const fs::path file(o.out);
  man.artifacts["checkpoint"] = file.filename().string();
  fs::path mpath = file;
  mpath += ".manifest.json";
  man.write(mpath);
  log("stage I: " + o.task);
  auto trained = run_stage1(c, data, {o.task});
  save_checkpoint_file(file, trained.at(o.task).checkpoint);
  out << o.task << " " << json(trained.at(o.task).val_metrics).dump() << "\n";
  return 0;
}

// Evaluation datasets for a list of tasks: a single dataset directory or a gen-data root.
inline std::vector<Dataset> eval_datasets(const fs::path& data, const std::string& split, const std::vector<std::string>& tasks) {
  if (detail::is_dataset_dir(data)) {
    Dataset d = load_dataset(data);
    if (std::find(tasks.begin(), tasks.end(), d.task.task_id) == tasks.end()) {
      std::string list;
      for (const auto& t : tasks) list += " " + t;
      throw Incompatible("dataset task '" + d.task.task_id + "' does not match checkpoint tasks:" + list);
    }
    return {std::move(d)};
  }
  std::vector<Dataset> out;
  std::string missing;
  for (const auto& t : tasks) {
    const fs::path p = detail::split_dir(data, t, split);
    if (!fs::exists(p / "manifest.json")) {
      missing += " " + p.string();
      continue;
    }
    out.push_back(load_dataset(p));
  }
  if (!missing.empty()) throw MissingPrerequisite("missing datasets:" + missing);
  return out;
}

inline MetricReport evaluate_checkpoint(const Checkpoint& ck, const fs::path& data, const std::string& split) {
  const std::string kind = ck.meta.value("kind", "");
  const double stride = ck.meta.value("stride_s", 4.0);
  MetricReport r;
  r.variant = kind;
  if (kind == "backbone") {
    auto m = TaskModel<float>::from_checkpoint(ck);
    for (const auto& d : eval_datasets(data, split, {m.spec().task_id})) r.metrics[d.task.task_id] = evaluate_backbone(m, d);
    r.total_params = r.trainable_params = m.params().count();
  } else if (kind == "egot2s") {
    auto tr = Translator<float>::from_checkpoint(ck);
    auto bbs = extract_backbones<float>(ck);
    for (const auto& d : eval_datasets(data, split, {tr.spec().primary.task_id}))
      r.metrics[d.task.task_id] = evaluate_egot2s(tr, bbs, d, d.modality, stride);
    r.trainable_params = r.total_params = tr.params().count();
    for (const auto& b : bbs) r.total_params += b.parameter_count();
  } else if (kind == "egot2g") {
    auto g = GeneralTranslator<float>::from_checkpoint(ck);
    auto bbs = extract_backbones<float>(ck);
    const bool pool = ck.meta.value("temporal_pool", false);
    std::vector<std::string> ids;
    for (const auto& t : g.spec().tasks) ids.push_back(t.task_id);
    for (const auto& d : eval_datasets(data, split, ids)) {
      auto ev = evaluate_egot2g(g, bbs, d, d.modality, stride, pool);
      r.metrics[d.task.task_id] = ev.metrics;
      r.valid_rate[d.task.task_id] = ev.valid_rate;
    }
    r.trainable_params = r.total_params = g.params().count();
    for (const auto& b : bbs) r.total_params += b.parameter_count();
  } else if (kind == "finetune" || kind == "transfer" || kind == "late_fusion") {
    auto pm = probe_from_checkpoint(ck);
    for (const auto& d : eval_datasets(data, split, {pm.primary.task_id}))
      r.metrics[d.task.task_id] = evaluate_probe_model(pm, d, d.modality, stride);
    r.trainable_params = r.total_params = pm.store->count();
    for (const auto& b : pm.backbones) r.total_params += b.parameter_count();
  } else if (kind == "mtl_hard_share") {
    auto m = mtl_from_checkpoint(ck);
    std::vector<std::string> ids;
    for (const auto& [k, _] : m.heads) ids.push_back(k);
    for (const auto& d : eval_datasets(data, split, ids)) r.metrics[d.task.task_id] = evaluate_mtl(m, d);
    r.trainable_params = r.total_params = count_params(m.encoder->encoder_params()) + m.heads_store->count();
  } else {
    throw Incompatible("unknown checkpoint kind '" + kind + "' (field: meta.kind)");
  }
  return r;
}

inline int cmd_eval(const Options& o, std::ostream& out, const detail::Logger& log) {
  if (o.split != "train" && o.split != "val" && o.split != "test") throw ConfigError("--split must be train, val or test");
  const fs::path dir(o.out);
  const Checkpoint ck = load_checkpoint_file(o.ckpt);
  detail::Manifest man{"eval --split " + o.split, json(), ck.meta.value("seed", std::uint64_t{0})};
  man.inputs["checkpoint"] = detail::input_entry(o.ckpt);
  man.inputs["data"] = detail::input_entry(o.data);
  man.artifacts["metrics"] = "eval_" + o.split + ".json";
  man.write(dir / "manifest.json");
  log("evaluating " + ck.meta.value("kind", std::string("?")) + " on " + o.split);
  egot2::detail::Stopwatch clock;
  const MetricReport r = evaluate_checkpoint(ck, o.data, o.split);
  detail::write_report(dir, "eval_" + o.split, r);
  detail::write_timing(dir, clock.seconds());
  for (const auto& [task, m] : r.metrics) out << task << " " << json(m).dump() << "\n";
  return 0;
}

inline int cmd_analyze(const Options& o, std::ostream& out, const detail::Logger& log) {
  const fs::path run(o.run), dir(o.out);
  if (!fs::exists(run / "manifest.json")) throw MissingPrerequisite("run directory " + run.string() + " has no manifest.json");
  const json rm = json::parse(read_text(run / "manifest.json"));
  if (!rm.contains("artifacts") || !rm.at("artifacts").contains("checkpoint"))
    throw Incompatible(run.string() + ": manifest lists no checkpoint (field: artifacts.checkpoint)");
  const fs::path ckpath = run / rm.at("artifacts").at("checkpoint").get<std::string>();
  const Checkpoint ck = load_checkpoint_file(ckpath);
  const std::string kind = ck.meta.value("kind", "");
  if (kind != "egot2s" && kind != "egot2g") throw Incompatible("analyze needs an egot2s or egot2g run, got '" + kind + "'");
  fs::path data = o.data;
  if (data.empty()) {
    if (!rm.contains("inputs") || !rm.at("inputs").contains("data"))
      throw MissingPrerequisite("run was trained on generated data; pass --data");
    const json& in = rm.at("inputs").at("data");
    data = in.at("path").get<std::string>();
    if (digest_path(data) != in.at("digest").get<std::string>()) throw Incompatible("data digest changed since the run: " + data.string());
  }
  detail::Manifest man{"analyze", rm.value("config", json()), rm.value("seed", std::uint64_t{0})};
  man.inputs["checkpoint"] = detail::input_entry(ckpath);
  man.inputs["data"] = detail::input_entry(data);
  man.artifacts["relations"] = "attention/relations.csv";
  man.write(dir / "manifest.json");
  const double stride = ck.meta.value("stride_s", 4.0);
  const fs::path adir = dir / "attention";
  if (kind == "egot2s") {
    auto tr = Translator<float>::from_checkpoint(ck);
    if (!tr.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this run (fusion.capture_attention=false)");
    auto bbs = extract_backbones<float>(ck);
    const Dataset val = eval_datasets(data, o.split, {tr.spec().primary.task_id}).front();
    log("relation matrix over " + std::to_string(val.size()) + " clips");
    const auto m = relation_matrix_s(tr, bbs, val, val.modality, stride);
    std::vector<std::string> ids;
    for (const auto& s : tr.spec().sources) ids.push_back(s.source_id);
    emit_report(adir, m, egot2s_timelines(tr, bbs, val, val.modality, stride, o.timelines), ids);
    std::ostringstream seg;
    seg.precision(17);
    seg << "source,rank,clip_id,window,weight\n";
    for (const auto& sid : ids) {
      const auto top = top_segments(tr, bbs, val, val.modality, stride, sid, o.top);
      for (std::size_t i = 0; i < top.size(); ++i) seg << sid << "," << i + 1 << "," << top[i].clip_id << "," << top[i].window << "," << top[i].weight << "\n";
    }
    write_text(adir / "top_segments.csv", seg.str());
    out << relations_csv(m);
  } else {
    auto g = GeneralTranslator<float>::from_checkpoint(ck);
    if (!g.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this run (fusion.capture_attention=false)");
    auto bbs = extract_backbones<float>(ck);
    std::vector<std::string> ids;
    for (const auto& t : g.spec().tasks) ids.push_back(t.task_id);
    const auto vals = eval_datasets(data, o.split, ids);
    const auto m = relation_matrix_g(g, bbs, vals, vals.front().modality, stride, ck.meta.value("temporal_pool", false));
    std::vector<std::string> src;
    for (const auto& s : g.spec().sources) src.push_back(s.source_id);
    emit_report(adir, m, {}, src);
    out << relations_csv(m);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"egot2: task translation over frozen task-specific models"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Run seed (overrides the config)");
  app.add_flag("--verbose,-v", o.verbose, "Progress on stderr");

  auto* gen = app.add_subcommand("gen-data", "Generate and serialize all suite datasets");
  gen->add_option("--config", o.config)->required()->check(CLI::ExistingFile);
  gen->add_option("--out", o.out)->required();

  auto* train = app.add_subcommand("train", "Train stage-I backbones, a translator, or a baseline");
  train->add_option("--variant", o.variant)
      ->required()
      ->check(CLI::IsMember({"backbone", "egot2s", "egot2g", "finetune", "transfer", "late_fusion", "mtl", "mtl_hard_share"}));
  train->add_option("--config", o.config)->required()->check(CLI::ExistingFile);
  train->add_option("--data", o.data, "gen-data directory (generated in memory when omitted)");
  train->add_option("--ckpts", o.ckpts, "Directory of stage-I checkpoints <task>.egt2");
  train->add_option("--out", o.out)->required();
  train->add_option("--primary", o.primary);
  train->add_option("--aux", o.aux, "Comma-separated auxiliary tasks");
  train->add_option("--tasks", o.tasks, "Comma-separated task set (egot2g, mtl, backbone)");
  train->add_option("--source", o.source, "Transfer source task");

  auto* tb = app.add_subcommand("train-backbone", "Train one stage-I model");
  tb->add_option("--task", o.task)->required();
  tb->add_option("--config", o.config)->required()->check(CLI::ExistingFile);
  tb->add_option("--data", o.data);
  tb->add_option("--out", o.out, "Checkpoint file")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--ckpt", o.ckpt)->required();
  ev->add_option("--data", o.data)->required();
  ev->add_option("--split", o.split);
  ev->add_option("--out", o.out)->required();

  auto* an = app.add_subcommand("analyze", "Task-relation matrices and attention reports for a run");
  an->add_option("--run", o.run)->required();
  an->add_option("--out", o.out)->required();
  an->add_option("--data", o.data, "Overrides the data directory recorded in the run manifest");
  an->add_option("--split", o.split);
  an->add_option("--top", o.top, "Segments kept per source");
  an->add_option("--timelines", o.timelines, "Clips with per-token timelines");

  for (auto* sub : {gen, train, tb, ev, an}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "code=2 error=usage message=\"" << e.what() << "\"\n";
    return 2;
  }
  if (*seed_opt) o.seed = seed;
  detail::Logger log{o.verbose, &err};
  try {
    if (*gen) return cmd_gen_data(o, out, log);
    if (*train) return cmd_train(o, out, log);
    if (*tb) return cmd_train_backbone(o, out, log);
    if (*ev) return cmd_eval(o, out, log);
    if (*an) return cmd_analyze(o, out, log);
  } catch (const Error& e) {
    err << "code=" << e.exit_code() << " message=\"" << e.what() << "\"\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "code=1 message=\"" << e.what() << "\"\n";
    return 1;
  }
  return 1;
}

}  // namespace egot2::cli
