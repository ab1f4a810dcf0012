// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <cstdio>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "egot2/cli.hpp"
#include "egot2/egot2.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace egot2;
using egot2::testing::MicroSuite;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string pts(double x) { return fmt("%.1f", 100 * x); }

RunConfig shipped(const std::string& name, std::uint64_t seed) {
  RunConfig c = load_config(fs::path(EGOT2_CONFIG_DIR) / (name + ".json"));
  c.seed = seed;
  return c;
}

double acc(const MetricReport& r, const std::string& task) { return r.metrics.at(task).at("accuracy"); }

std::map<std::string, Bytes> snapshot(const BackboneBank& bank) {
  std::map<std::string, Bytes> out;
  for (const auto& [k, b] : bank) out[k] = encode_checkpoint(b.to_checkpoint({}));
  return out;
}

template <class S>
bool run_uses_bank(const std::vector<std::string>& ids, const std::vector<FrozenModel<S>>& used, const std::map<std::string, Bytes>& snap) {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (encode_checkpoint(used[i].to_checkpoint({})) != snap.at(ids[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------

Outcome tokenizer_bijection() {
  detail::Stopwatch clock;
  const auto suite = default_suite_config().tasks;
  Vocabulary v(suite);
  std::size_t total = 0, good = 0;
  std::set<std::vector<int>> seen;
  for (const auto& t : suite)
    for (const auto& y : enumerate_labels(t.label_space)) {
      const auto ids = tokenize(v, t, y).ids;
      const Decoded d = detokenize(v, t, ids);
      ++total;
      good += d.ok() && *d.label == y && seen.insert(ids).second;
    }
  const double s = clock.seconds();
  return {good == total && s < 1.0, std::to_string(good) + "/" + std::to_string(total) + " labels round-trip, " + fmt("%.3f s", s)};
}

Outcome prompt_mask() {
  const auto suite = default_suite_config().tasks;
  Vocabulary v(suite);
  Rng rng(31);
  bool ok = true;
  double worst_grad = 0, worst_delta = 0;
  for (const auto& task : suite)
    for (const auto& y : {enumerate_labels(task.label_space).front(), enumerate_labels(task.label_space).back()}) {
      const auto target = tokenize(v, task, y);
      const Matrix<double> base = normal_init<double>(static_cast<Eigen::Index>(target.size()), v.size(), 1.0, rng);
      ag::Tape<double> t;
      auto x = t.push(base, true, [](ag::Tape<double>&, int) {});
      auto l = seq_loss(x, target);
      t.backward(l);
      worst_grad = std::max(worst_grad, t.grad(x.id).row(0).cwiseAbs().maxCoeff());
      for (int k = 0; k < 5; ++k) {
        Matrix<double> p = base;
        p.row(0) += normal_init<double>(1, v.size(), 10.0, rng);
        ag::Tape<double> t2;
        const double d = std::abs(seq_loss(t2.constant(p), target).value()(0, 0) - l.value()(0, 0));
        worst_delta = std::max(worst_delta, d);
      }
    }
  ok = worst_grad == 0.0 && worst_delta == 0.0;
  return {ok, "max |dloss| " + fmt("%g", worst_delta) + ", max |grad| at prompt row " + fmt("%g", worst_grad)};
}

Outcome aggregation() {
  double f32 = 0, f64 = 0;
  for (std::uint64_t s : {1, 5, 9}) {
    f32 = std::max(f32, egot2::testing::aggregation_gap<float>(s));
    f64 = std::max(f64, egot2::testing::aggregation_gap<double>(s));
  }
  return {f32 < 1e-6 && f64 < 1e-12, "max rel diff f32 " + fmt("%.2e", f32) + ", f64 " + fmt("%.2e", f64)};
}

Outcome finite_differences() {
  MicroSuite m;
  FrozenModel<double> fa(TaskModel<double>(m.backbone("A", 6), 1));
  FrozenModel<double> fb(TaskModel<double>(m.backbone("B", 5), 2));
  std::vector<const FrozenModel<double>*> bbs{&fa, &fb};
  FusionConfig f;
  f.depth = 1;
  f.width = 8;
  f.heads = 2;
  std::vector<Dataset> data{generate_dataset(m.tasks[0], m.modality, m.synergy, 2, 7),
                            generate_dataset(m.tasks[1], m.modality, m.synergy, 2, 8)};

  Translator<double> tr({f, {{"A", "A", 6}, {"B", "B", 5}}, "A", m.tasks[0], false}, 3);
  auto build_s = [&](ag::Tape<double>& t) {
    std::vector<ag::Var<double>> losses;
    for (const auto& s : data[0].samples) losses.push_back(label_loss(forward_s(t, s, m.modality, bbs, tr, 1.0).logits, s.label));
    return ag::sum(losses);
  };
  const double proj = egot2::testing::max_relative_grad_error(tr.projection_params(), build_s);
  const double enc = egot2::testing::max_relative_grad_error(tr.encoder_params(), build_s);
  const double head = egot2::testing::max_relative_grad_error(tr.head_params(), build_s);

  GeneralTranslator<double> g({f, {1, 2, 2}, {{"A", "A", 6}, {"B", "B", 5}}, m.tasks}, 3);
  auto build_g = [&](ag::Tape<double>& t) {
    std::vector<ag::Var<double>> losses;
    for (std::size_t k = 0; k < data.size(); ++k)
      for (const Sample& s : data[k].samples) {
        std::vector<ag::Var<double>> feats;
        std::vector<FeatureLayout> lay;
        for (const auto* b : bbs) {
          auto in = std::get<AdaptedInput>(adapt_input(s, m.tasks[k], m.modality, b->spec(), 1.0));
          feats.push_back(b->features(t, in));
          lay.push_back(layout_of(in));
        }
        auto mem = g.encode(t, {0, 1}, feats, {&lay[0], &lay[1]}, false, false);
        losses.push_back(g.loss(t, mem.memory, m.tasks[k].task_id, s.label));
      }
    return ag::sum(losses);
  };
  const double dec = egot2::testing::max_relative_grad_error(g.params().group("decoder."), build_g);
  const double worst = std::max({proj, enc, head, dec});
  return {worst < 1e-4, "max rel err projections " + fmt("%.1e", proj) + ", encoder " + fmt("%.1e", enc) + ", heads " + fmt("%.1e", head) +
                            ", decoder " + fmt("%.1e", dec)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(2024);
  int ed_bad = 0, loc_bad = 0;
  double ap_worst = 0;
  {
    std::uniform_int_distribution<int> len(0, 10), sym(0, 4);
    for (int i = 0; i < 1000; ++i) {
      std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
      for (auto& x : a) x = sym(rng);
      for (auto& x : b) x = sym(rng);
      const int want = oracle::levenshtein(a, b);
      ed_bad += metrics::levenshtein(a, b) != want || metrics::ed_at_z({a}, {b}, 4) != static_cast<double>(want) / 4;
    }
  }
  {
    std::uniform_int_distribution<int> n(2, 40), bucket(0, 12);
    std::bernoulli_distribution coin(0.35);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> s(static_cast<std::size_t>(n(rng)));
      std::vector<int> p(s.size());
      for (auto& x : s) x = bucket(rng) / 12.0;
      for (auto& x : p) x = coin(rng);
      p[0] = 1;
      ap_worst = std::max(ap_worst, std::abs(metrics::average_precision(s, p) - oracle::average_precision(s, p)));
    }
  }
  {
    std::uniform_int_distribution<int> frame(0, 15), pick(0, 2), size(0, 3);
    const double rates[] = {1.0, 2.0, 4.0};
    for (int i = 0; i < 100; ++i) {
      const std::size_t k = std::size_t{1} << size(rng);
      const double rate = rates[pick(rng)];
      std::vector<int> p(k), g(k);
      for (std::size_t j = 0; j < k; ++j) {
        p[j] = frame(rng);
        g[j] = frame(rng);
      }
      loc_bad += metrics::loc_error(p, g, rate) != oracle::loc_error(p, g, rate);
    }
  }
  return {ed_bad == 0 && ap_worst < 1e-9 && loc_bad == 0, "edit distance mismatches " + std::to_string(ed_bad) + "/1000, mAP max diff " +
                                                               fmt("%.1e", ap_worst) + ", loc_error mismatches " + std::to_string(loc_bad) + "/100"};
}

// ---------------------------------------------------------------------------

struct RelatedSeed {
  double egot2s = 0, finetune = 0, rec = 0, obj = 0;
  bool frozen = false;
  Bytes checkpoint;
  Dataset val;
};

RelatedSeed related_seed(std::uint64_t seed) {
  RunConfig c = shipped("related", seed);
  const DataBank data = train_val(generate_suite(c));
  const BackboneBank bank = freeze_all(run_stage1(c, data, {"SCC", "REC", "OBJ"}));
  const auto before = snapshot(bank);
  RelatedSeed out;
  auto run = train_egot2s(c, bank, data);
  out.frozen = snapshot(bank) == before && run_uses_bank(run.source_ids, run.backbones, before);
  out.egot2s = acc(run.report, "SCC");
  RunConfig cf = c;
  cf.train.variant = Variant::finetune;
  cf.train.aux.clear();
  out.finetune = acc(run_baseline(cf, bank, data).report, "SCC");
  const auto rel = relation_matrix_s(*run.translator, run.backbones, data.at("SCC").val, c.suite.modality, c.data.stride_s);
  out.rec = rel.at("SCC", "REC");
  out.obj = rel.at("SCC", "OBJ");
  out.checkpoint = encode_checkpoint(run.to_checkpoint(c));
  out.val = data.at("SCC").val;
  return out;
}

struct IndependentSeed {
  double egot2s = 0, finetune = 0, transfer = 0, late = 0;
};

IndependentSeed independent_seed(std::uint64_t seed) {
  RunConfig c = shipped("independent", seed);
  const DataBank data = train_val(generate_suite(c));
  const BackboneBank bank = freeze_all(run_stage1(c, data, {"SCC", "OBJ"}));
  IndependentSeed out;
  out.egot2s = acc(train_egot2s(c, bank, data).report, "SCC");
  auto baseline = [&](Variant v) {
    RunConfig b = c;
    b.train.variant = v;
    if (v == Variant::finetune) b.train.aux.clear();
    b.train.transfer_source = "OBJ";
    return acc(run_baseline(b, bank, data).report, "SCC");
  };
  out.finetune = baseline(Variant::finetune);
  out.transfer = baseline(Variant::transfer);
  out.late = baseline(Variant::late_fusion);
  return out;
}

std::pair<double, double> temporal_seed(std::uint64_t seed) {
  RunConfig c = shipped("temporal", seed);
  const DataBank data = train_val(generate_suite(c));
  const BackboneBank bank = freeze_all(run_stage1(c, data, {"SCC", "REC"}));
  const double full = acc(train_egot2s(c, bank, data).report, "SCC");
  c.train.ablation.temporal_pool_tokens = true;
  return {full, acc(train_egot2s(c, bank, data).report, "SCC")};
}

struct ToyRun {
  Outcome validity;
  bool frozen = false;
  Bytes checkpoint;
};

ToyRun toy_suite() {
  RunConfig c = shipped("toy3", 0);
  const DataBank data = train_val(generate_suite(c));
  const BackboneBank bank = freeze_all(run_stage1(c, data, c.train.tasks));
  const auto before = snapshot(bank);
  auto g = train_egot2g(c, bank, data);
  ToyRun out;
  out.frozen = snapshot(bank) == before && run_uses_bank(g.source_ids, g.backbones, before);
  out.checkpoint = encode_checkpoint(g.to_checkpoint(c));
  bool ok = c.train.epochs == 20;
  std::ostringstream d;
  for (const auto& p : c.train.tasks) {
    RunConfig cs = c;
    cs.train.variant = Variant::egot2s;
    cs.train.primary = p;
    cs.train.aux.clear();
    cs.train.tasks.clear();
    for (const auto& q : c.train.tasks)
      if (q != p) cs.train.aux.push_back(q);
    const double s = acc(train_egot2s(cs, bank, data).report, p);
    const double gen = acc(g.report, p);
    const double valid = g.report.valid_rate.at(p);
    ok = ok && valid >= 0.95 && std::abs(gen - s) <= 0.05;
    d << p << " valid " << pts(valid) << "% acc g " << pts(gen) << " vs s " << pts(s) << "; ";
  }
  out.validity = {ok, d.str()};
  return out;
}

// ---------------------------------------------------------------------------

struct CliResult {
  int code = 0;
  std::string err;
};

CliResult invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "egot2");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = egot2::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, err.str()};
}

Outcome serialization(const RelatedSeed& related, const ToyRun& toy) {
  const fs::path root = fs::temp_directory_path() / "egot2_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  std::vector<std::string> failed;

  save_dataset(related.val, root / "ds_a");
  const Dataset back = load_dataset(root / "ds_a");
  save_dataset(back, root / "ds_b");
  if (!(back == related.val) || digest_path(root / "ds_a") != digest_path(root / "ds_b")) failed.push_back("dataset");

  for (const Bytes* b : {&related.checkpoint, &toy.checkpoint})
    if (encode_checkpoint(decode_checkpoint(*b)) != *b) failed.push_back("checkpoint");

  json j = json::parse(read_text(fs::path(EGOT2_CONFIG_DIR) / "default.json"));
  j["data"] = {{"n_samples", 40}, {"split", {0.5, 0.25, 0.25}}, {"stride_s", 4.0}};
  j["backbone"] = {{"width", 8}, {"layers", 1}, {"epochs", 2}, {"batch_size", 5}};
  j["fusion"] = {{"depth", 1}, {"width", 16}, {"heads", 2}, {"capture_attention", true}};
  j["seqgen"] = {{"depth", 1}, {"heads", 2}};
  j["train"] = {{"variant", "egot2s"}, {"primary", "SCC"}, {"aux", {"REC", "LOC"}}, {"tasks", {"LOC", "SCC", "REC"}},
                {"epochs", 2}, {"batch_size", 5}, {"transfer_source", "REC"}};
  const std::string cfg = (root / "config.json").string();
  write_text(cfg, j.dump(2));
  auto p = [&](const std::string& rel) { return (root / rel).string(); };
  std::vector<std::vector<std::string>> commands;
  for (const char* v : {"egot2s", "egot2g", "finetune", "late_fusion"}) commands.push_back({"train", "--variant", v});
  commands.push_back({"train", "--variant", "mtl", "--tasks", "LOC,SCC"});
  int runs = 0;
  for (const char* tag : {"a", "b"}) {
    const std::string t = tag;
    if (invoke({"gen-data", "--config", cfg, "--out", p("data_" + t)}).code != 0) failed.push_back("gen-data");
    if (invoke({"train", "--variant", "backbone", "--config", cfg, "--data", p("data_" + t), "--out", p("ckpts_" + t)}).code != 0)
      failed.push_back("train backbone");
    for (std::size_t i = 0; i < commands.size(); ++i) {
      auto args = commands[i];
      args.insert(args.end(), {"--config", cfg, "--data", p("data_" + t), "--ckpts", p("ckpts_" + t), "--out", p("run" + std::to_string(i) + "_" + t)});
      const auto r = invoke(args);
      if (r.code != 0) failed.push_back(args[2] + ": " + r.err);
    }
    if (invoke({"eval", "--ckpt", p("run0_" + t + "/model.egt2"), "--data", p("data_" + t), "--split", "test", "--out", p("eval_" + t)}).code != 0)
      failed.push_back("eval");
  }
  if (digest_path(root / "data_a") != digest_path(root / "data_b")) failed.push_back("gen-data bytes");
  for (std::size_t i = 0; i < commands.size(); ++i) {
    const fs::path a = root / ("run" + std::to_string(i) + "_a/metrics.json"), b = root / ("run" + std::to_string(i) + "_b/metrics.json");
    if (!fs::exists(a) || read_text(a) != read_text(b)) failed.push_back(commands[i][2] + " metrics.json");
    ++runs;
  }
  if (!fs::exists(root / "eval_a/eval_test.json") || read_text(root / "eval_a/eval_test.json") != read_text(root / "eval_b/eval_test.json"))
    failed.push_back("eval json");
  ++runs;
  fs::remove_all(root);
  std::string detail = "dataset and 2 checkpoints round-trip, " + std::to_string(runs) + " metric files compared";
  if (!failed.empty()) {
    detail = "mismatch:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty(), detail};
}

}  // namespace

int main() {
  std::map<int, Outcome> results;
  auto guard = [&](int id, const std::function<Outcome()>& f) {
    try {
      results[id] = f();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("exception: ") + e.what()};
    }
  };
  auto report = [&](int id) {
    const Outcome& o = results.at(id);
    std::cout << "criterion " << id << ' ' << (o.pass ? "PASS" : "FAIL") << ": " << o.detail << std::endl;
  };

  guard(1, tokenizer_bijection);
  report(1);
  guard(2, prompt_mask);
  report(2);
  guard(4, aggregation);
  guard(5, finite_differences);

  std::vector<RelatedSeed> related;
  double related_s = 0;
  guard(6, [&] {
    detail::Stopwatch clock;
    for (std::uint64_t s = 0; s < 3; ++s) related.push_back(related_seed(s));
    related_s = clock.seconds();
    bool ok = related_s <= 600;
    std::ostringstream d;
    for (std::size_t s = 0; s < related.size(); ++s) {
      const double gain = related[s].egot2s - related[s].finetune;
      ok = ok && gain >= 0.05;
      d << "seed " << s << " egot2s " << pts(related[s].egot2s) << " finetune " << pts(related[s].finetune) << " (+" << pts(gain) << "); ";
    }
    d << fmt("%.1f s", related_s);
    return Outcome{ok, d.str()};
  });
  guard(8, [&] {
    if (related.size() != 3) return Outcome{false, "criterion 6 run unavailable"};
    bool ok = true;
    std::ostringstream d;
    for (std::size_t s = 0; s < related.size(); ++s) {
      ok = ok && related[s].rec >= 2 * related[s].obj;
      d << "seed " << s << " REC " << fmt("%.3f", related[s].rec) << " OBJ " << fmt("%.3f", related[s].obj) << " ratio "
        << fmt("%.2f", related[s].rec / related[s].obj) << "; ";
    }
    return Outcome{ok, d.str()};
  });

  guard(7, [] {
    bool degraded = false, kept = true;
    std::ostringstream d;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto r = independent_seed(s);
      degraded = degraded || std::min(r.transfer, r.late) <= r.finetune - 0.02;
      kept = kept && std::abs(r.egot2s - r.finetune) <= 0.01;
      d << "seed " << s << " finetune " << pts(r.finetune) << " transfer " << pts(r.transfer) << " late " << pts(r.late) << " egot2s "
        << pts(r.egot2s) << "; ";
    }
    return Outcome{degraded && kept, d.str()};
  });

  guard(9, [] {
    bool ok = true;
    double gap = 0;
    std::ostringstream d;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto [full, pooled] = temporal_seed(s);
      ok = ok && pooled <= full;
      gap += (full - pooled) / 3;
      d << "seed " << s << " full " << pts(full) << " pooled " << pts(pooled) << "; ";
    }
    d << "mean gap " << pts(gap);
    return Outcome{ok && gap >= 0.02, d.str()};
  });

  ToyRun toy;
  guard(10, [&] {
    toy = toy_suite();
    return toy.validity;
  });
  guard(3, [&] {
    if (related.empty() || toy.checkpoint.empty()) return Outcome{false, "EgoT2-s or EgoT2-g run unavailable"};
    bool ok = toy.frozen;
    for (const auto& r : related) ok = ok && r.frozen;
    return Outcome{ok, "stage-I checkpoints byte-identical after " + std::to_string(related.size()) + " EgoT2-s and 1 EgoT2-g runs"};
  });
  guard(11, metric_oracles);
  guard(12, [&] {
    if (related.empty() || toy.checkpoint.empty()) return Outcome{false, "EgoT2-s or EgoT2-g run unavailable"};
    return serialization(related.front(), toy);
  });

  for (int id = 3; id <= 12; ++id) report(id);
  int failed = 0;
  for (const auto& [_, o] : results) failed += !o.pass;
  std::cout << (12 - failed) << "/12 criteria pass" << std::endl;
  return failed == 0 ? 0 : 1;
}
