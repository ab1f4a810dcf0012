#pragma once

// Stage I and stage II training for both translator variants, baselines,
// ablations, and evaluation into metric reports.

#include <chrono>
#include <sstream>

#include "egot2/config.hpp"

namespace egot2 {

struct TaskData {
  Dataset train, val;
};

using DataBank = std::map<std::string, TaskData>;
using BackboneBank = std::map<std::string, FrozenModel<float>>;

inline const TaskData& need_data(const DataBank& data, const std::string& task) {
  auto it = data.find(task);
  if (it == data.end()) throw MissingPrerequisite("missing dataset for task " + task);
  return it->second;
}

// Generates every task's dataset for a config and splits it; the test part is returned third.
inline std::map<std::string, std::array<Dataset, 3>> generate_suite(const RunConfig& c) {
  std::map<std::string, std::array<Dataset, 3>> out;
  for (const auto& t : c.suite.tasks) {
    if (!c.synergy.task_dependency.count(t.task_id)) continue;
    const std::uint64_t seed = mix_seed(c.seed, hash_string("data:" + t.task_id));
    Dataset d = generate_dataset(t, c.suite.modality, c.synergy, c.data.samples_for(t.task_id), seed);
    out[t.task_id] = split(d, c.data.split, mix_seed(seed, 0x5b117ULL));
  }
  return out;
}

inline DataBank train_val(const std::map<std::string, std::array<Dataset, 3>>& parts) {
  DataBank b;
  for (const auto& [k, p] : parts) b[k] = {p[0], p[1]};
  return b;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  std::string variant;
  std::map<std::string, std::map<std::string, double>> metrics;  // task -> metric -> value
  std::map<std::string, double> valid_rate;                      // egot2g: fraction of decodable outputs
  std::map<std::string, std::vector<double>> loss_curves;        // task -> per-epoch mean loss
  std::int64_t trainable_params = 0;
  std::int64_t total_params = 0;
  double wall_clock_s = 0;
  std::vector<std::string> notices;
};

// Wall-clock time is left out so that reruns produce identical bytes.
inline json to_json(const MetricReport& r) {
  return {{"variant", r.variant},
          {"metrics", r.metrics},
          {"valid_rate", r.valid_rate},
          {"loss_curves", r.loss_curves},
          {"trainable_params", r.trainable_params},
          {"total_params", r.total_params},
          {"notices", r.notices}};
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "task,metric,value\n";
  for (const auto& [task, m] : r.metrics)
    for (const auto& [name, v] : m) os << task << "," << name << "," << v << "\n";
  os << "*,trainable_params," << r.trainable_params << "\n";
  os << "*,total_params," << r.total_params << "\n";
  return os.str();
}

namespace detail {

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline FitOptions stage2_fit(const RunConfig& c, const std::string& salt) {
  return {c.train.epochs, c.train.batch_size, c.train.learning_rate(), c.train.weight_decay, mix_seed(c.seed, hash_string(salt))};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage I

inline std::uint64_t backbone_seed(std::uint64_t run_seed, const std::string& task) {
  return mix_seed(run_seed, hash_string("stage1:" + task));
}

// Trains one task-specific model per task (all tasks with data unless `only` is given).
inline std::map<std::string, TrainedBackbone<float>> run_stage1(const RunConfig& c, const DataBank& data,
                                                                const std::vector<std::string>& only = {}) {
  std::vector<std::string> ids = only;
  if (ids.empty())
    for (const auto& t : c.suite.tasks) ids.push_back(t.task_id);
  for (const auto& id : ids) (void)need_data(data, id);
  std::map<std::string, TrainedBackbone<float>> out;
  for (const auto& id : ids) {
    const TaskData& d = data.at(id);
    FitOptions fit = c.backbone.fit;
    fit.seed = backbone_seed(c.seed, id);
    out.emplace(id, train_task_model<float>(backbone_spec_for(c.task(id), c.suite.modality, c.backbone), d.train, d.val, fit));
  }
  return out;
}

inline BackboneBank freeze_all(const std::map<std::string, TrainedBackbone<float>>& trained) {
  BackboneBank bank;
  for (const auto& [k, tb] : trained) bank.emplace(k, FrozenModel<float>(TaskModel<float>::from_checkpoint(tb.checkpoint)));
  return bank;
}

// Stores source backbones inside a stage-II checkpoint under "backbone.<source_id>.".
template <class S>
void embed_backbones(Checkpoint& ck, const std::vector<std::string>& source_ids, const std::vector<FrozenModel<S>>& models) {
  json list = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    list.push_back({{"source_id", source_ids[i]}, {"spec", to_json(models[i].spec())}});
    append_params(ck, models[i].model().params(), "backbone." + source_ids[i] + ".");
  }
  ck.meta["backbones"] = list;
}

template <class S>
std::vector<FrozenModel<S>> extract_backbones(const Checkpoint& ck) {
  if (!ck.meta.contains("backbones")) throw FormatError("checkpoint has no embedded backbones (field: meta.backbones)");
  std::vector<FrozenModel<S>> out;
  for (const auto& b : ck.meta.at("backbones")) {
    TaskModel<S> m(backbone_spec_from_json(b.at("spec")), 0);
    load_params(m.params(), ck, "backbone." + b.at("source_id").get<std::string>() + ".");
    out.emplace_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clip preparation

// One clip seen through a list of translator sources.
template <class S>
struct CachedClip {
  std::string clip_id;
  Label label;
  std::vector<int> sources;  // translator source index of each entry below
  std::vector<FeatureLayout> layouts;
  std::vector<Matrix<S>> values;      // frozen features (empty when inputs are kept)
  std::vector<AdaptedInput> inputs;   // adapted inputs, kept when backbones are trained through
};

template <class S>
std::vector<CachedClip<S>> prepare_clips(const Dataset& d, const TaskSpec& task, const ModalityConfig& m,
                                         const std::vector<const FrozenModel<S>*>& bbs, const std::vector<int>& source_ids,
                                         double stride_s, bool keep_inputs) {
  std::vector<CachedClip<S>> out;
  out.reserve(d.samples.size());
  for (const auto& s : d.samples) {
    CachedClip<S> c{s.clip_id, s.label, source_ids, {}, {}, {}};
    for (const auto* b : bbs) {
      Adapted a = adapt_input(s, task, m, b->spec(), stride_s);
      if (std::holds_alternative<Excluded>(a)) throw ValidationError("no usable tasks: " + std::get<Excluded>(a).reason);
      auto& in = std::get<AdaptedInput>(a);
      c.layouts.push_back(layout_of(in));
      if (keep_inputs) c.inputs.push_back(std::move(in));
      else c.values.push_back(b->extract_features(in).values);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// Tape nodes for a prepared clip; `tuned` (indexed by source) switches to trainable backbones.
template <class S>
std::vector<ag::Var<S>> clip_vars(ag::Tape<S>& t, const CachedClip<S>& c, const std::vector<TaskModel<S>>* tuned) {
  std::vector<ag::Var<S>> v;
  for (std::size_t j = 0; j < c.sources.size(); ++j)
    v.push_back(tuned ? (*tuned)[static_cast<std::size_t>(c.sources[j])].features(t, c.inputs[j]) : t.constant(c.values[j]));
  return v;
}

template <class S>
std::vector<const FeatureLayout*> clip_layouts(const CachedClip<S>& c) {
  std::vector<const FeatureLayout*> l;
  for (const auto& x : c.layouts) l.push_back(&x);
  return l;
}

template <class S>
std::vector<TaskModel<S>> trainable_copies(const std::vector<FrozenModel<S>>& models) {
  std::vector<TaskModel<S>> out;
  out.reserve(models.size());
  for (const auto& m : models) {
    out.push_back(TaskModel<S>::from_checkpoint(m.to_checkpoint({})));
    out.back().params().set_trainable(true);
  }
  return out;
}

template <class S>
std::vector<Parameter<S>*> encoder_params_of(std::vector<TaskModel<S>>& models) {
  std::vector<Parameter<S>*> ps;
  for (auto& m : models)
    for (auto* p : m.encoder_params()) ps.push_back(p);
  return ps;
}

// ---------------------------------------------------------------------------
// EgoT2-s

template <class S>
struct EgoT2sRun {
  std::shared_ptr<Translator<S>> translator;
  std::vector<std::string> source_ids;
  std::vector<FrozenModel<S>> backbones;  // one per translator source, as used at evaluation
  MetricReport report;

  Checkpoint to_checkpoint(const RunConfig& c) const {
    Checkpoint ck = translator->to_checkpoint({{"kind", "egot2s"}, {"seed", c.seed}, {"primary", c.train.primary}});
    embed_backbones(ck, source_ids, backbones);
    return ck;
  }
};

template <class S>
std::vector<Prediction> predict_egot2s(const Translator<S>& tr, const std::vector<CachedClip<S>>& clips) {
  std::vector<Prediction> out;
  for (const auto& c : clips) {
    ag::Tape<S> t;
    auto vars = clip_vars<S>(t, c, nullptr);
    out.push_back(prediction_from_logits(tr.spec().primary.label_space, tr.forward(t, vars, clip_layouts(c), false).logits.value()));
  }
  return out;
}

template <class S>
std::map<std::string, double> evaluate_egot2s(const Translator<S>& tr, const std::vector<FrozenModel<S>>& backbones, const Dataset& d,
                                              const ModalityConfig& m, double stride_s) {
  if (d.task.task_id != tr.spec().primary.task_id)
    throw Incompatible("dataset task '" + d.task.task_id + "' does not match translator primary '" + tr.spec().primary.task_id + "'");
  std::vector<const FrozenModel<S>*> bbs;
  std::vector<int> ids;
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    bbs.push_back(&backbones[i]);
    ids.push_back(static_cast<int>(i));
  }
  const auto clips = prepare_clips(d, tr.spec().primary, m, bbs, ids, stride_s, false);
  std::vector<Label> labels;
  for (const auto& s : d.samples) labels.push_back(s.label);
  return score_task(d.task, predict_egot2s(tr, clips), labels);
}

inline std::string replica_id(const std::string& primary, std::size_t i) { return primary + "#" + std::to_string(i + 1); }

inline EgoT2sRun<float> train_egot2s(const RunConfig& c, const BackboneBank& bank, const DataBank& data) {
  detail::Stopwatch clock;
  if (c.train.variant != Variant::egot2s) throw ConfigError("train_egot2s: variant is " + to_string(c.train.variant));
  const TaskSpec& primary = c.task(c.train.primary);
  const TaskData& pd = need_data(data, primary.task_id);
  MetricReport report;
  report.variant = "egot2s";

  std::vector<std::string> ids;
  std::vector<FrozenModel<float>> candidates;
  std::string missing;
  if (auto it = bank.find(primary.task_id); it != bank.end()) {
    ids.push_back(primary.task_id);
    candidates.push_back(it->second);
  }
  for (std::size_t i = 0; i < c.train.aux.size(); ++i) {
    const std::string& a = c.train.aux[i];
    if (c.train.ablation.replace_aux_with_primary_copies) {
      FitOptions fit = c.backbone.fit;
      fit.seed = mix_seed(backbone_seed(c.seed, primary.task_id), 0xc0b1ULL + i);
      auto tb = train_task_model<float>(backbone_spec_for(primary, c.suite.modality, c.backbone), pd.train, pd.val, fit);
      ids.push_back(replica_id(primary.task_id, i));
      candidates.emplace_back(std::move(tb.model));
      continue;
    }
    auto it = bank.find(a);
    if (it == bank.end()) {
      missing += " " + a;
      continue;
    }
    ids.push_back(a);
    candidates.push_back(it->second);
  }
  if (!missing.empty()) throw MissingPrerequisite("missing stage-I checkpoints:" + missing);

  std::vector<const FrozenModel<float>*> cptr;
  for (const auto& m : candidates) cptr.push_back(&m);
  const auto usable = usable_backbones<float>(primary, cptr, &report.notices);
  EgoT2sRun<float> run;
  std::vector<SourceInfo> sources;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (std::find(usable.begin(), usable.end(), cptr[i]) != usable.end()) {
      run.source_ids.push_back(ids[i]);
      run.backbones.push_back(candidates[i]);
      sources.push_back({ids[i], candidates[i].spec().task_id, candidates[i].spec().width});
    }

  TranslatorSpec spec{c.fusion, sources, primary.task_id, primary, c.train.ablation.temporal_pool_tokens};
  run.translator = std::make_shared<Translator<float>>(spec, mix_seed(c.seed, hash_string("egot2s:" + primary.task_id)));
  Translator<float>& tr = *run.translator;

  const bool unfreeze = c.train.ablation.unfreeze_backbones;
  std::vector<const FrozenModel<float>*> bbs;
  std::vector<int> src_idx;
  for (std::size_t i = 0; i < run.backbones.size(); ++i) {
    bbs.push_back(&run.backbones[i]);
    src_idx.push_back(static_cast<int>(i));
  }
  const auto train_clips = prepare_clips(pd.train, primary, c.suite.modality, bbs, src_idx, c.data.stride_s, unfreeze);
  std::vector<TaskModel<float>> tuned;
  std::vector<Parameter<float>*> params = tr.params().all();
  if (unfreeze) {
    tuned = trainable_copies(run.backbones);
    for (auto* p : encoder_params_of(tuned)) params.push_back(p);
  }
  report.loss_curves[primary.task_id] =
      fit<float>(params, train_clips.size(), detail::stage2_fit(c, "egot2s-fit"), [&](ag::Tape<float>& t, std::size_t i) {
        const auto& clip = train_clips[i];
        auto vars = clip_vars<float>(t, clip, unfreeze ? &tuned : nullptr);
        return label_loss(tr.forward(t, vars, clip_layouts(clip), false).logits, clip.label);
      });
  if (unfreeze) {
    run.backbones.clear();
    for (auto& m : tuned) run.backbones.push_back(freeze(std::move(m)));
  }

  report.metrics[primary.task_id] = evaluate_egot2s(tr, run.backbones, pd.val, c.suite.modality, c.data.stride_s);
  report.trainable_params = tr.params().count();
  report.total_params = tr.params().count();
  for (const auto& b : run.backbones) {
    report.total_params += b.parameter_count();
    if (unfreeze) report.trainable_params += count_params(b.model().encoder_params());
  }
  report.wall_clock_s = clock.seconds();
  run.report = std::move(report);
  return run;
}

// ---------------------------------------------------------------------------
// EgoT2-g

// Epoch-free batch stream over n items: reshuffles each time it runs out.
class CyclingSampler {
 public:
  CyclingSampler(std::size_t n, int batch, std::uint64_t seed) : n_(n), batch_(static_cast<std::size_t>(batch)), seed_(seed) { reshuffle(); }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> b;
    while (b.size() < std::min(batch_, n_)) {
      if (pos_ == order_.size()) reshuffle();
      b.push_back(order_[pos_++]);
    }
    return b;
  }

  std::size_t batches_per_pass() const { return (n_ + batch_ - 1) / batch_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(mix_seed(seed_, round_++));
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t round_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

template <class S>
struct TaskBatch {
  std::string task_id;
  std::vector<const CachedClip<S>*> clips;
};

// Mean sequence loss of one task batch.
template <class S>
ag::Var<S> task_batch_loss(ag::Tape<S>& t, const GeneralTranslator<S>& g, const TaskBatch<S>& b, bool temporal_pool,
                           const std::vector<TaskModel<S>>* tuned) {
  std::vector<ag::Var<S>> losses;
  for (const auto* c : b.clips) {
    auto mem = g.encode(t, c->sources, clip_vars<S>(t, *c, tuned), clip_layouts(*c), temporal_pool, false);
    losses.push_back(g.loss(t, mem.memory, b.task_id, c->label));
  }
  return ag::scale(ag::sum(losses), S(1) / static_cast<S>(losses.size()));
}

// Accumulates the gradient of L = sum_k L^{T_k} into parameter grads. With `per_task`
// each task batch gets its own backward pass and the K gradients are summed in the
// parameter buffers; otherwise L is differentiated in one joint pass. Returns each L^{T_k}.
template <class S>
std::vector<double> accumulate_task_gradients(const GeneralTranslator<S>& g, const std::vector<TaskBatch<S>>& batches, bool per_task,
                                              bool temporal_pool, const std::vector<TaskModel<S>>* tuned = nullptr) {
  std::vector<double> losses;
  if (per_task) {
    for (const auto& b : batches) {
      ag::Tape<S> t;
      ag::Var<S> l = task_batch_loss(t, g, b, temporal_pool, tuned);
      losses.push_back(static_cast<double>(l.value()(0, 0)));
      t.backward(l);
    }
  } else {
    ag::Tape<S> t;
    std::vector<ag::Var<S>> parts;
    for (const auto& b : batches) {
      parts.push_back(task_batch_loss(t, g, b, temporal_pool, tuned));
      losses.push_back(static_cast<double>(parts.back().value()(0, 0)));
    }
    t.backward(ag::sum(parts));
  }
  return losses;
}

template <class S>
struct EgoT2gRun {
  std::shared_ptr<GeneralTranslator<S>> translator;
  std::vector<std::string> source_ids;
  std::vector<FrozenModel<S>> backbones;
  MetricReport report;
  std::size_t optimizer_steps = 0;

  Checkpoint to_checkpoint(const RunConfig& c) const {
    Checkpoint ck = translator->to_checkpoint({{"kind", "egot2g"}, {"seed", c.seed}, {"temporal_pool", c.train.ablation.temporal_pool_tokens}});
    embed_backbones(ck, source_ids, backbones);
    return ck;
  }
};

// Sources usable for one task of the general translator, as translator source indices.
template <class S>
std::vector<int> usable_sources(const TaskSpec& task, const std::vector<FrozenModel<S>>& backbones, std::vector<std::string>* notices) {
  std::vector<const FrozenModel<S>*> all;
  for (const auto& b : backbones) all.push_back(&b);
  const auto ok = usable_backbones<S>(task, all, notices);
  std::vector<int> idx;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (std::find(ok.begin(), ok.end(), all[i]) != ok.end()) idx.push_back(static_cast<int>(i));
  return idx;
}

template <class S>
std::vector<CachedClip<S>> prepare_general_clips(const Dataset& d, const TaskSpec& task, const ModalityConfig& m,
                                                 const std::vector<FrozenModel<S>>& backbones, double stride_s, bool keep_inputs,
                                                 std::vector<std::string>* notices = nullptr) {
  const auto idx = usable_sources(task, backbones, notices);
  std::vector<const FrozenModel<S>*> bbs;
  for (int i : idx) bbs.push_back(&backbones[static_cast<std::size_t>(i)]);
  return prepare_clips(d, task, m, bbs, idx, stride_s, keep_inputs);
}

// Fused tokens of one prepared clip.
template <class S>
GeneralForward<S> general_memory(ag::Tape<S>& t, const GeneralTranslator<S>& g, const CachedClip<S>& c, bool temporal_pool, bool capture) {
  return g.encode(t, c.sources, clip_vars<S>(t, c, nullptr), clip_layouts(c), temporal_pool, capture);
}

struct GeneralEval {
  std::map<std::string, double> metrics;
  double valid_rate = 0;
  std::vector<Decoded> outputs;
};

template <class S>
GeneralEval evaluate_egot2g_task(const GeneralTranslator<S>& g, const std::vector<CachedClip<S>>& clips, const TaskSpec& task,
                                 bool temporal_pool) {
  GeneralEval ev;
  std::vector<Prediction> preds;
  std::vector<Label> labels;
  const Vocabulary& v = g.vocab();
  std::size_t ok = 0;
  for (const auto& c : clips) {
    ag::Tape<S> t;
    const Matrix<S> mem = general_memory(t, g, c, temporal_pool, false).memory.z.value();
    Decoded d = g.predict(mem, task.task_id);
    Prediction p;
    p.label = d.label;
    if (task.label_space.kind == LabelKind::binary) {
      ag::Tape<S> t2;
      const Matrix<S> z = g.decoder()(t2, t2.constant(mem), {v.prompt(task.task_id)}, nullptr).value();
      const double a = static_cast<double>(z(0, v.id("True"))), b = static_cast<double>(z(0, v.id("False")));
      p.score = 1.0 / (1.0 + std::exp(b - a));
    }
    ok += d.ok();
    preds.push_back(p);
    labels.push_back(c.label);
    ev.outputs.push_back(std::move(d));
  }
  ev.metrics = score_task(task, preds, labels);
  ev.valid_rate = clips.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(clips.size());
  return ev;
}

template <class S>
GeneralEval evaluate_egot2g(const GeneralTranslator<S>& g, const std::vector<FrozenModel<S>>& backbones, const Dataset& d,
                            const ModalityConfig& m, double stride_s, bool temporal_pool) {
  bool known = false;
  for (const auto& t : g.spec().tasks) known = known || t.task_id == d.task.task_id;
  if (!known) throw Incompatible("dataset task '" + d.task.task_id + "' is not served by this translator");
  const TaskSpec& task = g.task(d.task.task_id);
  return evaluate_egot2g_task(g, prepare_general_clips(d, task, m, backbones, stride_s, false), task, temporal_pool);
}

inline EgoT2gRun<float> train_egot2g(const RunConfig& c, const BackboneBank& bank, const DataBank& data) {
  detail::Stopwatch clock;
  if (c.train.variant != Variant::egot2g) throw ConfigError("train_egot2g: variant is " + to_string(c.train.variant));
  EgoT2gRun<float> run;
  MetricReport report;
  report.variant = "egot2g";
  std::vector<TaskSpec> tasks;
  std::string missing;
  for (const auto& id : c.train.tasks) {
    (void)need_data(data, id);
    tasks.push_back(c.task(id));
    auto it = bank.find(id);
    if (it == bank.end()) {
      missing += " " + id;
      continue;
    }
    run.source_ids.push_back(id);
    run.backbones.push_back(it->second);
  }
  if (!missing.empty()) throw MissingPrerequisite("missing stage-I checkpoints:" + missing);
  std::vector<SourceInfo> sources;
  for (const auto& b : run.backbones) sources.push_back({b.spec().task_id, b.spec().task_id, b.spec().width});
  run.translator = std::make_shared<GeneralTranslator<float>>(GeneralSpec{c.fusion, c.seqgen, sources, tasks},
                                                              mix_seed(c.seed, hash_string("egot2g")));
  GeneralTranslator<float>& g = *run.translator;
  const bool unfreeze = c.train.ablation.unfreeze_backbones;
  const bool pool = c.train.ablation.temporal_pool_tokens;

  std::vector<std::vector<CachedClip<float>>> clips;
  std::vector<CyclingSampler> samplers;
  std::size_t iters = 0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    clips.push_back(prepare_general_clips(need_data(data, tasks[k].task_id).train, tasks[k], c.suite.modality, run.backbones,
                                          c.data.stride_s, unfreeze, &report.notices));
    samplers.emplace_back(clips.back().size(), c.train.batch_for(tasks[k].task_id),
                          mix_seed(c.seed, hash_string("egot2g-batches:" + tasks[k].task_id)));
    iters = std::max(iters, samplers.back().batches_per_pass());
  }
  std::vector<TaskModel<float>> tuned;
  std::vector<Parameter<float>*> params = g.params().all();
  if (unfreeze) {
    tuned = trainable_copies(run.backbones);
    for (auto* p : encoder_params_of(tuned)) params.push_back(p);
  }
  AdamW<float> opt(params, {c.train.learning_rate(), c.train.weight_decay});
  for (int epoch = 0; epoch < c.train.epochs; ++epoch) {
    std::vector<double> totals(tasks.size(), 0.0);
    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<TaskBatch<float>> batches;
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        TaskBatch<float> b{tasks[k].task_id, {}};
        for (std::size_t i : samplers[k].next()) b.clips.push_back(&clips[k][i]);
        batches.push_back(std::move(b));
      }
      opt.zero_grad();
      const auto losses = accumulate_task_gradients(g, batches, true, pool, unfreeze ? &tuned : nullptr);
      opt.step();
      ++run.optimizer_steps;
      for (std::size_t k = 0; k < tasks.size(); ++k) totals[k] += losses[k];
    }
    for (std::size_t k = 0; k < tasks.size(); ++k) report.loss_curves[tasks[k].task_id].push_back(totals[k] / static_cast<double>(iters));
  }
  if (unfreeze) {
    run.backbones.clear();
    for (auto& m : tuned) run.backbones.push_back(freeze(std::move(m)));
  }
  for (const auto& t : tasks) {
    auto ev = evaluate_egot2g(g, run.backbones, need_data(data, t.task_id).val, c.suite.modality, c.data.stride_s, pool);
    report.metrics[t.task_id] = ev.metrics;
    report.valid_rate[t.task_id] = ev.valid_rate;
  }
  report.trainable_params = g.params().count();
  report.total_params = g.params().count();
  for (const auto& b : run.backbones) {
    report.total_params += b.parameter_count();
    if (unfreeze) report.trainable_params += count_params(b.model().encoder_params());
  }
  report.wall_clock_s = clock.seconds();
  run.report = std::move(report);
  return run;
}

// ---------------------------------------------------------------------------
// Baselines

// Hidden layer + task head over per-clip input rows.
template <class S>
struct Probe {
  nn::Linear<S> hidden;
  TaskHead<S> head;

  Probe() = default;
  Probe(ParamStore<S>& store, Eigen::Index in, Eigen::Index width, const LabelSpace& l, Rng& rng)
      : hidden(store, "probe.hidden", in, width, rng), head(store, "head", width, l, rng) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const { return head(t, ag::relu(hidden(t, x))); }
};

namespace detail {

inline Matrix<float> mean_row(const Matrix<float>& x) { return x.colwise().mean(); }

// Rows of `x` (with primary-frame positions `pos`) nearest to each of n primary frames.
inline Matrix<float> align_to_frames(const Matrix<float>& x, const std::vector<double>& pos, int n) {
  Matrix<float> out(n, x.cols());
  for (int f = 0; f < n; ++f) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < pos.size(); ++r)
      if (std::abs(pos[r] - f) < std::abs(pos[best] - f)) best = r;
    out.row(f) = x.row(static_cast<Eigen::Index>(best));
  }
  return out;
}

}  // namespace detail

struct ProbeInputs {
  std::vector<Matrix<float>> x;
  std::vector<Label> y;
};

// Builds baseline inputs for one dataset. Sources are in order; for finetune the list is the
// primary alone, for transfer the single auxiliary, for late fusion primary then auxiliaries.
inline ProbeInputs baseline_inputs(Variant v, const Dataset& d, const TaskSpec& primary, const ModalityConfig& m,
                                   const std::vector<const FrozenModel<float>*>& bbs, double stride_s) {
  ProbeInputs in;
  const bool per_frame = primary.label_space.kind == LabelKind::frame_index;
  std::vector<int> ids(bbs.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto clips = prepare_clips<float>(d, primary, m, bbs, ids, stride_s, false);
  for (const auto& c : clips) {
    Matrix<float> x;
    if (v == Variant::finetune || v == Variant::transfer) {
      x = per_frame ? detail::align_to_frames(c.values[0], c.layouts[0].position, primary.frames()) : c.values[0];
    } else {
      Eigen::Index width = 0;
      for (const auto& f : c.values) width += f.cols();
      const Eigen::Index rows = per_frame ? primary.frames() : 1;
      x.resize(rows, width);
      Eigen::Index col = 0;
      for (std::size_t j = 0; j < c.values.size(); ++j) {
        const Eigen::Index w = c.values[j].cols();
        if (per_frame && j == 0) x.middleCols(col, w) = detail::align_to_frames(c.values[0], c.layouts[0].position, primary.frames());
        else x.middleCols(col, w) = detail::mean_row(c.values[j]).replicate(rows, 1);
        col += w;
      }
    }
    in.x.push_back(std::move(x));
    in.y.push_back(c.label);
  }
  return in;
}

struct BaselineRun {
  MetricReport report;
  Checkpoint checkpoint;
};

inline std::map<std::string, double> evaluate_probe(const Probe<float>& probe, const TaskSpec& task, const ProbeInputs& in) {
  std::vector<Prediction> preds;
  for (const auto& x : in.x) {
    ag::Tape<float> t;
    preds.push_back(prediction_from_logits(task.label_space, probe(t, t.constant(x)).value()));
  }
  return score_task(task, preds, in.y);
}

// Shared-encoder multi-task model: one backbone encoder and one head per task.
struct MtlModel {
  std::shared_ptr<TaskModel<float>> encoder;
  std::shared_ptr<ParamStore<float>> heads_store;
  std::map<std::string, TaskHead<float>> heads;
};

inline void check_shared_arch(const std::vector<TaskSpec>& tasks) {
  for (const auto& t : tasks) {
    const auto& r = tasks.front();
    if (t.modalities != r.modalities || std::abs(t.span_s - r.span_s) > 1e-9 || std::abs(t.frame_rate_hz - r.frame_rate_hz) > 1e-9)
      throw Incompatible("mtl_hard_share: arch mismatch between " + r.task_id + " and " + t.task_id +
                         " (hard sharing needs one input format: modalities, span and frame rate)");
  }
}

inline MtlModel make_mtl(const RunConfig& c, const std::vector<TaskSpec>& tasks) {
  check_shared_arch(tasks);
  MtlModel m;
  BackboneSpec spec = backbone_spec_for(tasks.front(), c.suite.modality, c.backbone);
  spec.task_id = "shared";
  m.encoder = std::make_shared<TaskModel<float>>(spec, mix_seed(c.seed, hash_string("mtl-encoder")));
  m.heads_store = std::make_shared<ParamStore<float>>();
  Rng rng(mix_seed(c.seed, hash_string("mtl-heads")));
  for (const auto& t : tasks) m.heads.emplace(t.task_id, TaskHead<float>(*m.heads_store, "head." + t.task_id, spec.width, t.label_space, rng));
  return m;
}

inline std::map<std::string, double> evaluate_mtl(const MtlModel& m, const Dataset& d) {
  auto h = m.heads.find(d.task.task_id);
  if (h == m.heads.end()) throw Incompatible("dataset task '" + d.task.task_id + "' has no head in this model");
  std::vector<Prediction> preds;
  std::vector<Label> labels;
  for (const auto& s : d.samples) {
    ag::Tape<float> t;
    preds.push_back(prediction_from_logits(d.task.label_space, h->second(t, m.encoder->features(t, s)).value()));
    labels.push_back(s.label);
  }
  return score_task(d.task, preds, labels);
}

inline BaselineRun run_mtl(const RunConfig& c, const DataBank& data) {
  detail::Stopwatch clock;
  std::vector<TaskSpec> tasks;
  for (const auto& id : c.train.tasks) {
    (void)need_data(data, id);
    tasks.push_back(c.task(id));
  }
  MtlModel m = make_mtl(c, tasks);
  MetricReport report;
  report.variant = "mtl_hard_share";
  std::vector<Parameter<float>*> params = m.encoder->encoder_params();
  for (auto* p : m.heads_store->all()) params.push_back(p);
  AdamW<float> opt(params, {c.train.learning_rate(), c.train.weight_decay});
  std::vector<CyclingSampler> samplers;
  std::size_t iters = 0;
  for (const auto& t : tasks) {
    samplers.emplace_back(data.at(t.task_id).train.size(), c.train.batch_for(t.task_id), mix_seed(c.seed, hash_string("mtl:" + t.task_id)));
    iters = std::max(iters, samplers.back().batches_per_pass());
  }
  for (int epoch = 0; epoch < c.train.epochs; ++epoch) {
    std::vector<double> totals(tasks.size(), 0.0);
    for (std::size_t it = 0; it < iters; ++it) {
      opt.zero_grad();
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        const Dataset& d = data.at(tasks[k].task_id).train;
        ag::Tape<float> t;
        std::vector<ag::Var<float>> losses;
        for (std::size_t i : samplers[k].next())
          losses.push_back(label_loss(m.heads.at(tasks[k].task_id)(t, m.encoder->features(t, d.samples[i])), d.samples[i].label));
        ag::Var<float> l = ag::scale(ag::sum(losses), 1.0f / static_cast<float>(losses.size()));
        totals[k] += l.value()(0, 0);
        t.backward(l);
      }
      opt.step();
    }
    for (std::size_t k = 0; k < tasks.size(); ++k) report.loss_curves[tasks[k].task_id].push_back(totals[k] / static_cast<double>(iters));
  }
  for (const auto& t : tasks) report.metrics[t.task_id] = evaluate_mtl(m, data.at(t.task_id).val);
  report.trainable_params = count_params(params);
  report.total_params = report.trainable_params;
  report.wall_clock_s = clock.seconds();
  json task_list = json::array();
  for (const auto& t : tasks) task_list.push_back(to_json(t));
  Checkpoint ck;
  ck.meta = {{"kind", "mtl_hard_share"}, {"seed", c.seed}, {"tasks", task_list}, {"encoder", to_json(m.encoder->spec())}};
  for (auto* p : m.encoder->encoder_params()) ck.arrays.emplace_back("encoder." + p->name, to_f32(p->value));
  append_params(ck, *m.heads_store);
  return {std::move(report), std::move(ck)};
}

inline MtlModel mtl_from_checkpoint(const Checkpoint& ck) {
  MtlModel m;
  m.encoder = std::make_shared<TaskModel<float>>(backbone_spec_from_json(ck.meta.at("encoder")), 0);
  m.heads_store = std::make_shared<ParamStore<float>>();
  Rng rng(0);
  for (const auto& tj : ck.meta.at("tasks")) {
    TaskSpec t = task_spec_from_json(tj, "tasks");
    m.heads.emplace(t.task_id, TaskHead<float>(*m.heads_store, "head." + t.task_id, m.encoder->spec().width, t.label_space, rng));
  }
  for (auto* p : m.encoder->encoder_params()) {
    const Matrix<float>* a = ck.find("encoder." + p->name);
    if (!a || a->rows() != p->value.rows() || a->cols() != p->value.cols()) throw Incompatible("checkpoint lacks encoder." + p->name);
    p->value = *a;
  }
  Checkpoint heads;
  for (const auto& [name, a] : ck.arrays)
    if (name.rfind("head.", 0) == 0) heads.arrays.emplace_back(name, a);
  load_params(*m.heads_store, heads);
  return m;
}

// Frozen-feature baseline probe with its sources.
struct ProbeModel {
  Variant variant = Variant::finetune;
  TaskSpec primary;
  std::vector<std::string> source_ids;
  std::vector<FrozenModel<float>> backbones;
  std::shared_ptr<ParamStore<float>> store;
  Probe<float> probe;
  int hidden = 0;
  Eigen::Index in_width = 0;
};

inline std::map<std::string, double> evaluate_probe_model(const ProbeModel& pm, const Dataset& d, const ModalityConfig& m, double stride_s) {
  if (d.task.task_id != pm.primary.task_id)
    throw Incompatible("dataset task '" + d.task.task_id + "' does not match probe primary '" + pm.primary.task_id + "'");
  std::vector<const FrozenModel<float>*> bbs;
  for (const auto& b : pm.backbones) bbs.push_back(&b);
  return evaluate_probe(pm.probe, pm.primary, baseline_inputs(pm.variant, d, pm.primary, m, bbs, stride_s));
}

inline Checkpoint probe_checkpoint(const ProbeModel& pm, std::uint64_t seed) {
  Checkpoint ck;
  ck.meta = {{"kind", to_string(pm.variant)},
             {"seed", seed},
             {"primary", to_json(pm.primary)},
             {"hidden", pm.hidden},
             {"in_width", pm.in_width}};
  append_params(ck, *pm.store, "probe.");
  embed_backbones(ck, pm.source_ids, pm.backbones);
  return ck;
}

inline ProbeModel probe_from_checkpoint(const Checkpoint& ck) {
  ProbeModel pm;
  pm.variant = variant_from(ck.meta.at("kind"));
  pm.primary = task_spec_from_json(ck.meta.at("primary"), "primary");
  pm.hidden = ck.meta.at("hidden");
  pm.in_width = ck.meta.at("in_width");
  for (const auto& b : ck.meta.at("backbones")) pm.source_ids.push_back(b.at("source_id"));
  pm.backbones = extract_backbones<float>(ck);
  pm.store = std::make_shared<ParamStore<float>>();
  Rng rng(0);
  pm.probe = Probe<float>(*pm.store, pm.in_width, pm.hidden, pm.primary.label_space, rng);
  load_params(*pm.store, ck, "probe.");
  return pm;
}

inline BaselineRun run_baseline(const RunConfig& c, const BackboneBank& bank, const DataBank& data) {
  const Variant v = c.train.variant;
  if (v == Variant::mtl_hard_share) return run_mtl(c, data);
  if (v != Variant::finetune && v != Variant::transfer && v != Variant::late_fusion)
    throw ConfigError("run_baseline: '" + to_string(v) + "' is not a baseline variant");
  detail::Stopwatch clock;
  const TaskSpec& primary = c.task(c.train.primary);
  const TaskData& pd = need_data(data, primary.task_id);
  MetricReport report;
  report.variant = to_string(v);

  std::vector<std::string> wanted;
  if (v == Variant::finetune) wanted = {primary.task_id};
  else if (v == Variant::transfer) wanted = {c.train.transfer_source};
  else {
    wanted = {primary.task_id};
    wanted.insert(wanted.end(), c.train.aux.begin(), c.train.aux.end());
  }
  std::string missing;
  for (const auto& w : wanted)
    if (!bank.count(w)) missing += " " + w;
  if (!missing.empty()) throw MissingPrerequisite("missing stage-I checkpoints:" + missing);

  ProbeModel pm;
  pm.variant = v;
  pm.primary = primary;
  std::vector<const FrozenModel<float>*> cands;
  for (const auto& w : wanted) cands.push_back(&bank.at(w));
  const auto usable = usable_backbones<float>(primary, cands, &report.notices);
  if (v == Variant::late_fusion && usable.front() != cands.front())
    throw ValidationError("late_fusion: the primary backbone must be usable");
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (std::find(usable.begin(), usable.end(), cands[i]) != usable.end()) {
      pm.source_ids.push_back(wanted[i]);
      pm.backbones.push_back(*cands[i]);
    }
  std::vector<const FrozenModel<float>*> bbs;
  for (const auto& b : pm.backbones) bbs.push_back(&b);
  const ProbeInputs train = baseline_inputs(v, pd.train, primary, c.suite.modality, bbs, c.data.stride_s);
  pm.in_width = train.x.front().cols();
  pm.hidden = c.train.probe_hidden;
  pm.store = std::make_shared<ParamStore<float>>();
  Rng rng(mix_seed(c.seed, hash_string("probe:" + to_string(v))));
  pm.probe = Probe<float>(*pm.store, pm.in_width, pm.hidden, primary.label_space, rng);
  report.loss_curves[primary.task_id] =
      fit<float>(pm.store->all(), train.x.size(), detail::stage2_fit(c, "probe-fit"), [&](ag::Tape<float>& t, std::size_t i) {
        return label_loss(pm.probe(t, t.constant(train.x[i])), train.y[i]);
      });
  report.metrics[primary.task_id] = evaluate_probe_model(pm, pd.val, c.suite.modality, c.data.stride_s);
  report.trainable_params = pm.store->count();
  report.total_params = pm.store->count();
  for (const auto& b : pm.backbones) report.total_params += b.parameter_count();
  report.wall_clock_s = clock.seconds();
  return {std::move(report), probe_checkpoint(pm, c.seed)};
}

}  // namespace egot2
