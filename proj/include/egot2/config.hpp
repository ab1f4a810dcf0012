#pragma once

// Run configuration: one strict JSON document (schema_version 1). Unknown keys are errors.

#include <array>
#include <optional>

#include "egot2/seqgen.hpp"

namespace egot2 {

inline constexpr int kSchemaVersion = 1;

struct DataConfig {
  int n_samples = 200;
  std::map<std::string, int> n_samples_per_task;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  double stride_s = 4.0;

  int samples_for(const std::string& task) const {
    auto it = n_samples_per_task.find(task);
    return it == n_samples_per_task.end() ? n_samples : it->second;
  }
};

struct AblationFlags {
  bool replace_aux_with_primary_copies = false;
  bool temporal_pool_tokens = false;
  bool unfreeze_backbones = false;

  bool any() const { return replace_aux_with_primary_copies || temporal_pool_tokens || unfreeze_backbones; }
};

enum class Variant { egot2s, egot2g, finetune, transfer, late_fusion, mtl_hard_share };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::egot2s: return "egot2s";
    case Variant::egot2g: return "egot2g";
    case Variant::finetune: return "finetune";
    case Variant::transfer: return "transfer";
    case Variant::late_fusion: return "late_fusion";
    case Variant::mtl_hard_share: return "mtl_hard_share";
  }
  return "";
}

inline Variant variant_from(const std::string& s) {
  for (Variant v : {Variant::egot2s, Variant::egot2g, Variant::finetune, Variant::transfer, Variant::late_fusion,
                    Variant::mtl_hard_share})
    if (to_string(v) == s) return v;
  if (s == "mtl") return Variant::mtl_hard_share;
  throw ConfigError("train.variant: unknown variant '" + s + "'");
}

struct TrainConfig {
  Variant variant = Variant::egot2s;
  std::string primary;
  std::vector<std::string> aux;
  std::vector<std::string> tasks;  // egot2g / mtl_hard_share
  std::string transfer_source;     // transfer: the auxiliary whose features feed the probe
  std::optional<double> lr;        // default: 1e-4 for egot2g, 1e-3 otherwise
  double weight_decay = 1e-4;
  int batch_size = 16;
  std::map<std::string, int> batch_sizes;
  int epochs = 20;
  int probe_hidden = 64;
  AblationFlags ablation;

  double learning_rate() const { return lr.value_or(variant == Variant::egot2g ? 1e-4 : 1e-3); }
  int batch_for(const std::string& task) const {
    auto it = batch_sizes.find(task);
    return it == batch_sizes.end() ? batch_size : it->second;
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  SuiteConfig suite;
  SynergySpec synergy;
  DataConfig data;
  BackboneConfig backbone;
  FusionConfig fusion;
  SeqDecoderConfig seqgen;
  TrainConfig train;

  const TaskSpec& task(const std::string& id) const { return find_task(suite.tasks, id); }
};

// Latent structure for the default suite: SCC and REC share latent 0, LOC reads a
// pulse, ANT and TLK each own a latent; TLK's latent is also audible.
inline SynergySpec default_synergy() {
  SynergySpec s;
  s.latents = {LatentSpec{8, LatentKind::pattern, 1.0, 0.0}, LatentSpec{16, LatentKind::pulse, 2.0, 0.0},
               LatentSpec{8, LatentKind::pattern, 1.0, 0.0}, LatentSpec{4, LatentKind::pattern, 0.5, 1.0}};
  s.task_dependency = {{"LOC", {1}}, {"SCC", {0}}, {"REC", {0}}, {"ANT", {2}}, {"TLK", {3}}};
  s.noise_sigma = 0.5;
  return s;
}

inline void validate_train(const TrainConfig& t, const std::vector<TaskSpec>& tasks) {
  auto known = [&](const std::string& id, const char* field) {
    for (const auto& x : tasks)
      if (x.task_id == id) return;
    throw ConfigError(std::string("train.") + field + ": unknown task '" + id + "'");
  };
  const bool multi = t.variant == Variant::egot2g || t.variant == Variant::mtl_hard_share;
  if (multi) {
    if (t.tasks.size() < 2) throw ConfigError("train.tasks: " + to_string(t.variant) + " needs at least 2 tasks");
    for (const auto& x : t.tasks) known(x, "tasks");
  } else {
    if (t.primary.empty()) throw ConfigError("train.primary: " + to_string(t.variant) + " needs exactly one primary task");
    known(t.primary, "primary");
    for (const auto& x : t.aux) {
      known(x, "aux");
      if (x == t.primary) throw ConfigError("train.aux: the primary task cannot also be auxiliary");
    }
  }
  if (t.variant == Variant::transfer) {
    if (t.transfer_source.empty()) throw ConfigError("train.transfer_source: required for the transfer variant");
    known(t.transfer_source, "transfer_source");
  }
  if (t.ablation.any() && t.variant != Variant::egot2s && t.variant != Variant::egot2g)
    throw ConfigError("train.ablation: ablation flags only apply to egot2s and egot2g");
  if (t.ablation.replace_aux_with_primary_copies && t.variant != Variant::egot2s)
    throw ConfigError("train.ablation.replace_aux_with_primary_copies: only defined for egot2s");
  if (t.epochs < 1 || t.batch_size < 1 || t.probe_hidden < 1 || t.learning_rate() <= 0)
    throw ConfigError("train: epochs, batch_size, probe_hidden and lr must be positive");
  for (const auto& [k, b] : t.batch_sizes)
    if (b < 1) throw ConfigError("train.batch_sizes." + k + ": must be positive");
}

namespace detail {

inline FitOptions fit_from_json(const json& j, const std::string& where, FitOptions f) {
  f.epochs = get_field_or<int>(j, "epochs", where, f.epochs);
  f.batch_size = get_field_or<int>(j, "batch_size", where, f.batch_size);
  f.lr = get_field_or<double>(j, "lr", where, f.lr);
  f.weight_decay = get_field_or<double>(j, "weight_decay", where, f.weight_decay);
  if (f.epochs < 1 || f.batch_size < 1 || f.lr <= 0) throw ConfigError(where + ": epochs, batch_size and lr must be positive");
  return f;
}

}  // namespace detail

inline RunConfig config_from_json(const json& j) {
  check_keys(j, {"schema_version", "seed", "suite", "synergy", "data", "backbone", "fusion", "seqgen", "train"}, "");
  const int version = get_field<int>(j, "schema_version", "");
  if (version != kSchemaVersion)
    throw ConfigError("schema_version " + std::to_string(version) + " is not supported (expected " + std::to_string(kSchemaVersion) + ")");
  RunConfig c;
  c.seed = get_field_or<std::uint64_t>(j, "seed", "", 0);

  c.suite = default_suite_config();
  c.synergy = default_synergy();
  if (j.contains("suite")) {
    const json& s = j.at("suite");
    check_keys(s, {"modality", "tasks"}, "suite");
    if (s.contains("modality")) c.suite.modality = modality_from_json(s.at("modality"), "suite.modality");
    if (s.contains("tasks")) {
      c.suite.tasks.clear();
      int i = 0;
      for (const auto& tj : s.at("tasks")) c.suite.tasks.push_back(task_spec_from_json(tj, "suite.tasks[" + std::to_string(i++) + "]"));
    }
  }
  try {
    c.suite.tasks = make_default_suite(c.suite);
    validate_tasks(c.suite.tasks, c.suite.modality);
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("suite: ") + e.what());
  }
  if (j.contains("synergy")) c.synergy = synergy_from_json(j.at("synergy"), "synergy");
  try {
    validate_synergy(c.synergy, c.suite.tasks);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"n_samples", "n_samples_per_task", "split", "stride_s"}, "data");
    c.data.n_samples = get_field_or<int>(d, "n_samples", "data", c.data.n_samples);
    c.data.n_samples_per_task = get_field_or<std::map<std::string, int>>(d, "n_samples_per_task", "data", {});
    if (d.contains("split")) {
      auto v = get_field<std::vector<double>>(d, "split", "data");
      if (v.size() != 3) throw ConfigError("data.split: expected [train, val, test]");
      c.data.split = {v[0], v[1], v[2]};
    }
    c.data.stride_s = get_field_or<double>(d, "stride_s", "data", c.data.stride_s);
  }
  if (c.data.n_samples < 3) throw ConfigError("data.n_samples: must be >= 3");
  for (const auto& [k, n] : c.data.n_samples_per_task) {
    if (std::none_of(c.suite.tasks.begin(), c.suite.tasks.end(), [&](const TaskSpec& t) { return t.task_id == k; }))
      throw ConfigError("data.n_samples_per_task: unknown task '" + k + "'");
    if (n < 3) throw ConfigError("data.n_samples_per_task." + k + ": must be >= 3");
  }
  if (!(c.data.stride_s > 0)) throw ConfigError("data.stride_s: must be > 0");
  double total = 0;
  for (double r : c.data.split) {
    if (!(r > 0)) throw ConfigError("data.split: every ratio must be > 0");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("data.split: ratios must sum to 1");

  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b, {"arch", "layers", "kernel", "heads", "downsample", "width", "widths", "epochs", "batch_size", "lr", "weight_decay"},
               "backbone");
    const std::string arch = get_field_or<std::string>(b, "arch", "backbone", "conv");
    if (arch != "conv" && arch != "transformer") throw ConfigError("backbone.arch: unknown arch '" + arch + "'");
    c.backbone.arch = arch == "conv" ? BackboneArch::conv : BackboneArch::transformer;
    c.backbone.layers = get_field_or<int>(b, "layers", "backbone", c.backbone.layers);
    c.backbone.kernel = get_field_or<int>(b, "kernel", "backbone", c.backbone.kernel);
    c.backbone.heads = get_field_or<int>(b, "heads", "backbone", c.backbone.heads);
    c.backbone.downsample = get_field_or<int>(b, "downsample", "backbone", c.backbone.downsample);
    c.backbone.default_width = get_field_or<int>(b, "width", "backbone", c.backbone.default_width);
    c.backbone.width = get_field_or<std::map<std::string, int>>(b, "widths", "backbone", {});
    c.backbone.fit = detail::fit_from_json(b, "backbone", c.backbone.fit);
  }
  if (c.backbone.layers < 1 || c.backbone.kernel < 1 || c.backbone.kernel % 2 == 0 || c.backbone.default_width < 1)
    throw ConfigError("backbone: layers >= 1, odd kernel and width >= 1 required");
  for (const auto& t : c.suite.tasks) {
    try {
      auto spec = backbone_spec_for(t, c.suite.modality, c.backbone);
      if (spec.arch == BackboneArch::transformer && spec.width % spec.heads != 0)
        throw ValidationError("backbone " + t.task_id + ": width must be divisible by heads");
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
  }

  if (j.contains("fusion")) c.fusion = fusion_from_json(j.at("fusion"), "fusion");
  if (j.contains("seqgen")) {
    const json& s = j.at("seqgen");
    check_keys(s, {"depth", "heads", "ff_mult"}, "seqgen");
    c.seqgen.depth = get_field_or<int>(s, "depth", "seqgen", c.seqgen.depth);
    c.seqgen.heads = get_field_or<int>(s, "heads", "seqgen", c.seqgen.heads);
    c.seqgen.ff_mult = get_field_or<int>(s, "ff_mult", "seqgen", c.seqgen.ff_mult);
  }
  if (c.seqgen.depth < 1 || c.seqgen.heads < 1 || c.fusion.width % c.seqgen.heads != 0)
    throw ConfigError("seqgen: depth >= 1 and fusion.width divisible by heads required");

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"variant", "primary", "aux", "tasks", "transfer_source", "optimizer", "lr", "weight_decay", "batch_size",
                   "batch_sizes", "epochs", "probe_hidden", "ablation"},
               "train");
    c.train.variant = variant_from(get_field_or<std::string>(t, "variant", "train", "egot2s"));
    if (get_field_or<std::string>(t, "optimizer", "train", "adamw") != "adamw")
      throw ConfigError("train.optimizer: only 'adamw' is available");
    c.train.primary = get_field_or<std::string>(t, "primary", "train", "");
    c.train.aux = get_field_or<std::vector<std::string>>(t, "aux", "train", {});
    c.train.tasks = get_field_or<std::vector<std::string>>(t, "tasks", "train", {});
    c.train.transfer_source = get_field_or<std::string>(t, "transfer_source", "train", "");
    if (t.contains("lr")) c.train.lr = get_field<double>(t, "lr", "train");
    c.train.weight_decay = get_field_or<double>(t, "weight_decay", "train", c.train.weight_decay);
    c.train.batch_size = get_field_or<int>(t, "batch_size", "train", c.train.batch_size);
    c.train.batch_sizes = get_field_or<std::map<std::string, int>>(t, "batch_sizes", "train", {});
    c.train.epochs = get_field_or<int>(t, "epochs", "train", c.train.epochs);
    c.train.probe_hidden = get_field_or<int>(t, "probe_hidden", "train", c.train.probe_hidden);
    if (t.contains("ablation")) {
      const json& a = t.at("ablation");
      check_keys(a, {"replace_aux_with_primary_copies", "temporal_pool_tokens", "unfreeze_backbones"}, "train.ablation");
      c.train.ablation.replace_aux_with_primary_copies = get_field_or<bool>(a, "replace_aux_with_primary_copies", "train.ablation", false);
      c.train.ablation.temporal_pool_tokens = get_field_or<bool>(a, "temporal_pool_tokens", "train.ablation", false);
      c.train.ablation.unfreeze_backbones = get_field_or<bool>(a, "unfreeze_backbones", "train.ablation", false);
    }
  } else {
    c.train.primary = c.suite.tasks.front().task_id;
  }
  validate_train(c.train, c.suite.tasks);
  return c;
}

inline json to_json(const RunConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.suite.tasks) {
    json tj = to_json(t);
    tasks.push_back(tj);
  }
  json widths = c.backbone.width;
  json train = {{"variant", to_string(c.train.variant)},
                {"primary", c.train.primary},
                {"aux", c.train.aux},
                {"tasks", c.train.tasks},
                {"transfer_source", c.train.transfer_source},
                {"optimizer", "adamw"},
                {"lr", c.train.learning_rate()},
                {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},
                {"batch_sizes", c.train.batch_sizes},
                {"epochs", c.train.epochs},
                {"probe_hidden", c.train.probe_hidden},
                {"ablation",
                 {{"replace_aux_with_primary_copies", c.train.ablation.replace_aux_with_primary_copies},
                  {"temporal_pool_tokens", c.train.ablation.temporal_pool_tokens},
                  {"unfreeze_backbones", c.train.ablation.unfreeze_backbones}}}};
  return {{"schema_version", kSchemaVersion},
          {"seed", c.seed},
          {"suite", {{"modality", to_json(c.suite.modality)}, {"tasks", tasks}}},
          {"synergy", to_json(c.synergy)},
          {"data",
           {{"n_samples", c.data.n_samples},
            {"n_samples_per_task", c.data.n_samples_per_task},
            {"split", c.data.split},
            {"stride_s", c.data.stride_s}}},
          {"backbone",
           {{"arch", c.backbone.arch == BackboneArch::conv ? "conv" : "transformer"},
            {"layers", c.backbone.layers},
            {"kernel", c.backbone.kernel},
            {"heads", c.backbone.heads},
            {"downsample", c.backbone.downsample},
            {"width", c.backbone.default_width},
            {"widths", widths},
            {"epochs", c.backbone.fit.epochs},
            {"batch_size", c.backbone.fit.batch_size},
            {"lr", c.backbone.fit.lr},
            {"weight_decay", c.backbone.fit.weight_decay}}},
          {"fusion", to_json(c.fusion)},
          {"seqgen", {{"depth", c.seqgen.depth}, {"heads", c.seqgen.heads}, {"ff_mult", c.seqgen.ff_mult}}},
          {"train", train}};
}

inline RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON (" + e.what() + ")");
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

}  // namespace egot2
