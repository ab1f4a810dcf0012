#pragma once

// Synthetic heterogeneous task suite.
//
// Every clip renders the full latent world state (all latents), so a backbone
// trained on one task can be applied to another task's clip and recover the
// latents it learned. A task's label is a deterministic function of the
// latents it depends on; two tasks are related iff their dependency sets meet.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "egot2/container.hpp"
#include "egot2/json_util.hpp"
#include "egot2/nn.hpp"

namespace egot2 {

enum class Modality { video, audio };
enum class LabelKind { frame_index, binary, categorical, sequence };

inline std::string to_string(Modality m) { return m == Modality::video ? "video" : "audio"; }

inline std::string to_string(LabelKind k) {
  switch (k) {
    case LabelKind::frame_index: return "frame_index";
    case LabelKind::binary: return "binary";
    case LabelKind::categorical: return "categorical";
    case LabelKind::sequence: return "sequence";
  }
  return "?";
}

inline LabelKind label_kind_from(const std::string& s) {
  if (s == "frame_index") return LabelKind::frame_index;
  if (s == "binary") return LabelKind::binary;
  if (s == "categorical") return LabelKind::categorical;
  if (s == "sequence") return LabelKind::sequence;
  throw ConfigError("unknown label kind '" + s + "'");
}

// Labels are integer vectors: {frame}, {0|1}, {class}, or {s_1..s_Z}.
using Label = std::vector<int>;

struct LabelSpace {
  LabelKind kind = LabelKind::binary;
  int n_frames = 0;    // frame_index
  int n_classes = 2;   // categorical (binary is 2)
  int vocab_size = 0;  // sequence
  int horizon = 0;     // sequence Z
  std::string word_prefix;

  // Number of labels per output position and the number of positions.
  int classes() const {
    switch (kind) {
      case LabelKind::frame_index: return n_frames;
      case LabelKind::binary: return 2;
      case LabelKind::categorical: return n_classes;
      case LabelKind::sequence: return vocab_size;
    }
    return 0;
  }
  int arity() const { return kind == LabelKind::sequence ? horizon : 1; }

  bool contains(const Label& y) const {
    if (static_cast<int>(y.size()) != arity()) return false;
    for (int v : y)
      if (v < 0 || v >= classes()) return false;
    return true;
  }

  bool operator==(const LabelSpace&) const = default;
};

struct TaskSpec {
  std::string task_id;
  std::string prompt_token;
  std::vector<Modality> modalities{Modality::video};
  double span_s = 8.0;
  double frame_rate_hz = 2.0;
  LabelSpace label_space;
  std::string cluster_id;

  int frames() const { return static_cast<int>(std::lround(span_s * frame_rate_hz)); }
  bool has(Modality m) const {
    for (auto x : modalities)
      if (x == m) return true;
    return false;
  }
  bool operator==(const TaskSpec&) const = default;
};

struct ModalityConfig {
  int video_channels = 16;
  int audio_channels = 4;
  double audio_rate_hz = 8.0;
  bool operator==(const ModalityConfig&) const = default;
};

struct SuiteConfig {
  ModalityConfig modality;
  std::vector<TaskSpec> tasks;
};

enum class LatentKind { pattern, pulse };

struct LatentSpec {
  int cardinality = 8;
  LatentKind kind = LatentKind::pattern;
  double video_gain = 1.0;
  double audio_gain = 0.0;
  bool operator==(const LatentSpec&) const = default;
};

struct Window {
  double start_s = 0;
  double end_s = 0;
  bool operator==(const Window&) const = default;
};

struct SynergySpec {
  std::vector<LatentSpec> latents;
  std::map<std::string, std::vector<int>> task_dependency;
  double noise_sigma = 0.5;
  std::map<std::string, Window> temporal_locality;
  // Outside a locality window, render a different value of the same latent.
  bool locality_distractor = false;
  std::uint64_t render_seed = 1;

  int n_latents() const { return static_cast<int>(latents.size()); }
  bool operator==(const SynergySpec&) const = default;
};

struct Sample {
  std::string clip_id;
  Matrix<float> video;  // frames x video_channels
  Matrix<float> audio;  // audio_frames x audio_channels, empty when absent
  Label label;

  bool has_audio() const { return audio.size() != 0; }
};

inline bool bitwise_equal(const Matrix<float>& a, const Matrix<float>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}

inline bool operator==(const Sample& a, const Sample& b) {
  return a.clip_id == b.clip_id && a.label == b.label && bitwise_equal(a.video, b.video) && bitwise_equal(a.audio, b.audio);
}

struct Dataset {
  TaskSpec task;
  ModalityConfig modality;
  SynergySpec synergy;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset& o) const {
    return task == o.task && modality == o.modality && synergy == o.synergy && seed == o.seed && samples == o.samples;
  }
};

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const LabelSpace& l) {
  json j = {{"kind", to_string(l.kind)}};
  if (l.kind == LabelKind::frame_index) j["n_frames"] = l.n_frames;
  if (l.kind == LabelKind::categorical) j["n_classes"] = l.n_classes;
  if (l.kind == LabelKind::sequence) {
    j["vocab_size"] = l.vocab_size;
    j["horizon"] = l.horizon;
  }
  if (!l.word_prefix.empty()) j["word_prefix"] = l.word_prefix;
  return j;
}

inline json to_json(const TaskSpec& t) {
  json mods = json::array();
  for (auto m : t.modalities) mods.push_back(to_string(m));
  return {{"task_id", t.task_id},   {"prompt", t.prompt_token},       {"modalities", mods},
          {"span_s", t.span_s},     {"frame_rate_hz", t.frame_rate_hz}, {"label", to_json(t.label_space)},
          {"cluster", t.cluster_id}};
}

inline json to_json(const ModalityConfig& m) {
  return {{"video_channels", m.video_channels}, {"audio_channels", m.audio_channels}, {"audio_rate_hz", m.audio_rate_hz}};
}

inline json to_json(const SynergySpec& s) {
  json lat = json::array();
  for (const auto& l : s.latents)
    lat.push_back({{"cardinality", l.cardinality},
                   {"kind", l.kind == LatentKind::pattern ? "pattern" : "pulse"},
                   {"video_gain", l.video_gain},
                   {"audio_gain", l.audio_gain}});
  json loc = json::object();
  for (const auto& [k, w] : s.temporal_locality) loc[k] = {{"start_s", w.start_s}, {"end_s", w.end_s}};
  return {{"latents", lat},
          {"task_dependency", s.task_dependency},
          {"noise_sigma", s.noise_sigma},
          {"temporal_locality", loc},
          {"locality_distractor", s.locality_distractor},
          {"render_seed", s.render_seed}};
}

inline LabelSpace label_space_from_json(const json& j, const std::string& where) {
  check_keys(j, {"kind", "n_frames", "n_classes", "vocab_size", "horizon", "word_prefix"}, where);
  LabelSpace l;
  l.kind = label_kind_from(get_field<std::string>(j, "kind", where));
  l.n_frames = get_field_or<int>(j, "n_frames", where, 0);
  l.n_classes = get_field_or<int>(j, "n_classes", where, l.kind == LabelKind::binary ? 2 : 0);
  l.vocab_size = get_field_or<int>(j, "vocab_size", where, 0);
  l.horizon = get_field_or<int>(j, "horizon", where, 0);
  l.word_prefix = get_field_or<std::string>(j, "word_prefix", where, "");
  return l;
}

inline TaskSpec task_spec_from_json(const json& j, const std::string& where) {
  check_keys(j, {"task_id", "prompt", "modalities", "span_s", "frame_rate_hz", "label", "cluster"}, where);
  TaskSpec t;
  t.task_id = get_field<std::string>(j, "task_id", where);
  t.prompt_token = get_field_or<std::string>(j, "prompt", where, "<" + t.task_id + ">");
  t.modalities.clear();
  for (const auto& m : get_field_or<std::vector<std::string>>(j, "modalities", where, {"video"})) {
    if (m == "video") t.modalities.push_back(Modality::video);
    else if (m == "audio") t.modalities.push_back(Modality::audio);
    else throw ConfigError(where + ".modalities: unknown modality '" + m + "'");
  }
  t.span_s = get_field<double>(j, "span_s", where);
  t.frame_rate_hz = get_field<double>(j, "frame_rate_hz", where);
  if (!j.contains("label")) throw ConfigError("missing key '" + where + ".label'");
  t.label_space = label_space_from_json(j.at("label"), where + ".label");
  if (t.label_space.kind == LabelKind::frame_index && t.label_space.n_frames == 0) t.label_space.n_frames = t.frames();
  t.cluster_id = get_field_or<std::string>(j, "cluster", where, "");
  return t;
}

inline ModalityConfig modality_from_json(const json& j, const std::string& where) {
  check_keys(j, {"video_channels", "audio_channels", "audio_rate_hz"}, where);
  ModalityConfig m;
  m.video_channels = get_field_or<int>(j, "video_channels", where, m.video_channels);
  m.audio_channels = get_field_or<int>(j, "audio_channels", where, m.audio_channels);
  m.audio_rate_hz = get_field_or<double>(j, "audio_rate_hz", where, m.audio_rate_hz);
  return m;
}

inline SynergySpec synergy_from_json(const json& j, const std::string& where) {
  check_keys(j, {"latents", "task_dependency", "noise_sigma", "temporal_locality", "locality_distractor", "render_seed"},
             where);
  SynergySpec s;
  if (!j.contains("latents")) throw ConfigError("missing key '" + where + ".latents'");
  int i = 0;
  for (const auto& lj : j.at("latents")) {
    const std::string w = where + ".latents[" + std::to_string(i++) + "]";
    check_keys(lj, {"cardinality", "kind", "video_gain", "audio_gain"}, w);
    LatentSpec l;
    l.cardinality = get_field<int>(lj, "cardinality", w);
    const std::string kind = get_field_or<std::string>(lj, "kind", w, "pattern");
    if (kind == "pattern") l.kind = LatentKind::pattern;
    else if (kind == "pulse") l.kind = LatentKind::pulse;
    else throw ConfigError(w + ".kind: unknown latent kind '" + kind + "'");
    l.video_gain = get_field_or<double>(lj, "video_gain", w, 1.0);
    l.audio_gain = get_field_or<double>(lj, "audio_gain", w, 0.0);
    s.latents.push_back(l);
  }
  s.task_dependency = get_field<std::map<std::string, std::vector<int>>>(j, "task_dependency", where);
  s.noise_sigma = get_field_or<double>(j, "noise_sigma", where, s.noise_sigma);
  if (j.contains("temporal_locality")) {
    for (const auto& [k, wj] : j.at("temporal_locality").items()) {
      const std::string w = where + ".temporal_locality." + k;
      check_keys(wj, {"start_s", "end_s"}, w);
      s.temporal_locality[k] = Window{get_field<double>(wj, "start_s", w), get_field<double>(wj, "end_s", w)};
    }
  }
  s.locality_distractor = get_field_or<bool>(j, "locality_distractor", where, false);
  s.render_seed = get_field_or<std::uint64_t>(j, "render_seed", where, 1);
  return s;
}

// ---------------------------------------------------------------------------
// Validation and suite construction

inline bool is_integral(double x) { return x > 0 && std::abs(x - std::round(x)) < 1e-9; }

inline void validate_task(const TaskSpec& t, const ModalityConfig& m) {
  const std::string w = "task " + t.task_id;
  if (t.task_id.empty()) throw ValidationError("task with empty task_id");
  if (t.span_s <= 0 || t.frame_rate_hz <= 0) throw ValidationError(w + ": span_s and frame_rate_hz must be > 0");
  if (!is_integral(t.span_s * t.frame_rate_hz))
    throw ValidationError(w + ": span_s x frame_rate_hz = " + std::to_string(t.span_s * t.frame_rate_hz) +
                          " is not a positive integer frame count");
  if (!t.has(Modality::video)) throw ValidationError(w + ": video modality is required");
  if (t.has(Modality::audio) && !is_integral(t.span_s * m.audio_rate_hz))
    throw ValidationError(w + ": audio frame count is not a positive integer");
  const LabelSpace& l = t.label_space;
  switch (l.kind) {
    case LabelKind::frame_index:
      if (l.n_frames != t.frames()) throw ValidationError(w + ": frame_index label must span the task's frames");
      break;
    case LabelKind::binary: break;
    case LabelKind::categorical:
      if (l.n_classes < 2) throw ValidationError(w + ": categorical n_classes must be >= 2");
      break;
    case LabelKind::sequence:
      if (l.horizon < 1) throw ValidationError(w + ": sequence horizon must be >= 1");
      if (l.vocab_size < 2) throw ValidationError(w + ": sequence vocab_size must be >= 2");
      break;
  }
}

inline void validate_tasks(const std::vector<TaskSpec>& tasks, const ModalityConfig& m) {
  std::set<std::string> ids, prompts;
  for (const auto& t : tasks) {
    validate_task(t, m);
    if (!ids.insert(t.task_id).second) throw ValidationError("duplicate task_id '" + t.task_id + "'");
    if (!prompts.insert(t.prompt_token).second) throw ValidationError("duplicate prompt_token '" + t.prompt_token + "'");
  }
}

// Validates a suite description; requires >= 3 tasks, >= 2 distinct spans and >= 2 label kinds.
inline std::vector<TaskSpec> make_default_suite(const SuiteConfig& config) {
  validate_tasks(config.tasks, config.modality);
  std::set<double> spans;
  std::set<LabelKind> kinds;
  for (const auto& t : config.tasks) {
    spans.insert(t.span_s);
    kinds.insert(t.label_space.kind);
  }
  if (config.tasks.size() < 3) throw ValidationError("suite needs at least 3 tasks");
  if (spans.size() < 2) throw ValidationError("suite needs at least 2 distinct spans");
  if (kinds.size() < 2) throw ValidationError("suite needs at least 2 distinct label kinds");
  return config.tasks;
}

inline SuiteConfig default_suite_config() {
  auto task = [](std::string id, LabelSpace l, double span, double rate, std::vector<Modality> mods, std::string cluster) {
    TaskSpec t;
    t.prompt_token = "<" + id + ">";
    t.task_id = std::move(id);
    t.label_space = l;
    t.span_s = span;
    t.frame_rate_hz = rate;
    t.modalities = std::move(mods);
    t.cluster_id = std::move(cluster);
    return t;
  };
  SuiteConfig c;
  LabelSpace loc{LabelKind::frame_index, 16, 0, 0, 0, ""};
  LabelSpace scc{LabelKind::binary, 0, 2, 0, 0, ""};
  LabelSpace rec{LabelKind::categorical, 0, 8, 0, 0, "c"};
  LabelSpace ant{LabelKind::sequence, 0, 0, 8, 4, "a"};
  c.tasks = {task("LOC", loc, 8, 2, {Modality::video}, "hoi"), task("SCC", scc, 8, 2, {Modality::video}, "hoi"),
             task("REC", rec, 8, 4, {Modality::video}, "hoi"), task("ANT", ant, 16, 2, {Modality::video}, "hoi"),
             task("TLK", scc, 4, 4, {Modality::video, Modality::audio}, "hhi")};
  return c;
}

inline const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, const std::string& id) {
  for (const auto& t : tasks)
    if (t.task_id == id) return t;
  throw ValidationError("unknown task_id '" + id + "'");
}

// Window where latent j is rendered in a clip of `span_s` seconds.
inline std::optional<Window> latent_window(const SynergySpec& s, int j) {
  for (const auto& [task, deps] : s.task_dependency) {
    auto it = s.temporal_locality.find(task);
    if (it == s.temporal_locality.end()) continue;
    for (int d : deps)
      if (d == j) return it->second;
  }
  return std::nullopt;
}

inline void validate_synergy(const SynergySpec& s, const std::vector<TaskSpec>& tasks) {
  if (s.latents.empty()) throw ValidationError("synergy: n_latents must be >= 1");
  if (s.noise_sigma < 0) throw ValidationError("synergy: noise_sigma must be >= 0");
  for (const auto& l : s.latents)
    if (l.cardinality < 1) throw ValidationError("synergy: latent cardinality must be >= 1");
  for (const auto& [task, deps] : s.task_dependency) {
    bool known = false;
    for (const auto& t : tasks) known = known || t.task_id == task;
    if (!known) throw ValidationError("synergy: unknown task_id '" + task + "' in task_dependency");
    if (deps.empty()) throw ValidationError("synergy: task '" + task + "' depends on no latent");
    for (int d : deps)
      if (d < 0 || d >= s.n_latents()) throw ValidationError("synergy: task '" + task + "' references latent " + std::to_string(d));
  }
  for (const auto& [task, w] : s.temporal_locality) {
    if (!s.task_dependency.count(task)) throw ValidationError("synergy: unknown task_id '" + task + "' in temporal_locality");
    if (!(w.end_s > w.start_s) || w.start_s < 0) throw ValidationError("synergy: bad locality window for '" + task + "'");
  }
  // A latent shared by several localized tasks must use one window.
  for (int j = 0; j < s.n_latents(); ++j) {
    std::optional<Window> seen;
    for (const auto& [task, deps] : s.task_dependency) {
      auto it = s.temporal_locality.find(task);
      if (it == s.temporal_locality.end()) continue;
      for (int d : deps)
        if (d == j) {
          if (seen && !(*seen == it->second)) throw ValidationError("synergy: latent " + std::to_string(j) + " has conflicting windows");
          seen = it->second;
        }
    }
  }
  for (const auto& t : tasks) {
    auto it = s.task_dependency.find(t.task_id);
    if (it == s.task_dependency.end()) continue;
    if (t.label_space.kind == LabelKind::frame_index && it->second.size() == 1) {
      const LatentSpec& l = s.latents[it->second[0]];
      if (l.kind == LatentKind::pulse && l.cardinality != t.frames())
        throw ValidationError("synergy: pulse latent for '" + t.task_id + "' must have one value per frame");
    }
  }
}

inline bool tasks_related(const SynergySpec& s, const std::string& a, const std::string& b) {
  auto ia = s.task_dependency.find(a), ib = s.task_dependency.find(b);
  if (ia == s.task_dependency.end() || ib == s.task_dependency.end()) return false;
  for (int x : ia->second)
    for (int y : ib->second)
      if (x == y) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Labels

inline std::vector<int> draw_latents(const SynergySpec& s, Rng& rng) {
  std::vector<int> z;
  for (const auto& l : s.latents) z.push_back(std::uniform_int_distribution<int>(0, l.cardinality - 1)(rng));
  return z;
}

namespace detail {

inline std::vector<int> seeded_permutation(int n, std::uint64_t seed) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(p[i], p[std::uniform_int_distribution<int>(0, i)(rng)]);
  return p;
}

}  // namespace detail

// Deterministic label of `task` for a latent draw: a seeded table over the
// mixed-radix index of its dependency latents. A frame_index task driven by a
// single pulse latent is labelled with the pulse frame itself.
inline Label label_for_latents(const TaskSpec& task, const SynergySpec& s, const std::vector<int>& z) {
  auto it = s.task_dependency.find(task.task_id);
  if (it == s.task_dependency.end()) throw ValidationError("synergy: unknown task_id '" + task.task_id + "'");
  const auto& deps = it->second;
  const LabelSpace& l = task.label_space;
  if (l.kind == LabelKind::frame_index && deps.size() == 1 && s.latents[deps[0]].kind == LatentKind::pulse)
    return {z[deps[0]]};
  int combined = 0, total = 1;
  for (int d : deps) {
    combined = combined * s.latents[d].cardinality + z[d];
    total *= s.latents[d].cardinality;
  }
  const std::uint64_t base = mix_seed(s.render_seed, hash_string(task.task_id));
  switch (l.kind) {
    case LabelKind::binary: {
      auto p = detail::seeded_permutation(total, base);
      return {p[combined] < total / 2 ? 1 : 0};
    }
    case LabelKind::frame_index:
    case LabelKind::categorical: {
      auto p = detail::seeded_permutation(total, base);
      return {p[combined] % l.classes()};
    }
    case LabelKind::sequence: {
      Label y;
      for (int i = 0; i < l.horizon; ++i) {
        auto p = detail::seeded_permutation(total, mix_seed(base, static_cast<std::uint64_t>(i)));
        y.push_back(p[(combined + i) % total] % l.vocab_size);
      }
      return y;
    }
  }
  return {};
}

inline std::vector<Label> enumerate_labels(const LabelSpace& l) {
  std::vector<Label> out;
  const int k = l.classes(), z = l.arity();
  long total = 1;
  for (int i = 0; i < z; ++i) total *= k;
  for (long idx = 0; idx < total; ++idx) {
    Label y(z);
    long r = idx;
    for (int i = z - 1; i >= 0; --i) {
      y[i] = static_cast<int>(r % k);
      r /= k;
    }
    out.push_back(std::move(y));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline Eigen::VectorXd render_template(std::uint64_t seed, int channels) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(channels);
  for (int c = 0; c < channels; ++c) v(c) = n(rng);
  return v;
}

// Adds every latent's rendering to x (frames x channels) sampled at `rate`.
inline void render_stream(Matrix<float>& x, double rate, double span, const SynergySpec& s, const std::vector<int>& z,
                          const std::vector<int>& distractor, bool audio) {
  const int channels = static_cast<int>(x.cols());
  for (int j = 0; j < s.n_latents(); ++j) {
    const LatentSpec& l = s.latents[j];
    const double gain = audio ? l.audio_gain : l.video_gain;
    if (gain == 0) continue;
    const std::uint64_t stream = audio ? 0xa0d10ULL : 0x71de0ULL;
    const auto local = latent_window(s, j);
    const double ws = local ? std::min(local->start_s, span) : 0.0;
    const double we = local ? std::min(local->end_s, span) : span;
    if (l.kind == LatentKind::pattern) {
      const Eigen::VectorXd tv = render_template(mix_seed(s.render_seed, stream + 1000ULL * j + z[j]), channels);
      Eigen::VectorXd td;
      if (local && s.locality_distractor)
        td = render_template(mix_seed(s.render_seed, stream + 1000ULL * j + distractor[j]), channels);
      for (Eigen::Index f = 0; f < x.rows(); ++f) {
        const double t = static_cast<double>(f) / rate;
        if (t >= ws && t < we) x.row(f) += (gain * tv).cast<float>().transpose();
        else if (td.size()) x.row(f) += (gain * td).cast<float>().transpose();
      }
    } else {
      const Eigen::VectorXd tp = render_template(mix_seed(s.render_seed, stream + 1000ULL * j + 999), channels);
      const double step = (we - ws) / l.cardinality;
      const double center = ws + z[j] * step, sigma = 0.25 * step;
      for (Eigen::Index f = 0; f < x.rows(); ++f) {
        const double t = static_cast<double>(f) / rate;
        const double a = gain * std::exp(-0.5 * std::pow((t - center) / sigma, 2));
        x.row(f) += (a * tp).cast<float>().transpose();
      }
    }
  }
}

inline std::string clip_name(const std::string& task, std::uint64_t seed, std::size_t i) {
  std::ostringstream os;
  os << task << "-" << seed << "-" << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace detail

// Renders one clip of `task` for a latent draw; `rng` supplies distractors and noise.
inline Sample render_sample(const TaskSpec& task, const ModalityConfig& m, const SynergySpec& s, const std::vector<int>& z,
                            Rng& rng, std::string clip_id) {
  Sample out;
  out.clip_id = std::move(clip_id);
  out.label = label_for_latents(task, s, z);
  std::vector<int> distractor(z.size());
  for (int j = 0; j < s.n_latents(); ++j) {
    const int card = s.latents[j].cardinality;
    const int d = card > 1 ? std::uniform_int_distribution<int>(0, card - 2)(rng) : 0;
    distractor[j] = card > 1 && d >= z[j] ? d + 1 : d;
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  out.video = Matrix<float>::Zero(task.frames(), m.video_channels);
  detail::render_stream(out.video, task.frame_rate_hz, task.span_s, s, z, distractor, false);
  for (Eigen::Index i = 0; i < out.video.size(); ++i) out.video.data()[i] += static_cast<float>(s.noise_sigma * noise(rng));
  if (task.has(Modality::audio)) {
    out.audio = Matrix<float>::Zero(std::lround(task.span_s * m.audio_rate_hz), m.audio_channels);
    detail::render_stream(out.audio, m.audio_rate_hz, task.span_s, s, z, distractor, true);
    for (Eigen::Index i = 0; i < out.audio.size(); ++i) out.audio.data()[i] += static_cast<float>(s.noise_sigma * noise(rng));
  }
  return out;
}

// n samples of `task`; sample i uses its own stream derived from (seed, task, i).
inline Dataset generate_dataset(const TaskSpec& task, const ModalityConfig& m, const SynergySpec& s, int n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("generate_dataset: n must be >= 1");
  if (!s.task_dependency.count(task.task_id))
    throw ValidationError("generate_dataset: task_id '" + task.task_id + "' missing from synergy task_dependency");
  validate_task(task, m);
  Dataset d{task, m, s, seed, {}};
  d.samples.reserve(n);
  const std::uint64_t base = mix_seed(seed, hash_string(task.task_id));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(base, static_cast<std::uint64_t>(i)));
    const auto z = draw_latents(s, rng);
    d.samples.push_back(render_sample(task, m, s, z, rng, detail::clip_name(task.task_id, seed, i)));
  }
  return d;
}

// Deterministic disjoint, covering partition; sample order within a part follows the source.
inline std::array<Dataset, 3> split(const Dataset& d, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (!(r > 0)) throw ValidationError("split: ratios must be positive");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ValidationError("split: ratios must sum to 1");
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x5b117ULL));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  const auto n_train = static_cast<std::size_t>(std::llround(n * ratios[0]));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(n * ratios[1])));
  std::array<std::vector<std::size_t>, 3> parts;
  for (std::size_t i = 0; i < n; ++i) parts[i < n_train ? 0 : i < n_train + n_val ? 1 : 2].push_back(idx[i]);
  std::array<Dataset, 3> out;
  for (int p = 0; p < 3; ++p) {
    std::sort(parts[p].begin(), parts[p].end());
    out[p] = Dataset{d.task, d.modality, d.synergy, d.seed, {}};
    for (auto i : parts[p]) out[p].samples.push_back(d.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: directory with manifest.json and one EGT2 blob per array.

inline void save_dataset(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir / "arrays");
  json samples = json::array();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    std::ostringstream stem;
    stem << "arrays/" << std::setw(6) << std::setfill('0') << i;
    json arrays = {{"video", stem.str() + ".video.egt2"}};
    save_array(dir / (stem.str() + ".video.egt2"), s.video);
    if (s.has_audio()) {
      arrays["audio"] = stem.str() + ".audio.egt2";
      save_array(dir / (stem.str() + ".audio.egt2"), s.audio);
    }
    samples.push_back({{"clip_id", s.clip_id}, {"label", s.label}, {"arrays", arrays}});
  }
  json manifest = {{"format", "egt2-dataset"},
                   {"version", 1},
                   {"task", to_json(d.task)},
                   {"modality", to_json(d.modality)},
                   {"synergy", to_json(d.synergy)},
                   {"seed", d.seed},
                   {"label_encoding",
                    {{"kind", to_string(d.task.label_space.kind)},
                     {"layout", "integer list: [frame] | [0=False,1=True] | [class] | [s_1..s_Z]"}}},
                   {"samples", samples}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw FormatError(dir.string() + ": missing manifest.json (field: manifest)");
  json m;
  try {
    m = json::parse(read_text(mpath));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": invalid JSON (field: manifest): " + e.what());
  }
  auto need = [&](const char* key) -> const json& {
    if (!m.contains(key)) throw FormatError(mpath.string() + ": missing field '" + key + "'");
    return m.at(key);
  };
  if (need("format") != "egt2-dataset") throw FormatError(mpath.string() + ": wrong value for field 'format'");
  if (need("version") != 1) throw FormatError(mpath.string() + ": unsupported value for field 'version'");
  Dataset d;
  try {
    d.task = task_spec_from_json(need("task"), "task");
    d.modality = modality_from_json(need("modality"), "modality");
    d.synergy = synergy_from_json(need("synergy"), "synergy");
    d.seed = need("seed").get<std::uint64_t>();
  } catch (const ConfigError& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  for (const auto& sj : need("samples")) {
    Sample s;
    if (!sj.contains("clip_id") || !sj.contains("label") || !sj.contains("arrays"))
      throw FormatError(mpath.string() + ": sample entry missing field 'clip_id', 'label' or 'arrays'");
    s.clip_id = sj.at("clip_id");
    s.label = sj.at("label").get<Label>();
    s.video = load_array(dir / sj.at("arrays").at("video").get<std::string>());
    if (sj.at("arrays").contains("audio")) s.audio = load_array(dir / sj.at("arrays").at("audio").get<std::string>());
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace egot2
