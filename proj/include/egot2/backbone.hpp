#pragma once

// Stage-I task-specific models, input adaptation, and freezing.

#include <memory>
#include <set>
#include <variant>

#include "egot2/scoring.hpp"
#include "egot2/training.hpp"

namespace egot2 {

enum class BackboneArch { conv, transformer };

struct BackboneSpec {
  std::string task_id;
  BackboneArch arch = BackboneArch::conv;
  int layers = 2;
  int width = 32;  // D_k
  int kernel = 3;
  int heads = 2;   // transformer arch only
  int downsample = 1;
  int video_channels = 16;
  int audio_channels = 0;  // 0: unimodal
  double span_s = 8.0;
  double frame_rate_hz = 2.0;
  double audio_rate_hz = 8.0;
  LabelSpace label_space;

  int frames() const { return static_cast<int>(std::lround(span_s * frame_rate_hz)); }
  int audio_frames() const { return static_cast<int>(std::lround(span_s * audio_rate_hz)); }
  int feature_frames() const { return frames() / downsample; }
  bool multimodal() const { return audio_channels > 0; }
  bool operator==(const BackboneSpec&) const = default;
};

struct BackboneConfig {
  BackboneArch arch = BackboneArch::conv;
  int layers = 2;
  int kernel = 3;
  int heads = 2;
  int downsample = 1;
  int default_width = 32;
  std::map<std::string, int> width;  // per task D_k
  FitOptions fit{20, 16, 1e-3, 1e-4, 0};
};

inline BackboneSpec backbone_spec_for(const TaskSpec& t, const ModalityConfig& m, const BackboneConfig& c) {
  BackboneSpec s;
  s.task_id = t.task_id;
  s.arch = c.arch;
  s.layers = c.layers;
  auto w = c.width.find(t.task_id);
  s.width = w == c.width.end() ? c.default_width : w->second;
  s.kernel = c.kernel;
  s.heads = c.heads;
  s.downsample = c.downsample;
  s.video_channels = m.video_channels;
  s.audio_channels = t.has(Modality::audio) ? m.audio_channels : 0;
  s.span_s = t.span_s;
  s.frame_rate_hz = t.frame_rate_hz;
  s.audio_rate_hz = m.audio_rate_hz;
  s.label_space = t.label_space;
  if (s.downsample < 1 || s.frames() % s.downsample != 0)
    throw ValidationError("backbone " + t.task_id + ": downsample must divide the frame count");
  return s;
}

inline json to_json(const BackboneSpec& s) {
  return {{"task_id", s.task_id},
          {"arch", s.arch == BackboneArch::conv ? "conv" : "transformer"},
          {"layers", s.layers},
          {"width", s.width},
          {"kernel", s.kernel},
          {"heads", s.heads},
          {"downsample", s.downsample},
          {"video_channels", s.video_channels},
          {"audio_channels", s.audio_channels},
          {"span_s", s.span_s},
          {"frame_rate_hz", s.frame_rate_hz},
          {"audio_rate_hz", s.audio_rate_hz},
          {"label", to_json(s.label_space)}};
}

inline BackboneSpec backbone_spec_from_json(const json& j) {
  BackboneSpec s;
  try {
    s.task_id = j.at("task_id");
    s.arch = j.at("arch") == "conv" ? BackboneArch::conv : BackboneArch::transformer;
    s.layers = j.at("layers");
    s.width = j.at("width");
    s.kernel = j.at("kernel");
    s.heads = j.at("heads");
    s.downsample = j.at("downsample");
    s.video_channels = j.at("video_channels");
    s.audio_channels = j.at("audio_channels");
    s.span_s = j.at("span_s");
    s.frame_rate_hz = j.at("frame_rate_hz");
    s.audio_rate_hz = j.at("audio_rate_hz");
    s.label_space = label_space_from_json(j.at("label"), "label");
  } catch (const json::exception& e) {
    throw FormatError(std::string("backbone spec: ") + e.what());
  }
  return s;
}

// Copies checkpoint arrays named `prefix + param name` into `store`.
// Any missing, unexpected, or mis-shaped name is reported in one error.
template <class S>
void load_params(ParamStore<S>& store, const Checkpoint& ck, const std::string& prefix = "") {
  std::set<std::string> expected, present;
  for (auto* p : store.all()) expected.insert(prefix + p->name);
  for (const auto& [name, _] : ck.arrays)
    if (name.rfind(prefix, 0) == 0) present.insert(name);
  std::string missing, unexpected, shape;
  for (const auto& n : expected)
    if (!present.count(n)) missing += " " + n;
  for (const auto& n : present)
    if (!expected.count(n)) unexpected += " " + n;
  for (auto* p : store.all()) {
    const Matrix<float>* m = ck.find(prefix + p->name);
    if (m && (m->rows() != p->value.rows() || m->cols() != p->value.cols())) shape += " " + prefix + p->name;
  }
  if (!missing.empty() || !unexpected.empty() || !shape.empty())
    throw Incompatible("checkpoint does not match architecture; missing:" + (missing.empty() ? " none" : missing) +
                       "; unexpected:" + (unexpected.empty() ? " none" : unexpected) +
                       "; shape mismatch:" + (shape.empty() ? " none" : shape));
  for (auto* p : store.all()) {
    p->value = ck.find(prefix + p->name)->template cast<S>();
    p->zero_grad();
  }
}

template <class S>
void append_params(Checkpoint& ck, const ParamStore<S>& store, const std::string& prefix = "") {
  for (const auto* p : store.all()) ck.arrays.emplace_back(prefix + p->name, to_f32(p->value));
}

// Readout from a (frames x width) feature matrix onto a task's label space.
// frame_index: one score per frame; otherwise mean-pooled features -> (arity x classes).
template <class S>
struct TaskHead {
  LabelSpace space;
  nn::Linear<S> out;

  TaskHead() = default;
  TaskHead(ParamStore<S>& store, const std::string& name, Eigen::Index width, const LabelSpace& l, Rng& rng)
      : space(l), out(store, name, width, l.kind == LabelKind::frame_index ? 1 : l.arity() * l.classes(), rng) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> feats) const {
    if (space.kind == LabelKind::frame_index) {
      if (feats.rows() != space.n_frames) throw ShapeError("frame_index head: expected one row per label frame");
      return ag::reshape(out(t, feats), 1, feats.rows());
    }
    return ag::reshape(out(t, ag::mean_rows(feats)), space.arity(), space.classes());
  }
};

template <class S>
ag::Var<S> label_loss(ag::Var<S> logits, const Label& y) {
  return ag::cross_entropy(logits, y, std::vector<S>(y.size(), S(1)));
}

// ---------------------------------------------------------------------------
// Input adaptation

// Linear interpolation that keeps both endpoints: output frame j samples
// input position j * (in - 1) / (out - 1).
inline Matrix<float> resample_linear(const Matrix<float>& x, Eigen::Index out_frames) {
  const Eigen::Index in = x.rows();
  if (out_frames == in) return x;
  Matrix<float> y(out_frames, x.cols());
  for (Eigen::Index j = 0; j < out_frames; ++j) {
    const double pos = out_frames > 1 ? static_cast<double>(j) * (in - 1) / static_cast<double>(out_frames - 1) : 0.0;
    const auto i0 = static_cast<Eigen::Index>(std::floor(pos));
    const double a = pos - static_cast<double>(i0);
    if (a == 0.0 || i0 + 1 >= in) {
      y.row(j) = x.row(std::min(i0, in - 1));
    } else {
      y.row(j) = ((1.0 - a) * x.row(i0).cast<double>() + a * x.row(i0 + 1).cast<double>()).cast<float>();
    }
  }
  return y;
}

struct AdaptedInput {
  std::vector<Matrix<float>> video;  // per window: frames x channels
  std::vector<Matrix<float>> audio;  // per window, empty when the unimodal pathway is used
  bool unimodal = false;
  std::vector<double> window_start_s;
  // Per window, per feature frame: position on the primary clip's frame axis.
  std::vector<std::vector<double>> positions;

  std::size_t windows() const { return video.size(); }
};

struct Excluded {
  std::string reason;
};

using Adapted = std::variant<AdaptedInput, Excluded>;

inline int window_count(double from_span, double to_span, double stride_s) {
  return static_cast<int>(std::floor((from_span - to_span) / stride_s + 1e-9)) + 1;
}

// Maps a primary-task clip into the input format `to` expects: resample to its
// frame rate, slide windows of its span with `stride_s`, and select its modality
// pathway. A backbone needing a longer span than the clip is Excluded.
inline Adapted adapt_input(const Sample& x, const TaskSpec& from, const ModalityConfig& m, const BackboneSpec& to,
                           double stride_s) {
  if (!(stride_s > 0)) throw ValidationError("adapt_input: stride_s must be > 0");
  if (to.span_s > from.span_s + 1e-9)
    return Excluded{"backbone " + to.task_id + " needs " + json(to.span_s).dump() + " s but the clip spans " +
                    json(from.span_s).dump() + " s"};
  if (x.video.rows() != from.frames() || x.video.cols() != to.video_channels)
    throw ShapeError("adapt_input: clip video shape does not match its task spec");
  AdaptedInput a;
  const auto total = static_cast<Eigen::Index>(std::lround(from.span_s * to.frame_rate_hz));
  const Matrix<float> video = resample_linear(x.video, total);
  const int n_windows = window_count(from.span_s, to.span_s, stride_s);
  const int len = to.frames();
  Matrix<float> audio;
  Eigen::Index alen = 0;
  if (to.multimodal()) {
    if (x.has_audio()) {
      if (x.audio.cols() != to.audio_channels) throw ShapeError("adapt_input: clip audio channels do not match the backbone");
      audio = resample_linear(x.audio, std::lround(from.span_s * to.audio_rate_hz));
      alen = to.audio_frames();
    } else {
      a.unimodal = true;
    }
  }
  const double to_primary = total > 1 ? static_cast<double>(from.frames() - 1) / static_cast<double>(total - 1) : 0.0;
  for (int w = 0; w < n_windows; ++w) {
    const auto off = static_cast<Eigen::Index>(std::lround(w * stride_s * to.frame_rate_hz));
    if (off + len > total) throw ShapeError("adapt_input: window runs past the resampled clip");
    a.video.push_back(video.middleRows(off, len));
    if (alen) {
      const auto aoff = static_cast<Eigen::Index>(std::lround(w * stride_s * to.audio_rate_hz));
      a.audio.push_back(audio.middleRows(aoff, alen));
    } else {
      a.audio.emplace_back();
    }
    a.window_start_s.push_back(w * stride_s);
    std::vector<double> pos;
    for (int f = 0; f < to.feature_frames(); ++f) {
      double p = 0;
      for (int k = 0; k < to.downsample; ++k) p += static_cast<double>(off + f * to.downsample + k) * to_primary;
      pos.push_back(p / to.downsample);
    }
    a.positions.push_back(std::move(pos));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Task model

template <class S>
class TaskModel {
 public:
  TaskModel(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    Rng rng(mix_seed(seed, hash_string("backbone:" + spec_.task_id)));
    const int d = spec_.width;
    if (spec_.arch == BackboneArch::conv) {
      int in = spec_.video_channels;
      for (int l = 0; l < spec_.layers; ++l) {
        conv_.emplace_back(store_, "encoder.conv" + std::to_string(l), spec_.kernel * in, d, rng);
        in = d;
      }
    } else {
      input_ = nn::Linear<S>(store_, "encoder.input", spec_.video_channels, d, rng);
      for (int l = 0; l < spec_.layers; ++l)
        blocks_.emplace_back(store_, "encoder.block" + std::to_string(l), d, spec_.heads, 2 * d, rng);
    }
    if (spec_.multimodal()) audio_ = nn::Linear<S>(store_, "encoder.audio", spec_.kernel * spec_.audio_channels, d, rng);
    head_ = TaskHead<S>(store_, "head", d, spec_.label_space, rng);
  }

  const BackboneSpec& spec() const { return spec_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  // Penultimate (pre-head) features of one window: (feature_frames x width).
  // `audio` may be null, which selects the unimodal video pathway.
  ag::Var<S> features(ag::Tape<S>& t, const Matrix<S>& video, const Matrix<S>* audio) const {
    if (video.rows() != spec_.frames() || video.cols() != spec_.video_channels)
      throw ShapeError("backbone " + spec_.task_id + ": expected video " + std::to_string(spec_.frames()) + "x" +
                       std::to_string(spec_.video_channels) + ", got " + std::to_string(video.rows()) + "x" +
                       std::to_string(video.cols()));
    ag::Var<S> x = t.constant(video);
    if (spec_.arch == BackboneArch::conv) {
      for (const auto& c : conv_) x = ag::relu(c(t, ag::unfold_time(x, spec_.kernel)));
    } else {
      std::vector<double> pos(video.rows());
      std::iota(pos.begin(), pos.end(), 0.0);
      x = ag::add(input_(t, x), t.constant(sinusoidal_encoding<S>(pos, spec_.width)));
      for (const auto& b : blocks_) x = b(t, x, nullptr);
    }
    if (spec_.multimodal() && audio != nullptr) {
      if (audio->rows() != spec_.audio_frames() || audio->cols() != spec_.audio_channels)
        throw ShapeError("backbone " + spec_.task_id + ": audio shape mismatch");
      ag::Var<S> a = ag::relu(audio_(t, ag::unfold_time(t.constant(*audio), spec_.kernel)));
      x = ag::add(x, ag::matmul(t.constant(average_matrix(spec_.frames(), spec_.audio_frames())), a));
    }
    if (spec_.downsample > 1)
      x = ag::matmul(t.constant(average_matrix(spec_.feature_frames(), spec_.frames())), x);
    return x;
  }

  // Per-window features concatenated along time: (W * feature_frames x width).
  ag::Var<S> features(ag::Tape<S>& t, const AdaptedInput& in) const {
    std::vector<ag::Var<S>> parts;
    for (std::size_t w = 0; w < in.windows(); ++w) {
      const Matrix<S> v = in.video[w].template cast<S>();
      if (in.unimodal || in.audio[w].size() == 0) {
        parts.push_back(features(t, v, nullptr));
      } else {
        const Matrix<S> a = in.audio[w].template cast<S>();
        parts.push_back(features(t, v, &a));
      }
    }
    return parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
  }

  ag::Var<S> features(ag::Tape<S>& t, const Sample& s) const {
    const Matrix<S> v = s.video.template cast<S>();
    if (spec_.multimodal() && s.has_audio()) {
      const Matrix<S> a = s.audio.template cast<S>();
      return features(t, v, &a);
    }
    return features(t, v, nullptr);
  }

  ag::Var<S> logits(ag::Tape<S>& t, ag::Var<S> feats) const { return head_(t, feats); }

  ag::Var<S> loss(ag::Tape<S>& t, const Sample& s) const { return label_loss(logits(t, features(t, s)), s.label); }

  Prediction predict(const Sample& s) const {
    ag::Tape<S> t;
    return prediction_from_logits(spec_.label_space, logits(t, features(t, s)).value());
  }

  std::vector<Parameter<S>*> encoder_params() const { return store_.group("encoder."); }

  Checkpoint to_checkpoint(json meta) const {
    Checkpoint ck;
    meta["spec"] = to_json(spec_);
    ck.meta = std::move(meta);
    append_params(ck, store_);
    return ck;
  }

  static TaskModel from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("spec")) throw FormatError("backbone checkpoint has no spec block (field: meta.spec)");
    TaskModel m(backbone_spec_from_json(ck.meta.at("spec")), 0);
    load_params(m.store_, ck);
    return m;
  }

  // Loads `ck` into this architecture; names must match exactly.
  void load(const Checkpoint& ck) { load_params(store_, ck); }

 private:
  // (out x in) row-averaging matrix mapping `in` frames onto `out` equal spans.
  static Matrix<S> average_matrix(Eigen::Index out, Eigen::Index in) {
    Matrix<S> m = Matrix<S>::Zero(out, in);
    for (Eigen::Index i = 0; i < in; ++i) {
      const Eigen::Index o = std::min(out - 1, i * out / in);
      m(o, i) = S(1);
    }
    for (Eigen::Index o = 0; o < out; ++o) {
      const S s = m.row(o).sum();
      if (s > 0) m.row(o) /= s;
    }
    return m;
  }

  BackboneSpec spec_;
  ParamStore<S> store_;
  std::vector<nn::Linear<S>> conv_;
  nn::Linear<S> input_;
  std::vector<nn::EncoderLayer<S>> blocks_;
  nn::Linear<S> audio_;
  TaskHead<S> head_;
};

// Provenance of each feature row on the primary clip's timeline.
struct FeatureLayout {
  std::vector<double> position;  // primary-frame position
  std::vector<int> window;
  std::vector<int> frame;  // index within its window
  std::vector<double> window_start_s;

  std::size_t rows() const { return position.size(); }
};

inline FeatureLayout layout_of(const AdaptedInput& in) {
  FeatureLayout l;
  for (std::size_t w = 0; w < in.windows(); ++w)
    for (std::size_t f = 0; f < in.positions[w].size(); ++f) {
      l.position.push_back(in.positions[w][f]);
      l.window.push_back(static_cast<int>(w));
      l.frame.push_back(static_cast<int>(f));
    }
  l.window_start_s = in.window_start_s;
  return l;
}

// Features of one adapted clip: (W * T_k) x D_k.
template <class S>
struct FeatureSet {
  Matrix<S> values;
  FeatureLayout layout;
};

// Inference-only view of a trained model. Parameters are marked non-trainable,
// so no tape ever routes a gradient into them and no optimizer updates them.
template <class S>
class FrozenModel {
 public:
  explicit FrozenModel(TaskModel<S> m) : model_(std::make_shared<TaskModel<S>>(std::move(m))) {
    model_->params().set_trainable(false);
  }

  const BackboneSpec& spec() const { return model_->spec(); }
  const TaskModel<S>& model() const { return *model_; }
  std::int64_t parameter_count() const { return model_->params().count(); }

  FeatureSet<S> extract_features(const AdaptedInput& in) const {
    if (in.windows() == 0) throw ShapeError("extract_features: no windows");
    ag::Tape<S> t;
    return {model_->features(t, in).value(), layout_of(in)};
  }

  // Features as a tape node (for composing a full forward pass); no gradient reaches the weights.
  ag::Var<S> features(ag::Tape<S>& t, const AdaptedInput& in) const { return model_->features(t, in); }

  Checkpoint to_checkpoint(json meta) const { return model_->to_checkpoint(std::move(meta)); }

 private:
  std::shared_ptr<TaskModel<S>> model_;
};

template <class S>
FrozenModel<S> freeze(TaskModel<S> m) {
  return FrozenModel<S>(std::move(m));
}

// ---------------------------------------------------------------------------
// Stage-I training

template <class S>
struct TrainedBackbone {
  TaskModel<S> model;
  Checkpoint checkpoint;
  std::map<std::string, double> val_metrics;
  std::vector<double> loss_curve;
};

template <class S>
std::map<std::string, double> evaluate_backbone(const TaskModel<S>& m, const Dataset& d) {
  std::vector<Prediction> preds;
  std::vector<Label> labels;
  for (const auto& s : d.samples) {
    preds.push_back(m.predict(s));
    labels.push_back(s.label);
  }
  return score_task(d.task, preds, labels);
}

// Trains a task model on `train`; `val` (may be empty) provides the recorded final metric.
template <class S>
TrainedBackbone<S> train_task_model(const BackboneSpec& spec, const Dataset& train, const Dataset& val, const FitOptions& fit_opt) {
  if (train.task.task_id != spec.task_id)
    throw ValidationError("train_task_model: dataset task '" + train.task.task_id + "' != backbone task '" + spec.task_id + "'");
  if (!(train.task.label_space == spec.label_space))
    throw ValidationError("train_task_model: head label space does not match dataset '" + train.task.task_id + "'");
  if (train.samples.empty()) throw ValidationError("train_task_model: empty training set for " + spec.task_id);
  TaskModel<S> model(spec, fit_opt.seed);
  auto curve = fit<S>(model.params().all(), train.size(), fit_opt,
                      [&](ag::Tape<S>& t, std::size_t i) { return model.loss(t, train.samples[i]); });
  std::map<std::string, double> vm;
  if (!val.samples.empty()) vm = evaluate_backbone(model, val);
  json meta = {{"kind", "backbone"},
               {"task_id", spec.task_id},
               {"seed", fit_opt.seed},
               {"epochs", fit_opt.epochs},
               {"final_val_metric", vm}};
  Checkpoint ck = model.to_checkpoint(meta);
  return {std::move(model), std::move(ck), std::move(vm), std::move(curve)};
}

}  // namespace egot2
