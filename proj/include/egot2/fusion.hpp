#pragma once

// Task translator core: per-source projection to a shared width, token
// assembly with temporal and source encodings, an L-layer fusion encoder, and
// the primary-task readout used by the task-specific variant.

#include "egot2/backbone.hpp"

namespace egot2 {

struct FusionConfig {
  int depth = 2;
  int width = 64;
  int heads = 4;
  int ff_mult = 2;
  bool proj_bias = false;
  bool capture_attention = false;
};

inline json to_json(const FusionConfig& f) {
  return {{"depth", f.depth},       {"width", f.width},         {"heads", f.heads},
          {"ff_mult", f.ff_mult},   {"proj_bias", f.proj_bias}, {"capture_attention", f.capture_attention}};
}

inline FusionConfig fusion_from_json(const json& j, const std::string& where) {
  check_keys(j, {"depth", "width", "heads", "ff_mult", "proj_bias", "capture_attention"}, where);
  FusionConfig f;
  f.depth = get_field_or<int>(j, "depth", where, f.depth);
  f.width = get_field_or<int>(j, "width", where, f.width);
  f.heads = get_field_or<int>(j, "heads", where, f.heads);
  f.ff_mult = get_field_or<int>(j, "ff_mult", where, f.ff_mult);
  f.proj_bias = get_field_or<bool>(j, "proj_bias", where, f.proj_bias);
  f.capture_attention = get_field_or<bool>(j, "capture_attention", where, f.capture_attention);
  if (f.depth < 0 || f.width < 1 || f.heads < 1 || f.width % f.heads != 0)
    throw ConfigError(where + ": need depth >= 0 and width divisible by heads");
  return f;
}

// One token source: a frozen backbone feeding the translator.
struct SourceInfo {
  std::string source_id;  // unique; equals task_id except for replica backbones
  std::string task_id;
  int feature_width = 0;  // D_k
};

inline json to_json(const SourceInfo& s) {
  return {{"source_id", s.source_id}, {"task_id", s.task_id}, {"feature_width", s.feature_width}};
}

inline SourceInfo source_from_json(const json& j) {
  return {j.at("source_id").get<std::string>(), j.at("task_id").get<std::string>(), j.at("feature_width").get<int>()};
}

struct TokenInfo {
  int source = 0;  // index into the translator's sources
  int window = 0;
  int frame = 0;
  double position = 0;  // primary-frame position used for the temporal encoding
};

template <class S>
struct TokenBatch {
  ag::Var<S> z;
  std::vector<TokenInfo> meta;
  int layer = 0;

  std::size_t tokens() const { return meta.size(); }
};

// Per encoder layer: one (N x N) attention matrix per head.
template <class S>
using AttentionStack = std::vector<nn::HeadMaps<S>>;

// Projections, source embeddings, and the fusion encoder.
template <class S>
class FusionCore {
 public:
  FusionCore() = default;
  FusionCore(ParamStore<S>& store, const FusionConfig& cfg, const std::vector<SourceInfo>& sources, Rng& rng)
      : cfg_(cfg), sources_(sources) {
    for (const auto& s : sources_)
      proj_.emplace_back(store, "proj." + s.source_id, s.feature_width, cfg.width, rng, cfg.proj_bias);
    source_embed_ = store.add("encoder.source_embed", normal_init<S>(static_cast<Eigen::Index>(sources_.size()), cfg.width, 0.02, rng));
    for (int l = 0; l < cfg.depth; ++l)
      layers_.emplace_back(store, "encoder.layer" + std::to_string(l), cfg.width, cfg.heads, cfg.ff_mult * cfg.width, rng);
  }

  const FusionConfig& config() const { return cfg_; }
  const std::vector<SourceInfo>& sources() const { return sources_; }

  int source_index(const std::string& source_id) const {
    for (std::size_t i = 0; i < sources_.size(); ++i)
      if (sources_[i].source_id == source_id) return static_cast<int>(i);
    throw ValidationError("translator has no source '" + source_id + "'");
  }

  // h_k (T_k x D_k) -> (T_k x D), a per-frame linear map.
  ag::Var<S> project(ag::Tape<S>& t, ag::Var<S> h, int source) const {
    const auto& p = proj_.at(static_cast<std::size_t>(source));
    if (h.cols() != p.in())
      throw ShapeError("project: source '" + sources_[source].source_id + "' has width " + std::to_string(h.cols()) +
                       ", projection expects " + std::to_string(p.in()));
    return p(t, h);
  }

  // Concatenates projected tokens along the token axis in the given order and adds
  // the sinusoidal temporal encoding of each token's position plus its source embedding.
  TokenBatch<S> assemble(ag::Tape<S>& t, const std::vector<ag::Var<S>>& projected, const std::vector<std::vector<TokenInfo>>& meta) const {
    if (projected.empty() || projected.size() != meta.size()) throw ShapeError("assemble: need one metadata list per token group");
    TokenBatch<S> out;
    std::vector<int> src_rows;
    std::vector<double> positions;
    for (std::size_t k = 0; k < projected.size(); ++k) {
      if (projected[k].cols() != cfg_.width) throw ShapeError("assemble: token width differs from the fusion width");
      if (static_cast<std::size_t>(projected[k].rows()) != meta[k].size()) throw ShapeError("assemble: metadata does not align with rows");
      for (const auto& m : meta[k]) {
        out.meta.push_back(m);
        src_rows.push_back(m.source);
        positions.push_back(m.position);
      }
    }
    ag::Var<S> z = projected.size() == 1 ? projected[0] : ag::concat_rows(projected);
    z = ag::add(z, t.constant(sinusoidal_encoding<S>(positions, cfg_.width)));
    out.z = ag::add(z, ag::gather_rows(t.param(*source_embed_), src_rows));
    return out;
  }

  // z^0 -> z^L; fills `capture` with every layer's attention when non-null.
  TokenBatch<S> encode(ag::Tape<S>& t, TokenBatch<S> batch, AttentionStack<S>* capture) const {
    if (batch.z.cols() != cfg_.width) throw ShapeError("encode: token width differs from the fusion width");
    if (capture) capture->assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      batch.z = layers_[l](t, batch.z, capture ? &(*capture)[l] : nullptr);
      batch.layer = static_cast<int>(l) + 1;
    }
    return batch;
  }

  // Projects each source's features (optionally pooling each over time first) and assembles z^0.
  TokenBatch<S> tokens(ag::Tape<S>& t, const std::vector<int>& source_ids, const std::vector<ag::Var<S>>& feats,
                       const std::vector<const FeatureLayout*>& layouts, bool temporal_pool) const {
    std::vector<ag::Var<S>> projected;
    std::vector<std::vector<TokenInfo>> meta;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const FeatureLayout& lay = *layouts[i];
      if (static_cast<std::size_t>(feats[i].rows()) != lay.rows()) throw ShapeError("tokens: layout does not match features");
      std::vector<TokenInfo> m;
      if (temporal_pool) {
        double mean_pos = 0;
        for (double p : lay.position) mean_pos += p;
        m.push_back({source_ids[i], 0, 0, mean_pos / static_cast<double>(lay.rows())});
        projected.push_back(project(t, ag::mean_rows(feats[i]), source_ids[i]));
      } else {
        for (std::size_t r = 0; r < lay.rows(); ++r) m.push_back({source_ids[i], lay.window[r], lay.frame[r], lay.position[r]});
        projected.push_back(project(t, feats[i], source_ids[i]));
      }
      meta.push_back(std::move(m));
    }
    return assemble(t, projected, meta);
  }

 private:
  FusionConfig cfg_;
  std::vector<SourceInfo> sources_;
  std::vector<nn::Linear<S>> proj_;
  Parameter<S>* source_embed_ = nullptr;
  std::vector<nn::EncoderLayer<S>> layers_;
};

// Primary-task readout from z^L. frame_index reads one score per primary-source
// token; other label kinds read the mean over all fused tokens.
template <class S>
struct DecoderHeadS {
  LabelSpace space;
  int primary_source = 0;
  nn::LayerNorm<S> norm;
  TaskHead<S> head;

  DecoderHeadS() = default;
  DecoderHeadS(ParamStore<S>& store, Eigen::Index width, const LabelSpace& l, int primary, Rng& rng)
      : space(l), primary_source(primary), norm(store, "head.norm", width), head(store, "head.out", width, l, rng) {}

  // Token rows the readout consumes.
  std::vector<int> readout_rows(const std::vector<TokenInfo>& meta) const {
    std::vector<int> rows;
    for (std::size_t i = 0; i < meta.size(); ++i)
      if (space.kind != LabelKind::frame_index || meta[i].source == primary_source) rows.push_back(static_cast<int>(i));
    return rows;
  }

  ag::Var<S> operator()(ag::Tape<S>& t, const TokenBatch<S>& zl) const {
    ag::Var<S> x = norm(t, zl.z);
    if (space.kind == LabelKind::frame_index) {
      const auto rows = readout_rows(zl.meta);
      if (static_cast<int>(rows.size()) != space.n_frames)
        throw ShapeError("decode_s: primary tokens (" + std::to_string(rows.size()) + ") do not match label frames");
      x = ag::gather_rows(x, rows);
    }
    return head(t, x);
  }
};

struct TranslatorSpec {
  FusionConfig fusion;
  std::vector<SourceInfo> sources;
  std::string primary_source;
  TaskSpec primary;
  bool temporal_pool = false;
};

inline json to_json(const TranslatorSpec& s) {
  json src = json::array();
  for (const auto& x : s.sources) src.push_back(to_json(x));
  return {{"fusion", to_json(s.fusion)},
          {"sources", src},
          {"primary_source", s.primary_source},
          {"primary", to_json(s.primary)},
          {"temporal_pool", s.temporal_pool}};
}

inline TranslatorSpec translator_spec_from_json(const json& j) {
  TranslatorSpec s;
  s.fusion = fusion_from_json(j.at("fusion"), "fusion");
  for (const auto& x : j.at("sources")) s.sources.push_back(source_from_json(x));
  s.primary_source = j.at("primary_source");
  s.primary = task_spec_from_json(j.at("primary"), "primary");
  s.temporal_pool = j.at("temporal_pool");
  return s;
}

template <class S>
struct ForwardResult {
  ag::Var<S> logits;
  TokenBatch<S> tokens;
  AttentionStack<S> attention;  // empty unless captured
};

// Task-specific translator (one primary task).
template <class S>
class Translator {
 public:
  Translator(TranslatorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.sources.empty()) throw ValidationError("translator: no usable tasks");
    if (spec_.temporal_pool && spec_.primary.label_space.kind == LabelKind::frame_index)
      throw ValidationError("translator: temporal pooling cannot feed a per-frame readout");
    Rng rng(mix_seed(seed, hash_string("translator:" + spec_.primary.task_id)));
    core_ = FusionCore<S>(store_, spec_.fusion, spec_.sources, rng);
    const int primary = has_primary() ? core_.source_index(spec_.primary_source) : -1;
    if (spec_.primary.label_space.kind == LabelKind::frame_index && primary < 0)
      throw ValidationError("translator: a frame_index primary needs its own backbone among the sources");
    head_ = DecoderHeadS<S>(store_, spec_.fusion.width, spec_.primary.label_space, primary, rng);
  }

  const TranslatorSpec& spec() const { return spec_; }
  const FusionCore<S>& core() const { return core_; }
  const DecoderHeadS<S>& head() const { return head_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  bool has_primary() const {
    for (const auto& s : spec_.sources)
      if (s.source_id == spec_.primary_source) return true;
    return false;
  }

  // feats[i] belongs to sources()[i].
  ForwardResult<S> forward(ag::Tape<S>& t, const std::vector<ag::Var<S>>& feats, const std::vector<const FeatureLayout*>& layouts,
                           bool capture) const {
    if (feats.size() != spec_.sources.size()) throw ShapeError("translator: expected one feature set per source");
    std::vector<int> ids(feats.size());
    std::iota(ids.begin(), ids.end(), 0);
    ForwardResult<S> r;
    TokenBatch<S> z0 = core_.tokens(t, ids, feats, layouts, spec_.temporal_pool);
    r.tokens = core_.encode(t, std::move(z0), capture ? &r.attention : nullptr);
    r.logits = head_(t, r.tokens);
    return r;
  }

  ForwardResult<S> forward(ag::Tape<S>& t, const std::vector<FeatureSet<S>>& feats, bool capture) const {
    std::vector<ag::Var<S>> vars;
    std::vector<const FeatureLayout*> layouts;
    for (const auto& f : feats) {
      vars.push_back(t.constant(f.values));
      layouts.push_back(&f.layout);
    }
    return forward(t, vars, layouts, capture);
  }

  std::vector<Parameter<S>*> projection_params() const { return store_.group("proj."); }
  std::vector<Parameter<S>*> encoder_params() const { return store_.group("encoder."); }
  std::vector<Parameter<S>*> head_params() const { return store_.group("head."); }

  Checkpoint to_checkpoint(json meta) const {
    Checkpoint ck;
    meta["translator"] = to_json(spec_);
    ck.meta = std::move(meta);
    append_params(ck, store_, "translator.");
    return ck;
  }

  static Translator from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("translator")) throw FormatError("checkpoint has no translator block (field: meta.translator)");
    Translator tr(translator_spec_from_json(ck.meta.at("translator")), 0);
    load_params(tr.store_, ck, "translator.");
    return tr;
  }

 private:
  TranslatorSpec spec_;
  ParamStore<S> store_;
  FusionCore<S> core_;
  DecoderHeadS<S> head_;
};

// Frozen backbones usable for a primary task: those whose span fits in the primary clip.
// Returns the usable subset in input order and records the reasons for the rest.
template <class S>
std::vector<const FrozenModel<S>*> usable_backbones(const TaskSpec& primary, const std::vector<const FrozenModel<S>*>& candidates,
                                                    std::vector<std::string>* notices = nullptr) {
  std::vector<const FrozenModel<S>*> out;
  for (const auto* b : candidates) {
    if (b->spec().span_s > primary.span_s + 1e-9) {
      if (notices)
        notices->push_back("excluded " + b->spec().task_id + ": needs " + json(b->spec().span_s).dump() + " s, primary " +
                           primary.task_id + " clips span " + json(primary.span_s).dump() + " s");
      continue;
    }
    out.push_back(b);
  }
  if (out.empty()) throw ValidationError("no usable tasks for primary " + primary.task_id);
  return out;
}

// Adapts a clip to every source backbone and extracts its features.
template <class S>
std::vector<FeatureSet<S>> source_features(const Sample& x, const TaskSpec& primary, const ModalityConfig& m,
                                           const std::vector<const FrozenModel<S>*>& backbones, double stride_s) {
  std::vector<FeatureSet<S>> out;
  for (const auto* b : backbones) {
    Adapted a = adapt_input(x, primary, m, b->spec(), stride_s);
    if (std::holds_alternative<Excluded>(a)) throw ValidationError("no usable tasks: " + std::get<Excluded>(a).reason);
    out.push_back(b->extract_features(std::get<AdaptedInput>(a)));
  }
  return out;
}

// Full task-specific forward pass for one clip: adapt -> extract -> project ->
// assemble -> encode -> decode. backbones[i] feeds translator source i; their
// weights enter the tape as non-trainable leaves.
template <class S>
ForwardResult<S> forward_s(ag::Tape<S>& t, const Sample& x, const ModalityConfig& m, const std::vector<const FrozenModel<S>*>& backbones,
                           const Translator<S>& translator, double stride_s, bool capture = false) {
  const TaskSpec& primary = translator.spec().primary;
  if (backbones.size() != translator.spec().sources.size()) throw ShapeError("forward_s: one backbone per translator source");
  std::vector<ag::Var<S>> vars;
  std::vector<FeatureLayout> layouts;
  layouts.reserve(backbones.size());
  for (const auto* b : backbones) {
    Adapted a = adapt_input(x, primary, m, b->spec(), stride_s);
    if (std::holds_alternative<Excluded>(a)) throw ValidationError("no usable tasks: " + std::get<Excluded>(a).reason);
    const auto& in = std::get<AdaptedInput>(a);
    vars.push_back(b->features(t, in));
    layouts.push_back(layout_of(in));
  }
  std::vector<const FeatureLayout*> lp;
  for (const auto& l : layouts) lp.push_back(&l);
  return translator.forward(t, vars, lp, capture);
}

}  // namespace egot2
