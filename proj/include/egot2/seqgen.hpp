#pragma once

// Unified output interface for the general translator: a shared vocabulary,
// tokenize/detokenize, a prompt-conditioned sequence decoder with cross-attention
// to fused tokens, the prompt-masked sequence loss, and greedy generation.

#include <unordered_map>

#include "egot2/fusion.hpp"

namespace egot2 {

inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";

// Label word for one output symbol of a task.
inline std::string label_word(const LabelSpace& l, int v) {
  switch (l.kind) {
    case LabelKind::frame_index: return std::to_string(v);
    case LabelKind::binary: return v ? "True" : "False";
    default: return l.word_prefix + std::to_string(v);
  }
}

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(const std::vector<TaskSpec>& suite) {
    for (const char* s : {kPad, kBos, kEos}) push(s);
    for (const auto& t : suite) {
      if (t.prompt_token.empty()) throw ValidationError("vocab: task " + t.task_id + " has no prompt token");
      if (ids_.count(t.prompt_token)) throw ValidationError("vocab: prompt collision on '" + t.prompt_token + "'");
      prompts_[t.task_id] = push(t.prompt_token);
    }
    std::set<std::string> prompt_set;
    for (const auto& t : suite) prompt_set.insert(t.prompt_token);
    for (const auto& t : suite) {
      auto& words = words_[t.task_id];
      for (int v = 0; v < t.label_space.classes(); ++v) {
        const std::string w = label_word(t.label_space, v);
        if (prompt_set.count(w)) throw ValidationError("vocab: label word '" + w + "' collides with a prompt token");
        const int id = ids_.count(w) ? ids_.at(w) : push(w);
        words.emplace(id, v);
      }
    }
  }

  // Rebuilds from a serialized ordered token list plus per-task membership.
  static Vocabulary from_json(const json& j) {
    Vocabulary v;
    for (const auto& tok : j.at("tokens")) v.push(tok.get<std::string>());
    for (const auto& [task, p] : j.at("prompts").items()) v.prompts_[task] = v.id(p.get<std::string>());
    for (const auto& [task, ws] : j.at("labels").items())
      for (std::size_t i = 0; i < ws.size(); ++i) v.words_[task].emplace(v.id(ws[i].get<std::string>()), static_cast<int>(i));
    return v;
  }

  json to_json() const {
    json labels = json::object(), prompts = json::object();
    for (const auto& [task, words] : words_) {
      std::vector<std::string> by_value(words.size());
      for (const auto& [id, v] : words) by_value[static_cast<std::size_t>(v)] = tokens_[static_cast<std::size_t>(id)];
      labels[task] = by_value;
    }
    for (const auto& [task, id] : prompts_) prompts[task] = tokens_[static_cast<std::size_t>(id)];
    return {{"tokens", tokens_}, {"prompts", prompts}, {"labels", labels}};
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& tok) const {
    auto it = ids_.find(tok);
    if (it == ids_.end()) throw ValidationError("vocab: unknown token '" + tok + "'");
    return it->second;
  }
  bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
  int eos() const { return id(kEos); }
  int pad() const { return id(kPad); }

  int prompt(const std::string& task_id) const {
    auto it = prompts_.find(task_id);
    if (it == prompts_.end()) throw ValidationError("vocab: no prompt for task '" + task_id + "'");
    return it->second;
  }

  // Label value for token `id` in `task_id`'s subset, if it belongs there.
  std::optional<int> label_value(const std::string& task_id, int id) const {
    auto t = words_.find(task_id);
    if (t == words_.end()) return std::nullopt;
    auto w = t->second.find(id);
    if (w == t->second.end()) return std::nullopt;
    return w->second;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && prompts_ == o.prompts_ && words_ == o.words_; }

 private:
  int push(const std::string& tok) {
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(tok);
    ids_.emplace(tok, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::map<std::string, int> prompts_;
  std::map<std::string, std::unordered_map<int, int>> words_;
};

struct TargetSequence {
  std::string task_id;
  std::vector<int> ids;
  std::vector<double> weights;

  std::size_t size() const { return ids.size(); }
};

// [prompt, word(y_1), ..., word(y_Z), EOS]; the prompt carries zero weight.
inline TargetSequence tokenize(const Vocabulary& v, const TaskSpec& task, const Label& y) {
  if (!task.label_space.contains(y)) throw ValidationError("tokenize: label outside the label space of " + task.task_id);
  TargetSequence s{task.task_id, {v.prompt(task.task_id)}, {0.0}};
  for (int x : y) {
    s.ids.push_back(v.id(label_word(task.label_space, x)));
    s.weights.push_back(1.0);
  }
  s.ids.push_back(v.eos());
  s.weights.push_back(1.0);
  return s;
}

enum class Incorrect { missing_eos, out_of_label_space, arity };

inline std::string to_string(Incorrect r) {
  switch (r) {
    case Incorrect::missing_eos: return "missing_eos";
    case Incorrect::out_of_label_space: return "out_of_label_space";
    case Incorrect::arity: return "arity";
  }
  return "";
}

struct Decoded {
  std::optional<Label> label;
  std::optional<Incorrect> reason;

  bool ok() const { return label.has_value(); }
};

// Inverse of tokenize. Total: malformed output yields a reason instead of a label.
inline Decoded detokenize(const Vocabulary& v, const TaskSpec& task, const std::vector<int>& ids) {
  std::size_t i = 0;
  if (!ids.empty() && ids[0] == v.prompt(task.task_id)) i = 1;
  const int eos = v.eos();
  Label y;
  bool saw_eos = false, oov = false;
  for (; i < ids.size(); ++i) {
    if (ids[i] == eos) {
      saw_eos = true;
      break;
    }
    auto val = v.label_value(task.task_id, ids[i]);
    if (!val) oov = true;
    y.push_back(val.value_or(-1));
  }
  if (!saw_eos) return {std::nullopt, Incorrect::missing_eos};
  if (oov) return {std::nullopt, Incorrect::out_of_label_space};
  if (static_cast<int>(y.size()) != task.label_space.arity()) return {std::nullopt, Incorrect::arity};
  return {std::move(y), std::nullopt};
}

// Weighted negative log-likelihood of `target` under per-position logits (M x |V|).
template <class S>
ag::Var<S> seq_loss(ag::Var<S> logits, const TargetSequence& target) {
  if (static_cast<std::size_t>(logits.rows()) != target.size())
    throw ShapeError("seq_loss: logits have " + std::to_string(logits.rows()) + " rows, target has " + std::to_string(target.size()));
  std::vector<S> w(target.weights.begin(), target.weights.end());
  return ag::cross_entropy(logits, target.ids, w);
}

// Mean seq_loss over a batch.
template <class S>
ag::Var<S> seq_loss(const std::vector<ag::Var<S>>& logits, const std::vector<TargetSequence>& targets) {
  if (logits.empty() || logits.size() != targets.size()) throw ShapeError("seq_loss: batch sizes differ");
  std::vector<ag::Var<S>> parts;
  for (std::size_t i = 0; i < logits.size(); ++i) parts.push_back(seq_loss(logits[i], targets[i]));
  return ag::scale(ag::sum(parts), S(1) / static_cast<S>(parts.size()));
}

struct SeqDecoderConfig {
  int depth = 2;
  int heads = 4;
  int ff_mult = 2;
};

template <class S>
class SeqDecoder {
 public:
  SeqDecoder() = default;
  SeqDecoder(ParamStore<S>& store, const SeqDecoderConfig& cfg, int width, int vocab, Rng& rng) : width_(width) {
    embed_ = store.add("decoder.embed", normal_init<S>(vocab, width, 0.02, rng));
    for (int l = 0; l < cfg.depth; ++l)
      layers_.emplace_back(store, "decoder.layer" + std::to_string(l), width, cfg.heads, cfg.ff_mult * width, rng);
    norm_ = nn::LayerNorm<S>(store, "decoder.norm", width);
    out_ = nn::Linear<S>(store, "decoder.out", width, vocab, rng);
  }

  int depth() const { return static_cast<int>(layers_.size()); }

  // Next-token logits for every input position: (len x |V|). `cross` receives each layer's
  // encoder-decoder attention (H maps of len x N) when non-null.
  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> memory, const std::vector<int>& ids, std::vector<nn::HeadMaps<S>>* cross) const {
    if (ids.empty()) throw ShapeError("decoder: empty input");
    if (memory.cols() != width_) throw ShapeError("decoder: memory width differs from the decoder width");
    std::vector<double> pos(ids.size());
    std::iota(pos.begin(), pos.end(), 0.0);
    ag::Var<S> x = ag::add(ag::gather_rows(t.param(*embed_), ids), t.constant(sinusoidal_encoding<S>(pos, width_)));
    if (cross) cross->assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l](t, x, memory, nullptr, cross ? &(*cross)[l] : nullptr);
    return out_(t, norm_(t, x));
  }

 private:
  int width_ = 0;
  Parameter<S>* embed_ = nullptr;
  std::vector<nn::DecoderLayer<S>> layers_;
  nn::LayerNorm<S> norm_;
  nn::Linear<S> out_;
};

// Teacher-forced logits aligned with `target` (M x |V|). Row 0 is a constant zero
// placeholder for the prompt position; row j >= 1 predicts ids[j] from ids[0..j-1].
template <class S>
ag::Var<S> teacher_forced(ag::Tape<S>& t, const SeqDecoder<S>& dec, ag::Var<S> memory, const TargetSequence& target, int vocab) {
  if (target.size() < 2) throw ShapeError("teacher_forced: target needs a prompt and at least one token");
  std::vector<int> in(target.ids.begin(), target.ids.end() - 1);
  ag::Var<S> body = dec(t, memory, in, nullptr);
  return ag::concat_rows(std::vector<ag::Var<S>>{t.constant(Matrix<S>::Zero(1, vocab)), body});
}

// Greedy decoding from [prompt] until EOS or max_len tokens (prompt included).
template <class S>
std::vector<int> generate(const SeqDecoder<S>& dec, const Matrix<S>& memory, int prompt, int eos, int max_len) {
  if (max_len < 2) throw ValidationError("generate: max_len must be >= 2");
  std::vector<int> ids{prompt};
  while (static_cast<int>(ids.size()) < max_len) {
    ag::Tape<S> t;
    ag::Var<S> logits = dec(t, t.constant(memory), ids, nullptr);
    Eigen::Index best = 0;
    logits.value().row(logits.rows() - 1).maxCoeff(&best);
    ids.push_back(static_cast<int>(best));
    if (best == eos) break;
  }
  return ids;
}

// Encoder-decoder attention of every layer over a full token sequence: per layer H maps (M x N).
template <class S>
std::vector<nn::HeadMaps<S>> cross_attention_weights(const SeqDecoder<S>& dec, const Matrix<S>& memory, const std::vector<int>& ids,
                                                     bool capture_enabled) {
  if (!capture_enabled) throw ValidationError("cross_attention_weights: attention capture is disabled");
  ag::Tape<S> t;
  std::vector<nn::HeadMaps<S>> cross;
  dec(t, t.constant(memory), ids, &cross);
  return cross;
}

struct GeneralSpec {
  FusionConfig fusion;
  SeqDecoderConfig decoder;
  std::vector<SourceInfo> sources;
  std::vector<TaskSpec> tasks;
};

inline json to_json(const GeneralSpec& s) {
  json src = json::array(), tasks = json::array();
  for (const auto& x : s.sources) src.push_back(to_json(x));
  for (const auto& t : s.tasks) tasks.push_back(to_json(t));
  return {{"fusion", to_json(s.fusion)},
          {"decoder", {{"depth", s.decoder.depth}, {"heads", s.decoder.heads}, {"ff_mult", s.decoder.ff_mult}}},
          {"sources", src},
          {"tasks", tasks}};
}

inline GeneralSpec general_spec_from_json(const json& j) {
  GeneralSpec s;
  s.fusion = fusion_from_json(j.at("fusion"), "fusion");
  s.decoder = {j.at("decoder").at("depth"), j.at("decoder").at("heads"), j.at("decoder").at("ff_mult")};
  for (const auto& x : j.at("sources")) s.sources.push_back(source_from_json(x));
  for (const auto& t : j.at("tasks")) s.tasks.push_back(task_spec_from_json(t, "tasks"));
  return s;
}

template <class S>
struct GeneralForward {
  TokenBatch<S> memory;
  AttentionStack<S> encoder_attention;
};

// One translator serving every task through a prompt-conditioned sequence decoder.
template <class S>
class GeneralTranslator {
 public:
  GeneralTranslator(GeneralSpec spec, std::uint64_t seed) : spec_(std::move(spec)), vocab_(spec_.tasks) {
    if (spec_.tasks.size() < 2) throw ValidationError("general translator needs >= 2 tasks");
    if (spec_.sources.empty()) throw ValidationError("general translator: no usable tasks");
    Rng rng(mix_seed(seed, hash_string("general-translator")));
    core_ = FusionCore<S>(store_, spec_.fusion, spec_.sources, rng);
    decoder_ = SeqDecoder<S>(store_, spec_.decoder, spec_.fusion.width, vocab_.size(), rng);
    for (const auto& t : spec_.tasks) max_len_ = std::max(max_len_, t.label_space.arity() + 2);
  }

  const GeneralSpec& spec() const { return spec_; }
  const Vocabulary& vocab() const { return vocab_; }
  const FusionCore<S>& core() const { return core_; }
  const SeqDecoder<S>& decoder() const { return decoder_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  int max_len() const { return max_len_; }

  const TaskSpec& task(const std::string& id) const { return find_task(spec_.tasks, id); }

  // Fused tokens for a clip; `source_ids[i]` names the translator source that produced feats[i].
  GeneralForward<S> encode(ag::Tape<S>& t, const std::vector<int>& source_ids, const std::vector<ag::Var<S>>& feats,
                           const std::vector<const FeatureLayout*>& layouts, bool temporal_pool, bool capture) const {
    GeneralForward<S> r;
    r.memory = core_.encode(t, core_.tokens(t, source_ids, feats, layouts, temporal_pool), capture ? &r.encoder_attention : nullptr);
    return r;
  }

  ag::Var<S> loss(ag::Tape<S>& t, const TokenBatch<S>& memory, const std::string& task_id, const Label& y) const {
    const TargetSequence target = tokenize(vocab_, task(task_id), y);
    return seq_loss(teacher_forced(t, decoder_, memory.z, target, vocab_.size()), target);
  }

  std::vector<int> generate_ids(const Matrix<S>& memory, const std::string& task_id) const {
    return generate(decoder_, memory, vocab_.prompt(task_id), vocab_.eos(), max_len_);
  }

  Decoded predict(const Matrix<S>& memory, const std::string& task_id) const {
    return detokenize(vocab_, task(task_id), generate_ids(memory, task_id));
  }

  Checkpoint to_checkpoint(json meta) const {
    Checkpoint ck;
    meta["general"] = to_json(spec_);
    meta["vocab"] = vocab_.to_json();
    ck.meta = std::move(meta);
    append_params(ck, store_, "translator.");
    return ck;
  }

  static GeneralTranslator from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("general")) throw FormatError("checkpoint has no general translator block (field: meta.general)");
    GeneralTranslator g(general_spec_from_json(ck.meta.at("general")), 0);
    if (ck.meta.contains("vocab") && !(Vocabulary::from_json(ck.meta.at("vocab")) == g.vocab_))
      throw Incompatible("checkpoint vocabulary differs from the one its task list builds");
    load_params(g.store_, ck, "translator.");
    return g;
  }

 private:
  GeneralSpec spec_;
  Vocabulary vocab_;
  ParamStore<S> store_;
  FusionCore<S> core_;
  SeqDecoder<S> decoder_;
  int max_len_ = 2;
};

}  // namespace egot2
