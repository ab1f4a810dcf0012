#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "egot2/autograd.hpp"

namespace egot2 {

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a salt (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Owns named parameters at stable addresses, in registration order.
template <class S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<S>* add(const std::string& name, Matrix<S> init) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->value = std::move(init);
    p->zero_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::vector<Parameter<S>*> all() const {
    std::vector<Parameter<S>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  // Parameters whose name starts with `prefix`.
  std::vector<Parameter<S>*> group(const std::string& prefix) const {
    std::vector<Parameter<S>*> out;
    for (const auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p->trainable = on;
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class S>
std::int64_t count_params(const std::vector<Parameter<S>*>& ps) {
  std::int64_t n = 0;
  for (const auto* p : ps) n += p->size();
  return n;
}

template <class S>
Matrix<S> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

// Fixed sinusoidal encoding at real-valued positions; row i encodes positions[i].
template <class S>
Matrix<S> sinusoidal_encoding(const std::vector<double>& positions, Eigen::Index width) {
  Matrix<S> pe(static_cast<Eigen::Index>(positions.size()), width);
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (Eigen::Index d = 0; d < width; ++d) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (d / 2)) / static_cast<double>(width));
      const double a = positions[i] * freq;
      pe(static_cast<Eigen::Index>(i), d) = static_cast<S>(d % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return pe;
}

namespace nn {

template <class S>
struct Linear {
  Parameter<S>* weight = nullptr;  // in x out
  Parameter<S>* bias = nullptr;    // 1 x out, optional

  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng, bool with_bias = true) {
    weight = store.add(name + ".weight", normal_init<S>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    if (with_bias) bias = store.add(name + ".bias", Matrix<S>::Zero(1, out));
  }

  Eigen::Index in() const { return weight->value.rows(); }
  Eigen::Index out() const { return weight->value.cols(); }

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const {
    ag::Var<S> y = ag::matmul(x, t.param(*weight));
    return bias ? ag::add_row(y, t.param(*bias)) : y;
  }
};

template <class S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, Eigen::Index width) {
    gamma = store.add(name + ".gamma", Matrix<S>::Ones(1, width));
    beta = store.add(name + ".beta", Matrix<S>::Zero(1, width));
  }

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const { return ag::layer_norm(x, t.param(*gamma), t.param(*beta)); }
};

// Per-call attention capture: one (Nq x Nk) probability matrix per head.
template <class S>
using HeadMaps = std::vector<Matrix<S>>;

template <class S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& store, const std::string& name, Eigen::Index width, int n_heads, Rng& rng)
      : heads(n_heads) {
    if (n_heads < 1 || width % n_heads != 0) throw ValidationError(name + ": width must be divisible by heads");
    q = Linear<S>(store, name + ".q", width, width, rng);
    k = Linear<S>(store, name + ".k", width, width, rng);
    v = Linear<S>(store, name + ".v", width, width, rng);
    o = Linear<S>(store, name + ".o", width, width, rng);
  }

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> xq, ag::Var<S> xkv, bool causal, HeadMaps<S>* capture) const {
    const Eigen::Index width = q.out(), dh = width / heads;
    ag::Var<S> Q = q(t, xq), K = k(t, xkv), V = v(t, xkv);
    const S inv = S(1) / std::sqrt(static_cast<S>(dh));
    std::vector<ag::Var<S>> outs;
    outs.reserve(heads);
    if (capture) capture->clear();
    for (int h = 0; h < heads; ++h) {
      ag::Var<S> qh = ag::slice_cols(Q, h * dh, dh);
      ag::Var<S> kh = ag::slice_cols(K, h * dh, dh);
      ag::Var<S> vh = ag::slice_cols(V, h * dh, dh);
      ag::Var<S> p = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), inv), causal);
      if (capture) capture->push_back(p.value());
      outs.push_back(ag::matmul(p, vh));
    }
    return o(t, ag::concat_cols(outs));
  }
};

template <class S>
struct FeedForward {
  Linear<S> up, down;

  FeedForward() = default;
  FeedForward(ParamStore<S>& store, const std::string& name, Eigen::Index width, Eigen::Index hidden, Rng& rng)
      : up(store, name + ".up", width, hidden, rng), down(store, name + ".down", hidden, width, rng) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const { return down(t, ag::relu(up(t, x))); }
};

// Pre-norm transformer encoder block: x + MHA(LN(x)), then x + FF(LN(x)).
template <class S>
struct EncoderLayer {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  FeedForward<S> ff;

  EncoderLayer() = default;
  EncoderLayer(ParamStore<S>& store, const std::string& name, Eigen::Index width, int heads, Eigen::Index hidden, Rng& rng)
      : ln1(store, name + ".ln1", width),
        ln2(store, name + ".ln2", width),
        attn(store, name + ".attn", width, heads, rng),
        ff(store, name + ".ff", width, hidden, rng) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x, HeadMaps<S>* capture) const {
    ag::Var<S> h = ln1(t, x);
    x = ag::add(x, attn(t, h, h, false, capture));
    return ag::add(x, ff(t, ln2(t, x)));
  }
};

// Pre-norm decoder block: causal self-attention, cross-attention to memory, feed-forward.
template <class S>
struct DecoderLayer {
  LayerNorm<S> ln1, ln2, ln3;
  MultiHeadAttention<S> self_attn, cross_attn;
  FeedForward<S> ff;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<S>& store, const std::string& name, Eigen::Index width, int heads, Eigen::Index hidden, Rng& rng)
      : ln1(store, name + ".ln1", width),
        ln2(store, name + ".ln2", width),
        ln3(store, name + ".ln3", width),
        self_attn(store, name + ".self_attn", width, heads, rng),
        cross_attn(store, name + ".cross_attn", width, heads, rng),
        ff(store, name + ".ff", width, hidden, rng) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x, ag::Var<S> memory, HeadMaps<S>* self_capture,
                        HeadMaps<S>* cross_capture) const {
    ag::Var<S> h = ln1(t, x);
    x = ag::add(x, self_attn(t, h, h, true, self_capture));
    x = ag::add(x, cross_attn(t, ln2(t, x), memory, false, cross_capture));
    return ag::add(x, ff(t, ln3(t, x)));
  }
};

}  // namespace nn

// Adam with decoupled weight decay. State is keyed by parameter address.
template <class S>
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit AdamW(std::vector<Parameter<S>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  // Applies one update to every trainable parameter using its accumulated grad.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = *params_[i];
      if (!p.trainable) continue;
      if (p.grad.size() == 0) p.zero_grad();
      m_[i] = S(opt_.beta1) * m_[i] + S(1 - opt_.beta1) * p.grad;
      v_[i] = S(opt_.beta2) * v_[i] + S(1 - opt_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value *= S(1 - opt_.lr * opt_.weight_decay);
      p.value.array() -= S(opt_.lr) * (m_[i].array() / S(bc1)) / ((v_[i].array() / S(bc2)).sqrt() + S(opt_.eps));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  long steps() const { return t_; }

 private:
  std::vector<Parameter<S>*> params_;
  Options opt_;
  std::vector<Matrix<S>> m_, v_;
  long t_ = 0;
};

}  // namespace egot2
