#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ase/tensor.hpp"

namespace ase {

using Rng = std::mt19937_64;

template <typename S>
void init_uniform(Parameter<S>& p, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(dist(rng));
}

template <typename S>
void init_normal(Parameter<S>& p, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(dist(rng));
}

/// Flat, ordered view over a model's parameters.
template <typename S>
class ParameterList {
 public:
  void push_back(Parameter<S>& p) {
    index_.emplace(&p, items_.size());
    items_.push_back(&p);
  }

  std::size_t size() const { return items_.size(); }
  Parameter<S>& operator[](std::size_t i) const { return *items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  Index scalar_count() const {
    Index n = 0;
    for (auto* p : items_) n += p->numel();
    return n;
  }

  void zero_grad() const {
    for (auto* p : items_) p->zero_grad();
  }

  /// Folds a backward result into Parameter::grad for parameters of this list.
  void accumulate(const Tape<S>& tape, const Gradients<S>& grads) const {
    tape.for_each_parameter_gradient(grads, [&](const Parameter<S>& p, const MatrixX<S>& g) {
      if (auto it = index_.find(&p); it != index_.end()) items_[it->second]->grad += g;
    });
  }

  /// Same, but into caller-owned buffers aligned with this list.
  void accumulate_into(const Tape<S>& tape, const Gradients<S>& grads, std::vector<MatrixX<S>>& out) const {
    tape.for_each_parameter_gradient(grads, [&](const Parameter<S>& p, const MatrixX<S>& g) {
      if (auto it = index_.find(&p); it != index_.end()) {
        auto& slot = out[it->second];
        if (slot.size() == 0) {
          slot = g;
        } else {
          slot += g;
        }
      }
    });
  }

 private:
  std::vector<Parameter<S>*> items_;
  std::unordered_map<const Parameter<S>*, std::size_t> index_;
};

template <typename S, typename Module>
ParameterList<S> collect_parameters(Module& m) {
  ParameterList<S> list;
  m.visit([&](Parameter<S>& p) { list.push_back(p); });
  return list;
}

/// y = x W + b, W is [in x out].
template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Index in, Index out, Rng& rng, bool bias = true)
      : weight(name + ".weight", Shape{in, out}), has_bias_(bias) {
    init_uniform(weight, rng, std::sqrt(6.0 / static_cast<double>(in + out)));
    if (bias) this->bias = Parameter<S>(name + ".bias", Shape{out});
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const {
    Tensor<S> y = matmul(x, tape.parameter(weight));
    return has_bias_ ? add_bias(y, tape.parameter(bias)) : y;
  }

  Index in_features() const { return weight.shape[0]; }
  Index out_features() const { return weight.shape[1]; }
  bool has_bias() const { return has_bias_; }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    if (has_bias_) f(bias);
  }

  Parameter<S> weight;
  Parameter<S> bias;

 private:
  bool has_bias_ = true;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim) : gamma(name + ".gamma", Shape{dim}), beta(name + ".beta", Shape{dim}) {
    gamma.value.setOnes();
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const {
    return layer_norm(x, tape.parameter(gamma), tape.parameter(beta));
  }

  template <typename F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }

  Parameter<S> gamma;
  Parameter<S> beta;
};

template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Index dim, Index heads, Rng& rng, bool zero_output = false)
      : query(name + ".query", dim, dim, rng),
        key(name + ".key", dim, dim, rng),
        value(name + ".value", dim, dim, rng),
        output(name + ".output", dim, dim, rng),
        heads_(heads) {
    if (heads <= 0 || dim % heads != 0) throw ContractError(name + ": width must be divisible by head count");
    if (zero_output) output.weight.value.setZero();
  }

  /// Queries from `x_query`, keys and values from `x_memory`.
  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x_query, const Tensor<S>& x_memory,
                    AttentionMask mask = {}) const {
    Tensor<S> q = query.forward(tape, x_query);
    Tensor<S> k = key.forward(tape, x_memory);
    Tensor<S> v = value.forward(tape, x_memory);
    return output.forward(tape, attention(q, k, v, heads_, mask));
  }

  Index heads() const { return heads_; }

  template <typename F>
  void visit(F&& f) {
    query.visit(f);
    key.visit(f);
    value.visit(f);
    output.visit(f);
  }

  Linear<S> query, key, value, output;

 private:
  Index heads_ = 1;
};

template <typename S>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, Index dim, Index hidden, Rng& rng)
      : fc1(name + ".fc1", dim, hidden, rng), fc2(name + ".fc2", hidden, dim, rng) {}

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x) const { return fc2.forward(tape, gelu(fc1.forward(tape, x))); }

  template <typename F>
  void visit(F&& f) {
    fc1.visit(f);
    fc2.visit(f);
  }

  Linear<S> fc1, fc2;
};

/// Pre-norm transformer block: h = x + SA(LN x); out = h + FFN(LN h).
template <typename S>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Index dim, Index heads, Index hidden, Rng& rng)
      : ln_attn(name + ".ln_attn", dim),
        attn(name + ".attn", dim, heads, rng),
        ln_ffn(name + ".ln_ffn", dim),
        ffn(name + ".ffn", dim, hidden, rng) {}

  Tensor<S> attend(Tape<S>& tape, const Tensor<S>& x, AttentionMask mask = {}) const {
    Tensor<S> n = ln_attn.forward(tape, x);
    return add(x, attn.forward(tape, n, n, mask));
  }

  Tensor<S> feed_forward(Tape<S>& tape, const Tensor<S>& h) const {
    return add(h, ffn.forward(tape, ln_ffn.forward(tape, h)));
  }

  Tensor<S> forward(Tape<S>& tape, const Tensor<S>& x, AttentionMask mask = {}) const {
    return feed_forward(tape, attend(tape, x, mask));
  }

  template <typename F>
  void visit(F&& f) {
    ln_attn.visit(f);
    attn.visit(f);
    ln_ffn.visit(f);
    ffn.visit(f);
  }

  LayerNorm<S> ln_attn;
  MultiHeadAttention<S> attn;
  LayerNorm<S> ln_ffn;
  FeedForward<S> ffn;
};

}  // namespace ase
