#pragma once

// Parameterized building blocks composed from the kernels in ops.hpp. Each
// layer registers its parameters in a ParamStore under a name prefix and
// keeps stable pointers to them.

#include <optional>
#include <random>
#include <string>

#include "cdua/diffgraph/ops.hpp"

namespace cdua::dg {

using Rng = std::mt19937_64;

template <typename S>
Vec<S> uniform_init(Index n, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Vec<S> out(n);
  for (Index i = 0; i < n; ++i) out[i] = static_cast<S>(dist(rng));
  return out;
}

template <typename S>
struct Conv1dLayer {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;
  Index stride = 1;

  static Conv1dLayer make(ParamStore<S>& store, const std::string& name, Index cin, Index cout, Index kernel,
                          Index stride, Rng& rng, bool zero_init = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel));
    Conv1dLayer layer;
    layer.stride = stride;
    const Index n = cout * cin * kernel;
    layer.weight = &store.add(name + ".weight", {cout, cin, kernel},
                              zero_init ? Vec<S>::Zero(n) : uniform_init<S>(n, bound, rng));
    layer.bias = &store.add(name + ".bias", {cout}, zero_init ? Vec<S>::Zero(cout) : uniform_init<S>(cout, bound, rng));
    return layer;
  }

  Var operator()(Tape<S>& tape, Var x) const {
    return conv1d(tape, x, tape.param(*weight), tape.param(*bias), stride);
  }
};

template <typename S>
struct ConvTranspose2xLayer {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  static ConvTranspose2xLayer make(ParamStore<S>& store, const std::string& name, Index cin, Index cout, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 2));
    ConvTranspose2xLayer layer;
    layer.weight = &store.add(name + ".weight", {2, cout, cin}, uniform_init<S>(2 * cout * cin, bound, rng));
    layer.bias = &store.add(name + ".bias", {cout}, uniform_init<S>(cout, bound, rng));
    return layer;
  }

  Var operator()(Tape<S>& tape, Var x) const {
    return conv_transpose2x(tape, x, tape.param(*weight), tape.param(*bias));
  }
};

template <typename S>
struct DenseLayer {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  static DenseLayer make(ParamStore<S>& store, const std::string& name, Index din, Index dout, Rng& rng,
                         double init_scale = 1.0) {
    const double bound = init_scale / std::sqrt(static_cast<double>(din));
    DenseLayer layer;
    layer.weight = &store.add(name + ".weight", {dout, din}, uniform_init<S>(dout * din, bound, rng));
    layer.bias = &store.add(name + ".bias", {dout}, uniform_init<S>(dout, bound, rng));
    return layer;
  }

  Var operator()(Tape<S>& tape, Var x) const { return dense(tape, x, tape.param(*weight), tape.param(*bias)); }
};

template <typename S>
struct GroupNormLayer {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Index groups = 8;

  static GroupNormLayer make(ParamStore<S>& store, const std::string& name, Index channels, Index groups) {
    GroupNormLayer layer;
    layer.groups = groups;
    layer.gamma = &store.add(name + ".gamma", {channels}, Vec<S>::Ones(channels));
    layer.beta = &store.add(name + ".beta", {channels}, Vec<S>::Zero(channels));
    return layer;
  }

  Var operator()(Tape<S>& tape, Var x) const {
    return group_norm(tape, x, tape.param(*gamma), tape.param(*beta), groups);
  }
};

/// out = F(x) + skip(x), F = conv(gelu(norm(conv(gelu(norm(x)))))). The skip
/// path is the identity, or a 1x1 convolution when the channel count changes.
/// The last convolution of F starts at zero so the block is the skip at init.
template <typename S>
struct ResidualBlock {
  GroupNormLayer<S> norm1, norm2;
  Conv1dLayer<S> conv1, conv2;
  std::optional<Conv1dLayer<S>> skip;

  static ResidualBlock make(ParamStore<S>& store, const std::string& name, Index cin, Index cout, Index groups,
                            Rng& rng, bool zero_init_output = true) {
    ResidualBlock block;
    block.norm1 = GroupNormLayer<S>::make(store, name + ".norm1", cin, groups);
    block.conv1 = Conv1dLayer<S>::make(store, name + ".conv1", cin, cout, 3, 1, rng);
    block.norm2 = GroupNormLayer<S>::make(store, name + ".norm2", cout, groups);
    block.conv2 = Conv1dLayer<S>::make(store, name + ".conv2", cout, cout, 3, 1, rng, zero_init_output);
    if (cin != cout) block.skip = Conv1dLayer<S>::make(store, name + ".skip", cin, cout, 1, 1, rng);
    return block;
  }

  Var operator()(Tape<S>& tape, Var x) const {
    Var h = conv1(tape, gelu(tape, norm1(tape, x)));
    h = conv2(tape, gelu(tape, norm2(tape, h)));
    const Var s = skip ? (*skip)(tape, x) : x;
    return add(tape, h, s);
  }
};

/// Projected multi-head attention over token sequences (B x T x D).
template <typename S>
struct MultiHeadAttention {
  DenseLayer<S> query, key, value, out;
  Index heads = 4;

  static MultiHeadAttention make(ParamStore<S>& store, const std::string& name, Index dim, Index heads, Rng& rng) {
    MultiHeadAttention mha;
    mha.heads = heads;
    mha.query = DenseLayer<S>::make(store, name + ".query", dim, dim, rng);
    mha.key = DenseLayer<S>::make(store, name + ".key", dim, dim, rng);
    mha.value = DenseLayer<S>::make(store, name + ".value", dim, dim, rng);
    mha.out = DenseLayer<S>::make(store, name + ".out", dim, dim, rng);
    return mha;
  }

  Var operator()(Tape<S>& tape, Var queries, Var context) const {
    const Var a = attention(tape, query(tape, queries), key(tape, context), value(tape, context), heads);
    return out(tape, a);
  }
};

/// Residual self-attention over the length axis of a B x C x L sequence.
template <typename S>
struct SelfAttentionBlock {
  GroupNormLayer<S> norm;
  MultiHeadAttention<S> mha;

  static SelfAttentionBlock make(ParamStore<S>& store, const std::string& name, Index channels, Index groups,
                                 Index heads, Rng& rng) {
    SelfAttentionBlock block;
    block.norm = GroupNormLayer<S>::make(store, name + ".norm", channels, groups);
    block.mha = MultiHeadAttention<S>::make(store, name + ".mha", channels, heads, rng);
    return block;
  }

  Var operator()(Tape<S>& tape, Var x) const {
    const Var tokens = transpose12(tape, norm(tape, x));
    return add(tape, x, transpose12(tape, mha(tape, tokens, tokens)));
  }
};

}  // namespace cdua::dg
