#pragma once

// Conditioning encoder (1D U-Net over the history window) and the noise
// predictor that attends from noisy target tokens into the encoder output.

#include <string>
#include <vector>

#include "cdua/diffgraph/encoding.hpp"
#include "cdua/diffgraph/layers.hpp"

namespace cdua::model {

using dg::Index;
using dg::Var;

enum class Variant { full, no_self_attn, no_cross_attn, backbone };
enum class Upsample { transposed, linear };

const char* to_string(Variant v);
Variant parse_variant(const std::string& text);
const char* to_string(Upsample u);
Upsample parse_upsample(const std::string& text);

struct CduaConfig {
  Index history_len = 8;
  Index horizon = 8;
  Index feature_dim = 9;
  bool condition_on_capacity = true;
  std::vector<Index> channels = {32, 64, 128};
  Index heads = 4;
  Index time_embed_dim = 64;
  Index groups = 8;
  Variant variant = Variant::full;
  Upsample upsample = Upsample::transposed;

  Index input_channels() const { return feature_dim + (condition_on_capacity ? 1 : 0); }
  Index stages() const { return static_cast<Index>(channels.size()) - 1; }
  Index padded_len() const {
    const Index unit = Index{1} << stages();
    return (history_len + unit - 1) / unit * unit;
  }
  Index model_dim() const { return channels.front(); }
  bool self_attention() const { return variant == Variant::full || variant == Variant::no_cross_attn; }
  bool cross_attention() const { return variant == Variant::full || variant == Variant::no_self_attn; }

  /// Throws ErrorKind::validation on inconsistent settings.
  void validate() const;
};

std::string config_to_json(const CduaConfig& c);
CduaConfig config_from_json(const std::string& text);

template <typename S>
struct ContextUnet {
  struct Stage {
    dg::ResidualBlock<S> res1, res2;
    dg::Conv1dLayer<S> down;
    std::optional<dg::SelfAttentionBlock<S>> attn;
  };
  struct UpStage {
    std::optional<dg::ConvTranspose2xLayer<S>> up_t;
    std::optional<dg::Conv1dLayer<S>> up_proj;  // linear-interpolation mode
    dg::ResidualBlock<S> res1, res2;
  };

  CduaConfig config;
  dg::Conv1dLayer<S> init;
  std::vector<Stage> down;
  dg::ResidualBlock<S> mid1, mid2;
  std::vector<UpStage> up;  // deepest first
  dg::Vec<S> positional;    // C0 x Lp

  /// Set to false to feed zeros in place of the encoder skips.
  bool fuse_skips = true;

  static ContextUnet make(dg::ParamStore<S>& store, const CduaConfig& c, dg::Rng& rng) {
    ContextUnet u;
    u.config = c;
    const auto& ch = c.channels;
    const Index g = c.groups;
    u.init = dg::Conv1dLayer<S>::make(store, "ctx.init", c.input_channels(), ch[0], 3, 1, rng);
    for (Index s = 0; s < c.stages(); ++s) {
      const std::string p = "ctx.down" + std::to_string(s);
      Stage st;
      st.res1 = dg::ResidualBlock<S>::make(store, p + ".res1", ch[s], ch[s], g, rng);
      st.res2 = dg::ResidualBlock<S>::make(store, p + ".res2", ch[s], ch[s], g, rng);
      st.down = dg::Conv1dLayer<S>::make(store, p + ".conv", ch[s], ch[s + 1], 3, 2, rng);
      if (c.self_attention()) st.attn = dg::SelfAttentionBlock<S>::make(store, p + ".attn", ch[s + 1], g, c.heads, rng);
      u.down.push_back(std::move(st));
    }
    const Index deep = ch.back();
    u.mid1 = dg::ResidualBlock<S>::make(store, "ctx.mid.res1", deep, deep, g, rng);
    u.mid2 = dg::ResidualBlock<S>::make(store, "ctx.mid.res2", deep, deep, g, rng);
    for (Index s = c.stages() - 1; s >= 0; --s) {
      const std::string p = "ctx.up" + std::to_string(s);
      UpStage st;
      if (c.upsample == Upsample::transposed) {
        st.up_t = dg::ConvTranspose2xLayer<S>::make(store, p + ".upconv", ch[s + 1], ch[s], rng);
      } else {
        st.up_proj = dg::Conv1dLayer<S>::make(store, p + ".proj", ch[s + 1], ch[s], 1, 1, rng);
      }
      st.res1 = dg::ResidualBlock<S>::make(store, p + ".res1", 2 * ch[s], ch[s], g, rng);
      st.res2 = dg::ResidualBlock<S>::make(store, p + ".res2", ch[s], ch[s], g, rng);
      u.up.push_back(std::move(st));
    }
    const Index lp = c.padded_len();
    const dg::Vec<S> table = dg::sinusoidal_table<S>(lp, ch[0]);  // Lp x C0
    u.positional.resize(lp * ch[0]);
    for (Index l = 0; l < lp; ++l)
      for (Index k = 0; k < ch[0]; ++k) u.positional[k * lp + l] = table[l * ch[0] + k];
    return u;
  }

  /// x: batch x history_len x input_channels, row-major. Returns the context
  /// map as B x Lp x C0 tokens.
  Var operator()(dg::Tape<S>& tape, const dg::Vec<S>& x, Index batch) const {
    const Index l = config.history_len, din = config.input_channels(), lp = config.padded_len();
    if (x.size() != batch * l * din) fail(ErrorKind::validation, "context encoder: input size mismatch");
    if (!x.allFinite()) fail(ErrorKind::numeric, "context encoder: non-finite input");
    // Channels-first with zero left padding.
    dg::Vec<S> padded = dg::Vec<S>::Zero(batch * din * lp);
    for (Index b = 0; b < batch; ++b)
      for (Index t = 0; t < l; ++t)
        for (Index c = 0; c < din; ++c) padded[(b * din + c) * lp + (lp - l + t)] = x[(b * l + t) * din + c];
    Var h = init(tape, tape.constant({batch, din, lp}, std::move(padded)));
    h = dg::add(tape, h, tape.constant({1, config.channels[0], lp}, positional));

    std::vector<Var> skips;
    for (const auto& st : down) {
      h = st.res2(tape, st.res1(tape, h));
      skips.push_back(h);
      h = st.down(tape, h);
      if (st.attn) h = (*st.attn)(tape, h);
    }
    h = mid2(tape, mid1(tape, h));
    for (std::size_t i = 0; i < up.size(); ++i) {
      const auto& st = up[i];
      h = st.up_t ? (*st.up_t)(tape, h) : (*st.up_proj)(tape, dg::upsample_linear2x(tape, h));
      Var skip = skips[skips.size() - 1 - i];
      if (!fuse_skips) skip = tape.constant(tape.shape(skip), dg::Vec<S>::Zero(tape.value(skip).size()));
      h = st.res2(tape, st.res1(tape, dg::concat1(tape, h, skip)));
    }
    return dg::transpose12(tape, h);
  }

  std::size_t attention_blocks() const {
    std::size_t n = 0;
    for (const auto& st : down) n += st.attn ? 1 : 0;
    return n;
  }
};

template <typename S>
struct NoisePredictor {
  CduaConfig config;
  dg::DenseLayer<S> embed;
  dg::DenseLayer<S> time1, time2;
  std::optional<dg::MultiHeadAttention<S>> cross;
  std::optional<dg::DenseLayer<S>> pooled;
  dg::DenseLayer<S> ff1, ff2;
  dg::ResidualBlock<S> res;
  dg::Conv1dLayer<S> head;
  dg::Vec<S> positional;  // H x D

  static NoisePredictor make(dg::ParamStore<S>& store, const CduaConfig& c, dg::Rng& rng) {
    NoisePredictor p;
    p.config = c;
    const Index d = c.model_dim();
    p.embed = dg::DenseLayer<S>::make(store, "eps.embed", 1, d, rng);
    p.time1 = dg::DenseLayer<S>::make(store, "eps.time1", c.time_embed_dim, d, rng);
    p.time2 = dg::DenseLayer<S>::make(store, "eps.time2", d, d, rng);
    if (c.cross_attention()) {
      p.cross = dg::MultiHeadAttention<S>::make(store, "eps.cross", d, c.heads, rng);
    } else {
      p.pooled = dg::DenseLayer<S>::make(store, "eps.pool", d, d, rng);
    }
    p.ff1 = dg::DenseLayer<S>::make(store, "eps.ff1", d, 2 * d, rng);
    p.ff2 = dg::DenseLayer<S>::make(store, "eps.ff2", 2 * d, d, rng);
    p.res = dg::ResidualBlock<S>::make(store, "eps.res", d, d, c.groups, rng);
    p.head = dg::Conv1dLayer<S>::make(store, "eps.head", d, 1, 1, 1, rng);
    p.positional = dg::sinusoidal_table<S>(c.horizon, d);
    return p;
  }

  /// y_t: B x H; steps: one timestep in [1, T] per batch row; ctx: B x Tc x D.
  Var operator()(dg::Tape<S>& tape, Var y_t, const std::vector<int>& steps, int max_step, Var ctx) const {
    const Index h = config.horizon, d = config.model_dim();
    const auto& ys = tape.shape(y_t);
    if (ys.size() != 2 || ys[1] != h) fail(ErrorKind::validation, "noise predictor: y_t must be B x H");
    const Index batch = ys[0];
    if (static_cast<Index>(steps.size()) != batch) fail(ErrorKind::validation, "noise predictor: one step per row");
    const auto& cs = tape.shape(ctx);
    if (cs.size() != 3 || cs[0] != batch || cs[2] != d) fail(ErrorKind::validation, "noise predictor: context shape");

    dg::Vec<S> temb(batch * config.time_embed_dim);
    for (Index b = 0; b < batch; ++b) {
      const int t = steps[static_cast<std::size_t>(b)];
      if (t < 1 || t > max_step) {
        fail(ErrorKind::validation, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(max_step) + "]");
      }
      temb.segment(b * config.time_embed_dim, config.time_embed_dim) =
          dg::sinusoidal_encoding<S>(static_cast<double>(t), config.time_embed_dim);
    }
    Var te = tape.constant({batch, 1, config.time_embed_dim}, std::move(temb));
    te = time2(tape, dg::gelu(tape, time1(tape, te)));
    const Var context = dg::add(tape, ctx, te);

    Var x = embed(tape, dg::reshape(tape, y_t, {batch, h, 1}));
    x = dg::add(tape, x, tape.constant({1, h, d}, positional));
    if (cross) {
      x = dg::add(tape, x, (*cross)(tape, x, context));
    } else {
      x = dg::add(tape, x, (*pooled)(tape, dg::mean1(tape, context)));
    }
    x = dg::add(tape, x, ff2(tape, dg::gelu(tape, ff1(tape, x))));
    Var c = res(tape, dg::transpose12(tape, x));  // B x D x H
    return dg::reshape(tape, head(tape, c), {batch, h});
  }
};

/// Encoder and noise predictor sharing one parameter store.
template <typename S>
struct CduaModel {
  CduaConfig config;
  dg::ParamStore<S> store;
  ContextUnet<S> encoder;
  NoisePredictor<S> predictor;

  CduaModel(const CduaConfig& c, std::uint64_t seed) : config(c) {
    c.validate();
    dg::Rng rng(seed);
    encoder = ContextUnet<S>::make(store, c, rng);
    predictor = NoisePredictor<S>::make(store, c, rng);
  }

  Var encode(dg::Tape<S>& tape, const dg::Vec<S>& x, Index batch) const { return encoder(tape, x, batch); }

  Var predict_noise(dg::Tape<S>& tape, Var y_t, const std::vector<int>& steps, int max_step, Var ctx) const {
    return predictor(tape, y_t, steps, max_step, ctx);
  }
};

}  // namespace cdua::model
