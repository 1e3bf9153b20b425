#pragma once

// Encoder-decoder recognizer. The encoder downsamples the feature canvas by k
// with two stride-2 convolutions and runs pre-norm self-attention blocks; the
// decoder is a causal transformer with cross-attention over the encoder grid.
//
// Parameter names are prefixed "enc." or "dec." so the text-only path can
// train the decoder alone.

#include <string>
#include <vector>

#include "whistle/numerics/layers.hpp"
#include "whistle/world/world.hpp"

namespace whistle {

struct AsrConfig {
  int feat_dim = 16;
  int n_max = 256;
  int k = 4;
  int h = 64;
  int heads = 4;
  int ffn = 128;
  int enc_blocks = 2;
  int dec_blocks = 2;
  int vocab = 163;
  int l_max = 16;

  int t_enc() const { return n_max / k; }
  bool operator==(const AsrConfig&) const = default;
};

inline void check_asr_config(const AsrConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("asr: " + what);
  };
  need(c.k == 4, "k must be 4 (two stride-2 convolutions)");
  need(c.n_max > 0 && c.n_max % c.k == 0, "n_max must be divisible by k");
  need(c.h > 0 && c.heads > 0 && c.h % c.heads == 0, "h must be divisible by heads");
  need(c.ffn > 0 && c.enc_blocks >= 0 && c.dec_blocks >= 1, "bad block sizes");
  need(c.vocab > kFirstWord, "vocab must include at least one word");
  need(c.l_max >= 3, "l_max must be at least 3");
  need(c.feat_dim > 0, "feat_dim must be positive");
}

template <class T>
struct AsrModel {
  AsrConfig config;
  ParamStore<T> params;

  template <class U>
  AsrModel<U> cast() const {
    return {config, params.template cast<U>()};
  }
  bool operator==(const AsrModel& o) const { return config == o.config && params == o.params; }
};

inline bool is_decoder_param(const std::string& name) { return name.rfind("dec.", 0) == 0; }
inline bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }

template <class T = float>
AsrModel<T> init_asr(const AsrConfig& c, std::uint64_t seed) {
  check_asr_config(c);
  AsrModel<T> m{c, {}};
  auto& ps = m.params;
  Stream rng(seed, 0x617372);
  layers::add_conv(ps, "enc.conv1", 3, c.feat_dim, c.h, rng);
  layers::add_conv(ps, "enc.conv2", 3, c.h, c.h, rng);
  for (int i = 0; i < c.enc_blocks; ++i) {
    const std::string p = "enc.block" + std::to_string(i);
    layers::add_norm(ps, p + ".ln1", c.h);
    layers::add_attention(ps, p + ".attn", c.h, rng);
    layers::add_norm(ps, p + ".ln2", c.h);
    layers::add_ffn(ps, p + ".ffn", c.h, c.ffn, rng);
  }
  layers::add_norm(ps, "enc.ln_out", c.h);

  ps.add("dec.embed", init::scaled_normal<T>({c.vocab, c.h}, 1, rng, 0.1));
  for (int i = 0; i < c.dec_blocks; ++i) {
    const std::string p = "dec.block" + std::to_string(i);
    layers::add_norm(ps, p + ".ln1", c.h);
    layers::add_attention(ps, p + ".self", c.h, rng);
    layers::add_norm(ps, p + ".ln2", c.h);
    layers::add_attention(ps, p + ".cross", c.h, rng);
    layers::add_norm(ps, p + ".ln3", c.h);
    layers::add_ffn(ps, p + ".ffn", c.h, c.ffn, rng);
  }
  layers::add_norm(ps, "dec.ln_out", c.h);
  layers::add_dense(ps, "dec.out", c.h, c.vocab, rng);
  return m;
}

/// Stacks feature canvases into [B, n_max, d].
template <class T>
Tensor<T> stack_features(const std::vector<const AudioFeatures*>& batch, const AsrConfig& c) {
  Tensor<T> out({static_cast<std::int64_t>(batch.size()), c.n_max, c.feat_dim});
  const size_t per = static_cast<size_t>(c.n_max) * c.feat_dim;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& f = batch[i]->frames;
    if (f.rank() != 2 || f.dim(0) != c.n_max || f.dim(1) != c.feat_dim)
      throw ShapeError("encode: canvas " + shape_str(f.shape()) + ", expected (" + std::to_string(c.n_max) + "," +
                       std::to_string(c.feat_dim) + ")");
    for (size_t j = 0; j < per; ++j) out[i * per + j] = static_cast<T>(f[j]);
  }
  return out;
}

/// f_theta: [B, n_max, d] -> [B, T_enc, h].
template <class T>
Var<T> encode(Binder<T>& b, const AsrConfig& c, Var<T> x) {
  auto& tape = b.tape();
  const auto B = x.value().dim(0);
  Var<T> y = ops::gelu(layers::conv(b, "enc.conv1", x, 2, 1));
  y = ops::gelu(layers::conv(b, "enc.conv2", y, 2, 1));
  y = ops::add(y, tape.leaf(layers::sinusoid<T>(B, c.t_enc(), c.h), false));
  for (int i = 0; i < c.enc_blocks; ++i) {
    const std::string p = "enc.block" + std::to_string(i);
    Var<T> n = layers::norm(b, p + ".ln1", y);
    y = ops::add(y, layers::attend(b, p + ".attn", n, n, c.heads, false));
    y = ops::add(y, layers::ffn(b, p + ".ffn", layers::norm(b, p + ".ln2", y)));
  }
  return layers::norm(b, "enc.ln_out", y);
}

/// Cross-attention keys and values per decoder block, computed once per grid.
template <class T>
struct CrossKV {
  std::vector<Var<T>> k, v;
};

template <class T>
CrossKV<T> cross_kv(Binder<T>& b, const AsrConfig& c, Var<T> enc) {
  const auto& s = enc.value().shape();
  if (s.size() != 3 || s[1] != c.t_enc() || s[2] != c.h)
    throw ShapeError("decoder: encoder grid " + shape_str(s) + ", expected (B," + std::to_string(c.t_enc()) + "," +
                     std::to_string(c.h) + ")");
  CrossKV<T> kv;
  for (int i = 0; i < c.dec_blocks; ++i) {
    const std::string p = "dec.block" + std::to_string(i) + ".cross";
    kv.k.push_back(layers::dense(b, p + ".k", enc));
    kv.v.push_back(layers::dense(b, p + ".v", enc));
  }
  return kv;
}

/// Final decoder states: ids [B, L] (row-major) -> [B, L, h].
template <class T>
Var<T> decoder_states(Binder<T>& b, const AsrConfig& c, const CrossKV<T>& kv, const std::vector<int>& ids,
                      std::int64_t batch) {
  auto& tape = b.tape();
  const auto L = static_cast<std::int64_t>(ids.size()) / batch;
  for (int t : ids)
    if (t < 0 || t >= c.vocab) throw Error("decoder: token " + std::to_string(t) + " outside vocabulary");
  Var<T> y = ops::embedding(b("dec.embed"), ids, Shape{batch, L});
  y = ops::add(y, tape.leaf(layers::sinusoid<T>(batch, L, c.h), false));
  for (int i = 0; i < c.dec_blocks; ++i) {
    const std::string p = "dec.block" + std::to_string(i);
    Var<T> n = layers::norm(b, p + ".ln1", y);
    y = ops::add(y, layers::attend(b, p + ".self", n, n, c.heads, true));
    y = ops::add(y, layers::attend_cached(b, p + ".cross", layers::norm(b, p + ".ln2", y), kv.k[i], kv.v[i], c.heads));
    y = ops::add(y, layers::ffn(b, p + ".ffn", layers::norm(b, p + ".ln3", y)));
  }
  return layers::norm(b, "dec.ln_out", y);
}

/// g_theta logits: ids [B, L] (row-major) -> [B, L, vocab].
template <class T>
Var<T> decoder_logits(Binder<T>& b, const AsrConfig& c, const CrossKV<T>& kv, const std::vector<int>& ids,
                      std::int64_t batch) {
  return layers::dense(b, "dec.out", decoder_states(b, c, kv, ids, batch));
}

/// Teacher-forcing inputs and targets for a batch of transcripts, padded to l_max.
struct TeacherForcing {
  std::vector<int> inputs;   // [B, l_max - 1]
  std::vector<int> targets;  // [B, l_max - 1], PAD where ignored
  std::int64_t batch = 0;
  std::int64_t steps = 0;
};

inline TeacherForcing teacher_forcing(const std::vector<const Transcript*>& batch, const AsrConfig& c) {
  TeacherForcing tf;
  tf.batch = static_cast<std::int64_t>(batch.size());
  tf.steps = c.l_max - 1;
  for (const auto* t : batch) {
    const auto& tok = t->tokens;
    if (tok.size() < 2 || tok.front() != kBos || tok.back() != kEos)
      throw Error("transcript must begin with BOS and end with EOS");
    if (static_cast<int>(tok.size()) > c.l_max)
      throw Error("transcript of length " + std::to_string(tok.size()) + " exceeds l_max " + std::to_string(c.l_max));
    for (int v : tok)
      if (v < 0 || v >= c.vocab) throw Error("transcript token " + std::to_string(v) + " outside vocabulary");
    for (std::int64_t i = 0; i < tf.steps; ++i) {
      const size_t s = static_cast<size_t>(i);
      tf.inputs.push_back(s < tok.size() ? tok[s] : kPad);
      tf.targets.push_back(s + 1 < tok.size() ? tok[s + 1] : kPad);
    }
  }
  return tf;
}

/// Mean token NLL of the transcripts given an encoder grid [B, T_enc, h].
template <class T>
Var<T> nll_loss(Binder<T>& b, const AsrConfig& c, Var<T> enc, const std::vector<const Transcript*>& batch) {
  const auto tf = teacher_forcing(batch, c);
  if (enc.value().dim(0) != tf.batch)
    throw ShapeError("nll_loss: grid batch " + std::to_string(enc.value().dim(0)) + " vs " +
                     std::to_string(tf.batch) + " transcripts");
  const auto kv = cross_kv(b, c, enc);
  Var<T> logits = decoder_logits(b, c, kv, tf.inputs, tf.batch);
  return ops::cross_entropy(ops::reshape(logits, Shape{tf.batch * tf.steps, c.vocab}), tf.targets, kPad);
}

/// End-to-end loss on audio: L_NLL(theta) for a batch of utterances.
template <class T>
Var<T> audio_nll(Binder<T>& b, const AsrConfig& c, const std::vector<const AudioFeatures*>& audio,
                 const std::vector<const Transcript*>& text) {
  Var<T> x = b.tape().constant(stack_features<T>(audio, c));
  return nll_loss(b, c, encode(b, c, x), text);
}

/// Encoder grid for one utterance, [T_enc, h].
template <class T>
Tensor<T> encode(const AsrModel<T>& m, const AudioFeatures& f) {
  Tape<T> tape(false);
  Binder<T> b(tape, m.params);
  Var<T> x = tape.constant(stack_features<T>({&f}, m.config));
  return encode(b, m.config, x).value().reshaped({m.config.t_enc(), m.config.h});
}

/// Per-step output distributions for a teacher-forced transcript, [L, vocab].
template <class T>
Tensor<T> decoder_probs(const AsrModel<T>& m, const Tensor<T>& grid, const Transcript& t) {
  Tape<T> tape(false);
  Binder<T> b(tape, m.params);
  auto kv = cross_kv(b, m.config, tape.constant(grid.reshaped({1, m.config.t_enc(), m.config.h})));
  std::vector<int> ids(t.tokens.begin(), t.tokens.end() - 1);
  const auto L = static_cast<std::int64_t>(ids.size());
  return ops::softmax(ops::reshape(decoder_logits(b, m.config, kv, ids, 1), Shape{L, m.config.vocab})).value();
}

}  // namespace whistle
