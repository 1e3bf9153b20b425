#pragma once

// Text-to-latent encoder: a convolutional VAE from a padded token canvas to an
// approximation of the recognizer's encoder grid.
//
//   tokens [B, L] -> lexicon embedding [B, L, E]
//   upsample (tconv K=8 S=4)            [B, T_enc, E]
//   enc1..enc3 (conv K=3 S=2)           [B, T/2, c1] [B, T/4, c2] [B, T/8, c3]
//   mu, logvar heads                    [B, T/8, latent]
//   dec1 (conv, z alone)                [B, T/8, c3]
//   dec2..dec4 (tconv K=4 S=2, + skip)  [B, T/4, c2] [B, T/2, c1] [B, T, h]
//
// Tokens are embedded through their pronunciations: each word is a fixed
// one-hot over (slot, phoneme) pairs followed by a learned projection, so
// words never seen with audio still get an informative embedding.

#include <optional>
#include <string>
#include <vector>

#include "whistle/asr/model.hpp"

namespace whistle {

struct TleConfig {
  int vocab = 163;
  int l_max = 16;
  int t_enc = 64;
  int h = 64;
  int embed = 64;
  std::vector<int> channels{64, 96, 128};
  int latent = 64;
  double beta = 1e-3;
  bool length_head = false;
  int n_phonemes = 24;
  int max_pron = 5;

  int lexicon_width() const { return kFirstWord + max_pron * n_phonemes; }
  int latent_len() const { return t_enc / 8; }
  bool operator==(const TleConfig&) const = default;
};

inline void check_tle_config(const TleConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("tle: " + what);
  };
  need(c.channels.size() == 3, "channels must list three encoder widths");
  for (int ch : c.channels) need(ch > 0, "channel widths must be positive");
  need(c.t_enc == 4 * c.l_max, "t_enc must equal 4 * l_max (stride-4 upsampler)");
  need(c.t_enc % 8 == 0, "t_enc must be divisible by 8");
  need(c.h > 0 && c.embed > 0 && c.latent > 0, "widths must be positive");
  need(c.beta >= 0, "beta must be non-negative");
  need(c.vocab > kFirstWord && c.n_phonemes > 0 && c.max_pron > 0, "bad lexicon sizes");
}

/// TLE settings that must agree with the recognizer it imitates.
inline TleConfig tle_config_for(const AsrConfig& a, const World& w, TleConfig base = {}) {
  base.vocab = a.vocab;
  base.l_max = a.l_max;
  base.t_enc = a.t_enc();
  base.h = a.h;
  base.n_phonemes = w.config.n_phonemes;
  return base;
}

inline void check_tle_matches(const TleConfig& t, const AsrConfig& a) {
  if (t.h != a.h || t.t_enc != a.t_enc() || t.vocab != a.vocab || t.l_max != a.l_max)
    throw ShapeError("tle/asr mismatch: tle grid (" + std::to_string(t.t_enc) + "," + std::to_string(t.h) +
                     ") vocab " + std::to_string(t.vocab) + ", asr grid (" + std::to_string(a.t_enc()) + "," +
                     std::to_string(a.h) + ") vocab " + std::to_string(a.vocab));
}

template <class T>
struct TleModel {
  TleConfig config;
  ParamStore<T> params;  // "lex.table" is a fixed buffer, everything else is phi

  template <class U>
  TleModel<U> cast() const {
    return {config, params.template cast<U>()};
  }
  bool operator==(const TleModel& o) const { return config == o.config && params == o.params; }
};

inline bool is_tle_trainable(const std::string& name) { return name != "lex.table"; }

template <class T = float>
TleModel<T> init_tle(const TleConfig& c, const World& w, std::uint64_t seed) {
  check_tle_config(c);
  if (c.vocab != w.vocab_size()) throw ConfigError("tle: vocab does not match the world lexicon");
  if (c.n_phonemes != w.config.n_phonemes) throw ConfigError("tle: n_phonemes does not match the world");
  TleModel<T> m{c, {}};
  auto& ps = m.params;

  Tensor<T> table({c.vocab, c.lexicon_width()});
  for (int s = 0; s < kFirstWord; ++s) table.at(s, s) = T(1);
  for (int tok = kFirstWord; tok < c.vocab; ++tok) {
    const auto& pron = w.pronunciations[static_cast<size_t>(tok - kFirstWord)];
    if (static_cast<int>(pron.size()) > c.max_pron) throw ConfigError("tle: pronunciation longer than max_pron");
    for (size_t slot = 0; slot < pron.size(); ++slot)
      table.at(tok, kFirstWord + static_cast<int>(slot) * c.n_phonemes + pron[slot]) = T(1);
  }
  ps.add("lex.table", std::move(table));

  Stream rng(seed, 0x746c65);
  const auto [c1, c2, c3] = std::tuple{c.channels[0], c.channels[1], c.channels[2]};
  ps.add("lex.w", init::scaled_normal<T>({c.lexicon_width(), c.embed}, 2, rng));
  layers::add_tconv(ps, "up", 8, 4, c.embed, c.embed, rng);
  layers::add_norm(ps, "up.ln", c.embed);
  layers::add_conv(ps, "enc1", 3, c.embed, c1, rng);
  layers::add_norm(ps, "enc1.ln", c1);
  layers::add_conv(ps, "enc2", 3, c1, c2, rng);
  layers::add_norm(ps, "enc2.ln", c2);
  layers::add_conv(ps, "enc3", 3, c2, c3, rng);
  layers::add_norm(ps, "enc3.ln", c3);
  layers::add_dense(ps, "mu", c3, c.latent, rng);
  layers::add_dense(ps, "logvar", c3, c.latent, rng, 0.1);
  layers::add_conv(ps, "dec1", 3, c.latent, c3, rng);
  layers::add_norm(ps, "dec1.ln", c3);
  layers::add_tconv(ps, "dec2", 4, 2, c3, c2, rng);
  layers::add_norm(ps, "dec2.ln", c2);
  layers::add_tconv(ps, "dec3", 4, 2, c2, c1, rng);
  layers::add_norm(ps, "dec3.ln", c1);
  layers::add_tconv(ps, "dec4", 4, 2, c1, c.h, rng);
  if (c.length_head) layers::add_dense(ps, "len", c.latent, 1, rng);
  return m;
}

/// Pads transcripts to l_max with PAD; [B, l_max] row-major.
inline std::vector<int> tle_canvas(const std::vector<const Transcript*>& batch, const TleConfig& c) {
  std::vector<int> ids;
  for (const auto* t : batch) {
    if (t->length() > c.l_max)
      throw Error("tle: transcript of length " + std::to_string(t->length()) + " exceeds l_max " +
                  std::to_string(c.l_max));
    for (int v : t->tokens)
      if (v < 0 || v >= c.vocab) throw Error("tle: token " + std::to_string(v) + " outside vocabulary");
    ids.insert(ids.end(), t->tokens.begin(), t->tokens.end());
    ids.insert(ids.end(), static_cast<size_t>(c.l_max - t->length()), kPad);
  }
  return ids;
}

/// z = mu + exp(logvar / 2) * eps.
template <class T>
Var<T> reparameterize(Var<T> mu, Var<T> logvar, const Tensor<T>& eps) {
  if (eps.shape() != mu.shape() || logvar.shape() != mu.shape())
    throw ShapeError("reparameterize: mu " + shape_str(mu.shape()) + ", logvar " + shape_str(logvar.shape()) +
                     ", eps " + shape_str(eps.shape()));
  return ops::add(mu, ops::mul(ops::exp(ops::scale(logvar, T(0.5))), mu.tape->constant(eps)));
}

template <class T>
Tensor<T> standard_normal(const Shape& shape, Stream& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

/// Tensor form: draws eps from the stream.
template <class T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& logvar, Stream& rng) {
  Tape<T> tape(false);
  return reparameterize(tape.constant(mu), tape.constant(logvar), standard_normal<T>(mu.shape(), rng)).value();
}

enum class LatentMode { sample, mean };

inline const char* to_string(LatentMode m) { return m == LatentMode::sample ? "sample" : "mean"; }
inline LatentMode parse_latent_mode(const std::string& s) {
  if (s == "sample") return LatentMode::sample;
  if (s == "mean") return LatentMode::mean;
  throw ConfigError("unknown latent mode '" + s + "' (expected sample or mean)");
}

template <class T>
struct TleVars {
  Var<T> approx;  // [B, T_enc, h]
  Var<T> mu, logvar;  // [B, T_enc/8, latent]
};

template <class T>
TleVars<T> tle_graph(Binder<T>& b, const TleConfig& c, const std::vector<int>& ids, std::int64_t batch,
                     LatentMode mode, Stream* noise) {
  auto& tape = b.tape();
  auto block = [&](const std::string& p, Var<T> x) { return ops::gelu(layers::norm(b, p + ".ln", x)); };
  const Var<T> table = tape.leaf(b.store().get("lex.table"), false);
  Var<T> x = ops::embedding(table, ids, Shape{batch, c.l_max});
  x = ops::matmul(ops::reshape(x, Shape{batch * c.l_max, c.lexicon_width()}), b("lex.w"));
  x = ops::reshape(x, Shape{batch, c.l_max, c.embed});
  x = block("up", layers::tconv(b, "up", x, 4, 2));
  const Var<T> e1 = block("enc1", layers::conv(b, "enc1", x, 2, 1));
  const Var<T> e2 = block("enc2", layers::conv(b, "enc2", e1, 2, 1));
  const Var<T> e3 = block("enc3", layers::conv(b, "enc3", e2, 2, 1));
  TleVars<T> out;
  out.mu = layers::dense(b, "mu", e3);
  out.logvar = layers::dense(b, "logvar", e3);
  Var<T> z = out.mu;
  if (mode == LatentMode::sample) {
    if (!noise) throw Error("tle: sampling needs a noise stream");
    z = reparameterize(out.mu, out.logvar, standard_normal<T>(out.mu.shape(), *noise));
  }
  Var<T> d = block("dec1", layers::conv(b, "dec1", z, 1, 1));
  d = block("dec2", layers::tconv(b, "dec2", ops::add(d, e3), 2, 1));
  d = block("dec3", layers::tconv(b, "dec3", ops::add(d, e2), 2, 1));
  out.approx = layers::tconv(b, "dec4", ops::add(d, e1), 2, 1);
  return out;
}

struct TleOutput {
  Tensor<float> approx;  // [T_enc, h]
  Tensor<float> mu, logvar;
  std::optional<int> predicted_len;
};

/// Approximate encoder grids for a batch; [B, T_enc, h]. No gradients recorded.
template <class T>
Tensor<T> tle_grids(const TleModel<T>& m, const std::vector<const Transcript*>& batch, LatentMode mode,
                    Stream* noise) {
  Tape<T> tape(false);
  Binder<T> b(tape, m.params);
  const auto ids = tle_canvas(batch, m.config);
  return tle_graph(b, m.config, ids, static_cast<std::int64_t>(batch.size()), mode, noise).approx.value();
}

inline int clamp_length(double v, int t_enc) {
  return static_cast<int>(std::clamp<double>(std::round(v), 1.0, static_cast<double>(t_enc)));
}

/// Length head over the time-pooled posterior mean, in units of T_enc.
template <class T>
Var<T> length_head(Binder<T>& b, const TleConfig& c, Var<T> mu) {
  if (!c.length_head) throw ConfigError("tle: length head is disabled in this model");
  return ops::scale(layers::dense(b, "len", ops::mean_time(mu)), static_cast<T>(c.t_enc));
}

inline TleOutput tle_forward(const TleModel<float>& m, const Transcript& t, LatentMode mode, Stream* noise) {
  Tape<float> tape(false);
  Binder<float> b(tape, m.params);
  const auto& c = m.config;
  auto v = tle_graph(b, c, tle_canvas({&t}, c), 1, mode, noise);
  TleOutput out{v.approx.value().reshaped({c.t_enc, c.h}), v.mu.value().reshaped({c.latent_len(), c.latent}),
                v.logvar.value().reshaped({c.latent_len(), c.latent}), std::nullopt};
  if (c.length_head) out.predicted_len = clamp_length(length_head(b, c, v.mu).value()[0], c.t_enc);
  return out;
}

/// Encoder-frame count the recognizer sees for a valid canvas prefix.
inline int encoder_length(int valid_len, int k) { return (valid_len + k - 1) / k; }

template <class T>
int predict_lengths(const TleModel<T>& m, const Transcript& t) {
  const auto& c = m.config;
  if (!c.length_head) throw ConfigError("tle: predict_lengths needs the length head");
  Tape<T> tape(false);
  Binder<T> b(tape, m.params);
  auto v = tle_graph(b, c, tle_canvas({&t}, c), 1, LatentMode::mean, nullptr);
  return clamp_length(static_cast<double>(length_head(b, c, v.mu).value()[0]), c.t_enc);
}

/// Frozen recognizer encodings used as VAE targets, [B, T_enc, h].
template <class T>
Tensor<T> encoder_targets(const AsrModel<T>& asr, const std::vector<const AudioFeatures*>& audio) {
  Tape<T> tape(false);
  Binder<T> b(tape, asr.params);
  return encode(b, asr.config, tape.constant(stack_features<T>(audio, asr.config))).value();
}

struct VaeTerms {
  double mse = 0, kl = 0, length = 0;
};

/// L_VAE = MSE(target, approx) + beta * KL, with KL averaged per latent
/// coordinate so beta weighs both terms on the same per-element scale.
/// With the length head, the squared length error (in units of T_enc) is added.
template <class T>
Var<T> vae_loss(Binder<T>& b, const TleConfig& c, const Tensor<T>& targets, const std::vector<const Transcript*>& text,
                LatentMode mode, Stream* noise, const std::vector<int>* enc_lengths = nullptr,
                VaeTerms* terms = nullptr) {
  const auto B = static_cast<std::int64_t>(text.size());
  if (targets.shape() != Shape{B, c.t_enc, c.h})
    throw ShapeError("vae_loss: targets " + shape_str(targets.shape()) + ", expected (" + std::to_string(B) + "," +
                     std::to_string(c.t_enc) + "," + std::to_string(c.h) + ")");
  auto& tape = b.tape();
  auto v = tle_graph(b, c, tle_canvas(text, c), B, mode, noise);
  Var<T> rec = ops::mse(v.approx, tape.constant(targets));
  Var<T> kl = ops::scale(ops::kl_diag_gaussian(v.mu, v.logvar), T(1) / static_cast<T>(c.latent_len() * c.latent));
  Var<T> loss = ops::add(rec, ops::scale(kl, static_cast<T>(c.beta)));
  if (terms) terms->mse = rec.value().item(), terms->kl = kl.value().item();
  if (c.length_head && enc_lengths) {
    if (static_cast<std::int64_t>(enc_lengths->size()) != B) throw ShapeError("vae_loss: one length per item");
    Tensor<T> want({B, 1});
    for (std::int64_t i = 0; i < B; ++i) want[static_cast<size_t>(i)] = static_cast<T>((*enc_lengths)[static_cast<size_t>(i)]) / static_cast<T>(c.t_enc);
    Var<T> pred = ops::scale(length_head(b, c, v.mu), T(1) / static_cast<T>(c.t_enc));
    Var<T> len = ops::mse(pred, tape.constant(want));
    if (terms) terms->length = len.value().item();
    loss = ops::add(loss, len);
  }
  return loss;
}

/// Convenience form computing targets from audio through the frozen encoder.
template <class T>
Var<T> vae_loss(Binder<T>& b, const TleConfig& c, const AsrModel<T>& asr, const std::vector<const Utterance*>& batch,
                LatentMode mode, Stream* noise) {
  check_tle_matches(c, asr.config);
  std::vector<const AudioFeatures*> audio;
  std::vector<const Transcript*> text;
  std::vector<int> lengths;
  for (const auto* u : batch) {
    if (!u->audio) throw Error("vae_loss: utterance '" + u->id + "' has no audio");
    audio.push_back(&*u->audio);
    text.push_back(&u->text);
    lengths.push_back(encoder_length(u->audio->valid_len, asr.config.k));
  }
  return vae_loss(b, c, encoder_targets(asr, audio), text, mode, noise, &lengths);
}

/// Mean reconstruction error of the posterior-mean grid on a held-out set.
template <class T>
double heldout_mse(const TleModel<T>& m, const std::vector<Tensor<T>>& targets,
                   const std::vector<const Transcript*>& text, size_t batch = 32) {
  double total = 0;
  size_t n = 0;
  for (size_t s = 0; s < text.size(); s += batch) {
    const size_t e = std::min(text.size(), s + batch);
    std::vector<const Transcript*> tb(text.begin() + static_cast<long>(s), text.begin() + static_cast<long>(e));
    const auto grid = tle_grids(m, tb, LatentMode::mean, nullptr);
    const size_t per = static_cast<size_t>(m.config.t_enc) * m.config.h;
    for (size_t i = 0; i < tb.size(); ++i)
      for (size_t j = 0; j < per; ++j) {
        const double d = static_cast<double>(grid[i * per + j]) - static_cast<double>(targets[s + i][j]);
        total += d * d;
      }
    n += tb.size() * per;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace whistle
