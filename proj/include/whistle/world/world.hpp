#pragma once

// Synthetic speech universe. Words are phoneme strings, phonemes are short
// feature-frame prototypes, and an articulator turns word sequences into
// fixed-canvas feature matrices under a per-utterance speaker transform.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "whistle/error.hpp"
#include "whistle/numerics/rng.hpp"
#include "whistle/numerics/tensor.hpp"

namespace whistle {

enum class Domain { source, target };
enum class Split { train, dev, test };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }
inline const char* to_string(Split s) { return s == Split::train ? "train" : s == Split::dev ? "dev" : "test"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw ConfigError("unknown domain '" + s + "'");
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct WorldConfig {
  int n_phonemes = 24;
  int feat_dim = 16;
  int proto_min_frames = 3;
  int proto_max_frames = 6;
  int source_words = 120;
  int target_words = 80;
  double overlap = 0.5;
  int n_max = 256;
  int l_max = 16;
  int min_words = 3;
  int max_words = 10;
  int successors = 6;        // preferred followers per word in a domain bigram
  double bigram_mass = 0.7;  // probability of following a preferred successor
  double noise_sigma = 0.05;
  double jitter_p = 0.1;
  double speaker_gain_sd = 0.1;
  double speaker_bias_sd = 0.1;
  double speaker_filter_sd = 0.05;
  double target_gain_shift = 0.05;
  double target_bias_shift = 0.05;
  double tts_tilt = 0.15;
  int tts_pool = 4;

  bool operator==(const WorldConfig&) const = default;
};

// Token ids: 0 PAD, 1 BOS, 2 EOS, words from 3.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstWord = 3;

struct SpeakerParams {
  std::vector<float> gain;
  std::vector<float> bias;
  std::array<float, 3> filter{0.0f, 1.0f, 0.0f};

  static SpeakerParams identity(int d) { return {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f), {0, 1, 0}}; }
  bool operator==(const SpeakerParams&) const = default;
};

struct Bigram {
  std::vector<int> words;                 // token ids in this domain's lexicon
  std::vector<double> start;              // P(first word), indexed like `words`
  std::vector<std::vector<int>> next;     // preferred successor slots
  std::vector<std::vector<double>> next_p;
  bool operator==(const Bigram&) const = default;
};

struct World {
  std::uint64_t seed = 0;
  WorldConfig config;
  std::vector<Tensor<float>> phonemes;  // [frames, d]
  std::vector<std::string> phoneme_names;
  std::vector<std::string> words;                 // indexed by token id - kFirstWord
  std::vector<std::vector<int>> pronunciations;   // phoneme ids per word
  std::vector<int> source_lexicon;                // token ids
  std::vector<int> target_lexicon;
  std::vector<int> target_only;
  Bigram source_text, target_text;
  std::vector<SpeakerParams> tts_speakers;
  std::vector<float> tilt;

  int vocab_size() const { return kFirstWord + static_cast<int>(words.size()); }
  int feat_dim() const { return config.feat_dim; }
  int n_max() const { return config.n_max; }
  const Bigram& text(Domain d) const { return d == Domain::source ? source_text : target_text; }
  std::string token_str(int id) const {
    if (id == kPad) return "<pad>";
    if (id == kBos) return "<s>";
    if (id == kEos) return "</s>";
    return words.at(static_cast<size_t>(id - kFirstWord));
  }
  bool operator==(const World&) const = default;
};

struct AudioFeatures {
  Tensor<float> frames;  // [n_max, d], zero after valid_len
  int valid_len = 0;
};

struct Transcript {
  std::vector<int> tokens;  // BOS w1 ... wn EOS
  int length() const { return static_cast<int>(tokens.size()); }
  std::vector<int> words() const {
    std::vector<int> w;
    for (int t : tokens)
      if (t >= kFirstWord) w.push_back(t);
    return w;
  }
  static Transcript from_words(const std::vector<int>& w) {
    Transcript t;
    t.tokens.push_back(kBos);
    t.tokens.insert(t.tokens.end(), w.begin(), w.end());
    t.tokens.push_back(kEos);
    return t;
  }
  bool operator==(const Transcript&) const = default;
};

struct Utterance {
  std::string id;
  Transcript text;
  std::optional<AudioFeatures> audio;
};

struct Corpus {
  Domain domain = Domain::source;
  Split split = Split::train;
  std::vector<Utterance> items;

  bool has_audio() const {
    return !items.empty() && std::all_of(items.begin(), items.end(), [](const Utterance& u) { return u.audio.has_value(); });
  }
  size_t size() const { return items.size(); }
};

namespace detail {

inline void check_world_config(const WorldConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("world: " + what);
  };
  need(c.overlap >= 0.0 && c.overlap <= 1.0, "overlap must lie in [0,1]");
  need(c.n_phonemes >= 2 && c.n_phonemes <= 60, "n_phonemes must lie in [2,60]");
  need(c.feat_dim >= 1, "feat_dim must be positive");
  need(c.proto_min_frames >= 1 && c.proto_max_frames >= c.proto_min_frames, "bad prototype frame range");
  need(c.source_words >= 1 && c.target_words >= 1, "lexicons must be non-empty");
  need(c.min_words >= 1 && c.max_words >= c.min_words, "bad utterance word range");
  need(c.max_words + 2 <= c.l_max, "max_words + 2 must not exceed l_max");
  need(c.n_max >= 5 * c.proto_max_frames, "n_max cannot hold a single word");
  need(c.jitter_p >= 0 && 2 * c.jitter_p <= 1, "jitter_p must lie in [0,0.5]");
  need(c.successors >= 1 && c.bigram_mass >= 0 && c.bigram_mass <= 1, "bad bigram parameters");
  need(c.tts_pool >= 1, "tts_pool must be positive");
  need(c.noise_sigma >= 0, "noise_sigma must be non-negative");
  need(static_cast<int>(std::lround(c.overlap * c.target_words)) <= c.source_words, "overlap exceeds source lexicon");
}

// Consonant-vowel syllable names; each is two letters, so spellings split uniquely.
inline std::vector<std::string> phoneme_names(int n) {
  static const char* cons = "bdgkmnprstvz";
  static const char* vows = "aeiou";
  std::vector<std::string> out;
  for (int i = 0; static_cast<int>(out.size()) < n; ++i) out.push_back({cons[i % 12], vows[(i / 12 + i) % 5]});
  return out;
}

inline Bigram make_bigram(const std::vector<int>& words, const WorldConfig& c, Stream rng) {
  Bigram b;
  b.words = words;
  const int n = static_cast<int>(words.size());
  // Zipf-like start distribution over a random permutation.
  std::vector<int> rank(n);
  for (int i = 0; i < n; ++i) rank[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(rank[i], rank[rng.uniform_int(0, i)]);
  double z = 0;
  b.start.resize(n);
  for (int i = 0; i < n; ++i) z += b.start[i] = 1.0 / (1.0 + 0.1 * rank[i]);
  for (auto& p : b.start) p /= z;
  b.next.resize(n);
  b.next_p.resize(n);
  for (int i = 0; i < n; ++i) {
    std::set<int> picked;
    const int k = std::min(c.successors, n);
    while (static_cast<int>(picked.size()) < k) picked.insert(static_cast<int>(rng.uniform_int(0, n - 1)));
    double s = 0;
    for (int j : picked) {
      b.next[i].push_back(j);
      b.next_p[i].push_back(rng.uniform(0.5, 1.5));
      s += b.next_p[i].back();
    }
    for (auto& p : b.next_p[i]) p /= s;
  }
  return b;
}

inline size_t draw(const std::vector<double>& p, Stream& rng) {
  double u = rng.uniform(), acc = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

inline SpeakerParams draw_speaker(const WorldConfig& c, Domain domain, Stream& rng) {
  const double gs = domain == Domain::target ? c.target_gain_shift : 0.0;
  const double bs = domain == Domain::target ? c.target_bias_shift : 0.0;
  SpeakerParams s;
  for (int j = 0; j < c.feat_dim; ++j) {
    s.gain.push_back(static_cast<float>(1.0 + gs + c.speaker_gain_sd * rng.normal()));
    s.bias.push_back(static_cast<float>(bs + c.speaker_bias_sd * rng.normal()));
  }
  const float side_l = static_cast<float>(c.speaker_filter_sd * rng.normal());
  const float side_r = static_cast<float>(c.speaker_filter_sd * rng.normal());
  s.filter = {side_l, 1.0f - side_l - side_r, side_r};
  return s;
}

}  // namespace detail

inline World build_world(std::uint64_t seed, const WorldConfig& config = {}) {
  detail::check_world_config(config);
  World w;
  w.seed = seed;
  w.config = config;
  const Stream root(seed, 0x776f726c64);
  const int d = config.feat_dim;

  Stream ph = root.fork(1);
  w.phoneme_names = detail::phoneme_names(config.n_phonemes);
  for (int p = 0; p < config.n_phonemes; ++p) {
    const auto frames = ph.uniform_int(config.proto_min_frames, config.proto_max_frames);
    // A phoneme is a base vector with a smooth drift across its frames.
    std::vector<double> base(d), drift(d);
    for (int j = 0; j < d; ++j) {
      base[j] = ph.normal();
      drift[j] = 0.4 * ph.normal();
    }
    Tensor<float> proto({frames, d});
    for (std::int64_t t = 0; t < frames; ++t) {
      const double pos = frames == 1 ? 0.0 : double(t) / double(frames - 1) - 0.5;
      for (int j = 0; j < d; ++j) proto.at(t, j) = static_cast<float>(base[j] + pos * drift[j] + 0.1 * ph.normal());
    }
    w.phonemes.push_back(std::move(proto));
  }

  const int n_shared = static_cast<int>(std::lround(config.overlap * config.target_words));
  const int n_novel = config.target_words - n_shared;
  const int n_words = config.source_words + n_novel;
  Stream lex = root.fork(2);
  std::set<std::vector<int>> seen;
  while (static_cast<int>(w.words.size()) < n_words) {
    const auto len = lex.uniform_int(2, 5);
    std::vector<int> pron;
    for (std::int64_t i = 0; i < len; ++i) pron.push_back(static_cast<int>(lex.uniform_int(0, config.n_phonemes - 1)));
    if (!seen.insert(pron).second) continue;
    std::string spelling;
    for (int p : pron) spelling += w.phoneme_names[p];
    w.words.push_back(spelling);
    w.pronunciations.push_back(std::move(pron));
  }
  for (int i = 0; i < config.source_words; ++i) w.source_lexicon.push_back(kFirstWord + i);
  // Shared words are a random subset of the source lexicon.
  std::vector<int> pool = w.source_lexicon;
  for (int i = static_cast<int>(pool.size()) - 1; i > 0; --i) std::swap(pool[i], pool[lex.uniform_int(0, i)]);
  w.target_lexicon.assign(pool.begin(), pool.begin() + n_shared);
  for (int i = 0; i < n_novel; ++i) {
    w.target_only.push_back(kFirstWord + config.source_words + i);
    w.target_lexicon.push_back(w.target_only.back());
  }
  std::sort(w.target_lexicon.begin(), w.target_lexicon.end());

  w.source_text = detail::make_bigram(w.source_lexicon, config, root.fork(3));
  w.target_text = detail::make_bigram(w.target_lexicon, config, root.fork(4));

  Stream tts = root.fork(5);
  for (int i = 0; i < config.tts_pool; ++i) w.tts_speakers.push_back(detail::draw_speaker(config, Domain::source, tts));
  const double sign = tts.bernoulli(0.5) ? 1.0 : -1.0;
  for (int j = 0; j < d; ++j) {
    const double ramp = d == 1 ? 0.0 : 2.0 * j / double(d - 1) - 1.0;
    w.tilt.push_back(static_cast<float>(config.tts_tilt * sign * ramp));
  }
  return w;
}

inline SpeakerParams draw_speaker(const World& w, Domain domain, Stream& rng) {
  return detail::draw_speaker(w.config, domain, rng);
}

/// Frames an utterance occupies before jitter.
inline int clean_frames(const World& w, const std::vector<int>& word_seq) {
  int n = 0;
  for (int tok : word_seq)
    for (int p : w.pronunciations.at(static_cast<size_t>(tok - kFirstWord))) n += static_cast<int>(w.phonemes[p].dim(0));
  return n;
}

inline AudioFeatures articulate(const World& w, const std::vector<int>& word_seq, const SpeakerParams& speaker,
                                Stream* jitter, double noise_sigma, Stream* noise = nullptr,
                                const std::string& utt_id = "utterance", const std::vector<float>* tilt = nullptr) {
  const int d = w.config.feat_dim;
  std::vector<const float*> rows;
  for (int tok : word_seq) {
    if (tok < kFirstWord || tok >= w.vocab_size()) throw Error(utt_id + ": token " + std::to_string(tok) + " is not a word");
    for (int p : w.pronunciations[static_cast<size_t>(tok - kFirstWord)]) {
      const auto& proto = w.phonemes[p];
      for (std::int64_t t = 0; t < proto.dim(0); ++t) {
        const float* row = proto.data() + t * d;
        if (jitter && w.config.jitter_p > 0) {
          const double u = jitter->uniform();
          if (u < w.config.jitter_p) continue;
          if (u < 2 * w.config.jitter_p) rows.push_back(row);
        }
        rows.push_back(row);
      }
    }
  }
  const int n = static_cast<int>(rows.size());
  if (n > w.config.n_max)
    throw Error(utt_id + ": " + std::to_string(n) + " frames exceed canvas of " + std::to_string(w.config.n_max));

  AudioFeatures out{Tensor<float>({w.config.n_max, d}), n};
  const auto& f = speaker.filter;
  for (int t = 0; t < n; ++t) {
    for (int j = 0; j < d; ++j) {
      const float prev = t > 0 ? rows[t - 1][j] : 0.0f;
      const float next = t + 1 < n ? rows[t + 1][j] : 0.0f;
      float v = f[0] * prev + f[1] * rows[t][j] + f[2] * next;
      v = speaker.gain[j] * v + speaker.bias[j];
      if (tilt) v += (*tilt)[j];
      if (noise_sigma > 0 && noise) v += static_cast<float>(noise_sigma * noise->normal());
      out.frames.at(t, j) = v;
    }
  }
  return out;
}

/// Draws one utterance's word sequence from a domain's bigram sampler.
inline std::vector<int> sample_words(const World& w, Domain domain, Stream& rng) {
  const auto& b = w.text(domain);
  const auto len = rng.uniform_int(w.config.min_words, w.config.max_words);
  std::vector<int> out;
  size_t cur = detail::draw(b.start, rng);
  out.push_back(b.words[cur]);
  while (static_cast<std::int64_t>(out.size()) < len) {
    if (rng.bernoulli(w.config.bigram_mass))
      cur = static_cast<size_t>(b.next[cur][detail::draw(b.next_p[cur], rng)]);
    else
      cur = detail::draw(b.start, rng);
    out.push_back(b.words[cur]);
  }
  return out;
}

inline Corpus sample_corpus(const World& w, Domain domain, Split split, int count, bool with_audio) {
  if (count <= 0) throw Error("sample_corpus: count must be positive");
  Corpus c{domain, split, {}};
  const Stream root = Stream(w.seed, 0x636f727075).fork(static_cast<std::uint64_t>(domain) * 16 + static_cast<std::uint64_t>(split));
  for (int i = 0; i < count; ++i) {
    Stream u = root.fork(static_cast<std::uint64_t>(i));
    Utterance utt;
    utt.id = std::string(to_string(domain)) + "-" + to_string(split) + "-" + std::to_string(i);
    // Resample texts whose clean length leaves under 20% canvas headroom, so
    // text-only and audio corpora share one length distribution.
    for (int attempt = 0;; ++attempt) {
      if (attempt == 256) throw Error(utt.id + ": no utterance fits the canvas");
      Stream text = u.fork(static_cast<std::uint64_t>(attempt) * 4);
      auto words = sample_words(w, domain, text);
      if (5 * clean_frames(w, words) > 4 * w.config.n_max) continue;
      utt.text = Transcript::from_words(words);
      if (with_audio) {
        Stream spk = u.fork(static_cast<std::uint64_t>(attempt) * 4 + 1);
        Stream jit = u.fork(static_cast<std::uint64_t>(attempt) * 4 + 2);
        Stream noise = u.fork(static_cast<std::uint64_t>(attempt) * 4 + 3);
        const auto speaker = draw_speaker(w, domain, spk);
        AudioFeatures a;
        bool fits = false;
        for (int j = 0; j < 16 && !fits; ++j) {
          try {
            a = articulate(w, words, speaker, &jit, w.config.noise_sigma, &noise, utt.id);
            fits = true;
          } catch (const Error&) {
          }
        }
        if (!fits) continue;
        utt.audio = std::move(a);
      }
      break;
    }
    c.items.push_back(std::move(utt));
  }
  return c;
}

/// Degraded synthetic speech: a small fixed speaker pool, clean durations and
/// a per-world spectral tilt.
inline AudioFeatures tts_sim(const World& w, const Transcript& text, const std::vector<SpeakerParams>& pool,
                             Stream& rng) {
  if (pool.empty()) throw Error("tts_sim: empty speaker pool");
  for (int t : text.tokens)
    if (t < 0 || t >= w.vocab_size()) throw Error("tts_sim: token " + std::to_string(t) + " outside vocabulary");
  const auto& spk = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
  Stream noise = rng.fork(rng.next_u64());
  return articulate(w, text.words(), spk, nullptr, w.config.noise_sigma, &noise, "tts", &w.tilt);
}

inline AudioFeatures tts_sim(const World& w, const Transcript& text, Stream& rng) {
  return tts_sim(w, text, w.tts_speakers, rng);
}

}  // namespace whistle
