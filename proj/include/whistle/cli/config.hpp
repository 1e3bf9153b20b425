#pragma once

// Run configuration: one JSON document with sections world, asr, tle, adapt,
// fusion and eval. Each section is described once by a field visitor, which
// drives serialisation, parsing and unknown-key rejection alike.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "whistle/adapt/adapt.hpp"
#include "whistle/lmfusion/fusion.hpp"

namespace whistle {

struct CorpusSizes {
  int source_train = 4000;
  int source_dev = 200;
  int source_test = 200;
  int target_text = 2000;
  int target_dev = 200;
  int target_test = 200;
  bool operator==(const CorpusSizes&) const = default;
};

struct EvalConfig {
  int beam = 4;
  std::vector<std::string> methods{"none", "tle", "tts", "sf", "tts+sf", "tle+tts", "tle+tts+sf"};
  std::vector<std::string> corpora{"target", "source"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool operator==(const EvalConfig&) const = default;
};

struct Config {
  std::uint64_t world_seed = 0;
  WorldConfig world;
  CorpusSizes corpora;
  AsrConfig asr;
  TleConfig tle;
  LatentMode latent = LatentMode::sample;
  AdaptPlan adapt;
  FusionConfig fusion;
  EvalConfig eval;
};

namespace detail {

template <class F>
void visit_world(Config& c, F&& f) {
  auto& w = c.world;
  f("seed", c.world_seed);
  f("n_phonemes", w.n_phonemes);
  f("feat_dim", w.feat_dim);
  f("proto_min_frames", w.proto_min_frames);
  f("proto_max_frames", w.proto_max_frames);
  f("source_words", w.source_words);
  f("target_words", w.target_words);
  f("overlap", w.overlap);
  f("n_max", w.n_max);
  f("l_max", w.l_max);
  f("min_words", w.min_words);
  f("max_words", w.max_words);
  f("successors", w.successors);
  f("bigram_mass", w.bigram_mass);
  f("noise_sigma", w.noise_sigma);
  f("jitter_p", w.jitter_p);
  f("speaker_gain_sd", w.speaker_gain_sd);
  f("speaker_bias_sd", w.speaker_bias_sd);
  f("speaker_filter_sd", w.speaker_filter_sd);
  f("target_gain_shift", w.target_gain_shift);
  f("target_bias_shift", w.target_bias_shift);
  f("tts_tilt", w.tts_tilt);
  f("tts_pool", w.tts_pool);
  f("source_train", c.corpora.source_train);
  f("source_dev", c.corpora.source_dev);
  f("source_test", c.corpora.source_test);
  f("target_text", c.corpora.target_text);
  f("target_dev", c.corpora.target_dev);
  f("target_test", c.corpora.target_test);
}

template <class F>
void visit_asr(Config& c, F&& f) {
  f("k", c.asr.k);
  f("h", c.asr.h);
  f("heads", c.asr.heads);
  f("ffn", c.asr.ffn);
  f("enc_blocks", c.asr.enc_blocks);
  f("dec_blocks", c.asr.dec_blocks);
}

template <class F>
void visit_tle(Config& c, F&& f) {
  f("embed", c.tle.embed);
  f("channels", c.tle.channels);
  f("latent", c.tle.latent);
  f("beta", c.tle.beta);
  f("length_head", c.tle.length_head);
  f("max_pron", c.tle.max_pron);
  f("latent_mode", c.latent);
}

template <class F>
void visit_adapt(Config& c, F&& f) {
  auto& p = c.adapt;
  f("method", p.method);
  f("base_steps", p.base_steps);
  f("tle_steps", p.tle_steps);
  f("text_steps", p.text_steps);
  f("batch", p.batch);
  f("replay_ratio", p.replay_ratio);
  f("base_lr", p.base_opt.lr);
  f("tle_lr", p.tle_opt.lr);
  f("adapt_lr", p.adapt_opt.lr);
  f("warmup_steps", p.base_opt.warmup_steps);
  f("lr_decay", p.lr_decay);
  f("beta1", p.base_opt.beta1);
  f("beta2", p.base_opt.beta2);
  f("eps", p.base_opt.eps);
  f("tle_eval_every", p.tle_eval_every);
  f("seed", p.seed);
}

template <class F>
void visit_fusion(Config& c, F&& f) {
  f("gamma", c.fusion.gamma);
  f("beam", c.fusion.beam);
  f("grid", c.fusion.grid);
}

template <class F>
void visit_eval(Config& c, F&& f) {
  f("beam", c.eval.beam);
  f("methods", c.eval.methods);
  f("corpora", c.eval.corpora);
  f("seeds", c.eval.seeds);
}

template <class V>
nlohmann::ordered_json to_json_value(const V& v) {
  if constexpr (std::is_same_v<V, Method>) return to_string(v);
  else if constexpr (std::is_same_v<V, LatentMode>) return to_string(v);
  else return v;
}

template <class V>
void from_json_value(const nlohmann::json& j, V& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, Method>) v = parse_method(j.get<std::string>());
    else if constexpr (std::is_same_v<V, LatentMode>) v = parse_latent_mode(j.get<std::string>());
    else if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw ConfigError("expected a boolean");
      v = j.get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!j.is_number_integer()) throw ConfigError("expected an integer");
      if constexpr (std::is_unsigned_v<V>) {
        if (j.get<std::int64_t>() < 0) throw ConfigError("expected a non-negative integer");
      }
      v = j.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) throw ConfigError("expected a number");
      v = j.get<V>();
    } else {
      if constexpr (std::is_same_v<V, std::vector<std::uint64_t>>) {
        if (!j.is_array()) throw ConfigError("expected an array");
        for (const auto& x : j)
          if (!x.is_number_unsigned()) throw ConfigError("expected non-negative integers");
      }
      v = j.get<V>();
    }
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': wrong type (" + e.what() + ")");
  }
}

// Applies a visitor to every section: fn(section name, section visitor).
template <class Fn>
void for_sections(Config& c, Fn&& fn) {
  fn("world", [&](auto&& f) { visit_world(c, f); });
  fn("asr", [&](auto&& f) { visit_asr(c, f); });
  fn("tle", [&](auto&& f) { visit_tle(c, f); });
  fn("adapt", [&](auto&& f) { visit_adapt(c, f); });
  fn("fusion", [&](auto&& f) { visit_fusion(c, f); });
  fn("eval", [&](auto&& f) { visit_eval(c, f); });
}

}  // namespace detail

/// Fills the fields derived from other sections and checks every section.
inline void finalize_config(Config& c) {
  detail::check_world_config(c.world);
  c.asr.feat_dim = c.world.feat_dim;
  c.asr.n_max = c.world.n_max;
  c.asr.l_max = c.world.l_max;
  const int n_shared = static_cast<int>(std::lround(c.world.overlap * c.world.target_words));
  c.asr.vocab = kFirstWord + c.world.source_words + c.world.target_words - n_shared;
  check_asr_config(c.asr);
  c.tle.vocab = c.asr.vocab;
  c.tle.l_max = c.asr.l_max;
  c.tle.t_enc = c.asr.t_enc();
  c.tle.h = c.asr.h;
  c.tle.n_phonemes = c.world.n_phonemes;
  check_tle_config(c.tle);
  c.adapt.latent = c.latent;
  // one set of Adam moments hyperparameters shared by every procedure
  for (auto* o : {&c.adapt.tle_opt, &c.adapt.adapt_opt}) {
    o->warmup_steps = c.adapt.base_opt.warmup_steps;
    o->beta1 = c.adapt.base_opt.beta1;
    o->beta2 = c.adapt.base_opt.beta2;
    o->eps = c.adapt.base_opt.eps;
  }
  check_plan(c.adapt);
  check_fusion_config(c.fusion);
  const auto& s = c.corpora;
  for (int n : {s.source_train, s.source_dev, s.source_test, s.target_text, s.target_dev, s.target_test})
    if (n < 1) throw ConfigError("world: corpus sizes must be positive");
  if (c.eval.beam < 1) throw ConfigError("eval: beam must be at least 1");
  if (c.eval.methods.empty() || c.eval.seeds.empty() || c.eval.corpora.empty())
    throw ConfigError("eval: methods, corpora and seeds must be non-empty");
  auto unique = [](const auto& v) { return std::set(v.begin(), v.end()).size() == v.size(); };
  if (!unique(c.eval.methods) || !unique(c.eval.corpora) || !unique(c.eval.seeds))
    throw ConfigError("eval: methods, corpora and seeds must not repeat");
  static const std::set<std::string> known{"none", "tle", "tts", "sf", "tts+sf", "tle+tts", "tle+tts+sf"};
  for (const auto& m : c.eval.methods)
    if (!known.count(m)) throw ConfigError("eval: unknown method '" + m + "'");
  for (const auto& k : c.eval.corpora)
    if (k != "target" && k != "source") throw ConfigError("eval: unknown corpus '" + k + "' (expected target or source)");
}

inline nlohmann::ordered_json config_to_json(Config c) {
  nlohmann::ordered_json j;
  detail::for_sections(c, [&](const char* name, auto visit) {
    auto& sec = j[name] = nlohmann::ordered_json::object();
    visit([&](const char* key, const auto& v) { sec[key] = detail::to_json_value(v); });
  });
  return j;
}

/// Overlays `j` on the defaults; unknown sections or keys are errors.
inline Config config_from_json(const nlohmann::json& j, Config c = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  std::set<std::string> sections;
  detail::for_sections(c, [&](const char* name, auto visit) {
    sections.insert(name);
    if (!j.contains(name)) return;
    const auto& sec = j.at(name);
    if (!sec.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
    std::set<std::string> keys;
    visit([&](const char* key, auto& v) {
      keys.insert(key);
      if (sec.contains(key)) detail::from_json_value(sec.at(key), v, std::string(name) + "." + key);
    });
    for (const auto& [k, _] : sec.items())
      if (!keys.count(k)) throw ConfigError("unknown config key '" + std::string(name) + "." + k + "'");
  });
  for (const auto& [k, _] : j.items())
    if (!sections.count(k)) throw ConfigError("unknown config section '" + k + "'");
  finalize_config(c);
  return c;
}

inline Config default_config() {
  Config c;
  finalize_config(c);
  return c;
}

/// Small budgets and corpora for a pipeline run in well under two minutes.
inline Config smoke_config() {
  Config c;
  c.corpora = {200, 20, 20, 100, 20, 20};
  c.adapt.base_steps = 50;
  c.adapt.tle_steps = 50;
  c.adapt.text_steps = 50;
  c.adapt.base_opt.warmup_steps = 10;
  c.adapt.tle_eval_every = 10;
  c.fusion.grid = {0.10, 0.25};
  finalize_config(c);
  return c;
}

inline std::string canonical_config(const Config& c) { return config_to_json(c).dump(2) + "\n"; }

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  if (EVP_Digest(data.data(), data.size(), md, &n, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < n; ++i) out += hex[md[i] >> 4], out += hex[md[i] & 15];
  return out;
}

inline std::string config_hash(const Config& c) { return sha256_hex(canonical_config(c)); }

inline Config load_config(const std::string& path, Config base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j, base);
}

}  // namespace whistle
