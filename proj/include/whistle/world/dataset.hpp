#pragma once

// On-disk dataset: world.json, manifest.jsonl (one line per utterance) and
// features.bin (valid frames only, float32 little-endian, row-major).

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "whistle/error.hpp"
#include "whistle/world/world.hpp"

namespace whistle {

static_assert(std::endian::native == std::endian::little, "feature files are written in host order");

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(WorldConfig, n_phonemes, feat_dim, proto_min_frames, proto_max_frames, source_words,
                                   target_words, overlap, n_max, l_max, min_words, max_words, successors, bigram_mass,
                                   noise_sigma, jitter_p, speaker_gain_sd, speaker_bias_sd, speaker_filter_sd,
                                   target_gain_shift, target_bias_shift, tts_tilt, tts_pool)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SpeakerParams, gain, bias, filter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Bigram, words, start, next, next_p)

inline nlohmann::json world_to_json(const World& w) {
  nlohmann::json j;
  j["seed"] = w.seed;
  j["config"] = w.config;
  auto& ph = j["phonemes"] = nlohmann::json::array();
  for (size_t p = 0; p < w.phonemes.size(); ++p) {
    nlohmann::json frames = nlohmann::json::array();
    for (std::int64_t t = 0; t < w.phonemes[p].dim(0); ++t) {
      std::vector<float> row(w.phonemes[p].data() + t * w.feat_dim(), w.phonemes[p].data() + (t + 1) * w.feat_dim());
      frames.push_back(row);
    }
    ph.push_back({{"name", w.phoneme_names[p]}, {"frames", frames}});
  }
  auto& lex = j["words"] = nlohmann::json::array();
  for (size_t i = 0; i < w.words.size(); ++i)
    lex.push_back({{"id", kFirstWord + static_cast<int>(i)}, {"spelling", w.words[i]}, {"phonemes", w.pronunciations[i]}});
  j["source_lexicon"] = w.source_lexicon;
  j["target_lexicon"] = w.target_lexicon;
  j["target_only"] = w.target_only;
  j["source_text"] = w.source_text;
  j["target_text"] = w.target_text;
  j["tts_speakers"] = w.tts_speakers;
  j["tilt"] = w.tilt;
  return j;
}

inline World world_from_json(const nlohmann::json& j) {
  try {
    World w;
    w.seed = j.at("seed").get<std::uint64_t>();
    w.config = j.at("config").get<WorldConfig>();
    for (const auto& p : j.at("phonemes")) {
      w.phoneme_names.push_back(p.at("name").get<std::string>());
      const auto rows = p.at("frames").get<std::vector<std::vector<float>>>();
      Tensor<float> t({static_cast<std::int64_t>(rows.size()), w.config.feat_dim});
      for (size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<int>(rows[r].size()) != w.config.feat_dim) throw FormatError("world.json: prototype row width");
        std::copy(rows[r].begin(), rows[r].end(), t.data() + r * static_cast<size_t>(w.config.feat_dim));
      }
      w.phonemes.push_back(std::move(t));
    }
    for (const auto& e : j.at("words")) {
      w.words.push_back(e.at("spelling").get<std::string>());
      w.pronunciations.push_back(e.at("phonemes").get<std::vector<int>>());
    }
    w.source_lexicon = j.at("source_lexicon").get<std::vector<int>>();
    w.target_lexicon = j.at("target_lexicon").get<std::vector<int>>();
    w.target_only = j.at("target_only").get<std::vector<int>>();
    w.source_text = j.at("source_text").get<Bigram>();
    w.target_text = j.at("target_text").get<Bigram>();
    w.tts_speakers = j.at("tts_speakers").get<std::vector<SpeakerParams>>();
    w.tilt = j.at("tilt").get<std::vector<float>>();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("world.json: ") + e.what());
  }
}

inline std::string corpus_key(Domain d, Split s) { return std::string(to_string(d)) + "-" + to_string(s); }

struct Dataset {
  World world;
  std::map<std::string, Corpus> corpora;

  const Corpus& get(Domain d, Split s) const {
    auto it = corpora.find(corpus_key(d, s));
    if (it == corpora.end()) throw Error("dataset has no " + corpus_key(d, s) + " corpus");
    return it->second;
  }
};

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream wj(dir / "world.json");
    wj << world_to_json(ds.world).dump() << "\n";
  }
  std::ofstream manifest(dir / "manifest.jsonl");
  std::ofstream feats(dir / "features.bin", std::ios::binary);
  std::uint64_t offset = 0;
  const int d = ds.world.feat_dim();
  for (const auto& [key, corpus] : ds.corpora) {
    for (const auto& u : corpus.items) {
      std::vector<std::string> text;
      for (int t : u.text.words()) text.push_back(ds.world.token_str(t));
      nlohmann::json line{{"id", u.id},
                          {"domain", to_string(corpus.domain)},
                          {"split", to_string(corpus.split)},
                          {"tokens", u.text.tokens},
                          {"text", text}};
      if (u.audio) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(u.audio->valid_len) * d * sizeof(float);
        feats.write(reinterpret_cast<const char*>(u.audio->frames.data()), static_cast<std::streamsize>(bytes));
        line["valid_len"] = u.audio->valid_len;
        line["offset"] = offset;
        line["length"] = bytes;
        offset += bytes;
      }
      manifest << line.dump() << "\n";
    }
  }
  if (!manifest || !feats) throw Error("failed writing dataset to " + dir.string());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::ifstream wj(dir / "world.json");
    if (!wj) throw FormatError("missing " + (dir / "world.json").string());
    nlohmann::json j;
    try {
      wj >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("world.json: ") + e.what());
    }
    ds.world = world_from_json(j);
  }
  std::ifstream manifest(dir / "manifest.jsonl");
  std::ifstream feats(dir / "features.bin", std::ios::binary);
  if (!manifest || !feats) throw FormatError("missing manifest.jsonl or features.bin in " + dir.string());
  const int d = ds.world.feat_dim();
  std::string line;
  int lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const Domain dom = parse_domain(j.at("domain").get<std::string>());
      const Split sp = parse_split(j.at("split").get<std::string>());
      auto& c = ds.corpora[corpus_key(dom, sp)];
      c.domain = dom;
      c.split = sp;
      Utterance u;
      u.id = j.at("id").get<std::string>();
      u.text.tokens = j.at("tokens").get<std::vector<int>>();
      for (int t : u.text.tokens)
        if (t < 0 || t >= ds.world.vocab_size()) throw FormatError(u.id + ": token outside vocabulary");
      if (j.contains("valid_len")) {
        AudioFeatures a{Tensor<float>({ds.world.n_max(), d}), j.at("valid_len").get<int>()};
        const auto bytes = j.at("length").get<std::uint64_t>();
        if (a.valid_len < 0 || a.valid_len > ds.world.n_max() ||
            bytes != static_cast<std::uint64_t>(a.valid_len) * d * sizeof(float))
          throw FormatError(u.id + ": inconsistent feature extent");
        feats.seekg(static_cast<std::streamoff>(j.at("offset").get<std::uint64_t>()));
        feats.read(reinterpret_cast<char*>(a.frames.data()), static_cast<std::streamsize>(bytes));
        if (!feats) throw FormatError(u.id + ": features.bin truncated");
        u.audio = std::move(a);
      }
      c.items.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace whistle
