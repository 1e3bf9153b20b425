#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include "whistle/world/dataset.hpp"
#include "whistle/world/world.hpp"

using namespace whistle;

namespace {

const World& default_world() {
  static const World w = build_world(7);
  return w;
}

// Concatenation oracle: prototypes copied row by row, zero canvas elsewhere.
Tensor<float> concat_oracle(const World& w, const std::vector<int>& words) {
  Tensor<float> out({w.n_max(), w.feat_dim()});
  size_t pos = 0;
  for (int tok : words)
    for (int p : w.pronunciations[tok - kFirstWord]) {
      std::memcpy(out.data() + pos, w.phonemes[p].data(), w.phonemes[p].size() * sizeof(float));
      pos += w.phonemes[p].size();
    }
  return out;
}

std::set<int> tokens_of(const Corpus& c) {
  std::set<int> s;
  for (const auto& u : c.items) s.insert(u.text.tokens.begin(), u.text.tokens.end());
  return s;
}

}  // namespace

TEST(World, SameSeedSameWorld) {
  EXPECT_TRUE(build_world(7) == default_world());
  EXPECT_FALSE(build_world(8) == default_world());
}

TEST(World, LexiconShape) {
  const auto& w = default_world();
  EXPECT_EQ(w.source_lexicon.size(), 120u);
  EXPECT_EQ(w.target_lexicon.size(), 80u);
  EXPECT_EQ(w.target_only.size(), 40u);
  EXPECT_EQ(w.vocab_size(), 3 + 160);
  std::set<std::string> spellings(w.words.begin(), w.words.end());
  EXPECT_EQ(spellings.size(), w.words.size());
  for (const auto& pron : w.pronunciations) {
    EXPECT_GE(pron.size(), 2u);
    EXPECT_LE(pron.size(), 5u);
  }
  std::set<int> src(w.source_lexicon.begin(), w.source_lexicon.end());
  for (int t : w.target_only) EXPECT_EQ(src.count(t), 0u);
  for (const auto& p : w.phonemes) {
    EXPECT_GE(p.dim(0), 3);
    EXPECT_LE(p.dim(0), 6);
    EXPECT_EQ(p.dim(1), 16);
  }
}

TEST(World, ZeroOverlapGivesDisjointLexicons) {
  WorldConfig c;
  c.overlap = 0.0;
  const auto w = build_world(3, c);
  std::set<int> src(w.source_lexicon.begin(), w.source_lexicon.end());
  for (int t : w.target_lexicon) EXPECT_EQ(src.count(t), 0u);
  EXPECT_EQ(w.target_only.size(), 80u);
}

TEST(World, OverlapOutsideUnitIntervalIsAnError) {
  WorldConfig c;
  c.overlap = 1.5;
  EXPECT_THROW(build_world(1, c), ConfigError);
  c.overlap = -0.1;
  EXPECT_THROW(build_world(1, c), ConfigError);
}

TEST(World, SourceCorporaNeverContainTargetOnlyWords) {
  const auto& w = default_world();
  for (Split s : {Split::train, Split::dev, Split::test}) {
    const auto toks = tokens_of(sample_corpus(w, Domain::source, s, 400, false));
    for (int t : w.target_only) EXPECT_EQ(toks.count(t), 0u) << w.token_str(t);
  }
  // and the target domain does use them
  const auto target = tokens_of(sample_corpus(w, Domain::target, Split::train, 400, false));
  int seen = 0;
  for (int t : w.target_only) seen += static_cast<int>(target.count(t));
  EXPECT_GT(seen, 30);
}

TEST(Articulate, CleanSingleWordEqualsPrototypeConcatenation) {
  const auto& w = default_world();
  int word = -1;
  for (size_t i = 0; i < w.pronunciations.size() && word < 0; ++i)
    if (w.pronunciations[i].size() == 2) word = kFirstWord + static_cast<int>(i);
  ASSERT_GE(word, 0);
  const auto a = articulate(w, {word}, SpeakerParams::identity(16), nullptr, 0.0);
  const auto oracle = concat_oracle(w, {word});
  EXPECT_TRUE(bitwise_equal(a.frames, oracle));
  const auto& pr = w.pronunciations[word - kFirstWord];
  EXPECT_EQ(a.valid_len, w.phonemes[pr[0]].dim(0) + w.phonemes[pr[1]].dim(0));
}

TEST(Articulate, CleanUtteranceEqualsConcatenation) {
  const auto& w = default_world();
  Stream rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto words = sample_words(w, Domain::source, rng);
    EXPECT_TRUE(bitwise_equal(articulate(w, words, SpeakerParams::identity(16), nullptr, 0.0).frames,
                              concat_oracle(w, words)));
  }
}

TEST(Articulate, EmptySequenceIsSilence) {
  const auto a = articulate(default_world(), {}, SpeakerParams::identity(16), nullptr, 0.0);
  EXPECT_EQ(a.valid_len, 0);
  for (float v : a.frames.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Articulate, DeterministicGivenStreams) {
  const auto& w = default_world();
  auto run = [&] {
    Stream spk(1), jit(2), noise(3);
    return articulate(w, {5, 9, 40}, draw_speaker(w, Domain::target, spk), &jit, 0.1, &noise);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.valid_len, b.valid_len);
  EXPECT_TRUE(bitwise_equal(a.frames, b.frames));
}

TEST(Articulate, OverflowNamesTheUtterance) {
  WorldConfig c;
  c.n_max = 30;
  c.max_words = 3;
  c.l_max = 5;
  const auto w = build_world(2, c);
  std::vector<int> long_seq(10, kFirstWord);
  try {
    articulate(w, long_seq, SpeakerParams::identity(16), nullptr, 0.0, nullptr, "utt-42");
    FAIL() << "expected overflow";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("utt-42"), std::string::npos);
  }
}

TEST(Articulate, JitterDropsAndRepeatsFrames) {
  const auto& w = default_world();
  Stream words_rng(6);
  const auto words = sample_words(w, Domain::source, words_rng);
  const int clean = clean_frames(w, words);
  double total = 0;
  int differing = 0;
  for (int i = 0; i < 200; ++i) {
    Stream jit(100 + i);
    const auto a = articulate(w, words, SpeakerParams::identity(16), &jit, 0.0);
    total += a.valid_len;
    differing += a.valid_len != clean;
  }
  // repeats and drops are equally likely, so the expected length is unchanged
  EXPECT_NEAR(total / 200.0, clean, 0.05 * clean);
  EXPECT_GT(differing, 100);
}

TEST(Corpus, ShapeAndInvariants) {
  const auto& w = default_world();
  const auto c = sample_corpus(w, Domain::target, Split::dev, 200, true);
  ASSERT_EQ(c.size(), 200u);
  EXPECT_TRUE(c.has_audio());
  for (const auto& u : c.items) {
    const auto n = u.text.words().size();
    EXPECT_GE(n, 3u);
    EXPECT_LE(n, 10u);
    EXPECT_LE(u.text.length(), 16);
    EXPECT_EQ(u.text.tokens.front(), kBos);
    EXPECT_EQ(u.text.tokens.back(), kEos);
    ASSERT_TRUE(u.audio);
    EXPECT_LE(u.audio->valid_len, w.n_max());
    EXPECT_GT(u.audio->valid_len, 0);
    EXPECT_TRUE(u.audio->frames.all_finite());
    for (std::int64_t t = u.audio->valid_len; t < w.n_max(); ++t)
      for (int j = 0; j < 16; ++j) ASSERT_EQ(u.audio->frames.at(t, j), 0.0f);
  }
}

TEST(Corpus, TextOnlyCarriesNoFeatures) {
  const auto c = sample_corpus(default_world(), Domain::target, Split::train, 50, false);
  for (const auto& u : c.items) EXPECT_FALSE(u.audio.has_value());
  EXPECT_FALSE(c.has_audio());
  EXPECT_THROW(sample_corpus(default_world(), Domain::target, Split::train, 0, false), Error);
}

TEST(Corpus, FixedSeedReproduces) {
  const auto a = sample_corpus(default_world(), Domain::source, Split::train, 30, true);
  const auto b = sample_corpus(build_world(7), Domain::source, Split::train, 30, true);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.items[i].text, b.items[i].text);
    EXPECT_TRUE(bitwise_equal(a.items[i].audio->frames, b.items[i].audio->frames));
  }
  // text is the same whether or not audio is produced
  const auto t = sample_corpus(default_world(), Domain::source, Split::train, 30, false);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.items[i].text, t.items[i].text);
}

TEST(Tts, DeterministicGivenStream) {
  const auto& w = default_world();
  const auto text = Transcript::from_words({w.target_only[0], w.target_only[1], 7});
  Stream a(5), b(5);
  EXPECT_TRUE(bitwise_equal(tts_sim(w, text, a).frames, tts_sim(w, text, b).frames));
}

TEST(Tts, ReducesToCleanArticulation) {
  WorldConfig c;
  c.tts_tilt = 0.0;
  c.noise_sigma = 0.0;
  const auto w = build_world(7, c);
  const auto text = Transcript::from_words({w.target_only[0], 9, 30});
  Stream rng(1);
  const auto tts = tts_sim(w, text, {SpeakerParams::identity(16)}, rng);
  EXPECT_TRUE(bitwise_equal(tts.frames, concat_oracle(w, text.words())));
}

TEST(Tts, DefaultTiltDiffersFromCleanArticulation) {
  const auto& w = default_world();
  const auto text = Transcript::from_words({w.target_only[2], 11, 12});
  Stream rng(2);
  const auto tts = tts_sim(w, text, rng);
  const auto clean = articulate(w, text.words(), SpeakerParams::identity(16), nullptr, 0.0);
  ASSERT_EQ(tts.valid_len, clean.valid_len);
  double diff = 0;
  for (int t = 0; t < clean.valid_len; ++t)
    for (int j = 0; j < 16; ++j) diff += std::abs(tts.frames.at(t, j) - clean.frames.at(t, j));
  EXPECT_GT(diff / clean.valid_len, 0.0);
  double tilt = 0;
  for (float v : w.tilt) tilt = std::max(tilt, double(std::abs(v)));
  EXPECT_NEAR(tilt, 0.15, 1e-6);
}

TEST(Dataset, RoundTripIsExact) {
  const auto& w = default_world();
  Dataset ds{w, {}};
  ds.corpora[corpus_key(Domain::source, Split::train)] = sample_corpus(w, Domain::source, Split::train, 20, true);
  ds.corpora[corpus_key(Domain::target, Split::train)] = sample_corpus(w, Domain::target, Split::train, 20, false);
  const auto dir = std::filesystem::temp_directory_path() / "whistle_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  write_dataset(dir, ds);
  const auto back = read_dataset(dir);
  EXPECT_TRUE(back.world == w);
  ASSERT_EQ(back.corpora.size(), 2u);
  for (const auto& [key, c] : ds.corpora) {
    const auto& r = back.corpora.at(key);
    ASSERT_EQ(r.size(), c.size());
    for (size_t i = 0; i < c.size(); ++i) {
      EXPECT_EQ(r.items[i].id, c.items[i].id);
      EXPECT_EQ(r.items[i].text, c.items[i].text);
      ASSERT_EQ(r.items[i].audio.has_value(), c.items[i].audio.has_value());
      if (c.items[i].audio) {
        EXPECT_EQ(r.items[i].audio->valid_len, c.items[i].audio->valid_len);
        EXPECT_TRUE(bitwise_equal(r.items[i].audio->frames, c.items[i].audio->frames));
      }
    }
  }
  std::filesystem::remove_all(dir);
}
