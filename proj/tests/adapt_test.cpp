#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "whistle/adapt/adapt.hpp"

using namespace whistle;

namespace {

// A shrunken world so every procedure runs in milliseconds.
const World& world() {
  static const World w = [] {
    WorldConfig c;
    c.n_max = 128;
    c.l_max = 8;
    c.max_words = 4;
    c.source_words = 20;
    c.target_words = 10;
    return build_world(21, c);
  }();
  return w;
}

AsrConfig asr_config() {
  AsrConfig c;
  c.n_max = world().config.n_max;
  c.l_max = world().config.l_max;
  c.h = 16;
  c.heads = 2;
  c.ffn = 24;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.vocab = world().vocab_size();
  return c;
}

TleConfig tle_config() {
  TleConfig base;
  base.embed = 8;
  base.channels = {8, 8, 8};
  base.latent = 4;
  return tle_config_for(asr_config(), world(), base);
}

const Corpus& source() {
  static const Corpus c = sample_corpus(world(), Domain::source, Split::train, 12, true);
  return c;
}

const Corpus& text() {
  static const Corpus c = sample_corpus(world(), Domain::target, Split::train, 10, false);
  return c;
}

AdaptPlan plan(Method m, int rounds) {
  AdaptPlan p;
  p.method = m;
  p.text_steps = rounds;
  p.batch = 3;
  return p;
}

std::vector<StepKind> kinds(const StepLog& log) {
  std::vector<StepKind> out;
  for (const auto& r : log.records) out.push_back(r.kind);
  return out;
}

bool same_group(const ParamStore<float>& a, const ParamStore<float>& b, const ParamFilter& which) {
  for (const auto& [name, t] : a.tensors())
    if (which(name) && !bitwise_equal(t, b.get(name))) return false;
  return true;
}

}  // namespace

TEST(Adapt, ZeroStepPlansAreIdentity) {
  const auto m0 = init_asr(asr_config(), 1);
  const auto t0 = init_tle(tle_config(), world(), 1);
  for (Method me : {Method::none, Method::tle, Method::tts, Method::tle_tts}) {
    auto m = m0;
    const auto log = adapt(m, &t0, world(), text(), source(), plan(me, 0));
    EXPECT_TRUE(m.params == m0.params) << to_string(me);
    EXPECT_TRUE(log.records.empty());
  }
  auto m = m0;
  AdaptPlan p;
  p.base_steps = 0;
  finetune_base(m, source(), p);
  EXPECT_TRUE(m.params == m0.params);
  auto t = t0;
  p.tle_steps = 0;
  train_tle(t, m, source(), source(), p);
  EXPECT_TRUE(t.params == t0.params);
}

TEST(Adapt, StepLogPatternsFollowReplayRatio) {
  const auto m0 = init_asr(asr_config(), 2);
  const auto tle = init_tle(tle_config(), world(), 2);
  using K = StepKind;
  const int rounds = 3;
  {
    auto m = m0;
    const auto log = adapt(m, &tle, world(), text(), source(), plan(Method::tle, rounds));
    std::vector<K> want;
    for (int r = 0; r < rounds; ++r) want.insert(want.end(), {K::tle_text, K::replay, K::replay});
    EXPECT_EQ(kinds(log), want);
  }
  {
    auto m = m0;
    const auto log = adapt(m, &tle, world(), text(), source(), plan(Method::tts, rounds));
    std::vector<K> want;
    for (int r = 0; r < rounds; ++r) want.insert(want.end(), {K::tts_text, K::replay, K::replay});
    EXPECT_EQ(kinds(log), want);
  }
  {
    auto m = m0;
    const auto log = adapt(m, &tle, world(), text(), source(), plan(Method::tle_tts, rounds));
    std::vector<K> want;
    for (int r = 0; r < rounds; ++r)
      want.insert(want.end(), {K::tle_text, K::replay, K::replay, K::tts_text, K::replay, K::replay});
    EXPECT_EQ(kinds(log), want);
    EXPECT_EQ(log.count(K::tle_text), log.count(K::tts_text));
    // both text steps of a round consume the same batch
    for (size_t i = 0; i < log.records.size(); i += 6) EXPECT_EQ(log.records[i].ids, log.records[i + 3].ids);
    for (size_t i = 0; i < log.records.size(); ++i) EXPECT_EQ(log.records[i].step, static_cast<std::int64_t>(i));
  }
}

TEST(Adapt, ReplayCountIsRatioTimesTextSteps) {
  const auto m0 = init_asr(asr_config(), 3);
  const auto tle = init_tle(tle_config(), world(), 3);
  for (int ratio : {0, 1, 3}) {
    for (Method me : {Method::tle, Method::tts, Method::tle_tts}) {
      auto m = m0;
      auto p = plan(me, 2);
      p.replay_ratio = ratio;
      const auto log = adapt(m, &tle, world(), text(), source(), p);
      const size_t text_steps = log.count(StepKind::tle_text) + log.count(StepKind::tts_text);
      EXPECT_EQ(log.count(StepKind::replay), static_cast<size_t>(ratio) * text_steps) << to_string(me);
      for (const auto& r : log.records) {
        if (r.kind == StepKind::replay) {
          for (const auto& id : r.ids) EXPECT_EQ(id.rfind("source-train", 0), 0u) << id;
        }
      }
    }
  }
}

TEST(Adapt, TleTextStepsTouchOnlyTheDecoder) {
  const auto m0 = init_asr(asr_config(), 4);
  const auto tle = init_tle(tle_config(), world(), 4);
  const auto tle_copy = tle;
  auto m = m0;
  auto p = plan(Method::tle, 4);
  p.replay_ratio = 0;
  const auto log = adapt(m, &tle, world(), text(), source(), p);
  for (const auto& r : log.records) EXPECT_EQ(r.groups, "dec");
  EXPECT_TRUE(same_group(m.params, m0.params, is_encoder_param));
  EXPECT_FALSE(same_group(m.params, m0.params, is_decoder_param));
  EXPECT_TRUE(tle.params == tle_copy.params);

  // replay steps do reach the encoder
  auto m2 = m0;
  p.replay_ratio = 1;
  adapt(m2, &tle, world(), text(), source(), p);
  EXPECT_FALSE(same_group(m2.params, m0.params, is_encoder_param));
}

TEST(Adapt, TrainingLogsAndFrozenEncoder) {
  auto m = init_asr(asr_config(), 5);
  AdaptPlan p;
  p.batch = 3;
  p.base_steps = 5;
  const auto base_log = finetune_base(m, source(), p);
  EXPECT_EQ(base_log.count(StepKind::base), 5u);
  EXPECT_EQ(base_log.records.size(), 5u);

  const auto m_before = m;
  auto tle = init_tle(tle_config(), world(), 5);
  p.tle_steps = 7;
  p.tle_eval_every = 3;
  const auto tle_log = train_tle(tle, m, source(), source(), p);
  EXPECT_TRUE(m.params == m_before.params);
  EXPECT_EQ(tle_log.count(StepKind::tle), 7u);
  std::vector<std::int64_t> at;
  for (const auto& [s, mse] : tle_log.heldout) {
    at.push_back(s);
    EXPECT_GT(mse, 0.0);
  }
  EXPECT_EQ(at, (std::vector<std::int64_t>{0, 3, 6, 7}));
  // the lexicon table is not a trained parameter
  const auto fresh = init_tle(tle_config(), world(), 5);
  EXPECT_TRUE(bitwise_equal(tle.params.get("lex.table"), fresh.params.get("lex.table")));
}

TEST(Adapt, ErrorsNameTheProblem) {
  auto m = init_asr(asr_config(), 6);
  const auto tle = init_tle(tle_config(), world(), 6);
  const auto with_audio = sample_corpus(world(), Domain::target, Split::train, 4, true);
  EXPECT_THROW(adapt(m, &tle, world(), with_audio, source(), plan(Method::tle, 1)), Error);
  EXPECT_THROW(adapt(m, &tle, world(), with_audio, source(), plan(Method::tts, 1)), Error);
  EXPECT_THROW(adapt(m, &tle, world(), text(), text(), plan(Method::tts, 1)), Error);
  EXPECT_THROW(adapt(m, static_cast<const TleModel<float>*>(nullptr), world(), text(), source(), plan(Method::tle, 1)), Error);
  EXPECT_THROW(finetune_base(m, text(), AdaptPlan{}), Error);

  auto other = tle_config();
  other.l_max = 4;
  other.t_enc = 16;
  const auto wrong = init_tle(other, world(), 6);
  EXPECT_THROW(adapt(m, &wrong, world(), text(), source(), plan(Method::tle, 1)), ShapeError);

  AdaptPlan bad;
  bad.replay_ratio = -1;
  EXPECT_THROW(check_plan(bad), ConfigError);
  EXPECT_THROW(parse_method("tts+tle"), ConfigError);
  EXPECT_EQ(parse_method(to_string(Method::tle_tts)), Method::tle_tts);
}

TEST(Adapt, SameSeedSameModel) {
  const auto m0 = init_asr(asr_config(), 7);
  const auto tle = init_tle(tle_config(), world(), 7);
  for (Method me : {Method::tts, Method::tle_tts}) {
    auto a = m0, b = m0;
    adapt(a, &tle, world(), text(), source(), plan(me, 2));
    adapt(b, &tle, world(), text(), source(), plan(me, 2));
    EXPECT_TRUE(a.params == b.params) << to_string(me);
    auto c = m0;
    auto p = plan(me, 2);
    p.seed = 99;
    adapt(c, &tle, world(), text(), source(), p);
    EXPECT_FALSE(a.params == c.params);
  }
}

TEST(BatchSampler, EachEpochIsAPermutation) {
  BatchSampler s(7, Stream(3));
  std::multiset<size_t> seen;
  for (int i = 0; i < 3; ++i)
    for (size_t k : s.next(7)) seen.insert(k);
  for (size_t k = 0; k < 7; ++k) EXPECT_EQ(seen.count(k), 3u);
  EXPECT_THROW(BatchSampler(0, Stream(1)), Error);
}

TEST(StepLog, JsonLinesRoundtrip) {
  StepLog log;
  log.records.push_back({0, StepKind::tle_text, 1.5, "dec", {"a", "b"}});
  log.records.push_back({1, StepKind::replay, 0.25, "enc+dec", {"c"}});
  log.heldout.emplace_back(0, 0.75);
  const auto path = std::filesystem::temp_directory_path() / "whistle_steplog_test.jsonl";
  write_steplog(log, path.string());
  std::ifstream f(path);
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(nlohmann::json::parse(line));
  std::filesystem::remove(path);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0]["kind"], "tle_text");
  EXPECT_EQ(lines[0]["ids"], (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(lines[1]["groups"], "enc+dec");
  EXPECT_EQ(lines[2]["kind"], "tle_heldout");
  EXPECT_EQ(lines[2]["mse"], 0.75);
}
