#include <gtest/gtest.h>

#include <cmath>

#include "whistle/numerics/adam.hpp"
#include "whistle/numerics/gradcheck.hpp"
#include "whistle/tle/tle.hpp"

using namespace whistle;

namespace {

const World& world() {
  static const World w = build_world(13);
  return w;
}

AsrConfig asr_config() {
  AsrConfig c;
  c.vocab = world().vocab_size();
  return c;
}

TleConfig tle_config(bool length_head = false) {
  TleConfig c = tle_config_for(asr_config(), world());
  c.length_head = length_head;
  return c;
}

// Narrow everything so double-precision checks stay fast.
TleConfig tiny_config() {
  TleConfig c = tle_config();
  c.l_max = 4;
  c.t_enc = 16;
  c.h = 6;
  c.embed = 5;
  c.channels = {4, 5, 6};
  c.latent = 3;
  c.length_head = true;
  return c;
}

std::vector<const Transcript*> texts(const Corpus& c) {
  std::vector<const Transcript*> out;
  for (const auto& u : c.items) out.push_back(&u.text);
  return out;
}

}  // namespace

TEST(Reparameterize, ZeroNoiseGivesMean) {
  Tape<double> tape(false);
  Tensor<double> mu({2, 3}, {1, -2, 3, 0.5, 0, -1});
  Tensor<double> lv({2, 3}, {0.3, -1, 2, 0, 0, 4});
  auto z = reparameterize(tape.constant(mu), tape.constant(lv), Tensor<double>({2, 3}));
  EXPECT_TRUE(bitwise_equal(z.value(), mu));
}

TEST(Reparameterize, UnitNoiseShiftsByStd) {
  Tape<double> tape(false);
  Tensor<double> mu({1}, {0.25});
  auto z = reparameterize(tape.constant(mu), tape.constant(Tensor<double>({1})), Tensor<double>({1}, 1.0));
  EXPECT_DOUBLE_EQ(z.value()[0], 1.25);
  Tensor<double> lv({1}, {std::log(4.0)});
  auto z2 = reparameterize(tape.constant(mu), tape.constant(lv), Tensor<double>({1}, 1.0));
  EXPECT_NEAR(z2.value()[0], 2.25, 1e-12);
}

TEST(Reparameterize, MonteCarloMean) {
  Tensor<double> mu({4}, {-1.0, 0.0, 0.5, 3.0});
  Tensor<double> lv({4});
  Stream rng(21);
  std::vector<double> acc(4);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto z = reparameterize(mu, lv, rng);
    for (size_t j = 0; j < 4; ++j) acc[j] += z[j] / n;
  }
  for (size_t j = 0; j < 4; ++j) EXPECT_NEAR(acc[j], mu[j], 0.05);
}

TEST(Reparameterize, ShapeMismatchThrows) {
  Tape<double> tape(false);
  EXPECT_THROW(reparameterize(tape.constant(Tensor<double>({2})), tape.constant(Tensor<double>({2})),
                              Tensor<double>({3})),
               ShapeError);
}

TEST(Tle, LexiconTableEncodesPronunciations) {
  const auto m = init_tle(tle_config(), world(), 0);
  const auto& t = m.params.get("lex.table");
  const auto& c = m.config;
  for (int tok = 0; tok < c.vocab; ++tok) {
    double row = 0;
    for (int j = 0; j < c.lexicon_width(); ++j) row += t.at(tok, j);
    const double want = tok < kFirstWord ? 1 : static_cast<double>(world().pronunciations[tok - kFirstWord].size());
    EXPECT_EQ(row, want) << tok;
  }
}

TEST(Tle, OutputShapeAndDeterminism) {
  const auto m = init_tle(tle_config(), world(), 1);
  auto corpus = sample_corpus(world(), Domain::target, Split::dev, 3, false);
  for (const auto& u : corpus.items) {
    const auto a = tle_forward(m, u.text, LatentMode::mean, nullptr);
    EXPECT_EQ(a.approx.shape(), (Shape{64, 64}));
    EXPECT_EQ(a.mu.shape(), (Shape{8, 64}));
    EXPECT_TRUE(a.logvar.all_finite());
    const auto b = tle_forward(m, u.text, LatentMode::mean, nullptr);
    EXPECT_TRUE(bitwise_equal(a.approx, b.approx));
  }
}

TEST(Tle, SamplingDependsOnStream) {
  const auto m = init_tle(tle_config(), world(), 2);
  auto corpus = sample_corpus(world(), Domain::source, Split::dev, 1, false);
  Stream s1(1), s2(2), s1b(1);
  const auto a = tle_forward(m, corpus.items[0].text, LatentMode::sample, &s1);
  const auto b = tle_forward(m, corpus.items[0].text, LatentMode::sample, &s2);
  const auto c = tle_forward(m, corpus.items[0].text, LatentMode::sample, &s1b);
  double diff = 0;
  for (size_t i = 0; i < a.approx.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(a.approx[i] - b.approx[i])));
  EXPECT_GT(diff, 0.0);
  EXPECT_TRUE(bitwise_equal(a.approx, c.approx));
  EXPECT_THROW(tle_forward(m, corpus.items[0].text, LatentMode::sample, nullptr), Error);
}

TEST(Tle, RejectsLongTranscripts) {
  const auto m = init_tle(tle_config(), world(), 3);
  Transcript t;
  t.tokens.assign(17, kFirstWord);
  EXPECT_THROW(tle_forward(m, t, LatentMode::mean, nullptr), Error);
}

TEST(Tle, MismatchedRecognizerRejected) {
  auto a = asr_config();
  a.h = 32;
  a.heads = 4;
  EXPECT_THROW(check_tle_matches(tle_config(), a), ShapeError);
  EXPECT_NO_THROW(check_tle_matches(tle_config(), asr_config()));
}

TEST(VaeLoss, ZeroBetaIsPureMse) {
  const auto c = tle_config();
  auto cz = c;
  cz.beta = 0;
  const auto m = init_tle(c, world(), 4);
  auto corpus = sample_corpus(world(), Domain::source, Split::dev, 2, false);
  Stream rng(4);
  const auto tgt = standard_normal<float>({2, c.t_enc, c.h}, rng);
  Tape<float> tape(false);
  Binder<float> b(tape, m.params);
  VaeTerms terms;
  const auto loss = vae_loss(b, cz, tgt, texts(corpus), LatentMode::mean, nullptr, nullptr, &terms);
  EXPECT_EQ(loss.value().item(), static_cast<float>(terms.mse));
  // oracle: mean squared error against the mean-mode grid
  const auto grid = tle_grids(m, texts(corpus), LatentMode::mean, nullptr);
  double mse = 0;
  for (size_t i = 0; i < grid.size(); ++i) mse += std::pow(static_cast<double>(grid[i]) - tgt[i], 2) / grid.size();
  EXPECT_NEAR(terms.mse, mse, 1e-5 * mse);
}

TEST(VaeLoss, ZeroWhenPerfectAndPrior) {
  const auto c = tle_config();
  auto m = init_tle(c, world(), 5);
  // zero the posterior heads so mu = 0 and logvar = 0
  for (const char* n : {"mu.w", "mu.b", "logvar.w", "logvar.b"}) m.params.get_mut(n).fill(0.0f);
  auto corpus = sample_corpus(world(), Domain::source, Split::dev, 2, false);
  const auto tgt = tle_grids(m, texts(corpus), LatentMode::mean, nullptr);
  Tape<float> tape(false);
  Binder<float> b(tape, m.params);
  EXPECT_EQ(vae_loss(b, c, tgt, texts(corpus), LatentMode::mean, nullptr).value().item(), 0.0f);
}

TEST(VaeLoss, NonNegativeWithNonNegativeKl) {
  const auto c = tle_config();
  auto corpus = sample_corpus(world(), Domain::source, Split::dev, 4, false);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto m = init_tle(c, world(), 10 + s);
    Stream rng(s);
    const auto tgt = standard_normal<float>({4, c.t_enc, c.h}, rng);
    Tape<float> tape(false);
    Binder<float> b(tape, m.params);
    VaeTerms terms;
    const auto loss = vae_loss(b, c, tgt, texts(corpus), LatentMode::sample, &rng, nullptr, &terms);
    EXPECT_GE(terms.kl, 0.0);
    EXPECT_GE(loss.value().item(), 0.0f);
  }
}

TEST(VaeLoss, GradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  const auto m = init_tle(c, world(), 6).cast<double>();
  std::vector<Transcript> text{Transcript{{kBos, 5, 9, kEos}}, Transcript{{kBos, 40, kEos}}};
  std::vector<const Transcript*> tp{&text[0], &text[1]};
  Stream rng(6);
  const auto tgt = standard_normal<double>({2, c.t_enc, c.h}, rng);
  const std::vector<int> lens{9, 5};
  std::function<Var<double>(Binder<double>&)> loss = [&](Binder<double>& b) {
    Stream noise(99);  // same draw on every evaluation
    auto cc = c;
    cc.beta = 0.5;  // weight the KL term enough to matter
    return vae_loss(b, cc, tgt, tp, LatentMode::sample, &noise, &lens);
  };
  const auto r = grad_check_params(m.params, loss, is_tle_trainable, default_fd_delta<double>(), 6);
  EXPECT_LE(r.max_rel_err, 1e-5) << r.worst << " ad=" << r.worst_analytic << " fd=" << r.worst_numeric;
  EXPECT_GT(r.coords, 80u);
}

TEST(VaeLoss, FrozenEncoderAndMissingAudio) {
  const auto ac = asr_config();
  const auto asr = init_asr(ac, 7);
  const auto before = asr;
  const auto tc = tle_config();
  auto m = init_tle(tc, world(), 7);
  auto corpus = sample_corpus(world(), Domain::source, Split::train, 4, true);
  std::vector<const Utterance*> batch;
  for (const auto& u : corpus.items) batch.push_back(&u);
  OptimizerState<float> st;
  Stream noise(7);
  for (int s = 0; s < 3; ++s) {
    Tape<float> tape;
    Binder<float> b(tape, m.params, is_tle_trainable);
    auto loss = vae_loss(b, tc, asr, batch, LatentMode::sample, &noise);
    tape.backward(loss);
    adam_step(m.params, b.grads(), st, is_tle_trainable);
  }
  EXPECT_TRUE(asr == before);

  Utterance no_audio{"x", corpus.items[0].text, std::nullopt};
  std::vector<const Utterance*> bad{&no_audio};
  Tape<float> tape;
  Binder<float> b(tape, m.params);
  EXPECT_THROW(vae_loss(b, tc, asr, bad, LatentMode::mean, nullptr), Error);
}

TEST(LengthHead, DisabledIsAnError) {
  const auto m = init_tle(tle_config(false), world(), 8);
  EXPECT_THROW(predict_lengths(m, Transcript{{kBos, 4, kEos}}), ConfigError);
}

TEST(LengthHead, ClampedAndDeterministic) {
  auto m = init_tle(tle_config(true), world(), 9);
  m.params.get_mut("len.b").fill(5.0f);  // pushes predictions above T_enc
  auto corpus = sample_corpus(world(), Domain::source, Split::dev, 5, false);
  for (const auto& u : corpus.items) {
    const int p = predict_lengths(m, u.text);
    EXPECT_GE(p, 1);
    EXPECT_LE(p, 64);
    EXPECT_EQ(p, predict_lengths(m, u.text));
  }
  m.params.get_mut("len.b").fill(-5.0f);
  EXPECT_EQ(predict_lengths(m, corpus.items[0].text), 1);
}

TEST(LengthHead, OverfitsOneUtterance) {
  const auto c = tle_config(true);
  auto m = init_tle(c, world(), 10);
  const Transcript t{{kBos, 7, 8, 9, kEos}};
  const std::vector<int> len{40};
  Stream rng(10);
  const auto tgt = standard_normal<float>({1, c.t_enc, c.h}, rng);
  OptimizerState<float> st;
  st.config.lr = 3e-3;
  for (int s = 0; s < 300; ++s) {
    Tape<float> tape;
    Binder<float> b(tape, m.params, is_tle_trainable);
    Stream noise(static_cast<std::uint64_t>(s));
    tape.backward(vae_loss(b, c, tgt, {&t}, LatentMode::sample, &noise, &len));
    adam_step(m.params, b.grads(), st, is_tle_trainable);
  }
  EXPECT_EQ(predict_lengths(m, t), 40);
}
