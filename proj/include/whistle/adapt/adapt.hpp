#pragma once

// Training procedures: base fine-tuning, TLE training and the text-only
// adaptation methods. Every procedure is a pure function of its inputs and
// plan seed; batches and noise come from forks of one stream.

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "whistle/numerics/adam.hpp"
#include "whistle/tle/tle.hpp"

namespace whistle {

enum class Method { none, tle, tts, tle_tts };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::tle: return "tle";
    case Method::tts: return "tts";
    case Method::tle_tts: return "tle+tts";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "none") return Method::none;
  if (s == "tle") return Method::tle;
  if (s == "tts") return Method::tts;
  if (s == "tle+tts") return Method::tle_tts;
  throw ConfigError("unknown adaptation method '" + s + "' (expected none, tle, tts or tle+tts)");
}

struct AdaptPlan {
  Method method = Method::none;
  int base_steps = 5000;
  int tle_steps = 3000;
  int text_steps = 2000;  // adaptation rounds; one text-only step per kind per round
  int batch = 8;
  int replay_ratio = 2;
  AdamConfig base_opt{2e-3, 0.9, 0.999, 1e-8, 100};
  AdamConfig tle_opt{1e-3, 0.9, 0.999, 1e-8, 100};
  AdamConfig adapt_opt{5e-4, 0.9, 0.999, 1e-8, 100};
  // Each procedure decays its lr linearly to zero over its own step budget.
  bool lr_decay = true;
  LatentMode latent = LatentMode::sample;
  int tle_eval_every = 50;
  std::uint64_t seed = 0;
};

inline AdamConfig scheduled(AdamConfig o, const AdaptPlan& p, std::int64_t steps) {
  o.decay_steps = p.lr_decay ? static_cast<int>(steps) : 0;
  return o;
}

inline void check_plan(const AdaptPlan& p) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("adapt: " + what);
  };
  need(p.base_steps >= 0 && p.tle_steps >= 0 && p.text_steps >= 0, "step counts must be non-negative");
  need(p.batch >= 1, "batch must be at least 1");
  need(p.replay_ratio >= 0, "replay_ratio must be non-negative");
  need(p.tle_eval_every >= 1, "tle_eval_every must be positive");
  for (const auto* o : {&p.base_opt, &p.tle_opt, &p.adapt_opt})
    need(o->lr > 0 && o->warmup_steps >= 0, "optimizer lr must be positive and warmup non-negative");
}

enum class StepKind { base, tle, tle_text, tts_text, replay };

inline const char* to_string(StepKind k) {
  switch (k) {
    case StepKind::base: return "base";
    case StepKind::tle: return "tle";
    case StepKind::tle_text: return "tle_text";
    case StepKind::tts_text: return "tts_text";
    case StepKind::replay: return "replay";
  }
  return "?";
}

struct StepRecord {
  std::int64_t step = 0;
  StepKind kind = StepKind::base;
  double loss = 0;
  std::string groups;  // "enc+dec", "dec" or "tle"
  std::vector<std::string> ids;
};

struct StepLog {
  std::vector<StepRecord> records;
  // Held-out reconstruction MSE of the TLE, as (step, mse) pairs.
  std::vector<std::pair<std::int64_t, double>> heldout;

  size_t count(StepKind k) const {
    return static_cast<size_t>(std::count_if(records.begin(), records.end(), [k](const auto& r) { return r.kind == k; }));
  }
  void append(const StepLog& o) {
    records.insert(records.end(), o.records.begin(), o.records.end());
    heldout.insert(heldout.end(), o.heldout.begin(), o.heldout.end());
  }
};

inline void write_steplog(const StepLog& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write step log '" + path + "'");
  for (const auto& r : log.records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["kind"] = to_string(r.kind);
    j["loss"] = r.loss;
    j["groups"] = r.groups;
    j["ids"] = r.ids;
    f << j.dump() << '\n';
  }
  for (const auto& [step, mse] : log.heldout) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["kind"] = "tle_heldout";
    j["mse"] = mse;
    f << j.dump() << '\n';
  }
}

/// Epoch-shuffled index batches; reshuffles from its own stream each epoch.
class BatchSampler {
 public:
  BatchSampler(size_t n, Stream rng) : rng_(rng), order_(n) {
    if (n == 0) throw Error("batch sampler: empty corpus");
    shuffle();
  }

  std::vector<size_t> next(int batch) {
    std::vector<size_t> out;
    while (static_cast<int>(out.size()) < batch) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (size_t i = order_.size(); i-- > 1;) std::swap(order_[i], order_[static_cast<size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i)))]);
    pos_ = 0;
  }

  Stream rng_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

namespace detail {

inline void require_audio(const Corpus& c, const char* what) {
  if (!c.has_audio()) throw Error(std::string(what) + ": corpus " + to_string(c.domain) + "-" + to_string(c.split) + " has no audio");
}

// One optimizer step of `which` on the loss built by `fn`; returns the loss value.
template <class T>
double step(ParamStore<T>& params, OptimizerState<T>& st, const ParamFilter& which,
            const std::function<Var<T>(Binder<T>&)>& fn) {
  Tape<T> tape;
  Binder<T> b(tape, params, which);
  Var<T> loss = fn(b);
  const double v = static_cast<double>(loss.value().item());
  tape.backward(loss);
  adam_step(params, b.grads(), st, which);
  return v;
}

template <class T>
double audio_step(AsrModel<T>& m, OptimizerState<T>& st, const std::vector<const AudioFeatures*>& audio,
                  const std::vector<const Transcript*>& text) {
  return step<T>(m.params, st, all_params, [&](Binder<T>& b) { return audio_nll(b, m.config, audio, text); });
}

struct Batch {
  std::vector<const AudioFeatures*> audio;
  std::vector<const Transcript*> text;
  std::vector<std::string> ids;
};

inline Batch gather(const Corpus& c, const std::vector<size_t>& idx) {
  Batch b;
  for (size_t i : idx) {
    const auto& u = c.items[i];
    if (u.audio) b.audio.push_back(&*u.audio);
    b.text.push_back(&u.text);
    b.ids.push_back(u.id);
  }
  return b;
}

inline void progress(const char* what, std::int64_t step, std::int64_t total, double loss) {
  if (total > 0 && (step + 1) % std::max<std::int64_t>(1, total / 10) == 0)
    spdlog::debug("{} step {}/{} loss {:.4f}", what, step + 1, total, loss);
}

// Stream purposes, forked from the plan seed.
enum : std::uint64_t { kBaseBatches = 1, kTleBatches, kTleNoise, kTextBatches, kReplayBatches, kTtsAudio };

}  // namespace detail

/// End-to-end NLL training on source audio.
template <class T>
StepLog finetune_base(AsrModel<T>& m, const Corpus& source, const AdaptPlan& plan) {
  check_plan(plan);
  detail::require_audio(source, "finetune_base");
  const Stream root(plan.seed, 0x61646170);
  BatchSampler batches(source.size(), root.fork(detail::kBaseBatches));
  OptimizerState<T> st;
  st.config = scheduled(plan.base_opt, plan, plan.base_steps);
  StepLog log;
  for (int s = 0; s < plan.base_steps; ++s) {
    auto b = detail::gather(source, batches.next(plan.batch));
    const double loss = detail::audio_step(m, st, b.audio, b.text);
    log.records.push_back({s, StepKind::base, loss, "enc+dec", std::move(b.ids)});
    detail::progress("base", s, plan.base_steps, loss);
  }
  return log;
}

/// Encoder targets for a whole corpus, one [T_enc, h] grid per utterance.
template <class T>
std::vector<Tensor<T>> corpus_targets(const AsrModel<T>& asr, const Corpus& c, size_t batch = 32) {
  detail::require_audio(c, "corpus_targets");
  std::vector<Tensor<T>> out;
  const auto& ac = asr.config;
  const size_t per = static_cast<size_t>(ac.t_enc()) * ac.h;
  for (size_t s = 0; s < c.size(); s += batch) {
    std::vector<const AudioFeatures*> a;
    for (size_t i = s; i < std::min(c.size(), s + batch); ++i) a.push_back(&*c.items[i].audio);
    const auto g = encoder_targets(asr, a);
    for (size_t i = 0; i < a.size(); ++i) {
      Tensor<T> t({ac.t_enc(), ac.h});
      std::copy_n(g.data() + i * per, per, t.data());
      out.push_back(std::move(t));
    }
  }
  return out;
}

/// Trains phi against the frozen encoder on source audio. Held-out MSE on
/// `heldout` (posterior mean) is recorded every plan.tle_eval_every steps,
/// including step 0 and the final step.
template <class T>
StepLog train_tle(TleModel<T>& tle, const AsrModel<T>& asr, const Corpus& source, const Corpus& heldout,
                  const AdaptPlan& plan) {
  check_plan(plan);
  check_tle_matches(tle.config, asr.config);
  detail::require_audio(source, "train_tle");
  StepLog log;
  if (plan.tle_steps == 0) return log;
  const auto& c = tle.config;
  const auto targets = corpus_targets(asr, source);
  const auto held_targets = corpus_targets(asr, heldout);
  std::vector<const Transcript*> held_text;
  for (const auto& u : heldout.items) held_text.push_back(&u.text);

  const Stream root(plan.seed, 0x746c6574);
  BatchSampler batches(source.size(), root.fork(detail::kTleBatches));
  const Stream noise_root = root.fork(detail::kTleNoise);
  OptimizerState<T> st;
  st.config = scheduled(plan.tle_opt, plan, plan.tle_steps);
  const size_t per = static_cast<size_t>(c.t_enc) * c.h;
  log.heldout.emplace_back(0, heldout_mse(tle, held_targets, held_text));
  for (int s = 0; s < plan.tle_steps; ++s) {
    const auto idx = batches.next(plan.batch);
    auto b = detail::gather(source, idx);
    Tensor<T> tgt({static_cast<std::int64_t>(idx.size()), c.t_enc, c.h});
    std::vector<int> lengths;
    for (size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(targets[idx[i]].data(), per, tgt.data() + i * per);
      lengths.push_back(encoder_length(source.items[idx[i]].audio->valid_len, asr.config.k));
    }
    Stream noise = noise_root.fork(static_cast<std::uint64_t>(s));
    const double loss = detail::step<T>(tle.params, st, is_tle_trainable, [&](Binder<T>& bd) {
      return vae_loss(bd, c, tgt, b.text, LatentMode::sample, &noise, &lengths);
    });
    log.records.push_back({s, StepKind::tle, loss, "tle", std::move(b.ids)});
    detail::progress("tle", s, plan.tle_steps, loss);
    if ((s + 1) % plan.tle_eval_every == 0 || s + 1 == plan.tle_steps)
      log.heldout.emplace_back(s + 1, heldout_mse(tle, held_targets, held_text));
  }
  return log;
}

namespace detail {

// Shared state of one adaptation run: text and replay samplers and one optimizer.
template <class T>
struct AdaptRun {
  AsrModel<T>& m;
  const Corpus& text;
  const Corpus& source;
  const AdaptPlan& plan;
  Stream root;
  BatchSampler text_batches, replay_batches;
  OptimizerState<T> st;
  StepLog log;
  std::int64_t next_step = 0;

  // `kinds` text-only steps per round, each followed by the replay steps.
  AdaptRun(AsrModel<T>& model, const Corpus& t, const Corpus& s, const AdaptPlan& p, int kinds)
      : m(model), text(t), source(s), plan(p), root(p.seed, 0x7478746f),
        text_batches(t.size(), root.fork(kTextBatches)), replay_batches(s.size(), root.fork(kReplayBatches)) {
    st.config = scheduled(p.adapt_opt, p, static_cast<std::int64_t>(p.text_steps) * kinds * (1 + p.replay_ratio));
  }

  void record(StepKind k, double loss, const char* groups, std::vector<std::string> ids) {
    log.records.push_back({next_step++, k, loss, groups, std::move(ids)});
  }

  void replay() {
    for (int r = 0; r < plan.replay_ratio; ++r) {
      auto b = gather(source, replay_batches.next(plan.batch));
      record(StepKind::replay, audio_step(m, st, b.audio, b.text), "enc+dec", std::move(b.ids));
    }
  }

  // Decoder-only step on TLE grids standing in for the encoder output.
  void tle_text(const TleModel<T>& tle, const Batch& b, std::int64_t round) {
    Stream noise = root.fork(kTleNoise).fork(static_cast<std::uint64_t>(round));
    const auto grids = tle_grids(tle, b.text, plan.latent, &noise);
    const double loss = step<T>(m.params, st, is_decoder_param, [&](Binder<T>& bd) {
      return nll_loss(bd, m.config, bd.tape().constant(grids), b.text);
    });
    record(StepKind::tle_text, loss, "dec", b.ids);
  }

  // End-to-end step on synthesized audio for the batch texts.
  void tts_text(const World& w, const Batch& b, std::int64_t round) {
    const Stream r = root.fork(kTtsAudio).fork(static_cast<std::uint64_t>(round));
    std::vector<AudioFeatures> audio;
    for (size_t i = 0; i < b.text.size(); ++i) {
      Stream s = r.fork(i);
      audio.push_back(tts_sim(w, *b.text[i], s));
    }
    std::vector<const AudioFeatures*> ap;
    for (const auto& a : audio) ap.push_back(&a);
    record(StepKind::tts_text, audio_step(m, st, ap, b.text), "enc+dec", b.ids);
  }
};

inline void check_text_corpus(const Corpus& c, const char* what) {
  if (c.items.empty()) throw Error(std::string(what) + ": empty text corpus");
  if (c.has_audio()) throw Error(std::string(what) + ": text-only adaptation corpus must not carry audio");
}

}  // namespace detail

/// Rounds of (tle_text, replay x ratio). The TLE is read-only.
template <class T>
StepLog adapt_text_only(AsrModel<T>& m, const TleModel<T>& tle, const Corpus& text, const Corpus& source,
                        const AdaptPlan& plan) {
  check_plan(plan);
  check_tle_matches(tle.config, m.config);
  detail::check_text_corpus(text, "adapt_text_only");
  detail::require_audio(source, "adapt_text_only");
  detail::AdaptRun<T> run(m, text, source, plan, 1);
  for (std::int64_t r = 0; r < plan.text_steps; ++r) {
    const auto b = detail::gather(text, run.text_batches.next(plan.batch));
    run.tle_text(tle, b, r);
    run.replay();
    detail::progress("tle-adapt", r, plan.text_steps, run.log.records.back().loss);
  }
  return run.log;
}

/// Rounds of (tts_text, replay x ratio).
template <class T>
StepLog adapt_tts(AsrModel<T>& m, const World& w, const Corpus& text, const Corpus& source, const AdaptPlan& plan) {
  check_plan(plan);
  detail::check_text_corpus(text, "adapt_tts");
  detail::require_audio(source, "adapt_tts");
  detail::AdaptRun<T> run(m, text, source, plan, 1);
  for (std::int64_t r = 0; r < plan.text_steps; ++r) {
    const auto b = detail::gather(text, run.text_batches.next(plan.batch));
    run.tts_text(w, b, r);
    run.replay();
    detail::progress("tts-adapt", r, plan.text_steps, run.log.records.back().loss);
  }
  return run.log;
}

/// Rounds of (tle_text, replay x ratio, tts_text, replay x ratio) on one shared text batch.
template <class T>
StepLog adapt_combined(AsrModel<T>& m, const TleModel<T>& tle, const World& w, const Corpus& text,
                       const Corpus& source, const AdaptPlan& plan) {
  check_plan(plan);
  check_tle_matches(tle.config, m.config);
  detail::check_text_corpus(text, "adapt_combined");
  detail::require_audio(source, "adapt_combined");
  detail::AdaptRun<T> run(m, text, source, plan, 2);
  for (std::int64_t r = 0; r < plan.text_steps; ++r) {
    const auto b = detail::gather(text, run.text_batches.next(plan.batch));
    run.tle_text(tle, b, r);
    run.replay();
    run.tts_text(w, b, r);
    run.replay();
    detail::progress("tle+tts-adapt", r, plan.text_steps, run.log.records.back().loss);
  }
  return run.log;
}

/// Dispatches on plan.method; `none` leaves the model untouched.
template <class T>
StepLog adapt(AsrModel<T>& m, const TleModel<T>* tle, const World& w, const Corpus& text, const Corpus& source,
              const AdaptPlan& plan) {
  auto need_tle = [&]() -> const TleModel<T>& {
    if (!tle) throw Error(std::string("adapt: method ") + to_string(plan.method) + " needs a trained TLE");
    return *tle;
  };
  switch (plan.method) {
    case Method::none: return {};
    case Method::tle: return adapt_text_only(m, need_tle(), text, source, plan);
    case Method::tts: return adapt_tts(m, w, text, source, plan);
    case Method::tle_tts: return adapt_combined(m, need_tle(), w, text, source, plan);
  }
  return {};
}

}  // namespace whistle
