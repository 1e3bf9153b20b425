#pragma once

// Gradient suite: every catalog op plus both training losses, checked
// against central differences on small random problems.

#include <chrono>

#include "whistle/numerics/op_catalog.hpp"
#include "whistle/tle/tle.hpp"

namespace whistle {

struct GradSuiteRow {
  std::string name;
  int cases = 0;
  size_t coords = 0;
  double max_rel_err = 0;
  double tol = 0;
  bool passed() const { return max_rel_err <= tol; }
};

struct GradSuiteResult {
  std::vector<GradSuiteRow> rows;
  double seconds = 0;
  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const GradSuiteRow& r) { return r.passed(); });
  }
};

namespace detail {

inline AsrConfig grad_asr_config() {
  AsrConfig c;
  c.feat_dim = 3;
  c.n_max = 16;
  c.h = 8;
  c.heads = 2;
  c.ffn = 12;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.vocab = 7;
  c.l_max = 5;
  return c;
}

inline TleConfig grad_tle_config(const World& w) {
  TleConfig c;
  c.vocab = w.vocab_size();
  c.n_phonemes = w.config.n_phonemes;
  c.l_max = 4;
  c.t_enc = 16;
  c.h = 6;
  c.embed = 5;
  c.channels = {4, 5, 6};
  c.latent = 3;
  c.beta = 0.5;
  c.length_head = true;
  return c;
}

}  // namespace detail

/// Runs `cases` randomised probes per op in precision T (tolerance `tol`),
/// then the recognizer NLL and the VAE loss with parameter gradients.
template <class T>
GradSuiteResult gradient_suite(int cases, double tol, std::uint64_t seed = 1234) {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteResult out;
  for (const auto& entry : op_catalog<T>()) {
    Stream rng(seed, std::hash<std::string>{}(entry.name) & 0xffff);
    GradSuiteRow row{entry.name, cases, 0, 0.0, tol};
    for (int c = 0; c < cases; ++c) {
      auto probe = entry.make(rng);
      const auto r = grad_check<T>(probe.fn, probe.inputs, default_fd_delta<T>(), 64, static_cast<std::uint64_t>(c));
      row.max_rel_err = std::max(row.max_rel_err, r.max_rel_err);
      row.coords += r.coords;
    }
    out.rows.push_back(row);
  }

  {
    const auto c = detail::grad_asr_config();
    const auto m = init_asr<T>(c, seed);
    Stream rng(seed, 0x6e6c6c);
    std::vector<AudioFeatures> audio;
    for (int i = 0; i < 2; ++i) {
      AudioFeatures a{Tensor<float>({c.n_max, c.feat_dim}), static_cast<int>(rng.uniform_int(c.n_max / 2, c.n_max))};
      for (std::int64_t f = 0; f < a.valid_len * c.feat_dim; ++f) a.frames[static_cast<size_t>(f)] = static_cast<float>(rng.normal());
      audio.push_back(std::move(a));
    }
    std::vector<Transcript> text{Transcript{{kBos, 3, 5, kEos}}, Transcript{{kBos, 6, kEos}}};
    std::vector<const AudioFeatures*> ap{&audio[0], &audio[1]};
    std::vector<const Transcript*> tp{&text[0], &text[1]};
    std::function<Var<T>(Binder<T>&)> loss = [&](Binder<T>& b) { return audio_nll(b, c, ap, tp); };
    const auto r = grad_check_params(m.params, loss, all_params, default_fd_delta<T>(), 6, seed);
    out.rows.push_back({"loss:nll", 1, r.coords, r.max_rel_err, tol});
  }

  {
    const World w = build_world(seed);
    const auto c = detail::grad_tle_config(w);
    const auto m = init_tle<float>(c, w, seed).template cast<T>();
    std::vector<Transcript> text{Transcript{{kBos, 5, 9, kEos}}, Transcript{{kBos, 40, kEos}}};
    std::vector<const Transcript*> tp{&text[0], &text[1]};
    Stream rng(seed, 0x766165);
    const auto tgt = standard_normal<T>({2, c.t_enc, c.h}, rng);
    const std::vector<int> lens{9, 5};
    std::function<Var<T>(Binder<T>&)> loss = [&](Binder<T>& b) {
      Stream noise(seed, 0x65707321);  // the same draw on every evaluation
      return vae_loss(b, c, tgt, tp, LatentMode::sample, &noise, &lens);
    };
    const auto r = grad_check_params(m.params, loss, is_tle_trainable, default_fd_delta<T>(), 6, seed);
    out.rows.push_back({"loss:vae", 1, r.coords, r.max_rel_err, tol});
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace whistle
