#pragma once

#include <vector>

#include "whistle/evalkit/evaluate.hpp"
#include "whistle/lmfusion/trigram.hpp"

namespace whistle {

struct FusionConfig {
  double gamma = 0.0;
  int beam = 4;
  std::vector<double> grid{0.10, 0.25, 0.50, 0.75};
};

inline void check_fusion_config(const FusionConfig& f) {
  if (!(f.gamma >= 0)) throw ConfigError("fusion: gamma must be non-negative");
  if (f.beam < 1) throw ConfigError("fusion: beam must be at least 1");
  if (f.grid.empty()) throw ConfigError("fusion: gamma grid must not be empty");
  for (double g : f.grid)
    if (!(g >= 0)) throw ConfigError("fusion: gamma grid values must be non-negative");
}

inline ScorerWrap fusion_wrap(const TrigramLM& lm, double gamma) {
  return [&lm, gamma](StepScorer s) -> StepScorer { return FusedScorer(std::move(s), lm, gamma); };
}

template <class T>
Transcript fused_decode(const AsrModel<T>& m, const TrigramLM& lm, const AudioFeatures& audio, const FusionConfig& f) {
  check_fusion_config(f);
  return to_transcript(decode(m, audio, DecodeConfig{f.beam, -1}, fusion_wrap(lm, f.gamma)));
}

struct GammaSearch {
  double best_gamma = 0;
  double best_wer = 0;
  std::vector<std::pair<double, double>> table;  // (gamma, dev WER) in grid order
};

/// Dev WER at every grid value; the minimum wins, ties going to the smaller gamma.
template <class T>
GammaSearch gamma_search(const AsrModel<T>& m, const TrigramLM& lm, const Corpus& dev, const std::vector<double>& grid,
                         const DecodeConfig& dc = {}) {
  if (grid.empty()) throw Error("gamma_search: empty grid");
  GammaSearch g;
  for (double gamma : grid) {
    if (!(gamma >= 0)) throw ConfigError("gamma_search: gamma must be non-negative");
    const double w = evaluate(m, dev, dc, fusion_wrap(lm, gamma)).wer();
    g.table.emplace_back(gamma, w);
    if (g.table.size() == 1 || w < g.best_wer || (w == g.best_wer && gamma < g.best_gamma)) {
      g.best_gamma = gamma;
      g.best_wer = w;
    }
  }
  return g;
}

}  // namespace whistle
