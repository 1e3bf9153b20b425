#pragma once

#include <functional>
#include <string>
#include <vector>

#include "whistle/asr/decode.hpp"
#include "whistle/evalkit/wer.hpp"

namespace whistle {

struct UtteranceResult {
  std::string id;
  std::vector<int> reference, hypothesis;  // word tokens only
  EditCounts edits;
};

struct EvalReport {
  std::string corpus;
  std::vector<UtteranceResult> rows;
  EditCounts total;

  double wer() const { return total.rate(); }
};

struct DecodeConfig {
  int beam = 4;
  int max_len = -1;  // -1: l_max - 1
};

/// Wraps the recognizer's step scorer, e.g. to add an LM term. Identity when empty.
using ScorerWrap = std::function<StepScorer(StepScorer)>;

template <class T>
Hypothesis decode(const AsrModel<T>& m, const AudioFeatures& audio, const DecodeConfig& dc, const ScorerWrap& wrap = {}) {
  AsrScorer<T> s(m, encode(m, audio));
  StepScorer scorer = std::cref(s);
  if (wrap) scorer = wrap(scorer);
  return beam_search(scorer, asr_search_options(m.config, dc.beam, dc.max_len));
}

/// Decodes every utterance and pools edits over words (micro average).
template <class T>
EvalReport evaluate(const AsrModel<T>& m, const Corpus& c, const DecodeConfig& dc, const ScorerWrap& wrap = {}) {
  if (!c.has_audio()) throw Error(std::string("evaluate: corpus ") + to_string(c.domain) + "-" + to_string(c.split) + " has no audio");
  EvalReport r;
  r.corpus = std::string(to_string(c.domain)) + "-" + to_string(c.split);
  for (const auto& u : c.items) {
    UtteranceResult row;
    row.id = u.id;
    row.reference = strip_specials(u.text.tokens);
    row.hypothesis = strip_specials(decode(m, *u.audio, dc, wrap).tokens);
    row.edits = wer(row.reference, row.hypothesis);
    r.total += row.edits;
    r.rows.push_back(std::move(row));
  }
  return r;
}

}  // namespace whistle
