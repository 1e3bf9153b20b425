#pragma once

// Left-to-right search over token sequences, independent of the scoring
// model. A scorer maps a set of equal-length prefixes to next-token
// log-probabilities; shallow fusion and toy oracles plug in here.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "whistle/error.hpp"
#include "whistle/world/world.hpp"

namespace whistle {

using Prefixes = std::vector<std::vector<int>>;
using StepScorer = std::function<std::vector<std::vector<double>>(const Prefixes&)>;

struct SearchOptions {
  int beam = 4;
  int max_len = 15;  // emitted tokens after BOS, EOS included
  int bos = kBos;
  int eos = kEos;
  std::vector<int> banned{kPad, kBos};
};

struct Hypothesis {
  std::vector<int> tokens;  // BOS first
  double total = 0.0;       // summed log-score of emitted tokens
  int emitted = 0;

  double normalized() const { return emitted == 0 ? 0.0 : total / emitted; }
};

namespace detail {

inline std::vector<char> allowed_mask(size_t vocab, const SearchOptions& o) {
  std::vector<char> ok(vocab, 1);
  for (int t : o.banned)
    if (t >= 0 && static_cast<size_t>(t) < vocab) ok[static_cast<size_t>(t)] = 0;
  return ok;
}

inline int best_token(const std::vector<double>& lp, const std::vector<char>& ok) {
  int best = -1;
  for (size_t v = 0; v < lp.size(); ++v)
    if (ok[v] && (best < 0 || lp[v] > lp[static_cast<size_t>(best)])) best = static_cast<int>(v);
  if (best < 0) throw Error("search: every token is banned");
  return best;
}

}  // namespace detail

inline Hypothesis greedy_search(const StepScorer& score, const SearchOptions& o) {
  Hypothesis h{{o.bos}, 0.0, 0};
  while (h.emitted < o.max_len) {
    const auto lp = score({h.tokens});
    const int v = detail::best_token(lp.at(0), detail::allowed_mask(lp[0].size(), o));
    h.tokens.push_back(v);
    h.total += lp[0][static_cast<size_t>(v)];
    ++h.emitted;
    if (v == o.eos) break;
  }
  return h;
}

/// Beam search with length normalisation. Each step keeps the `beam` best
/// expansions by raw score; expansions ending in EOS (or reaching max_len)
/// move to the finished set. The greedy continuation is always kept alive, so
/// the result never scores below greedy and beam 1 reproduces greedy exactly.
inline Hypothesis beam_search(const StepScorer& score, const SearchOptions& o) {
  if (o.beam < 1) throw Error("beam_search: beam must be at least 1");
  struct Cand {
    double total;
    size_t parent;
    int token;
  };
  std::vector<Hypothesis> live{{{o.bos}, 0.0, 0}};
  std::vector<Hypothesis> finished;
  long anchor = 0;  // index of the greedy path in `live`, -1 once it finished
  for (int step = 0; step < o.max_len && !live.empty(); ++step) {
    Prefixes prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto lp = score(prefixes);
    const auto ok = detail::allowed_mask(lp.at(0).size(), o);

    std::vector<Cand> cands;
    for (size_t i = 0; i < live.size(); ++i)
      for (size_t v = 0; v < lp[i].size(); ++v)
        if (ok[v]) cands.push_back({live[i].total + lp[i][v], i, static_cast<int>(v)});
    const auto keep = std::min(cands.size(), static_cast<size_t>(o.beam));
    auto better = [](const Cand& a, const Cand& b) {
      if (a.total != b.total) return a.total > b.total;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(), better);
    cands.resize(keep);
    if (anchor >= 0) {
      const auto a = static_cast<size_t>(anchor);
      const int g = detail::best_token(lp[a], ok);
      const bool kept = std::any_of(cands.begin(), cands.end(), [&](const Cand& c) { return c.parent == a && c.token == g; });
      if (!kept) cands.push_back({live[a].total + lp[a][static_cast<size_t>(g)], a, g});
    }

    std::vector<Hypothesis> next;
    long next_anchor = -1;
    for (const auto& c : cands) {
      Hypothesis h = live[c.parent];
      h.tokens.push_back(c.token);
      h.total = c.total;
      ++h.emitted;
      const bool is_anchor = anchor >= 0 && c.parent == static_cast<size_t>(anchor) &&
                             c.token == detail::best_token(lp[c.parent], ok);
      if (c.token == o.eos || h.emitted == o.max_len) {
        finished.push_back(std::move(h));
      } else {
        if (is_anchor) next_anchor = static_cast<long>(next.size());
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    anchor = next_anchor;
  }
  if (finished.empty()) throw Error("beam_search: no hypothesis finished");
  size_t best = 0;
  for (size_t i = 1; i < finished.size(); ++i)
    if (finished[i].normalized() > finished[best].normalized()) best = i;
  return finished[best];
}

}  // namespace whistle
