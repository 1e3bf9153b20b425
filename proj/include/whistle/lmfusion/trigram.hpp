#pragma once

// Word trigram LM with renormalised linear interpolation:
//
//   P(w | u v) = (l3 s3 ML3 + l2 s2 ML2 + l1 P1) / (l3 s3 + l2 s2 + l1)
//
// where s_i flags an observed order-i context, ML are unsmoothed maximum
// likelihood estimates and P1 is an add-one unigram over the LM vocabulary.
// Sentences are padded with two BOS and terminated by EOS.

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "whistle/asr/search.hpp"

namespace whistle {

struct TrigramLM {
  std::vector<int> vocab;  // sorted; tokens the LM can predict
  double l3 = 0.6, l2 = 0.3, l1 = 0.1;
  std::map<std::array<int, 3>, std::int64_t> tri;
  std::map<std::array<int, 2>, std::int64_t> bi;
  std::map<int, std::int64_t> uni;
  // Context totals, derived from the tables above.
  std::map<std::array<int, 2>, std::int64_t> tri_ctx;
  std::map<int, std::int64_t> bi_ctx;
  std::int64_t uni_total = 0;

  bool operator==(const TrigramLM& o) const {
    return vocab == o.vocab && l3 == o.l3 && l2 == o.l2 && l1 == o.l1 && tri == o.tri && bi == o.bi && uni == o.uni;
  }

  bool in_vocab(int w) const { return std::binary_search(vocab.begin(), vocab.end(), w); }

  void rebuild_totals() {
    tri_ctx.clear();
    bi_ctx.clear();
    uni_total = 0;
    for (const auto& [k, n] : tri) tri_ctx[{k[0], k[1]}] += n;
    for (const auto& [k, n] : bi) bi_ctx[k[0]] += n;
    for (const auto& [_, n] : uni) uni_total += n;
  }
};

inline void check_lambdas(double l3, double l2, double l1) {
  if (!(l3 > 0 && l2 > 0 && l1 > 0)) throw ConfigError("trigram: interpolation weights must be positive");
}

/// Counts over sentences given as token sequences without BOS/EOS.
inline TrigramLM train_trigram(const std::vector<std::vector<int>>& sentences, std::vector<int> vocab,
                               double l3 = 0.6, double l2 = 0.3, double l1 = 0.1) {
  check_lambdas(l3, l2, l1);
  if (sentences.empty()) throw Error("train_trigram: empty corpus");
  std::sort(vocab.begin(), vocab.end());
  vocab.erase(std::unique(vocab.begin(), vocab.end()), vocab.end());
  TrigramLM lm{vocab, l3, l2, l1, {}, {}, {}, {}, {}, 0};
  if (!lm.in_vocab(kEos)) throw Error("train_trigram: vocabulary must contain EOS");
  for (const auto& s : sentences) {
    int u = kBos, v = kBos;
    for (size_t i = 0; i <= s.size(); ++i) {
      const int w = i < s.size() ? s[i] : kEos;
      if (!lm.in_vocab(w)) throw Error("train_trigram: token " + std::to_string(w) + " outside the LM vocabulary");
      ++lm.tri[{u, v, w}];
      ++lm.bi[{v, w}];
      ++lm.uni[w];
      u = v;
      v = w;
    }
  }
  lm.rebuild_totals();
  return lm;
}

/// LM over the word transcripts of a corpus; vocabulary is EOS plus every word token of the world.
inline TrigramLM train_trigram(const Corpus& c, int vocab_size) {
  std::vector<std::vector<int>> sentences;
  for (const auto& u : c.items) sentences.push_back(u.text.words());
  std::vector<int> vocab{kEos};
  for (int t = kFirstWord; t < vocab_size; ++t) vocab.push_back(t);
  return train_trigram(sentences, vocab);
}

inline double lm_prob(const TrigramLM& lm, int u, int v, int w) {
  if (!lm.in_vocab(w)) throw Error("lm_logprob: token " + std::to_string(w) + " outside the LM vocabulary");
  double num = 0, den = 0;
  if (auto it = lm.tri_ctx.find({u, v}); it != lm.tri_ctx.end()) {
    auto c = lm.tri.find({u, v, w});
    num += lm.l3 * (c == lm.tri.end() ? 0.0 : static_cast<double>(c->second)) / static_cast<double>(it->second);
    den += lm.l3;
  }
  if (auto it = lm.bi_ctx.find(v); it != lm.bi_ctx.end()) {
    auto c = lm.bi.find({v, w});
    num += lm.l2 * (c == lm.bi.end() ? 0.0 : static_cast<double>(c->second)) / static_cast<double>(it->second);
    den += lm.l2;
  }
  auto c = lm.uni.find(w);
  const double n = c == lm.uni.end() ? 0.0 : static_cast<double>(c->second);
  num += lm.l1 * (n + 1.0) / static_cast<double>(lm.uni_total + static_cast<std::int64_t>(lm.vocab.size()));
  den += lm.l1;
  return num / den;
}

inline double lm_logprob(const TrigramLM& lm, int u, int v, int w) { return std::log(lm_prob(lm, u, v, w)); }

inline nlohmann::ordered_json lm_to_json(const TrigramLM& lm) {
  nlohmann::ordered_json j;
  j["vocab"] = lm.vocab;
  j["lambdas"] = {lm.l3, lm.l2, lm.l1};
  auto& t = j["trigrams"] = nlohmann::ordered_json::array();
  for (const auto& [k, n] : lm.tri) t.push_back({k[0], k[1], k[2], n});
  auto& b = j["bigrams"] = nlohmann::ordered_json::array();
  for (const auto& [k, n] : lm.bi) b.push_back({k[0], k[1], n});
  auto& u = j["unigrams"] = nlohmann::ordered_json::array();
  for (const auto& [k, n] : lm.uni) u.push_back({k, n});
  return j;
}

inline TrigramLM lm_from_json(const nlohmann::json& j) {
  try {
    TrigramLM lm;
    lm.vocab = j.at("vocab").get<std::vector<int>>();
    const auto l = j.at("lambdas").get<std::vector<double>>();
    if (l.size() != 3) throw Error("lm: expected three interpolation weights");
    lm.l3 = l[0], lm.l2 = l[1], lm.l1 = l[2];
    check_lambdas(lm.l3, lm.l2, lm.l1);
    auto count = [](const nlohmann::json& x) {
      const auto n = x.get<std::int64_t>();
      if (n < 0) throw Error("lm: negative count");
      return n;
    };
    for (const auto& r : j.at("trigrams")) lm.tri[{r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()}] = count(r.at(3));
    for (const auto& r : j.at("bigrams")) lm.bi[{r.at(0).get<int>(), r.at(1).get<int>()}] = count(r.at(2));
    for (const auto& r : j.at("unigrams")) lm.uni[r.at(0).get<int>()] = count(r.at(1));
    if (!std::is_sorted(lm.vocab.begin(), lm.vocab.end())) throw Error("lm: vocabulary must be sorted");
    lm.rebuild_totals();
    return lm;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("lm: malformed json: ") + e.what());
  }
}

inline void save_lm(const TrigramLM& lm, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write LM '" + path + "'");
  f << lm_to_json(lm).dump(1) << '\n';
}

inline TrigramLM load_lm(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read LM '" + path + "'");
  try {
    return lm_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("lm '" + path + "': " + e.what());
  }
}

/// Shallow fusion: adds gamma * log P_lm to every in-vocabulary token score.
/// Tokens the LM cannot predict keep their recognizer score.
class FusedScorer {
 public:
  FusedScorer(StepScorer asr, const TrigramLM& lm, double gamma) : asr_(std::move(asr)), lm_(&lm), gamma_(gamma) {
    if (!(gamma >= 0)) throw ConfigError("fusion: gamma must be non-negative");
  }

  std::vector<std::vector<double>> operator()(const Prefixes& prefixes) {
    auto out = asr_(prefixes);
    for (size_t i = 0; i < prefixes.size(); ++i) {
      const auto& p = prefixes[i];
      const int u = p.size() >= 2 ? p[p.size() - 2] : kBos;
      const int v = p.back();
      const auto& lp = context(u, v, out[i].size());
      for (size_t w = 0; w < out[i].size(); ++w)
        if (!std::isnan(lp[w])) out[i][w] += gamma_ * lp[w];
    }
    return out;
  }

 private:
  const std::vector<double>& context(int u, int v, size_t vocab) {
    auto [it, fresh] = cache_.try_emplace({u, v});
    if (fresh) {
      it->second.assign(vocab, std::nan(""));
      for (int w : lm_->vocab)
        if (static_cast<size_t>(w) < vocab) it->second[static_cast<size_t>(w)] = lm_logprob(*lm_, u, v, w);
    }
    return it->second;
  }

  StepScorer asr_;
  const TrigramLM* lm_;
  double gamma_;
  std::map<std::array<int, 2>, std::vector<double>> cache_;
};

}  // namespace whistle
