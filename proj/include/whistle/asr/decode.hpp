#pragma once

#include <vector>

#include "whistle/asr/model.hpp"
#include "whistle/asr/search.hpp"

namespace whistle {

/// Next-token log-probabilities from the recognizer for one encoder grid.
/// Cross-attention keys and values are computed once and reused per step.
template <class T>
class AsrScorer {
 public:
  AsrScorer(const AsrModel<T>& m, const Tensor<T>& grid) : m_(&m) {
    const auto& c = m.config;
    Tape<T> tape(false);
    Binder<T> b(tape, m.params);
    auto kv = cross_kv(b, c, tape.constant(grid.reshaped({1, c.t_enc(), c.h})));
    for (size_t i = 0; i < kv.k.size(); ++i) {
      k_.push_back(kv.k[i].value());
      v_.push_back(kv.v[i].value());
    }
  }

  std::vector<std::vector<double>> operator()(const Prefixes& prefixes) const {
    const auto& c = m_->config;
    const auto n = static_cast<std::int64_t>(prefixes.size());
    const auto L = static_cast<std::int64_t>(prefixes.at(0).size());
    std::vector<int> ids;
    for (const auto& p : prefixes) {
      if (static_cast<std::int64_t>(p.size()) != L) throw Error("scorer: prefixes must share a length");
      ids.insert(ids.end(), p.begin(), p.end());
    }
    Tape<T> tape(false);
    Binder<T> b(tape, m_->params);
    CrossKV<T> kv;
    for (size_t i = 0; i < k_.size(); ++i) {
      kv.k.push_back(tape.constant(repeat(k_[i], n)));
      kv.v.push_back(tape.constant(repeat(v_[i], n)));
    }
    const auto& states = decoder_states(b, c, kv, ids, n).value();
    const auto& W = m_->params.get("dec.out.w");
    const auto& bias = m_->params.get("dec.out.b");
    std::vector<std::vector<double>> out(static_cast<size_t>(n));
    Tensor<T> logits({c.vocab});
    for (std::int64_t r = 0; r < n; ++r) {
      const T* s = states.data() + ((r + 1) * L - 1) * c.h;
      ops::as_mat(logits.data(), 1, c.vocab).noalias() =
          ops::as_mat(const_cast<T*>(s), 1, c.h) * ops::as_mat(W, c.h, c.vocab) + ops::as_mat(bias, 1, c.vocab);
      auto& row = out[static_cast<size_t>(r)];
      row.resize(static_cast<size_t>(c.vocab));
      double mx = -std::numeric_limits<double>::infinity(), z = 0;
      for (T v : logits.values()) mx = std::max(mx, static_cast<double>(v));
      for (T v : logits.values()) z += std::exp(static_cast<double>(v) - mx);
      const double lz = mx + std::log(z);
      for (int v = 0; v < c.vocab; ++v) row[static_cast<size_t>(v)] = static_cast<double>(logits[static_cast<size_t>(v)]) - lz;
    }
    return out;
  }

 private:
  static Tensor<T> repeat(const Tensor<T>& t, std::int64_t n) {
    Shape s = t.shape();
    s[0] = n;
    Tensor<T> out(s);
    for (std::int64_t i = 0; i < n; ++i) std::copy(t.data(), t.data() + t.size(), out.data() + i * static_cast<std::int64_t>(t.size()));
    return out;
  }

  const AsrModel<T>* m_;
  std::vector<Tensor<T>> k_, v_;
};

inline SearchOptions asr_search_options(const AsrConfig& c, int beam, int max_len = -1) {
  SearchOptions o;
  o.beam = beam;
  o.max_len = max_len < 0 ? c.l_max - 1 : std::min(max_len, c.l_max - 1);
  return o;
}

inline Transcript to_transcript(const Hypothesis& h) { return Transcript{h.tokens}; }

template <class T>
Hypothesis decode_greedy(const AsrModel<T>& m, const Tensor<T>& grid, int max_len = -1) {
  AsrScorer<T> s(m, grid);
  return greedy_search(std::cref(s), asr_search_options(m.config, 1, max_len));
}

template <class T>
Hypothesis decode_beam(const AsrModel<T>& m, const Tensor<T>& grid, int beam, int max_len = -1) {
  AsrScorer<T> s(m, grid);
  return beam_search(std::cref(s), asr_search_options(m.config, beam, max_len));
}

}  // namespace whistle
