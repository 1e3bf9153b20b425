#pragma once

#include <algorithm>
#include <vector>

#include "whistle/error.hpp"
#include "whistle/world/world.hpp"

namespace whistle {

struct EditCounts {
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int ref_words = 0;

  int edits() const { return substitutions + deletions + insertions; }
  double rate() const { return ref_words == 0 ? 0.0 : static_cast<double>(edits()) / ref_words; }
  EditCounts& operator+=(const EditCounts& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    ref_words += o.ref_words;
    return *this;
  }
  bool operator==(const EditCounts&) const = default;
};

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
/// backtrace prefers match/substitution, then deletion, then insertion.
inline EditCounts wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) throw Error("wer: empty reference");
  const size_t n = ref.size(), m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto at = [&](size_t i, size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});

  EditCounts e;
  e.ref_words = static_cast<int>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
      e.substitutions += ref[i - 1] != hyp[j - 1];
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++e.deletions, --i;
    } else {
      ++e.insertions, --j;
    }
  }
  return e;
}

/// Word tokens only: BOS, EOS and PAD are stripped before scoring.
inline std::vector<int> strip_specials(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens)
    if (t != kPad && t != kBos && t != kEos) out.push_back(t);
  return out;
}

}  // namespace whistle
