#pragma once

// End-to-end procedures shared by the command-line tool and the acceptance
// runner: dataset generation, training, adaptation, evaluation and the
// method x corpus x seed matrix.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "whistle/cli/checkpoint.hpp"
#include "whistle/cli/config.hpp"
#include "whistle/world/dataset.hpp"

namespace whistle {

namespace fs = std::filesystem;

inline Dataset generate_dataset(const Config& c) {
  Dataset ds;
  ds.world = build_world(c.world_seed, c.world);
  const auto& n = c.corpora;
  auto add = [&](Domain d, Split s, int count, bool audio) { ds.corpora[corpus_key(d, s)] = sample_corpus(ds.world, d, s, count, audio); };
  add(Domain::source, Split::train, n.source_train, true);
  add(Domain::source, Split::dev, n.source_dev, true);
  add(Domain::source, Split::test, n.source_test, true);
  add(Domain::target, Split::train, n.target_text, false);
  add(Domain::target, Split::dev, n.target_dev, true);
  add(Domain::target, Split::test, n.target_test, true);
  return ds;
}

/// The dataset must come from the same world the config describes.
inline void check_dataset(const Config& c, const Dataset& ds) {
  if (!(ds.world.config == c.world) || ds.world.seed != c.world_seed)
    throw ConfigError("dataset world does not match the config's world section");
  if (ds.world.vocab_size() != c.asr.vocab) throw ConfigError("dataset vocabulary does not match the config");
}

inline AdaptPlan plan_for(const Config& c, std::uint64_t seed, Method m = Method::none) {
  AdaptPlan p = c.adapt;
  p.seed = seed;
  p.method = m;
  return p;
}

inline AsrModel<float> train_base_model(const Config& c, const Dataset& ds, std::uint64_t seed, StepLog* log = nullptr) {
  auto m = init_asr(c.asr, seed);
  auto l = finetune_base(m, ds.get(Domain::source, Split::train), plan_for(c, seed));
  if (log) *log = std::move(l);
  return m;
}

inline TleModel<float> train_tle_model(const Config& c, const Dataset& ds, const AsrModel<float>& base,
                                       std::uint64_t seed, StepLog* log = nullptr) {
  auto t = init_tle(tle_config_for(base.config, ds.world, c.tle), ds.world, seed);
  auto l = train_tle(t, base, ds.get(Domain::source, Split::train), ds.get(Domain::source, Split::dev), plan_for(c, seed));
  if (log) *log = std::move(l);
  return t;
}

inline AsrModel<float> adapt_model(const Config& c, const Dataset& ds, const AsrModel<float>& base,
                                   const TleModel<float>* tle, Method method, std::uint64_t seed,
                                   StepLog* log = nullptr) {
  auto m = base;
  auto l = adapt(m, tle, ds.world, ds.get(Domain::target, Split::train), ds.get(Domain::source, Split::train),
                 plan_for(c, seed, method));
  if (log) *log = std::move(l);
  return m;
}

/// Trigram LM over the target-domain text corpus.
inline TrigramLM target_lm(const Dataset& ds) { return train_trigram(ds.get(Domain::target, Split::train), ds.world.vocab_size()); }

inline nlohmann::ordered_json edits_json(const EditCounts& e) {
  return {{"wer", e.rate()}, {"S", e.substitutions}, {"D", e.deletions}, {"I", e.insertions}, {"n_ref_words", e.ref_words}};
}

inline void write_hypotheses(const EvalReport& r, const World& w, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  auto words = [&](const std::vector<int>& t) {
    std::string s;
    for (int x : t) s += (s.empty() ? "" : " ") + w.token_str(x);
    return s;
  };
  for (const auto& row : r.rows) {
    nlohmann::ordered_json j{{"id", row.id}, {"ref", words(row.reference)}, {"hyp", words(row.hypothesis)}};
    j["edits"] = edits_json(row.edits);
    f << j.dump() << '\n';
  }
}

// ---- matrix ----------------------------------------------------------------

struct MatrixCell {
  std::string method;
  std::string corpus;
  std::uint64_t seed = 0;
  EditCounts edits;
  std::optional<double> gamma;  // shallow-fusion weight chosen on target dev
};

struct MatrixResult {
  std::vector<MatrixCell> cells;
  std::map<std::string, double> seconds;  // wall time per phase, summed over seeds
  // TLE held-out MSE curve per seed, as (step, mse)
  std::map<std::uint64_t, std::vector<std::pair<std::int64_t, double>>> tle_heldout;

  // Mean WER over seeds of one (method, corpus) pair.
  double mean(const std::string& method, const std::string& corpus) const {
    double s = 0;
    int n = 0;
    for (const auto& c : cells)
      if (c.method == method && c.corpus == corpus) s += c.edits.rate(), ++n;
    if (n == 0) throw Error("matrix has no cell for " + method + "/" + corpus);
    return s / n;
  }
};

inline bool has_sf(const std::string& method) { return method == "sf" || method.ends_with("+sf"); }

/// Adaptation behind an evaluation method: "tts+sf" -> tts, "sf" -> none.
inline Method adaptation_of(const std::string& method) {
  if (method == "sf") return Method::none;
  return parse_method(has_sf(method) ? method.substr(0, method.size() - 3) : method);
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline std::string matrix_csv(const MatrixResult& r) {
  std::string out = "method,corpus,seed,wer,S,D,I,n_ref_words\n";
  for (const auto& c : r.cells)
    out += c.method + "," + c.corpus + "," + std::to_string(c.seed) + "," + fixed(c.edits.rate()) + "," +
           std::to_string(c.edits.substitutions) + "," + std::to_string(c.edits.deletions) + "," +
           std::to_string(c.edits.insertions) + "," + std::to_string(c.edits.ref_words) + "\n";
  return out;
}

inline std::string matrix_md(const Config& c, const MatrixResult& r) {
  std::ostringstream s;
  for (const auto& corpus : c.eval.corpora) {
    s << "### " << corpus << " test WER (%)\n\n| method |";
    for (auto seed : c.eval.seeds) s << " seed " << seed << " |";
    s << " mean |\n|---|";
    for (size_t i = 0; i <= c.eval.seeds.size(); ++i) s << "---:|";
    s << "\n";
    for (const auto& m : c.eval.methods) {
      s << "| " << m << " |";
      for (auto seed : c.eval.seeds)
        for (const auto& cell : r.cells)
          if (cell.method == m && cell.corpus == corpus && cell.seed == seed) {
            s << " " << fixed(100 * cell.edits.rate(), 2);
            if (cell.gamma) s << " (γ=" << fixed(*cell.gamma, 2) << ")";
            s << " |";
          }
      s << " " << fixed(100 * r.mean(m, corpus), 2) << " |\n";
    }
    s << "\n";
  }
  return s.str();
}

/// Every (method, corpus, seed) cell of the configured matrix. Checkpoints
/// go to out/seed-N when `out` is non-empty. Results depend only on the
/// config and the dataset.
inline MatrixResult run_matrix(const Config& c, const Dataset& ds, const fs::path& out = {}) {
  check_dataset(c, ds);
  using clock = std::chrono::steady_clock;
  MatrixResult r;
  auto timed = [&](const std::string& phase, auto&& fn) {
    const auto t0 = clock::now();
    auto v = fn();
    r.seconds[phase] += std::chrono::duration<double>(clock::now() - t0).count();
    return v;
  };
  std::vector<Method> needed;
  bool need_tle = false;
  for (const auto& m : c.eval.methods) {
    const Method a = adaptation_of(m);
    if (std::find(needed.begin(), needed.end(), a) == needed.end()) needed.push_back(a);
    need_tle = need_tle || a == Method::tle || a == Method::tle_tts;
  }
  bool need_lm = false;
  for (const auto& m : c.eval.methods) need_lm = need_lm || has_sf(m);
  const std::optional<TrigramLM> lm = need_lm ? std::optional(target_lm(ds)) : std::nullopt;
  const DecodeConfig dc{c.eval.beam, -1};

  for (auto seed : c.eval.seeds) {
    const fs::path dir = out.empty() ? fs::path() : out / ("seed-" + std::to_string(seed));
    if (!dir.empty()) fs::create_directories(dir);
    spdlog::info("seed {}: base training ({} steps)", seed, c.adapt.base_steps);
    const auto base = timed("base", [&] { return train_base_model(c, ds, seed); });
    if (!dir.empty()) save_checkpoint(base, (dir / "base.wtle").string());
    std::optional<TleModel<float>> tle;
    if (need_tle) {
      spdlog::info("seed {}: TLE training ({} steps)", seed, c.adapt.tle_steps);
      StepLog log;
      tle = timed("tle", [&] { return train_tle_model(c, ds, base, seed, &log); });
      r.tle_heldout[seed] = log.heldout;
      if (!dir.empty()) save_checkpoint(*tle, (dir / "tle.wtle").string());
    }
    std::map<Method, AsrModel<float>> models;
    for (Method a : needed) {
      if (a == Method::none) {
        models.emplace(a, base);
        continue;
      }
      spdlog::info("seed {}: adaptation {}", seed, to_string(a));
      models.emplace(a, timed(std::string("adapt ") + to_string(a),
                              [&] { return adapt_model(c, ds, base, tle ? &*tle : nullptr, a, seed); }));
      if (!dir.empty()) save_checkpoint(models.at(a), (dir / (std::string("adapted-") + to_string(a) + ".wtle")).string());
    }
    for (const auto& method : c.eval.methods) {
      const auto& model = models.at(adaptation_of(method));
      std::optional<double> gamma;
      if (has_sf(method)) {
        gamma = timed("gamma search", [&] {
          return gamma_search(model, *lm, ds.get(Domain::target, Split::dev), c.fusion.grid, dc).best_gamma;
        });
      }
      const ScorerWrap wrap = gamma ? fusion_wrap(*lm, *gamma) : ScorerWrap{};
      for (const auto& corpus : c.eval.corpora) {
        const auto& test = ds.get(parse_domain(corpus), Split::test);
        const auto rep = timed("eval", [&] { return evaluate(model, test, dc, wrap); });
        spdlog::info("seed {} {} {}: WER {:.4f}", seed, method, corpus, rep.wer());
        r.cells.push_back({method, corpus, seed, rep.total, gamma});
      }
    }
  }
  std::stable_sort(r.cells.begin(), r.cells.end(), [&](const MatrixCell& a, const MatrixCell& b) {
    auto rank = [](const std::vector<std::string>& v, const std::string& x) { return std::find(v.begin(), v.end(), x) - v.begin(); };
    const auto ka = std::tuple(rank(c.eval.methods, a.method), rank(c.eval.corpora, a.corpus), a.seed);
    const auto kb = std::tuple(rank(c.eval.methods, b.method), rank(c.eval.corpora, b.corpus), b.seed);
    return ka < kb;
  });
  return r;
}

}  // namespace whistle
