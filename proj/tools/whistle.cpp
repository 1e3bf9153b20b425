// whistle: command-line front end for the lab.
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <cstdlib>
#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "whistle/cli/gradsuite.hpp"
#include "whistle/cli/manifest.hpp"
#include "whistle/cli/pipeline.hpp"

using namespace whistle;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string preset = "default";
  std::string command_line;
};

struct UsageError : Error {
  using Error::Error;
};

Config resolve_config(const Globals& g) {
  Config base = g.preset == "smoke" ? smoke_config() : default_config();
  return g.config_path.empty() ? base : load_config(g.config_path, base);
}

std::uint64_t run_seed(const Globals& g, const Config& c) { return g.seed.value_or(c.adapt.seed); }

fs::path prepare_out(const Globals& g, const Config& c) {
  const fs::path out(g.out);
  fs::create_directories(out);
  detail::write_file_atomic((out / "config.json").string(), canonical_config(c));
  return out;
}

Dataset load_data(const std::string& dir, const Config& c) {
  auto ds = read_dataset(dir);
  check_dataset(c, ds);
  return ds;
}

void write_log(const StepLog& log, const fs::path& path, Manifest& man) {
  write_steplog(log, path.string());
  man.output(path);
}

int cmd_gen_data(const Globals& g) {
  const auto c = resolve_config(g);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {});
  const auto ds = generate_dataset(c);
  write_dataset(out, ds);
  for (const auto& f : {"world.json", "manifest.jsonl", "features.bin"}) man.output(out / f);
  for (const auto& [key, corpus] : ds.corpora) man.metrics()[key] = corpus.size();
  man.metrics()["vocab"] = ds.world.vocab_size();
  man.metrics()["target_only_words"] = ds.world.target_only.size();
  man.write(out);
  spdlog::info("wrote dataset to {}", out.string());
  return 0;
}

int cmd_train_base(const Globals& g, const std::string& data) {
  const auto c = resolve_config(g);
  const auto seed = run_seed(g, c);
  const auto ds = load_data(data, c);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {seed});
  StepLog log;
  const auto m = train_base_model(c, ds, seed, &log);
  save_checkpoint(m, (out / "base.wtle").string());
  man.output(out / "base.wtle");
  write_log(log, out / "base.steplog.jsonl", man);
  const auto dev = evaluate(m, ds.get(Domain::source, Split::dev), DecodeConfig{c.eval.beam, -1});
  man.metrics()["source_dev"] = edits_json(dev.total);
  man.write(out);
  spdlog::info("base model: source dev WER {:.4f}", dev.wer());
  return 0;
}

int cmd_train_tle(const Globals& g, const std::string& data, const std::string& base_path) {
  const auto c = resolve_config(g);
  const auto seed = run_seed(g, c);
  const auto ds = load_data(data, c);
  const auto base = load_asr(base_path);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {seed});
  StepLog log;
  const auto tle = train_tle_model(c, ds, base, seed, &log);
  save_checkpoint(tle, (out / "tle.wtle").string());
  man.output(out / "tle.wtle");
  write_log(log, out / "tle.steplog.jsonl", man);
  auto& h = man.metrics()["heldout_mse"] = nlohmann::ordered_json::array();
  for (const auto& [s, mse] : log.heldout) h.push_back({s, mse});
  man.write(out);
  if (!log.heldout.empty())
    spdlog::info("TLE held-out MSE {:.4f} -> {:.4f}", log.heldout.front().second, log.heldout.back().second);
  return 0;
}

int cmd_adapt(const Globals& g, const std::string& data, const std::string& base_path, const std::string& tle_path,
              const std::string& method_name) {
  const auto c = resolve_config(g);
  const auto seed = run_seed(g, c);
  const Method method = parse_method(method_name);
  const bool needs_tle = method == Method::tle || method == Method::tle_tts;
  if (needs_tle && tle_path.empty()) throw UsageError("adapt --method " + method_name + " needs --tle");
  const auto ds = load_data(data, c);
  const auto base = load_asr(base_path);
  std::optional<TleModel<float>> tle;
  if (needs_tle) tle = load_tle(tle_path);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {seed});
  StepLog log;
  const auto m = adapt_model(c, ds, base, tle ? &*tle : nullptr, method, seed, &log);
  save_checkpoint(m, (out / "adapted.wtle").string());
  man.output(out / "adapted.wtle");
  write_log(log, out / "adapt.steplog.jsonl", man);
  man.metrics()["method"] = to_string(method);
  man.metrics()["text_steps"] = log.count(StepKind::tle_text) + log.count(StepKind::tts_text);
  man.metrics()["replay_steps"] = log.count(StepKind::replay);
  man.write(out);
  return 0;
}

struct EvalArgs {
  std::string data, model, corpus = "target", split = "test";
  bool sf = false, grid = false;
  std::optional<double> gamma;
};

// Loads only the recognizer checkpoint; no TLE is needed at inference.
int cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto c = resolve_config(g);
  if (a.gamma && !a.sf) throw UsageError("--gamma requires --sf");
  if (a.sf && a.grid) throw UsageError("--sf and --gamma-grid are exclusive");
  const auto ds = load_data(a.data, c);
  const auto m = load_asr(a.model);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {});
  const DecodeConfig dc{c.eval.beam, -1};
  const auto& corpus = ds.get(parse_domain(a.corpus), parse_split(a.split));
  std::optional<TrigramLM> lm;
  std::optional<double> gamma;
  if (a.sf || a.grid) {
    lm = target_lm(ds);
    save_lm(*lm, (out / "lm.json").string());
    man.output(out / "lm.json");
  }
  if (a.sf) gamma = a.gamma.value_or(c.fusion.gamma);
  if (a.grid) {
    const auto gs = gamma_search(m, *lm, ds.get(Domain::target, Split::dev), c.fusion.grid, dc);
    auto& t = man.metrics()["gamma_table"] = nlohmann::ordered_json::array();
    for (const auto& [gm, w] : gs.table) t.push_back({{"gamma", gm}, {"dev_wer", w}});
    gamma = gs.best_gamma;
  }
  if (gamma && !(*gamma >= 0)) throw ConfigError("gamma must be non-negative");
  const auto rep = evaluate(m, corpus, dc, gamma ? fusion_wrap(*lm, *gamma) : ScorerWrap{});
  write_hypotheses(rep, ds.world, out / "hyps.jsonl");
  man.output(out / "hyps.jsonl");
  man.metrics()["corpus"] = rep.corpus;
  man.metrics()["shallow_fusion"] = gamma.has_value();
  if (gamma) man.metrics()["gamma"] = *gamma;
  man.metrics()["result"] = edits_json(rep.total);
  man.write(out);
  std::cout << rep.corpus << " WER " << fixed(rep.wer(), 4) << " (S " << rep.total.substitutions << " D "
            << rep.total.deletions << " I " << rep.total.insertions << " N " << rep.total.ref_words << ")\n";
  return 0;
}

int cmd_run_matrix(const Globals& g, const std::string& data) {
  auto c = resolve_config(g);
  if (g.seed) c.eval.seeds = {*g.seed};
  const auto ds = data.empty() ? generate_dataset(c) : load_data(data, c);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, c.eval.seeds);
  const auto r = run_matrix(c, ds, out);
  detail::write_file_atomic((out / "matrix.csv").string(), matrix_csv(r));
  detail::write_file_atomic((out / "matrix.md").string(), matrix_md(c, r));
  man.output(out / "matrix.csv");
  man.output(out / "matrix.md");
  for (const auto& m : c.eval.methods)
    for (const auto& k : c.eval.corpora) man.metrics()["mean_wer"][m + "/" + k] = r.mean(m, k);
  for (const auto& [phase, s] : r.seconds) man.metrics()["seconds"][phase] = s;
  man.write(out);
  std::cout << matrix_md(c, r);
  return 0;
}

int cmd_grad_check(const Globals& g, int cases, const std::string& precision) {
  const auto c = resolve_config(g);
  const auto out = prepare_out(g, c);
  Manifest man(g.command_line, c, {});
  const std::uint64_t seed = g.seed.value_or(1234);
  const auto r = precision == "double" ? gradient_suite<double>(cases, 1e-5, seed) : gradient_suite<float>(cases, 1e-2, seed);
  for (const auto& row : r.rows) {
    std::cout << (row.passed() ? "ok   " : "FAIL ") << row.name << " max_rel_err " << row.max_rel_err << " (tol "
              << row.tol << ", " << row.coords << " coords)\n";
    man.metrics()["max_rel_err"][row.name] = row.max_rel_err;
  }
  man.metrics()["passed"] = r.passed();
  man.metrics()["seconds"] = r.seconds;
  man.write(out);
  std::cout << (r.passed() ? "all gradients match" : "gradient mismatch") << " in " << fixed(r.seconds, 1) << " s\n";
  return r.passed() ? 0 : 2;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("whistle");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  const char* env = std::getenv("WHISTLE_LOG");
  if (!env || !*env) return spdlog::set_level(spdlog::level::info);
  const auto level = spdlog::level::from_str(env);
  // from_str maps unknown names to off; only accept that for "off" itself
  if (level == spdlog::level::off && std::string(env) != "off")
    throw UsageError(std::string("WHISTLE_LOG: unknown level '") + env + "'");
  spdlog::set_level(level);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"whistle: text-only domain adaptation lab"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  for (int i = 0; i < argc; ++i) g.command_line += (i ? " " : "") + std::string(argv[i]);
  app.add_option("--config", g.config_path, "JSON config overlaid on the preset")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Training seed (run-matrix: the only seed)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--preset", g.preset, "Config preset")->check(CLI::IsMember({"default", "smoke"}));

  std::string data, base, tle, method, precision = "double";
  int cases = 20;
  EvalArgs ea;

  auto* gen = app.add_subcommand("gen-data", "Build the world and sample every corpus into --out");
  auto* tb = app.add_subcommand("train-base", "Train the recognizer on source audio");
  tb->add_option("--data", data, "Dataset directory")->required();
  auto* tt = app.add_subcommand("train-tle", "Train the text-to-latent encoder against a frozen base");
  tt->add_option("--data", data, "Dataset directory")->required();
  tt->add_option("--base", base, "Base checkpoint")->required()->check(CLI::ExistingFile);
  auto* ad = app.add_subcommand("adapt", "Adapt a base model to the target domain");
  ad->add_option("--data", data, "Dataset directory")->required();
  ad->add_option("--base", base, "Base checkpoint")->required()->check(CLI::ExistingFile);
  ad->add_option("--tle", tle, "TLE checkpoint (methods tle, tle+tts)")->check(CLI::ExistingFile);
  ad->add_option("--method", method, "none, tle, tts or tle+tts")->required()->check(CLI::IsMember({"none", "tle", "tts", "tle+tts"}));
  auto* ev = app.add_subcommand("eval", "Decode a test corpus and report WER");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--model", ea.model, "Recognizer checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", ea.corpus, "target or source")->check(CLI::IsMember({"target", "source"}));
  ev->add_option("--split", ea.split, "test or dev")->check(CLI::IsMember({"test", "dev"}));
  ev->add_flag("--sf", ea.sf, "Shallow fusion with the target trigram LM");
  ev->add_option("--gamma", ea.gamma, "Fusion weight (with --sf)");
  ev->add_flag("--gamma-grid", ea.grid, "Pick gamma on target dev from the config grid");
  auto* rm = app.add_subcommand("run-matrix", "Train, adapt and evaluate every configured method and seed");
  rm->add_option("--data", data, "Dataset directory (default: generate in memory)");
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every op and both losses");
  gc->add_option("--cases", cases, "Random cases per op")->check(CLI::PositiveNumber);
  gc->add_option("--precision", precision, "double or float")->check(CLI::IsMember({"double", "float"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    setup_logging();
    if (gen->parsed()) return cmd_gen_data(g);
    if (tb->parsed()) return cmd_train_base(g, data);
    if (tt->parsed()) return cmd_train_tle(g, data, base);
    if (ad->parsed()) return cmd_adapt(g, data, base, tle, method);
    if (ev->parsed()) return cmd_eval(g, ea);
    if (rm->parsed()) return cmd_run_matrix(g, data);
    if (gc->parsed()) return cmd_grad_check(g, cases, precision);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
