#pragma once

// The glossmt command line: prepare, train, translate, evaluate, search and
// report. run_cli is callable in-process; it never calls exit().

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "glossmt/checkpoint.hpp"
#include "glossmt/data.hpp"
#include "glossmt/error.hpp"
#include "glossmt/hyperparams.hpp"
#include "glossmt/kv.hpp"
#include "glossmt/metrics.hpp"
#include "glossmt/search.hpp"
#include "glossmt/train.hpp"

namespace glossmt {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitData = 2, kExitConfig = 3, kExitCompatibility = 4 };

namespace cli {

namespace fs = std::filesystem;

inline std::vector<std::string> read_text_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Settings shared by every subcommand: an optional key-value file whose
// entries are overridden by explicitly given flags.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;

  void attach(CLI::App* app, bool out_required) {
    app->add_option("--config", config, "key = value configuration file");
    app->add_option("--seed", seed, "seed for every source of randomness");
    auto* o = app->add_option("--out", out, "output directory");
    if (out_required) o->required();
  }

  KeyValues load() const {
    KeyValues kv;
    if (!config.empty()) {
      if (!fs::exists(config)) throw DataError("config file not found: " + config);
      kv = KeyValues::load(config);
    }
    if (seed) kv.set("seed", std::to_string(*seed));
    return kv;
  }
};

// ---- prepare --------------------------------------------------------------

struct PrepareArgs {
  Common common;
  std::string manifest;
  std::optional<long long> min_freq;
  bool compare_phoenix = false;
};

inline int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  KeyValues kv = a.common.load();
  if (!a.manifest.empty()) kv.set("manifest", a.manifest);
  if (!kv.has("manifest")) throw ConfigError("prepare: --manifest is required");
  const fs::path manifest_path = fs::absolute(kv.get("manifest"));
  if (a.min_freq) kv.set("min_freq", std::to_string(*a.min_freq));
  const long long min_freq = kv.get_int("min_freq", 1);
  if (min_freq < 1) throw ConfigError("prepare: min_freq must be >= 1");

  const Manifest manifest = Manifest::load(manifest_path);
  CorpusStatistics stats;
  ParallelCorpus train;
  for (std::size_t i = 0; i < Manifest::kSplits.size(); ++i) {
    ParallelCorpus c = manifest.corpus(Manifest::kSplits[i]);
    stats.add(i, c);
    if (i == 0) train = std::move(c);
  }
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  build_vocab(train, Side::kSource, static_cast<std::size_t>(min_freq)).save(dir / "src.vocab");
  build_vocab(train, Side::kTarget, static_cast<std::size_t>(min_freq)).save(dir / "tgt.vocab");
  const std::string table = stats.table();
  write_text(dir / "statistics.txt", table);
  KeyValues prepared;
  prepared.set("manifest", manifest_path.string());
  prepared.set("min_freq", std::to_string(min_freq));
  write_text(dir / "prepared.txt", prepared.to_string());
  out << table;
  if (a.compare_phoenix) {
    const auto diffs = stats.compare(CorpusStatistics::phoenix14t());
    if (diffs.empty()) out << "statistics match the reference PHOENIX14T counts\n";
    for (const auto& d : diffs) out << "mismatch: " << d << '\n';
  }
  return kExitOk;
}

// Corpora and vocabularies from a directory written by `prepare`.
inline CorpusBundle load_prepared(const fs::path& data_dir, const std::string& manifest_override) {
  const fs::path prepared = data_dir / "prepared.txt";
  if (!fs::exists(prepared)) throw DataError("no prepared data in " + data_dir.string() + " (run prepare first)");
  const KeyValues kv = KeyValues::load(prepared);
  const Manifest m = Manifest::load(manifest_override.empty() ? fs::path(kv.get("manifest")) : fs::path(manifest_override));
  CorpusBundle b;
  b.train = m.corpus("train");
  b.dev = m.corpus("dev");
  b.src_vocab = Vocabulary::load(data_dir / "src.vocab");
  b.tgt_vocab = Vocabulary::load(data_dir / "tgt.vocab");
  return b;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data;
  std::string manifest;
  std::optional<long long> max_steps, eval_every, patience, precision;
  std::optional<double> stop_at;
  std::optional<std::string> selection;
  std::vector<std::string> sets;
  std::map<std::string, double> hp_flags;
  bool strict_grid = false;
};

inline KeyValues train_defaults() {
  KeyValues kv;
  HyperParams{}.store(kv);
  const TrainConfig c;
  kv.set("max_steps", std::to_string(c.max_steps));
  kv.set("eval_every", std::to_string(c.eval_every));
  kv.set("patience", std::to_string(c.patience));
  kv.set("selection", to_string(c.selection));
  kv.set("seed", std::to_string(c.seed));
  kv.set("clip_norm", format_double(c.clip_norm));
  kv.set("precision", "64");
  kv.set("strict_grid", "0");
  return kv;
}

inline void apply_sets(KeyValues& kv, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
  }
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  KeyValues kv = train_defaults();
  kv.merge(a.common.load());
  if (!a.data.empty()) kv.set("data", a.data);
  if (!a.manifest.empty()) kv.set("manifest", a.manifest);
  if (a.max_steps) kv.set("max_steps", std::to_string(*a.max_steps));
  if (a.eval_every) kv.set("eval_every", std::to_string(*a.eval_every));
  if (a.patience) kv.set("patience", std::to_string(*a.patience));
  if (a.precision) kv.set("precision", std::to_string(*a.precision));
  if (a.selection) kv.set("selection", *a.selection);
  if (a.stop_at) kv.set("stop_at", format_double(*a.stop_at));
  if (a.strict_grid) kv.set("strict_grid", "1");
  for (const auto& [name, value] : a.hp_flags) kv.set(name, format_double(value));
  apply_sets(kv, a.sets);
  kv.set("out", a.common.out);
  const KeyValues known = train_defaults();
  for (const auto& [key, value] : kv.entries()) {
    if (!known.has(key) && key != "data" && key != "manifest" && key != "out" && key != "stop_at") {
      throw ConfigError("train: unknown configuration key '" + key + "'");
    }
  }

  HyperParams hp;
  hp.apply(kv);
  hp.validate();
  if (kv.get_int("strict_grid") != 0) SearchSpace::explored_grid().check(hp);
  TrainConfig config;
  const long long max_steps = kv.get_int("max_steps"), eval_every = kv.get_int("eval_every"),
                  patience = kv.get_int("patience");
  if (max_steps < 1 || eval_every < 1 || patience < 0) {
    throw ConfigError("train: max_steps and eval_every must be >= 1, patience >= 0");
  }
  config.max_steps = static_cast<std::size_t>(max_steps);
  config.eval_every = static_cast<std::size_t>(eval_every);
  config.patience = static_cast<std::size_t>(patience);
  config.selection = parse_selection_metric(kv.get("selection"));
  config.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  config.clip_norm = kv.get_double("clip_norm");
  if (kv.has("stop_at")) config.stop_at = kv.get_double("stop_at");
  config.run_dir = a.common.out;
  const long long precision = kv.get_int("precision");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  if (!kv.has("data")) throw ConfigError("train: --data (a prepared directory) is required");

  const CorpusBundle data = load_prepared(kv.get("data"), kv.get_or("manifest", ""));
  fs::create_directories(config.run_dir);
  write_text(config.run_dir / "config.txt", kv.to_string());
  config.on_row = [&out](const MetricsRow& row) {
    if (!row.is_evaluation()) return;
    out << "step " << row.step << " dev_accuracy " << format_double(*row.dev_accuracy) << " dev_perplexity "
        << format_double(*row.dev_perplexity) << " BLEU-4 " << format_double((*row.dev_bleu)[3]) << " ROUGE-L-F1 "
        << format_double(*row.dev_rouge) << '\n';
  };
  const TrainResult r =
      precision == 64 ? train_model<double>(hp, data, config) : train_model<float>(hp, data, config);
  out << "steps " << r.steps << "\nbest " << r.best_record.metric << ' ' << format_double(r.best_record.value)
      << " at step " << r.best_record.step << '\n';
  return kExitOk;
}

// ---- translate ------------------------------------------------------------

struct TranslateArgs {
  Common common;
  std::string checkpoint, input, output, src_vocab;
  std::optional<long long> beam;
  long long max_len = 0;
};

inline int cmd_translate(const TranslateArgs& a, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  if (!a.src_vocab.empty()) {
    const Vocabulary v = Vocabulary::load(a.src_vocab);
    if (v.hash() != ckpt.src_vocab.hash()) {
      throw CompatibilityError("translate: source vocabulary " + a.src_vocab + " does not match the checkpoint's");
    }
  }
  if (a.beam && *a.beam < 1) throw ConfigError("translate: --beam must be >= 1");
  if (a.max_len < 0) throw ConfigError("translate: --max-len must be >= 0");
  const auto model = ckpt.to_model<double>();
  const auto lines = read_text_lines(a.input);

  std::string text;
  for (const auto& line : lines) {
    const Sentence words = tokenize(line);
    if (!words.empty()) {
      const TokenIds src = ckpt.src_vocab.encode(words);
      const std::size_t limit = a.max_len > 0 ? static_cast<std::size_t>(a.max_len) : decode_limit(src.size());
      const TokenIds hyp = a.beam ? model.beam_decode(src, static_cast<std::size_t>(*a.beam), limit)
                                  : model.greedy_decode(src, limit);
      text += detokenize(ckpt.tgt_vocab.decode(hyp));
    }
    text += '\n';
  }
  if (a.output.empty()) {
    out << text;
  } else {
    write_text(a.output, text);
  }
  return kExitOk;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
  Common common;
  std::string hyp, ref, csv;
};

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto hyp_lines = read_text_lines(a.hyp);
  const auto ref_lines = read_text_lines(a.ref);
  if (hyp_lines.size() != ref_lines.size()) {
    throw DataError("evaluate: " + a.hyp + " has " + std::to_string(hyp_lines.size()) + " lines but " + a.ref +
                    " has " + std::to_string(ref_lines.size()));
  }
  std::vector<Sentence> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(tokenize(l));
  for (const auto& l : ref_lines) refs.push_back(tokenize(l));
  const ScoreReport r = evaluate(hyps, refs);
  out << r.to_key_values();
  fs::path csv = a.csv;
  if (csv.empty() && !a.common.out.empty()) csv = fs::path(a.common.out) / "scores.csv";
  if (!csv.empty()) write_text(csv, ScoreReport::csv_header() + "\n" + r.csv_row() + "\n");
  return kExitOk;
}

// ---- search ---------------------------------------------------------------

struct SearchArgs {
  Common common;
  std::string data, objective;
  std::optional<long long> max_passes, workers, max_trials;
  std::optional<double> tolerance;
};

inline int cmd_search(const SearchArgs& a, std::ostream& out) {
  KeyValues kv = a.common.load();
  if (!a.objective.empty()) kv.set("objective", a.objective);
  if (a.max_passes) kv.set("max_passes", std::to_string(*a.max_passes));
  if (a.workers) kv.set("workers", std::to_string(*a.workers));
  if (a.tolerance) kv.set("tolerance", format_double(*a.tolerance));
  if (!a.data.empty()) kv.set("data", a.data);
  SearchConfig sc = SearchConfig::from(kv);
  if (kv.get_int("max_passes", 1) < 1) throw ConfigError("search: max_passes must be >= 1");
  if (a.max_trials && *a.max_trials < 1) throw ConfigError("search: --max-trials must be >= 1");

  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  KeyValues effective = sc.to_key_values();
  if (kv.has("data")) effective.set("data", kv.get("data"));
  write_text(dir / "search_config.txt", effective.to_string());
  sc.options.ledger = dir / "ledger.csv";
  if (a.max_trials) sc.options.max_new_trials = static_cast<std::size_t>(*a.max_trials);

  std::optional<CorpusBundle> data;
  Trainer trainer;
  if (sc.objective == "synthetic") {
    trainer = SyntheticObjective{}.trainer();
  } else {
    if (!kv.has("data")) throw ConfigError("search: the train objective needs data = <prepared dir>");
    data = load_prepared(kv.get("data"), "");
    TrainConfig base;
    base.max_steps = sc.max_steps;
    base.eval_every = sc.eval_every;
    base.patience = sc.patience;
    base.selection = sc.options.selection;
    trainer = training_trainer(*data, base, dir / "trials");
  }
  const SearchState state = run_search(sc.initial, sc.space, trainer, sc.options);
  write_text(dir / "report.csv", search_report(state));
  if (state.interrupted) {
    out << "interrupted after " << state.new_trials << " new trials; rerun to resume from " << sc.options.ledger.string()
        << '\n';
    return kExitOk;
  }
  write_text(dir / "best.txt", architecture_table(state.incumbent));
  out << "passes " << state.pass << (state.converged ? " (converged)" : " (pass limit reached)") << '\n'
      << "trials " << state.history.size() << '\n'
      << to_string(sc.options.selection) << ' ' << format_double(state.incumbent_score) << "\n\n"
      << architecture_table(state.incumbent);
  return kExitOk;
}

// ---- report ---------------------------------------------------------------

struct ReportArgs {
  Common common;
  std::string search_dir;
  long long top = 0;
};

inline int cmd_report(const ReportArgs& a, std::ostream& out) {
  const fs::path dir = a.search_dir.empty() ? fs::path(a.common.out) : fs::path(a.search_dir);
  if (dir.empty()) throw ConfigError("report: --search-dir is required");
  const fs::path ledger = dir / "ledger.csv";
  if (!fs::exists(ledger)) throw DataError("report: no ledger at " + ledger.string());
  SearchState state;
  load_ledger(state, ledger);
  const auto rows = ranked_trials(state);
  out << "rank,score";
  for (auto name : HyperParams::kGridNames) out << ',' << name;
  out << ",status\n";
  const std::size_t n = a.top > 0 ? std::min(rows.size(), static_cast<std::size_t>(a.top)) : rows.size();
  for (std::size_t i = 0; i < n; ++i) {
    out << i + 1 << ',' << format_double(rows[i]->score);
    for (auto name : HyperParams::kGridNames) out << ',' << format_double(rows[i]->hp.get(name));
    out << ',' << (rows[i]->failed ? "failed" : "ok") << '\n';
  }
  out << '\n' << architecture_table(rows.front()->hp);
  return kExitOk;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"glossmt: text-to-gloss transformer training and evaluation"};
  app.require_subcommand(1);

  cli::PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "build vocabularies and corpus statistics from a manifest");
  prep.common.attach(p, true);
  p->add_option("--manifest", prep.manifest, "manifest listing train/dev/test .src/.tgt files");
  p->add_option("--min-freq", prep.min_freq, "minimum token frequency");
  p->add_flag("--compare-phoenix14t", prep.compare_phoenix, "report differences from the reference PHOENIX14T counts");

  cli::TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and write checkpoints and metrics.csv");
  tr.common.attach(t, true);
  t->add_option("--data", tr.data, "directory written by prepare");
  t->add_option("--manifest", tr.manifest, "override the manifest recorded by prepare");
  t->add_option("--max-steps", tr.max_steps);
  t->add_option("--eval-every", tr.eval_every);
  t->add_option("--patience", tr.patience);
  t->add_option("--selection", tr.selection, "ROUGE, BLEU1 or dev_accuracy");
  t->add_option("--stop-at", tr.stop_at, "stop once the selection score reaches this value");
  t->add_option("--precision", tr.precision, "64 or 32");
  t->add_option("--set", tr.sets, "key=value override, repeatable");
  t->add_flag("--strict-grid", tr.strict_grid, "reject hyper-parameters outside the search grid");
  std::map<std::string, std::optional<double>> hp_opts;
  for (auto name : HyperParams::kGridNames) {
    std::string flag = "--" + std::string(name);
    std::replace(flag.begin(), flag.end(), '_', '-');
    t->add_option(flag, hp_opts[std::string(name)])->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  t->add_option("--lr-scale", hp_opts["lr_scale"])->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  cli::TranslateArgs tl;
  auto* l = app.add_subcommand("translate", "decode an input file with a checkpoint");
  tl.common.attach(l, false);
  l->add_option("--checkpoint", tl.checkpoint)->required();
  l->add_option("--input", tl.input)->required();
  l->add_option("--output", tl.output, "output file (default: stdout)");
  l->add_option("--beam", tl.beam, "beam width (default: greedy)");
  l->add_option("--max-len", tl.max_len, "decode limit (default: 2 * source length + 10)");
  l->add_option("--src-vocab", tl.src_vocab, "vocabulary file that must match the checkpoint");

  cli::EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "score hypotheses against references");
  ev.common.attach(e, false);
  e->add_option("--hyp", ev.hyp)->required();
  e->add_option("--ref", ev.ref)->required();
  e->add_option("--csv", ev.csv, "write the score row to this CSV file");

  cli::SearchArgs se;
  auto* s = app.add_subcommand("search", "coordinate-descent architecture search");
  se.common.attach(s, true);
  s->add_option("--objective", se.objective, "train or synthetic");
  s->add_option("--data", se.data, "directory written by prepare");
  s->add_option("--max-passes", se.max_passes);
  s->add_option("--workers", se.workers);
  s->add_option("--tolerance", se.tolerance);
  s->add_option("--max-trials", se.max_trials, "stop after this many new trials (resume by rerunning)");

  cli::ReportArgs rp;
  auto* r = app.add_subcommand("report", "rank the trials of a search ledger");
  rp.common.attach(r, false);
  r->add_option("--search-dir", rp.search_dir);
  r->add_option("--top", rp.top);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    if (ex.get_exit_code() == 0) return app.exit(ex, out, err);  // --help
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*p) return cli::cmd_prepare(prep, out);
    if (*t) {
      for (const auto& [name, v] : hp_opts) {
        if (v) tr.hp_flags[name] = *v;
      }
      return cli::cmd_train(tr, out);
    }
    if (*l) return cli::cmd_translate(tl, out);
    if (*e) return cli::cmd_evaluate(ev, out);
    if (*s) return cli::cmd_search(se, out);
    if (*r) return cli::cmd_report(rp, out);
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const CompatibilityError& ex) {
    err << "compatibility error: " << ex.what() << '\n';
    return kExitCompatibility;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace glossmt
