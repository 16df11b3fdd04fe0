#pragma once

// Coordinate-descent search over the architecture grid: one hyper-parameter
// is swept at a time with the others held at the incumbent, trials are
// memoized by grid point, and passes repeat until one changes nothing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "glossmt/error.hpp"
#include "glossmt/hyperparams.hpp"
#include "glossmt/kv.hpp"
#include "glossmt/metrics.hpp"
#include "glossmt/train.hpp"

namespace glossmt {

struct SearchAxis {
  std::string name;
  std::vector<double> values;  // ascending
};

struct SearchSpace {
  std::vector<SearchAxis> axes;

  static SearchSpace explored_grid() {
    return {{
        {"num_layers", {1, 2, 3, 4, 5, 6, 7}},
        {"ff_dim", {128, 256, 512}},
        {"embed_dim", {32, 64, 128}},
        {"num_heads", {1, 2, 4, 8}},
        {"dropout", {0.1, 0.2, 0.3, 0.4, 0.5}},
        {"batch_size", {256, 512, 1024, 2048, 4096}},
        {"label_smoothing", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}},
        {"warmup_steps", {100, 200, 300, 400, 500, 600}},
    }};
  }

  const SearchAxis& axis(std::string_view name) const {
    for (const auto& a : axes) {
      if (a.name == name) return a;
    }
    throw ConfigError("search: unknown axis '" + std::string(name) + "'");
  }

  std::size_t grid_size() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.values.size();
    return n;
  }

  // Sweep order; `order` must be a permutation of the axis names.
  void reorder(const std::vector<std::string>& order) {
    if (order.size() != axes.size()) throw ConfigError("search: order must name every axis exactly once");
    std::vector<SearchAxis> out;
    for (const auto& name : order) {
      if (std::any_of(out.begin(), out.end(), [&](const SearchAxis& a) { return a.name == name; })) {
        throw ConfigError("search: axis '" + name + "' repeated in order");
      }
      out.push_back(axis(name));
    }
    axes = std::move(out);
  }

  // Throws ConfigError naming the first coordinate that is off the grid.
  void check(const HyperParams& hp) const {
    for (const auto& a : axes) {
      const double v = hp.get(a.name);
      if (std::find(a.values.begin(), a.values.end(), v) == a.values.end()) {
        std::string allowed;
        for (double x : a.values) allowed += (allowed.empty() ? "" : " ") + format_double(x);
        throw ConfigError(a.name + " = " + format_double(v) + " is not in the grid {" + allowed + "}");
      }
    }
  }
};

inline bool feasible(const HyperParams& hp) { return hp.num_heads > 0 && hp.embed_dim % hp.num_heads == 0; }

struct TrialOutcome {
  ScoreReport report;
  double dev_accuracy = 0;
  std::string checkpoint;
  std::size_t steps = 0;
};

// Trains and evaluates one grid point; may throw to signal failure.
using Trainer = std::function<TrialOutcome(const HyperParams&, std::uint64_t seed)>;

struct TrialRecord {
  HyperParams hp;
  std::size_t pass = 0;
  std::string axis;
  std::uint64_t seed = 0;
  bool failed = false;
  double score = -std::numeric_limits<double>::infinity();
  TrialOutcome outcome;
  double seconds = 0;
  std::string error;

  static std::string csv_header() {
    std::string h = "pass,axis";
    for (auto name : HyperParams::kGridNames) h += "," + std::string(name);
    return h + ",seed,failed,score,dev_accuracy,bleu1,bleu2,bleu3,bleu4,rouge,steps,seconds,checkpoint,error";
  }

  std::string csv() const {
    auto clean = [](std::string s) {
      std::replace(s.begin(), s.end(), ',', ';');
      std::replace(s.begin(), s.end(), '\n', ' ');
      std::replace(s.begin(), s.end(), '\r', ' ');
      return s;
    };
    std::string row = std::to_string(pass) + "," + axis;
    for (auto name : HyperParams::kGridNames) row += "," + format_double(hp.get(name));
    row += "," + std::to_string(seed) + "," + (failed ? "1" : "0") + "," + format_double(score) + "," +
           format_double(outcome.dev_accuracy);
    for (double b : outcome.report.bleu) row += "," + format_double(b);
    row += "," + format_double(outcome.report.rouge) + "," + std::to_string(outcome.steps) + "," +
           format_double(seconds) + "," + clean(outcome.checkpoint) + "," + clean(error);
    return row;
  }

  static TrialRecord parse_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    const std::size_t expected = 2 + HyperParams::kGridNames.size() + 13;
    if (cells.size() != expected) {
      throw DataError("search ledger: expected " + std::to_string(expected) + " cells, got " +
                      std::to_string(cells.size()) + " in '" + line + "'");
    }
    TrialRecord r;
    std::size_t i = 0;
    r.pass = static_cast<std::size_t>(parse_integer(cells[i++], "ledger"));
    r.axis = cells[i++];
    for (auto name : HyperParams::kGridNames) r.hp.set(name, parse_double(cells[i++], "ledger"));
    r.seed = std::stoull(cells[i++]);
    r.failed = cells[i++] == "1";
    r.score = parse_double(cells[i++], "ledger");
    r.outcome.dev_accuracy = parse_double(cells[i++], "ledger");
    for (double& b : r.outcome.report.bleu) b = parse_double(cells[i++], "ledger");
    r.outcome.report.rouge = parse_double(cells[i++], "ledger");
    r.outcome.steps = static_cast<std::size_t>(parse_integer(cells[i++], "ledger"));
    r.seconds = parse_double(cells[i++], "ledger");
    r.outcome.checkpoint = cells[i++];
    r.error = cells[i++];
    return r;
  }
};

struct SweepStep {
  std::size_t pass = 0;
  std::string axis;
  double value = 0;  // incumbent value after the sweep
  double score = 0;  // incumbent score after the sweep
  bool changed = false;
};

struct SearchState {
  HyperParams incumbent;
  double incumbent_score = -std::numeric_limits<double>::infinity();
  std::size_t pass = 0;
  std::vector<TrialRecord> history;
  std::map<std::string, std::size_t> memo;  // grid key -> history index
  std::vector<SweepStep> trajectory;
  bool converged = false;
  bool interrupted = false;
  std::size_t new_trials = 0;
};

struct SearchOptions {
  SelectionMetric selection = SelectionMetric::kRouge;
  std::size_t max_passes = 10;
  std::size_t workers = 1;
  double tolerance = 0;  // a sweep must beat the incumbent by more than this
  std::uint64_t seed = 1;
  std::size_t max_new_trials = 0;  // 0: unlimited; otherwise stop (resumably) after this many
  std::filesystem::path ledger;    // empty: no ledger
  std::function<void(const TrialRecord&)> on_trial;
};

namespace detail {

struct SearchStop {};

inline TrialRecord run_trial(const Trainer& trainer, const HyperParams& hp, std::uint64_t seed,
                             SelectionMetric selection) {
  TrialRecord r;
  r.hp = hp;
  r.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    r.outcome = trainer(hp, seed);
    r.score = selection_score(selection, r.outcome.report, r.outcome.dev_accuracy);
    if (std::isnan(r.score)) throw ContractError("trial produced a NaN score");
  } catch (const std::exception& e) {
    r.failed = true;
    r.score = -std::numeric_limits<double>::infinity();
    r.error = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline void append_ledger(const std::filesystem::path& path, const TrialRecord& r) {
  if (path.empty()) return;
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw DataError("cannot write search ledger " + path.string());
  if (fresh) out << TrialRecord::csv_header() << '\n';
  out << r.csv() << '\n';
}

// Runs every point not yet in the memo, `workers` at a time, and records the
// results in `points` order.
inline void run_points(SearchState& state, const std::vector<HyperParams>& points, const std::string& axis,
                       const Trainer& trainer, const SearchOptions& opt) {
  std::vector<HyperParams> todo;
  for (const auto& hp : points) {
    const std::string key = hp.grid_key();
    if (state.memo.count(key)) continue;
    if (std::any_of(todo.begin(), todo.end(), [&](const HyperParams& t) { return t.grid_key() == key; })) continue;
    todo.push_back(hp);
  }
  const std::size_t workers = std::max<std::size_t>(opt.workers, 1);
  for (std::size_t start = 0; start < todo.size();) {
    std::size_t chunk = std::min(workers, todo.size() - start);
    if (opt.max_new_trials > 0) {
      if (state.new_trials >= opt.max_new_trials) throw SearchStop{};
      chunk = std::min(chunk, opt.max_new_trials - state.new_trials);
    }
    std::vector<TrialRecord> results(chunk);
    auto job = [&](std::size_t i) {
      const HyperParams& hp = todo[start + i];
      results[i] = run_trial(trainer, hp, derive_seed(opt.seed, hp.grid_key()), opt.selection);
    };
    if (chunk == 1) {
      job(0);
    } else {
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < chunk; ++i) threads.emplace_back(job, i);
      for (auto& t : threads) t.join();
    }
    for (auto& r : results) {
      r.pass = state.pass;
      r.axis = axis;
      state.memo[r.hp.grid_key()] = state.history.size();
      append_ledger(opt.ledger, r);
      if (opt.on_trial) opt.on_trial(r);
      state.history.push_back(std::move(r));
      ++state.new_trials;
    }
    start += chunk;
  }
}

inline double memo_score(const SearchState& state, const HyperParams& hp) {
  return state.history[state.memo.at(hp.grid_key())].score;
}

}  // namespace detail

// Rebuilds memo and history from an existing ledger file (if any).
inline void load_ledger(SearchState& state, const std::filesystem::path& path) {
  if (path.empty() || !std::filesystem::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  if (!std::getline(in, line)) return;
  if (line != TrialRecord::csv_header()) throw CompatibilityError(path.string() + ": unexpected ledger header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrialRecord r = TrialRecord::parse_csv(line);
    const std::string key = r.hp.grid_key();
    if (state.memo.count(key)) continue;
    state.memo[key] = state.history.size();
    state.history.push_back(std::move(r));
  }
}

// Sweeps one axis around the incumbent. Returns true when the incumbent moved.
inline bool sweep_parameter(SearchState& state, const SearchSpace& space, std::string_view name,
                            const Trainer& trainer, const SearchOptions& opt) {
  const SearchAxis& axis = space.axis(name);
  std::vector<HyperParams> points;
  for (double v : axis.values) {
    HyperParams hp = state.incumbent;
    hp.set(axis.name, v);
    if (feasible(hp)) points.push_back(hp);
  }
  detail::run_points(state, points, axis.name, trainer, opt);
  state.incumbent_score = detail::memo_score(state, state.incumbent);

  double best = -std::numeric_limits<double>::infinity();
  for (const auto& hp : points) best = std::max(best, detail::memo_score(state, hp));
  bool changed = false;
  if (best > state.incumbent_score + opt.tolerance) {
    for (const auto& hp : points) {  // ascending, so the smallest tied value wins
      if (detail::memo_score(state, hp) == best) {
        state.incumbent = hp;
        state.incumbent_score = best;
        changed = true;
        break;
      }
    }
  }
  state.trajectory.push_back({state.pass, axis.name, state.incumbent.get(axis.name), state.incumbent_score, changed});
  return changed;
}

// Full passes in axis order until a pass changes nothing or max_passes is
// reached. With a ledger, previously completed trials are replayed from it.
inline SearchState run_search(const HyperParams& initial, const SearchSpace& space, const Trainer& trainer,
                              const SearchOptions& opt) {
  space.check(initial);
  if (!feasible(initial)) throw ConfigError("search: initial point has embed_dim not divisible by num_heads");
  if (opt.max_passes < 1) throw ConfigError("search: max_passes must be >= 1");
  SearchState state;
  state.incumbent = initial;
  load_ledger(state, opt.ledger);
  try {
    detail::run_points(state, {initial}, "initial", trainer, opt);
    state.incumbent_score = detail::memo_score(state, initial);
    for (std::size_t pass = 1; pass <= opt.max_passes; ++pass) {
      state.pass = pass;
      bool changed = false;
      for (const auto& axis : space.axes) changed = sweep_parameter(state, space, axis.name, trainer, opt) || changed;
      if (!changed) {
        state.converged = true;
        break;
      }
    }
  } catch (const detail::SearchStop&) {
    state.interrupted = true;
  }
  return state;
}

// Trials by descending score; ties keep history order.
inline std::vector<const TrialRecord*> ranked_trials(const SearchState& state) {
  if (state.history.empty()) throw ContractError("report: no trials in search history");
  std::vector<const TrialRecord*> rows;
  for (const auto& r : state.history) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const TrialRecord* a, const TrialRecord* b) { return a->score > b->score; });
  return rows;
}

inline std::string search_report(const SearchState& state) {
  const auto rows = ranked_trials(state);
  std::ostringstream os;
  os << "rank,score";
  for (auto name : HyperParams::kGridNames) os << ',' << name;
  os << ",status,steps,seconds\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = *rows[i];
    os << i + 1 << ',' << format_double(r.score);
    for (auto name : HyperParams::kGridNames) os << ',' << format_double(r.hp.get(name));
    os << ',' << (r.failed ? "failed" : "ok") << ',' << r.outcome.steps << ',' << format_double(r.seconds) << '\n';
  }
  os << "\npass,axis,value,score,changed\n";
  for (const auto& s : state.trajectory) {
    os << s.pass << ',' << s.axis << ',' << format_double(s.value) << ',' << format_double(s.score) << ','
       << (s.changed ? "yes" : "no") << '\n';
  }
  return os.str();
}

// Two-column "Hyper-parameter / Value" table of one architecture.
inline std::string architecture_table(const HyperParams& hp) {
  std::size_t width = std::string("Hyper-parameter").size();
  for (auto name : HyperParams::kGridNames) width = std::max(width, name.size());
  std::ostringstream os;
  auto row = [&](std::string_view a, const std::string& b) {
    os << a << std::string(width + 2 - a.size(), ' ') << b << '\n';
  };
  row("Hyper-parameter", "Value");
  for (auto name : HyperParams::kGridNames) row(name, format_double(hp.get(name)));
  return os.str();
}

// f(hp) = -sum_a w_a * (index_a(hp) - target_a)^2 over grid indices. Separable
// with a unique maximum (0) at the target point.
struct SyntheticObjective {
  SearchSpace space = SearchSpace::explored_grid();
  HyperParams target = default_target();

  static HyperParams default_target() {
    HyperParams t;
    t.num_layers = 3;
    t.ff_dim = 512;
    t.embed_dim = 128;
    t.num_heads = 4;
    t.dropout = 0.2;
    t.batch_size = 1024;
    t.label_smoothing = 0.4;
    t.warmup_steps = 500;
    return t;
  }

  static std::size_t index_of(const SearchAxis& a, double v) {
    const auto it = std::find(a.values.begin(), a.values.end(), v);
    if (it == a.values.end()) throw ConfigError(a.name + " = " + format_double(v) + " is off the grid");
    return static_cast<std::size_t>(it - a.values.begin());
  }

  double term(const SearchAxis& a, double v) const {
    const double d = static_cast<double>(index_of(a, v)) - static_cast<double>(index_of(a, target.get(a.name)));
    const double w = 1.0 + static_cast<double>(a.values.size());
    return -w * d * d;
  }

  double operator()(const HyperParams& hp) const {
    double f = 0;
    for (const auto& a : space.axes) f += term(a, hp.get(a.name));
    return f;
  }

  Trainer trainer() const {
    return [obj = *this](const HyperParams& hp, std::uint64_t) {
      TrialOutcome o;
      const double f = obj(hp);
      o.report.rouge = f;
      o.report.bleu = {f, f, f, f};
      o.dev_accuracy = f;
      return o;
    };
  }
};

// Trainer that runs train_model on real data; each trial writes to its own
// directory under `root`.
inline Trainer training_trainer(const CorpusBundle& data, const TrainConfig& base, std::filesystem::path root) {
  return [&data, base, root = std::move(root)](const HyperParams& hp, std::uint64_t seed) {
    TrainConfig c = base;
    c.seed = seed;
    c.on_row = nullptr;
    char name[32];
    std::snprintf(name, sizeof(name), "trial-%016llx", static_cast<unsigned long long>(fnv1a(hp.grid_key())));
    if (!root.empty()) c.run_dir = root / name;
    const TrainResult r = train_model<double>(hp, data, c);
    TrialOutcome o;
    o.report = r.best_report;
    o.dev_accuracy = r.best_dev_accuracy;
    o.steps = r.steps;
    if (!root.empty()) o.checkpoint = (c.run_dir / "best.ckpt").string();
    return o;
  };
}

// Plain key-value search configuration.
struct SearchConfig {
  HyperParams initial;
  SearchSpace space = SearchSpace::explored_grid();
  SearchOptions options;
  std::size_t max_steps = 1000;
  std::size_t eval_every = 100;
  std::size_t patience = 0;
  std::string objective = "train";  // or "synthetic"

  static SearchConfig from(const KeyValues& kv) {
    SearchConfig c;
    c.initial.apply(kv, "initial.");
    if (kv.has("order")) {
      std::vector<std::string> order;
      std::stringstream ss(kv.get("order"));
      std::string item;
      while (std::getline(ss, item, ',')) order.emplace_back(trim(item));
      c.space.reorder(order);
    }
    if (kv.has("selection")) c.options.selection = parse_selection_metric(kv.get("selection"));
    c.options.max_passes = static_cast<std::size_t>(kv.get_int("max_passes", 10));
    c.options.workers = static_cast<std::size_t>(kv.get_int("workers", 1));
    c.options.tolerance = kv.get_double("tolerance", 0.0);
    c.options.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
    c.max_steps = static_cast<std::size_t>(kv.get_int("max_steps", 1000));
    c.eval_every = static_cast<std::size_t>(kv.get_int("eval_every", 100));
    c.patience = static_cast<std::size_t>(kv.get_int("patience", 0));
    c.objective = kv.get_or("objective", "train");
    if (c.objective != "train" && c.objective != "synthetic") {
      throw ConfigError("search: objective must be 'train' or 'synthetic', got '" + c.objective + "'");
    }
    if (c.options.workers < 1) throw ConfigError("search: workers must be >= 1");
    if (c.options.tolerance < 0) throw ConfigError("search: tolerance must be >= 0");
    return c;
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    initial.store(kv, "initial.");
    std::string order;
    for (const auto& a : space.axes) order += (order.empty() ? "" : ",") + a.name;
    kv.set("order", order);
    kv.set("selection", to_string(options.selection));
    kv.set("max_passes", std::to_string(options.max_passes));
    kv.set("workers", std::to_string(options.workers));
    kv.set("tolerance", format_double(options.tolerance));
    kv.set("seed", std::to_string(options.seed));
    kv.set("max_steps", std::to_string(max_steps));
    kv.set("eval_every", std::to_string(eval_every));
    kv.set("patience", std::to_string(patience));
    kv.set("objective", objective);
    return kv;
  }
};

}  // namespace glossmt
