#pragma once

// Label-smoothed training with Adam and the Noam schedule, periodic dev
// evaluation, checkpoint selection and CSV metric logging.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "glossmt/checkpoint.hpp"
#include "glossmt/data.hpp"
#include "glossmt/error.hpp"
#include "glossmt/hyperparams.hpp"
#include "glossmt/metrics.hpp"
#include "glossmt/model.hpp"
#include "glossmt/tensor.hpp"

namespace glossmt {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent sub-seed for one consumer of randomness.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view component) {
  return splitmix64(seed ^ fnv1a(component));
}

enum class SelectionMetric { kRouge, kBleu1, kDevAccuracy };

inline SelectionMetric parse_selection_metric(std::string_view s) {
  if (s == "ROUGE" || s == "rouge") return SelectionMetric::kRouge;
  if (s == "BLEU1" || s == "bleu1") return SelectionMetric::kBleu1;
  if (s == "dev_accuracy" || s == "accuracy") return SelectionMetric::kDevAccuracy;
  throw ConfigError("unknown selection metric '" + std::string(s) + "' (expected ROUGE, BLEU1 or dev_accuracy)");
}

inline std::string to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::kRouge: return "ROUGE";
    case SelectionMetric::kBleu1: return "BLEU1";
    case SelectionMetric::kDevAccuracy: return "dev_accuracy";
  }
  return "?";
}

inline double selection_score(SelectionMetric m, const ScoreReport& report, double dev_accuracy) {
  switch (m) {
    case SelectionMetric::kRouge: return report.rouge;
    case SelectionMetric::kBleu1: return report.bleu[0];
    case SelectionMetric::kDevAccuracy: return dev_accuracy;
  }
  return 0;
}

// Token statistics from the unsmoothed distribution.
struct LossStats {
  double loss = 0;     // smoothed objective, mean over tokens
  double nll_sum = 0;  // unsmoothed cross-entropy summed over tokens
  std::size_t correct = 0;
  std::size_t tokens = 0;

  double accuracy() const { return tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0; }
  double perplexity() const { return tokens ? std::exp(nll_sum / static_cast<double>(tokens)) : 0.0; }
  LossStats& operator+=(const LossStats& o) {
    loss = (loss * static_cast<double>(tokens) + o.loss * static_cast<double>(o.tokens)) /
           static_cast<double>(std::max<std::size_t>(tokens + o.tokens, 1));
    nll_sum += o.nll_sum;
    correct += o.correct;
    tokens += o.tokens;
    return *this;
  }
};

// Cross-entropy against the smoothed target q: q(true) = 1 - eps and
// q(k) = eps / (V - 2) for every other non-PAD class. Averaged over the
// non-pad positions of `logits` ([..., V]).
template <class S>
BasicTensor<S> smoothed_loss(const BasicTensor<S>& logits, const std::vector<std::int32_t>& tgt_out,
                             const std::vector<std::uint8_t>& pad_mask, double eps, LossStats* stats = nullptr) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("smoothed_loss: label smoothing must lie in [0, 1)");
  const std::size_t v = logits.shape().back();
  const std::size_t rows = logits.size() / v;
  if (tgt_out.size() != rows || pad_mask.size() != rows) {
    throw DimensionError("smoothed_loss: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(tgt_out.size()) + " targets");
  }
  if (eps > 0.0 && v < 3) throw ConfigError("smoothed_loss: smoothing needs at least 3 classes");
  const double off = v > 2 ? eps / static_cast<double>(v - 2) : 0.0;
  const auto& x = logits.data();

  std::size_t tokens = 0;
  for (auto p : pad_mask) tokens += p == 0;
  if (tokens == 0) throw ContractError("smoothed_loss: every position is padding");

  std::vector<double> probs(logits.size(), 0.0);
  double total = 0, nll = 0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (pad_mask[r]) continue;
    const auto truth = static_cast<std::size_t>(tgt_out[r]);
    if (truth >= v) throw DataError("smoothed_loss: target id " + std::to_string(truth) + " out of range");
    const S* row = x.data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < v; ++k) {
      if (static_cast<double>(row[k]) > mx) {
        mx = static_cast<double>(row[k]);
        arg = k;
      }
    }
    double z = 0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(static_cast<double>(row[k]) - mx);
    const double lse = mx + std::log(z);
    double row_loss = 0;
    for (std::size_t k = 0; k < v; ++k) {
      const double lp = static_cast<double>(row[k]) - lse;
      probs[r * v + k] = std::exp(lp);
      const double q = k == truth ? 1.0 - eps : (k == static_cast<std::size_t>(kPadId) ? 0.0 : off);
      if (q > 0) row_loss -= q * lp;
    }
    total += row_loss;
    nll -= static_cast<double>(row[truth]) - lse;
    correct += arg == truth;
  }
  const double mean = total / static_cast<double>(tokens);
  if (stats) *stats = LossStats{mean, nll, correct, tokens};

  auto ln = logits.node();
  return record_op<S>({1}, {static_cast<S>(mean)}, {logits},
                      [ln, probs = std::move(probs), tgt_out, pad_mask, v, rows, eps, off, tokens](TensorNode<S>& o) {
                        ln->ensure_grad();
                        const double g = static_cast<double>(o.grad[0]) / static_cast<double>(tokens);
                        for (std::size_t r = 0; r < rows; ++r) {
                          if (pad_mask[r]) continue;
                          const auto truth = static_cast<std::size_t>(tgt_out[r]);
                          for (std::size_t k = 0; k < v; ++k) {
                            const double q =
                                k == truth ? 1.0 - eps : (k == static_cast<std::size_t>(kPadId) ? 0.0 : off);
                            ln->grad[r * v + k] += static_cast<S>(g * (probs[r * v + k] - q));
                          }
                        }
                      });
}

// lr_scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(std::size_t step, std::size_t d, std::size_t warmup, double lr_scale) {
  if (step == 0) throw ContractError("noam_lr: steps are counted from 1");
  if (warmup == 0 || d == 0) throw ConfigError("noam_lr: warmup and d must be positive");
  const double s = static_cast<double>(step);
  return lr_scale * std::pow(static_cast<double>(d), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

struct BestRecord {
  std::string metric;
  double value = -std::numeric_limits<double>::infinity();
  std::size_t step = 0;
};

template <class S>
struct TrainingState {
  std::size_t step = 0;
  std::vector<std::vector<S>> first_moment;
  std::vector<std::vector<S>> second_moment;
  BestRecord best;
  std::uint64_t seed = 0;
};

inline constexpr double kAdamEps = 1e-9;

// One bias-corrected Adam update. Every parameter must carry a gradient.
template <class S>
void adam_step(const typename TransformerModel<S>::NamedParameters& params, TrainingState<S>& state, double lr,
               double beta1, double beta2) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
  }
  if (state.first_moment.empty()) {
    for (const auto& [name, t] : params) {
      state.first_moment.emplace_back(t.size(), S(0));
      state.second_moment.emplace_back(t.size(), S(0));
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("adam_step: state/parameter mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].second;
    auto p = tensor.mutable_data();
    auto g = tensor.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = static_cast<S>(beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * gj);
      v[j] = static_cast<S>(beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * gj * gj);
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      p[j] = static_cast<S>(static_cast<double>(p[j]) - lr * mhat / (std::sqrt(vhat) + kAdamEps));
    }
  }
}

// Rescales gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
template <class S>
double clip_grad_norm(const typename TransformerModel<S>::NamedParameters& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : params) {
    for (S g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& [name, t] : params) {
      auto handle = t;
      for (S& g : handle.mutable_grad()) g = static_cast<S>(static_cast<double>(g) * f);
    }
  }
  return norm;
}

// Empty optionals serialise as empty CSV cells.
struct MetricsRow {
  std::size_t step = 0;
  double learning_rate = 0;
  std::optional<double> train_loss, train_accuracy, train_perplexity;
  std::optional<double> dev_accuracy, dev_perplexity;
  std::optional<std::array<double, 4>> dev_bleu;
  std::optional<double> dev_rouge;

  static std::string csv_header() {
    return "step,learning_rate,train_loss,train_accuracy,train_perplexity,dev_accuracy,dev_perplexity,"
           "dev_bleu1,dev_bleu2,dev_bleu3,dev_bleu4,dev_rouge";
  }

  std::string csv() const {
    auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    std::string row = std::to_string(step) + "," + format_double(learning_rate) + "," + cell(train_loss) + "," +
                      cell(train_accuracy) + "," + cell(train_perplexity) + "," + cell(dev_accuracy) + "," +
                      cell(dev_perplexity);
    for (int n = 0; n < 4; ++n) row += "," + (dev_bleu ? format_double((*dev_bleu)[n]) : std::string());
    row += "," + cell(dev_rouge);
    return row;
  }

  bool is_evaluation() const { return dev_accuracy.has_value(); }
};

struct CorpusBundle {
  ParallelCorpus train;
  ParallelCorpus dev;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
};

struct TrainConfig {
  std::size_t max_steps = 1000;
  std::size_t eval_every = 100;
  std::size_t patience = 0;  // evaluations without improvement before stopping; 0 disables
  std::optional<double> stop_at;  // stop once the selection score reaches this
  SelectionMetric selection = SelectionMetric::kRouge;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  std::filesystem::path run_dir;  // empty: nothing written
  std::function<void(const MetricsRow&)> on_row;
};

struct DevEvaluation {
  LossStats stats;
  ScoreReport report;
  std::vector<Sentence> hypotheses;
};

inline std::size_t decode_limit(std::size_t src_len) { return 2 * src_len + 10; }

// Batched greedy translation of token-id sources, order preserved.
template <class S>
std::vector<TokenIds> translate_batched(const TransformerModel<S>& model, const std::vector<TokenIds>& sources,
                                        std::size_t chunk = 64) {
  std::vector<std::size_t> order(sources.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sources[a].size() < sources[b].size(); });
  std::vector<TokenIds> out(sources.size());
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const std::size_t end = std::min(order.size(), start + chunk);
    std::vector<TokenIds> group;
    std::size_t limit = 0;
    for (std::size_t i = start; i < end; ++i) {
      group.push_back(sources[order[i]]);
      limit = std::max(limit, decode_limit(sources[order[i]].size()));
    }
    auto decoded = model.greedy_decode(group, limit);
    for (std::size_t i = start; i < end; ++i) {
      auto& d = decoded[i - start];
      const std::size_t own = decode_limit(sources[order[i]].size());
      if (d.size() > own) d.resize(own);
      out[order[i]] = std::move(d);
    }
  }
  return out;
}

// Teacher-forced token statistics plus greedy-decoded BLEU/ROUGE.
template <class S>
DevEvaluation evaluate_model(const TransformerModel<S>& model, const ParallelCorpus& corpus,
                             const Vocabulary& src_vocab, const Vocabulary& tgt_vocab, std::size_t token_budget) {
  DevEvaluation ev;
  for (const auto& batch : make_batches(corpus, src_vocab, tgt_vocab, token_budget, nullptr)) {
    LossStats s;
    const auto logits = model.decode(batch, model.encode(batch));
    smoothed_loss(logits, batch.tgt_out_ids, batch.tgt_pad, 0.0, &s);
    ev.stats += s;
  }
  std::vector<TokenIds> sources;
  sources.reserve(corpus.size());
  for (const auto& s : corpus.source) sources.push_back(src_vocab.encode(s));
  const auto hyps = translate_batched(model, sources);
  ev.hypotheses.reserve(hyps.size());
  for (const auto& h : hyps) ev.hypotheses.push_back(tgt_vocab.decode(h));
  ev.report = evaluate(ev.hypotheses, corpus.target);
  return ev;
}

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<MetricsRow> rows;
  std::size_t steps = 0;
  BestRecord best_record;
  ScoreReport best_report;
  double best_dev_accuracy = 0;
  double best_dev_perplexity = 0;
};

template <class S>
TrainResult train_model(const HyperParams& hp, const CorpusBundle& data, const TrainConfig& config) {
  hp.validate();
  if (config.max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
  if (config.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");

  std::ofstream csv;
  if (!config.run_dir.empty()) {
    std::filesystem::create_directories(config.run_dir);
    csv.open(config.run_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!csv) throw DataError("cannot write " + (config.run_dir / "metrics.csv").string());
    csv << MetricsRow::csv_header() << '\n';
  }

  TrainResult result;
  auto emit = [&](const MetricsRow& row) {
    result.rows.push_back(row);
    if (csv.is_open()) csv << row.csv() << '\n' << std::flush;
    if (config.on_row) config.on_row(row);
  };

  TransformerModel<S> model(hp, data.src_vocab.size(), data.tgt_vocab.size(), derive_seed(config.seed, "init"));
  std::mt19937_64 batch_rng(derive_seed(config.seed, "batches"));
  std::mt19937_64 dropout_rng(derive_seed(config.seed, "dropout"));
  TrainingState<S> state;
  state.seed = config.seed;
  state.best.metric = to_string(config.selection);
  const ForwardContext ctx{true, &dropout_rng};

  std::size_t since_improvement = 0;
  bool stop = false;
  bool evaluated_last = false;
  double lr = 0;

  auto run_evaluation = [&]() {
    const DevEvaluation ev = evaluate_model(model, data.dev, data.src_vocab, data.tgt_vocab,
                                            static_cast<std::size_t>(hp.batch_size));
    MetricsRow row;
    row.step = state.step;
    row.learning_rate = lr;
    row.dev_accuracy = ev.stats.accuracy();
    row.dev_perplexity = ev.stats.perplexity();
    row.dev_bleu = ev.report.bleu;
    row.dev_rouge = ev.report.rouge;
    emit(row);
    const double score = selection_score(config.selection, ev.report, ev.stats.accuracy());
    if (score > state.best.value) {
      state.best.value = score;
      state.best.step = state.step;
      result.best = Checkpoint::capture(model, data.src_vocab, data.tgt_vocab, state.step);
      result.best_report = ev.report;
      result.best_dev_accuracy = ev.stats.accuracy();
      result.best_dev_perplexity = ev.stats.perplexity();
      since_improvement = 0;
    } else {
      ++since_improvement;
      if (config.patience > 0 && since_improvement >= config.patience) stop = true;
    }
    if (config.stop_at && score >= *config.stop_at) stop = true;
  };

  while (!stop && state.step < config.max_steps) {
    auto batches = make_batches(data.train, data.src_vocab, data.tgt_vocab,
                                static_cast<std::size_t>(hp.batch_size), &batch_rng);
    for (const auto& batch : batches) {
      if (stop || state.step >= config.max_steps) break;
      for (const auto& [name, t] : model.parameters()) {
        auto handle = t;
        handle.zero_grad();
      }
      LossStats stats;
      {
        Tape<S> tape;
        TapeScope<S> scope(tape);
        const auto memory = model.encode(batch, ctx);
        const auto logits = model.decode(batch, memory, ctx);
        const auto loss = smoothed_loss(logits, batch.tgt_out_ids, batch.tgt_pad, hp.label_smoothing, &stats);
        tape.backward(loss);
      }
      clip_grad_norm<S>(model.parameters(), config.clip_norm);
      lr = noam_lr(state.step + 1, static_cast<std::size_t>(hp.embed_dim), static_cast<std::size_t>(hp.warmup_steps),
                   hp.lr_scale);
      adam_step<S>(model.parameters(), state, lr, hp.beta1, hp.beta2);

      MetricsRow row;
      row.step = state.step;
      row.learning_rate = lr;
      row.train_loss = stats.loss;
      row.train_accuracy = stats.accuracy();
      row.train_perplexity = stats.perplexity();
      emit(row);

      evaluated_last = false;
      if (state.step % config.eval_every == 0) {
        run_evaluation();
        evaluated_last = true;
      }
    }
  }
  if (!evaluated_last) run_evaluation();

  result.steps = state.step;
  result.best_record = state.best;
  result.last = Checkpoint::capture(model, data.src_vocab, data.tgt_vocab, state.step);
  if (!config.run_dir.empty()) {
    result.best.save(config.run_dir / "best.ckpt");
    result.last.save(config.run_dir / "last.ckpt");
  }
  return result;
}

}  // namespace glossmt
