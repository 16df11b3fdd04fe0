#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "copy_task.hpp"
#include "glossmt/train.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

namespace glossmt {
namespace {

Tensor logits_from(std::size_t rows, std::size_t v, std::vector<double> values) {
  return Tensor::parameter({1, rows, v}, std::move(values));
}

TEST(SmoothedLoss, WithoutSmoothingIsCrossEntropy) {
  std::mt19937_64 rng(1);
  const Tensor logits = testing::random_tensor({1, 3, 6}, rng);
  const std::vector<std::int32_t> truth = {4, 2, 5};
  LossStats stats;
  const double loss = smoothed_loss(logits, truth, {0, 0, 0}, 0.0, &stats).item();
  double expected = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t k = 0; k < 6; ++k) z += std::exp(logits.data()[r * 6 + k]);
    expected -= logits.data()[r * 6 + static_cast<std::size_t>(truth[r])] - std::log(z);
  }
  EXPECT_NEAR(loss, expected / 3, 1e-12);
  EXPECT_NEAR(std::log(stats.perplexity()), expected / 3, 1e-12);
}

TEST(SmoothedLoss, UniformLogitsGiveLogV) {
  const Tensor logits = logits_from(1, 4, {0.3, 0.3, 0.3, 0.3});
  EXPECT_NEAR(smoothed_loss(logits, {2}, {0}, 0.6).item(), std::log(4.0), 1e-9);
}

// With heavy smoothing a confident correct prediction is penalised for the
// mass it withholds from the other classes, so it scores worse than uniform.
TEST(SmoothedLoss, HeavySmoothingPenalisesOverconfidence) {
  const double uniform = smoothed_loss(logits_from(1, 4, {0, 0, 0, 0}), {2}, {0}, 0.6).item();
  const double confident = smoothed_loss(logits_from(1, 4, {0, 0, 30, 0}), {2}, {0}, 0.6).item();
  EXPECT_GT(confident, uniform);
  EXPECT_NEAR(confident, 0.6 * 30.0, 1e-6);
  const double unsmoothed = smoothed_loss(logits_from(1, 4, {0, 0, 30, 0}), {2}, {0}, 0.0).item();
  EXPECT_LT(unsmoothed, 1e-9);
}

TEST(SmoothedLoss, PaddingIsIgnoredAndStatsCountRealTokens) {
  const Tensor logits = logits_from(3, 5, {1, 2, 3, 0, 0, /**/ 9, 9, 9, 9, 9, /**/ 0, 0, 0, 0, 4});
  LossStats stats;
  const double with_pad = smoothed_loss(logits, {2, 0, 4}, {0, 1, 0}, 0.1, &stats).item();
  EXPECT_EQ(stats.tokens, 2u);
  EXPECT_EQ(stats.correct, 2u);
  const Tensor trimmed = logits_from(2, 5, {1, 2, 3, 0, 0, 0, 0, 0, 0, 4});
  EXPECT_NEAR(smoothed_loss(trimmed, {2, 4}, {0, 0}, 0.1).item(), with_pad, 1e-12);
}

TEST(SmoothedLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor logits = testing::random_tensor({2, 3, 7}, rng);
    const std::vector<std::int32_t> truth = {3, 4, 2, 6, 0, 5};
    const std::vector<std::uint8_t> pad = {0, 0, 0, 0, 1, 0};
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(smoothed_loss(logits, truth, pad, 0.3));
    }
    const auto numeric =
        testing::numeric_gradient(logits, [&] { return smoothed_loss(logits, truth, pad, 0.3).item(); });
    EXPECT_LT(testing::max_relative_error(logits.grad(), numeric), 1e-6);
  }
}

TEST(SmoothedLoss, Errors) {
  const Tensor logits = logits_from(1, 4, {0, 0, 0, 0});
  EXPECT_THROW(smoothed_loss(logits, {2}, {0}, 1.0), ConfigError);
  EXPECT_THROW(smoothed_loss(logits, {2}, {0}, -0.1), ConfigError);
  EXPECT_THROW(smoothed_loss(logits, {2}, {1}, 0.1), ContractError);
}

TEST(Noam, PeakValue) {
  EXPECT_NEAR(noam_lr(300, 64, 300, 0.001), 7.2169e-6, 1e-10);
  EXPECT_DOUBLE_EQ(noam_lr(300, 64, 300, 0.001), 0.001 * 0.125 / std::sqrt(300.0));
}

TEST(Noam, RisesToWarmupThenDecays) {
  for (std::size_t warmup : {1u, 4u, 100u, 300u, 4000u}) {
    for (std::size_t s = 1; s < warmup; ++s) EXPECT_LT(noam_lr(s, 64, warmup, 0.001), noam_lr(s + 1, 64, warmup, 0.001));
    for (std::size_t s = warmup; s < warmup + 2000; ++s) {
      EXPECT_GT(noam_lr(s, 64, warmup, 0.001), noam_lr(s + 1, 64, warmup, 0.001));
    }
  }
  EXPECT_THROW(noam_lr(0, 64, 300, 0.001), ContractError);
}

TransformerModel<double>::NamedParameters single(Tensor t) { return {{"p", std::move(t)}}; }

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor::parameter({3}, {1, -2, 3});
  p.mutable_grad();
  TrainingState<double> state;
  for (int i = 0; i < 5; ++i) adam_step<double>(single(p), state, 0.1, 0.9, 0.998);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::parameter({1}, {0.5});
  p.mutable_grad()[0] = 1.0;
  TrainingState<double> state;
  adam_step<double>(single(p), state, 0.01, 0.9, 0.998);
  EXPECT_NEAR(p.data()[0], 0.5 - 0.01, 1e-9);
}

TEST(Adam, MissingGradientIsAContractError) {
  Tensor p = Tensor::parameter({1}, {0.5});
  TrainingState<double> state;
  EXPECT_THROW(adam_step<double>(single(p), state, 0.01, 0.9, 0.998), ContractError);
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  Tensor p = Tensor::parameter({2}, {0, 0});
  p.mutable_grad()[0] = 3;
  p.mutable_grad()[1] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>(single(p), 10.0), 5.0);
  EXPECT_DOUBLE_EQ(p.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>(single(p), 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
}

TEST(DeriveSeed, DistinctPerComponent) {
  EXPECT_EQ(derive_seed(7, "init"), derive_seed(7, "init"));
  EXPECT_NE(derive_seed(7, "init"), derive_seed(7, "dropout"));
  EXPECT_NE(derive_seed(7, "init"), derive_seed(8, "init"));
}

CorpusBundle copy_bundle(std::size_t pairs, std::uint64_t seed) {
  CorpusBundle d;
  d.train = testing::make_copy_corpus(pairs, 20, 10, seed, "train");
  d.dev = testing::make_copy_corpus(40, 20, 10, seed + 1, "dev");
  d.src_vocab = build_vocab(d.train, Side::kSource);
  d.tgt_vocab = build_vocab(d.train, Side::kTarget);
  return d;
}

HyperParams copy_hp() {
  HyperParams hp;
  hp.num_layers = 2;
  hp.embed_dim = 32;
  hp.ff_dim = 128;
  hp.num_heads = 2;
  hp.dropout = 0.1;
  hp.label_smoothing = 0.1;
  hp.warmup_steps = 100;
  hp.batch_size = 512;
  return hp;
}

// Xavier-initialised output logits have variance about 2d/(d+V), which
// lifts the expected loss by roughly half that; the uniform-prediction bound
// is checked where V >> d, as with the gloss vocabulary.
TEST(InitialLoss, CloseToLogVocabulary) {
  const std::size_t src_v = 2891, tgt_v = 1070;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TransformerModel<double> model(HyperParams{}, src_v, tgt_v, seed);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> src_tok(kNumReserved, src_v - 1), tgt_tok(kNumReserved, tgt_v - 1);
    std::vector<TokenIds> srcs(8), tgts(8);
    for (std::size_t i = 0; i < 8; ++i) {
      srcs[i].resize(5 + i);
      tgts[i].resize(3 + i);
      for (auto& t : srcs[i]) t = src_tok(rng);
      for (auto& t : tgts[i]) t = tgt_tok(rng);
    }
    const auto b = SequenceBatch::build(srcs, tgts);
    const double loss = smoothed_loss(model.decode(b, model.encode(b)), b.tgt_out_ids, b.tgt_pad, 0.0).item();
    const double log_v = std::log(static_cast<double>(tgt_v));
    EXPECT_NEAR(loss, log_v, 0.05 * log_v) << "seed " << seed;
  }
}

TEST(TrainModel, SingleStepBudget) {
  testing::TempDir dir;
  TrainConfig c;
  c.max_steps = 1;
  c.run_dir = dir.path();
  const auto r = train_model<double>(copy_hp(), copy_bundle(50, 1), c);
  EXPECT_EQ(r.steps, 1u);
  std::size_t train_rows = 0;
  for (const auto& row : r.rows) train_rows += row.train_loss.has_value();
  EXPECT_EQ(train_rows, 1u);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));

  std::ifstream csv(dir / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, MetricsRow::csv_header());
}

TEST(TrainModel, BestCheckpointHoldsMaximumOfLoggedScores) {
  auto hp = copy_hp();
  hp.lr_scale = 1.0;
  for (auto metric : {SelectionMetric::kRouge, SelectionMetric::kBleu1, SelectionMetric::kDevAccuracy}) {
    TrainConfig c;
    c.max_steps = 60;
    c.eval_every = 10;
    c.selection = metric;
    const auto r = train_model<double>(hp, copy_bundle(100, 2), c);
    double best = -1;
    std::size_t best_step = 0;
    for (const auto& row : r.rows) {
      if (!row.is_evaluation()) continue;
      const double v = metric == SelectionMetric::kRouge   ? *row.dev_rouge
                       : metric == SelectionMetric::kBleu1 ? (*row.dev_bleu)[0]
                                                           : *row.dev_accuracy;
      if (v > best) {
        best = v;
        best_step = row.step;
      }
    }
    EXPECT_DOUBLE_EQ(r.best_record.value, best) << to_string(metric);
    EXPECT_EQ(r.best_record.step, best_step);
    EXPECT_EQ(r.best.step, best_step);
  }
}

TEST(TrainModel, PatienceStopsEarly) {
  auto hp = copy_hp();
  hp.lr_scale = 1e-12;  // nothing improves after the first evaluation
  TrainConfig c;
  c.max_steps = 200;
  c.eval_every = 5;
  c.patience = 2;
  c.selection = SelectionMetric::kDevAccuracy;
  const auto r = train_model<double>(hp, copy_bundle(60, 4), c);
  EXPECT_LT(r.steps, 200u);
}

TEST(TrainModel, SameSeedSameTrajectory) {
  TrainConfig c;
  c.max_steps = 8;
  c.eval_every = 4;
  const auto a = train_model<double>(copy_hp(), copy_bundle(60, 5), c);
  const auto b = train_model<double>(copy_hp(), copy_bundle(60, 5), c);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].csv(), b.rows[i].csv());
  EXPECT_EQ(a.last.serialize(), b.last.serialize());
}

TEST(TrainModel, PerplexityFallsOverFirstCopySteps) {
  auto hp = copy_hp();
  hp.lr_scale = 1.0;
  const std::size_t steps = 200;
  std::vector<double> mean(steps, 0.0);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TrainConfig c;
    c.max_steps = steps;
    c.eval_every = steps;
    c.seed = seed;
    const auto r = train_model<double>(hp, copy_bundle(300, seed), c);
    for (const auto& row : r.rows) {
      if (row.train_perplexity) mean[row.step - 1] += *row.train_perplexity / 3;
    }
  }
  // Per-step perplexity is measured on different batches; compare
  // consecutive 20-step windows.
  std::vector<double> windows;
  for (std::size_t s = 0; s < steps; s += 20) {
    double w = 0;
    for (std::size_t i = s; i < s + 20; ++i) w += mean[i] / 20;
    windows.push_back(w);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) EXPECT_LT(windows[i], windows[i - 1]) << "window " << i;
}

}  // namespace
}  // namespace glossmt
