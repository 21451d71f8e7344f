#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"
#include "vitforge/train.hpp"

using namespace vitforge;

namespace {

ViTConfig cfg2() { return ViTConfig::tiny(2); }

// Three of class 0 for every one of class 1.
LabeledDataset imbalanced(std::size_t n) {
  auto ds = vitforge::testing::pattern_dataset(n, 8, 4);
  for (std::size_t i = 0; i < n; ++i) ds.samples[i].label = i % 4 == 3 ? 1 : 0;
  return ds;
}

EpochLoopResult run_sequence(const std::vector<double>& losses, std::size_t patience) {
  TrainConfig c;
  c.epochs = losses.size();
  c.patience = patience;
  return run_epochs(c, [&](std::size_t e) {
    EpochLog l;
    l.test_loss = losses[e - 1];
    return l;
  });
}

}  // namespace

TEST(CrossEntropy, ForcedValues) {
  std::vector<std::int64_t> l0 = {0};
  EXPECT_NEAR(cross_entropy(Tensor<double>({1, 5}, 0.0), l0), std::log(5.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Tensor<double>({1, 2}, 0.0), l0), std::log(2.0), 1e-15);
  const float big = cross_entropy(Tensor<float>::matrix({{1000.f, 0.f}}), l0);
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 0.f, 1e-6f);
  std::vector<std::int64_t> l1 = {1};
  EXPECT_NEAR(cross_entropy(Tensor<float>::matrix({{1000.f, 0.f}}), l1), 1000.f, 1e-3f);
}

TEST(CrossEntropy, MeanOverRowsAndLabelChecks) {
  std::vector<std::int64_t> labels = {0, 1};
  auto logits = Tensor<double>::matrix({{0, 0}, {0, std::log(3.0)}});
  EXPECT_NEAR(cross_entropy(logits, labels), 0.5 * (std::log(2.0) + std::log(4.0 / 3.0)), 1e-15);
  std::vector<std::int64_t> bad = {0, 2};
  try {
    cross_entropy(logits, bad);
    FAIL();
  } catch (const LabelError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({3}, std::vector<double>{1, -2, 3}), g({3}, 0.0);
  const auto before = p;
  std::vector<Tensor<double>*> ps = {&p};
  std::vector<const Tensor<double>*> gs = {&g};
  auto state = AdamState<double>::zeros_like(gs);
  TrainConfig c;
  adam_step<double>(ps, gs, state, c);
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  TrainConfig c;
  c.learning_rate = 0.01;
  for (double g0 : {0.3, -2.0, 1e-3}) {
    Tensor<double> p = Tensor<double>::scalar(1.0), g = Tensor<double>::scalar(g0);
    std::vector<Tensor<double>*> ps = {&p};
    std::vector<const Tensor<double>*> gs = {&g};
    auto state = AdamState<double>::zeros_like(gs);
    adam_step<double>(ps, gs, state, c);
    EXPECT_NEAR(p.item(), 1.0 - 0.01 * g0 / (std::abs(g0) + 1e-8), 1e-15);
  }
}

TEST(Adam, QuadraticTrajectoryMatchesScalarOracle) {
  TrainConfig c;
  c.learning_rate = 0.1;
  Tensor<double> p = Tensor<double>::scalar(1.0);
  std::vector<Tensor<double>*> ps = {&p};
  Tensor<double> g = Tensor<double>::scalar(0);
  std::vector<const Tensor<double>*> gs = {&g};
  auto state = AdamState<double>::zeros_like(gs);
  vitforge::testing::ScalarAdam oracle{0.1, 0.9, 0.999, 1e-8};
  double theta = 1.0;
  for (int step = 0; step < 10; ++step) {
    g[0] = 2 * p.item();  // d(theta^2)
    adam_step<double>(ps, gs, state, c);
    theta = oracle.step(theta, 2 * theta);
    EXPECT_NEAR(p.item(), theta, 1e-12) << "step " << step;
  }
  EXPECT_EQ(state.t, 10u);
}

TEST(Adam, MismatchedSlotsRejected) {
  Tensor<double> p({2}), g({3});
  std::vector<Tensor<double>*> ps = {&p};
  std::vector<const Tensor<double>*> gs = {&g};
  std::vector<const Tensor<double>*> pc = {&p};
  auto state = AdamState<double>::zeros_like(pc);
  EXPECT_THROW(adam_step<double>(ps, gs, state, TrainConfig{}), DimensionError);
}

TEST(EarlyStopping, PlateauStopsAfterPatience) {
  auto r = run_sequence({3.0, 2.0, 2.5, 2.6, 1.0, 0.5}, 2);
  EXPECT_EQ(r.logs.size(), 4u);
  EXPECT_EQ(r.best_epoch, 2u);
  EXPECT_TRUE(r.stopped_early);
}

TEST(EarlyStopping, ImprovingRunsAllEpochs) {
  auto r = run_sequence({5, 4, 3, 2, 1}, 1);
  EXPECT_EQ(r.logs.size(), 5u);
  EXPECT_EQ(r.best_epoch, 5u);
  EXPECT_FALSE(r.stopped_early);
}

TEST(EarlyStopping, ImprovementBelowDeltaIsStale) {
  auto r = run_sequence({1.0, 1.0 - 1e-7, 1.0 - 2e-7, 0.5}, 2);
  EXPECT_EQ(r.logs.size(), 3u);
  EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.patience, 10u);
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Evaluate, ConstantMajorityHead) {
  auto ds = imbalanced(12);
  auto p = init_params<float>(cfg2(), 1);
  p.head_weight.fill(0);
  p.head_bias = Tensor<float>({2}, std::vector<float>{1.f, 0.f});
  auto r = evaluate(cfg2(), p, ds, 5);
  EXPECT_EQ(r.report.accuracy, 75.0);
  EXPECT_EQ(r.report.balanced_accuracy, 50.0);
  EXPECT_FALSE(r.report.precision.per_class[1].has_value());
}

TEST(Evaluate, PureAndPooledLoss) {
  auto ds = vitforge::testing::pattern_dataset(11, 8, 5);
  auto p = init_params<float>(cfg2(), 2);
  auto a = evaluate(cfg2(), p, ds, 3), b = evaluate(cfg2(), p, ds, 3);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.predictions, b.predictions);
  EXPECT_EQ(a.probabilities, b.probabilities);
  auto all = make_batches<float>(ds, ds.size(), 8);
  const double pooled = cross_entropy(forward(cfg2(), p, all[0].images), all[0].labels);
  EXPECT_NEAR(a.loss, pooled, 1e-6);
}

TEST(TrainStep, NonFiniteLossRaises) {
  auto ds = vitforge::testing::pattern_dataset(4, 8, 6);
  auto p = init_params<float>(cfg2(), 3);
  p.head_bias[0] = std::numeric_limits<float>::infinity();
  auto adam = AdamState<float>::zeros_like(param_pointers(std::as_const(p)));
  auto batch = make_batches<float>(ds, 4, 8)[0];
  EXPECT_THROW(train_step(cfg2(), p, adam, batch, TrainConfig{}), NumericalError);
}

TEST(TrainStep, ReducesLossOnFixedBatch) {
  auto ds = vitforge::testing::pattern_dataset(8, 8, 7);
  auto p = init_params<float>(cfg2(), 4);
  TrainConfig c;
  c.learning_rate = 1e-3;
  auto adam = AdamState<float>::zeros_like(param_pointers(std::as_const(p)));
  auto batch = make_batches<float>(ds, 8, 8)[0];
  const double first = train_step(cfg2(), p, adam, batch, c).loss;
  double last = first;
  for (int i = 0; i < 20; ++i) last = train_step(cfg2(), p, adam, batch, c).loss;
  EXPECT_LT(last, first);
}

TEST(Fit, DeterministicLogsAndBestSnapshot) {
  auto train = vitforge::testing::pattern_dataset(16, 8, 8);
  auto test = vitforge::testing::pattern_dataset(6, 8, 9);
  TrainConfig c;
  c.epochs = 6;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.patience = 2;
  c.seed = 3;
  std::vector<ViTParams<float>> snapshots;
  auto observe = [&](const EpochLog&, const ViTParams<float>& p, bool) { snapshots.push_back(p); };
  auto a = fit(cfg2(), init_params<float>(cfg2(), 5), train, test, c, observe);
  auto b = fit(cfg2(), init_params<float>(cfg2(), 5), train, test, c);
  ASSERT_EQ(a.logs.size(), b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i)
    EXPECT_EQ(to_json(a.logs[i]).dump(), to_json(b.logs[i]).dump());
  ASSERT_GE(a.best_epoch, 1u);
  EXPECT_EQ(a.best_params.head_weight, snapshots[a.best_epoch - 1].head_weight);
  EXPECT_EQ(a.last_params.head_weight, snapshots.back().head_weight);
  double best = 1e300;
  for (const auto& l : a.logs) best = std::min(best, l.test_loss);
  EXPECT_EQ(a.logs[a.best_epoch - 1].test_loss, best);
}

TEST(Fit, RejectsClassCountMismatch) {
  auto ds = vitforge::testing::pattern_dataset(4, 8, 1);
  EXPECT_THROW(fit(ViTConfig::tiny(3), init_params<float>(ViTConfig::tiny(3), 0), ds, ds, TrainConfig{}),
               ConfigError);
  LabeledDataset empty = ds.subset({});
  EXPECT_THROW(fit(cfg2(), init_params<float>(cfg2(), 0), empty, ds, TrainConfig{}), ConfigError);
}
