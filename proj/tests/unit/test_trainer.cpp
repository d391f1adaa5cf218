#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "test_support.hpp"
#include "twopass/checkpoint.hpp"
#include "twopass/error.hpp"
#include "twopass/trainer.hpp"

namespace twopass {
namespace {

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden = 8;
  c.filter = 16;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 12;
  return c;
}

/// Reference update written directly from the ADAM equations.
struct RefAdam {
  double b1, b2, eps;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& theta, const std::vector<double>& g, double lr) {
    if (m.empty()) m.assign(theta.size(), 0.0), v.assign(theta.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      theta[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto w = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  ParameterList<double> params = {{"w", w}};
  w.grad();
  AdamState<double> state;
  adam_step(params, state, 0.1);
  EXPECT_EQ(std::vector<double>(w.values().begin(), w.values().end()),
            (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto w = Tensor<double>::from({1}, {0.0}, true);
  ParameterList<double> params = {{"w", w}};
  w.grad()[0] = 1.0;
  AdamState<double> state;
  adam_step(params, state, 0.1);
  EXPECT_NEAR(w.values()[0], -0.1 / (1.0 + 1e-6), 1e-15);
  EXPECT_NEAR(w.values()[0], -0.0999999, 1e-7);
}

TEST(Adam, TraceMatchesReferenceOverHundredSteps) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> init(10);
  for (auto& x : init) x = d(rng);
  auto w = Tensor<double>::from({10}, init, true);
  ParameterList<double> params = {{"w", w}};
  AdamState<double> state;
  RefAdam ref{0.85, 0.997, 1e-6};
  std::vector<double> theta = init;
  LrSchedule sched;
  sched.lr = 0.01;
  sched.warmup = 10;
  for (int step = 0; step < 100; ++step) {
    std::vector<double> g(10);
    for (std::size_t i = 0; i < 10; ++i) g[i] = std::sin(theta[i] * (step + 1)) + 0.1 * d(rng);
    for (std::size_t i = 0; i < 10; ++i) w.grad()[i] = g[i];
    adam_step(params, state, sched.at(step));
    ref.step(theta, g, sched.at(step));
    for (std::size_t i = 0; i < 10; ++i) ASSERT_NEAR(w.values()[i], theta[i], 1e-12) << step;
  }
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto a = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto b = Tensor<double>::from({2}, {3.0, 4.0}, true);
  ParameterList<double> params = {{"layer.a", a}, {"layer.b", b}};
  a.grad()[0] = 1.0;
  b.grad()[1] = std::nan("");
  AdamState<double> state;
  try {
    adam_step(params, state, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos) << e.what();
  }
  EXPECT_EQ(a.values()[0], 1.0);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, ClippingRescalesGlobalNorm) {
  auto w = Tensor<double>::from({2}, {0.0, 0.0}, true);
  ParameterList<double> params = {{"w", w}};
  w.grad()[0] = 3.0;
  w.grad()[1] = 4.0;
  AdamState<double> state;
  adam_step(params, state, 0.1, {}, 1.0);
  // First ADAM step is sign-like regardless; the moments see the clipped gradient.
  EXPECT_NEAR(state.m[0][0], 0.15 * 0.6, 1e-15);
  EXPECT_NEAR(state.m[0][1], 0.15 * 0.8, 1e-15);
}

TEST(Schedule, InverseSqrtWithWarmup) {
  LrSchedule s;
  s.lr = 1.0;
  s.warmup = 4;
  EXPECT_DOUBLE_EQ(s.at(0), 0.25);
  EXPECT_DOUBLE_EQ(s.at(3), 1.0);
  EXPECT_DOUBLE_EQ(s.at(15), 0.5);
  s.kind = LrSchedule::Kind::constant;
  EXPECT_DOUBLE_EQ(s.at(99), 1.0);
}

class BatchFixture : public ::testing::Test {
 protected:
  Vocab v = testing::synthetic_vocab(10);
  VocabPartition p = partition_odd(v);
  std::vector<TemplatedSentence> data = [this] {
    std::vector<TemplatedSentence> out;
    for (const auto& s : testing::random_sentences(v, 200, 12, 3)) out.push_back(split_sentence(s, p));
    return out;
  }();
};

TEST_F(BatchFixture, BatchesCoverEverySentenceOnceWithinBudget) {
  const auto batches = make_batches(data, 64, 1);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t longest = 0;
    for (std::size_t i : b) longest = std::max(longest, data[i].source_len());
    EXPECT_LE(b.size() * longest, 64u);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(seen, all);
}

TEST_F(BatchFixture, BatchesAreDeterministicPerSeedAndEpoch) {
  EXPECT_EQ(make_batches(data, 64, 1, 0), make_batches(data, 64, 1, 0));
  EXPECT_NE(make_batches(data, 64, 1, 0), make_batches(data, 64, 1, 1));
  EXPECT_NE(make_batches(data, 64, 1, 0), make_batches(data, 64, 2, 0));
}

TEST_F(BatchFixture, GatherMatchesMakeBatch) {
  const std::vector<std::size_t> idx = {4, 0, 9};
  const std::vector<TemplatedSentence> picked = {data[4], data[0], data[9]};
  const Batch a = gather_batch(data, idx);
  const Batch b = make_batch(picked);
  EXPECT_EQ(a.p1_input, b.p1_input);
  EXPECT_EQ(a.p2_targets, b.p2_targets);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(LogFormat, HeaderAndEmptyValidation) {
  const std::vector<LogRow> rows = {{0, 2.5, std::nullopt, 0.001, 3.0}, {1, 2.0, 1.75, 0.002, 6.0}};
  const auto text = format_log(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,train_loss,valid_loss,lr,wall_ms");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

class TrainFixture : public ::testing::Test {
 protected:
  Vocab v = testing::synthetic_vocab(8);
  VocabPartition p = partition_odd(v);
  std::vector<TemplatedSentence> data = [this] {
    std::vector<TemplatedSentence> out;
    for (const auto& s : testing::random_sentences(v, 40, 8, 5)) out.push_back(split_sentence(s, p));
    return out;
  }();

  TrainConfig config(std::uint64_t steps, const std::filesystem::path& dir = {}) const {
    TrainConfig c;
    c.schedule.lr = 0.01;
    c.schedule.warmup = 5;
    c.batch_tokens = 48;
    c.max_steps = steps;
    c.eval_every = 5;
    c.seed = 3;
    c.checkpoint_dir = dir;
    return c;
  }
  std::unique_ptr<LanguageModel<double>> model(std::uint64_t seed = 1) const {
    return make_model<double>("two_pass", tiny(v.size()), p, SupportMode::full, seed);
  }
};

TEST_F(TrainFixture, ZeroLearningRateFreezesParameters) {
  auto m = model();
  std::vector<double> before;
  for (const auto& prm : m->parameters()) before.insert(before.end(), prm.tensor.values().begin(), prm.tensor.values().end());
  auto cfg = config(5);
  cfg.schedule.kind = LrSchedule::Kind::constant;
  cfg.schedule.lr = 0.0;
  Trainer<double>(*m, cfg).run(data, data);
  std::vector<double> after;
  for (const auto& prm : m->parameters()) after.insert(after.end(), prm.tensor.values().begin(), prm.tensor.values().end());
  EXPECT_EQ(before, after);
}

TEST_F(TrainFixture, LossDecreasesAndBestIsKept) {
  auto m = model();
  const double start = corpus_loss(*m, std::span<const TemplatedSentence>(data));
  auto cfg = config(60);
  cfg.schedule.lr = 0.02;
  const auto result = Trainer<double>(*m, cfg).run(data, data);
  EXPECT_EQ(result.steps, 60u);
  EXPECT_EQ(result.log.size(), 60u);
  EXPECT_LT(result.best_valid_loss, start);
  EXPECT_NEAR(corpus_loss(*m, std::span<const TemplatedSentence>(data)), result.best_valid_loss, 1e-12);
}

TEST_F(TrainFixture, SameSeedSameTrajectory) {
  auto a = model(), b = model();
  const auto ra = Trainer<double>(*a, config(20)).run(data, data);
  const auto rb = Trainer<double>(*b, config(20)).run(data, data);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    ASSERT_EQ(ra.log[i].train_loss, rb.log[i].train_loss) << i;
    ASSERT_EQ(ra.log[i].valid_loss, rb.log[i].valid_loss) << i;
  }
}

TEST_F(TrainFixture, ResumeContinuesBitIdentically) {
  const auto dir = testing::scratch_dir("resume");
  auto full = model();
  const auto whole = Trainer<double>(*full, config(20)).run(data, data);

  auto first = model();
  Trainer<double>(*first, config(10, dir), &v).run(data, data);
  ASSERT_TRUE(std::filesystem::exists(dir / "latest.ckpt"));
  const auto ckpt = load_checkpoint(dir / "latest.ckpt");
  EXPECT_EQ(ckpt.get_u64("step"), 10u);

  auto second = model(99);  // different init, overwritten by the checkpoint
  Trainer<double> t(*second, config(20));
  t.resume(ckpt);
  EXPECT_EQ(t.step(), 10u);
  const auto rest = t.run(data, data);
  ASSERT_EQ(rest.log.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_EQ(rest.log[i].step, whole.log[10 + i].step);
    ASSERT_EQ(rest.log[i].train_loss, whole.log[10 + i].train_loss) << i;
  }
}

TEST_F(TrainFixture, EmptyTrainingSetIsAnError) {
  auto m = model();
  EXPECT_THROW(Trainer<double>(*m, config(1)).run({}, data), DataError);
}

TEST_F(TrainFixture, ConfigValidation) {
  auto cfg = config(1);
  cfg.batch_tokens = 4;
  EXPECT_THROW(cfg.validate(12), UsageError);
}

}  // namespace
}  // namespace twopass
