#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "test_support.hpp"
#include "twopass/error.hpp"
#include "twopass/eval.hpp"

namespace twopass {
namespace {

std::size_t independent_baseline_hidden(const ModelConfig& c) {
  const std::size_t v = c.vocab_size, h = c.hidden, f = c.filter, l = c.layers;
  const std::size_t self = 4 * h * h + 2 * h * f + f + 9 * h;
  const std::size_t cross = 8 * h * h + 2 * h * f + f + 15 * h;
  const std::size_t target = v * h + l * (2 * self + cross);
  const std::size_t step = std::lcm(c.heads, std::size_t{2});
  for (std::size_t H = step;; H += step) {
    if (v * H + l * (4 * H * H + 2 * H * f + f + 9 * H) >= target) return H;
  }
}

TEST(MatchBaseline, AgreesWithDirectSearch) {
  for (const auto& cfg : {ModelConfig::desk(2000), ModelConfig::desk(200), ModelConfig::paper(65536)}) {
    const auto m = match_baseline(cfg);
    EXPECT_EQ(m.hidden, independent_baseline_hidden(cfg));
    EXPECT_EQ(m.two_pass_params, two_pass_parameter_count(cfg));
    ModelConfig b = cfg;
    b.hidden = m.hidden;
    EXPECT_EQ(m.baseline_params, baseline_parameter_count(b));
    EXPECT_GE(m.baseline_params, m.two_pass_params);
    EXPECT_GE(m.relative_gap, 0.0);
    EXPECT_EQ(m.hidden % cfg.heads, 0u);
  }
}

TEST(MatchBaseline, ZeroLayersKeepsHidden) {
  auto cfg = ModelConfig::desk(500);
  cfg.layers = 0;
  EXPECT_EQ(match_baseline(cfg).hidden, cfg.hidden);
}

TEST(Perplexity, ZeroBaselineIsVocabularySize) {
  const Vocab v = testing::synthetic_vocab(10);
  ModelConfig cfg;
  cfg.vocab_size = v.size();
  cfg.hidden = 8;
  cfg.filter = 16;
  cfg.layers = 1;
  BaselineModel<double> b(cfg, SupportMode::full, 1);
  b.zero_parameters();
  const auto sents = testing::random_sentences(v, 30, 10, 1);
  EXPECT_NEAR(corpus_perplexity(b, std::span<const Sentence>(sents)), static_cast<double>(v.size()), 1e-9);
  EXPECT_THROW(corpus_perplexity(b, std::span<const Sentence>()), DataError);
}

TEST(Perplexity, TokenWeightedNotSentenceAveraged) {
  const Vocab v = testing::synthetic_vocab(6);
  ModelConfig cfg;
  cfg.vocab_size = v.size();
  cfg.hidden = 8;
  cfg.filter = 16;
  cfg.layers = 1;
  TwoPassModel<double> m(cfg, partition_odd(v), SupportMode::full, 3);
  const auto sents = testing::random_sentences(v, 12, 9, 2);
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& s : sents) {
    const auto sc = sentence_log_prob(m, s);
    nll -= sc.logp1 + sc.logp2;
    tokens += s.ids.size();
  }
  EXPECT_NEAR(corpus_perplexity(m, std::span<const Sentence>(sents), 30),
              std::exp(nll / static_cast<double>(tokens)), 1e-9);
}

TEST(Report, RowsSortWorstToBestFailuresFirst) {
  std::vector<PerplexityRow> rows(4);
  rows[0].name = "a";
  rows[0].valid = 10;
  rows[1].name = "b";
  rows[1].failed = true;
  rows[2].name = "c";
  rows[2].valid = 30;
  rows[3].name = "d";
  rows[3].valid = 20;
  sort_rows(rows);
  EXPECT_EQ(rows[0].name, "b");
  EXPECT_EQ(rows[1].name, "c");
  EXPECT_EQ(rows[2].name, "d");
  EXPECT_EQ(rows[3].name, "a");
}

TEST(Report, ReferenceTableHasSevenModels) {
  const auto refs = reference_perplexities();
  EXPECT_EQ(refs.size(), 7u);
  for (const auto& r : refs) EXPECT_GT(r.test, 1.0);
}

TEST(Spec, ParsesSectionsAndOverrides) {
  std::istringstream in(
      "[corpus]\ntrain = train.txt\ntest = /abs/test.txt\nmax_vocab = 300\n"
      "[model]\nhidden = 16\nlayers = 1\n[train]\nmax_steps = 7\nlr_grid = 0.01, 0.001\n"
      "[runs]\nnames = odd_first, baseline\n[run.baseline]\nhidden = 24\n");
  const auto s = ExperimentSpec::parse(in, "/data");
  EXPECT_EQ(s.train_path, std::filesystem::path("/data/train.txt"));
  EXPECT_EQ(s.test_path, std::filesystem::path("/abs/test.txt"));
  EXPECT_EQ(s.max_vocab, 300u);
  EXPECT_EQ(s.model.hidden, 16u);
  EXPECT_EQ(s.train.max_steps, 7u);
  EXPECT_EQ(s.lr_grid, (std::vector<double>{0.01, 0.001}));
  EXPECT_EQ(s.runs, (std::vector<std::string>{"odd_first", "baseline"}));
  EXPECT_EQ(s.overrides.at("baseline").at("hidden"), "24");
  std::istringstream again(
      "[corpus]\ntrain = train.txt\ntest = /abs/test.txt\nmax_vocab = 300\n"
      "[model]\nhidden = 16\nlayers = 1\n[train]\nmax_steps = 7\nlr_grid = 0.01, 0.001\n"
      "[runs]\nnames = odd_first, baseline\n[run.baseline]\nhidden = 24\n");
  EXPECT_EQ(ExperimentSpec::parse(again, "/data").canonical(), s.canonical());
}

TEST(Spec, RejectsUnknownKeysAndRuns) {
  std::istringstream a("[corpus]\ntrain = t\n[model]\nwidth = 3\n");
  EXPECT_THROW(ExperimentSpec::parse(a), UsageError);
  std::istringstream b("[corpus]\ntrain = t\n[runs]\nnames = sideways_first\n");
  EXPECT_THROW(ExperimentSpec::parse(b), UsageError);
  std::istringstream c("[model]\nhidden = 8\n");
  EXPECT_THROW(ExperimentSpec::parse(c), UsageError);
  std::istringstream d("[corpus]\ntrain = t\n[runs]\nnames = baseline\n[run.odd_first]\nlr = 1\n");
  EXPECT_THROW(ExperimentSpec::parse(d), UsageError);
}

class CompareSmoke : public ::testing::Test {
 protected:
  static std::filesystem::path write_corpus(const std::filesystem::path& dir) {
    std::mt19937_64 rng(5);
    const std::vector<std::string> words = {"the", "a", "cat", "dog", "sat", "ran", "on", "mat",
                                            "and", "it", "was", "big", "small", "."};
    auto line = [&] {
      std::string s;
      const std::size_t n = 2 + rng() % 8;
      for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[rng() % words.size()];
      return s + "\n";
    };
    std::ofstream train(dir / "train.txt"), test(dir / "test.txt");
    for (int i = 0; i < 120; ++i) train << line();
    for (int i = 0; i < 20; ++i) test << line();
    std::ofstream spec(dir / "spec.ini");
    spec << "[corpus]\ntrain = train.txt\ntest = test.txt\nmax_vocab = 40\nmax_len = 16\n"
            "[model]\nhidden = 8\nfilter = 16\nheads = 2\nlayers = 1\nprecision = f64\n"
            "[train]\nmax_steps = 12\nbatch_tokens = 64\neval_every = 6\nwarmup = 4\n"
            "lr_grid = 0.01\n[runs]\nnames = odd_first, common_first, baseline\n";
    return dir / "spec.ini";
  }
};

TEST_F(CompareSmoke, ReportIsWellFormedAndDeterministic) {
  const auto dir = testing::scratch_dir("compare");
  const auto spec = ExperimentSpec::load(write_corpus(dir));
  const auto a = run_comparison(spec, dir / "a");
  const auto b = run_comparison(spec, dir / "b");
  ASSERT_EQ(a.rows.size(), 3u);
  for (const auto& r : a.rows) {
    EXPECT_FALSE(r.failed) << r.name << ": " << r.error;
    for (double ppl : {r.train, r.valid, r.test}) {
      EXPECT_TRUE(std::isfinite(ppl)) << r.name;
      EXPECT_LE(ppl, 40.0 * 40.0) << r.name;
      EXPECT_GT(ppl, 1.0) << r.name;
    }
  }
  for (std::size_t i = 1; i < a.rows.size(); ++i) EXPECT_GE(a.rows[i - 1].valid, a.rows[i].valid);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_EQ(read_file(dir / "a" / "report.csv"), read_file(dir / "b" / "report.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "curves.svg"));
  const auto csv = a.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(a.to_text().find("token-weighted"), std::string::npos);
}

}  // namespace
}  // namespace twopass
