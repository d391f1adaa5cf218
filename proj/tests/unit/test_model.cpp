#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "twopass/error.hpp"
#include "twopass/grad_check.hpp"
#include "twopass/model.hpp"

namespace twopass {
namespace {

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden = 8;
  c.filter = 16;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 16;
  return c;
}

/// Every ordinary id and UNK legal; ids in `second` go to the second pass.
VocabPartition partition_over(std::size_t vocab, const std::vector<TokenId>& second,
                              Strategy s = Strategy::odd_first) {
  std::vector<std::uint8_t> first(vocab, 0);
  first[kEos] = 1;
  first[kUnk] = 1;
  for (std::size_t i = kNumSpecials; i < vocab; ++i) first[i] = 1;
  for (TokenId id : second) first[id] = 0;
  return VocabPartition(s, std::move(first));
}

VocabPartition all_first(std::size_t vocab) { return partition_over(vocab, {}, Strategy::all_first); }

std::vector<Sentence> random_model_sentences(std::size_t vocab, std::size_t count,
                                             std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> legal = {kUnk};
  for (std::size_t i = kNumSpecials; i < vocab; ++i) legal.push_back(static_cast<TokenId>(i));
  std::vector<Sentence> out(count);
  for (auto& s : out) {
    const std::size_t n = rng() % max_len;
    for (std::size_t i = 0; i < n; ++i) s.ids.push_back(legal[rng() % legal.size()]);
    s.ids.push_back(kEos);
  }
  return out;
}

TEST(ClosedForm, ZeroParameterLossIsFourteenLnSixteenOverTen) {
  const auto p = partition_over(16, {5, 6, 7, 8, 9});
  TwoPassModel<double> m(tiny(16), p, SupportMode::full, 1);
  m.zero_parameters();
  const auto t = testing::make_templated(p, 10, {0, 3, 4, 8});
  ASSERT_EQ(t.tmpl.size(), 10u);
  ASSERT_EQ(t.fills.size(), 4u);
  const auto score = sentence_log_prob(m, reconstruct(t, p));
  EXPECT_NEAR(score.loss, 14.0 * std::log(16.0) / 10.0, 1e-12);
  EXPECT_NEAR(score.loss, 3.88162, 1e-5);
  EXPECT_NEAR(score.logp1, -10.0 * std::log(16.0), 1e-12);
  EXPECT_NEAR(score.logp2, -4.0 * std::log(16.0), 1e-12);
  EXPECT_EQ(score.source_len, 10u);
}

TEST(ClosedForm, EosOnlySentence) {
  const auto p = partition_over(10, {5});
  TwoPassModel<double> m(tiny(10), p, SupportMode::full, 1);
  m.zero_parameters();
  const auto score = sentence_log_prob(m, Sentence{{kEos}, {}});
  EXPECT_NEAR(score.logp1, -std::log(10.0), 1e-12);
  EXPECT_EQ(score.logp2, 0.0);
  EXPECT_NEAR(score.loss, std::log(10.0), 1e-12);
}

TEST(ClosedForm, SentenceWithoutSecondPassTokensScoresTemplateOnly) {
  const auto p = partition_over(10, {5});
  TwoPassModel<double> m(tiny(10), p, SupportMode::full, 3);
  const Sentence s{{6, 7, 6, kEos}, {}};
  const auto t = split_sentence(s, p);
  ASSERT_EQ(t.placeholders(), 0u);
  const auto score = sentence_log_prob(m, s);
  EXPECT_EQ(score.logp2, 0.0);
  EXPECT_DOUBLE_EQ(score.logp1, log_prob_template(m, t));
  EXPECT_DOUBLE_EQ(score.loss, -score.logp1 / 4.0);
}

TEST(ClosedForm, RenormalizedZeroModelUsesSupportSizes) {
  // 10 ids: first = {EOS, UNK, 7, 8, 9}, second = {5, 6}.
  const auto p = partition_over(10, {5, 6});
  TwoPassModel<double> m(tiny(10), p, SupportMode::renormalized, 1);
  m.zero_parameters();
  const Sentence s{{5, 7, 6, 6, kEos}, {}};
  const auto score = sentence_log_prob(m, s);
  // p1 support: 5 first-pass ids plus the placeholder.
  EXPECT_NEAR(score.logp1, -5.0 * std::log(6.0), 1e-12);
  EXPECT_NEAR(score.logp2, -3.0 * std::log(2.0), 1e-12);
}

TEST(ClosedForm, ZeroBaselineIsLnVocabPerToken) {
  BaselineModel<double> b(tiny(16), SupportMode::full, 1);
  b.zero_parameters();
  const Sentence s{{5, 6, 7, kEos}, {}};
  const auto score = baseline_log_prob(b, s);
  EXPECT_NEAR(score.logp1, -4.0 * std::log(16.0), 1e-12);
  EXPECT_EQ(score.logp2, 0.0);
  EXPECT_NEAR(score.loss, std::log(16.0), 1e-12);
}

TEST(Support, RenormalizedDistributionsLiveOnTheirPass) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::renormalized, 5);
  const std::vector<TokenId> prefix = {kPlaceholder, 6};
  const auto lp1 = m.next_template_logprobs(prefix);
  double mass = 0;
  for (std::size_t id = 0; id < lp1.size(); ++id) {
    const auto t = static_cast<TokenId>(id);
    const bool legal = p.is_first_pass(t) || t == kPlaceholder;
    if (legal) {
      mass += std::exp(lp1[id]);
    } else {
      EXPECT_TRUE(std::isinf(lp1[id]) && lp1[id] < 0) << id;
    }
  }
  EXPECT_NEAR(mass, 1.0, 1e-12);
  const std::vector<TokenId> tmpl = {kPlaceholder, 6, kPlaceholder, kEos};
  const std::vector<TokenId> fill_prefix = {5, 6};
  const auto lp2 = m.next_fill_logprobs(tmpl, fill_prefix);
  mass = 0;
  for (std::size_t id = 0; id < lp2.size(); ++id) {
    if (p.is_second_pass(static_cast<TokenId>(id))) {
      mass += std::exp(lp2[id]);
    } else {
      EXPECT_TRUE(std::isinf(lp2[id]) && lp2[id] < 0) << id;
    }
  }
  EXPECT_NEAR(mass, 1.0, 1e-12);
}

TEST(Support, FullModeSpreadsMassOverWholeVocabulary) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::full, 5);
  double mass = 0;
  for (double lp : m.next_template_logprobs({})) {
    EXPECT_TRUE(std::isfinite(lp));
    mass += std::exp(lp);
  }
  EXPECT_NEAR(mass, 1.0, 1e-12);
}

TEST(Support, ModeNames) {
  EXPECT_EQ(parse_support_mode(to_string(SupportMode::full)), SupportMode::full);
  EXPECT_EQ(parse_support_mode(to_string(SupportMode::renormalized)), SupportMode::renormalized);
  EXPECT_THROW(parse_support_mode("partial"), UsageError);
}

TEST(Scoring, ChainRuleMatchesNextTokenQueries) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::full, 7);
  const Sentence s{{5, 6, 8, 7, 11, kEos}, {}};
  const auto t = split_sentence(s, p);
  double logp1 = 0;
  for (std::size_t i = 0; i < t.tmpl.size(); ++i) {
    logp1 += m.next_template_logprobs(std::span(t.tmpl).first(i))[t.tmpl[i]];
  }
  double logp2 = 0;
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    if (t.tmpl[i] != kPlaceholder) continue;
    logp2 += m.next_fill_logprobs(t.tmpl, std::span(s.ids).first(i))[s.ids[i]];
  }
  const auto score = sentence_log_prob(m, s);
  EXPECT_NEAR(score.logp1, logp1, 1e-10);
  EXPECT_NEAR(score.logp2, logp2, 1e-10);
  EXPECT_NEAR(log_prob_template(m, t), logp1, 1e-10);
  EXPECT_NEAR(log_prob_fill(m, t), logp2, 1e-10);
}

TEST(Scoring, BatchedForwardMatchesSingleSentencesUnderPadding) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::full, 9);
  const auto sents = random_model_sentences(12, 7, 10, 3);
  std::vector<TemplatedSentence> data;
  for (const auto& s : sents) data.push_back(split_sentence(s, p));
  const Batch batch = make_batch(data);
  Tape<double> tape(false);
  const auto result = m.forward(tape, batch);
  double nll = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < sents.size(); ++i) {
    const auto single = sentence_log_prob(m, sents[i]);
    EXPECT_NEAR(result.logp1[i], single.logp1, 1e-10) << i;
    EXPECT_NEAR(result.logp2[i], single.logp2, 1e-10) << i;
    nll -= single.logp1 + single.logp2;
    tokens += sents[i].ids.size();
  }
  EXPECT_EQ(batch.tokens, tokens);
  EXPECT_NEAR(result.loss.item(), nll / static_cast<double>(tokens), 1e-12);
}

TEST(Scoring, ScoreSentencesKeepsInputOrder) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::full, 9);
  const auto sents = random_model_sentences(12, 25, 12, 4);
  const auto scores = score_sentences(m, std::span<const Sentence>(sents), 40);
  ASSERT_EQ(scores.size(), sents.size());
  for (std::size_t i = 0; i < sents.size(); ++i) {
    const auto single = sentence_log_prob(m, sents[i]);
    EXPECT_NEAR(scores[i].logp1 + scores[i].logp2, single.logp1 + single.logp2, 1e-10) << i;
    EXPECT_EQ(scores[i].source_len, sents[i].ids.size());
  }
  const auto text = format_scores(scores);
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), sents.size());
}

TEST(Batching, LayoutOfTeacherForcingInputs) {
  const auto p = partition_over(10, {5});
  const std::vector<TemplatedSentence> data = {split_sentence(Sentence{{5, 6, kEos}, {}}, p),
                                               split_sentence(Sentence{{kEos}, {}}, p)};
  const Batch b = make_batch(data);
  EXPECT_EQ(b.size, 2u);
  EXPECT_EQ(b.len, 3u);
  EXPECT_EQ(b.tokens, 4u);
  EXPECT_EQ(b.p1_input, (std::vector<TokenId>{kBos, kPlaceholder, 6, kBos, kPad, kPad}));
  EXPECT_EQ(b.src, (std::vector<TokenId>{kPlaceholder, 6, kEos, kEos, kPad, kPad}));
  EXPECT_EQ(b.p2_input, (std::vector<TokenId>{kBos, 5, 6, kBos, kPad, kPad}));
  EXPECT_EQ(b.p1_rows, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(b.p1_targets, (std::vector<TokenId>{kPlaceholder, 6, kEos, kEos}));
  EXPECT_EQ(b.p2_rows, (std::vector<std::size_t>{0}));
  EXPECT_EQ(b.p2_targets, (std::vector<TokenId>{5}));
  EXPECT_EQ(b.owner(3), 1u);
}

TEST(StructuralIdentity, AllFirstTwoPassEqualsBaseline) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto cfg = tiny(12);
    TwoPassModel<double> m(cfg, all_first(12), SupportMode::full, seed);
    BaselineModel<double> b(cfg, SupportMode::full, seed);
    for (const auto& s : random_model_sentences(12, 20, 12, seed)) {
      const auto a = sentence_log_prob(m, s);
      const auto c = baseline_log_prob(b, s);
      EXPECT_NEAR(a.loss, c.loss, 1e-9);
      EXPECT_EQ(a.logp2, 0.0);
    }
  }
}

TEST(StructuralIdentity, BaselineRejectsFillQueries) {
  BaselineModel<double> b(tiny(10), SupportMode::full, 1);
  const std::vector<TokenId> tmpl = {kEos};
  EXPECT_THROW(b.next_fill_logprobs(tmpl, {}), UsageError);
  EXPECT_EQ(b.kind(), "baseline");
  EXPECT_THROW(make_model<double>("triple", tiny(10), all_first(10), SupportMode::full, 1),
               UsageError);
}

TEST(Gradients, TwoPassLossMatchesFiniteDifferences) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::full, 13);
  std::vector<TemplatedSentence> data;
  for (const auto& s : random_model_sentences(12, 4, 6, 5)) data.push_back(split_sentence(s, p));
  const Batch batch = make_batch(data);
  const auto report = grad_check([&](Tape<double>& t) { return m.forward(t, batch).loss; },
                                 m.parameters(), {.coordinates = 60, .seed = 2});
  EXPECT_TRUE(report.pass) << report.worst << " " << report.max_rel_err;
  EXPECT_EQ(report.checked, 60u);
}

TEST(Gradients, RenormalizedLossMatchesFiniteDifferences) {
  const auto p = partition_over(12, {5, 8, 11});
  TwoPassModel<double> m(tiny(12), p, SupportMode::renormalized, 14);
  std::vector<TemplatedSentence> data;
  for (const auto& s : random_model_sentences(12, 4, 6, 6)) data.push_back(split_sentence(s, p));
  const Batch batch = make_batch(data);
  const auto report = grad_check([&](Tape<double>& t) { return m.forward(t, batch).loss; },
                                 m.parameters(), {.coordinates = 40, .seed = 3});
  EXPECT_TRUE(report.pass) << report.worst << " " << report.max_rel_err;
}

TEST(Sampling, SameSeedSameSamplesAndFillsMatchPlaceholders) {
  const auto p = partition_over(10, {5, 7});
  TwoPassModel<double> m(tiny(10), p, SupportMode::renormalized, 21);
  Sampler<double> plain(m, 8), memo(m, 8, true);
  std::mt19937_64 r1(5), r2(5);
  for (int i = 0; i < 50; ++i) {
    const auto a = plain.draw(r1);
    const auto b = memo.draw(r2);
    ASSERT_EQ(a.status, b.status);
    ASSERT_EQ(a.templated, b.templated);
    if (a.status == SampleStatus::ok) {
      EXPECT_EQ(a.templated.fills.size(), a.templated.placeholders());
      EXPECT_EQ(split_sentence(a.sentence, p), a.templated);
    }
  }
}

TEST(Sampling, FullModeCanFlagInvalidDraws) {
  const auto p = partition_over(10, {5, 7});
  TwoPassModel<double> m(tiny(10), p, SupportMode::full, 22);
  Sampler<double> s(m, 6, true);
  std::mt19937_64 rng(1);
  std::size_t ok = 0, other = 0;
  for (int i = 0; i < 300; ++i) (s.draw(rng).status == SampleStatus::ok ? ok : other) += 1;
  EXPECT_GT(ok, 0u);
  EXPECT_GT(other, 0u);
}

}  // namespace
}  // namespace twopass
