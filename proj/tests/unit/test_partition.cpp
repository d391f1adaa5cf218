#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "test_support.hpp"
#include "twopass/error.hpp"
#include "twopass/partition.hpp"

namespace twopass {
namespace {

using testing::vocab_from_text;

std::vector<Sentence> encode_all(const Vocab& v, const std::string& text) {
  std::istringstream in(text);
  return load_sentences(in, v, {}).sentences;
}

TEST(BalancedCutoff, DominantTokenAloneBalances) {
  const std::string text = "a b a c\na d\n";  // a covers 3 of 6 tokens
  const Vocab v = vocab_from_text(text);
  EXPECT_EQ(balanced_cutoff(v, encode_all(v, text)), 1u);
}

TEST(BalancedCutoff, SyntheticCountsPickSmallestImbalance) {
  // Ranks 0..3 with counts 4, 3, 2, 1: imbalance 2 at c=1, 4 at c=2, 8 at c=3.
  const std::string text = "a a a a b b b c c d\n";
  const Vocab v = vocab_from_text(text);
  EXPECT_EQ(balanced_cutoff(v, encode_all(v, text)), 1u);
}

TEST(BalancedCutoff, ExhaustiveScanFindsNothingBetter) {
  const Vocab v = vocab_from_text(
      "the cat sat on the mat\nthe dog ate the bone\na cat and a dog\nthe end\n");
  const auto sents = encode_all(v, "the cat sat on the mat\nthe dog ate the bone\na cat and a dog\nthe end\n");
  const std::size_t c = balanced_cutoff(v, sents);
  auto imbalance = [&](std::size_t cut) {
    long long common = 0, rare = 0;
    for (const auto& s : sents) {
      for (TokenId id : s.ids) {
        if (id == kEos) continue;
        (*v.rank(id) < cut ? common : rare) += 1;
      }
    }
    return std::llabs(common - rare);
  };
  for (std::size_t cut = 1; cut < v.ranked().size(); ++cut) {
    EXPECT_GE(imbalance(cut), imbalance(c)) << "cut " << cut;
    if (cut < c) EXPECT_GT(imbalance(cut), imbalance(c));
  }
}

TEST(PartitionFrequency, CommonAndRareAreComplements) {
  const Vocab v = testing::synthetic_vocab(10);
  const auto common = partition_frequency(v, 4, Strategy::common_first);
  const auto rare = partition_frequency(v, 4, Strategy::rare_first);
  EXPECT_TRUE(common.is_first_pass(kEos));
  EXPECT_TRUE(rare.is_first_pass(kEos));
  for (TokenId id : v.ranked()) {
    EXPECT_NE(common.is_first_pass(id), rare.is_first_pass(id)) << v.token(id);
    EXPECT_EQ(common.is_first_pass(id), *v.rank(id) < 4);
    EXPECT_NE(common.is_first_pass(id), common.is_second_pass(id));
  }
  for (TokenId id : {kPad, kBos, kPlaceholder}) {
    EXPECT_FALSE(common.is_first_pass(id));
    EXPECT_FALSE(common.is_second_pass(id));
  }
}

TEST(PartitionFrequency, LargestCutoffLeavesOneSecondPassToken) {
  const Vocab v = testing::synthetic_vocab(6);
  const std::size_t n = v.ranked().size();
  const auto p = partition_frequency(v, n - 1, Strategy::common_first);
  ASSERT_EQ(p.second_pass_ids().size(), 1u);
  EXPECT_EQ(p.second_pass_ids()[0], v.ranked()[n - 1]);
}

TEST(PartitionFrequency, CutoffOutOfRange) {
  const Vocab v = testing::synthetic_vocab(6);
  EXPECT_THROW(partition_frequency(v, 0, Strategy::common_first), UsageError);
  EXPECT_THROW(partition_frequency(v, v.ranked().size(), Strategy::common_first), UsageError);
}

TEST(PosLexicon, ParsesTags) {
  const auto lex = PosLexicon::parse("the\tDT\ncat\tNN\n");
  EXPECT_EQ(lex.tag("the"), std::optional<std::string_view>("DT"));
  EXPECT_FALSE(lex.tag("dog").has_value());
  EXPECT_TRUE(lex.is_function_word("the"));
  EXPECT_FALSE(lex.is_function_word("cat"));
  EXPECT_FALSE(lex.is_function_word("dog"));
}

TEST(PosLexicon, DuplicateKeepsLastEntry) {
  const auto lex = PosLexicon::parse("run\tVB\nrun\tNN\n");
  EXPECT_EQ(lex.tag("run"), std::optional<std::string_view>("NN"));
  EXPECT_EQ(lex.duplicates(), 1u);
}

TEST(PosLexicon, UnknownTagIsAnError) {
  EXPECT_THROW(PosLexicon::parse("run\tXX\n"), DataError);
}

TEST(PosLexicon, MalformedLineNamesLine) {
  try {
    PosLexicon::parse("the\tDT\nbroken line\n", "lex.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("lex.tsv:2"), std::string::npos) << e.what();
  }
}

TEST(PosLexicon, BeFormsAreFunctionWordsHaveIsNot) {
  const auto lex = PosLexicon::parse("had\tVBD\nwas\tVBD\n");
  EXPECT_TRUE(lex.is_function_word("was"));
  EXPECT_TRUE(lex.is_function_word("being"));
  EXPECT_FALSE(lex.is_function_word("had"));
}

TEST(PartitionPos, FunctionAndContentAreComplements) {
  const Vocab v = vocab_from_text("the cat sat on the mat . it was had\n");
  const auto lex = PosLexicon::parse("the\tDT\ncat\tNN\non\tIN\n.\t.\nit\tPRP\nhad\tVBD\n");
  const auto fn = partition_pos(v, lex, Strategy::function_first);
  const auto ct = partition_pos(v, lex, Strategy::content_first);
  for (TokenId id : v.ranked()) EXPECT_NE(fn.is_first_pass(id), ct.is_first_pass(id));
  EXPECT_TRUE(fn.is_first_pass(kEos) && ct.is_first_pass(kEos));
  EXPECT_TRUE(fn.is_first_pass(v.id("the")));
  EXPECT_TRUE(fn.is_first_pass(v.id("was")));  // be-form, untagged
  EXPECT_FALSE(fn.is_first_pass(v.id("had")));
  EXPECT_FALSE(fn.is_first_pass(v.id("sat")));  // absent from lexicon
  EXPECT_FALSE(fn.is_first_pass(kUnk));
}

TEST(PartitionPos, EmptyLexiconIsAnError) {
  const Vocab v = vocab_from_text("a b\n");
  EXPECT_THROW(partition_pos(v, PosLexicon{}, Strategy::function_first), DataError);
}

TEST(PartitionOdd, OddZeroBasedRanksGoFirst) {
  const Vocab v = testing::synthetic_vocab(3);  // ranks: w0 w1 w2 UNK
  const auto p = partition_odd(v);
  ASSERT_EQ(v.ranked().size(), 4u);
  EXPECT_FALSE(p.is_first_pass(v.ranked()[0]));
  EXPECT_TRUE(p.is_first_pass(v.ranked()[1]));
  EXPECT_FALSE(p.is_first_pass(v.ranked()[2]));
  EXPECT_TRUE(p.is_first_pass(v.ranked()[3]));
  EXPECT_TRUE(p.is_first_pass(kEos));
}

TEST(PartitionOdd, SingleTokenVocabularyIsAllSecondPass) {
  // With max_vocab 6 only "x" is kept; UNK has zero count and ranks after it.
  const Vocab v = vocab_from_text("x x x\n", 6);
  const auto p = partition_odd(v);
  EXPECT_FALSE(p.is_first_pass(v.id("x")));
  const auto t = split_sentence(Sentence{{v.id("x"), v.id("x"), kEos}, {}}, p);
  const std::vector<TokenId> expected = {kPlaceholder, kPlaceholder, kEos};
  EXPECT_EQ(t.tmpl, expected);
}

TEST(PartitionOdd, PerSentenceSplitMatchesZipfCounts) {
  const Vocab v = testing::synthetic_vocab(12);
  const auto sents = testing::random_sentences(v, 500, 12, 7);
  const auto p = partition_odd(v);
  std::size_t odd_tokens = 0, placeholders = 0, even_tokens = 0;
  for (const auto& s : sents) {
    for (TokenId id : s.ids) {
      if (id == kEos) continue;
      (*v.rank(id) % 2 == 1 ? odd_tokens : even_tokens) += 1;
    }
    placeholders += split_sentence(s, p).placeholders();
  }
  EXPECT_EQ(placeholders, even_tokens);
  EXPECT_GT(odd_tokens, 0u);
}

TEST(Partition, MembershipIsTotalOverLegalTokens) {
  const auto t = testing::load_table1();
  for (Strategy s : split_strategies()) {
    const auto p = t.partition(s);
    for (TokenId id = 0; id < static_cast<TokenId>(t.vocab.size()); ++id) {
      if (t.vocab.is_sentence_legal(id)) {
        EXPECT_NE(p.is_first_pass(id), p.is_second_pass(id)) << to_string(s) << " id " << id;
      }
    }
  }
}

TEST(Partition, FileRoundTrip) {
  const auto t = testing::load_table1();
  const auto dir = testing::scratch_dir("partition_rt");
  for (Strategy s : split_strategies()) {
    const auto p = t.partition(s);
    p.save(dir / "partition.txt", t.vocab);
    const auto text = read_file(dir / "partition.txt");
    EXPECT_EQ(text.rfind("strategy=" + std::string(to_string(s)), 0), 0u) << text.substr(0, 40);
    const auto q = VocabPartition::load(dir / "partition.txt", t.vocab);
    EXPECT_EQ(p, q);
    EXPECT_EQ(p.checksum(), q.checksum());
  }
}

TEST(Partition, StrategyNames) {
  for (Strategy s : split_strategies()) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_THROW(parse_strategy("sideways_first"), UsageError);
}

}  // namespace
}  // namespace twopass
