#pragma once

// Shared fixtures for unit and acceptance tests.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "twopass/corpus.hpp"
#include "twopass/io.hpp"
#include "twopass/model.hpp"
#include "twopass/partition.hpp"
#include "twopass/template.hpp"

namespace twopass::testing {

inline std::filesystem::path data_dir() { return TWOPASS_TEST_DATA; }
inline std::filesystem::path kjv_dir() { return TWOPASS_KJV_DIR; }
inline std::filesystem::path cli_path() { return TWOPASS_CLI; }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("twopass_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Vocab vocab_from_text(const std::string& corpus, std::size_t max_vocab = 64,
                             std::size_t max_len = 64) {
  std::istringstream in(corpus);
  VocabOptions o;
  o.max_vocab = max_vocab;
  o.max_len = max_len;
  return build_vocab(in, o);
}

/// Vocabulary of `words` ordinary tokens "w0", "w1", ... with strictly
/// decreasing counts, plus UNK ranked last.
inline Vocab synthetic_vocab(std::size_t words) {
  std::string text;
  for (std::size_t i = 0; i < words; ++i) {
    for (std::size_t r = 0; r < words - i + 1; ++r) text += "w" + std::to_string(i) + " ";
    text += "\n";
  }
  return vocab_from_text(text, words + kNumSpecials, 4096);
}

/// Random sentence over the sentence-legal ids of `vocab`, EOS appended.
inline Sentence random_sentence(const Vocab& vocab, std::mt19937_64& rng, std::size_t max_len) {
  std::vector<TokenId> legal(vocab.ranked().begin(), vocab.ranked().end());
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len - 1);
  std::uniform_int_distribution<std::size_t> tok_dist(0, legal.size() - 1);
  Sentence s;
  const std::size_t n = len_dist(rng);
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(legal[tok_dist(rng)]);
  s.ids.push_back(kEos);
  return s;
}

inline std::vector<Sentence> random_sentences(const Vocab& vocab, std::size_t count,
                                              std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sentence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_sentence(vocab, rng, max_len));
  return out;
}

/// Table 1 fixture: vocabulary with synthesized ranks, lexicon, sentences
/// and the expected templates per strategy.
struct Table1 {
  Vocab vocab;
  PosLexicon lexicon;
  std::size_t cutoff = 0;
  std::vector<Sentence> sentences;
  struct Case {
    std::size_t sentence;
    Strategy strategy;
    std::string expected;
  };
  std::vector<Case> cases;

  VocabPartition partition(Strategy s) const {
    return make_partition(s, vocab, {}, &lexicon, cutoff);
  }
};

inline Table1 load_table1() {
  const auto dir = data_dir() / "table1";
  Table1 t;
  t.vocab = Vocab::load(dir / "vocab.txt");
  t.lexicon = PosLexicon::load(dir / "pos.tsv");
  std::istringstream meta(read_file(dir / "vocab.meta"));
  for (std::string line; std::getline(meta, line);) {
    if (line.rfind("cutoff=", 0) == 0) t.cutoff = std::stoul(line.substr(7));
  }
  std::istringstream sents(read_file(dir / "sentences.txt"));
  for (std::string line; std::getline(sents, line);) {
    if (!line.empty()) t.sentences.push_back(encode(t.vocab, line));
  }
  std::istringstream exp(read_file(dir / "expected.tsv"));
  for (std::string line; std::getline(exp, line);) {
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = line.find('\t', a + 1);
    t.cases.push_back({std::stoul(line.substr(0, a)), parse_strategy(line.substr(a + 1, b - a - 1)),
                       line.substr(b + 1)});
  }
  return t;
}

/// Hand-built templated sentence: `len` tokens, the ones at `second` positions
/// lifted into fills. First-pass and second-pass ids are taken from `p`.
inline TemplatedSentence make_templated(const VocabPartition& p, std::size_t len,
                                        const std::vector<std::size_t>& second) {
  const auto firsts = p.first_pass_ids();
  const auto seconds = p.second_pass_ids();
  std::vector<TokenId> first_words;
  for (TokenId id : firsts) {
    if (id != kEos) first_words.push_back(id);
  }
  Sentence s;
  for (std::size_t i = 0; i + 1 < len; ++i) {
    const bool lifted = std::find(second.begin(), second.end(), i) != second.end();
    s.ids.push_back(lifted ? seconds[i % seconds.size()] : first_words[i % first_words.size()]);
  }
  s.ids.push_back(kEos);
  return split_sentence(s, p);
}

}  // namespace twopass::testing
