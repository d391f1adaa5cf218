#pragma once

// Brute-force enumeration checks of the two-pass factorization on micro
// configurations. Always 64-bit; callers should run it single-threaded.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "twopass/model.hpp"
#include "twopass/partition.hpp"
#include "twopass/template.hpp"

namespace twopass {

struct MicroConfig {
  /// Sentence-legal symbols, EOS and UNK included. The model vocabulary is
  /// the five specials plus vocab_size − 2 words, at most 8 ids.
  std::size_t vocab_size = 4;
  std::size_t max_len = 4;  // EOS included
  std::size_t hidden = 8;
  std::size_t filter = 16;
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::uint64_t seed = 1;
  Strategy strategy = Strategy::odd_first;
  SupportMode support = SupportMode::renormalized;

  std::size_t model_vocab() const { return kNumSpecials + vocab_size - 2; }
  /// Throws UsageError for out-of-range sizes or a too-large enumeration.
  void validate() const;
  ModelConfig model_config() const;
};

/// Words "a", "b", ... with strictly decreasing counts, UNK least frequent.
Vocab micro_vocab(const MicroConfig& mc);
/// Tags "a" as a determiner and every other word as a noun.
PosLexicon micro_lexicon(const Vocab& vocab);
VocabPartition micro_partition(const MicroConfig& mc, const Vocab& vocab, Strategy strategy);

/// Every EOS-terminated sequence over `symbols` (EOS excluded from the list)
/// with at most max_len tokens, in lexicographic id order. Throws UsageError
/// when the count would exceed `limit`.
std::vector<std::vector<TokenId>> enumerate_sequences(std::vector<TokenId> symbols,
                                                      std::size_t max_len,
                                                      std::size_t limit = 1'000'000);
/// All sentences of the micro vocabulary.
std::vector<Sentence> enumerate_sentences(const MicroConfig& mc, const Vocab& vocab);

struct MassReport {
  double direct = 0;      // Σ_y exp(sentence_log_prob(y))
  double factorized = 0;  // Σ_template p1 · Σ_fills p2, from separate passes
  double tail = 0;        // p1 mass of legal template prefixes reaching max_len without EOS
  double chain_rule_gap = 0;  // max |batched log p1 − product of single-step conditionals|
  std::size_t sentences = 0;
  std::size_t templates = 0;
  std::vector<std::pair<std::vector<TokenId>, double>> table;  // sentence ids, probability
};

MassReport total_mass(const LanguageModel<double>& m, const MicroConfig& mc, const Vocab& vocab);

struct BijectionReport {
  bool pass = true;
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::string first_failure;
};

using SplitFn = std::function<TemplatedSentence(const Sentence&, const VocabPartition&)>;

/// split -> reconstruct is the identity and distinct sentences yield distinct
/// (template, fills) pairs. `split` defaults to split_sentence and exists so that a broken
/// splitter can be shown to fail.
BijectionReport bijection_audit(std::span<const Sentence> sentences,
                                const VocabPartition& partition, const SplitFn& split = {});

/// Uniformly random first/second-pass assignment of the ordinary tokens and UNK.
VocabPartition random_partition(std::size_t vocab_size, std::mt19937_64& rng);

struct OracleReport {
  bool pass = true;
  std::string text;  // oracle-report.txt
};

/// Runs every micro check: bijection audits for all five strategies and
/// random partitions, mass agreement in both support modes, the chain-rule
/// audit, and all-first two-pass vs baseline identity.
OracleReport run_oracle(const MicroConfig& mc);

}  // namespace twopass
