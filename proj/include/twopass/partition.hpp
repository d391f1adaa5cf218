#pragma once

// First-pass / second-pass vocabulary splits.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "twopass/corpus.hpp"

namespace twopass {

enum class Strategy {
  common_first,
  rare_first,
  function_first,
  content_first,
  odd_first,
  all_first,  // every token in the first pass; reduces to a plain LM
};

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);
/// The five vocabulary-splitting strategies, in declaration order.
std::span<const Strategy> split_strategies();

/// Token -> most frequent Penn Treebank tag.
class PosLexicon {
 public:
  /// Reads `token<TAB>tag` lines. Duplicates keep the last entry (with a
  /// warning); unknown tags and malformed lines throw DataError.
  static PosLexicon load(const std::filesystem::path& path);
  static PosLexicon parse(std::string_view tsv, std::string_view source = "<memory>");

  std::optional<std::string_view> tag(std::string_view token) const;
  std::size_t size() const { return role_of_.size(); }
  bool empty() const { return role_of_.empty(); }
  std::size_t duplicates() const { return duplicates_; }

  /// True when the tag is a function class, or the token is a form of "be".
  bool is_function_word(std::string_view token) const;

 private:
  std::unordered_map<std::string, std::string> role_of_;
  std::size_t duplicates_ = 0;
};

/// The closed Penn tag inventory accepted in lexicon files.
const std::set<std::string, std::less<>>& pos_tag_inventory();
/// Tags treated as function classes: punctuation, adpositions, conjunctions,
/// determiners, pronouns, particles, modals and WRB.
const std::set<std::string, std::less<>>& function_tags();
/// Conjugations of "be" counted as function words regardless of tag.
const std::set<std::string, std::less<>>& be_forms();

/// Membership of each vocabulary id in the first pass. PAD, BOS and the
/// placeholder belong to neither pass; EOS is always first-pass.
class VocabPartition {
 public:
  VocabPartition() = default;
  VocabPartition(Strategy strategy, std::vector<std::uint8_t> first_pass,
                 std::optional<std::size_t> cutoff = std::nullopt);

  Strategy strategy() const { return strategy_; }
  std::optional<std::size_t> cutoff() const { return cutoff_; }
  std::size_t vocab_size() const { return first_.size(); }

  bool is_first_pass(TokenId id) const;
  bool is_second_pass(TokenId id) const;

  std::vector<TokenId> first_pass_ids() const;
  std::vector<TokenId> second_pass_ids() const;
  bool has_second_pass() const;

  std::uint32_t checksum() const;

  /// `strategy=<name>`, optional `cutoff=<c>`, then first-pass tokens in id order.
  std::string serialize(const Vocab& vocab) const;
  void save(const std::filesystem::path& path, const Vocab& vocab) const;
  static VocabPartition parse(std::string_view text, const Vocab& vocab);
  static VocabPartition load(const std::filesystem::path& path, const Vocab& vocab);

  friend bool operator==(const VocabPartition&, const VocabPartition&) = default;

 private:
  Strategy strategy_ = Strategy::all_first;
  std::vector<std::uint8_t> first_;  // indexed by id; 1 = first pass
  std::optional<std::size_t> cutoff_;
};

/// Rank c minimising |common - rare| token counts over `train` (EOS excluded),
/// where common means rank < c. Ties go to the smaller c.
std::size_t balanced_cutoff(const Vocab& vocab, std::span<const Sentence> train);

VocabPartition partition_frequency(const Vocab& vocab, std::size_t cutoff, Strategy mode);
VocabPartition partition_pos(const Vocab& vocab, const PosLexicon& lexicon, Strategy mode);
VocabPartition partition_odd(const Vocab& vocab);
VocabPartition partition_all_first(const Vocab& vocab);

/// Dispatches on `strategy`. Frequency strategies need `train` (for the
/// balanced cutoff) unless `cutoff` is given; POS strategies need `lexicon`.
VocabPartition make_partition(Strategy strategy, const Vocab& vocab,
                              std::span<const Sentence> train, const PosLexicon* lexicon,
                              std::optional<std::size_t> cutoff = std::nullopt);

}  // namespace twopass
