#pragma once

// Word-level vocabulary, sentence encoding and train/validation splitting.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace twopass {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kPlaceholder = 4;
inline constexpr TokenId kNumSpecials = 5;

/// Surface strings of the reserved ids. The placeholder renders as "__".
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialTokens = {
    "[PAD]", "[BOS]", "[EOS]", "[UNK]", "__"};

/// True if `token` spells one of the reserved markers (case-insensitive).
bool is_special_marker(std::string_view token);

struct VocabMeta {
  std::size_t max_vocab = 0;
  bool lowercase = true;
  std::size_t max_len = 64;
  std::string corpus_checksum;  // crc32 of the corpus bytes, hex
  std::uint64_t sentences = 0;
  std::uint64_t tokens = 0;     // whitespace tokens, EOS excluded
  std::uint64_t dropped = 0;    // over-long lines skipped while counting
};

/// Frequency-ranked word vocabulary. Ids 0-4 are the specials; ordinary
/// tokens follow in descending training frequency (ties by token text).
/// Immutable once built.
class Vocab {
 public:
  Vocab() = default;

  /// Builds from explicit counts. Tokens are sorted by (-count, text).
  static Vocab from_counts(std::vector<std::pair<std::string, std::uint64_t>> counts,
                           std::uint64_t unk_count, VocabMeta meta = {});

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::uint64_t freq(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  /// Id of `token`, or UNK when absent.
  TokenId id(std::string_view token) const;

  /// Ordinary tokens plus UNK, most frequent first. This is the
  /// "frequency-sorted vocabulary list" used by the partition strategies.
  std::span<const TokenId> ranked() const { return ranked_; }
  /// Position of `id` in ranked(), if it has one.
  std::optional<std::size_t> rank(TokenId id) const;

  /// Tokens allowed inside a sentence: ordinary tokens, UNK and EOS.
  bool is_sentence_legal(TokenId id) const;

  const VocabMeta& meta() const { return meta_; }
  std::uint32_t checksum() const;

  /// vocab.txt: `token<TAB>count`, the five specials first.
  std::string serialize() const;
  /// vocab.meta: key=value lines.
  std::string serialize_meta() const;
  void save(const std::filesystem::path& vocab_txt) const;
  /// Loads vocab.txt and, when present, the sibling vocab.meta.
  static Vocab load(const std::filesystem::path& vocab_txt);

 private:
  void index();

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> freq_;
  std::unordered_map<std::string, TokenId> lookup_;
  std::vector<TokenId> ranked_;
  std::vector<std::int64_t> rank_of_;  // -1 for ids outside ranked()
  VocabMeta meta_;
};

struct VocabOptions {
  std::size_t max_vocab = 2000;
  bool lowercase = true;
  std::size_t max_len = 64;
};

Vocab build_vocab(const std::filesystem::path& corpus, const VocabOptions& options);
Vocab build_vocab(std::istream& corpus, const VocabOptions& options);

/// A tokenized sentence. ids always end with exactly one EOS.
struct Sentence {
  std::vector<TokenId> ids;
  std::vector<std::string> surface;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const Sentence& a, const Sentence& b) { return a.ids == b.ids; }
};

struct EncodeOptions {
  std::size_t max_len = 64;  // includes EOS
  bool lowercase = true;
};

/// Tokenizes on whitespace, maps OOV tokens to UNK and appends EOS.
/// Throws DataError for empty or over-long lines and for reserved markers.
Sentence encode(const Vocab& vocab, std::string_view line, const EncodeOptions& options = {});

/// Space-joined token text of `ids`, EOS included.
std::string decode(const Vocab& vocab, std::span<const TokenId> ids);

/// Checks the Sentence invariants against `vocab`; throws DataError.
void validate_sentence(const Vocab& vocab, const Sentence& sentence, std::size_t max_len);

struct LoadedSentences {
  std::vector<Sentence> sentences;
  std::size_t dropped_too_long = 0;
  std::size_t skipped_empty = 0;
};

/// Encodes every line of a corpus file. Over-long lines are dropped and
/// counted; blank lines are skipped and counted.
LoadedSentences load_sentences(const std::filesystem::path& corpus, const Vocab& vocab,
                               const EncodeOptions& options);
LoadedSentences load_sentences(std::istream& corpus, const Vocab& vocab,
                               const EncodeOptions& options);

struct DatasetSplit {
  std::vector<Sentence> train;
  std::vector<Sentence> valid;
  std::vector<Sentence> test;
};

/// Every k-th sentence (index % k == k-1) goes to valid, the rest to train.
DatasetSplit split_train_valid(std::vector<Sentence> sentences, std::size_t k = 6);

}  // namespace twopass
