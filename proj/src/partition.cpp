#include "twopass/partition.hpp"

#include <spdlog/spdlog.h>

#include <array>
#include <charconv>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "twopass/error.hpp"
#include "twopass/io.hpp"

namespace twopass {
namespace {

constexpr std::array<Strategy, 5> kSplitStrategies = {
    Strategy::common_first, Strategy::rare_first, Strategy::function_first,
    Strategy::content_first, Strategy::odd_first};

std::vector<std::uint8_t> empty_mask(const Vocab& vocab) {
  std::vector<std::uint8_t> m(vocab.size(), 0);
  m[kEos] = 1;
  return m;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::common_first: return "common_first";
    case Strategy::rare_first: return "rare_first";
    case Strategy::function_first: return "function_first";
    case Strategy::content_first: return "content_first";
    case Strategy::odd_first: return "odd_first";
    case Strategy::all_first: return "all_first";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (auto s : {Strategy::common_first, Strategy::rare_first, Strategy::function_first,
                 Strategy::content_first, Strategy::odd_first, Strategy::all_first}) {
    if (to_string(s) == name) return s;
  }
  throw UsageError("unknown strategy: " + std::string(name));
}

std::span<const Strategy> split_strategies() { return kSplitStrategies; }

// ---------------------------------------------------------------- lexicon

const std::set<std::string, std::less<>>& pos_tag_inventory() {
  static const std::set<std::string, std::less<>> tags = {
      "CC",  "CD",  "DT",   "EX",  "FW",  "IN",  "JJ",   "JJR",   "JJS",   "LS",  "MD",
      "NN",  "NNS", "NNP",  "NNPS", "PDT", "POS", "PRP", "PRP$",  "RB",    "RBR", "RBS",
      "RP",  "SYM", "TO",   "UH",  "VB",  "VBD", "VBG",  "VBN",   "VBP",   "VBZ", "WDT",
      "WP",  "WP$", "WRB",  "ADD", "AFX", "GW",  "HYPH", "NFP",   ".",     ",",   ":",
      "``",  "''",  "-LRB-", "-RRB-", "#",  "$"};
  return tags;
}

const std::set<std::string, std::less<>>& function_tags() {
  static const std::set<std::string, std::less<>> tags = {
      // punctuation
      ".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$", "HYPH", "NFP",
      // adpositions, conjunctions
      "IN", "CC",
      // determiners
      "DT", "PDT", "WDT",
      // pronouns
      "PRP", "PRP$", "WP", "WP$",
      // particles (RP, possessive 's, infinitival to)
      "RP", "POS", "TO",
      // modal verbs, wh-adverbs
      "MD", "WRB"};
  return tags;
}

const std::set<std::string, std::less<>>& be_forms() {
  static const std::set<std::string, std::less<>> forms = {"be",  "am",   "is",   "are",
                                                          "was", "were", "been", "being"};
  return forms;
}

PosLexicon PosLexicon::parse(std::string_view tsv, std::string_view source) {
  PosLexicon lex;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos < tsv.size()) {
    auto end = tsv.find('\n', pos);
    if (end == std::string_view::npos) end = tsv.size();
    std::string_view line = tsv.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const auto where = std::string(source) + ":" + std::to_string(lineno);
    if (tab == std::string_view::npos || tab == 0 || tab + 1 >= line.size() ||
        line.find('\t', tab + 1) != std::string_view::npos) {
      throw DataError(where + ": expected token<TAB>tag");
    }
    std::string token(line.substr(0, tab));
    std::string tag(line.substr(tab + 1));
    if (!pos_tag_inventory().contains(tag)) {
      throw DataError(where + ": unknown tag '" + tag + "'");
    }
    auto [it, inserted] = lex.role_of_.insert_or_assign(token, tag);
    if (!inserted) {
      ++lex.duplicates_;
      spdlog::warn("{}: duplicate lexicon entry for '{}', keeping '{}'", where, token, tag);
    }
  }
  return lex;
}

PosLexicon PosLexicon::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

std::optional<std::string_view> PosLexicon::tag(std::string_view token) const {
  auto it = role_of_.find(std::string(token));
  if (it == role_of_.end()) return std::nullopt;
  return it->second;
}

bool PosLexicon::is_function_word(std::string_view token) const {
  if (be_forms().contains(token)) return true;
  auto t = tag(token);
  return t && function_tags().contains(*t);
}

// ---------------------------------------------------------------- partition

VocabPartition::VocabPartition(Strategy strategy, std::vector<std::uint8_t> first_pass,
                               std::optional<std::size_t> cutoff)
    : strategy_(strategy), first_(std::move(first_pass)), cutoff_(cutoff) {
  if (first_.size() < static_cast<std::size_t>(kNumSpecials)) {
    throw DataError("partition mask shorter than the special-token block");
  }
  for (auto& f : first_) f = f ? 1 : 0;
  first_[kPad] = first_[kBos] = first_[kPlaceholder] = 0;
  first_[kEos] = 1;
}

bool VocabPartition::is_first_pass(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= first_.size()) {
    throw DataError("token id outside partition: " + std::to_string(id));
  }
  return first_[id] != 0;
}

bool VocabPartition::is_second_pass(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= first_.size()) {
    throw DataError("token id outside partition: " + std::to_string(id));
  }
  if (id == kPad || id == kBos || id == kPlaceholder) return false;
  return first_[id] == 0;
}

std::vector<TokenId> VocabPartition::first_pass_ids() const {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < first_.size(); ++i) {
    if (first_[i]) out.push_back(static_cast<TokenId>(i));
  }
  return out;
}

std::vector<TokenId> VocabPartition::second_pass_ids() const {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < first_.size(); ++i) {
    if (is_second_pass(static_cast<TokenId>(i))) out.push_back(static_cast<TokenId>(i));
  }
  return out;
}

bool VocabPartition::has_second_pass() const {
  for (std::size_t i = 0; i < first_.size(); ++i) {
    if (is_second_pass(static_cast<TokenId>(i))) return true;
  }
  return false;
}

std::uint32_t VocabPartition::checksum() const {
  std::string key(to_string(strategy_));
  key += ':';
  key.append(first_.begin(), first_.end());
  return crc32(key);
}

std::string VocabPartition::serialize(const Vocab& vocab) const {
  if (vocab.size() != first_.size()) {
    throw DataError("partition/vocab size mismatch");
  }
  std::string out = "strategy=" + std::string(to_string(strategy_)) + "\n";
  if (cutoff_) out += "cutoff=" + std::to_string(*cutoff_) + "\n";
  for (TokenId id : first_pass_ids()) {
    out += vocab.token(id);
    out += '\n';
  }
  return out;
}

void VocabPartition::save(const std::filesystem::path& path, const Vocab& vocab) const {
  write_atomic(path, serialize(vocab));
}

VocabPartition VocabPartition::parse(std::string_view text, const Vocab& vocab) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("strategy=", 0) != 0) {
    throw DataError("partition file must start with strategy=<name>");
  }
  const Strategy strategy = parse_strategy(line.substr(9));
  std::optional<std::size_t> cutoff;
  auto mask = std::vector<std::uint8_t>(vocab.size(), 0);
  bool first_token = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const bool freq = strategy == Strategy::common_first || strategy == Strategy::rare_first;
    if (first_token && freq && line.rfind("cutoff=", 0) == 0) {
      cutoff = std::strtoull(line.c_str() + 7, nullptr, 10);
      first_token = false;
      continue;
    }
    first_token = false;
    auto id = vocab.find(line);
    if (!id) {
      throw DataError("partition token not in vocabulary: " + line);
    }
    mask[*id] = 1;
  }
  return VocabPartition(strategy, std::move(mask), cutoff);
}

VocabPartition VocabPartition::load(const std::filesystem::path& path, const Vocab& vocab) {
  return parse(read_file(path), vocab);
}

// ---------------------------------------------------------------- strategies

std::size_t balanced_cutoff(const Vocab& vocab, std::span<const Sentence> train) {
  if (train.empty()) {
    throw DataError("balanced_cutoff: empty training set");
  }
  const auto ranked = vocab.ranked();
  if (ranked.size() < 2) {
    throw DataError("balanced_cutoff: need at least two ranked tokens");
  }
  std::vector<std::uint64_t> count_at_rank(ranked.size(), 0);
  std::uint64_t total = 0;
  for (const auto& s : train) {
    for (TokenId id : s.ids) {
      if (id == kEos) continue;
      if (auto r = vocab.rank(id)) {
        ++count_at_rank[*r];
        ++total;
      }
    }
  }
  std::size_t best = 1;
  std::uint64_t best_gap = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t common = 0;
  for (std::size_t c = 1; c < ranked.size(); ++c) {
    common += count_at_rank[c - 1];
    const std::uint64_t rare = total - common;
    const std::uint64_t gap = common > rare ? common - rare : rare - common;
    if (gap < best_gap) {
      best_gap = gap;
      best = c;
    }
  }
  return best;
}

VocabPartition partition_frequency(const Vocab& vocab, std::size_t cutoff, Strategy mode) {
  if (mode != Strategy::common_first && mode != Strategy::rare_first) {
    throw UsageError("partition_frequency: mode must be common_first or rare_first");
  }
  const auto ranked = vocab.ranked();
  if (cutoff == 0 || cutoff >= ranked.size()) {
    throw UsageError("cutoff " + std::to_string(cutoff) + " outside (0, " +
                     std::to_string(ranked.size()) + ")");
  }
  auto mask = empty_mask(vocab);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const bool common = r < cutoff;
    mask[ranked[r]] = (mode == Strategy::common_first) == common ? 1 : 0;
  }
  return VocabPartition(mode, std::move(mask), cutoff);
}

VocabPartition partition_pos(const Vocab& vocab, const PosLexicon& lexicon, Strategy mode) {
  if (mode != Strategy::function_first && mode != Strategy::content_first) {
    throw UsageError("partition_pos: mode must be function_first or content_first");
  }
  if (lexicon.empty()) {
    throw DataError("partition_pos: empty POS lexicon");
  }
  auto mask = empty_mask(vocab);
  for (TokenId id : vocab.ranked()) {
    // UNK never matches a lexicon entry, so it is a content word.
    const bool function = id != kUnk && lexicon.is_function_word(vocab.token(id));
    mask[id] = (mode == Strategy::function_first) == function ? 1 : 0;
  }
  return VocabPartition(mode, std::move(mask));
}

VocabPartition partition_odd(const Vocab& vocab) {
  auto mask = empty_mask(vocab);
  const auto ranked = vocab.ranked();
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    mask[ranked[r]] = (r % 2 == 1) ? 1 : 0;
  }
  return VocabPartition(Strategy::odd_first, std::move(mask));
}

VocabPartition partition_all_first(const Vocab& vocab) {
  auto mask = empty_mask(vocab);
  for (TokenId id : vocab.ranked()) mask[id] = 1;
  return VocabPartition(Strategy::all_first, std::move(mask));
}

VocabPartition make_partition(Strategy strategy, const Vocab& vocab,
                              std::span<const Sentence> train, const PosLexicon* lexicon,
                              std::optional<std::size_t> cutoff) {
  switch (strategy) {
    case Strategy::common_first:
    case Strategy::rare_first:
      return partition_frequency(vocab, cutoff ? *cutoff : balanced_cutoff(vocab, train),
                                 strategy);
    case Strategy::function_first:
    case Strategy::content_first:
      if (lexicon == nullptr) {
        throw UsageError(std::string(to_string(strategy)) + " needs a POS lexicon");
      }
      return partition_pos(vocab, *lexicon, strategy);
    case Strategy::odd_first:
      return partition_odd(vocab);
    case Strategy::all_first:
      return partition_all_first(vocab);
  }
  throw UsageError("unknown strategy");
}

}  // namespace twopass
