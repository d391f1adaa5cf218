#include "twopass/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "twopass/error.hpp"
#include "twopass/io.hpp"

namespace twopass {
namespace {

// ASCII-only folding; multi-byte UTF-8 sequences pass through untouched.
std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("bad integer for " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

bool is_special_marker(std::string_view token) {
  const std::string t = lower(token);
  return std::any_of(kSpecialTokens.begin(), kSpecialTokens.end(),
                     [&](std::string_view m) { return lower(m) == t; });
}

// ---------------------------------------------------------------- Vocab

Vocab Vocab::from_counts(std::vector<std::pair<std::string, std::uint64_t>> counts,
                         std::uint64_t unk_count, VocabMeta meta) {
  std::sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  v.meta_ = std::move(meta);
  for (TokenId id = 0; id < kNumSpecials; ++id) {
    v.tokens_.emplace_back(kSpecialTokens[id]);
    v.freq_.push_back(0);
  }
  v.freq_[kUnk] = unk_count;
  v.freq_[kEos] = v.meta_.sentences;
  for (auto& [tok, n] : counts) {
    if (is_special_marker(tok)) {
      throw DataError("reserved token in vocabulary: " + tok);
    }
    if (n == 0) {
      throw DataError("vocabulary token with zero count: " + tok);
    }
    v.tokens_.push_back(std::move(tok));
    v.freq_.push_back(n);
  }
  v.index();
  return v;
}

void Vocab::index() {
  lookup_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = lookup_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw DataError("duplicate vocabulary token: " + tokens_[i]);
    }
  }
  // UNK joins the ordinary tokens in the frequency ranking; ties fall back
  // to token text, the same rule used for ordinary tokens.
  ranked_.clear();
  ranked_.push_back(kUnk);
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) {
    ranked_.push_back(static_cast<TokenId>(i));
  }
  std::stable_sort(ranked_.begin(), ranked_.end(), [&](TokenId a, TokenId b) {
    return freq_[a] != freq_[b] ? freq_[a] > freq_[b] : tokens_[a] < tokens_[b];
  });
  rank_of_.assign(tokens_.size(), -1);
  for (std::size_t r = 0; r < ranked_.size(); ++r) {
    rank_of_[ranked_[r]] = static_cast<std::int64_t>(r);
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id out of range: " + std::to_string(id));
  }
  return tokens_[id];
}

std::uint64_t Vocab::freq(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= freq_.size()) {
    throw DataError("token id out of range: " + std::to_string(id));
  }
  return freq_[id];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = lookup_.find(std::string(token));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const { return find(token).value_or(kUnk); }

std::optional<std::size_t> Vocab::rank(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= rank_of_.size() || rank_of_[id] < 0) {
    return std::nullopt;
  }
  return static_cast<std::size_t>(rank_of_[id]);
}

bool Vocab::is_sentence_legal(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) return false;
  return id != kPad && id != kBos && id != kPlaceholder;
}

std::string Vocab::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out += tokens_[i];
    out += '\t';
    out += std::to_string(freq_[i]);
    out += '\n';
  }
  return out;
}

std::uint32_t Vocab::checksum() const { return crc32(serialize()); }

std::string Vocab::serialize_meta() const {
  std::ostringstream out;
  out << "format_version=1\n"
      << "max_vocab=" << meta_.max_vocab << "\n"
      << "lowercase=" << (meta_.lowercase ? 1 : 0) << "\n"
      << "max_len=" << meta_.max_len << "\n"
      << "corpus_checksum=" << meta_.corpus_checksum << "\n"
      << "sentences=" << meta_.sentences << "\n"
      << "tokens=" << meta_.tokens << "\n"
      << "dropped=" << meta_.dropped << "\n"
      << "size=" << size() << "\n"
      << "unk_count=" << freq_[kUnk] << "\n"
      << "vocab_checksum=" << hex32(checksum()) << "\n";
  return out.str();
}

void Vocab::save(const std::filesystem::path& vocab_txt) const {
  write_atomic(vocab_txt, serialize());
  auto meta_path = vocab_txt;
  meta_path.replace_extension(".meta");
  write_atomic(meta_path, serialize_meta());
}

Vocab Vocab::load(const std::filesystem::path& vocab_txt) {
  std::istringstream in(read_file(vocab_txt));
  Vocab v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw DataError(vocab_txt.string() + ":" + std::to_string(lineno) + ": expected token<TAB>count");
    }
    std::string tok = line.substr(0, tab);
    const auto n = parse_u64(std::string_view(line).substr(tab + 1), "count");
    const auto idx = v.tokens_.size();
    if (idx < static_cast<std::size_t>(kNumSpecials)) {
      if (tok != kSpecialTokens[idx]) {
        throw DataError(vocab_txt.string() + ":" + std::to_string(lineno) + ": expected special " +
                        std::string(kSpecialTokens[idx]));
      }
    } else if (is_special_marker(tok)) {
      throw DataError(vocab_txt.string() + ":" + std::to_string(lineno) + ": reserved token " + tok);
    } else if (n == 0 || (idx > static_cast<std::size_t>(kNumSpecials) && n > v.freq_.back())) {
      throw DataError(vocab_txt.string() + ":" + std::to_string(lineno) +
                      ": tokens must have positive, non-increasing counts");
    }
    v.tokens_.push_back(std::move(tok));
    v.freq_.push_back(n);
  }
  if (v.tokens_.size() < static_cast<std::size_t>(kNumSpecials)) {
    throw DataError(vocab_txt.string() + ": missing special header");
  }
  auto meta_path = vocab_txt;
  meta_path.replace_extension(".meta");
  if (std::filesystem::exists(meta_path)) {
    std::istringstream min(read_file(meta_path));
    while (std::getline(min, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "max_vocab") v.meta_.max_vocab = parse_u64(val, key);
      else if (key == "lowercase") v.meta_.lowercase = parse_u64(val, key) != 0;
      else if (key == "max_len") v.meta_.max_len = parse_u64(val, key);
      else if (key == "corpus_checksum") v.meta_.corpus_checksum = val;
      else if (key == "sentences") v.meta_.sentences = parse_u64(val, key);
      else if (key == "tokens") v.meta_.tokens = parse_u64(val, key);
      else if (key == "dropped") v.meta_.dropped = parse_u64(val, key);
    }
  }
  v.index();
  return v;
}

// ---------------------------------------------------------------- building

Vocab build_vocab(std::istream& corpus, const VocabOptions& options) {
  if (options.max_vocab <= static_cast<std::size_t>(kNumSpecials)) {
    throw UsageError("max_vocab must exceed the 5 reserved tokens");
  }
  std::ostringstream buf;
  buf << corpus.rdbuf();
  const std::string bytes = buf.str();

  VocabMeta meta;
  meta.max_vocab = options.max_vocab;
  meta.lowercase = options.lowercase;
  meta.max_len = options.max_len;
  meta.corpus_checksum = hex32(crc32(bytes));

  std::unordered_map<std::string, std::uint64_t> counts;
  std::istringstream in(bytes);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto words = split_ws(line);
    if (words.empty()) continue;
    for (auto w : words) {
      if (is_special_marker(w)) {
        throw DataError("line " + std::to_string(lineno) + ": reserved token '" + std::string(w) +
                        "' in corpus text");
      }
    }
    if (words.size() + 1 > options.max_len) {
      ++meta.dropped;
      continue;
    }
    ++meta.sentences;
    meta.tokens += words.size();
    for (auto w : words) {
      ++counts[options.lowercase ? lower(w) : std::string(w)];
    }
  }
  if (meta.sentences == 0) {
    throw DataError("empty corpus");
  }
  if (meta.dropped > 0) {
    spdlog::warn("build_vocab: {} line(s) longer than max_len={} were not counted", meta.dropped,
                 options.max_len);
  }

  std::vector<std::pair<std::string, std::uint64_t>> all(counts.begin(), counts.end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(all.size(), options.max_vocab - kNumSpecials);
  // Second pass over the counts: every occurrence of a dropped type is an UNK.
  std::uint64_t unk = 0;
  for (std::size_t i = keep; i < all.size(); ++i) unk += all[i].second;
  all.resize(keep);
  return Vocab::from_counts(std::move(all), unk, std::move(meta));
}

Vocab build_vocab(const std::filesystem::path& corpus, const VocabOptions& options) {
  std::ifstream in(corpus, std::ios::binary);
  if (!in) {
    throw DataError("cannot open corpus: " + corpus.string());
  }
  return build_vocab(in, options);
}

// ---------------------------------------------------------------- encoding

Sentence encode(const Vocab& vocab, std::string_view line, const EncodeOptions& options) {
  const auto words = split_ws(line);
  if (words.empty()) {
    throw DataError("cannot encode an empty line");
  }
  if (words.size() + 1 > options.max_len) {
    throw DataError("sentence of " + std::to_string(words.size() + 1) +
                    " tokens exceeds max_len=" + std::to_string(options.max_len));
  }
  Sentence s;
  s.ids.reserve(words.size() + 1);
  s.surface.reserve(words.size());
  for (auto w : words) {
    if (is_special_marker(w)) {
      throw DataError("reserved token '" + std::string(w) + "' in input text");
    }
    std::string t = options.lowercase ? lower(w) : std::string(w);
    s.ids.push_back(vocab.id(t));
    s.surface.push_back(std::move(t));
  }
  s.ids.push_back(kEos);
  return s;
}

std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

void validate_sentence(const Vocab& vocab, const Sentence& s, std::size_t max_len) {
  if (s.ids.empty() || s.ids.back() != kEos) {
    throw DataError("sentence must end with EOS");
  }
  if (s.ids.size() > max_len) {
    throw DataError("sentence longer than max_len");
  }
  for (std::size_t i = 0; i + 1 < s.ids.size(); ++i) {
    if (s.ids[i] == kEos || !vocab.is_sentence_legal(s.ids[i])) {
      throw DataError("illegal token id " + std::to_string(s.ids[i]) + " at position " +
                      std::to_string(i));
    }
  }
}

LoadedSentences load_sentences(std::istream& corpus, const Vocab& vocab,
                                const EncodeOptions& options) {
  LoadedSentences out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(corpus, line)) {
    ++lineno;
    const auto words = split_ws(line);
    if (words.empty()) {
      ++out.skipped_empty;
      continue;
    }
    if (words.size() + 1 > options.max_len) {
      ++out.dropped_too_long;
      continue;
    }
    try {
      out.sentences.push_back(encode(vocab, line, options));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.dropped_too_long > 0) {
    spdlog::warn("dropped {} sentence(s) longer than max_len={}", out.dropped_too_long,
                 options.max_len);
  }
  return out;
}

LoadedSentences load_sentences(const std::filesystem::path& corpus, const Vocab& vocab,
                               const EncodeOptions& options) {
  std::ifstream in(corpus, std::ios::binary);
  if (!in) {
    throw DataError("cannot open corpus: " + corpus.string());
  }
  return load_sentences(in, vocab, options);
}

DatasetSplit split_train_valid(std::vector<Sentence> sentences, std::size_t k) {
  if (k < 2) {
    throw UsageError("split_train_valid: k must be at least 2");
  }
  DatasetSplit split;
  if (sentences.size() < k) {
    spdlog::warn("split_train_valid: only {} sentence(s), fewer than k={}; validation set is empty",
                 sentences.size(), k);
    split.train = std::move(sentences);
    return split;
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    (i % k == k - 1 ? split.valid : split.train).push_back(std::move(sentences[i]));
  }
  return split;
}

}  // namespace twopass
