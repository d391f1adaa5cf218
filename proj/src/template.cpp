#include "twopass/template.hpp"

#include <sstream>

#include "twopass/error.hpp"

namespace twopass {

TemplatedSentence split_sentence(const Sentence& sentence, const VocabPartition& partition) {
  TemplatedSentence out;
  out.tmpl.reserve(sentence.ids.size());
  for (TokenId id : sentence.ids) {
    if (partition.is_first_pass(id)) {
      out.tmpl.push_back(id);
    } else if (partition.is_second_pass(id)) {
      out.tmpl.push_back(kPlaceholder);
      out.fills.push_back(id);
    } else {
      throw DataError("token id " + std::to_string(id) + " is not sentence-legal");
    }
  }
  return out;
}

std::vector<TokenId> fill_in(const TemplatedSentence& t) {
  std::vector<TokenId> ids;
  ids.reserve(t.tmpl.size());
  std::size_t next = 0;
  for (TokenId id : t.tmpl) {
    ids.push_back(id == kPlaceholder ? t.fills[next++] : id);
  }
  return ids;
}

void validate_templated(const TemplatedSentence& t, const VocabPartition& partition) {
  if (t.tmpl.empty() || t.tmpl.back() != kEos) {
    throw DataError("template must end with EOS");
  }
  std::size_t holes = 0;
  for (std::size_t i = 0; i < t.tmpl.size(); ++i) {
    const TokenId id = t.tmpl[i];
    if (id == kPlaceholder) {
      ++holes;
    } else if (!partition.is_first_pass(id) || (id == kEos && i + 1 != t.tmpl.size())) {
      throw DataError("template position " + std::to_string(i) + " holds a non-first-pass token");
    }
  }
  if (holes != t.fills.size()) {
    throw DataError("template has " + std::to_string(holes) + " placeholder(s) but " +
                    std::to_string(t.fills.size()) + " fill(s)");
  }
  for (TokenId id : t.fills) {
    if (!partition.is_second_pass(id)) {
      throw DataError("fill token " + std::to_string(id) + " is not a second-pass token");
    }
  }
}

Sentence reconstruct(const TemplatedSentence& t, const VocabPartition& partition) {
  validate_templated(t, partition);
  Sentence s;
  s.ids = fill_in(t);
  return s;
}

std::vector<TemplatedSentence> split_all(std::span<const Sentence> sentences,
                                         const VocabPartition& partition) {
  std::vector<TemplatedSentence> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(split_sentence(s, partition));
  return out;
}

std::string render_template(const TemplatedSentence& t, const Vocab& vocab) {
  return decode(vocab, t.tmpl);
}

std::string render_fills(const TemplatedSentence& t, const Vocab& vocab) {
  return decode(vocab, t.fills);
}

void write_preprocessed(std::ostream& out, std::span<const TemplatedSentence> data,
                        const Vocab& vocab) {
  for (const auto& t : data) {
    out << render_template(t, vocab) << '\t' << render_fills(t, vocab) << '\n';
  }
}

std::vector<TemplatedSentence> read_preprocessed(std::istream& in, const Vocab& vocab,
                                                 const VocabPartition& partition) {
  std::vector<TemplatedSentence> out;
  std::string line;
  std::size_t lineno = 0;
  auto words = [](const std::string& s) {
    std::vector<std::string> w;
    std::istringstream ss(s);
    for (std::string x; ss >> x;) w.push_back(x);
    return w;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("preprocessed line " + std::to_string(lineno) + ": expected template<TAB>fills");
    }
    TemplatedSentence t;
    for (const auto& w : words(line.substr(0, tab))) {
      auto id = vocab.find(w);
      if (!id) throw DataError("preprocessed line " + std::to_string(lineno) + ": unknown token " + w);
      t.tmpl.push_back(*id);
    }
    for (const auto& w : words(line.substr(tab + 1))) {
      auto id = vocab.find(w);
      if (!id) throw DataError("preprocessed line " + std::to_string(lineno) + ": unknown token " + w);
      t.fills.push_back(*id);
    }
    try {
      validate_templated(t, partition);
    } catch (const DataError& e) {
      throw DataError("preprocessed line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace twopass
