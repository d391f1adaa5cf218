#pragma once

// Sentence <-> (template, fills) bijection.

#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "twopass/corpus.hpp"
#include "twopass/partition.hpp"

namespace twopass {

/// A sentence with its second-pass tokens lifted out. `tmpl` has the length
/// of the source sentence with kPlaceholder at every second-pass position;
/// `fills` holds the lifted tokens in left-to-right order.
struct TemplatedSentence {
  std::vector<TokenId> tmpl;
  std::vector<TokenId> fills;

  std::size_t source_len() const { return tmpl.size(); }
  std::size_t placeholders() const { return fills.size(); }

  friend bool operator==(const TemplatedSentence&, const TemplatedSentence&) = default;
};

TemplatedSentence split_sentence(const Sentence& sentence, const VocabPartition& partition);

/// Inverse of split_sentence. Throws DataError if the fill count does not
/// match the placeholder count or a fill is not a second-pass token.
Sentence reconstruct(const TemplatedSentence& templated, const VocabPartition& partition);

/// Placeholders replaced left-to-right, no validation. For trusted data.
std::vector<TokenId> fill_in(const TemplatedSentence& templated);

/// Checks the TemplatedSentence invariants; throws DataError.
void validate_templated(const TemplatedSentence& templated, const VocabPartition& partition);

std::vector<TemplatedSentence> split_all(std::span<const Sentence> sentences,
                                         const VocabPartition& partition);

/// Template text with `__` for placeholders, e.g. "__ is a __ . [EOS]".
std::string render_template(const TemplatedSentence& templated, const Vocab& vocab);
std::string render_fills(const TemplatedSentence& templated, const Vocab& vocab);

/// One `template<TAB>fills` line per sentence.
void write_preprocessed(std::ostream& out, std::span<const TemplatedSentence> data,
                        const Vocab& vocab);
std::vector<TemplatedSentence> read_preprocessed(std::istream& in, const Vocab& vocab,
                                                 const VocabPartition& partition);

}  // namespace twopass
