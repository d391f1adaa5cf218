#pragma once

// The two-pass language model p(y) = p1(template) · p2(fills | template),
// the single-pass baseline, exact scoring and ancestral sampling.

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twopass/corpus.hpp"
#include "twopass/partition.hpp"
#include "twopass/template.hpp"
#include "twopass/transformer.hpp"

namespace twopass {

/// full: both softmaxes run over the whole vocabulary.
/// renormalized: p1 is restricted to first-pass tokens, EOS and (when a
/// second pass exists) the placeholder; p2 to second-pass tokens.
enum class SupportMode { full, renormalized };

std::string_view to_string(SupportMode mode);
SupportMode parse_support_mode(std::string_view name);

/// Right-padded teacher-forcing inputs for a set of templated sentences.
/// Scored positions are listed as flat row indices into [size, len].
struct Batch {
  std::size_t size = 0;
  std::size_t len = 0;
  std::vector<std::size_t> lengths;

  std::vector<TokenId> p1_input;  // [BOS] + template[:-1]
  std::vector<TokenId> src;       // template
  std::vector<TokenId> p2_input;  // [BOS] + sentence[:-1]

  std::vector<std::size_t> p1_rows;  // every non-PAD position
  std::vector<TokenId> p1_targets;
  std::vector<std::size_t> p2_rows;  // placeholder positions only
  std::vector<TokenId> p2_targets;

  std::size_t tokens = 0;  // Σ source lengths, the loss denominator

  std::size_t owner(std::size_t row) const { return row / len; }
};

Batch make_batch(std::span<const TemplatedSentence> data);

struct SentenceScore {
  double logp1 = 0;
  double logp2 = 0;
  double loss = 0;  // −(logp1 + logp2) / source_len, nats per token
  std::size_t source_len = 0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> loss;             // Σ NLL / batch.tokens
  std::vector<double> logp1;  // per sentence
  std::vector<double> logp2;
};

template <typename T>
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::string_view kind() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual SupportMode support() const = 0;
  /// The split applied to sentences before scoring. All-first for the baseline.
  virtual const VocabPartition& partition() const = 0;
  virtual ParameterList<T>& parameters() = 0;
  virtual const ParameterList<T>& parameters() const = 0;

  /// Combined loss of both passes plus per-sentence log-probabilities.
  virtual ForwardResult<T> forward(Tape<T>& tape, const Batch& batch,
                                   const RunContext& ctx = {}) const = 0;

  /// Log-probabilities over the vocabulary for the template token following
  /// `prefix`, computed by an independent forward pass.
  virtual std::vector<double> next_template_logprobs(std::span<const TokenId> prefix) const = 0;
  /// Log-probabilities for the sentence token at position prefix.size(),
  /// given the full template and the sentence prefix.
  virtual std::vector<double> next_fill_logprobs(std::span<const TokenId> tmpl,
                                                 std::span<const TokenId> prefix) const = 0;

  std::size_t parameter_count() const;
  void zero_parameters();
  bool is_first_pass_legal(TokenId id) const;
};

template <typename T>
class TwoPassModel final : public LanguageModel<T> {
 public:
  /// Draws the embedding, then the template stack, then the fill stack from
  /// one generator seeded with `seed`.
  TwoPassModel(const ModelConfig& cfg, VocabPartition partition, SupportMode support,
               std::uint64_t seed);

  std::string_view kind() const override { return "two_pass"; }
  const ModelConfig& config() const override { return cfg_; }
  SupportMode support() const override { return support_; }
  const VocabPartition& partition() const override { return partition_; }
  ParameterList<T>& parameters() override { return params_; }
  const ParameterList<T>& parameters() const override { return params_; }

  ForwardResult<T> forward(Tape<T>& tape, const Batch& batch,
                           const RunContext& ctx = {}) const override;
  std::vector<double> next_template_logprobs(std::span<const TokenId> prefix) const override;
  std::vector<double> next_fill_logprobs(std::span<const TokenId> tmpl,
                                         std::span<const TokenId> prefix) const override;

  const SharedEmbedding<T>& shared() const { return shared_; }

 private:
  ModelConfig cfg_;
  VocabPartition partition_;
  SupportMode support_;
  SharedEmbedding<T> shared_;
  DecoderOnlyStack<T> template_lm_;
  EncoderDecoderStack<T> fill_model_;
  ParameterList<T> params_;
  Mask p1_excluded_;  // null in full mode
  Mask p2_excluded_;
};

template <typename T>
class BaselineModel final : public LanguageModel<T> {
 public:
  /// Same draw order as TwoPassModel minus the fill stack, so equal seeds give
  /// equal embeddings and decoder weights.
  BaselineModel(const ModelConfig& cfg, SupportMode support, std::uint64_t seed);

  std::string_view kind() const override { return "baseline"; }
  const ModelConfig& config() const override { return cfg_; }
  SupportMode support() const override { return support_; }
  const VocabPartition& partition() const override { return partition_; }
  ParameterList<T>& parameters() override { return params_; }
  const ParameterList<T>& parameters() const override { return params_; }

  ForwardResult<T> forward(Tape<T>& tape, const Batch& batch,
                           const RunContext& ctx = {}) const override;
  std::vector<double> next_template_logprobs(std::span<const TokenId> prefix) const override;
  /// Throws: a baseline has no second pass.
  std::vector<double> next_fill_logprobs(std::span<const TokenId> tmpl,
                                         std::span<const TokenId> prefix) const override;

 private:
  ModelConfig cfg_;
  VocabPartition partition_;
  SupportMode support_;
  SharedEmbedding<T> shared_;
  DecoderOnlyStack<T> lm_;
  ParameterList<T> params_;
  Mask excluded_;
};

/// "two_pass" or "baseline"; `partition` is ignored for the baseline.
template <typename T>
std::unique_ptr<LanguageModel<T>> make_model(std::string_view kind, const ModelConfig& cfg,
                                             const VocabPartition& partition,
                                             SupportMode support, std::uint64_t seed);

/// log p1(template), summed over every template position through EOS.
template <typename T>
double log_prob_template(const LanguageModel<T>& m, const TemplatedSentence& t);
/// log p2(fills | template), summed over placeholder positions only.
template <typename T>
double log_prob_fill(const LanguageModel<T>& m, const TemplatedSentence& t);
/// Splits with the model's partition and scores both passes.
template <typename T>
SentenceScore sentence_log_prob(const LanguageModel<T>& m, const Sentence& y);
template <typename T>
SentenceScore baseline_log_prob(const BaselineModel<T>& b, const Sentence& y);

/// Scores many sentences in length-sorted batches of about batch_tokens
/// padded tokens. Results follow the input order.
template <typename T>
std::vector<SentenceScore> score_sentences(const LanguageModel<T>& m,
                                           std::span<const Sentence> sentences,
                                           std::size_t batch_tokens = 4096);

/// One line per sentence: logp1 TAB logp2 TAB loss TAB len.
std::string format_scores(std::span<const SentenceScore> scores);

enum class SampleStatus {
  ok,
  truncated,  // no EOS within max_len
  invalid,    // a draw outside the pass's legal tokens (full-softmax mode)
};

std::string_view to_string(SampleStatus s);

struct Sample {
  SampleStatus status = SampleStatus::ok;
  TemplatedSentence templated;
  Sentence sentence;  // filled only when status is ok
};

/// Ancestral sampling: the template token by token from p1 until EOS, then
/// each fill left to right from p2. Conditionals can be memoised by prefix,
/// which changes nothing but speed.
template <typename T>
class Sampler {
 public:
  Sampler(const LanguageModel<T>& model, std::size_t max_len, bool memoize = false);

  Sample draw(std::mt19937_64& rng);

 private:
  const std::vector<double>& template_dist(const std::vector<TokenId>& prefix);
  const std::vector<double>& fill_dist(const std::vector<TokenId>& tmpl,
                                       const std::vector<TokenId>& prefix);
  TokenId pick(const std::vector<double>& probs, std::mt19937_64& rng);

  const LanguageModel<T>& model_;
  std::size_t max_len_;
  bool memoize_;
  std::vector<double> scratch_;
  std::map<std::vector<TokenId>, std::vector<double>> template_cache_;
  std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, std::vector<double>>
      fill_cache_;
};

/// Decodes a sample to token text (templates render placeholders as "__").
std::string describe_sample(const Sample& s, const Vocab& vocab);

extern template class TwoPassModel<float>;
extern template class TwoPassModel<double>;
extern template class BaselineModel<float>;
extern template class BaselineModel<double>;
extern template class Sampler<float>;
extern template class Sampler<double>;

}  // namespace twopass
