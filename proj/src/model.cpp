#include "twopass/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "twopass/error.hpp"

namespace twopass {

std::string_view to_string(SupportMode mode) {
  return mode == SupportMode::full ? "full" : "renormalized";
}

SupportMode parse_support_mode(std::string_view name) {
  if (name == "full") return SupportMode::full;
  if (name == "renormalized") return SupportMode::renormalized;
  throw UsageError("unknown support mode '" + std::string(name) +
                   "' (expected full or renormalized)");
}

std::string_view to_string(SampleStatus s) {
  switch (s) {
    case SampleStatus::ok: return "ok";
    case SampleStatus::truncated: return "truncated";
    case SampleStatus::invalid: return "invalid";
  }
  return "?";
}

Batch make_batch(std::span<const TemplatedSentence> data) {
  Batch b;
  b.size = data.size();
  for (const auto& t : data) b.len = std::max(b.len, t.source_len());
  const std::size_t cells = b.size * b.len;
  b.p1_input.assign(cells, kPad);
  b.src.assign(cells, kPad);
  b.p2_input.assign(cells, kPad);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& t = data[i];
    const auto y = fill_in(t);
    const std::size_t n = t.source_len();
    if (n == 0) throw DataError("make_batch: empty template");
    b.lengths.push_back(n);
    b.tokens += n;
    const std::size_t base = i * b.len;
    for (std::size_t p = 0; p < n; ++p) {
      b.p1_input[base + p] = p == 0 ? kBos : t.tmpl[p - 1];
      b.p2_input[base + p] = p == 0 ? kBos : y[p - 1];
      b.src[base + p] = t.tmpl[p];
      b.p1_rows.push_back(base + p);
      b.p1_targets.push_back(t.tmpl[p]);
      if (t.tmpl[p] == kPlaceholder) {
        b.p2_rows.push_back(base + p);
        b.p2_targets.push_back(y[p]);
      }
    }
  }
  return b;
}

// ------------------------------------------------------------ shared pieces

namespace {


Mask exclusion_mask(std::size_t vocab, const std::function<bool(TokenId)>& allowed) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(vocab, 0);
  for (std::size_t id = 0; id < vocab; ++id) (*m)[id] = allowed(static_cast<TokenId>(id)) ? 0 : 1;
  return m;
}

/// Log-probabilities of `targets` at the listed rows of `states`, summed
/// into a scalar and, per owning sentence, into `per_sentence`.
template <typename T>
Tensor<T> score_rows(Tape<T>& tape, const Tensor<T>& states, const SharedEmbedding<T>& shared,
                     std::span<const std::size_t> rows, std::span<const TokenId> targets,
                     const Mask& excluded, const Batch& batch, std::vector<double>& per_sentence) {
  auto logits = output_logits(tape, tape.gather_rows(states, rows), shared);
  if (excluded) logits = tape.masked_fill(logits, excluded, -std::numeric_limits<T>::infinity());
  auto lp = tape.log_softmax(logits);
  const std::vector<T> weights(rows.size(), T(1));
  auto total = tape.pick_sum(lp, targets, weights);
  const std::size_t v = lp.dim(-1);
  auto values = lp.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    per_sentence[batch.owner(rows[i])] += static_cast<double>(values[i * v + targets[i]]);
  }
  return total;
}

template <typename T>
std::vector<double> last_row_logprobs(Tape<T>& tape, const Tensor<T>& states, std::size_t row,
                                      const SharedEmbedding<T>& shared, const Mask& excluded) {
  const std::size_t rows[] = {row};
  auto logits = output_logits(tape, tape.gather_rows(states, rows), shared);
  if (excluded) logits = tape.masked_fill(logits, excluded, -std::numeric_limits<T>::infinity());
  auto lp = tape.log_softmax(logits);
  return {lp.values().begin(), lp.values().end()};
}

template <typename T>
ForwardResult<T> template_pass(Tape<T>& tape, const DecoderOnlyStack<T>& stack,
                               const SharedEmbedding<T>& shared, const Mask& excluded,
                               const ModelConfig& cfg, const Batch& batch, const RunContext& ctx,
                               Tensor<T>& total) {
  ForwardResult<T> r;
  r.logp1.assign(batch.size, 0.0);
  r.logp2.assign(batch.size, 0.0);
  auto states = decoder_only_states(tape, stack, shared, batch.p1_input, batch.size, batch.len,
                                    cfg, ctx);
  total = score_rows(tape, states, shared, batch.p1_rows, batch.p1_targets, excluded, batch,
                     r.logp1);
  return r;
}

template <typename T>
Tensor<T> finish_loss(Tape<T>& tape, const Tensor<T>& total, const Batch& batch) {
  return tape.scale(total, T(-1) / static_cast<T>(batch.tokens));
}

std::vector<TokenId> shifted(std::span<const TokenId> prefix) {
  std::vector<TokenId> ids;
  ids.reserve(prefix.size() + 1);
  ids.push_back(kBos);
  ids.insert(ids.end(), prefix.begin(), prefix.end());
  return ids;
}

}  // namespace

// ------------------------------------------------------------ LanguageModel

template <typename T>
std::size_t LanguageModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void LanguageModel<T>::zero_parameters() {
  for (auto& p : parameters()) {
    auto v = p.tensor.values();
    std::fill(v.begin(), v.end(), T(0));
  }
}

template <typename T>
bool LanguageModel<T>::is_first_pass_legal(TokenId id) const {
  const auto& part = partition();
  return part.is_first_pass(id) || (id == kPlaceholder && part.has_second_pass());
}

// ------------------------------------------------------------ TwoPassModel

template <typename T>
TwoPassModel<T>::TwoPassModel(const ModelConfig& cfg, VocabPartition partition,
                              SupportMode support, std::uint64_t seed)
    : cfg_(cfg), partition_(std::move(partition)), support_(support) {
  cfg_.validate();
  if (partition_.vocab_size() != cfg_.vocab_size) {
    throw UsageError("model: partition covers " + std::to_string(partition_.vocab_size()) +
                     " ids but vocab_size is " + std::to_string(cfg_.vocab_size));
  }
  std::mt19937_64 rng(seed);
  Initializer<T> init(rng);
  shared_ = init.embedding(cfg_);
  template_lm_ = init.decoder_only(cfg_);
  fill_model_ = init.encoder_decoder(cfg_);
  params_.push_back({"embedding", shared_.matrix});
  collect_parameters(template_lm_, "p1", params_);
  collect_parameters(fill_model_, "p2", params_);
  if (support_ == SupportMode::renormalized) {
    p1_excluded_ = exclusion_mask(cfg_.vocab_size, [&](TokenId id) {
      return partition_.is_first_pass(id) || (id == kPlaceholder && partition_.has_second_pass());
    });
    p2_excluded_ = exclusion_mask(cfg_.vocab_size,
                                  [&](TokenId id) { return partition_.is_second_pass(id); });
  }
}

template <typename T>
ForwardResult<T> TwoPassModel<T>::forward(Tape<T>& tape, const Batch& batch,
                                          const RunContext& ctx) const {
  Tensor<T> total;
  auto r = template_pass(tape, template_lm_, shared_, p1_excluded_, cfg_, batch, ctx, total);
  if (!batch.p2_rows.empty()) {
    auto states = encoder_decoder_states(tape, fill_model_, shared_, batch.src, batch.p2_input,
                                         batch.lengths, batch.size, batch.len, cfg_, ctx);
    auto s2 = score_rows(tape, states, shared_, batch.p2_rows, batch.p2_targets, p2_excluded_,
                         batch, r.logp2);
    total = tape.add(total, s2);
  }
  r.loss = finish_loss(tape, total, batch);
  return r;
}

template <typename T>
std::vector<double> TwoPassModel<T>::next_template_logprobs(
    std::span<const TokenId> prefix) const {
  const auto ids = shifted(prefix);
  Tape<T> tape(false);
  auto states = decoder_only_states(tape, template_lm_, shared_, ids, 1, ids.size(), cfg_);
  return last_row_logprobs(tape, states, ids.size() - 1, shared_, p1_excluded_);
}

template <typename T>
std::vector<double> TwoPassModel<T>::next_fill_logprobs(std::span<const TokenId> tmpl,
                                                        std::span<const TokenId> prefix) const {
  const std::size_t n = tmpl.size();
  if (prefix.size() >= n) {
    throw ShapeError("next_fill_logprobs: prefix of " + std::to_string(prefix.size()) +
                     " tokens for a template of " + std::to_string(n));
  }
  // Positions after the prefix are padding; causal masking keeps them unseen.
  std::vector<TokenId> tgt(n, kPad);
  tgt[0] = kBos;
  std::copy(prefix.begin(), prefix.end(), tgt.begin() + 1);
  const std::size_t lengths[] = {n};
  Tape<T> tape(false);
  auto states = encoder_decoder_states(tape, fill_model_, shared_, tmpl, tgt, lengths, 1, n, cfg_);
  return last_row_logprobs(tape, states, prefix.size(), shared_, p2_excluded_);
}

// ------------------------------------------------------------ BaselineModel

namespace {

VocabPartition baseline_partition(std::size_t vocab_size) {
  std::vector<std::uint8_t> first(vocab_size, 0);
  for (std::size_t id = 0; id < vocab_size; ++id) {
    const auto t = static_cast<TokenId>(id);
    first[id] = (t >= kNumSpecials || t == kUnk || t == kEos) ? 1 : 0;
  }
  return VocabPartition(Strategy::all_first, std::move(first));
}

}  // namespace

template <typename T>
BaselineModel<T>::BaselineModel(const ModelConfig& cfg, SupportMode support, std::uint64_t seed)
    : cfg_(cfg), support_(support) {
  cfg_.validate();
  partition_ = baseline_partition(cfg_.vocab_size);
  std::mt19937_64 rng(seed);
  Initializer<T> init(rng);
  shared_ = init.embedding(cfg_);
  lm_ = init.decoder_only(cfg_);
  params_.push_back({"embedding", shared_.matrix});
  collect_parameters(lm_, "p1", params_);
  if (support_ == SupportMode::renormalized) {
    excluded_ = exclusion_mask(cfg_.vocab_size,
                               [&](TokenId id) { return partition_.is_first_pass(id); });
  }
}

template <typename T>
ForwardResult<T> BaselineModel<T>::forward(Tape<T>& tape, const Batch& batch,
                                           const RunContext& ctx) const {
  if (!batch.p2_rows.empty()) {
    throw DataError("baseline model given a batch with placeholders");
  }
  Tensor<T> total;
  auto r = template_pass(tape, lm_, shared_, excluded_, cfg_, batch, ctx, total);
  r.loss = finish_loss(tape, total, batch);
  return r;
}

template <typename T>
std::vector<double> BaselineModel<T>::next_template_logprobs(
    std::span<const TokenId> prefix) const {
  const auto ids = shifted(prefix);
  Tape<T> tape(false);
  auto states = decoder_only_states(tape, lm_, shared_, ids, 1, ids.size(), cfg_);
  return last_row_logprobs(tape, states, ids.size() - 1, shared_, excluded_);
}

template <typename T>
std::vector<double> BaselineModel<T>::next_fill_logprobs(std::span<const TokenId>,
                                                         std::span<const TokenId>) const {
  throw UsageError("baseline model has no second pass");
}

template <typename T>
std::unique_ptr<LanguageModel<T>> make_model(std::string_view kind, const ModelConfig& cfg,
                                             const VocabPartition& partition,
                                             SupportMode support, std::uint64_t seed) {
  if (kind == "two_pass") return std::make_unique<TwoPassModel<T>>(cfg, partition, support, seed);
  if (kind == "baseline") return std::make_unique<BaselineModel<T>>(cfg, support, seed);
  throw UsageError("unknown model kind '" + std::string(kind) + "'");
}

// ------------------------------------------------------------ scoring

namespace {

template <typename T>
ForwardResult<T> score_one(const LanguageModel<T>& m, const TemplatedSentence& t) {
  validate_templated(t, m.partition());
  const TemplatedSentence one[] = {t};
  Tape<T> tape(false);
  return m.forward(tape, make_batch(one));
}

SentenceScore make_score(double logp1, double logp2, std::size_t len) {
  return {logp1, logp2, -(logp1 + logp2) / static_cast<double>(len), len};
}

}  // namespace

template <typename T>
double log_prob_template(const LanguageModel<T>& m, const TemplatedSentence& t) {
  return score_one(m, t).logp1[0];
}

template <typename T>
double log_prob_fill(const LanguageModel<T>& m, const TemplatedSentence& t) {
  if (t.fills.empty()) return 0.0;
  return score_one(m, t).logp2[0];
}

template <typename T>
SentenceScore sentence_log_prob(const LanguageModel<T>& m, const Sentence& y) {
  const auto t = split_sentence(y, m.partition());
  const auto r = score_one(m, t);
  return make_score(r.logp1[0], r.logp2[0], y.size());
}

template <typename T>
SentenceScore baseline_log_prob(const BaselineModel<T>& b, const Sentence& y) {
  return sentence_log_prob<T>(b, y);
}

template <typename T>
std::vector<SentenceScore> score_sentences(const LanguageModel<T>& m,
                                           std::span<const Sentence> sentences,
                                           std::size_t batch_tokens) {
  std::vector<std::size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sentences[a].size() < sentences[b].size();
  });
  std::vector<SentenceScore> out(sentences.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::vector<TemplatedSentence> group;
    std::vector<std::size_t> idx;
    while (i < order.size()) {
      const std::size_t len = sentences[order[i]].size();
      if (!group.empty() && (group.size() + 1) * len > batch_tokens) break;
      group.push_back(split_sentence(sentences[order[i]], m.partition()));
      idx.push_back(order[i]);
      ++i;
    }
    Tape<T> tape(false);
    const auto r = m.forward(tape, make_batch(group));
    for (std::size_t g = 0; g < group.size(); ++g) {
      out[idx[g]] = make_score(r.logp1[g], r.logp2[g], group[g].source_len());
    }
  }
  return out;
}

std::string format_scores(std::span<const SentenceScore> scores) {
  std::string out;
  char buf[160];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.12g\t%.12g\t%.12g\t%zu\n", s.logp1, s.logp2, s.loss,
                  s.source_len);
    out += buf;
  }
  return out;
}

// ------------------------------------------------------------ sampling

template <typename T>
Sampler<T>::Sampler(const LanguageModel<T>& model, std::size_t max_len, bool memoize)
    : model_(model), max_len_(max_len), memoize_(memoize) {
  if (max_len_ == 0 || max_len_ > model.config().max_len) {
    throw UsageError("sample: max_len must be in [1, " + std::to_string(model.config().max_len) +
                     "]");
  }
}

namespace {

std::vector<double> to_probs(const std::vector<double>& logprobs) {
  std::vector<double> p(logprobs.size());
  std::transform(logprobs.begin(), logprobs.end(), p.begin(),
                 [](double lp) { return std::exp(lp); });
  return p;
}

}  // namespace

template <typename T>
const std::vector<double>& Sampler<T>::template_dist(const std::vector<TokenId>& prefix) {
  if (!memoize_) return scratch_ = to_probs(model_.next_template_logprobs(prefix));
  auto it = template_cache_.find(prefix);
  if (it == template_cache_.end()) {
    it = template_cache_.emplace(prefix, to_probs(model_.next_template_logprobs(prefix))).first;
  }
  return it->second;
}

template <typename T>
const std::vector<double>& Sampler<T>::fill_dist(const std::vector<TokenId>& tmpl,
                                                 const std::vector<TokenId>& prefix) {
  if (!memoize_) return scratch_ = to_probs(model_.next_fill_logprobs(tmpl, prefix));
  auto key = std::make_pair(tmpl, prefix);
  auto it = fill_cache_.find(key);
  if (it == fill_cache_.end()) {
    it = fill_cache_.emplace(std::move(key), to_probs(model_.next_fill_logprobs(tmpl, prefix)))
             .first;
  }
  return it->second;
}

template <typename T>
TokenId Sampler<T>::pick(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::discrete_distribution<TokenId> dist(probs.begin(), probs.end());
  return dist(rng);
}

template <typename T>
Sample Sampler<T>::draw(std::mt19937_64& rng) {
  Sample s;
  auto& tmpl = s.templated.tmpl;
  while (tmpl.size() < max_len_) {
    const TokenId tok = pick(template_dist(tmpl), rng);
    tmpl.push_back(tok);
    if (!model_.is_first_pass_legal(tok)) {
      s.status = SampleStatus::invalid;
      return s;
    }
    if (tok == kEos) break;
  }
  if (tmpl.empty() || tmpl.back() != kEos) {
    s.status = SampleStatus::truncated;
    return s;
  }
  std::vector<TokenId> y = tmpl;
  const auto& part = model_.partition();
  for (std::size_t t = 0; t < y.size(); ++t) {
    if (y[t] != kPlaceholder) continue;
    const std::vector<TokenId> prefix(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t));
    const TokenId tok = pick(fill_dist(tmpl, prefix), rng);
    s.templated.fills.push_back(tok);
    if (!part.is_second_pass(tok)) {
      s.status = SampleStatus::invalid;
      return s;
    }
    y[t] = tok;
  }
  s.sentence.ids = std::move(y);
  return s;
}

std::string describe_sample(const Sample& s, const Vocab& vocab) {
  std::string out = std::string(to_string(s.status)) + "\t";
  std::string tmpl;
  for (TokenId id : s.templated.tmpl) {
    if (!tmpl.empty()) tmpl += ' ';
    tmpl += id >= 0 && static_cast<std::size_t>(id) < vocab.size() ? vocab.token(id) : "?";
  }
  out += tmpl + "\t";
  if (s.status == SampleStatus::ok) out += decode(vocab, s.sentence.ids);
  return out;
}

template class LanguageModel<float>;
template class LanguageModel<double>;
template class TwoPassModel<float>;
template class TwoPassModel<double>;
template class BaselineModel<float>;
template class BaselineModel<double>;
template class Sampler<float>;
template class Sampler<double>;

#define TWOPASS_INSTANTIATE(T)                                                                    \
  template std::unique_ptr<LanguageModel<T>> make_model<T>(                                       \
      std::string_view, const ModelConfig&, const VocabPartition&, SupportMode, std::uint64_t);   \
  template double log_prob_template<T>(const LanguageModel<T>&, const TemplatedSentence&);        \
  template double log_prob_fill<T>(const LanguageModel<T>&, const TemplatedSentence&);            \
  template SentenceScore sentence_log_prob<T>(const LanguageModel<T>&, const Sentence&);          \
  template SentenceScore baseline_log_prob<T>(const BaselineModel<T>&, const Sentence&);          \
  template std::vector<SentenceScore> score_sentences<T>(const LanguageModel<T>&,                 \
                                                         std::span<const Sentence>, std::size_t);

TWOPASS_INSTANTIATE(float)
TWOPASS_INSTANTIATE(double)

}  // namespace twopass
