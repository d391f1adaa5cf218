#include "twopass/transformer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "twopass/error.hpp"

namespace twopass {

ModelConfig ModelConfig::desk(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.hidden = 512;
  c.filter = 2048;
  c.heads = 8;
  c.layers = 6;
  c.max_len = 256;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kNumSpecials)) {
    throw UsageError("model: vocab_size must exceed the " + std::to_string(kNumSpecials) +
                     " special ids, got " + std::to_string(vocab_size));
  }
  if (hidden == 0 || hidden % 2 != 0) {
    throw UsageError("model: hidden must be even and positive, got " + std::to_string(hidden));
  }
  if (heads == 0 || hidden % heads != 0) {
    throw UsageError("model: hidden " + std::to_string(hidden) + " not divisible by heads " +
                     std::to_string(heads));
  }
  if (filter == 0) throw UsageError("model: filter must be positive");
  if (max_len == 0) throw UsageError("model: max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw UsageError("model: dropout must be in [0, 1), got " + std::to_string(dropout));
  }
}

std::string ModelConfig::serialize() const {
  char dbuf[64];
  std::snprintf(dbuf, sizeof dbuf, "%.17g", dropout);
  return "vocab_size=" + std::to_string(vocab_size) + "\nhidden=" + std::to_string(hidden) +
         "\nfilter=" + std::to_string(filter) + "\nheads=" + std::to_string(heads) +
         "\nlayers=" + std::to_string(layers) + "\nmax_len=" + std::to_string(max_len) +
         "\ndropout=" + dbuf + "\n";
}

ModelConfig ModelConfig::parse(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto get = [&](const char* key, std::size_t& field) {
    if (auto it = kv.find(key); it != kv.end()) {
      try {
        field = std::stoul(it->second);
      } catch (const std::exception&) {
        throw UsageError(std::string("model: bad value for ") + key + ": " + it->second);
      }
    }
  };
  get("vocab_size", c.vocab_size);
  get("hidden", c.hidden);
  get("filter", c.filter);
  get("heads", c.heads);
  get("layers", c.layers);
  get("max_len", c.max_len);
  if (auto it = kv.find("dropout"); it != kv.end()) c.dropout = std::stod(it->second);
  return c;
}

std::size_t self_attention_layer_params(std::size_t h, std::size_t f) {
  // attention 4(h² + h), two LayerNorms 4h, feed-forward hf + f + fh + h
  return 4 * h * h + 2 * h * f + f + 9 * h;
}

std::size_t cross_attention_layer_params(std::size_t h, std::size_t f) {
  // two attentions 8(h² + h), three LayerNorms 6h, feed-forward 2hf + f + h
  return 8 * h * h + 2 * h * f + f + 15 * h;
}

std::size_t baseline_parameter_count(const ModelConfig& cfg) {
  return cfg.vocab_size * cfg.hidden +
         cfg.layers * self_attention_layer_params(cfg.hidden, cfg.filter);
}

std::size_t two_pass_parameter_count(const ModelConfig& cfg) {
  const std::size_t self = self_attention_layer_params(cfg.hidden, cfg.filter);
  const std::size_t cross = cross_attention_layer_params(cfg.hidden, cfg.filter);
  return cfg.vocab_size * cfg.hidden + cfg.layers * (2 * self + cross);
}

template <typename T>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t hidden) {
  if (hidden % 2 != 0) {
    throw ShapeError("positional_encoding: hidden must be even, got " + std::to_string(hidden));
  }
  std::vector<T> pe(max_len * hidden);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < hidden / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * i / static_cast<double>(hidden));
      pe[pos * hidden + 2 * i] = static_cast<T>(std::sin(angle));
      pe[pos * hidden + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>::from({max_len, hidden}, std::move(pe));
}

// ------------------------------------------------------------ initialisation

template <typename T>
Linear<T> Initializer<T>::linear(std::size_t in, std::size_t out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> w(in * out);
  for (auto& x : w) x = static_cast<T>(dist(rng_));
  return {Tensor<T>::from({in, out}, std::move(w), true), Tensor<T>::zeros({out}, true)};
}

template <typename T>
LayerNormParams<T> Initializer<T>::layer_norm(std::size_t h) {
  return {Tensor<T>::from({h}, std::vector<T>(h, T(1)), true), Tensor<T>::zeros({h}, true)};
}

template <typename T>
AttentionParams<T> Initializer<T>::attention(std::size_t h) {
  AttentionParams<T> p;
  p.q = linear(h, h);
  p.k = linear(h, h);
  p.v = linear(h, h);
  p.o = linear(h, h);
  return p;
}

template <typename T>
FeedForwardParams<T> Initializer<T>::feed_forward(std::size_t h, std::size_t f) {
  FeedForwardParams<T> p;
  p.in = linear(h, f);
  p.out = linear(f, h);
  return p;
}

template <typename T>
SelfAttentionLayer<T> Initializer<T>::self_layer(const ModelConfig& cfg) {
  SelfAttentionLayer<T> l;
  l.attn = attention(cfg.hidden);
  l.ln1 = layer_norm(cfg.hidden);
  l.ff = feed_forward(cfg.hidden, cfg.filter);
  l.ln2 = layer_norm(cfg.hidden);
  return l;
}

template <typename T>
CrossAttentionLayer<T> Initializer<T>::cross_layer(const ModelConfig& cfg) {
  CrossAttentionLayer<T> l;
  l.self = attention(cfg.hidden);
  l.ln1 = layer_norm(cfg.hidden);
  l.cross = attention(cfg.hidden);
  l.ln2 = layer_norm(cfg.hidden);
  l.ff = feed_forward(cfg.hidden, cfg.filter);
  l.ln3 = layer_norm(cfg.hidden);
  return l;
}

template <typename T>
SharedEmbedding<T> Initializer<T>::embedding(const ModelConfig& cfg) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
  std::vector<T> w(cfg.vocab_size * cfg.hidden);
  for (auto& x : w) x = static_cast<T>(dist(rng_));
  return {Tensor<T>::from({cfg.vocab_size, cfg.hidden}, std::move(w), true)};
}

template <typename T>
DecoderOnlyStack<T> Initializer<T>::decoder_only(const ModelConfig& cfg) {
  DecoderOnlyStack<T> s;
  for (std::size_t i = 0; i < cfg.layers; ++i) s.layers.push_back(self_layer(cfg));
  return s;
}

template <typename T>
EncoderDecoderStack<T> Initializer<T>::encoder_decoder(const ModelConfig& cfg) {
  EncoderDecoderStack<T> s;
  for (std::size_t i = 0; i < cfg.layers; ++i) s.encoder.push_back(self_layer(cfg));
  for (std::size_t i = 0; i < cfg.layers; ++i) s.decoder.push_back(cross_layer(cfg));
  return s;
}

// ------------------------------------------------------------ parameter lists

namespace {

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const Linear<T>& l) {
  out.push_back({name + ".weight", l.weight});
  out.push_back({name + ".bias", l.bias});
}

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const LayerNormParams<T>& l) {
  out.push_back({name + ".gain", l.gain});
  out.push_back({name + ".bias", l.bias});
}

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const AttentionParams<T>& a) {
  add(out, name + ".q", a.q);
  add(out, name + ".k", a.k);
  add(out, name + ".v", a.v);
  add(out, name + ".o", a.o);
}

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const FeedForwardParams<T>& f) {
  add(out, name + ".ff_in", f.in);
  add(out, name + ".ff_out", f.out);
}

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const SelfAttentionLayer<T>& l) {
  add(out, name + ".attn", l.attn);
  add(out, name + ".ln1", l.ln1);
  add(out, name, l.ff);
  add(out, name + ".ln2", l.ln2);
}

template <typename T>
void add(ParameterList<T>& out, const std::string& name, const CrossAttentionLayer<T>& l) {
  add(out, name + ".self", l.self);
  add(out, name + ".ln1", l.ln1);
  add(out, name + ".cross", l.cross);
  add(out, name + ".ln2", l.ln2);
  add(out, name, l.ff);
  add(out, name + ".ln3", l.ln3);
}

}  // namespace

template <typename T>
void collect_parameters(const DecoderOnlyStack<T>& stack, const std::string& prefix,
                        ParameterList<T>& out) {
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    add(out, prefix + ".layer" + std::to_string(i), stack.layers[i]);
  }
}

template <typename T>
void collect_parameters(const EncoderDecoderStack<T>& stack, const std::string& prefix,
                        ParameterList<T>& out) {
  for (std::size_t i = 0; i < stack.encoder.size(); ++i) {
    add(out, prefix + ".encoder" + std::to_string(i), stack.encoder[i]);
  }
  for (std::size_t i = 0; i < stack.decoder.size(); ++i) {
    add(out, prefix + ".decoder" + std::to_string(i), stack.decoder[i]);
  }
}

// ------------------------------------------------------------ forward

Mask causal_mask(std::size_t len) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(len * len, 0);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = i + 1; j < len; ++j) (*m)[i * len + j] = 1;
  }
  return m;
}

Mask padding_mask(std::span<const std::size_t> lengths, std::size_t q_len, std::size_t k_len) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(lengths.size() * q_len * k_len, 0);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    for (std::size_t i = 0; i < q_len; ++i) {
      for (std::size_t j = lengths[b]; j < k_len; ++j) (*m)[(b * q_len + i) * k_len + j] = 1;
    }
  }
  return m;
}

namespace {

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Linear<T>& l) {
  return tape.add(tape.matmul(x, l.weight), l.bias);
}

template <typename T>
Tensor<T> drop(Tape<T>& tape, const Tensor<T>& x, const RunContext& ctx) {
  if (ctx.rng == nullptr || ctx.dropout <= 0.0) return x;
  return tape.dropout(x, static_cast<T>(ctx.dropout), *ctx.rng);
}

template <typename T>
Tensor<T> norm(Tape<T>& tape, const Tensor<T>& x, const LayerNormParams<T>& p) {
  return tape.layer_norm(x, p.gain, p.bias, T(1e-6));
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const Tensor<T>& x, const FeedForwardParams<T>& p) {
  return linear(tape, tape.relu(linear(tape, x, p.in)), p.out);
}

template <typename T>
Tensor<T> self_layer(Tape<T>& tape, Tensor<T> x, const SelfAttentionLayer<T>& l, const Mask& mask,
                     std::size_t heads, const RunContext& ctx) {
  auto a = multi_head_attention(tape, x, x, mask, l.attn, heads);
  x = norm(tape, tape.add(x, drop(tape, a, ctx)), l.ln1);
  auto f = feed_forward(tape, x, l.ff);
  return norm(tape, tape.add(x, drop(tape, f, ctx)), l.ln2);
}

void check_sequence(std::size_t ids, std::size_t batch, std::size_t len, const ModelConfig& cfg) {
  if (ids != batch * len) {
    throw ShapeError("forward: " + std::to_string(ids) + " ids for batch " +
                     std::to_string(batch) + " x length " + std::to_string(len));
  }
  if (len > cfg.max_len) {
    throw ShapeError("forward: sequence length " + std::to_string(len) + " exceeds max_len " +
                     std::to_string(cfg.max_len));
  }
}

}  // namespace

template <typename T>
Tensor<T> multi_head_attention(Tape<T>& tape, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const Mask& mask, const AttentionParams<T>& p, std::size_t heads) {
  if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(0) != kv_in.dim(0) ||
      q_in.dim(2) != kv_in.dim(2)) {
    throw ShapeError("attention: query " + shape_string(q_in.shape()) + " and memory " +
                     shape_string(kv_in.shape()) + " do not match");
  }
  const std::size_t hidden = q_in.dim(2);
  if (heads == 0 || hidden % heads != 0) {
    throw ShapeError("attention: hidden " + std::to_string(hidden) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t d = hidden / heads;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  auto q = linear(tape, q_in, p.q);
  auto k = linear(tape, kv_in, p.k);
  auto v = linear(tape, kv_in, p.v);
  std::vector<Tensor<T>> ctx;
  ctx.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : tape.slice(q, h * d, d);
    auto kh = heads == 1 ? k : tape.slice(k, h * d, d);
    auto vh = heads == 1 ? v : tape.slice(v, h * d, d);
    auto scores = tape.scale(tape.matmul(qh, kh, true), inv_sqrt_d);
    if (mask) scores = tape.masked_fill(scores, mask, -std::numeric_limits<T>::infinity());
    ctx.push_back(tape.matmul(tape.softmax(scores), vh));
  }
  auto joined = heads == 1 ? ctx[0] : tape.concat(std::span<const Tensor<T>>(ctx));
  return linear(tape, joined, p.o);
}

template <typename T>
Tensor<T> embed(Tape<T>& tape, const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                std::size_t batch, std::size_t len, const ModelConfig& cfg) {
  check_sequence(ids.size(), batch, len, cfg);
  auto x = tape.embedding(shared.matrix, ids, {batch, len});
  x = tape.scale(x, static_cast<T>(std::sqrt(static_cast<double>(cfg.hidden))));
  return tape.add(x, positional_encoding<T>(len, cfg.hidden));
}

template <typename T>
Tensor<T> output_logits(Tape<T>& tape, const Tensor<T>& states, const SharedEmbedding<T>& shared) {
  return tape.matmul(states, shared.matrix, true);
}

template <typename T>
Tensor<T> decoder_only_states(Tape<T>& tape, const DecoderOnlyStack<T>& stack,
                              const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                              std::size_t batch, std::size_t len, const ModelConfig& cfg,
                              const RunContext& ctx) {
  auto x = drop(tape, embed(tape, shared, ids, batch, len, cfg), ctx);
  const Mask mask = causal_mask(len);
  for (const auto& layer : stack.layers) x = self_layer(tape, x, layer, mask, cfg.heads, ctx);
  return x;
}

template <typename T>
Tensor<T> decoder_only_forward(Tape<T>& tape, const DecoderOnlyStack<T>& stack,
                               const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                               std::size_t batch, std::size_t len, const ModelConfig& cfg,
                               const RunContext& ctx) {
  return output_logits(tape, decoder_only_states(tape, stack, shared, ids, batch, len, cfg, ctx),
                       shared);
}

template <typename T>
Tensor<T> encoder_decoder_forward(Tape<T>& tape, const EncoderDecoderStack<T>& stack,
                                  const SharedEmbedding<T>& shared, std::span<const TokenId> src,
                                  std::span<const TokenId> tgt,
                                  std::span<const std::size_t> lengths, std::size_t batch,
                                  std::size_t len, const ModelConfig& cfg,
                                  const RunContext& ctx) {
  return output_logits(
      tape, encoder_decoder_states(tape, stack, shared, src, tgt, lengths, batch, len, cfg, ctx),
      shared);
}

template <typename T>
Tensor<T> encoder_decoder_states(Tape<T>& tape, const EncoderDecoderStack<T>& stack,
                                  const SharedEmbedding<T>& shared, std::span<const TokenId> src,
                                  std::span<const TokenId> tgt,
                                  std::span<const std::size_t> lengths, std::size_t batch,
                                  std::size_t len, const ModelConfig& cfg,
                                  const RunContext& ctx) {
  if (src.size() != tgt.size() || lengths.size() != batch) {
    throw ShapeError("encoder_decoder_forward: source has " + std::to_string(src.size()) +
                     " ids, target " + std::to_string(tgt.size()) + ", lengths " +
                     std::to_string(lengths.size()));
  }
  const Mask pad = padding_mask(lengths, len, len);
  auto memory = drop(tape, embed(tape, shared, src, batch, len, cfg), ctx);
  for (const auto& layer : stack.encoder) {
    memory = self_layer(tape, memory, layer, pad, cfg.heads, ctx);
  }
  const Mask causal = causal_mask(len);
  auto x = drop(tape, embed(tape, shared, tgt, batch, len, cfg), ctx);
  for (const auto& l : stack.decoder) {
    auto a = multi_head_attention(tape, x, x, causal, l.self, cfg.heads);
    x = norm(tape, tape.add(x, drop(tape, a, ctx)), l.ln1);
    auto c = multi_head_attention(tape, x, memory, pad, l.cross, cfg.heads);
    x = norm(tape, tape.add(x, drop(tape, c, ctx)), l.ln2);
    auto f = feed_forward(tape, x, l.ff);
    x = norm(tape, tape.add(x, drop(tape, f, ctx)), l.ln3);
  }
  return x;
}

#define TWOPASS_INSTANTIATE(T)                                                                  \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                          \
  template class Initializer<T>;                                                                \
  template void collect_parameters<T>(const DecoderOnlyStack<T>&, const std::string&,           \
                                      ParameterList<T>&);                                       \
  template void collect_parameters<T>(const EncoderDecoderStack<T>&, const std::string&,        \
                                      ParameterList<T>&);                                       \
  template Tensor<T> multi_head_attention<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                             const Mask&, const AttentionParams<T>&,            \
                                             std::size_t);                                      \
  template Tensor<T> embed<T>(Tape<T>&, const SharedEmbedding<T>&, std::span<const TokenId>,    \
                              std::size_t, std::size_t, const ModelConfig&);                    \
  template Tensor<T> decoder_only_forward<T>(Tape<T>&, const DecoderOnlyStack<T>&,              \
                                             const SharedEmbedding<T>&, std::span<const TokenId>, \
                                             std::size_t, std::size_t, const ModelConfig&,      \
                                             const RunContext&);                                \
  template Tensor<T> encoder_decoder_forward<T>(                                                \
      Tape<T>&, const EncoderDecoderStack<T>&, const SharedEmbedding<T>&,                       \
      std::span<const TokenId>, std::span<const TokenId>, std::span<const std::size_t>,          \
      std::size_t, std::size_t, const ModelConfig&, const RunContext&);                         \
  template Tensor<T> decoder_only_states<T>(Tape<T>&, const DecoderOnlyStack<T>&,               \
                                            const SharedEmbedding<T>&, std::span<const TokenId>, \
                                            std::size_t, std::size_t, const ModelConfig&,       \
                                            const RunContext&);                                 \
  template Tensor<T> encoder_decoder_states<T>(                                                 \
      Tape<T>&, const EncoderDecoderStack<T>&, const SharedEmbedding<T>&,                       \
      std::span<const TokenId>, std::span<const TokenId>, std::span<const std::size_t>,          \
      std::size_t, std::size_t, const ModelConfig&, const RunContext&);                         \
  template Tensor<T> output_logits<T>(Tape<T>&, const Tensor<T>&, const SharedEmbedding<T>&);

TWOPASS_INSTANTIATE(float)
TWOPASS_INSTANTIATE(double)

}  // namespace twopass
