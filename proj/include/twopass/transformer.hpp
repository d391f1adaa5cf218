#pragma once

// Transformer building blocks: tied embeddings, sinusoidal positions,
// multi-head attention and post-norm decoder-only / encoder-decoder stacks.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "twopass/tape.hpp"
#include "twopass/tensor.hpp"

namespace twopass {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t filter = 256;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t max_len = 64;  // positions, EOS included
  double dropout = 0.0;

  /// hidden 64, filter 256, 2 heads, 2 layers.
  static ModelConfig desk(std::size_t vocab_size);
  /// hidden 512, filter 2048, 8 heads, 6 layers (the Transformer "base" depth).
  static ModelConfig paper(std::size_t vocab_size);

  /// Throws UsageError naming the offending field.
  void validate() const;

  /// key=value lines in a fixed order.
  std::string serialize() const;
  static ModelConfig parse(const std::map<std::string, std::string>& kv);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameters of a post-norm layer with one self-attention block:
/// 4h² + 2hf + f + 9h.
std::size_t self_attention_layer_params(std::size_t hidden, std::size_t filter);
/// Parameters of an encoder-decoder decoder layer (self + cross attention):
/// 8h² + 2hf + f + 15h.
std::size_t cross_attention_layer_params(std::size_t hidden, std::size_t filter);
/// Shared embedding plus one decoder-only stack.
std::size_t baseline_parameter_count(const ModelConfig& cfg);
/// Shared embedding plus the template stack and the fill encoder-decoder.
std::size_t two_pass_parameter_count(const ModelConfig& cfg);

/// pe[pos, 2i] = sin(pos / 10000^(2i/h)), pe[pos, 2i+1] = cos(same).
template <typename T>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t hidden);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct AttentionParams {
  Linear<T> q, k, v, o;
};

template <typename T>
struct FeedForwardParams {
  Linear<T> in, out;
};

/// Decoder-only layer, also used for the encoder.
template <typename T>
struct SelfAttentionLayer {
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  FeedForwardParams<T> ff;
  LayerNormParams<T> ln2;
};

template <typename T>
struct CrossAttentionLayer {
  AttentionParams<T> self;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross;
  LayerNormParams<T> ln2;
  FeedForwardParams<T> ff;
  LayerNormParams<T> ln3;
};

/// One vocab × hidden matrix serving as the input embedding of every stack
/// and as the output projection of both decoders.
template <typename T>
struct SharedEmbedding {
  Tensor<T> matrix;
};

template <typename T>
struct DecoderOnlyStack {
  std::vector<SelfAttentionLayer<T>> layers;
};

template <typename T>
struct EncoderDecoderStack {
  std::vector<SelfAttentionLayer<T>> encoder;
  std::vector<CrossAttentionLayer<T>> decoder;
};

/// Glorot-uniform matrices, zero biases, unit LayerNorm gains and
/// N(0, hidden^-1/2) embeddings, drawn from `rng` in construction order.
template <typename T>
class Initializer {
 public:
  explicit Initializer(std::mt19937_64& rng) : rng_(rng) {}

  SharedEmbedding<T> embedding(const ModelConfig& cfg);
  DecoderOnlyStack<T> decoder_only(const ModelConfig& cfg);
  EncoderDecoderStack<T> encoder_decoder(const ModelConfig& cfg);

 private:
  Linear<T> linear(std::size_t in, std::size_t out);
  LayerNormParams<T> layer_norm(std::size_t h);
  AttentionParams<T> attention(std::size_t h);
  FeedForwardParams<T> feed_forward(std::size_t h, std::size_t f);
  SelfAttentionLayer<T> self_layer(const ModelConfig& cfg);
  CrossAttentionLayer<T> cross_layer(const ModelConfig& cfg);

  std::mt19937_64& rng_;
};

/// Appends every parameter tensor with a dotted name.
template <typename T>
void collect_parameters(const DecoderOnlyStack<T>& stack, const std::string& prefix,
                        ParameterList<T>& out);
template <typename T>
void collect_parameters(const EncoderDecoderStack<T>& stack, const std::string& prefix,
                        ParameterList<T>& out);

/// Dropout settings for one forward pass. Inactive when rng is null.
struct RunContext {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Causal mask over [len, len]: key j is hidden from query i when j > i.
Mask causal_mask(std::size_t len);
/// Key-padding mask over [batch, q_len, k_len]: key j is hidden when j >= lengths[b].
Mask padding_mask(std::span<const std::size_t> lengths, std::size_t q_len, std::size_t k_len);

/// softmax(QKᵀ/√d + mask)·V per head, heads concatenated and projected.
/// q_in is [B, Lq, H], kv_in is [B, Lk, H].
template <typename T>
Tensor<T> multi_head_attention(Tape<T>& tape, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const Mask& mask, const AttentionParams<T>& p, std::size_t heads);

/// √hidden-scaled embeddings plus positions, [B, L, H]. ids is [B, L].
template <typename T>
Tensor<T> embed(Tape<T>& tape, const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                std::size_t batch, std::size_t len, const ModelConfig& cfg);

/// Final hidden states [B, L, H] of the decoder-only stack.
template <typename T>
Tensor<T> decoder_only_states(Tape<T>& tape, const DecoderOnlyStack<T>& stack,
                              const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                              std::size_t batch, std::size_t len, const ModelConfig& cfg,
                              const RunContext& ctx = {});

/// Final decoder states [B, L, H] of the encoder-decoder stack.
template <typename T>
Tensor<T> encoder_decoder_states(Tape<T>& tape, const EncoderDecoderStack<T>& stack,
                                 const SharedEmbedding<T>& shared, std::span<const TokenId> src,
                                 std::span<const TokenId> tgt,
                                 std::span<const std::size_t> lengths, std::size_t batch,
                                 std::size_t len, const ModelConfig& cfg,
                                 const RunContext& ctx = {});

/// states · embeddingᵀ: the tied output projection.
template <typename T>
Tensor<T> output_logits(Tape<T>& tape, const Tensor<T>& states, const SharedEmbedding<T>& shared);

/// Next-token logits [B, L, V] of the decoder-only stack. Position t sees
/// inputs 0..t only. Logits are the final states times the embedding matrixᵀ.
template <typename T>
Tensor<T> decoder_only_forward(Tape<T>& tape, const DecoderOnlyStack<T>& stack,
                               const SharedEmbedding<T>& shared, std::span<const TokenId> ids,
                               std::size_t batch, std::size_t len, const ModelConfig& cfg,
                               const RunContext& ctx = {});

/// Logits [B, L, V] over the target. The encoder reads `src` (padded beyond
/// lengths[b]) in full; decoder position t sees target inputs 0..t.
template <typename T>
Tensor<T> encoder_decoder_forward(Tape<T>& tape, const EncoderDecoderStack<T>& stack,
                                  const SharedEmbedding<T>& shared, std::span<const TokenId> src,
                                  std::span<const TokenId> tgt,
                                  std::span<const std::size_t> lengths, std::size_t batch,
                                  std::size_t len, const ModelConfig& cfg,
                                  const RunContext& ctx = {});

}  // namespace twopass
