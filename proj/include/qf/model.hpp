#pragma once

// Toy decoder-only transformer used as the consolidation testbed.
//
// Pre-layer-norm blocks, causal multi-head attention, GELU feed-forward with
// a bias-free down projection, learned positional embeddings, and an
// unembedding tied to the token embedding. Every layer computes
//
//     h   = x + Attn(LN1(x))           (bypass term v)
//     u   = GELU(W_up · LN2(h))
//     out = h + W_down · u
//
// so W_down is the linear map the closed-form update rewrites.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qf/tensor.hpp"
#include "qf/tokenizer.hpp"

namespace qf {

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 128;
  std::uint32_t vocab_size = static_cast<std::uint32_t>(tokens::kVocabSize);
  std::uint32_t max_seq = 256;
  double layernorm_epsilon = 1e-5;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Matrix ln1_gain;  // 1 x d_model
  Matrix ln1_bias;
  Matrix attn_q;  // d_model x d_model, y = W x
  Matrix attn_k;
  Matrix attn_v;
  Matrix attn_o;
  Matrix ln2_gain;
  Matrix ln2_bias;
  Matrix ffn_up;    // d_ff x d_model
  Matrix ffn_down;  // d_model x d_ff, the QF target W

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

struct NamedConstTensor {
  std::string name;
  const Matrix* tensor;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;       // vocab_size x d_model (also the unembedding)
  Matrix positional_embedding;  // max_seq x d_model
  std::vector<LayerWeights> layers;
  Matrix final_ln_gain;
  Matrix final_ln_bias;

  /// All parameters zero, layer-norm gains included.
  static ModelWeights zeros(const ModelConfig& config);
  /// N(0, stddev²) matrices, layer-norm gains 1 and biases 0.
  static ModelWeights random_init(const ModelConfig& config, Rng& rng, double stddev = 0.02);

  /// Canonical tensor order shared by serialisation, diffing and training.
  std::vector<NamedTensor> tensors();
  std::vector<NamedConstTensor> tensors() const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Logits for every position, seq_len x vocab_size.
Matrix forward_full(const ModelWeights& model, const TokenSeq& tokens);

/// Residual stream leaving layer `layer` (seq_len x d_model); runs only
/// layers 0..=layer.
Matrix layer_output(const ModelWeights& model, const TokenSeq& tokens, std::size_t layer);

struct ActivationRecord {
  std::size_t layer_index = 0;
  Matrix u;  // d_ff x T, post-GELU FFN hidden
  Matrix v;  // d_model x T, residual stream entering the FFN sublayer
  std::vector<std::size_t> answer_token_ordinals;
};

/// Runs layers 0..=layer only and records (u, v) at the positions in
/// `positions`, one column per position in order. Column k carries ordinal k.
ActivationRecord forward_capture(const ModelWeights& model, const TokenSeq& tokens,
                                 std::size_t layer, TokenSpan positions);

/// Greedy decoding through a key/value cache. Appends argmax tokens (lowest
/// id wins ties) until the end marker has been appended or max_new tokens
/// were produced.
TokenSeq greedy_decode(const ModelWeights& model, const TokenSeq& prompt, std::size_t max_new);

/// Same contract as greedy_decode, recomputing the full forward every step.
TokenSeq greedy_decode_recompute(const ModelWeights& model, const TokenSeq& prompt,
                                 std::size_t max_new);

void set_layer_down_proj(ModelWeights& model, std::size_t layer, const Matrix& w_new);
const Matrix& layer_down_proj(const ModelWeights& model, std::size_t layer);

/// Row-wise softmax of a logits matrix.
Matrix softmax_rows(const Matrix& logits);

// QFW1 weight files: "QFW1", u32 version, the six count fields of
// ModelConfig as u32, layernorm_epsilon as f64, u32 tensor count, then per
// tensor u32 name length, name bytes, u32 rows, u32 cols and row-major f64
// values. Everything little-endian, tensors in canonical order.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

std::string serialize_weights(const ModelWeights& model);
ModelWeights deserialize_weights(const std::string& bytes);
void save_weights(const ModelWeights& model, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

}  // namespace qf
