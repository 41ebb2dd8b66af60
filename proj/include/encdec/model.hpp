#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encdec/attention.hpp"
#include "encdec/autograd.hpp"
#include "encdec/config.hpp"
#include "encdec/sequence.hpp"
#include "encdec/tensor.hpp"

namespace encdec {

// Canonical parameter names.
//   embedding                          tied table [V x d]
//   encoder.embedding, decoder.embedding   untied tables
//   {stack}.layers.{i}.attn.{w_q,w_k,w_v,w_o,q_norm,k_norm}
//   {stack}.layers.{i}.{pre,post}_{attn,ffn}_norm
//   {stack}.layers.{i}.ffn.{w_gate,w_up,w_down}
//   decoder.layers.{i}.cross_attn.*, {pre,post}_cross_norm   (separate cross attention only)
//   {stack}.final_norm
//   vision.projection                  [d_vision x d], frozen by default
// A decoder-only model uses the stack prefix "" (names start at "layers.").
namespace names {
inline constexpr const char* kEmbedding = "embedding";
inline constexpr const char* kVisionProjection = "vision.projection";
std::string layer(const std::string& stack, std::size_t i);
std::string input_embedding(const ModelConfig& cfg, const std::string& stack);
std::string output_embedding(const ModelConfig& cfg);
}  // namespace names

struct Model {
  ModelConfig config;
  ParamMap params;
};

// Truncated normal (std 0.02) matmul weights, embeddings std 1/sqrt(d),
// norm gains 1. Deterministic in (cfg, seed).
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// Expected shape of every parameter, in name order.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg);
bool is_frozen(const ModelConfig& cfg, const std::string& name);
// Matmul weights (rank 2, not frozen) get decoupled weight decay.
bool decays(const ModelConfig& cfg, const std::string& name, const Tensor& value);

struct ParamBreakdown {
  std::size_t embedding = 0;
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t vision_projection = 0;
  std::size_t total() const { return embedding + encoder + decoder + vision_projection; }
  std::size_t non_embedding() const { return encoder + decoder; }
};

// Closed form from the config alone; nothing is allocated.
ParamBreakdown count_params(const ModelConfig& cfg);

using ParamVars = std::map<std::string, Var>;

// Registers every parameter on the tape: leaves when trainable, constants
// otherwise. Frozen parameters are always constants.
ParamVars bind_params(Tape& tape, const Model& model, bool trainable);

struct EncodeProbe {
  // When set, each image's vision embeddings enter the tape as a leaf so a
  // test can read their gradient.
  bool image_leaves = false;
  std::vector<Var> images;
};

// [n x d] encoder output. `images` holds [256 x d_vision] embeddings indexed
// by SeqItem::image_index.
Var encode(const ModelConfig& cfg, const ParamVars& params, const MixedSequence& seq,
           std::span<const Tensor> images = {}, EncodeProbe* probe = nullptr);

struct DecodeProbe {
  // When set, every decoder layer receives its own leaf copy of H, so the
  // gradient of the loss w.r.t. H can be attributed per layer.
  bool per_layer_encoder_leaves = false;
  std::vector<std::optional<Var>> encoder_leaves;
  // Per decoder layer, per head attention probabilities.
  std::vector<AttentionTrace>* traces = nullptr;
};

// Decoder logits [m x V] for `inputs` (BOS-prefixed). `h` = nullopt means an
// empty encoder output, valid only with merged attention.
Var decode(const ModelConfig& cfg, const ParamVars& params, std::optional<Var> h,
           std::span<const std::int32_t> inputs, DecodeProbe* probe = nullptr);

// Decoder-only (source checkpoint) forward: logits [m x V], causal.
Var decoder_only_logits(const ModelConfig& cfg, const ParamVars& params, std::span<const std::int32_t> ids);

struct Seq2SeqOutput {
  Var loss_sum;               // summed token cross-entropy
  std::size_t tokens = 0;     // non-pad labels
  Var logits;                 // [m x V]
  std::vector<std::int32_t> labels;
};

// Teacher-forced pass: decoder inputs [BOS, target...], labels
// [target..., EOS]; pad labels are excluded from the loss.
Seq2SeqOutput seq2seq_forward(const ModelConfig& cfg, const ParamVars& params, const MixedSequence& input,
                              std::span<const std::int32_t> target, std::span<const Tensor> images = {});

// Gradient-free conveniences.
Tensor encode(const Model& model, const MixedSequence& seq, std::span<const Tensor> images = {});
Tensor decode(const Model& model, const Tensor& h, std::span<const std::int32_t> inputs);

// Argmax decoding from BOS; stops after emitting EOS (which is returned) or
// after max_new_tokens ids.
std::vector<std::int32_t> greedy_decode(const Model& model, const MixedSequence& seq, std::size_t max_new_tokens,
                                        std::span<const Tensor> images = {});

}  // namespace encdec
