#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "encdec/autograd.hpp"
#include "encdec/tensor.hpp"

namespace encdec {

using Positions = std::vector<std::int64_t>;

struct RopeConfig {
  double base_freq = 10'000.0;
  // Positional interpolation divisor; 1 disables interpolation.
  double pi_scale = 1.0;
};

// Local layers see a causal/bidirectional band of `window` tokens; global
// layers see everything their mask allows.
class LayerKind {
 public:
  static LayerKind local(std::size_t window);
  static LayerKind global() { return LayerKind(0); }

  bool is_global() const { return window_ == 0; }
  std::size_t window() const { return window_; }
  std::string str() const;

  friend bool operator==(LayerKind, LayerKind) = default;

 private:
  explicit LayerKind(std::size_t window) : window_(window) {}
  std::size_t window_;
};

// Where decoder positions start relative to the encoder input.
enum class PositionScheme {
  continued,  // encoder 0..n-1, decoder n..n+m-1
  restart,    // encoder 0..n-1, decoder 0..m-1
};

std::pair<Positions, Positions> make_positions(PositionScheme scheme, std::size_t m, std::size_t n);
Positions iota_positions(std::size_t count, std::int64_t start = 0);

struct HeadLayout {
  std::size_t n_q_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t d_head = 2;
  double norm_eps = 1e-6;

  std::size_t q_width() const { return n_q_heads * d_head; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }
  void validate() const;
};

// One attention module's parameters. A single set serves both the self and
// cross portions of merged attention.
template <typename T>
struct AttentionParams {
  T w_q;     // [d x h_q*d_h]
  T w_k;     // [d x h_kv*d_h]
  T w_v;     // [d x h_kv*d_h]
  T w_o;     // [h_q*d_h x d]
  T q_norm;  // [d_h]
  T k_norm;  // [d_h]
};
using AttentionWeights = AttentionParams<Tensor>;
using AttentionVars = AttentionParams<Var>;

AttentionVars bind_constants(Tape& tape, const AttentionWeights& w);

// Rotates pairs (x_j, x_{j + d_h/2}) of the last axis by
// (p / pi_scale) * base^(-2j / d_h), where p is the position of the row along
// the first axis. Shape [T x ... x d_h].
Tensor rope_apply(const Tensor& x, std::span<const std::int64_t> positions, const RopeConfig& cfg);

namespace ad {
Var rope(Var x, std::span<const std::int64_t> positions, const RopeConfig& cfg);
}

// Decoder-side mask [m x (m+n)]: decoder columns first, then encoder columns,
// matching K = [X; H]. Encoder columns are always visible.
Tensor build_merged_mask(std::size_t m, std::size_t n, LayerKind kind);

// Encoder self-attention mask [n x n]; local layers use the band |i-j| < w.
Tensor build_encoder_mask(std::size_t n, LayerKind kind);

// Per-head attention probabilities, captured when requested.
struct AttentionTrace {
  std::vector<Tensor> probabilities;
};

// Generic taped attention: queries from `x`, keys/values from `kv`.
// QK-norm is applied per head before RoPE; `rope` = nullopt skips rotation.
Var attend(Var x, Var kv, const AttentionVars& w, const HeadLayout& heads,
           std::shared_ptr<const Tensor> mask, std::optional<RopeConfig> rope,
           std::span<const std::int64_t> q_positions, std::span<const std::int64_t> k_positions,
           AttentionTrace* trace = nullptr);

// Merged decoder attention over [X; H]. `h` = nullopt means n = 0.
Var merged_attention(Var x, std::optional<Var> h, const AttentionVars& w, const HeadLayout& heads,
                     LayerKind kind, const RopeConfig& rope,
                     std::span<const std::int64_t> dec_positions,
                     std::span<const std::int64_t> enc_positions, AttentionTrace* trace = nullptr);

// Tensor-level convenience wrapper (no gradients). `h` may be empty.
Tensor merged_attention(const Tensor& x, const Tensor& h, const AttentionWeights& w,
                        const HeadLayout& heads, LayerKind kind, const RopeConfig& rope,
                        std::span<const std::int64_t> dec_positions,
                        std::span<const std::int64_t> enc_positions, AttentionTrace* trace = nullptr);

}  // namespace encdec
