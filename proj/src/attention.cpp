#include "encdec/attention.hpp"

#include <cmath>

#include <fmt/format.h>

#include "encdec/errors.hpp"

namespace encdec {

LayerKind LayerKind::local(std::size_t window) {
  if (window == 0) throw ConfigError("local attention window must be positive");
  return LayerKind(window);
}

std::string LayerKind::str() const {
  return is_global() ? std::string("global") : fmt::format("local({})", window_);
}

Positions iota_positions(std::size_t count, std::int64_t start) {
  Positions p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = start + static_cast<std::int64_t>(i);
  return p;
}

std::pair<Positions, Positions> make_positions(PositionScheme scheme, std::size_t m, std::size_t n) {
  const std::int64_t dec_start = scheme == PositionScheme::continued ? static_cast<std::int64_t>(n) : 0;
  return {iota_positions(m, dec_start), iota_positions(n)};
}

void HeadLayout::validate() const {
  if (n_q_heads == 0 || n_kv_heads == 0 || d_head == 0) throw ConfigError("head counts and d_head must be positive");
  if (n_q_heads % n_kv_heads != 0) {
    throw ConfigError(fmt::format("n_q_heads ({}) must be divisible by n_kv_heads ({})", n_q_heads, n_kv_heads));
  }
  if (d_head % 2 != 0) throw ConfigError(fmt::format("d_head must be even for rotary pairs, got {}", d_head));
}

AttentionVars bind_constants(Tape& tape, const AttentionWeights& w) {
  return {tape.constant(w.w_q), tape.constant(w.w_k), tape.constant(w.w_v),
          tape.constant(w.w_o), tape.constant(w.q_norm), tape.constant(w.k_norm)};
}

namespace {

// Rotation in place; `sign` = -1 applies the inverse (used by the gradient).
void rotate(Tensor& x, std::span<const std::int64_t> positions, const RopeConfig& cfg, double sign) {
  if (x.rank() < 2) throw ShapeError("rope: expected [T x ... x d_h], got " + shape_str(x.shape()));
  const std::size_t T = x.dim(0);
  const std::size_t d_head = x.shape().back();
  if (d_head % 2 != 0) throw ConfigError(fmt::format("rope: d_head must be even, got {}", d_head));
  if (positions.size() != T) {
    throw ShapeError(fmt::format("rope: {} positions for {} rows", positions.size(), T));
  }
  if (!(cfg.pi_scale >= 1.0)) throw ConfigError(fmt::format("rope: pi_scale must be >= 1, got {}", cfg.pi_scale));
  const std::size_t half = d_head / 2;
  const std::size_t vectors_per_row = x.size() / T / d_head;
  std::vector<double> cos_t(half), sin_t(half);
  for (std::size_t t = 0; t < T; ++t) {
    const double p = static_cast<double>(positions[t]) / cfg.pi_scale;
    for (std::size_t j = 0; j < half; ++j) {
      const double inv_freq = std::pow(cfg.base_freq, -2.0 * static_cast<double>(j) / static_cast<double>(d_head));
      const double angle = p * inv_freq;
      cos_t[j] = std::cos(angle);
      sin_t[j] = sign * std::sin(angle);
    }
    for (std::size_t v = 0; v < vectors_per_row; ++v) {
      double* row = x.data().data() + (t * vectors_per_row + v) * d_head;
      for (std::size_t j = 0; j < half; ++j) {
        const double a = row[j], b = row[j + half];
        row[j] = a * cos_t[j] - b * sin_t[j];
        row[j + half] = a * sin_t[j] + b * cos_t[j];
      }
    }
  }
}

}  // namespace

Tensor rope_apply(const Tensor& x, std::span<const std::int64_t> positions, const RopeConfig& cfg) {
  Tensor out = x;
  rotate(out, positions, cfg, 1.0);
  return out;
}

namespace ad {
Var rope(Var x, std::span<const std::int64_t> positions, const RopeConfig& cfg) {
  Tensor out = rope_apply(x.value(), positions, cfg);
  Positions kept(positions.begin(), positions.end());
  return x.tape->record("rope", std::move(out), {x}, [kept = std::move(kept), cfg](const BackwardArgs& args) {
    // Rotation is orthogonal: the gradient is the inverse rotation.
    Tensor g = args.out_grad;
    rotate(g, kept, cfg, -1.0);
    for (std::size_t i = 0; i < g.size(); ++i) (*args.in_grad[0])[i] += g[i];
  });
}
}  // namespace ad

Tensor build_merged_mask(std::size_t m, std::size_t n, LayerKind kind) {
  if (m == 0) throw ShapeError("build_merged_mask: decoder length must be >= 1");
  Tensor mask({m, m + n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (kind.is_global() || i - j < kind.window()) mask.at(i, j) = 1.0;
    }
    for (std::size_t j = 0; j < n; ++j) mask.at(i, m + j) = 1.0;
  }
  return mask;
}

Tensor build_encoder_mask(std::size_t n, LayerKind kind) {
  if (n == 0) throw ShapeError("build_encoder_mask: length must be >= 1");
  Tensor mask({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t dist = i > j ? i - j : j - i;
      if (kind.is_global() || dist < kind.window()) mask.at(i, j) = 1.0;
    }
  }
  return mask;
}

namespace {

void check_weight(const char* name, const Tensor& t, Shape expected) {
  if (t.shape() != expected) {
    throw ShapeError(fmt::format("attention weight {}: expected {}, got {}", name, shape_str(expected),
                                 shape_str(t.shape())));
  }
}

Var project_heads(Var in, Var weight, Var gain, std::size_t n_heads, const HeadLayout& heads,
                  const std::optional<RopeConfig>& rope, std::span<const std::int64_t> positions) {
  const std::size_t rows = in.value().dim(0);
  Var projected = ad::matmul(in, weight);
  Var split = ad::reshape(projected, {rows, n_heads, heads.d_head});
  Var normed = ad::rms_norm(split, gain, heads.norm_eps);
  Var rotated = rope ? ad::rope(normed, positions, *rope) : normed;
  return ad::reshape(rotated, {rows, n_heads * heads.d_head});
}

}  // namespace

Var attend(Var x, Var kv, const AttentionVars& w, const HeadLayout& heads,
           std::shared_ptr<const Tensor> mask, std::optional<RopeConfig> rope,
           std::span<const std::int64_t> q_positions, std::span<const std::int64_t> k_positions,
           AttentionTrace* trace) {
  heads.validate();
  const Tensor& xv = x.value();
  const Tensor& kvv = kv.value();
  if (xv.rank() != 2 || kvv.rank() != 2 || xv.dim(1) != kvv.dim(1)) {
    throw ShapeError(fmt::format("attention: queries {} vs keys {}", shape_str(xv.shape()), shape_str(kvv.shape())));
  }
  const std::size_t d = xv.dim(1), m = xv.dim(0), k = kvv.dim(0);
  check_weight("w_q", w.w_q.value(), {d, heads.q_width()});
  check_weight("w_k", w.w_k.value(), {d, heads.kv_width()});
  check_weight("w_v", w.w_v.value(), {d, heads.kv_width()});
  check_weight("w_o", w.w_o.value(), {heads.q_width(), d});
  check_weight("q_norm", w.q_norm.value(), {heads.d_head});
  check_weight("k_norm", w.k_norm.value(), {heads.d_head});
  if (mask->shape() != Shape{m, k}) {
    throw ShapeError(fmt::format("attention: mask {} for {} queries and {} keys", shape_str(mask->shape()), m, k));
  }
  if (rope && (q_positions.size() != m || k_positions.size() != k)) {
    throw ShapeError(fmt::format("attention: {}/{} positions for {} queries / {} keys", q_positions.size(),
                                 k_positions.size(), m, k));
  }

  Var q = project_heads(x, w.w_q, w.q_norm, heads.n_q_heads, heads, rope, q_positions);
  Var keys = project_heads(kv, w.w_k, w.k_norm, heads.n_kv_heads, heads, rope, k_positions);
  Var values = ad::matmul(kv, w.w_v);

  const std::size_t group = heads.n_q_heads / heads.n_kv_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(heads.d_head));
  std::vector<Var> key_t, value_h;
  for (std::size_t g = 0; g < heads.n_kv_heads; ++g) {
    key_t.push_back(ad::transpose(ad::slice_cols(keys, g * heads.d_head, heads.d_head)));
    value_h.push_back(ad::slice_cols(values, g * heads.d_head, heads.d_head));
  }
  std::vector<Var> outputs;
  outputs.reserve(heads.n_q_heads);
  for (std::size_t h = 0; h < heads.n_q_heads; ++h) {
    const std::size_t g = h / group;
    Var qh = ad::slice_cols(q, h * heads.d_head, heads.d_head);
    Var scores = ad::scale(ad::matmul(qh, key_t[g]), inv_sqrt_dh);
    Var probs = ad::masked_softmax(scores, mask);
    if (trace) trace->probabilities.push_back(probs.value());
    outputs.push_back(ad::matmul(probs, value_h[g]));
  }
  return ad::matmul(ad::concat_cols(outputs), w.w_o);
}

Var merged_attention(Var x, std::optional<Var> h, const AttentionVars& w, const HeadLayout& heads,
                     LayerKind kind, const RopeConfig& rope, std::span<const std::int64_t> dec_positions,
                     std::span<const std::int64_t> enc_positions, AttentionTrace* trace) {
  const std::size_t m = x.value().dim(0);
  const std::size_t n = h ? h->value().dim(0) : 0;
  if (dec_positions.size() != m || enc_positions.size() != n) {
    throw ShapeError(fmt::format("merged_attention: {} decoder / {} encoder positions for m={}, n={}",
                                 dec_positions.size(), enc_positions.size(), m, n));
  }
  auto mask = std::make_shared<const Tensor>(build_merged_mask(m, n, kind));
  Var kv = h ? ad::concat_rows(x, *h) : x;
  Positions k_positions(dec_positions.begin(), dec_positions.end());
  k_positions.insert(k_positions.end(), enc_positions.begin(), enc_positions.end());
  return attend(x, kv, w, heads, std::move(mask), rope, dec_positions, k_positions, trace);
}

Tensor merged_attention(const Tensor& x, const Tensor& h, const AttentionWeights& w, const HeadLayout& heads,
                        LayerKind kind, const RopeConfig& rope, std::span<const std::int64_t> dec_positions,
                        std::span<const std::int64_t> enc_positions, AttentionTrace* trace) {
  Tape tape;
  Var xv = tape.constant(x);
  std::optional<Var> hv;
  if (!h.empty()) hv = tape.constant(h);
  return merged_attention(xv, hv, bind_constants(tape, w), heads, kind, rope, dec_positions, enc_positions, trace)
      .value();
}

}  // namespace encdec
