#pragma once

// Per-element loop oracle for merged attention. Written directly from the
// defining formulas with scalar loops; shares no code with src/attention.cpp.

#include <cmath>
#include <cstdint>
#include <vector>

#include "encdec/attention.hpp"
#include "encdec/rng.hpp"

namespace encdec::test {

inline std::vector<double> oracle_row(const Tensor& t, std::size_t r) {
  std::vector<double> out(t.dim(1));
  for (std::size_t c = 0; c < t.dim(1); ++c) out[c] = t.at(r, c);
  return out;
}

// vec . W[:, col0 .. col0+len)
inline std::vector<double> oracle_project(const std::vector<double>& vec, const Tensor& w, std::size_t col0,
                                          std::size_t len) {
  std::vector<double> out(len, 0.0);
  for (std::size_t c = 0; c < len; ++c)
    for (std::size_t k = 0; k < vec.size(); ++k) out[c] += vec[k] * w.at(k, col0 + c);
  return out;
}

inline void oracle_qk_norm_rope(std::vector<double>& v, const Tensor& gain, double eps, std::int64_t pos,
                                const RopeConfig& rope, bool apply_rope) {
  const std::size_t dh = v.size();
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double scale = 1.0 / std::sqrt(ss / static_cast<double>(dh) + eps);
  for (std::size_t j = 0; j < dh; ++j) v[j] = v[j] * scale * gain[j];
  if (!apply_rope) return;
  const std::size_t half = dh / 2;
  std::vector<double> out(dh);
  for (std::size_t j = 0; j < half; ++j) {
    const double theta = (static_cast<double>(pos) / rope.pi_scale) *
                         std::pow(rope.base_freq, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
    out[j] = v[j] * std::cos(theta) - v[j + half] * std::sin(theta);
    out[j + half] = v[j] * std::sin(theta) + v[j + half] * std::cos(theta);
  }
  v = out;
}

// Merged attention: queries from X (m rows), keys/values over [X; H].
// Visibility: decoder column j <= i within the window; encoder columns always.
inline Tensor oracle_merged_attention(const Tensor& X, const Tensor& H, const AttentionWeights& w,
                                      const HeadLayout& heads, LayerKind kind, const RopeConfig& rope,
                                      const Positions& dec_pos, const Positions& enc_pos) {
  const std::size_t m = X.dim(0), d = X.dim(1);
  const std::size_t n = H.empty() ? 0 : H.dim(0);
  const std::size_t dh = heads.d_head;
  const std::size_t group = heads.n_q_heads / heads.n_kv_heads;
  auto kv_row = [&](std::size_t j) { return j < m ? oracle_row(X, j) : oracle_row(H, j - m); };
  auto key_pos = [&](std::size_t j) { return j < m ? dec_pos[j] : enc_pos[j - m]; };
  auto visible = [&](std::size_t i, std::size_t j) {
    if (j >= m) return true;
    if (j > i) return false;
    return kind.is_global() || (i - j) < kind.window();
  };

  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> concat_heads;
    for (std::size_t h = 0; h < heads.n_q_heads; ++h) {
      const std::size_t g = h / group;
      auto q = oracle_project(oracle_row(X, i), w.w_q, h * dh, dh);
      oracle_qk_norm_rope(q, w.q_norm, heads.norm_eps, dec_pos[i], rope, true);
      std::vector<double> logits(m + n, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < m + n; ++j) {
        if (!visible(i, j)) continue;
        auto k = oracle_project(kv_row(j), w.w_k, g * dh, dh);
        oracle_qk_norm_rope(k, w.k_norm, heads.norm_eps, key_pos(j), rope, true);
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[c] * k[c];
        logits[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logits[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < m + n; ++j)
        if (visible(i, j)) denom += std::exp(logits[j] - mx);
      std::vector<double> a(dh, 0.0);
      for (std::size_t j = 0; j < m + n; ++j) {
        if (!visible(i, j)) continue;
        const double p = std::exp(logits[j] - mx) / denom;
        auto v = oracle_project(kv_row(j), w.w_v, g * dh, dh);
        for (std::size_t c = 0; c < dh; ++c) a[c] += p * v[c];
      }
      concat_heads.insert(concat_heads.end(), a.begin(), a.end());
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < concat_heads.size(); ++k) s += concat_heads[k] * w.w_o.at(k, c);
      out.at(i, c) = s;
    }
  }
  return out;
}

inline AttentionWeights random_attention_weights(std::size_t d, const HeadLayout& heads, Rng& rng) {
  auto rnd = [&](Shape s, double sd) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = rng.normal() * sd;
    return t;
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w{rnd({d, heads.q_width()}, sd), rnd({d, heads.kv_width()}, sd),
                     rnd({d, heads.kv_width()}, sd), rnd({heads.q_width(), d}, sd),
                     rnd({heads.d_head}, 0.3),       rnd({heads.d_head}, 0.3)};
  for (double& v : w.q_norm.values()) v += 1.0;
  for (double& v : w.k_norm.values()) v += 1.0;
  return w;
}

}  // namespace encdec::test
