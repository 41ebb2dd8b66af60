#include "encdec/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "encdec/errors.hpp"
#include "encdec/kernels.hpp"
#include "encdec/rng.hpp"

namespace encdec {

namespace names {

std::string layer(const std::string& stack, std::size_t i) { return fmt::format("{}layers.{}.", stack, i); }

std::string input_embedding(const ModelConfig& cfg, const std::string& stack) {
  if (cfg.tied_embeddings || cfg.architecture == Architecture::decoder_only) return kEmbedding;
  return stack + kEmbedding;
}

std::string output_embedding(const ModelConfig& cfg) {
  if (cfg.tied_embeddings || cfg.architecture == Architecture::decoder_only) return kEmbedding;
  return "decoder.embedding";
}

}  // namespace names

namespace {

const std::string kEncoder = "encoder.";
const std::string kDecoder = "decoder.";

void add_attention_shapes(std::map<std::string, Shape>& out, const std::string& prefix, const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, q = cfg.n_q_heads * cfg.d_head, kv = cfg.n_kv_heads * cfg.d_head;
  out[prefix + "w_q"] = {d, q};
  out[prefix + "w_k"] = {d, kv};
  out[prefix + "w_v"] = {d, kv};
  out[prefix + "w_o"] = {q, d};
  out[prefix + "q_norm"] = {cfg.d_head};
  out[prefix + "k_norm"] = {cfg.d_head};
}

void add_layer_shapes(std::map<std::string, Shape>& out, const std::string& prefix, const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  add_attention_shapes(out, prefix + "attn.", cfg);
  for (const char* norm : {"pre_attn_norm", "post_attn_norm", "pre_ffn_norm", "post_ffn_norm"}) {
    out[prefix + norm] = {d};
  }
  out[prefix + "ffn.w_gate"] = {d, cfg.d_ffn};
  out[prefix + "ffn.w_up"] = {d, cfg.d_ffn};
  out[prefix + "ffn.w_down"] = {cfg.d_ffn, d};
}

bool separate_cross(const ModelConfig& cfg, std::size_t layer) {
  return !cfg.merged_attention && cfg.has_cross(layer);
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, vocab = cfg.vocab_size;
  std::map<std::string, Shape> out;
  if (cfg.architecture == Architecture::decoder_only) {
    out[names::kEmbedding] = {vocab, d};
    for (std::size_t i = 0; i < cfg.n_layers; ++i) add_layer_shapes(out, names::layer("", i), cfg);
    out["final_norm"] = {d};
    return out;
  }
  if (cfg.tied_embeddings) {
    out[names::kEmbedding] = {vocab, d};
  } else {
    out["encoder.embedding"] = {vocab, d};
    out["decoder.embedding"] = {vocab, d};
  }
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    add_layer_shapes(out, names::layer(kEncoder, i), cfg);
    const std::string dec = names::layer(kDecoder, i);
    add_layer_shapes(out, dec, cfg);
    if (separate_cross(cfg, i)) {
      add_attention_shapes(out, dec + "cross_attn.", cfg);
      out[dec + "pre_cross_norm"] = {d};
      out[dec + "post_cross_norm"] = {d};
    }
  }
  out["encoder.final_norm"] = {d};
  out["decoder.final_norm"] = {d};
  if (cfg.vision.d_vision > 0) out[names::kVisionProjection] = {cfg.vision.d_vision, d};
  return out;
}

bool is_frozen(const ModelConfig& cfg, const std::string& name) {
  return name == names::kVisionProjection && cfg.vision.frozen;
}

bool decays(const ModelConfig& cfg, const std::string& name, const Tensor& value) {
  return value.rank() == 2 && !is_frozen(cfg, name);
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model model{cfg, {}};
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Rng rng(mix_seed(seed, name_hash(name)));
    Tensor t(shape);
    const bool is_embedding = name.ends_with(names::kEmbedding);
    if (shape.size() == 1) {
      t = Tensor::ones(shape);
    } else {
      double stddev = 0.02;
      if (is_embedding) stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
      if (name == names::kVisionProjection) stddev = 1.0 / std::sqrt(static_cast<double>(cfg.vision.d_vision));
      for (double& v : t.values()) v = rng.truncated_normal(stddev);
    }
    model.params.emplace(name, std::move(t));
  }
  return model;
}

ParamBreakdown count_params(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const std::size_t attn = d * cfg.n_q_heads * cfg.d_head      // W_q
                           + 2 * d * cfg.n_kv_heads * cfg.d_head  // W_k, W_v
                           + cfg.n_q_heads * cfg.d_head * d       // W_o
                           + 2 * cfg.d_head;                      // QK-norm gains
  const std::size_t ffn = 3 * d * cfg.d_ffn;
  const std::size_t layer = attn + ffn + 4 * d;

  ParamBreakdown out;
  if (cfg.architecture == Architecture::decoder_only) {
    out.embedding = cfg.vocab_size * d;
    out.decoder = cfg.n_layers * layer + d;
    return out;
  }
  out.embedding = cfg.vocab_size * d * (cfg.tied_embeddings ? 1 : 2);
  out.encoder = cfg.n_layers * layer + d;
  out.decoder = cfg.n_layers * layer + d;
  if (!cfg.merged_attention) {
    std::size_t cross_layers = cfg.n_layers;
    if (cfg.cross_attention_layers == CrossAttentionLayers::global_only) cross_layers = cfg.global_layer_count();
    out.decoder += cross_layers * (attn + 2 * d);
  }
  out.vision_projection = cfg.vision.d_vision * d;
  return out;
}

ParamVars bind_params(Tape& tape, const Model& model, bool trainable) {
  ParamVars vars;
  for (const auto& [name, value] : model.params) {
    const bool leaf = trainable && !is_frozen(model.config, name);
    vars.emplace(name, leaf ? tape.leaf(value) : tape.constant(value));
  }
  return vars;
}

namespace {

Var param(const ParamVars& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ShapeError(fmt::format("missing parameter '{}'", name));
  return it->second;
}

AttentionVars attention_vars(const ParamVars& params, const std::string& prefix) {
  return {param(params, prefix + "w_q"), param(params, prefix + "w_k"),    param(params, prefix + "w_v"),
          param(params, prefix + "w_o"), param(params, prefix + "q_norm"), param(params, prefix + "k_norm")};
}

// x + post_norm(sublayer(pre_norm(x)))
template <typename Sublayer>
Var sandwich(const ModelConfig& cfg, const ParamVars& params, const std::string& prefix, const char* which, Var x,
             Sublayer&& sublayer) {
  Var h = ad::rms_norm(x, param(params, fmt::format("{}pre_{}_norm", prefix, which)), cfg.norm_eps);
  Var y = sublayer(h);
  y = ad::rms_norm(y, param(params, fmt::format("{}post_{}_norm", prefix, which)), cfg.norm_eps);
  return ad::add(x, y);
}

Var gated_ffn(const ParamVars& params, const std::string& prefix, Var h) {
  Var gate = ad::gelu(ad::matmul(h, param(params, prefix + "ffn.w_gate")));
  Var up = ad::matmul(h, param(params, prefix + "ffn.w_up"));
  return ad::matmul(ad::mul(gate, up), param(params, prefix + "ffn.w_down"));
}

Var embed_tokens(const ModelConfig& cfg, Var table, std::span<const std::int32_t> ids) {
  return ad::scale(ad::embedding(table, ids), std::sqrt(static_cast<double>(cfg.d_model)));
}

Var logits_from(const ModelConfig& cfg, const ParamVars& params, Var hidden) {
  return ad::matmul(hidden, ad::transpose(param(params, names::output_embedding(cfg))));
}

Tape& tape_of(const ParamVars& params) {
  if (params.empty()) throw ShapeError("no parameters bound");
  return *params.begin()->second.tape;
}

// Causal decoder stack shared by the encoder-decoder decoder and the
// decoder-only source model.
Var decoder_stack(const ModelConfig& cfg, const ParamVars& params, const std::string& stack,
                  std::optional<Var> h, std::span<const std::int32_t> inputs, DecodeProbe* probe) {
  if (inputs.empty()) throw ShapeError("decode: decoder input must have at least one token");
  const std::size_t m = inputs.size();
  const std::size_t n = h ? h->value().dim(0) : 0;
  if (h && h->value().dim(1) != cfg.d_model) {
    throw ShapeError(fmt::format("decode: encoder output {} does not match d_model {}", shape_str(h->value().shape()),
                                 cfg.d_model));
  }
  const bool any_cross = cfg.architecture == Architecture::encoder_decoder;
  if (any_cross && !cfg.merged_attention && !h) {
    throw ShapeError("decode: separate cross-attention requires a non-empty encoder output");
  }
  const auto [dec_pos, enc_pos] = make_positions(cfg.position_scheme, m, n);
  const HeadLayout heads = cfg.heads();
  Tape& tape = tape_of(params);

  Var x = embed_tokens(cfg, param(params, names::input_embedding(cfg, stack)), inputs);
  if (probe) {
    probe->encoder_leaves.assign(cfg.n_layers, std::nullopt);
    if (probe->traces) probe->traces->assign(cfg.n_layers, AttentionTrace{});
  }
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = names::layer(stack, i);
    const LayerKind kind = cfg.layer_kind(i);
    const RopeConfig rope = cfg.rope_for(kind);
    const bool cross = h && cfg.has_cross(i);
    std::optional<Var> layer_h = h;
    if (h && probe && probe->per_layer_encoder_leaves) {
      layer_h = tape.leaf(h->value());
      probe->encoder_leaves[i] = layer_h;
    }
    AttentionTrace* trace = probe && probe->traces ? &(*probe->traces)[i] : nullptr;
    const AttentionVars attn = attention_vars(params, prefix + "attn.");

    if (cfg.merged_attention || !any_cross) {
      x = sandwich(cfg, params, prefix, "attn", x, [&](Var hn) {
        if (cross) return merged_attention(hn, layer_h, attn, heads, kind, rope, dec_pos, enc_pos, trace);
        return merged_attention(hn, std::nullopt, attn, heads, kind, rope, dec_pos, {}, trace);
      });
    } else {
      x = sandwich(cfg, params, prefix, "attn", x, [&](Var hn) {
        return merged_attention(hn, std::nullopt, attn, heads, kind, rope, dec_pos, {}, trace);
      });
      if (cross) {
        auto full = std::make_shared<const Tensor>(Tensor::ones({m, n}));
        const AttentionVars cross_attn = attention_vars(params, prefix + "cross_attn.");
        x = sandwich(cfg, params, prefix, "cross", x, [&](Var hn) {
          return attend(hn, *layer_h, cross_attn, heads, full, std::nullopt, {}, {});
        });
      }
    }
    x = sandwich(cfg, params, prefix, "ffn", x, [&](Var hn) { return gated_ffn(params, prefix, hn); });
  }
  x = ad::rms_norm(x, param(params, stack + "final_norm"), cfg.norm_eps);
  return logits_from(cfg, params, x);
}

}  // namespace

Var encode(const ModelConfig& cfg, const ParamVars& params, const MixedSequence& seq, std::span<const Tensor> images,
           EncodeProbe* probe) {
  if (cfg.architecture != Architecture::encoder_decoder) throw ConfigError("encode: model has no encoder");
  const std::size_t n = seq.expanded_length(cfg.vision.tokens_per_image);
  if (seq.items.empty() || n == 0) throw DataError("encode: empty input sequence");
  if (n > cfg.max_seq) throw DataError(fmt::format("encode: input length {} exceeds max_seq {}", n, cfg.max_seq));
  Tape& tape = tape_of(params);

  // Consecutive tokens are embedded in one lookup; each image is projected.
  std::vector<Var> pieces;
  std::vector<std::int32_t> run;
  const Var table = param(params, names::input_embedding(cfg, kEncoder));
  auto flush = [&] {
    if (!run.empty()) pieces.push_back(embed_tokens(cfg, table, run));
    run.clear();
  };
  for (const SeqItem& item : seq.items) {
    if (!item.is_image()) {
      run.push_back(item.token);
      continue;
    }
    flush();
    if (cfg.vision.d_vision == 0) throw ConfigError("encode: image item but the model has no vision projection");
    if (item.image_index >= images.size()) {
      throw DataError(fmt::format("encode: image index {} outside fixture of {} images", item.image_index, images.size()));
    }
    const Tensor& emb = images[item.image_index];
    if (emb.shape() != Shape{cfg.vision.tokens_per_image, cfg.vision.d_vision}) {
      throw ShapeError(fmt::format("encode: image embeddings {} expected [{}x{}]", shape_str(emb.shape()),
                                   cfg.vision.tokens_per_image, cfg.vision.d_vision));
    }
    Var emb_var = probe && probe->image_leaves ? tape.leaf(emb) : tape.constant(emb);
    if (probe && probe->image_leaves) probe->images.push_back(emb_var);
    const Var proj = param(params, names::kVisionProjection);
    if (cfg.vision.frozen) {
      // Frozen tower and projection: the result enters the graph as data.
      pieces.push_back(tape.constant(kernels::matmul(emb, proj.value())));
    } else {
      pieces.push_back(ad::matmul(emb_var, proj));
    }
  }
  flush();
  Var x = ad::concat_rows(pieces);

  const Positions pos = iota_positions(n);
  const HeadLayout heads = cfg.heads();
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = names::layer(kEncoder, i);
    const LayerKind kind = cfg.layer_kind(i);
    const LayerKind visibility = cfg.encoder_full_visibility ? LayerKind::global() : kind;
    auto mask = std::make_shared<const Tensor>(build_encoder_mask(n, visibility));
    const AttentionVars attn = attention_vars(params, prefix + "attn.");
    const RopeConfig rope = cfg.rope_for(kind);
    x = sandwich(cfg, params, prefix, "attn", x,
                 [&](Var hn) { return attend(hn, hn, attn, heads, mask, rope, pos, pos); });
    x = sandwich(cfg, params, prefix, "ffn", x, [&](Var hn) { return gated_ffn(params, prefix, hn); });
  }
  return ad::rms_norm(x, param(params, "encoder.final_norm"), cfg.norm_eps);
}

Var decode(const ModelConfig& cfg, const ParamVars& params, std::optional<Var> h, std::span<const std::int32_t> inputs,
           DecodeProbe* probe) {
  if (cfg.architecture != Architecture::encoder_decoder) throw ConfigError("decode: use decoder_only_logits");
  return decoder_stack(cfg, params, kDecoder, h, inputs, probe);
}

Var decoder_only_logits(const ModelConfig& cfg, const ParamVars& params, std::span<const std::int32_t> ids) {
  if (cfg.architecture != Architecture::decoder_only) throw ConfigError("decoder_only_logits: not a decoder-only config");
  return decoder_stack(cfg, params, "", std::nullopt, ids, nullptr);
}

Seq2SeqOutput seq2seq_forward(const ModelConfig& cfg, const ParamVars& params, const MixedSequence& input,
                              std::span<const std::int32_t> target, std::span<const Tensor> images) {
  const TokenLayout tokens = cfg.tokens();
  std::vector<std::int32_t> dec_in{tokens.bos()};
  dec_in.insert(dec_in.end(), target.begin(), target.end());
  Seq2SeqOutput out;
  out.labels.assign(target.begin(), target.end());
  out.labels.push_back(tokens.eos());
  std::vector<double> weights(out.labels.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = out.labels[i] == tokens.pad() ? 0.0 : 1.0;
    out.tokens += weights[i] != 0.0;
  }
  Var h = encode(cfg, params, input, images);
  out.logits = decode(cfg, params, h, dec_in);
  out.loss_sum = ad::cross_entropy_sum(out.logits, out.labels, weights);
  return out;
}

Tensor encode(const Model& model, const MixedSequence& seq, std::span<const Tensor> images) {
  Tape tape;
  return encode(model.config, bind_params(tape, model, false), seq, images).value();
}

Tensor decode(const Model& model, const Tensor& h, std::span<const std::int32_t> inputs) {
  Tape tape;
  const ParamVars params = bind_params(tape, model, false);
  std::optional<Var> hv;
  if (!h.empty()) hv = tape.constant(h);
  return decode(model.config, params, hv, inputs).value();
}

std::vector<std::int32_t> greedy_decode(const Model& model, const MixedSequence& seq, std::size_t max_new_tokens,
                                        std::span<const Tensor> images) {
  const TokenLayout tokens = model.config.tokens();
  const Tensor h = encode(model, seq, images);
  std::vector<std::int32_t> inputs{tokens.bos()};
  std::vector<std::int32_t> out;
  while (out.size() < max_new_tokens) {
    const Tensor logits = decode(model, h, inputs);
    const std::size_t last = logits.dim(0) - 1, vocab = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (logits.at(last, j) > logits.at(last, best)) best = j;
    const auto id = static_cast<std::int32_t>(best);
    out.push_back(id);
    if (id == tokens.eos()) break;
    inputs.push_back(id);
  }
  return out;
}

}  // namespace encdec
