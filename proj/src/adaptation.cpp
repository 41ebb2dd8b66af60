#include "encdec/adaptation.hpp"

#include <algorithm>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "encdec/errors.hpp"

namespace encdec {

namespace {

// Source name for a target parameter, or "" when it has no source.
std::string source_name(const std::string& target) {
  if (target.ends_with("embedding")) return names::kEmbedding;
  for (const char* stack : {"encoder.", "decoder."}) {
    if (target.starts_with(stack)) return target.substr(std::string_view(stack).size());
  }
  return "";
}

void require_same(const char* field, double src, double tgt) {
  if (src != tgt) {
    throw ConfigError(fmt::format("adaptation: {} differs between source ({}) and target ({})", field,
                                  format_double(src), format_double(tgt)));
  }
}

}  // namespace

Checkpoint adapt_from_decoder_only(const Checkpoint& src, const ModelConfig& target, std::uint64_t seed) {
  const ModelConfig& s = src.config;
  if (s.architecture != Architecture::decoder_only) throw ConfigError("adaptation: source is not decoder-only");
  if (target.architecture != Architecture::encoder_decoder) throw ConfigError("adaptation: target is not encoder-decoder");
  if (!target.merged_attention) throw ConfigError("adaptation: target must use merged attention");
  target.validate();
  // Fields that change the forward function without changing any shape.
  require_same("vocab_size", s.vocab_size, target.vocab_size);
  require_same("num_sentinels", s.num_sentinels, target.num_sentinels);
  require_same("local_window", s.local_window, target.local_window);
  require_same("local_per_global", s.local_per_global, target.local_per_global);
  require_same("rope_local_base", s.rope_local_base, target.rope_local_base);
  require_same("rope_global_base", s.rope_global_base, target.rope_global_base);
  require_same("norm_eps", s.norm_eps, target.norm_eps);

  Checkpoint out;
  out.config = target;
  out.dtype = src.dtype;
  std::set<std::string> used;
  std::optional<Model> fresh;
  for (const auto& [name, shape] : parameter_shapes(target)) {
    const std::string from = source_name(name);
    if (from.empty()) {
      if (!fresh) fresh = build_model(target, seed);
      out.tensors.emplace(name, fresh->params.at(name));
      continue;
    }
    auto it = src.tensors.find(from);
    if (it == src.tensors.end()) {
      throw ShapeError(fmt::format("adaptation: target tensor '{}' has no source tensor '{}' (source has {} layers, "
                                   "target {})",
                                   name, from, s.n_layers, target.n_layers));
    }
    if (it->second.shape() != shape) {
      throw ShapeError(fmt::format("adaptation: target tensor '{}' {} does not match source '{}' {}", name,
                                   shape_str(shape), from, shape_str(it->second.shape())));
    }
    out.tensors.emplace(name, it->second);
    used.insert(from);
  }
  for (const auto& [name, t] : src.tensors) {
    if (!used.contains(name)) {
      throw ShapeError(fmt::format("adaptation: source tensor '{}' has no target (source has {} layers, target {})",
                                   name, s.n_layers, target.n_layers));
    }
  }
  return out;
}

Checkpoint average_checkpoints(std::span<const Checkpoint> ckpts) {
  if (ckpts.empty()) throw ConfigError("average_checkpoints needs at least one checkpoint");
  const Checkpoint& first = ckpts.front();
  Checkpoint out{first.config, 0, DType::f32, {}};
  for (const Checkpoint& c : ckpts) {
    if (c.config != first.config) {
      throw ConfigError("average_checkpoints: checkpoints have different model configs");
    }
    if (c.tensors.size() != first.tensors.size()) {
      throw ShapeError(fmt::format("average_checkpoints: tensor counts differ ({} vs {})", c.tensors.size(),
                                   first.tensors.size()));
    }
    out.step = std::max(out.step, c.step);
    if (c.dtype == DType::f64) out.dtype = DType::f64;
  }
  const double k = static_cast<double>(ckpts.size());
  std::vector<double> column(ckpts.size());
  for (const auto& [name, ref] : first.tensors) {
    std::vector<const Tensor*> inputs;
    for (const Checkpoint& c : ckpts) {
      auto it = c.tensors.find(name);
      if (it == c.tensors.end()) throw ShapeError(fmt::format("average_checkpoints: tensor '{}' missing", name));
      if (it->second.shape() != ref.shape()) {
        throw ShapeError(fmt::format("average_checkpoints: tensor '{}' shapes differ ({} vs {})", name,
                                     shape_str(it->second.shape()), shape_str(ref.shape())));
      }
      inputs.push_back(&it->second);
    }
    Tensor mean(ref.shape());
    for (std::size_t i = 0; i < mean.size(); ++i) {
      for (std::size_t j = 0; j < inputs.size(); ++j) column[j] = (*inputs[j])[i];
      std::sort(column.begin(), column.end());
      if (column.front() == column.back()) {
        mean[i] = column.front();  // k * x / k can round away from x
        continue;
      }
      double sum = 0.0;
      for (double v : column) sum += v;
      mean[i] = sum / k;
    }
    out.tensors.emplace(name, std::move(mean));
  }
  return out;
}

}  // namespace encdec
