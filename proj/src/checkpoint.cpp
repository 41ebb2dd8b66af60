#include "encdec/checkpoint.hpp"

#include <fmt/format.h>

#include "encdec/binary_io.hpp"
#include "encdec/errors.hpp"

namespace encdec {

namespace {

KeyValues metadata_pairs(const Checkpoint& c) {
  KeyValues kv;
  for (auto& [k, v] : c.config.to_pairs()) kv.emplace_back("model." + k, v);
  kv.emplace_back("checkpoint.step", std::to_string(c.step));
  kv.emplace_back("checkpoint.dtype", dtype_name(c.dtype));
  const TokenLayout t = c.config.tokens();
  kv.emplace_back("tokens.pad", std::to_string(t.pad()));
  kv.emplace_back("tokens.bos", std::to_string(t.bos()));
  kv.emplace_back("tokens.eos", std::to_string(t.eos()));
  kv.emplace_back("tokens.sentinel_base", std::to_string(t.sentinel_base()));
  return kv;
}

Checkpoint from_metadata(const KeyValues& kv, const std::string& what) {
  Checkpoint c;
  KeyValues model;
  bool have_step = false, have_dtype = false;
  std::map<std::string, std::string> token_ids;
  for (const auto& [k, v] : kv) {
    if (k.starts_with("model.")) {
      model.emplace_back(k.substr(6), v);
    } else if (k == "checkpoint.step") {
      c.step = parse_u64(k, v);
      have_step = true;
    } else if (k == "checkpoint.dtype") {
      c.dtype = parse_dtype(v);
      have_dtype = true;
    } else if (k.starts_with("tokens.")) {
      token_ids[k] = v;
    } else {
      throw FormatError(fmt::format("{}: unknown metadata key '{}'", what, k));
    }
  }
  if (!have_step || !have_dtype) throw FormatError(fmt::format("{}: metadata lacks step or dtype", what));
  c.config = ModelConfig::from_pairs(model);
  // Special ids are recorded so data and model agree; they must match the
  // layout the config implies.
  for (const auto& [k, v] : metadata_pairs(c)) {
    if (!k.starts_with("tokens.")) continue;
    auto it = token_ids.find(k);
    if (it == token_ids.end() || it->second != v) {
      throw FormatError(fmt::format("{}: metadata {} does not match the vocabulary layout ({})", what, k, v));
    }
  }
  return c;
}

}  // namespace

std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ConfigError(fmt::format("unknown dtype '{}' (expected f32 or f64)", s));
}

Checkpoint Checkpoint::from_model(const Model& model, std::uint64_t step, DType dtype) {
  return {model.config, step, dtype, model.params};
}

Model Checkpoint::to_model() const {
  validate();
  return {config, tensors};
}

void Checkpoint::validate() const {
  const auto shapes = parameter_shapes(config);
  for (const auto& [name, shape] : shapes) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError(fmt::format("checkpoint lacks tensor '{}'", name));
    if (it->second.shape() != shape) {
      throw ShapeError(fmt::format("checkpoint tensor '{}' has shape {}, config implies {}", name,
                                   shape_str(it->second.shape()), shape_str(shape)));
    }
  }
  for (const auto& [name, t] : tensors) {
    if (!shapes.contains(name)) throw ShapeError(fmt::format("checkpoint tensor '{}' is not in the config", name));
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.validate();
  ByteWriter body;
  const std::string meta = format_key_values(metadata_pairs(ckpt));
  body.u32(static_cast<std::uint32_t>(meta.size()));
  body.str(meta);
  body.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    body.u32(static_cast<std::uint32_t>(name.size()));
    body.str(name);
    body.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) body.u64(e);
    body.u8(static_cast<std::uint8_t>(ckpt.dtype));
    for (double v : t.values()) {
      if (ckpt.dtype == DType::f32) {
        body.f32(static_cast<float>(v));
      } else {
        body.f64(v);
      }
    }
  }
  ByteWriter out;
  out.str("EDCK");
  out.u32(kCheckpointVersion);
  out.raw(body.bytes());
  out.u32(crc32(body.bytes()));
  return out.bytes();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
  ByteReader header(bytes, what);
  if (header.str(4) != "EDCK") header.fail("bad magic (expected EDCK)");
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(
        fmt::format("{}: checkpoint format version {} is not supported (expected {})", what, version, kCheckpointVersion));
  }
  if (header.remaining() < 4) header.fail("missing checksum");
  const auto body = bytes.subspan(8, bytes.size() - 12);
  ByteReader trailer(bytes.subspan(bytes.size() - 4), what);
  const std::uint32_t stored = trailer.u32();
  const std::uint32_t actual = crc32(body);
  if (stored != actual) {
    throw ChecksumError(fmt::format("{}: CRC-32 mismatch (stored {:08x}, computed {:08x})", what, stored, actual));
  }

  ByteReader r(body, what);
  const std::uint32_t meta_len = r.u32();
  Checkpoint c;
  try {
    c = from_metadata(parse_key_values(r.str(meta_len)), what);
  } catch (const ConfigError& e) {
    throw FormatError(fmt::format("{}: bad metadata: {}", what, e.what()));
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail(fmt::format("tensor '{}' has rank {}", name, rank));
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.u64();
      if (e == 0 || e > r.remaining()) r.fail(fmt::format("tensor '{}' has implausible extent {}", name, e));
    }
    const std::uint8_t dtype = r.u8();
    const std::size_t width = c.dtype == DType::f32 ? 4 : 8;
    if (shape_numel(shape) > r.remaining() / width) {
      r.fail(fmt::format("tensor '{}' {} needs {} payload bytes, {} available", name, shape_str(shape),
                         shape_numel(shape) * width, r.remaining()));
    }
    if (dtype != static_cast<std::uint8_t>(c.dtype)) {
      r.fail(fmt::format("tensor '{}' dtype code {} differs from checkpoint dtype {}", name, dtype, dtype_name(c.dtype)));
    }
    Tensor t(shape);
    for (double& v : t.values()) v = c.dtype == DType::f32 ? static_cast<double>(r.f32()) : r.f64();
    if (!c.tensors.emplace(std::move(name), std::move(t)).second) r.fail("duplicate tensor name");
  }
  if (r.remaining() != 0) r.fail(fmt::format("{} trailing bytes", r.remaining()));
  try {
    c.validate();
  } catch (const ShapeError& e) {
    throw FormatError(fmt::format("{}: {}", what, e.what()));
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), "checkpoint " + path.string());
}

std::string describe(const Checkpoint& ckpt) {
  std::string out = format_key_values(metadata_pairs(ckpt));
  std::size_t total = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    out += fmt::format("tensor\t{}\t{}\t{}\t{}\n", name, shape_str(t.shape()), dtype_name(ckpt.dtype), t.size());
    total += t.size();
  }
  out += fmt::format("tensors\t{}\nparameters\t{}\n", ckpt.tensors.size(), total);
  return out;
}

}  // namespace encdec
