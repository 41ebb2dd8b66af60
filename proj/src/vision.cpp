#include "encdec/vision.hpp"

#include <fmt/format.h>

#include "encdec/binary_io.hpp"
#include "encdec/errors.hpp"
#include "encdec/rng.hpp"

namespace encdec {

VisionFixture VisionFixture::synthetic(std::size_t d_vision, std::size_t count, std::uint64_t seed) {
  if (d_vision == 0) throw ConfigError("synthetic vision fixture needs d_vision > 0");
  VisionFixture fx;
  fx.d_vision = d_vision;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    Tensor t({kTokensPerImage, d_vision});
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(rng.normal()));
    fx.images.push_back(std::move(t));
  }
  return fx;
}

void VisionFixture::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.str("VEMB");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(d_vision));
  w.u32(static_cast<std::uint32_t>(images.size()));
  for (const Tensor& img : images) {
    if (img.shape() != Shape{kTokensPerImage, d_vision}) {
      throw ShapeError(fmt::format("vision fixture image has shape {}, expected [256x{}]", shape_str(img.shape()), d_vision));
    }
    for (double v : img.values()) w.f32(static_cast<float>(v));
  }
  write_file_bytes(path, w.bytes());
}

VisionFixture VisionFixture::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, "vision fixture " + path.string());
  if (r.str(4) != "VEMB") r.fail("bad magic (expected VEMB)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw VersionError(fmt::format("vision fixture {}: unsupported version {} (expected {})", path.string(), version, kVersion));
  }
  VisionFixture fx;
  fx.d_vision = r.u32();
  const std::uint32_t count = r.u32();
  if (fx.d_vision == 0 && count > 0) r.fail("d_vision is zero");
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t({kTokensPerImage, fx.d_vision});
    for (double& v : t.values()) v = r.f32();
    fx.images.push_back(std::move(t));
  }
  if (r.remaining() != 0) r.fail(fmt::format("{} trailing bytes", r.remaining()));
  return fx;
}

}  // namespace encdec
