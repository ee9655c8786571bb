#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rkd/common.hpp"
#include "rkd/model.hpp"

namespace rkd {

// Checkpoint layout: "RKDC" magic, version byte, spec header, seed, epoch,
// metadata string, named float64 tensors (little endian), trailing fnv1a64
// checksum over everything before it.

struct Checkpoint {
  ModelSpec spec;
  Params params;
  std::uint32_t epoch = 0;
  std::string meta;
};

namespace detail {

inline void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) {
    if (pos + n > buf.size())
      throw ArtifactError(format_msg("checkpoint: truncated file %s", path.c_str()));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline void save_checkpoint(const ModelSpec& spec, const Params& params, const std::string& path,
                            std::uint32_t epoch = 0, const std::string& meta = "") {
  spec.validate();
  std::string b;
  b.reserve(1024);
  b += "RKDC";
  detail::put_u8(b, 1);  // version
  detail::put_u8(b, spec.kind == ModelKind::Mlp ? 0 : 1);
  detail::put_u32(b, static_cast<std::uint32_t>(spec.num_classes));
  if (spec.kind == ModelKind::Mlp) {
    detail::put_u32(b, static_cast<std::uint32_t>(spec.input_dim));
    detail::put_u32(b, static_cast<std::uint32_t>(spec.layer_widths.size()));
    for (int w : spec.layer_widths) detail::put_u32(b, static_cast<std::uint32_t>(w));
  } else {
    for (int d : spec.input_shape) detail::put_u32(b, static_cast<std::uint32_t>(d));
    detail::put_u32(b, static_cast<std::uint32_t>(spec.conv_channels));
    detail::put_u32(b, static_cast<std::uint32_t>(spec.conv_kernel));
    detail::put_u32(b, static_cast<std::uint32_t>(spec.conv_hidden));
  }
  detail::put_u64(b, params.seed);
  detail::put_u32(b, epoch);
  detail::put_u32(b, static_cast<std::uint32_t>(meta.size()));
  b += meta;
  detail::put_u32(b, static_cast<std::uint32_t>(params.named.size()));
  for (const auto& [name, t] : params.named) {
    detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
    b += name;
    detail::put_u32(b, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) detail::put_u64(b, d);
    for (double v : t.values()) detail::put_f64(b, v);
  }
  detail::put_u64(b, fnv1a64(b.data(), b.size()));

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(b.data(), static_cast<long>(b.size())))
    throw ArtifactError(format_msg("checkpoint: cannot write %s", path.c_str()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(format_msg("checkpoint: cannot open %s", path.c_str()));
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || buf.compare(0, 4, "RKDC") != 0)
    throw ArtifactError(format_msg("checkpoint: bad magic in %s", path.c_str()));
  const std::uint64_t want = fnv1a64(buf.data(), buf.size() - 8);
  std::uint64_t got = 0;
  for (int i = 0; i < 8; ++i)
    got |= std::uint64_t(static_cast<unsigned char>(buf[buf.size() - 8 + i])) << (8 * i);
  if (want != got)
    throw ArtifactError(format_msg("checkpoint: checksum mismatch in %s", path.c_str()));

  detail::Reader r{buf, 4, path};
  const std::uint8_t version = r.u8();
  if (version != 1)
    throw ArtifactError(format_msg("checkpoint: unsupported version %u in %s", version,
                                   path.c_str()));
  Checkpoint ck;
  const std::uint8_t kind = r.u8();
  ck.spec.kind = kind == 0 ? ModelKind::Mlp : ModelKind::TinyConv;
  ck.spec.num_classes = static_cast<int>(r.u32());
  if (ck.spec.kind == ModelKind::Mlp) {
    ck.spec.input_dim = static_cast<int>(r.u32());
    const std::uint32_t n_widths = r.u32();
    ck.spec.layer_widths.resize(n_widths);
    for (auto& w : ck.spec.layer_widths) w = static_cast<int>(r.u32());
  } else {
    for (auto& d : ck.spec.input_shape) d = static_cast<int>(r.u32());
    ck.spec.conv_channels = static_cast<int>(r.u32());
    ck.spec.conv_kernel = static_cast<int>(r.u32());
    ck.spec.conv_hidden = static_cast<int>(r.u32());
  }
  ck.params.seed = r.u64();
  ck.epoch = r.u32();
  ck.meta = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(numel(shape));
    for (double& v : values) v = r.f64();
    ck.params.named.emplace_back(std::move(name), Tensor::from_values(std::move(shape),
                                                                      std::move(values)));
  }
  ck.spec.validate();
  return ck;
}

}  // namespace rkd
