#pragma once

// Named 32-bit float tensors in one file: magic, version, count, then per
// tensor a u32 name length, the name, u32 rows, u32 cols and rows*cols
// little-endian floats in row-major order.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kadapt/io/binary.hpp"
#include "kadapt/numerics/matrix.hpp"

namespace kadapt::io {

inline constexpr std::string_view kTensorMagic = "ADLTENSR";
inline constexpr std::uint32_t kTensorVersion = 1;

struct TensorEntry {
  std::string name;
  MatF value;
};

inline void save_tensors(const std::vector<TensorEntry>& tensors, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_magic(out, kTensorMagic);
  write_le<std::uint32_t>(out, kTensorVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) write_le<float>(out, t.value.data()[i]);
  }
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

inline std::map<std::string, MatF> load_tensors(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_magic(in, kTensorMagic);
  const auto version = read_le<std::uint32_t>(in, "tensor header");
  if (version != kTensorVersion) fail(ErrorKind::Format, "unsupported tensor file version " + std::to_string(version));
  const auto count = read_le<std::uint32_t>(in, "tensor header");
  std::map<std::string, MatF> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = read_le<std::uint32_t>(in, "tensor name");
    if (len > 4096) fail(ErrorKind::Format, "tensor name too long in " + path.string());
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) fail(ErrorKind::Format, "truncated tensor name in " + path.string());
    const auto rows = read_le<std::uint32_t>(in, "tensor shape");
    const auto cols = read_le<std::uint32_t>(in, "tensor shape");
    MatF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_le<float>(in, "tensor body");
    if (!out.emplace(name, std::move(m)).second) fail(ErrorKind::Format, "duplicate tensor " + name);
  }
  expect_eof(in, "tensor file " + path.string());
  return out;
}

/// Copies a stored tensor into `target`, checking the name and shape.
inline void restore(const std::map<std::string, MatF>& tensors, const std::string& name, MatF& target) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::Format, "checkpoint is missing tensor " + name);
  if (it->second.rows() != target.rows() || it->second.cols() != target.cols())
    fail(ErrorKind::Format, "tensor " + name + " has shape " + std::to_string(it->second.rows()) + "x" +
                                std::to_string(it->second.cols()) + ", expected " + std::to_string(target.rows()) +
                                "x" + std::to_string(target.cols()));
  target = it->second;
}

}  // namespace kadapt::io
