#pragma once

// Per-domain Gaussian feature statistics and the closed-form 2-Wasserstein
// distance between them.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kadapt/io/binary.hpp"
#include "kadapt/numerics/sym_eig.hpp"

namespace kadapt {

struct GaussianStats {
  std::uint64_t count = 0;
  VecD mean;
  MatD cov;

  Eigen::Index dim() const { return mean.size(); }
};

/// Arithmetic mean and unbiased (N - 1) covariance of the rows of `features`.
template <typename Derived>
GaussianStats fit_stats(const Eigen::MatrixBase<Derived>& features) {
  const Eigen::Index n = features.rows();
  require(n >= 2, ErrorKind::InsufficientSamples,
          "fit_stats needs at least 2 samples, got " + std::to_string(n));
  require(features.cols() > 0, ErrorKind::Dimension, "fit_stats needs dim > 0");
  const MatD x = features.template cast<double>();
  require(x.allFinite(), ErrorKind::Data, "fit_stats input contains NaN/Inf");
  GaussianStats s;
  s.count = static_cast<std::uint64_t>(n);
  s.mean = x.colwise().mean().transpose();
  const MatD centered = x.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

namespace detail {

constexpr double kCovRidge = 1e-6;

inline double w2_with_root(const GaussianStats& a, const MatD& root_a, const GaussianStats& b) {
  const MatD inner = root_a * b.cov * root_a;
  const MatD cross = sqrtm_psd(0.5 * (inner + inner.transpose()));
  return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
}

inline GaussianStats ridged(const GaussianStats& s) {
  GaussianStats r = s;
  r.cov.diagonal().array() += kCovRidge;
  return r;
}

inline double clamp_distance(double d) { return d < 0.0 ? 0.0 : d; }

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
///
/// The cross term uses the symmetric form so every square root is taken of a
/// PSD operand. If an estimated covariance is too indefinite for that, both
/// covariances are retried with a 1e-6 ridge.
inline double w2_distance(const GaussianStats& a, const GaussianStats& b) {
  require(a.dim() == b.dim(), ErrorKind::Dimension,
          "w2_distance dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  try {
    return detail::clamp_distance(detail::w2_with_root(a, sqrtm_psd(a.cov), b));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NotPsd) throw;
  }
  const GaussianStats ra = detail::ridged(a), rb = detail::ridged(b);
  return detail::clamp_distance(detail::w2_with_root(ra, sqrtm_psd(ra.cov), rb));
}

/// Distances from one query distribution to each reference, sharing the
/// query's covariance square root across references.
inline std::vector<double> w2_distances(const GaussianStats& query, std::span<const GaussianStats> refs) {
  std::vector<double> out;
  out.reserve(refs.size());
  MatD root;
  bool have_root = false;
  try {
    root = sqrtm_psd(query.cov);
    have_root = true;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NotPsd) throw;
  }
  for (const auto& r : refs) {
    require(r.dim() == query.dim(), ErrorKind::Dimension, "w2_distances dimension mismatch");
    if (!have_root) {
      out.push_back(w2_distance(query, r));
      continue;
    }
    try {
      out.push_back(detail::clamp_distance(detail::w2_with_root(query, root, r)));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NotPsd) throw;
      out.push_back(w2_distance(query, r));
    }
  }
  return out;
}

inline constexpr std::string_view kStatsMagic = "ADLSTATS";
inline constexpr std::uint32_t kStatsVersion = 1;
inline constexpr std::uint64_t kStatsHeaderBytes = 8 + 4 + 4 + 8;

inline std::uint64_t stats_file_bytes(std::uint64_t dim) { return kStatsHeaderBytes + 8 * (dim + dim * dim); }

inline void save_stats(const GaussianStats& s, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  io::write_magic(out, kStatsMagic);
  io::write_le<std::uint32_t>(out, kStatsVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.dim()));
  io::write_le<std::uint64_t>(out, s.count);
  for (Eigen::Index i = 0; i < s.dim(); ++i) io::write_le<double>(out, s.mean(i));
  for (Eigen::Index i = 0; i < s.cov.size(); ++i) io::write_le<double>(out, s.cov.data()[i]);
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

inline GaussianStats load_stats(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  io::expect_magic(in, kStatsMagic);
  const auto version = io::read_le<std::uint32_t>(in, "stats version");
  if (version != kStatsVersion) fail(ErrorKind::Format, "unsupported stats version " + std::to_string(version));
  const auto dim = io::read_le<std::uint32_t>(in, "stats dim");
  if (dim == 0 || dim > 65536) fail(ErrorKind::Format, "invalid stats dim " + std::to_string(dim));
  GaussianStats s;
  s.count = io::read_le<std::uint64_t>(in, "stats count");
  s.mean.resize(dim);
  s.cov.resize(dim, dim);
  for (Eigen::Index i = 0; i < s.mean.size(); ++i) s.mean(i) = io::read_le<double>(in, "stats mean");
  for (Eigen::Index i = 0; i < s.cov.size(); ++i) s.cov.data()[i] = io::read_le<double>(in, "stats covariance");
  io::expect_eof(in, "stats body");
  return s;
}

}  // namespace kadapt
