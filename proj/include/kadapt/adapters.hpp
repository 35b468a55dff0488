#pragma once

// Low-rank knowledge adapters on frozen linear layers.
//
// Naming follows the application order: `down` (r x d_in) is applied to the
// input first, `up` (d_out x r) second, and the pair contributes
// (alpha / r) * up * down on top of the frozen weight.

#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kadapt/numerics/matrix.hpp"
#include "kadapt/selector.hpp"

namespace kadapt {

/// Adapter-capable linear layers inside one encoder block.
enum class LinearKind { Q, K, V, Proj, FFN1, FFN2 };

/// User-facing site switches; FFN covers both feed-forward layers.
enum class SiteKind { Q, K, V, Proj, FFN };

inline std::string to_string(LinearKind k) {
  switch (k) {
    case LinearKind::Q: return "q";
    case LinearKind::K: return "k";
    case LinearKind::V: return "v";
    case LinearKind::Proj: return "proj";
    case LinearKind::FFN1: return "ffn1";
    case LinearKind::FFN2: return "ffn2";
  }
  return "?";
}

inline std::string to_string(SiteKind k) {
  switch (k) {
    case SiteKind::Q: return "Q";
    case SiteKind::K: return "K";
    case SiteKind::V: return "V";
    case SiteKind::Proj: return "Proj";
    case SiteKind::FFN: return "FFN";
  }
  return "?";
}

inline SiteKind parse_site(const std::string& s) {
  for (auto k : {SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::Proj, SiteKind::FFN})
    if (to_string(k) == s) return k;
  fail(ErrorKind::Config, "unknown adapter site '" + s + "' (expected Q, K, V, Proj or FFN)");
}

inline std::vector<LinearKind> linears_of(SiteKind k) {
  switch (k) {
    case SiteKind::Q: return {LinearKind::Q};
    case SiteKind::K: return {LinearKind::K};
    case SiteKind::V: return {LinearKind::V};
    case SiteKind::Proj: return {LinearKind::Proj};
    case SiteKind::FFN: return {LinearKind::FFN1, LinearKind::FFN2};
  }
  return {};
}

struct SiteId {
  int block = 0;
  LinearKind kind = LinearKind::Q;
};

template <typename T>
struct LoraAdapter {
  Mat<T> down;  // rank x d_in
  Mat<T> up;    // d_out x rank
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
};

template <typename T>
struct AdaptedLinear {
  Mat<T> base_weight;  // d_out x d_in
  Mat<T> base_bias;    // 1 x d_out
  std::vector<LoraAdapter<T>> adapters;
  SiteId site;

  Eigen::Index d_in() const { return base_weight.cols(); }
  Eigen::Index d_out() const { return base_weight.rows(); }
  std::size_t adapter_count() const { return adapters.size(); }
};

template <typename T>
struct MergedLinear {
  Mat<T> weight;
  Mat<T> bias;
};

template <typename T>
AdaptedLinear<T> make_linear(Eigen::Index d_in, Eigen::Index d_out, SiteId site, std::mt19937_64& rng) {
  AdaptedLinear<T> l;
  l.base_weight = gaussian_matrix<T>(d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  l.base_bias = Mat<T>::Zero(1, d_out);
  l.site = site;
  return l;
}

namespace detail {

template <typename T>
void check_mix(const AdaptedLinear<T>& layer, const MixWeights& s) {
  require(s.size() == layer.adapter_count(), ErrorKind::Dimension,
          "mixing vector has " + std::to_string(s.size()) + " entries for " +
              std::to_string(layer.adapter_count()) + " adapters");
}

template <typename T>
void check_input(const AdaptedLinear<T>& layer, const Mat<T>& x) {
  require(x.cols() == layer.d_in(), ErrorKind::Dimension,
          "input width " + std::to_string(x.cols()) + " != layer d_in " + std::to_string(layer.d_in()));
}

}  // namespace detail

/// Frozen layer plus one adapter: W x + b + (alpha/r) up down x, on row batches.
template <typename T>
Mat<T> forward_single(const AdaptedLinear<T>& layer, std::size_t adapter_index, const Mat<T>& x) {
  require(adapter_index < layer.adapter_count(), ErrorKind::Index,
          "adapter index " + std::to_string(adapter_index) + " out of range");
  detail::check_input(layer, x);
  const auto& a = layer.adapters[adapter_index];
  Mat<T> y = (x * layer.base_weight.transpose()).rowwise() + layer.base_bias.row(0);
  y.noalias() += static_cast<T>(a.scale()) * ((x * a.down.transpose()) * a.up.transpose());
  return y;
}

/// Frozen layer plus the s-weighted sum of every adapter's low-rank path.
template <typename T>
Mat<T> forward_mixed(const AdaptedLinear<T>& layer, const MixWeights& s, const Mat<T>& x) {
  detail::check_mix(layer, s);
  detail::check_input(layer, x);
  Mat<T> y = (x * layer.base_weight.transpose()).rowwise() + layer.base_bias.row(0);
  for (std::size_t t = 0; t < layer.adapter_count(); ++t) {
    const auto& a = layer.adapters[t];
    y.noalias() += static_cast<T>(a.scale() * s[t]) * ((x * a.down.transpose()) * a.up.transpose());
  }
  return y;
}

/// (alpha/r) * sum_t s_t * up_t * down_t, accumulated in adapter order.
template <typename T>
Mat<T> mixed_delta(const AdaptedLinear<T>& layer, const MixWeights& s) {
  detail::check_mix(layer, s);
  Mat<T> delta = Mat<T>::Zero(layer.d_out(), layer.d_in());
  for (std::size_t t = 0; t < layer.adapter_count(); ++t) {
    const auto& a = layer.adapters[t];
    delta.noalias() += static_cast<T>(a.scale() * s[t]) * (a.up * a.down);
  }
  return delta;
}

/// Collapses the mixed adapters into one weight; the bias is untouched.
template <typename T>
MergedLinear<T> merge(const AdaptedLinear<T>& layer, const MixWeights& s) {
  return {layer.base_weight + mixed_delta(layer, s), layer.base_bias};
}

template <typename T>
Mat<T> forward_merged(const MergedLinear<T>& m, const Mat<T>& x) {
  return (x * m.weight.transpose()).rowwise() + m.bias.row(0);
}

/// Appends an adapter whose initial contribution is exactly zero: `down` is
/// drawn from N(0, 0.02^2) with `seed`, `up` starts at zero.
template <typename T>
std::size_t add_adapter(AdaptedLinear<T>& layer, int rank, double alpha, std::uint64_t seed) {
  require(rank >= 1, ErrorKind::Parameter, "adapter rank must be >= 1");
  require(rank <= std::min(layer.d_in(), layer.d_out()), ErrorKind::Parameter,
          "adapter rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
              std::to_string(std::min(layer.d_in(), layer.d_out())));
  require(alpha > 0.0, ErrorKind::Parameter, "adapter alpha must be > 0");
  LoraAdapter<T> a;
  a.rank = rank;
  a.alpha = alpha;
  a.down = gaussian_matrix<T>(rank, layer.d_in(), 0.02, seed);
  a.up = Mat<T>::Zero(layer.d_out(), rank);
  layer.adapters.push_back(std::move(a));
  return layer.adapters.size() - 1;
}

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

struct StorageConfig {
  int blocks = 12;
  int d_model = 768;
  int ffn_dim = 3072;
  int rank = 64;
  std::set<SiteKind> sites{SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::Proj};
  int stats_dim = 768;
};

struct StorageReport {
  std::uint64_t adapter_bytes = 0;     // per dataset, 4 bytes per value
  std::uint64_t stats_bytes_f32 = 0;   // per dataset, mu and Sigma at 4 bytes per value
  std::uint64_t stats_file_bytes = 0;  // on-disk stats file (64-bit values plus header)
};

/// MB here means 2^20 bytes, the unit the adapter figures are quoted in.
inline double to_mb(std::uint64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

inline std::pair<std::uint64_t, std::uint64_t> linear_shape(LinearKind k, std::uint64_t d_model,
                                                            std::uint64_t ffn_dim) {
  switch (k) {
    case LinearKind::FFN1: return {d_model, ffn_dim};
    case LinearKind::FFN2: return {ffn_dim, d_model};
    default: return {d_model, d_model};
  }
}

inline StorageReport storage_bytes(const StorageConfig& cfg) {
  require(cfg.blocks >= 0 && cfg.d_model >= 0 && cfg.ffn_dim >= 0 && cfg.rank >= 0 && cfg.stats_dim >= 0,
          ErrorKind::Parameter, "storage config values must be non-negative");
  StorageReport r;
  const auto rank = static_cast<std::uint64_t>(cfg.rank);
  for (SiteKind site : cfg.sites) {
    for (LinearKind k : linears_of(site)) {
      const auto [din, dout] =
          linear_shape(k, static_cast<std::uint64_t>(cfg.d_model), static_cast<std::uint64_t>(cfg.ffn_dim));
      r.adapter_bytes += static_cast<std::uint64_t>(cfg.blocks) * 4u * rank * (din + dout);
    }
  }
  const auto d = static_cast<std::uint64_t>(cfg.stats_dim);
  r.stats_bytes_f32 = 4u * (d + d * d);
  r.stats_file_bytes = 24u + 8u * (d + d * d);
  return r;
}

}  // namespace kadapt
