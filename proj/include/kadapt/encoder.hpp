#pragma once

// Small pre-norm transformer over pseudo-patch tokens. Every attention and
// feed-forward linear layer is an AdaptedLinear; adapters are only ever added
// at the configured sites.

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kadapt/adapters.hpp"
#include "kadapt/numerics/tape.hpp"
#include "kadapt/selector.hpp"

namespace kadapt {

struct EncoderConfig {
  int blocks = 4;
  int d_model = 64;
  int heads = 4;
  int ffn_dim = 128;
  int tokens = 8;
  int token_dim = 16;
  std::set<SiteKind> sites{SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::Proj};

  int input_dim() const { return tokens * token_dim; }

  bool adapted(LinearKind k) const {
    for (SiteKind s : sites)
      for (LinearKind l : linears_of(s))
        if (l == k) return true;
    return false;
  }

  void validate() const {
    require(blocks >= 1, ErrorKind::Config, "encoder needs at least one block");
    require(d_model >= 1 && heads >= 1 && d_model % heads == 0, ErrorKind::Config,
            "d_model must be a positive multiple of heads");
    require(ffn_dim >= 1 && token_dim >= 1, ErrorKind::Config, "ffn_dim and token_dim must be positive");
    require(tokens >= 1, ErrorKind::Config, "tokens must be >= 1");
    require(!sites.empty(), ErrorKind::Config, "at least one adapter site is required");
  }
};

inline const std::vector<LinearKind>& all_linear_kinds() {
  static const std::vector<LinearKind> kinds{LinearKind::Q,    LinearKind::K,    LinearKind::V,
                                             LinearKind::Proj, LinearKind::FFN1, LinearKind::FFN2};
  return kinds;
}

template <typename T>
struct EncoderBlock {
  Mat<T> ln1_g, ln1_b, ln2_g, ln2_b;
  AdaptedLinear<T> q, k, v, proj, ffn1, ffn2;

  AdaptedLinear<T>& linear(LinearKind kind) {
    switch (kind) {
      case LinearKind::Q: return q;
      case LinearKind::K: return k;
      case LinearKind::V: return v;
      case LinearKind::Proj: return proj;
      case LinearKind::FFN1: return ffn1;
      case LinearKind::FFN2: return ffn2;
    }
    fail(ErrorKind::Index, "bad linear kind");
  }
  const AdaptedLinear<T>& linear(LinearKind kind) const { return const_cast<EncoderBlock*>(this)->linear(kind); }
};

template <typename T>
struct Encoder {
  EncoderConfig config;
  Mat<T> patch_w;  // d_model x token_dim
  Mat<T> patch_b;  // 1 x d_model
  Mat<T> cls;      // 1 x d_model
  Mat<T> pos;      // (tokens + 1) x d_model
  std::vector<EncoderBlock<T>> blocks;
  Mat<T> final_g, final_b;
  bool frozen = false;

  /// Adapters per adapted site (equal at every site by construction).
  std::size_t adapter_count() const {
    for (LinearKind k : all_linear_kinds())
      if (config.adapted(k)) return blocks.front().linear(k).adapter_count();
    return 0;
  }
};

template <typename T>
Encoder<T> make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Encoder<T> e;
  e.config = cfg;
  const Eigen::Index d = cfg.d_model;
  e.patch_w = gaussian_matrix<T>(d, cfg.token_dim, 1.0 / std::sqrt(static_cast<double>(cfg.token_dim)), rng);
  e.patch_b = Mat<T>::Zero(1, d);
  e.cls = gaussian_matrix<T>(1, d, 0.02, rng);
  e.pos = gaussian_matrix<T>(cfg.tokens + 1, d, 0.02, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    EncoderBlock<T> blk;
    blk.ln1_g = blk.ln2_g = Mat<T>::Ones(1, d);
    blk.ln1_b = blk.ln2_b = Mat<T>::Zero(1, d);
    for (LinearKind k : all_linear_kinds()) {
      const auto [din, dout] = linear_shape(k, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(cfg.ffn_dim));
      blk.linear(k) = make_linear<T>(static_cast<Eigen::Index>(din), static_cast<Eigen::Index>(dout), {b, k}, rng);
    }
    e.blocks.push_back(std::move(blk));
  }
  e.final_g = Mat<T>::Ones(1, d);
  e.final_b = Mat<T>::Zero(1, d);
  return e;
}

template <typename U, typename T>
Encoder<U> cast_encoder(const Encoder<T>& e) {
  auto c = [](const Mat<T>& m) -> Mat<U> { return m.template cast<U>(); };
  Encoder<U> o;
  o.config = e.config;
  o.frozen = e.frozen;
  o.patch_w = c(e.patch_w);
  o.patch_b = c(e.patch_b);
  o.cls = c(e.cls);
  o.pos = c(e.pos);
  o.final_g = c(e.final_g);
  o.final_b = c(e.final_b);
  for (const auto& b : e.blocks) {
    EncoderBlock<U> nb;
    nb.ln1_g = c(b.ln1_g);
    nb.ln1_b = c(b.ln1_b);
    nb.ln2_g = c(b.ln2_g);
    nb.ln2_b = c(b.ln2_b);
    for (LinearKind k : all_linear_kinds()) {
      const auto& l = b.linear(k);
      auto& nl = nb.linear(k);
      nl.base_weight = c(l.base_weight);
      nl.base_bias = c(l.base_bias);
      nl.site = l.site;
      for (const auto& a : l.adapters) nl.adapters.push_back({c(a.down), c(a.up), a.rank, a.alpha});
    }
    o.blocks.push_back(std::move(nb));
  }
  return o;
}

/// Visits every base tensor with its checkpoint name, in a fixed order.
template <typename E, typename F>
void for_each_base_tensor(E& enc, F&& fn) {
  fn(std::string("embed.patch.w"), enc.patch_w);
  fn(std::string("embed.patch.b"), enc.patch_b);
  fn(std::string("embed.cls"), enc.cls);
  fn(std::string("embed.pos"), enc.pos);
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    auto& blk = enc.blocks[b];
    const std::string p = std::to_string(b) + ".";
    fn(p + "ln1.g", blk.ln1_g);
    fn(p + "ln1.b", blk.ln1_b);
    for (LinearKind k : {LinearKind::Q, LinearKind::K, LinearKind::V, LinearKind::Proj}) {
      fn(p + to_string(k) + ".base.w", blk.linear(k).base_weight);
      fn(p + to_string(k) + ".base.b", blk.linear(k).base_bias);
    }
    fn(p + "ln2.g", blk.ln2_g);
    fn(p + "ln2.b", blk.ln2_b);
    for (LinearKind k : {LinearKind::FFN1, LinearKind::FFN2}) {
      fn(p + to_string(k) + ".base.w", blk.linear(k).base_weight);
      fn(p + to_string(k) + ".base.b", blk.linear(k).base_bias);
    }
  }
  fn(std::string("final.ln.g"), enc.final_g);
  fn(std::string("final.ln.b"), enc.final_b);
}

/// Visits the down/up pair of adapter `index` at every adapted site. Names
/// use 1-based lifelong step numbers.
template <typename E, typename F>
void for_each_adapter_tensor(E& enc, std::size_t index, F&& fn) {
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    for (LinearKind k : all_linear_kinds()) {
      if (!enc.config.adapted(k)) continue;
      auto& l = enc.blocks[b].linear(k);
      require(index < l.adapter_count(), ErrorKind::Index, "adapter index out of range");
      const std::string p = std::to_string(b) + "." + to_string(k) + "." + std::to_string(index + 1) + ".";
      fn(p + "down", l.adapters[index].down);
      fn(p + "up", l.adapters[index].up);
    }
  }
}

/// Adds one adapter at every configured site; seeds derive from `seed` and the site.
template <typename T>
std::size_t add_adapters(Encoder<T>& enc, int rank, double alpha, std::uint64_t seed) {
  std::size_t index = 0;
  for (std::size_t b = 0; b < enc.blocks.size(); ++b)
    for (LinearKind k : all_linear_kinds())
      if (enc.config.adapted(k))
        index = add_adapter(enc.blocks[b].linear(k), rank, alpha,
                            mix_seed(seed, b * 16 + static_cast<std::uint64_t>(k)));
  return index;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class MixPath { Merged, Literal };

/// Supplies tape variables for trainable tensors; the default records a fresh
/// parameter per tensor.
template <typename T>
using Binder = std::function<ad::Var<T>(ad::Tape<T>&, Mat<T>&)>;

template <typename T>
struct ForwardOptions {
  std::vector<MixWeights> mix;  // one per block; may be empty when no adapters exist
  MixPath path = MixPath::Merged;
  std::optional<std::size_t> train_adapter;  // adapter whose matrices are trainable
  bool train_base = false;
  Binder<T> bind;
};

template <typename T>
struct Binding {
  ad::Var<T> var;
  Mat<T>* target;
};

/// Binder that creates tape parameters and records them for the optimizer.
template <typename T>
Binder<T> recording_binder(std::vector<Binding<T>>& out) {
  return [&out](ad::Tape<T>& tape, Mat<T>& m) {
    auto v = tape.parameter(m);
    out.push_back({v, &m});
    return v;
  };
}

namespace detail {

template <typename T>
ad::Var<T> adapted_linear(ad::Tape<T>& tape, AdaptedLinear<T>& layer, const MixWeights* s, ad::Var<T> x,
                          const ForwardOptions<T>& opt) {
  auto tensor = [&](Mat<T>& m, bool trainable) {
    if (trainable) {
      require(static_cast<bool>(opt.bind), ErrorKind::State, "trainable tensor without a binder");
      return opt.bind(tape, m);
    }
    return tape.constant(m);
  };
  if (layer.adapter_count() == 0) {
    auto w = tensor(layer.base_weight, opt.train_base);
    auto b = tensor(layer.base_bias, opt.train_base);
    return ad::add_row(ad::matmul_nt(x, w), b);
  }
  require(!opt.train_base, ErrorKind::State, "base training is not supported once adapters are installed");
  require(s != nullptr, ErrorKind::Dimension, "missing mixing weights for an adapted layer");
  detail::check_mix(layer, *s);
  auto bias = tape.constant(layer.base_bias);

  if (opt.path == MixPath::Literal && !opt.train_adapter) {
    auto y = ad::add_row(ad::matmul_nt(x, tape.constant(layer.base_weight)), bias);
    for (std::size_t t = 0; t < layer.adapter_count(); ++t) {
      auto& a = layer.adapters[t];
      auto h = ad::matmul_nt(ad::matmul_nt(x, tape.constant(a.down)), tape.constant(a.up));
      y = ad::add(y, ad::scale(h, a.scale() * (*s)[t]));
    }
    return y;
  }

  MixWeights frozen = *s;
  if (opt.train_adapter) {
    require(*opt.train_adapter < layer.adapter_count(), ErrorKind::Index, "trainable adapter index out of range");
    frozen.weights[*opt.train_adapter] = 0.0;
  }
  auto y = ad::add_row(ad::matmul_nt(x, tape.constant(Mat<T>(layer.base_weight + mixed_delta(layer, frozen)))), bias);
  if (opt.train_adapter) {
    auto& a = layer.adapters[*opt.train_adapter];
    auto down = tensor(a.down, true);
    auto up = tensor(a.up, true);
    y = ad::add(y, ad::scale(ad::matmul_nt(ad::matmul_nt(x, down), up), a.scale() * (*s)[*opt.train_adapter]));
  }
  return y;
}

}  // namespace detail

/// Runs the encoder on `batch` (N x tokens*token_dim) and returns the N x
/// d_model class-token features after the final norm.
template <typename T>
ad::Var<T> encode_on_tape(ad::Tape<T>& tape, Encoder<T>& enc, const Mat<T>& batch, const ForwardOptions<T>& opt) {
  const EncoderConfig& cfg = enc.config;
  require(batch.cols() == cfg.input_dim(), ErrorKind::Dimension,
          "batch width " + std::to_string(batch.cols()) + " != encoder input " + std::to_string(cfg.input_dim()));
  require(batch.rows() >= 1, ErrorKind::EmptyInput, "empty batch");
  require(!(opt.train_base && enc.frozen), ErrorKind::State, "base encoder is frozen");
  const std::size_t adapters = enc.adapter_count();
  if (adapters > 0) {
    require(opt.mix.size() == enc.blocks.size(), ErrorKind::Dimension,
            "expected " + std::to_string(enc.blocks.size()) + " per-block mixing vectors, got " +
                std::to_string(opt.mix.size()));
  }
  auto tensor = [&](Mat<T>& m) {
    if (opt.train_base) {
      require(static_cast<bool>(opt.bind), ErrorKind::State, "trainable tensor without a binder");
      return opt.bind(tape, m);
    }
    return tape.constant(m);
  };

  const Eigen::Index n = batch.rows();
  const Eigen::Index p = cfg.tokens;
  const Eigen::Index seq = p + 1;
  const Mat<T> patches = Eigen::Map<const Mat<T>>(batch.data(), n * p, cfg.token_dim);
  auto emb = ad::add_row(ad::matmul_nt(tape.constant(patches), tensor(enc.patch_w)), tensor(enc.patch_b));

  std::vector<int> order, pos_index, cls_rows;
  order.reserve(static_cast<std::size_t>(n * seq));
  for (Eigen::Index i = 0; i < n; ++i) {
    order.push_back(0);
    pos_index.push_back(0);
    cls_rows.push_back(static_cast<int>(i * seq));
    for (Eigen::Index j = 0; j < p; ++j) {
      order.push_back(static_cast<int>(1 + i * p + j));
      pos_index.push_back(static_cast<int>(1 + j));
    }
  }
  const std::vector<ad::Var<T>> parts{tensor(enc.cls), emb};
  auto x = ad::gather_rows(ad::concat_rows(std::span<const ad::Var<T>>(parts)), order);
  x = ad::add(x, ad::gather_rows(tensor(enc.pos), pos_index));

  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    auto& blk = enc.blocks[b];
    const MixWeights* s = adapters > 0 ? &opt.mix[b] : nullptr;
    auto lin = [&](LinearKind k, ad::Var<T> in) { return detail::adapted_linear(tape, blk.linear(k), s, in, opt); };
    auto h = ad::layer_norm(x, tensor(blk.ln1_g), tensor(blk.ln1_b));
    auto att = ad::attention(lin(LinearKind::Q, h), lin(LinearKind::K, h), lin(LinearKind::V, h), seq, cfg.heads);
    x = ad::add(x, lin(LinearKind::Proj, att));
    h = ad::layer_norm(x, tensor(blk.ln2_g), tensor(blk.ln2_b));
    x = ad::add(x, lin(LinearKind::FFN2, ad::gelu(lin(LinearKind::FFN1, h))));
  }
  return ad::layer_norm(ad::gather_rows(x, cls_rows), tensor(enc.final_g), tensor(enc.final_b));
}

/// Inference-only features; `mix` may be empty for an encoder without adapters.
template <typename T>
Mat<T> encode(const Encoder<T>& enc, const Mat<T>& batch, const std::vector<MixWeights>& mix = {},
              MixPath path = MixPath::Merged) {
  ad::Tape<T> tape;
  ForwardOptions<T> opt;
  opt.mix = mix;
  opt.path = path;
  return encode_on_tape(tape, const_cast<Encoder<T>&>(enc), batch, opt).value();
}

template <typename T>
Encoder<T> strip_adapters(const Encoder<T>& enc) {
  Encoder<T> out = enc;
  for (auto& b : out.blocks)
    for (LinearKind k : all_linear_kinds()) b.linear(k).adapters.clear();
  return out;
}

/// Same features as the base encoder with all adapters removed.
template <typename T>
Mat<T> encode_base(const Encoder<T>& enc, const Mat<T>& batch) {
  Encoder<T> base = strip_adapters(enc);
  return encode(base, batch);
}

/// Copy with each adapted weight replaced by its merged weight for the given
/// per-block mix; the result carries no adapters.
template <typename T>
Encoder<T> materialize(const Encoder<T>& enc, const std::vector<MixWeights>& mix) {
  require(mix.size() == enc.blocks.size(), ErrorKind::Dimension, "one mixing vector per block is required");
  Encoder<T> out = enc;
  for (std::size_t b = 0; b < out.blocks.size(); ++b) {
    for (LinearKind k : all_linear_kinds()) {
      auto& l = out.blocks[b].linear(k);
      if (l.adapter_count() == 0) continue;
      l.base_weight = merge(l, mix[b]).weight;
      l.adapters.clear();
    }
  }
  return out;
}

/// Encodes in chunks to bound tape memory.
template <typename T>
Mat<T> encode_chunked(const Encoder<T>& enc, const Mat<T>& x, const std::vector<MixWeights>& mix = {},
                      Eigen::Index chunk = 256) {
  Mat<T> out(x.rows(), enc.config.d_model);
  for (Eigen::Index s = 0; s < x.rows(); s += chunk) {
    const Eigen::Index c = std::min(chunk, x.rows() - s);
    out.middleRows(s, c) = encode(enc, Mat<T>(x.middleRows(s, c)), mix);
  }
  return out;
}

}  // namespace kadapt
