#pragma once

// Finite-difference suite: every tape op in isolation plus the composed
// networks and losses used in training, all in 64-bit mode.

#include <vector>

#include "kadapt/numerics/gradcheck.hpp"
#include "kadapt/training.hpp"

namespace kadapt {

/// Small double-precision encoder with two installed adapters at every site,
/// both with non-zero up matrices so every path carries gradient.
inline Encoder<double> toy_encoder(std::uint64_t seed, int blocks = 2) {
  EncoderConfig cfg;
  cfg.blocks = blocks;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 12;
  cfg.tokens = 3;
  cfg.token_dim = 4;
  cfg.sites = {SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::Proj, SiteKind::FFN};
  auto enc = make_encoder<double>(cfg, seed);
  std::mt19937_64 rng(mix_seed(seed, 7));
  for (int t = 0; t < 2; ++t) {
    add_adapters(enc, 2, 4.0, rng());
    for (auto& b : enc.blocks)
      for (LinearKind k : all_linear_kinds()) {
        auto& l = b.linear(k);
        l.adapters.back().up = gaussian_matrix<double>(l.d_out(), 2, 0.2, rng);
      }
  }
  for (auto& b : enc.blocks) {
    b.ln1_g = (gaussian_matrix<double>(1, 8, 0.1, rng).array() + 1.0).matrix();
    b.ln2_b = gaussian_matrix<double>(1, 8, 0.1, rng);
  }
  enc.frozen = true;
  return enc;
}

/// Stage-2 objective (prototype cross-entropy + batch-hard triplet + ID loss)
/// through the full toy encoder, differentiated w.r.t. the newest adapter and
/// the ID classifier.
inline GradCheckResult check_encoder_stage2(std::uint64_t seed) {
  Encoder<double> enc = toy_encoder(seed);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  const MatD x = gaussian_matrix<double>(8, enc.config.input_dim(), 1.0, mix_seed(seed, 1));
  const MatD protos = gaussian_matrix<double>(4, enc.config.d_model, 1.0, mix_seed(seed, 2));
  const std::vector<MixWeights> mix{MixWeights{{0.3, 0.7}}, MixWeights{{0.1, 0.9}}};

  std::vector<Binding<double>> probe;
  {
    ad::Tape<double> tape;
    ForwardOptions<double> fo;
    fo.mix = mix;
    fo.train_adapter = 1;
    fo.bind = recording_binder(probe);
    encode_on_tape(tape, enc, x, fo);
  }
  std::vector<MatD> params;
  for (const auto& b : probe) params.push_back(*b.target);
  params.push_back(gaussian_matrix<double>(4, enc.config.d_model, 0.3, mix_seed(seed, 3)));

  return check_gradients("encoder_stage2", params, [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p) {
    std::size_t next = 0;
    ForwardOptions<double> fo;
    fo.mix = mix;
    fo.train_adapter = 1;
    fo.bind = [&](ad::Tape<double>&, MatD&) { return p.at(next++); };
    auto f = encode_on_tape(tape, enc, x, fo);
    auto lce = loss_i2tce(f, tape.constant(protos), 5.0, labels);
    auto ltri = loss_triplet(f, labels, 0.3);
    auto lid = loss_id(f, p.back(), labels);
    return ad::add(ad::add(lce, ltri), lid);
  });
}

/// Whole-network gradient of the base encoder under ID cross-entropy.
inline GradCheckResult check_encoder_base(std::uint64_t seed) {
  Encoder<double> enc = strip_adapters(toy_encoder(seed));
  enc.frozen = false;
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  const MatD x = gaussian_matrix<double>(6, enc.config.input_dim(), 1.0, mix_seed(seed, 4));
  std::vector<MatD> params;
  for_each_base_tensor(enc, [&](const std::string&, MatD& m) { params.push_back(m); });
  params.push_back(gaussian_matrix<double>(3, enc.config.d_model, 0.3, mix_seed(seed, 5)));
  return check_gradients("encoder_base", params, [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p) {
    std::vector<const MatD*> order;
    for_each_base_tensor(enc, [&](const std::string&, MatD& m) { order.push_back(&m); });
    ForwardOptions<double> fo;
    fo.train_base = true;
    fo.bind = [&](ad::Tape<double>&, MatD& m) {
      const auto it = std::find(order.begin(), order.end(), &m);
      return p.at(static_cast<std::size_t>(it - order.begin()));
    };
    return loss_id(encode_on_tape(tape, enc, x, fo), p.back(), labels);
  });
}

/// Stage-1 contrastive pair w.r.t. prototypes and the logit scale.
inline GradCheckResult check_prototype_losses(std::uint64_t seed) {
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 2, 3};
  const MatD f = gaussian_matrix<double>(8, 6, 1.0, mix_seed(seed, 6));
  const std::vector<MatD> params{gaussian_matrix<double>(4, 6, 1.0, mix_seed(seed, 7)), MatD::Constant(1, 1, 1.2)};
  return check_gradients("prototype_contrastive", params,
                         [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& p) {
                           auto feats = tape.constant(f);
                           return ad::add(loss_i2t(feats, p[0], p[1], labels), loss_t2i(feats, p[0], p[1], labels));
                         });
}

/// All op checks (three seeds each) followed by the composed checks.
inline std::vector<GradCheckResult> run_gradcheck_suite() {
  std::vector<GradCheckResult> out;
  for (const auto& name : supported_ops()) {
    GradCheckResult worst{name, 0.0, true};
    for (std::uint64_t seed : {1u, 17u, 123u}) {
      const auto r = check_op(name, seed);
      worst.max_relative_error = std::max(worst.max_relative_error, r.max_relative_error);
      worst.passed = worst.passed && r.passed;
    }
    out.push_back(worst);
  }
  out.push_back(check_encoder_stage2(11));
  out.push_back(check_encoder_base(12));
  out.push_back(check_prototype_losses(13));
  return out;
}

}  // namespace kadapt
