#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "kadapt/gradcheck_suite.hpp"

using namespace kadapt;

namespace {

// Exhaustive all-triplets oracle: for each anchor with at least one negative,
// max over every (positive, negative) pair of margin + d_ap - d_an, clamped at 0.
double exhaustive_triplet(const MatD& d, const std::vector<int>& y, double margin) {
  double total = 0.0;
  int anchors = 0;
  for (std::size_t a = 0; a < y.size(); ++a) {
    double worst = -1e300;
    bool any_neg = false;
    for (std::size_t p = 0; p < y.size(); ++p) {
      if (p == a || y[p] != y[a]) continue;
      for (std::size_t n = 0; n < y.size(); ++n) {
        if (y[n] == y[a]) continue;
        any_neg = true;
        worst = std::max(worst, margin + d(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(p)) -
                                    d(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(n)));
      }
    }
    if (!any_neg) continue;
    ++anchors;
    total += std::max(0.0, worst);
  }
  return anchors ? total / anchors : 0.0;
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.blocks = 2;
  c.d_model = 16;
  c.heads = 2;
  c.ffn_dim = 24;
  c.tokens = 4;
  c.token_dim = 6;
  return c;
}

void clustered(const std::vector<int>& ids, int per_class, int dim, double spread, std::uint64_t seed, MatF& x,
               std::vector<int>& y) {
  std::mt19937_64 rng(seed);
  x.resize(static_cast<Eigen::Index>(ids.size()) * per_class, dim);
  y.clear();
  Eigen::Index row = 0;
  for (int id : ids) {
    const MatF center = gaussian_matrix<float>(1, dim, 1.0, rng);
    for (int i = 0; i < per_class; ++i) {
      x.row(row++) = center + gaussian_matrix<float>(1, dim, spread, rng);
      y.push_back(id);
    }
  }
}

}  // namespace

TEST(PkSample, ExhaustiveCase) {
  const std::vector<int> labels{7, 9, 7, 9};
  auto b = pk_sample(labels, 2, 2, 3);
  std::sort(b.begin(), b.end());
  EXPECT_EQ(b, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(PkSample, ShapeAndDeterminism) {
  std::vector<int> labels;
  for (int id = 0; id < 20; ++id)
    for (int i = 0; i < 6; ++i) labels.push_back(100 + id);
  const auto a = pk_sample(labels, 8, 4, 42);
  EXPECT_EQ(a, pk_sample(labels, 8, 4, 42));
  EXPECT_NE(a, pk_sample(labels, 8, 4, 43));
  ASSERT_EQ(a.size(), 32u);
  for (std::size_t p = 0; p < 8; ++p) {
    std::set<std::size_t> distinct;
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(labels[a[p * 4 + k]], labels[a[p * 4]]);
      distinct.insert(a[p * 4 + k]);
    }
    EXPECT_EQ(distinct.size(), 4u);
  }
}

TEST(PkSample, Preconditions) {
  const std::vector<int> labels{1, 1, 2, 2};
  for (auto [p, k] : {std::pair{3, 2}, std::pair{2, 3}}) {
    try {
      pk_sample(labels, p, k, 0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Sampler);
    }
  }
}

TEST(Triplet, HandBuiltBatch) {
  MatD d(4, 4);
  d << 0, 2, 3, 5, 2, 0, 1, 4, 3, 1, 0, 6, 5, 4, 6, 0;
  ad::Tape<double> tape;
  const auto l = ad::batch_hard_triplet(tape.constant(d), {0, 0, 1, 1}, 0.5);
  // anchors: max(0, .5+2-3), .5+2-1, .5+6-1, .5+6-4
  EXPECT_DOUBLE_EQ(l.value()(0, 0), (0.0 + 1.5 + 5.5 + 2.5) / 4.0);
}

TEST(Triplet, ZeroMarginOnPerfectClusters) {
  MatD f(4, 2);
  f << 0, 0, 0, 0, 5, 5, 5, 5;
  ad::Tape<double> tape;
  EXPECT_DOUBLE_EQ(loss_triplet(tape.constant(f), {0, 0, 1, 1}, 0.0).value()(0, 0), 0.0);
}

TEST(Triplet, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> ids(2, 4), k(2, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> y;
    const int classes = ids(rng), per = k(rng);
    for (int c = 0; c < classes; ++c)
      for (int i = 0; i < per; ++i) y.push_back(c);
    if (y.size() > 16) y.resize(16);
    std::map<int, int> counts;
    for (int l : y) ++counts[l];
    if (std::any_of(counts.begin(), counts.end(), [](auto& c) { return c.second < 2; })) continue;
    const MatD f = gaussian_matrix<double>(static_cast<Eigen::Index>(y.size()), 3, 1.0, rng);
    ad::Tape<double> tape;
    const auto dist = ad::pairwise_distance(tape.constant(f));
    EXPECT_NEAR(ad::batch_hard_triplet(dist, y, 0.3).value()(0, 0), exhaustive_triplet(dist.value(), y, 0.3), 1e-12);
  }
}

TEST(Triplet, MissingPositiveIsSamplerError) {
  ad::Tape<double> tape;
  try {
    loss_triplet(tape.constant(MatD(MatD::Identity(3, 3))), {0, 0, 1}, 0.3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Sampler);
  }
}

TEST(Losses, SingleIdentityContrastiveIsZero) {
  ad::Tape<double> tape;
  auto f = tape.constant(gaussian_matrix<double>(5, 4, 1.0, 1));
  auto p = tape.constant(gaussian_matrix<double>(1, 4, 1.0, 2));
  auto ls = tape.constant(MatD::Constant(1, 1, 2.0));
  const std::vector<int> y(5, 0);
  EXPECT_NEAR(loss_i2t(f, p, ls, y).value()(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(loss_t2i(f, p, ls, y).value()(0, 0), 0.0, 1e-12);
}

TEST(Losses, ContrastiveHandValues) {
  // Orthogonal unit features against matching prototypes, scale 1.
  MatD f = MatD::Identity(2, 2);
  ad::Tape<double> tape;
  auto fv = tape.constant(f);
  auto ls = tape.constant(MatD::Zero(1, 1));
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(loss_i2t(fv, tape.constant(f), ls, {0, 1}).value()(0, 0), expected, 1e-12);
  EXPECT_NEAR(loss_t2i(fv, tape.constant(f), ls, {0, 1}).value()(0, 0), expected, 1e-12);
  EXPECT_NEAR(loss_i2tce(fv, tape.constant(f), 1.0, {0, 1}).value()(0, 0), expected, 1e-12);
}

TEST(Losses, PrototypeGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = check_prototype_losses(seed);
    EXPECT_TRUE(r.passed) << r.max_relative_error;
  }
}

TEST(Adam, MinimizesQuadratic) {
  MatF w = MatF::Constant(1, 3, 5.0f);
  Adam<float> opt(0.1);
  for (int i = 0; i < 500; ++i) {
    ad::Tape<float> tape;
    std::vector<Binding<float>> b;
    auto v = recording_binder(b)(tape, w);
    tape.backward(ad::sum_all(ad::mul_const(v, w)));
    opt.step(tape, b);
  }
  EXPECT_LT(w.cwiseAbs().maxCoeff(), 0.05f);
}

TEST(Stage1, SeparableClustersReachPerfectAccuracy) {
  MatF f;
  std::vector<int> y;
  clustered({3, 8}, 10, 6, 0.1, 1, f, y);
  TrainConfig cfg;
  cfg.stage1_iterations = 50;
  cfg.p_ids = 2;
  TrainLog log;
  const auto r = stage1_train_prototypes(f, y, {3, 8}, cfg, 7, &log, 1);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(log.totals(1, 1).size(), 50u);
}

TEST(Stage1, SingleIdentityPrototypeTracksMeanDirection) {
  MatF f;
  std::vector<int> y;
  clustered({4}, 12, 5, 0.3, 2, f, y);
  TrainConfig cfg;
  cfg.stage1_iterations = 20;
  const auto r = stage1_train_prototypes(f, y, {4}, cfg, 3);
  MatF mean = MatF::Zero(1, 5);
  for (Eigen::Index i = 0; i < f.rows(); ++i) mean += f.row(i).normalized();
  const float cosine = mean.row(0).normalized().dot(r.prototypes.prototypes.row(0).normalized());
  EXPECT_GT(cosine, 0.999f);
}

TEST(Stage1, LossDecreases) {
  MatF f;
  std::vector<int> y;
  std::vector<int> ids;
  for (int i = 0; i < 12; ++i) ids.push_back(i);
  clustered(ids, 6, 8, 0.8, 4, f, y);
  TrainConfig cfg;
  TrainLog log;
  stage1_train_prototypes(f, y, ids, cfg, 5, &log, 2);
  const auto [head, tail] = smoothed_ends(log.totals(2, 1));
  EXPECT_LT(tail, head);
}

TEST(Stage1, LabelOutsideSpaceIsLabelError) {
  MatF f;
  std::vector<int> y;
  clustered({1, 2}, 4, 3, 0.1, 1, f, y);
  try {
    stage1_train_prototypes(f, y, {1, 5}, TrainConfig{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Label);
  }
}

TEST(Stage2, TrainsOnlyTheNewAdapterAndReducesLoss) {
  EncoderConfig ec = small_config();
  auto enc = make_encoder<float>(ec, 10);
  enc.frozen = true;
  add_adapters(enc, 4, 16.0, 11);
  for_each_adapter_tensor(enc, 0, [](const std::string& n, MatF& m) {
    if (n.ends_with("up")) m.setConstant(0.01f);
  });
  add_adapters(enc, 4, 16.0, 12);

  std::vector<int> ids;
  for (int i = 0; i < 8; ++i) ids.push_back(50 + i);
  MatF x;
  std::vector<int> y;
  clustered(ids, 6, ec.input_dim(), 0.7, 13, x, y);
  const std::vector<MixWeights> mix(2, MixWeights{{0.3, 0.7}});
  TrainConfig cfg;
  cfg.stage1_iterations = 20;
  cfg.stage2_iterations = 80;
  cfg.p_ids = 4;
  const MatF feats = encode(enc, x, mix);
  const auto protos = stage1_train_prototypes(feats, y, ids, cfg, 14).prototypes;
  const PrototypeSet protos_before = protos;

  std::vector<MatF> base_before, old_before;
  for_each_base_tensor(enc, [&](const std::string&, MatF& m) { base_before.push_back(m); });
  for_each_adapter_tensor(enc, 0, [&](const std::string&, MatF& m) { old_before.push_back(m); });
  std::vector<MatF> new_before;
  for_each_adapter_tensor(enc, 1, [&](const std::string&, MatF& m) { new_before.push_back(m); });

  TrainLog log;
  stage2_train(enc, {1}, mix, protos, x, y, cfg, 15, &log, 2);

  std::size_t i = 0;
  for_each_base_tensor(enc, [&](const std::string& n, MatF& m) { EXPECT_EQ(m, base_before[i++]) << n; });
  i = 0;
  for_each_adapter_tensor(enc, 0, [&](const std::string& n, MatF& m) { EXPECT_EQ(m, old_before[i++]) << n; });
  i = 0;
  bool changed = false;
  for_each_adapter_tensor(enc, 1, [&](const std::string&, MatF& m) { changed = changed || !(m == new_before[i++]); });
  EXPECT_TRUE(changed);
  EXPECT_EQ(protos.prototypes, protos_before.prototypes);
  const auto [head, tail] = smoothed_ends(log.totals(2, 2));
  EXPECT_LT(tail, head);
}

TEST(Stage2, SingletonIdentitiesAreSamplerError) {
  auto enc = make_encoder<float>(small_config(), 10);
  enc.frozen = true;
  add_adapters(enc, 2, 4.0, 1);
  MatF x;
  std::vector<int> y;
  clustered({1, 2, 3}, 1, enc.config.input_dim(), 0.1, 2, x, y);
  PrototypeSet p = init_prototypes(MatF::Identity(3, 16), y, {1, 2, 3}, 0.07);
  try {
    stage2_train(enc, {0}, {MixWeights{{1.0}}, MixWeights{{1.0}}}, p, x, y, TrainConfig{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Sampler);
  }
}
