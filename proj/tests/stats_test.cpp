#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "kadapt/stats.hpp"

using namespace kadapt;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "kadapt_stats_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

GaussianStats random_stats(Eigen::Index dim, std::mt19937_64& rng) {
  GaussianStats s;
  s.count = 100;
  s.mean = gaussian_matrix<double>(dim, 1, 1.0, rng);
  const MatD b = gaussian_matrix<double>(dim, dim, 1.0, rng);
  s.cov = b * b.transpose() / static_cast<double>(dim) + 0.1 * MatD::Identity(dim, dim);
  return s;
}

GaussianStats diagonal_stats(const VecD& mean, const VecD& diag) {
  GaussianStats s;
  s.count = 10;
  s.mean = mean;
  s.cov = diag.asDiagonal();
  return s;
}

// Two-pass reference written with explicit loops.
void two_pass(const MatD& x, VecD& mean, MatD& cov) {
  const Eigen::Index n = x.rows(), d = x.cols();
  mean = VecD::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) mean(j) += x(i, j);
  mean /= static_cast<double>(n);
  cov = MatD::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index k = 0; k < d; ++k) cov(j, k) += (x(i, j) - mean(j)) * (x(i, k) - mean(k));
  cov /= static_cast<double>(n - 1);
}

}  // namespace

TEST(FitStats, TwoPointDefinition) {
  MatD x(2, 2);
  x << 0, 0, 2, 0;
  const GaussianStats s = fit_stats(x);
  EXPECT_EQ(s.count, 2u);
  EXPECT_DOUBLE_EQ(s.mean(0), 1.0);
  EXPECT_DOUBLE_EQ(s.mean(1), 0.0);
  EXPECT_DOUBLE_EQ(s.cov(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(s.cov(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(s.cov(1, 1), 0.0);
}

TEST(FitStats, IdenticalRowsHaveZeroCovariance) {
  MatD x = MatD::Ones(5, 3) * 2.5;
  EXPECT_EQ(fit_stats(x).cov.norm(), 0.0);
}

TEST(FitStats, MatchesTwoPassOracleAndGroundTruth) {
  std::mt19937_64 rng(3);
  const Eigen::Index d = 4;
  const MatD l = gaussian_matrix<double>(d, d, 0.7, rng);
  const MatD truth_cov = l * l.transpose();
  VecD truth_mean(d);
  truth_mean << 1.0, -2.0, 0.5, 3.0;
  const MatD z = gaussian_matrix<double>(500, d, 1.0, rng);
  const MatD x = (z * l.transpose()).rowwise() + truth_mean.transpose();

  const GaussianStats s = fit_stats(x);
  VecD om;
  MatD oc;
  two_pass(x, om, oc);
  EXPECT_LT((s.mean - om).norm(), 1e-12);
  EXPECT_LT((s.cov - oc).norm(), 1e-10);
  // Sampling error: std of the mean ~ sqrt(diag/500); covariance within ~25%.
  for (Eigen::Index j = 0; j < d; ++j) EXPECT_LT(std::abs(s.mean(j) - truth_mean(j)), 5.0 * std::sqrt(truth_cov(j, j) / 500));
  EXPECT_LT(relative_frobenius(s.cov, truth_cov), 0.25);
}

TEST(FitStats, FloatInputAndErrors) {
  MatF x = gaussian_matrix<float>(10, 3, 1.0, 9);
  EXPECT_EQ(fit_stats(x).dim(), 3);
  try {
    fit_stats(MatD::Ones(1, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientSamples);
  }
}

TEST(W2Distance, SelfDistanceIsZero) {
  std::mt19937_64 rng(1);
  const GaussianStats a = random_stats(6, rng);
  EXPECT_LT(w2_distance(a, a), 1e-8);
}

TEST(W2Distance, SharedCovarianceLeavesMeanTerm) {
  std::mt19937_64 rng(2);
  GaussianStats a = random_stats(2, rng);
  GaussianStats b = a;
  a.mean << 1.0, 0.0;
  b.mean << 0.0, 0.0;
  EXPECT_NEAR(w2_distance(a, b), 1.0, 1e-10);
}

TEST(W2Distance, DiagonalHandCase) {
  VecD ma(2), mb(2), da(2), db(2);
  ma << 0, 0;
  mb << 1, 0;
  da << 1, 4;
  db << 4, 1;
  EXPECT_NEAR(w2_distance(diagonal_stats(ma, da), diagonal_stats(mb, db)), 3.0, 1e-12);
}

TEST(W2Distance, Properties) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dims(1, 24);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = dims(rng);
    const GaussianStats a = random_stats(d, rng), b = random_stats(d, rng);
    const double ab = w2_distance(a, b);
    EXPECT_GE(ab, 0.0);
    EXPECT_LT(std::abs(ab - w2_distance(b, a)), 1e-8);
    GaussianStats ta = a, tb = b;
    const VecD shift = gaussian_matrix<double>(d, 1, 3.0, rng);
    ta.mean += shift;
    tb.mean += shift;
    EXPECT_LT(std::abs(w2_distance(ta, tb) - ab), 1e-8);

    const VecD da = (gaussian_matrix<double>(d, 1, 1.0, rng).array().abs() + 0.01).matrix();
    const VecD db = (gaussian_matrix<double>(d, 1, 1.0, rng).array().abs() + 0.01).matrix();
    const double closed = (a.mean - b.mean).squaredNorm() + (da.array().sqrt() - db.array().sqrt()).square().sum();
    EXPECT_LT(std::abs(w2_distance(diagonal_stats(a.mean, da), diagonal_stats(b.mean, db)) - closed), 1e-8);
  }
}

TEST(W2Distance, BatchMatchesPairwise) {
  std::mt19937_64 rng(5);
  const GaussianStats q = random_stats(5, rng);
  std::vector<GaussianStats> refs{random_stats(5, rng), random_stats(5, rng), q};
  const auto ds = w2_distances(q, refs);
  for (std::size_t i = 0; i < refs.size(); ++i) EXPECT_NEAR(ds[i], w2_distance(q, refs[i]), 1e-12);
}

TEST(W2Distance, RankDeficientCovariances) {
  // Two-sample estimates are rank one; the distance must still be defined.
  const MatD x = gaussian_matrix<double>(2, 8, 1.0, 4);
  const MatD y = gaussian_matrix<double>(2, 8, 1.0, 5);
  const double d = w2_distance(fit_stats(x), fit_stats(y));
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_GE(d, 0.0);
}

TEST(W2Distance, DimensionMismatch) {
  std::mt19937_64 rng(1);
  try {
    w2_distance(random_stats(3, rng), random_stats(4, rng));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(StatsFile, RoundTripIsBitExact) {
  std::mt19937_64 rng(8);
  const GaussianStats a = random_stats(7, rng);
  const auto path = temp_path("roundtrip.stats");
  save_stats(a, path);
  const GaussianStats b = load_stats(path);
  EXPECT_EQ(b.count, a.count);
  EXPECT_EQ(b.dim(), a.dim());
  EXPECT_EQ(std::memcmp(b.mean.data(), a.mean.data(), sizeof(double) * a.mean.size()), 0);
  EXPECT_EQ(std::memcmp(b.cov.data(), a.cov.data(), sizeof(double) * a.cov.size()), 0);
}

TEST(StatsFile, SizeFollowsLayout) {
  GaussianStats s;
  s.count = 2;
  s.mean = VecD::Zero(768);
  s.cov = MatD::Identity(768, 768);
  const auto path = temp_path("d768.stats");
  save_stats(s, path);
  EXPECT_EQ(std::filesystem::file_size(path), 24u + 8u * (768u + 768u * 768u));
  EXPECT_EQ(std::filesystem::file_size(path), stats_file_bytes(768));
}

TEST(StatsFile, CorruptionIsFormatError) {
  std::mt19937_64 rng(9);
  const auto path = temp_path("trunc.stats");
  save_stats(random_stats(4, rng), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  try {
    load_stats(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTSTATS0000";
  }
  try {
    load_stats(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
}
