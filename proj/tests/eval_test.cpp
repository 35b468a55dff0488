#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "kadapt/eval.hpp"

using namespace kadapt;

namespace {

struct Instance {
  MatD q, g;
  std::vector<int> qid, qcam, gid, gcam;
};

Instance random_instance(std::mt19937_64& rng, int max_gallery = 20) {
  std::uniform_int_distribution<int> nq(1, 5), ng(1, max_gallery), id(0, 3), cam(0, 2), dim(2, 6);
  // Coarse integer features produce plenty of exact ties.
  std::uniform_int_distribution<int> val(-2, 2);
  Instance in;
  const int d = dim(rng), q = nq(rng), g = ng(rng);
  in.q.resize(q, d);
  in.g.resize(g, d);
  for (Eigen::Index i = 0; i < in.q.size(); ++i) in.q.data()[i] = val(rng);
  for (Eigen::Index i = 0; i < in.g.size(); ++i) in.g.data()[i] = val(rng);
  for (int i = 0; i < q; ++i) {
    in.qid.push_back(id(rng));
    in.qcam.push_back(cam(rng));
  }
  for (int i = 0; i < g; ++i) {
    in.gid.push_back(id(rng));
    in.gcam.push_back(cam(rng));
  }
  return in;
}

MatD unit_rows(MatD x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (x.row(i).norm() > 0) x.row(i) /= x.row(i).norm();
  return x;
}

// Brute force: for each query, build the valid gallery, place items by
// pairwise comparison counts (index breaks ties), then AP as the mean over
// relevant positions of (relevant items at or above) / position. Cosines use
// the same unit-row dot arithmetic so parallel vectors compare identically.
RetrievalScore brute_force(const Instance& raw) {
  Instance in = raw;
  in.q = unit_rows(raw.q);
  in.g = unit_rows(raw.g);
  RetrievalScore r;
  for (Eigen::Index i = 0; i < in.q.rows(); ++i) {
    std::vector<std::size_t> valid;
    std::vector<double> sim;
    for (std::size_t j = 0; j < in.gid.size(); ++j) {
      if (in.gid[j] == in.qid[static_cast<std::size_t>(i)] && in.gcam[j] == in.qcam[static_cast<std::size_t>(i)]) continue;
      valid.push_back(j);
      sim.push_back(in.g.row(static_cast<Eigen::Index>(j)).dot(in.q.row(i)));
    }
    const std::size_t m = valid.size();
    std::vector<std::size_t> position(m);
    for (std::size_t a = 0; a < m; ++a) {
      std::size_t ahead = 0;
      for (std::size_t b = 0; b < m; ++b)
        if (sim[b] > sim[a] || (sim[b] == sim[a] && b < a)) ++ahead;
      position[a] = ahead;
    }
    std::vector<bool> rel(m);
    for (std::size_t a = 0; a < m; ++a) rel[position[a]] = in.gid[valid[a]] == in.qid[static_cast<std::size_t>(i)];
    double sum = 0;
    int hits = 0;
    for (std::size_t k = 0; k < m; ++k) {
      if (!rel[k]) continue;
      int upto = 0;
      for (std::size_t t = 0; t <= k; ++t) upto += rel[t];
      sum += static_cast<double>(upto) / static_cast<double>(k + 1);
      ++hits;
    }
    if (hits == 0) {
      ++r.skipped;
      continue;
    }
    ++r.queries;
    r.mAP += sum / hits;
    r.rank1 += rel[0] ? 1.0 : 0.0;
  }
  if (r.queries) {
    r.mAP /= static_cast<double>(r.queries);
    r.rank1 /= static_cast<double>(r.queries);
  }
  return r;
}

RetrievalScore score(const Instance& in, unsigned threads = 1) {
  return rank_and_score(in.q, in.g, in.qid, in.qcam, in.gid, in.gcam, threads);
}

}  // namespace

TEST(AveragePrecision, HandCase) {
  EXPECT_NEAR(average_precision({false, true, true}), (0.5 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(average_precision({false, true, true}), 0.58333, 1e-5);
  EXPECT_EQ(average_precision({true, true}), 1.0);
  EXPECT_EQ(average_precision({false, false}), -1.0);
}

TEST(RankAndScore, PerfectRetrieval) {
  MatD q(2, 2), g(4, 2);
  q << 1, 0, 0, 1;
  g << 1, 0.01, 0, 1, 0.9, 0.1, 0.1, 0.9;
  const auto r = rank_and_score(q, g, {1, 2}, {0, 0}, {1, 2, 1, 2}, {1, 1, 2, 2});
  EXPECT_EQ(r.mAP, 1.0);
  EXPECT_EQ(r.rank1, 1.0);
  EXPECT_EQ(r.queries, 2u);
}

TEST(RankAndScore, HandCaseAfterExclusion) {
  // Gallery item 0 shares id and camera with the query and is removed; the
  // remaining ranking is [other id, same id, same id].
  MatD q(1, 2), g(4, 2);
  q << 1, 0;
  g << 1, 0, 0.9, 0.1, 0.8, 0.6, 0.5, 0.9;
  const auto r = rank_and_score(q, g, {7}, {0}, {7, 3, 7, 7}, {0, 1, 1, 2});
  EXPECT_NEAR(r.mAP, 0.58333, 1e-5);
  EXPECT_EQ(r.rank1, 0.0);
}

TEST(RankAndScore, QueryWithoutRelevantItemIsSkipped) {
  MatD q(2, 1), g(2, 1);
  q << 1, 1;
  g << 1, 1;
  const auto r = rank_and_score(q, g, {1, 2}, {0, 0}, {1, 1}, {0, 1});
  EXPECT_EQ(r.queries, 1u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.mAP, 1.0);
}

TEST(RankAndScore, TiesBrokenByGalleryIndex) {
  MatD q(1, 1), g(3, 1);
  q << 1;
  g << 2, 2, 2;
  EXPECT_EQ(rank_and_score(q, g, {1}, {0}, {2, 1, 1}, {1, 1, 1}).rank1, 0.0);
  EXPECT_EQ(rank_and_score(q, g, {1}, {0}, {1, 2, 2}, {1, 1, 1}).rank1, 1.0);
}

TEST(RankAndScore, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 200; ++t) {
    const auto in = random_instance(rng);
    const auto got = score(in);
    const auto want = brute_force(in);
    ASSERT_EQ(got.queries, want.queries) << "instance " << t;
    ASSERT_EQ(got.skipped, want.skipped) << "instance " << t;
    ASSERT_NEAR(got.mAP, want.mAP, 1e-12) << "instance " << t;
    ASSERT_EQ(got.rank1, want.rank1) << "instance " << t;
  }
}

TEST(RankAndScore, InvariantUnderOrthogonalTransformAndScaling) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 30; ++t) {
    const Eigen::Index d = 6;
    Instance in;
    in.q = gaussian_matrix<double>(5, d, 1.0, rng);
    in.g = gaussian_matrix<double>(15, d, 1.0, rng);
    std::uniform_int_distribution<int> id(0, 3), cam(0, 2);
    for (int i = 0; i < 5; ++i) in.qid.push_back(id(rng)), in.qcam.push_back(cam(rng));
    for (int i = 0; i < 15; ++i) in.gid.push_back(id(rng)), in.gcam.push_back(cam(rng));
    const auto base = score(in);

    Eigen::HouseholderQR<MatD> qr(gaussian_matrix<double>(d, d, 1.0, rng));
    const MatD rot = qr.householderQ();
    Instance rotated = in;
    rotated.q = in.q * rot;
    rotated.g = in.g * rot;
    const auto r = score(rotated);
    EXPECT_NEAR(r.mAP, base.mAP, 1e-9);
    EXPECT_NEAR(r.rank1, base.rank1, 1e-9);

    Instance scaled = in;
    scaled.q = in.q * 4.0;
    scaled.g = in.g * 4.0;
    const auto s = score(scaled);
    EXPECT_EQ(s.mAP, base.mAP);
    EXPECT_EQ(s.rank1, base.rank1);
  }
}

TEST(RankAndScore, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(8);
  Instance in;
  in.q = gaussian_matrix<double>(37, 8, 1.0, rng);
  in.g = gaussian_matrix<double>(90, 8, 1.0, rng);
  std::uniform_int_distribution<int> id(0, 9), cam(0, 3);
  for (int i = 0; i < 37; ++i) in.qid.push_back(id(rng)), in.qcam.push_back(cam(rng));
  for (int i = 0; i < 90; ++i) in.gid.push_back(id(rng)), in.gcam.push_back(cam(rng));
  const auto one = score(in, 1);
  for (unsigned t : {2u, 3u, 8u}) {
    const auto many = score(in, t);
    EXPECT_EQ(many.mAP, one.mAP);
    EXPECT_EQ(many.rank1, one.rank1);
  }
}

TEST(RankAndScore, ShapeErrors) {
  MatD q(1, 2), g(2, 3);
  q.setOnes();
  g.setOnes();
  EXPECT_THROW(rank_and_score(q, g, {1}, {0}, {1, 1}, {0, 1}), Error);
  MatD g2(2, 2);
  g2.setOnes();
  EXPECT_THROW(rank_and_score(q, g2, {1}, {0}, {1}, {0}), Error);
}

TEST(Scores, SeenAverageRecomputes) {
  std::vector<ScoreRow> rows{{1, "a", "m", 0.5, 0.25}, {1, "b", "m", 0.7, 0.75}, {1, "a", "other", 0.0, 0.0}};
  const auto avg = seen_average(rows, 1, "m", {"a", "b"});
  EXPECT_NEAR(avg.mAP, 0.6, 1e-12);
  EXPECT_NEAR(avg.rank1, 0.5, 1e-12);
  EXPECT_THROW(seen_average(rows, 1, "m", {"a", "b", "c"}), Error);
}

TEST(Scores, CsvRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / ("kadapt_scores_" + std::to_string(::getpid()) + ".csv");
  std::vector<ScoreRow> rows{{1, "a", "scheduled", 0.123456, 1.0}, {2, "seen_avg", "self_select", 0.5, 0.0}};
  write_scores_csv(rows, path);
  const auto back = read_scores_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].domain, "a");
  EXPECT_EQ(back[1].mode, "self_select");
  EXPECT_EQ(back[0].mAP, 0.123456);
  std::filesystem::remove(path);
}

TEST(Forgetting, SingleStepHasNoDrop) {
  const auto rep = forgetting_report({{1, "a", "m", 0.8, 0.9}, {1, kSeenAverage, "m", 0.8, 0.9}});
  ASSERT_EQ(rep.size(), 1u);
  EXPECT_EQ(rep[0].mAP.size(), 1u);
  EXPECT_EQ(rep[0].drop, 0.0);
}

TEST(Forgetting, DropIsPeakMinusFinal) {
  const auto rep = forgetting_report(
      {{1, "a", "m", 0.6, 0}, {2, "a", "m", 0.9, 0}, {2, "b", "m", 0.7, 0}, {3, "a", "m", 0.5, 0}, {3, "b", "m", 0.7, 0}});
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_EQ(rep[0].domain, "a");
  EXPECT_NEAR(rep[0].peak, 0.9, 1e-15);
  EXPECT_NEAR(rep[0].drop, 0.4, 1e-15);
  EXPECT_EQ(rep[1].mAP.size(), 2u);
  EXPECT_EQ(rep[1].drop, 0.0);
}
