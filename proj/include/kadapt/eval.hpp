#pragma once

// Retrieval scoring (mAP, Rank-1) under the cross-camera protocol, plus
// per-step score bookkeeping and forgetting trajectories.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "kadapt/numerics/matrix.hpp"

namespace kadapt {

struct RetrievalScore {
  double mAP = 0.0;
  double rank1 = 0.0;
  std::size_t queries = 0;  // queries that entered the averages
  std::size_t skipped = 0;  // queries without any valid relevant gallery item
};

/// Average precision of one ranked relevance list: mean of precision@k over
/// the ranks k that hold a relevant item. Returns -1 when nothing is relevant.
inline double average_precision(const std::vector<bool>& ranked_relevance) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < ranked_relevance.size(); ++k) {
    if (!ranked_relevance[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return hits == 0 ? -1.0 : sum / static_cast<double>(hits);
}

namespace detail {

inline MatD normalized_rows(const MatD& x) {
  MatD out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0) out.row(i) /= n;
  }
  return out;
}

}  // namespace detail

/// Ranks the gallery for every query by descending cosine similarity (ties by
/// gallery index), dropping items that share both identity and camera with
/// the query. `threads` > 1 splits queries across workers; the reduction
/// order is fixed, so results do not depend on the thread count.
inline RetrievalScore rank_and_score(const MatD& query, const MatD& gallery, const std::vector<int>& query_ids,
                                     const std::vector<int>& query_cams, const std::vector<int>& gallery_ids,
                                     const std::vector<int>& gallery_cams, unsigned threads = 1) {
  require(query.cols() == gallery.cols(), ErrorKind::Dimension, "query and gallery feature widths differ");
  require(static_cast<Eigen::Index>(query_ids.size()) == query.rows() && query_cams.size() == query_ids.size(),
          ErrorKind::Dimension, "one identity and camera per query row is required");
  require(static_cast<Eigen::Index>(gallery_ids.size()) == gallery.rows() && gallery_cams.size() == gallery_ids.size(),
          ErrorKind::Dimension, "one identity and camera per gallery row is required");
  const MatD q = detail::normalized_rows(query);
  const MatD g = detail::normalized_rows(gallery);
  const auto nq = static_cast<std::size_t>(q.rows());
  std::vector<double> ap(nq, -1.0), top(nq, 0.0);

  auto score = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> order;
    std::vector<bool> rel;
    for (std::size_t i = begin; i < end; ++i) {
      // Row-wise dots keep identical gallery rows exactly tied.
      Eigen::VectorXd sim(g.rows());
      for (Eigen::Index j = 0; j < g.rows(); ++j) sim(j) = g.row(j).dot(q.row(static_cast<Eigen::Index>(i)));
      order.clear();
      for (std::size_t j = 0; j < gallery_ids.size(); ++j)
        if (!(gallery_ids[j] == query_ids[i] && gallery_cams[j] == query_cams[i])) order.push_back(j);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sim(static_cast<Eigen::Index>(a)) > sim(static_cast<Eigen::Index>(b));
      });
      rel.assign(order.size(), false);
      for (std::size_t k = 0; k < order.size(); ++k) rel[k] = gallery_ids[order[k]] == query_ids[i];
      ap[i] = average_precision(rel);
      top[i] = (!rel.empty() && rel[0]) ? 1.0 : 0.0;
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(nq, 1))));
  if (workers == 1) {
    score(0, nq);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (nq + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = std::min(nq, w * chunk), e = std::min(nq, b + chunk);
      pool.emplace_back(score, b, e);
    }
    for (auto& t : pool) t.join();
  }

  RetrievalScore r;
  for (std::size_t i = 0; i < nq; ++i) {
    if (ap[i] < 0) {
      ++r.skipped;
      continue;
    }
    ++r.queries;
    r.mAP += ap[i];
    r.rank1 += top[i];
  }
  if (r.queries > 0) {
    r.mAP /= static_cast<double>(r.queries);
    r.rank1 /= static_cast<double>(r.queries);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Score tables
// ---------------------------------------------------------------------------

struct ScoreRow {
  int step = 0;
  std::string domain;
  std::string mode;
  double mAP = 0.0;
  double rank1 = 0.0;
};

inline constexpr const char* kSeenAverage = "seen_avg";

/// Arithmetic mean of the per-domain rows of (step, mode) over `domains`.
inline ScoreRow seen_average(const std::vector<ScoreRow>& rows, int step, const std::string& mode,
                             const std::vector<std::string>& domains) {
  ScoreRow avg{step, kSeenAverage, mode, 0.0, 0.0};
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.step != step || r.mode != mode) continue;
    if (std::find(domains.begin(), domains.end(), r.domain) == domains.end()) continue;
    avg.mAP += r.mAP;
    avg.rank1 += r.rank1;
    ++n;
  }
  require(n == domains.size(), ErrorKind::State, "missing per-domain scores for the seen average");
  if (n > 0) {
    avg.mAP /= static_cast<double>(n);
    avg.rank1 /= static_cast<double>(n);
  }
  return avg;
}

inline std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_scores_csv(const std::vector<ScoreRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "step,domain,mode,mAP,rank1\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.domain << ',' << r.mode << ',' << format_score(r.mAP) << ',' << format_score(r.rank1)
        << '\n';
}

inline std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,domain,mode,mAP,rank1") fail(ErrorKind::Format, "bad scores.csv header");
  std::vector<ScoreRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 5) fail(ErrorKind::Format, "malformed scores.csv row: " + line);
    try {
      rows.push_back({std::stoi(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4])});
    } catch (const std::logic_error&) {
      fail(ErrorKind::Format, "malformed scores.csv row: " + line);
    }
  }
  return rows;
}

struct Trajectory {
  std::string domain;
  std::string mode;
  std::vector<std::pair<int, double>> mAP;  // (step, value) from the domain's first evaluation on
  double peak = 0.0;
  double final_value = 0.0;
  double drop = 0.0;  // peak - final
};

/// One trajectory per (mode, domain) in first-appearance order; the seen
/// average is not a domain and is skipped.
inline std::vector<Trajectory> forgetting_report(const std::vector<ScoreRow>& rows) {
  std::vector<Trajectory> out;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& r : rows) {
    if (r.domain == kSeenAverage) continue;
    const auto key = std::make_pair(r.mode, r.domain);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({r.domain, r.mode, {}, 0.0, 0.0, 0.0});
    }
    out[it->second].mAP.emplace_back(r.step, r.mAP);
  }
  for (auto& t : out) {
    std::stable_sort(t.mAP.begin(), t.mAP.end(), [](auto& a, auto& b) { return a.first < b.first; });
    t.peak = t.mAP.front().second;
    for (const auto& [s, v] : t.mAP) t.peak = std::max(t.peak, v);
    t.final_value = t.mAP.back().second;
    t.drop = t.peak - t.final_value;
  }
  return out;
}

inline void write_forgetting_csv(const std::vector<Trajectory>& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "mode,domain,step,mAP,peak,final,drop\n";
  for (const auto& t : report)
    for (const auto& [step, v] : t.mAP)
      out << t.mode << ',' << t.domain << ',' << step << ',' << format_score(v) << ',' << format_score(t.peak) << ','
          << format_score(t.final_value) << ',' << format_score(t.drop) << '\n';
}

}  // namespace kadapt
