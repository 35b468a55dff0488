#pragma once

// Lifelong sequence: per step, register statistics and adapters, train them,
// and evaluate with distance-driven adapter selection. Also the sequential
// full fine-tuning baseline used for forgetting comparisons.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "kadapt/data.hpp"
#include "kadapt/encoder.hpp"
#include "kadapt/eval.hpp"
#include "kadapt/selector.hpp"
#include "kadapt/stats.hpp"
#include "kadapt/training.hpp"

namespace kadapt {

struct AdapterConfig {
  int rank = 64;
  double alpha = 256.0;
};

/// Everything that shapes a lifelong run except the data itself.
struct MethodConfig {
  EncoderConfig encoder;
  AdapterConfig adapter;
  ScheduleConfig schedule;  // total_layers is taken from encoder.blocks
  std::optional<double> fixed_temperature;  // replaces the schedule at every block when set
  TrainConfig train;
  double validation_fraction = 0.15;
  std::uint64_t seed = 1;

  ScheduleConfig block_schedule() const {
    ScheduleConfig s = schedule;
    s.total_layers = encoder.blocks;
    return s;
  }

  /// Soft mixing used for training and for the method's own evaluation.
  MixPolicy policy() const {
    return fixed_temperature ? MixPolicy::fixed(*fixed_temperature) : MixPolicy::scheduled(block_schedule());
  }

  std::string policy_name() const { return fixed_temperature ? "fixed" : "scheduled"; }

  void validate() const {
    encoder.validate();
    train.validate();
    block_schedule().validate();
    if (fixed_temperature)
      require(*fixed_temperature > 0, ErrorKind::Config, "fixed temperature must be > 0");
    require(adapter.rank >= 1, ErrorKind::Config, "adapter rank must be >= 1");
    require(adapter.rank <= encoder.d_model, ErrorKind::Config, "adapter rank must not exceed d_model");
    require(adapter.alpha > 0, ErrorKind::Config, "adapter alpha must be > 0");
    require(validation_fraction > 0 && validation_fraction < 1, ErrorKind::Config,
            "validation_fraction must be in (0, 1)");
  }
};

// Seed tags keep the random streams of different stages independent.
enum SeedTag : std::uint64_t {
  kSeedEncoderInit = 0xE1,
  kSeedPretrain = 0xE2,
  kSeedValidation = 0xE3,
  kSeedAdapter = 0xE4,
  kSeedStage1 = 0xE5,
  kSeedStage2 = 0xE6,
  kSeedStatsSample = 0xE7,
};

inline std::uint64_t stage_seed(std::uint64_t master, SeedTag tag, std::uint64_t step = 0) {
  return mix_seed(mix_seed(master, tag), step);
}

struct LifelongState {
  Encoder<float> encoder;
  PrototypeBank prototypes;
  std::vector<GaussianStats> stats;  // registration order, one per adapter
  std::vector<std::string> domains;
  std::set<int> identities;
  TrainLog log;

  std::size_t steps() const { return domains.size(); }
};

/// Training rows of `d` split into (train, validation): per identity, a seeded
/// `fraction` of its training samples (at least one) is held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(const DomainDataset& d,
                                                                                       double fraction,
                                                                                       std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i : d.indices(Split::Train)) by_id[d.identity[i]].push_back(i);
  std::vector<std::size_t> train, val;
  std::mt19937_64 rng(seed);
  for (auto& [id, rows] : by_id) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n = static_cast<std::size_t>(
        std::max<long>(1, std::lround(fraction * static_cast<double>(rows.size()))));
    require(n < rows.size(), ErrorKind::Data, "identity " + std::to_string(id) + " has too few samples to split");
    val.insert(val.end(), rows.begin(), rows.begin() + static_cast<long>(n));
    train.insert(train.end(), rows.begin() + static_cast<long>(n), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

/// Features of the frozen base encoder; the space all statistics live in.
inline MatD stats_features(const Encoder<float>& enc, const MatF& x) {
  return encode_chunked(strip_adapters(enc), x).cast<double>();
}

/// Builds the encoder and pre-trains its base on the base corpus.
inline LifelongState init_state(const MethodConfig& cfg, const DomainDataset& base_domain, double* accuracy = nullptr) {
  cfg.validate();
  require(base_domain.x.cols() == cfg.encoder.input_dim(), ErrorKind::Dimension,
          "base corpus width does not match the encoder input");
  LifelongState st;
  st.encoder = make_encoder<float>(cfg.encoder, stage_seed(cfg.seed, kSeedEncoderInit));
  const auto r = pretrain_base(st.encoder, base_domain.x, base_domain.identity, cfg.train,
                               stage_seed(cfg.seed, kSeedPretrain));
  if (accuracy) *accuracy = r.train_accuracy;
  return st;
}

struct StepReport {
  std::vector<double> distances;
  std::vector<MixWeights> training_mix;
  double prototype_accuracy = 0.0;
};

/// One lifelong step on a new domain. Only this domain's samples are used.
inline StepReport run_step(LifelongState& st, const DomainDataset& d, const MethodConfig& cfg) {
  cfg.validate();
  require(st.encoder.frozen, ErrorKind::State, "the base encoder must be pre-trained and frozen first");
  require(d.x.cols() == cfg.encoder.input_dim(), ErrorKind::Dimension, d.name + ": width does not match the encoder");
  require(std::find(st.domains.begin(), st.domains.end(), d.name) == st.domains.end(), ErrorKind::Protocol,
          "domain " + d.name + " was already learned");
  for (int id : d.identity)
    if (st.identities.count(id))
      fail(ErrorKind::Protocol, d.name + ": identity " + std::to_string(id) + " overlaps an earlier step");
  const auto step = static_cast<std::uint64_t>(st.steps() + 1);

  const auto [train_rows, val_rows] = validation_split(d, cfg.validation_fraction, stage_seed(cfg.seed, kSeedValidation, step));
  const SplitView train = view(d, train_rows);
  const SplitView val = view(d, val_rows);

  StepReport rep;
  const GaussianStats own = fit_stats(stats_features(st.encoder, val.x));
  std::vector<GaussianStats> registered = st.stats;
  registered.push_back(own);
  rep.distances = w2_distances(own, registered);
  rep.training_mix = block_mixing(rep.distances, cfg.policy(), static_cast<int>(st.encoder.blocks.size()));

  const std::size_t adapter = add_adapters(st.encoder, cfg.adapter.rank, cfg.adapter.alpha,
                                           stage_seed(cfg.seed, kSeedAdapter, step));
  std::vector<int> ids(train.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  const MatF frozen_features = encode_chunked(st.encoder, train.x, rep.training_mix);
  auto s1 = stage1_train_prototypes(frozen_features, train.identity, ids, cfg.train,
                                    stage_seed(cfg.seed, kSeedStage1, step), &st.log, static_cast<int>(step));
  rep.prototype_accuracy = s1.accuracy;
  stage2_train(st.encoder, {adapter}, rep.training_mix, s1.prototypes, train.x, train.identity, cfg.train,
               stage_seed(cfg.seed, kSeedStage2, step), &st.log, static_cast<int>(step));

  st.prototypes.steps.push_back(std::move(s1.prototypes));
  st.stats.push_back(own);
  st.domains.push_back(d.name);
  st.identities.insert(d.identity.begin(), d.identity.end());
  return rep;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Statistics of a test pool, optionally from a seeded subset of `limit` rows.
inline GaussianStats test_stats(const LifelongState& st, const MatF& pool, std::optional<int> limit,
                                std::uint64_t seed) {
  if (!limit) return fit_stats(stats_features(st.encoder, pool));
  require(*limit >= 2, ErrorKind::InsufficientSamples, "at least 2 samples are needed for statistics");
  require(*limit <= pool.rows(), ErrorKind::InsufficientSamples,
          "requested " + std::to_string(*limit) + " statistics samples from a pool of " + std::to_string(pool.rows()));
  std::vector<std::size_t> rows(static_cast<std::size_t>(pool.rows()));
  std::iota(rows.begin(), rows.end(), 0u);
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(static_cast<std::size_t>(*limit));
  std::sort(rows.begin(), rows.end());
  return fit_stats(stats_features(st.encoder, gather(pool, rows)));
}

inline std::vector<double> domain_distances(const LifelongState& st, const GaussianStats& query) {
  require(!st.stats.empty(), ErrorKind::State, "no domains have been learned yet");
  return w2_distances(query, st.stats);
}

/// Features with adapters merged once for the given per-block mix.
inline MatF infer_features(const LifelongState& st, const MatF& x, const std::vector<MixWeights>& mix) {
  return encode_chunked(materialize(st.encoder, mix), x);
}

struct DomainEval {
  RetrievalScore score;
  std::vector<double> distances;
  std::vector<MixWeights> mix;
};

struct EvalOptions {
  std::optional<int> stats_samples;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

inline RetrievalScore score_features(const MatF& fq, const MatF& fg, const SplitView& q, const SplitView& g,
                                     unsigned threads) {
  return rank_and_score(fq.cast<double>(), fg.cast<double>(), q.identity, q.camera, g.identity, g.camera, threads);
}

/// Statistics on query and gallery together, selection, merge, retrieval.
inline DomainEval evaluate_domain(const LifelongState& st, const DomainDataset& d, const MixPolicy& policy,
                                  const EvalOptions& opt = {}) {
  const SplitView q = view(d, Split::Query);
  const SplitView g = view(d, Split::Gallery);
  MatF pool(q.x.rows() + g.x.rows(), d.x.cols());
  pool << q.x, g.x;
  DomainEval e;
  e.distances = domain_distances(st, test_stats(st, pool, opt.stats_samples, opt.seed));
  e.mix = block_mixing(e.distances, policy, static_cast<int>(st.encoder.blocks.size()));
  const Encoder<float> merged = materialize(st.encoder, e.mix);
  e.score = score_features(encode_chunked(merged, q.x), encode_chunked(merged, g.x), q, g, opt.threads);
  return e;
}

/// Row i: mixing weights of domain i's test pool against every stored
/// domain at temperature `tau`.
inline MatD similarity_matrix(const LifelongState& st, const std::vector<const DomainDataset*>& datasets, double tau) {
  require(!st.stats.empty(), ErrorKind::State, "no statistics registered");
  MatD m(static_cast<Eigen::Index>(datasets.size()), static_cast<Eigen::Index>(st.stats.size()));
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto& d = *datasets[i];
    if (std::find(st.domains.begin(), st.domains.end(), d.name) == st.domains.end())
      fail(ErrorKind::State, "no statistics registered for domain " + d.name);
    const MatF pool = view(d, [&] {
                        auto r = d.indices(Split::Query);
                        const auto gr = d.indices(Split::Gallery);
                        r.insert(r.end(), gr.begin(), gr.end());
                        return r;
                      }()).x;
    const MixWeights s = similarity(domain_distances(st, test_stats(st, pool, std::nullopt, 0)), tau);
    for (std::size_t j = 0; j < s.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s[j];
  }
  return m;
}

/// Named selection policies used in score tables.
inline const std::string kModeSelfSelect = "self_select";
inline const std::string kModeBaseline = "finetune";

/// Scores every seen domain (and any unseen ones) under each policy, plus
/// the seen average per policy.
inline std::vector<ScoreRow> evaluate_all(const LifelongState& st, const std::vector<const DomainDataset*>& seen,
                                          const std::vector<const DomainDataset*>& unseen,
                                          const std::vector<std::pair<std::string, MixPolicy>>& modes,
                                          const EvalOptions& opt = {}) {
  std::vector<ScoreRow> rows;
  const int step = static_cast<int>(st.steps());
  for (const auto& [mode, policy] : modes) {
    std::vector<std::string> names;
    for (const auto* d : seen) {
      const auto e = evaluate_domain(st, *d, policy, opt);
      rows.push_back({step, d->name, mode, e.score.mAP, e.score.rank1});
      names.push_back(d->name);
    }
    if (!seen.empty()) rows.push_back(seen_average(rows, step, mode, names));
    for (const auto* d : unseen) {
      const auto e = evaluate_domain(st, *d, policy, opt);
      rows.push_back({step, d->name, mode, e.score.mAP, e.score.rank1});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sequential full fine-tuning baseline
// ---------------------------------------------------------------------------

struct BaselineState {
  Encoder<float> model;
  PrototypeBank prototypes;
  std::vector<std::string> domains;
  std::set<int> identities;
  TrainLog log;
};

/// Starts from the same pre-trained base, then updates every base tensor at
/// each step with the same two-stage objective and no adapters.
inline BaselineState baseline_from(const LifelongState& pretrained) {
  BaselineState b;
  b.model = strip_adapters(pretrained.encoder);
  b.model.frozen = false;
  return b;
}

inline void baseline_step(BaselineState& b, const DomainDataset& d, const MethodConfig& cfg) {
  cfg.validate();
  for (int id : d.identity)
    if (b.identities.count(id))
      fail(ErrorKind::Protocol, d.name + ": identity " + std::to_string(id) + " overlaps an earlier step");
  const auto step = static_cast<std::uint64_t>(b.domains.size() + 1);
  const auto train_rows = validation_split(d, cfg.validation_fraction, stage_seed(cfg.seed, kSeedValidation, step)).first;
  const SplitView train = view(d, train_rows);
  std::vector<int> ids(train.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  auto s1 = stage1_train_prototypes(encode_chunked(b.model, train.x), train.identity, ids, cfg.train,
                                    stage_seed(cfg.seed, kSeedStage1, step), &b.log, static_cast<int>(step));
  stage2_train(b.model, {}, {}, s1.prototypes, train.x, train.identity, cfg.train,
               stage_seed(cfg.seed, kSeedStage2, step), &b.log, static_cast<int>(step));
  b.prototypes.steps.push_back(std::move(s1.prototypes));
  b.domains.push_back(d.name);
  b.identities.insert(d.identity.begin(), d.identity.end());
}

inline std::vector<ScoreRow> evaluate_baseline(const BaselineState& b, const std::vector<const DomainDataset*>& seen,
                                               const std::vector<const DomainDataset*>& unseen, unsigned threads = 1) {
  std::vector<ScoreRow> rows;
  const int step = static_cast<int>(b.domains.size());
  auto one = [&](const DomainDataset& d) {
    const SplitView q = view(d, Split::Query);
    const SplitView g = view(d, Split::Gallery);
    const auto s = score_features(encode_chunked(b.model, q.x), encode_chunked(b.model, g.x), q, g, threads);
    rows.push_back({step, d.name, kModeBaseline, s.mAP, s.rank1});
  };
  std::vector<std::string> names;
  for (const auto* d : seen) {
    one(*d);
    names.push_back(d->name);
  }
  if (!seen.empty()) rows.push_back(seen_average(rows, step, kModeBaseline, names));
  for (const auto* d : unseen) one(*d);
  return rows;
}

}  // namespace kadapt
