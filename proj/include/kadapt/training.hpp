#pragma once

// Two-stage optimization for one lifelong step: identity prototypes first,
// then the step's adapters against the frozen prototypes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "kadapt/encoder.hpp"

namespace kadapt {

struct TrainConfig {
  int stage1_iterations = 300;
  double stage1_lr = 3.5e-4;
  int stage2_iterations = 600;
  double stage2_lr = 1e-3;
  int p_ids = 8;
  int k_instances = 4;
  double margin = 0.3;
  double weight_i2tce = 1.0;
  double weight_triplet = 1.0;
  double weight_id = 1.0;
  double init_temperature = 0.07;
  int pretrain_iterations = 1000;
  double pretrain_lr = 1e-3;

  int batch_size() const { return p_ids * k_instances; }

  void validate() const {
    require(stage1_iterations >= 0 && stage2_iterations >= 0 && pretrain_iterations >= 0, ErrorKind::Config,
            "iteration counts must be non-negative");
    require(stage1_lr > 0 && stage2_lr > 0 && pretrain_lr > 0, ErrorKind::Config, "learning rates must be > 0");
    require(p_ids >= 1 && k_instances >= 2, ErrorKind::Config, "batches need p_ids >= 1 and k_instances >= 2");
    require(margin >= 0.0, ErrorKind::Config, "triplet margin must be >= 0");
    require(weight_i2tce >= 0 && weight_triplet >= 0 && weight_id >= 0, ErrorKind::Config,
            "loss weights must be >= 0");
    require(init_temperature > 0.0, ErrorKind::Config, "initial temperature must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  /// Applies one update using the tape gradients of every binding.
  void step(const ad::Tape<T>& tape, const std::vector<Binding<T>>& bindings) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (const auto& b : bindings) {
      const Mat<T> g = tape.grad(b.var);
      auto [it, inserted] = state_.try_emplace(b.target);
      if (inserted) {
        it->second.m = Mat<T>::Zero(g.rows(), g.cols());
        it->second.v = Mat<T>::Zero(g.rows(), g.cols());
      }
      auto& s = it->second;
      s.m = static_cast<T>(b1_) * s.m + static_cast<T>(1.0 - b1_) * g;
      s.v = static_cast<T>(b2_) * s.v + static_cast<T>(1.0 - b2_) * g.cwiseProduct(g);
      const auto mhat = s.m.array() / static_cast<T>(c1);
      const auto vhat = s.v.array() / static_cast<T>(c2);
      b.target->array() -= static_cast<T>(lr_) * mhat / (vhat.sqrt() + static_cast<T>(eps_));
    }
  }

 private:
  struct State {
    Mat<T> m, v;
  };
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<const Mat<T>*, State> state_;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// P identities with K distinct instances each; deterministic in `seed`.
inline std::vector<std::size_t> pk_sample(const std::vector<int>& labels, int p_ids, int k_instances,
                                          std::uint64_t seed) {
  require(p_ids >= 1 && k_instances >= 1, ErrorKind::Sampler, "P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [id, idx] : by_id)
    if (static_cast<int>(idx.size()) >= k_instances) eligible.push_back(id);
  require(static_cast<int>(eligible.size()) >= p_ids, ErrorKind::Sampler,
          "need " + std::to_string(p_ids) + " identities with >= " + std::to_string(k_instances) +
              " instances, found " + std::to_string(eligible.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<std::size_t> batch;
  for (int p = 0; p < p_ids; ++p) {
    auto idx = by_id[eligible[static_cast<std::size_t>(p)]];
    std::shuffle(idx.begin(), idx.end(), rng);
    batch.insert(batch.end(), idx.begin(), idx.begin() + k_instances);
  }
  return batch;
}

template <typename T>
Mat<T> gather(const Mat<T>& x, const std::vector<std::size_t>& rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

template <typename V>
std::vector<V> gather(const std::vector<V>& x, const std::vector<std::size_t>& rows) {
  std::vector<V> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(x[r]);
  return out;
}

// ---------------------------------------------------------------------------
// Prototypes and losses
// ---------------------------------------------------------------------------

/// Learnable identity embeddings for one lifelong step.
struct PrototypeSet {
  std::vector<int> identities;  // sorted global identity labels, C(t)
  MatF prototypes;              // C x d
  MatF log_scale;               // 1 x 1, logit scale = exp(log_scale)

  int local(int identity) const {
    const auto it = std::lower_bound(identities.begin(), identities.end(), identity);
    if (it == identities.end() || *it != identity)
      fail(ErrorKind::Label, "identity " + std::to_string(identity) + " is not in this step's label space");
    return static_cast<int>(it - identities.begin());
  }

  std::vector<int> local(const std::vector<int>& ids) const {
    std::vector<int> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(local(id));
    return out;
  }

  double scale() const { return std::exp(static_cast<double>(log_scale(0, 0))); }
};

struct PrototypeBank {
  std::vector<PrototypeSet> steps;
};

/// Image-to-prototype contrastive term: cross-entropy of scaled cosine logits.
template <typename T>
ad::Var<T> loss_i2t(ad::Var<T> features, ad::Var<T> prototypes, ad::Var<T> log_scale, const std::vector<int>& labels) {
  auto logits = ad::matmul_nt(ad::l2_normalize_rows(features), ad::l2_normalize_rows(prototypes));
  return ad::cross_entropy(ad::mul_scalar(logits, ad::exp(log_scale)), labels);
}

/// Prototype-to-image contrastive term: each prototype present in the batch
/// scores every batch feature; the loss is -log of the probability mass it
/// assigns to its own identity's instances, averaged over present prototypes.
template <typename T>
ad::Var<T> loss_t2i(ad::Var<T> features, ad::Var<T> prototypes, ad::Var<T> log_scale, const std::vector<int>& labels) {
  std::vector<int> present(labels);
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  Mat<T> mask = Mat<T>::Zero(static_cast<Eigen::Index>(present.size()), static_cast<Eigen::Index>(labels.size()));
  for (std::size_t u = 0; u < present.size(); ++u)
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == present[u]) mask(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(i)) = T(1);
  auto p = ad::gather_rows(ad::l2_normalize_rows(prototypes), present);
  auto logits = ad::mul_scalar(ad::matmul_nt(p, ad::l2_normalize_rows(features)), ad::exp(log_scale));
  auto mass = ad::sum_rows(ad::mul_const(ad::softmax_rows(logits), mask));
  return ad::scale(ad::mean_all(ad::log(mass)), -1.0);
}

/// Cross-entropy of features against fixed prototypes with a fixed logit scale.
template <typename T>
ad::Var<T> loss_i2tce(ad::Var<T> features, ad::Var<T> prototypes, double logit_scale, const std::vector<int>& labels) {
  auto logits = ad::matmul_nt(ad::l2_normalize_rows(features), ad::l2_normalize_rows(prototypes));
  return ad::cross_entropy(ad::scale(logits, logit_scale), labels);
}

template <typename T>
ad::Var<T> loss_triplet(ad::Var<T> features, const std::vector<int>& labels, double margin) {
  return ad::batch_hard_triplet(ad::pairwise_distance(features), labels, margin);
}

template <typename T>
ad::Var<T> loss_id(ad::Var<T> features, ad::Var<T> classifier, const std::vector<int>& labels) {
  return ad::cross_entropy(ad::matmul_nt(features, classifier), labels);
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

struct LogRow {
  int step = 0;
  int stage = 0;
  int iteration = 0;
  double i2t = std::numeric_limits<double>::quiet_NaN();
  double t2i = std::numeric_limits<double>::quiet_NaN();
  double i2tce = std::numeric_limits<double>::quiet_NaN();
  double triplet = std::numeric_limits<double>::quiet_NaN();
  double id = std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
};

struct TrainLog {
  std::vector<LogRow> rows;

  /// Rows of one (step, stage) in iteration order.
  std::vector<double> totals(int step, int stage) const {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.step == step && r.stage == stage) out.push_back(r.total);
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "step,stage,iteration,loss_i2t,loss_t2i,loss_i2tce,loss_tri,loss_id,total\n";
    auto field = [&](double v) {
      if (std::isnan(v)) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      return std::string(buf);
    };
    for (const auto& r : rows)
      out << r.step << ',' << r.stage << ',' << r.iteration << ',' << field(r.i2t) << ',' << field(r.t2i) << ','
          << field(r.i2tce) << ',' << field(r.triplet) << ',' << field(r.id) << ',' << field(r.total) << '\n';
  }
};

/// Mean of the first and last `window` entries.
inline std::pair<double, double> smoothed_ends(const std::vector<double>& v, std::size_t window = 10) {
  require(v.size() >= window, ErrorKind::EmptyInput, "loss curve shorter than the smoothing window");
  const double head = std::accumulate(v.begin(), v.begin() + static_cast<long>(window), 0.0) / window;
  const double tail = std::accumulate(v.end() - static_cast<long>(window), v.end(), 0.0) / window;
  return {head, tail};
}

// ---------------------------------------------------------------------------
// Stage 1: prototypes on frozen features
// ---------------------------------------------------------------------------

/// Class-mean initialization, then symmetric contrastive training with the
/// logit scale as a second learnable parameter.
inline PrototypeSet init_prototypes(const MatF& features, const std::vector<int>& labels,
                                    const std::vector<int>& identities, double init_temperature) {
  PrototypeSet set;
  set.identities = identities;
  std::sort(set.identities.begin(), set.identities.end());
  require(std::adjacent_find(set.identities.begin(), set.identities.end()) == set.identities.end(),
          ErrorKind::Label, "duplicate identity in label space");
  require(!set.identities.empty(), ErrorKind::EmptyInput, "empty label space");
  const auto local = set.local(labels);
  set.prototypes = MatF::Zero(static_cast<Eigen::Index>(set.identities.size()), features.cols());
  std::vector<int> counts(set.identities.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    set.prototypes.row(local[i]) += features.row(static_cast<Eigen::Index>(i)).normalized();
    ++counts[static_cast<std::size_t>(local[i])];
  }
  for (std::size_t c = 0; c < counts.size(); ++c)
    require(counts[c] > 0, ErrorKind::Label,
            "identity " + std::to_string(set.identities[c]) + " has no training samples");
  set.prototypes.rowwise().normalize();
  set.log_scale = MatF::Constant(1, 1, static_cast<float>(std::log(1.0 / init_temperature)));
  return set;
}

struct Stage1Result {
  PrototypeSet prototypes;
  double accuracy = 0.0;  // nearest-prototype accuracy on the training features
};

inline double prototype_accuracy(const PrototypeSet& set, const MatF& features, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const auto local = set.local(labels);
  MatF f = features;
  f.rowwise().normalize();
  MatF p = set.prototypes;
  p.rowwise().normalize();
  const MatF sim = f * p.transpose();
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = 0;
    sim.row(i).maxCoeff(&best);
    if (best == local[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline Stage1Result stage1_train_prototypes(const MatF& features, const std::vector<int>& labels,
                                            const std::vector<int>& identities, const TrainConfig& cfg,
                                            std::uint64_t seed, TrainLog* log = nullptr, int step = 0) {
  cfg.validate();
  require(features.rows() == static_cast<Eigen::Index>(labels.size()), ErrorKind::Dimension,
          "one label per feature row is required");
  Stage1Result r;
  r.prototypes = init_prototypes(features, labels, identities, cfg.init_temperature);
  Adam<float> opt(cfg.stage1_lr);
  const int p_ids = std::min<int>(cfg.p_ids, static_cast<int>(r.prototypes.identities.size()));
  const float max_log_scale = static_cast<float>(std::log(100.0));
  for (int it = 0; it < cfg.stage1_iterations; ++it) {
    const auto batch = pk_sample(labels, p_ids, cfg.k_instances, mix_seed(seed, static_cast<std::uint64_t>(it)));
    const auto y = r.prototypes.local(gather(labels, batch));
    ad::Tape<float> tape;
    std::vector<Binding<float>> bindings;
    auto bind = recording_binder(bindings);
    auto f = tape.constant(gather(features, batch));
    auto protos = bind(tape, r.prototypes.prototypes);
    auto ls = bind(tape, r.prototypes.log_scale);
    auto li = loss_i2t(f, protos, ls, y);
    auto lt = loss_t2i(f, protos, ls, y);
    auto total = ad::add(li, lt);
    tape.backward(total);
    opt.step(tape, bindings);
    r.prototypes.log_scale(0, 0) = std::min(r.prototypes.log_scale(0, 0), max_log_scale);
    if (log) {
      LogRow row;
      row.step = step;
      row.stage = 1;
      row.iteration = it;
      row.i2t = li.value()(0, 0);
      row.t2i = lt.value()(0, 0);
      row.total = total.value()(0, 0);
      log->rows.push_back(row);
    }
  }
  r.accuracy = prototype_accuracy(r.prototypes, features, labels);
  return r;
}

// ---------------------------------------------------------------------------
// Stage 2: adapter (or full-network) training against frozen prototypes
// ---------------------------------------------------------------------------

struct Stage2Target {
  std::optional<std::size_t> adapter;  // train this adapter; otherwise the whole base network
};

struct Stage2Result {
  MatF classifier;  // step-local ID head, C x d
  double final_total = 0.0;
};

inline Stage2Result stage2_train(Encoder<float>& enc, const Stage2Target& target, const std::vector<MixWeights>& mix,
                                 const PrototypeSet& protos, const MatF& x, const std::vector<int>& labels,
                                 const TrainConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr, int step = 0) {
  cfg.validate();
  require(x.rows() == static_cast<Eigen::Index>(labels.size()), ErrorKind::Dimension,
          "one label per sample row is required");
  const auto classes = static_cast<Eigen::Index>(protos.identities.size());
  Stage2Result r;
  r.classifier = gaussian_matrix<float>(classes, enc.config.d_model, 0.01, mix_seed(seed, 0xC1A5));
  Adam<float> opt(cfg.stage2_lr);
  const MatF frozen_protos = protos.prototypes;
  const double logit_scale = protos.scale();
  const int p_ids = std::min<int>(cfg.p_ids, static_cast<int>(classes));
  for (int it = 0; it < cfg.stage2_iterations; ++it) {
    const auto batch = pk_sample(labels, p_ids, cfg.k_instances, mix_seed(seed, 1000003u + static_cast<std::uint64_t>(it)));
    const auto y = protos.local(gather(labels, batch));
    ad::Tape<float> tape;
    std::vector<Binding<float>> bindings;
    ForwardOptions<float> opt_fwd;
    opt_fwd.mix = mix;
    opt_fwd.train_adapter = target.adapter;
    opt_fwd.train_base = !target.adapter.has_value();
    opt_fwd.bind = recording_binder(bindings);
    auto f = encode_on_tape(tape, enc, gather(x, batch), opt_fwd);
    auto cls = opt_fwd.bind(tape, r.classifier);
    auto lce = loss_i2tce(f, tape.constant(frozen_protos), logit_scale, y);
    auto ltri = loss_triplet(f, y, cfg.margin);
    auto lid = loss_id(f, cls, y);
    auto total = ad::add(ad::add(ad::scale(lce, cfg.weight_i2tce), ad::scale(ltri, cfg.weight_triplet)),
                         ad::scale(lid, cfg.weight_id));
    tape.backward(total);
    opt.step(tape, bindings);
    r.final_total = total.value()(0, 0);
    if (log) {
      LogRow row;
      row.step = step;
      row.stage = 2;
      row.iteration = it;
      row.i2tce = lce.value()(0, 0);
      row.triplet = ltri.value()(0, 0);
      row.id = lid.value()(0, 0);
      row.total = r.final_total;
      log->rows.push_back(row);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Base pre-training
// ---------------------------------------------------------------------------

struct PretrainResult {
  MatF classifier;
  double train_accuracy = 0.0;
};

inline double classifier_accuracy(const Encoder<float>& enc, const MatF& classifier, const MatF& x,
                                  const std::vector<int>& local_labels) {
  const MatF logits = encode_chunked(enc, x) * classifier.transpose();
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == local_labels[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(std::max<std::size_t>(local_labels.size(), 1));
}

/// ID cross-entropy training of every base tensor on the base corpus; the
/// encoder is frozen afterwards.
inline PretrainResult pretrain_base(Encoder<float>& enc, const MatF& x, const std::vector<int>& labels,
                                    const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(x.rows() > 0 && !labels.empty(), ErrorKind::Data, "empty base corpus");
  require(x.rows() == static_cast<Eigen::Index>(labels.size()), ErrorKind::Dimension,
          "one label per sample row is required");
  require(enc.adapter_count() == 0, ErrorKind::State, "pre-training expects an encoder without adapters");
  std::vector<int> ids(labels);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<int> local;
  for (int l : labels) local.push_back(static_cast<int>(std::lower_bound(ids.begin(), ids.end(), l) - ids.begin()));

  PretrainResult r;
  r.classifier = gaussian_matrix<float>(static_cast<Eigen::Index>(ids.size()), enc.config.d_model, 0.01,
                                        mix_seed(seed, 0xBA5E));
  Adam<float> opt(cfg.pretrain_lr);
  const int p_ids = std::min<int>(cfg.p_ids, static_cast<int>(ids.size()));
  for (int it = 0; it < cfg.pretrain_iterations; ++it) {
    const auto batch = pk_sample(labels, p_ids, cfg.k_instances, mix_seed(seed, static_cast<std::uint64_t>(it)));
    ad::Tape<float> tape;
    std::vector<Binding<float>> bindings;
    ForwardOptions<float> fo;
    fo.train_base = true;
    fo.bind = recording_binder(bindings);
    auto f = encode_on_tape(tape, enc, gather(x, batch), fo);
    auto loss = loss_id(f, fo.bind(tape, r.classifier), gather(local, batch));
    tape.backward(loss);
    opt.step(tape, bindings);
  }
  enc.frozen = true;
  r.train_accuracy = classifier_accuracy(enc, r.classifier, x, local);
  return r;
}

}  // namespace kadapt
