#pragma once

// End-to-end recipes shared by the command-line tool and the acceptance
// harness: corpus generation and loading, the full lifelong sequence with
// per-step evaluation, and the fine-tuning baseline.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "kadapt/checkpoint.hpp"
#include "kadapt/config.hpp"
#include "kadapt/data.hpp"
#include "kadapt/eval.hpp"
#include "kadapt/lifelong.hpp"

namespace kadapt {

struct Corpus {
  DomainDataset base;
  std::vector<DomainDataset> sequence;
  std::vector<DomainDataset> unseen;

  std::vector<const DomainDataset*> seen_prefix(std::size_t n) const {
    std::vector<const DomainDataset*> out;
    for (std::size_t i = 0; i < n && i < sequence.size(); ++i) out.push_back(&sequence[i]);
    return out;
  }
  std::vector<const DomainDataset*> unseen_all() const {
    std::vector<const DomainDataset*> out;
    for (const auto& d : unseen) out.push_back(&d);
    return out;
  }
  const DomainDataset& find(const std::string& name) const {
    if (base.name == name) return base;
    for (const auto& d : sequence)
      if (d.name == name) return d;
    for (const auto& d : unseen)
      if (d.name == name) return d;
    fail(ErrorKind::Config, "unknown domain " + name);
  }
};

inline Corpus generate_corpus(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto offsets = identity_offsets(cfg.data);
  const auto specs = cfg.data.all();
  const std::uint64_t seed = cfg.method.seed;
  Corpus c;
  std::size_t k = 0;
  c.base = generate_domain(*specs[k], seed, offsets[k], cfg.data.shape);
  ++k;
  for (std::size_t i = 0; i < cfg.data.sequence.size(); ++i, ++k)
    c.sequence.push_back(generate_domain(*specs[k], seed, offsets[k], cfg.data.shape));
  for (std::size_t i = 0; i < cfg.data.unseen.size(); ++i, ++k)
    c.unseen.push_back(generate_domain(*specs[k], seed, offsets[k], cfg.data.shape));
  std::vector<const DomainDataset*> all{&c.base};
  for (const auto& d : c.sequence) all.push_back(&d);
  for (const auto& d : c.unseen) all.push_back(&d);
  check_disjoint(all);
  return c;
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  save_dataset(c.base, dir / c.base.name);
  for (const auto& d : c.sequence) save_dataset(d, dir / d.name);
  for (const auto& d : c.unseen) save_dataset(d, dir / d.name);
}

/// Loads every domain named in the configuration from `dir/<name>`.
inline Corpus load_corpus(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  auto one = [&](const DomainSpec& s) {
    auto d = load_dataset(dir / s.name, s.name);
    require(d.x.cols() == cfg.method.encoder.input_dim(), ErrorKind::Data,
            s.name + ": feature width " + std::to_string(d.x.cols()) + " does not match the encoder input " +
                std::to_string(cfg.method.encoder.input_dim()));
    return d;
  };
  Corpus c;
  c.base = one(cfg.data.base);
  for (const auto& s : cfg.data.sequence) c.sequence.push_back(one(s));
  for (const auto& s : cfg.data.unseen) c.unseen.push_back(one(s));
  std::vector<const DomainDataset*> all{&c.base};
  for (const auto& d : c.sequence) all.push_back(&d);
  for (const auto& d : c.unseen) all.push_back(&d);
  check_disjoint(all);
  return c;
}

/// The method's soft mixing and hard self-selection.
inline std::vector<std::pair<std::string, MixPolicy>> standard_modes(const MethodConfig& m) {
  return {{m.policy_name(), m.policy()}, {kModeSelfSelect, MixPolicy::one_hot()}};
}

inline EvalOptions eval_options(const ExperimentConfig& cfg) {
  return {cfg.stats_samples, stage_seed(cfg.method.seed, kSeedStatsSample), cfg.threads};
}

struct TrainOutcome {
  LifelongState state;
  std::vector<ScoreRow> scores;
  double pretrain_accuracy = 0.0;
};

/// Learns the sequence in order from a pre-trained state, evaluating every
/// seen and unseen domain after each step. With `checkpoint_dir` set the
/// checkpoint is rewritten after every step.
inline TrainOutcome train_sequence(const ExperimentConfig& cfg, const Corpus& corpus, LifelongState pretrained,
                                   const std::filesystem::path* checkpoint_dir = nullptr,
                                   std::ostream* progress = nullptr) {
  cfg.validate();
  TrainOutcome out;
  out.state = std::move(pretrained);
  for (std::size_t t = 0; t < corpus.sequence.size(); ++t) {
    const auto rep = run_step(out.state, corpus.sequence[t], cfg.method);
    if (checkpoint_dir) save_checkpoint(out.state, cfg.method.adapter, *checkpoint_dir);
    const auto rows = evaluate_all(out.state, corpus.seen_prefix(t + 1), corpus.unseen_all(),
                                   standard_modes(cfg.method), eval_options(cfg));
    out.scores.insert(out.scores.end(), rows.begin(), rows.end());
    if (progress) {
      *progress << "step " << t + 1 << " " << corpus.sequence[t].name << ": prototype accuracy "
                << format_score(rep.prototype_accuracy) << '\n';
      for (const auto& r : rows)
        *progress << "  " << r.mode << " " << r.domain << " mAP " << format_score(r.mAP) << " R1 "
                  << format_score(r.rank1) << '\n';
    }
  }
  return out;
}

/// Pre-trains the base on the corpus' base domain, then runs the sequence.
inline TrainOutcome train_sequence(const ExperimentConfig& cfg, const Corpus& corpus,
                                   const std::filesystem::path* checkpoint_dir = nullptr,
                                   std::ostream* progress = nullptr) {
  double acc = 0.0;
  LifelongState st = init_state(cfg.method, corpus.base, &acc);
  if (progress) *progress << "pretrain accuracy " << format_score(acc) << '\n';
  auto out = train_sequence(cfg, corpus, std::move(st), checkpoint_dir, progress);
  out.pretrain_accuracy = acc;
  return out;
}

struct BaselineOutcome {
  BaselineState state;
  std::vector<ScoreRow> scores;
};

/// Sequential full fine-tuning from an already pre-trained state.
inline BaselineOutcome baseline_sequence(const ExperimentConfig& cfg, const Corpus& corpus,
                                         const LifelongState& pretrained, std::ostream* progress = nullptr) {
  cfg.validate();
  BaselineOutcome out;
  out.state = baseline_from(pretrained);
  for (std::size_t t = 0; t < corpus.sequence.size(); ++t) {
    baseline_step(out.state, corpus.sequence[t], cfg.method);
    const auto rows = evaluate_baseline(out.state, corpus.seen_prefix(t + 1), corpus.unseen_all(), cfg.threads);
    out.scores.insert(out.scores.end(), rows.begin(), rows.end());
    if (progress) {
      *progress << "step " << t + 1 << " " << corpus.sequence[t].name << '\n';
      for (const auto& r : rows)
        *progress << "  " << r.mode << " " << r.domain << " mAP " << format_score(r.mAP) << " R1 "
                  << format_score(r.rank1) << '\n';
    }
  }
  return out;
}

inline BaselineOutcome baseline_sequence(const ExperimentConfig& cfg, const Corpus& corpus,
                                         std::ostream* progress = nullptr) {
  double acc = 0.0;
  const LifelongState pretrained = init_state(cfg.method, corpus.base, &acc);
  if (progress) *progress << "pretrain accuracy " << format_score(acc) << '\n';
  return baseline_sequence(cfg, corpus, pretrained, progress);
}

/// Domain x stored-domain similarity at the first block's temperature.
inline MatD reference_similarity(const LifelongState& st, const Corpus& corpus, const MethodConfig& m) {
  std::vector<const DomainDataset*> ds;
  for (const auto& name : st.domains) ds.push_back(&corpus.find(name));
  return similarity_matrix(st, ds, temperature(1, m.block_schedule()));
}

inline void write_similarity_csv(const MatD& m, const std::vector<std::string>& rows,
                                 const std::vector<std::string>& cols, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "domain";
  for (const auto& c : cols) out << ',' << c;
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << rows[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << format_score(m(i, j));
    out << '\n';
  }
}

}  // namespace kadapt
