#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include <unistd.h>

#include "kadapt/experiment.hpp"
#include "tiny_experiment.hpp"

using namespace kadapt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("kadapt_ll_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// Pre-training dominates the cost of these tests, so share one pre-trained
// state and one corpus across the suite.
struct Shared {
  ExperimentConfig cfg = fixtures::tiny_config();
  Corpus corpus = generate_corpus(cfg);
  LifelongState pretrained = init_state(cfg.method, corpus.base);
};

const Shared& shared() {
  static const Shared s;
  return s;
}

SplitView test_pool(const DomainDataset& d) {
  auto rows = d.indices(Split::Query);
  const auto g = d.indices(Split::Gallery);
  rows.insert(rows.end(), g.begin(), g.end());
  return view(d, rows);
}

}  // namespace

TEST(ValidationSplit, StratifiedDisjointAndDeterministic) {
  const auto& d = shared().corpus.sequence[0];
  const auto [train, val] = validation_split(d, 0.15, 9);
  std::map<int, int> val_count, total;
  for (std::size_t i : d.indices(Split::Train)) ++total[d.identity[i]];
  for (std::size_t i : val) ++val_count[d.identity[i]];
  for (const auto& [id, n] : total) {
    EXPECT_EQ(val_count[id], std::max(1L, std::lround(0.15 * n))) << "identity " << id;
  }
  std::vector<std::size_t> all(train);
  all.insert(all.end(), val.begin(), val.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, d.indices(Split::Train));
  EXPECT_EQ(validation_split(d, 0.15, 9).second, val);
  EXPECT_NE(validation_split(d, 0.15, 10).second, val);
}

TEST(Lifelong, RequiresPretrainedBase) {
  const auto& s = shared();
  LifelongState st;
  st.encoder = make_encoder<float>(s.cfg.method.encoder, 1);
  try {
    run_step(st, s.corpus.sequence[0], s.cfg.method);
    FAIL() << "expected a state error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::State);
  }
}

TEST(Lifelong, StepsGrowAdaptersStatsAndKeepPastFunctions) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  const MatF probe = s.corpus.sequence[0].x.topRows(12);
  const MatF stats_feat_before = stats_features(st.encoder, probe).cast<float>();

  const auto rep1 = run_step(st, s.corpus.sequence[0], s.cfg.method);
  ASSERT_EQ(rep1.training_mix.size(), 2u);
  for (const auto& m : rep1.training_mix) {
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0], 1.0);
  }
  const MatF after1 = infer_features(st, probe, {MixWeights::one_hot(1, 0), MixWeights::one_hot(1, 0)});

  for (std::size_t t = 1; t < 3; ++t) {
    const auto rep = run_step(st, s.corpus.sequence[t], s.cfg.method);
    EXPECT_EQ(rep.distances.size(), t + 1);
    for (const auto& m : rep.training_mix) {
      double sum = 0;
      for (std::size_t k = 0; k < m.size(); ++k) sum += m[k];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(st.steps(), 3u);
  EXPECT_EQ(st.stats.size(), 3u);
  EXPECT_EQ(st.prototypes.steps.size(), 3u);
  for (const auto& b : st.encoder.blocks)
    for (LinearKind k : all_linear_kinds())
      EXPECT_EQ(b.linear(k).adapter_count(), s.cfg.method.encoder.adapted(k) ? 3u : 0u);

  // One-hot on the first adapter reproduces the step-1 encoder exactly.
  const MatF after3 = infer_features(st, probe, {MixWeights::one_hot(3, 0), MixWeights::one_hot(3, 0)});
  EXPECT_EQ(after3, after1);
  // The statistics extractor never changes.
  EXPECT_EQ(MatF(stats_features(st.encoder, probe).cast<float>()), stats_feat_before);
}

TEST(Lifelong, OverlappingIdentitiesAreProtocolErrors) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  auto expect_protocol = [&](const DomainDataset& d) {
    try {
      run_step(st, d, s.cfg.method);
      FAIL() << "expected a protocol error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Protocol);
    }
  };
  expect_protocol(s.corpus.sequence[0]);
  DomainDataset renamed = s.corpus.sequence[0];
  renamed.name = "renamed";
  expect_protocol(renamed);
  EXPECT_EQ(st.steps(), 1u);
  EXPECT_EQ(st.encoder.adapter_count(), 1u);
}

TEST(Inference, ValidationSplitSelectsItsOwnDomainAtEveryBlock) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  for (std::size_t t = 0; t < 3; ++t) run_step(st, s.corpus.sequence[t], s.cfg.method);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto& d = s.corpus.sequence[t];
    const auto val = validation_split(d, s.cfg.method.validation_fraction,
                                      stage_seed(s.cfg.method.seed, kSeedValidation, t + 1)).second;
    const auto dist = domain_distances(st, test_stats(st, view(d, val).x, std::nullopt, 0));
    const auto mix = block_mixing(dist, MixPolicy::scheduled(s.cfg.method.block_schedule()), 2);
    for (const auto& m : mix) {
      for (std::size_t k = 0; k < 3; ++k) {
        if (k != t) {
          EXPECT_GT(m[t], m[k]) << d.name;
        }
      }
    }
  }
}

TEST(Inference, LimitedStatsSamples) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  run_step(st, s.corpus.sequence[1], s.cfg.method);
  const MatF pool = test_pool(s.corpus.sequence[1]).x;
  const auto dist = domain_distances(st, test_stats(st, pool, 2, 77));
  const auto mix = block_mixing(dist, MixPolicy::scheduled(s.cfg.method.block_schedule()), 2);
  for (const auto& m : mix) EXPECT_NEAR(m[0] + m[1], 1.0, 1e-12);
  for (int bad : {1, static_cast<int>(pool.rows()) + 1}) {
    try {
      test_stats(st, pool, bad, 0);
      FAIL() << "expected an insufficient-samples error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InsufficientSamples);
    }
  }
  // Same seed, same subset.
  EXPECT_EQ(test_stats(st, pool, 5, 1).mean, test_stats(st, pool, 5, 1).mean);
}

TEST(Inference, MergedFeaturesMatchLiteralMixing) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  run_step(st, s.corpus.sequence[1], s.cfg.method);
  const MatF x = s.corpus.sequence[1].x.topRows(20);
  const std::vector<MixWeights> mix{MixWeights{{0.3, 0.7}}, MixWeights{{0.8, 0.2}}};
  const MatF merged = infer_features(st, x, mix);
  const MatF literal = encode(st.encoder, x, mix, MixPath::Literal);
  EXPECT_LT((merged - literal).cwiseAbs().maxCoeff(), 1e-4f);
}

TEST(Similarity, RowStochasticWithDominantDiagonal) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  const MatD one = reference_similarity(st, s.corpus, s.cfg.method);
  ASSERT_EQ(one.rows(), 1);
  EXPECT_EQ(one(0, 0), 1.0);

  run_step(st, s.corpus.sequence[1], s.cfg.method);
  run_step(st, s.corpus.sequence[2], s.cfg.method);
  const MatD m = reference_similarity(st, s.corpus, s.cfg.method);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(m.row(i).sum(), 1.0, 1e-12);
    Eigen::Index best = 0;
    m.row(i).maxCoeff(&best);
    EXPECT_EQ(best, i);
  }
  try {
    similarity_matrix(st, {&s.corpus.unseen[0]}, 0.1);
    FAIL() << "expected a state error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::State);
  }
  try {
    similarity_matrix(s.pretrained, {&s.corpus.sequence[0]}, 0.1);
    FAIL() << "expected a state error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::State);
  }
}

TEST(Evaluation, SelfSelectionHasNoForgetting) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  std::vector<ScoreRow> rows;
  for (std::size_t t = 0; t < 3; ++t) {
    run_step(st, s.corpus.sequence[t], s.cfg.method);
    const auto r = evaluate_all(st, s.corpus.seen_prefix(t + 1), s.corpus.unseen_all(),
                                {{kModeSelfSelect, MixPolicy::one_hot()}});
    rows.insert(rows.end(), r.begin(), r.end());
  }
  for (const auto& r : rows) {
    EXPECT_GE(r.mAP, 0.0);
    EXPECT_LE(r.mAP, 1.0);
    EXPECT_GE(r.rank1, 0.0);
    EXPECT_LE(r.rank1, 1.0);
  }
  // seen_avg present once per step
  EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [](const ScoreRow& r) { return r.domain == kSeenAverage; }), 3);
  for (const auto& t : forgetting_report(rows)) {
    if (t.domain == s.corpus.unseen[0].name) continue;
    EXPECT_EQ(t.drop, 0.0) << t.domain;
  }
}

TEST(Baseline, UpdatesBaseAndLeavesPretrainedStateAlone) {
  const auto& s = shared();
  BaselineState b = baseline_from(s.pretrained);
  EXPECT_FALSE(b.model.frozen);
  EXPECT_EQ(b.model.adapter_count(), 0u);
  baseline_step(b, s.corpus.sequence[0], s.cfg.method);
  EXPECT_NE(b.model.blocks[0].linear(LinearKind::Q).base_weight,
            s.pretrained.encoder.blocks[0].linear(LinearKind::Q).base_weight);
  const auto rows = evaluate_baseline(b, s.corpus.seen_prefix(1), {});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].mode, kModeBaseline);
  try {
    baseline_step(b, s.corpus.sequence[0], s.cfg.method);
    FAIL() << "expected a protocol error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Protocol);
  }
}

TEST(Checkpoint, RoundTripRestoresEverything) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  run_step(st, s.corpus.sequence[1], s.cfg.method);
  const auto dir = temp_dir("rt");
  save_checkpoint(st, s.cfg.method.adapter, dir);
  for (const char* f : {"manifest.json", "base.bin", "adapters.bin", "prototypes.bin", "log.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "stats" / (s.corpus.sequence[1].name + ".stats")));

  const LifelongState back = load_checkpoint(dir);
  EXPECT_EQ(back.domains, st.domains);
  EXPECT_EQ(back.identities, st.identities);
  ASSERT_EQ(back.stats.size(), 2u);
  EXPECT_EQ(back.stats[1].cov, st.stats[1].cov);
  ASSERT_EQ(back.prototypes.steps.size(), 2u);
  EXPECT_EQ(back.prototypes.steps[1].prototypes, st.prototypes.steps[1].prototypes);
  EXPECT_EQ(back.prototypes.steps[1].identities, st.prototypes.steps[1].identities);
  Encoder<float> a = st.encoder, b = back.encoder;
  std::vector<MatF> ta, tb;
  for_each_base_tensor(a, [&](const std::string&, MatF& m) { ta.push_back(m); });
  for_each_base_tensor(b, [&](const std::string&, MatF& m) { tb.push_back(m); });
  for (std::size_t k = 0; k < 2; ++k) {
    for_each_adapter_tensor(a, k, [&](const std::string&, MatF& m) { ta.push_back(m); });
    for_each_adapter_tensor(b, k, [&](const std::string&, MatF& m) { tb.push_back(m); });
  }
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i], tb[i]);

  const auto e1 = evaluate_domain(st, s.corpus.sequence[0], MixPolicy::one_hot());
  const auto e2 = evaluate_domain(back, s.corpus.sequence[0], MixPolicy::one_hot());
  EXPECT_EQ(e1.score.mAP, e2.score.mAP);

  // The reloaded state continues the sequence with the same identity checks.
  LifelongState cont = back;
  EXPECT_THROW(run_step(cont, s.corpus.sequence[1], s.cfg.method), Error);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto& s = shared();
  LifelongState st = s.pretrained;
  run_step(st, s.corpus.sequence[0], s.cfg.method);
  const auto dir = temp_dir("bad");
  save_checkpoint(st, s.cfg.method.adapter, dir);
  fs::resize_file(dir / "adapters.bin", fs::file_size(dir / "adapters.bin") - 2);
  try {
    load_checkpoint(dir);
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  save_checkpoint(st, s.cfg.method.adapter, dir);
  {
    std::ofstream m(dir / "manifest.json");
    m << "{\"version\": 1}";
  }
  try {
    load_checkpoint(dir);
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  fs::remove_all(dir);
}

TEST(Determinism, RepeatedTrainingIsByteIdentical) {
  const auto& s = shared();
  const auto dir = temp_dir("det");
  ExperimentConfig cfg = s.cfg;
  const fs::path a = dir / "a", b = dir / "b";
  const auto ra = train_sequence(cfg, s.corpus, &a);
  const auto rb = train_sequence(cfg, s.corpus, &b);
  write_scores_csv(ra.scores, dir / "a.csv");
  write_scores_csv(rb.scores, dir / "b.csv");
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  const auto fa = tree_bytes(a), fb = tree_bytes(b);
  ASSERT_EQ(fa.size(), fb.size());
  for (const auto& [name, bytes] : fa) EXPECT_TRUE(bytes == fb.at(name)) << name;
  fs::remove_all(dir);
}
