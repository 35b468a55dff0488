// kadapt: command-line driver for data generation, lifelong training,
// evaluation, similarity reports, ablation sweeps, storage accounting,
// gradient checks and the fine-tuning baseline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kadapt/experiment.hpp"
#include "kadapt/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace kadapt;

namespace {

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string ckpt;
  std::optional<std::uint64_t> seed;
  std::optional<int> stats_samples;
  std::optional<unsigned> threads;
  std::string axis;
  std::vector<std::string> domains;
  bool unseen = false;
};

int exit_code(ErrorKind kind) { return 10 + static_cast<int>(kind); }

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config.empty() ? default_config() : load_config(o.config);
  if (o.seed) c.method.seed = *o.seed;
  if (o.stats_samples) c.stats_samples = *o.stats_samples;
  if (o.threads) c.threads = *o.threads;
  if (!o.out.empty()) c.output_dir = o.out;
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    fail(ErrorKind::Config, e.what());
  }
  return c;
}

fs::path prepare_output(const ExperimentConfig& c) {
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  write_json_file(to_json(c), out / "config.resolved.json");
  return out;
}

fs::path need(const std::string& path, const char* flag) {
  if (path.empty()) fail(ErrorKind::Config, std::string(flag) + " is required for this command");
  return path;
}

void print_rows(const std::vector<ScoreRow>& rows) {
  std::printf("%-5s %-14s %-12s %9s %9s\n", "step", "domain", "mode", "mAP", "rank1");
  for (const auto& r : rows)
    std::printf("%-5d %-14s %-12s %9.4f %9.4f\n", r.step, r.domain.c_str(), r.mode.c_str(), r.mAP, r.rank1);
}

/// Long-format sweep rows: axis,setting,mode,domain,metric,value.
struct Sweep {
  std::string axis;
  std::ostringstream body;

  void add(const std::string& setting, const std::string& mode, const std::string& domain, const std::string& metric,
           double value) {
    body << axis << ',' << setting << ',' << mode << ',' << domain << ',' << metric << ',' << format_score(value)
         << '\n';
  }
  void add_scores(const std::string& setting, const std::vector<ScoreRow>& rows) {
    int last = 0;
    for (const auto& r : rows) last = std::max(last, r.step);
    for (const auto& r : rows) {
      if (r.step != last) continue;
      add(setting, r.mode, r.domain, "mAP", r.mAP);
      add(setting, r.mode, r.domain, "rank1", r.rank1);
    }
  }
  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "axis,setting,mode,domain,metric,value\n" << body.str();
  }
};

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  const auto cfg = resolve(o);
  const auto out = prepare_output(cfg);
  const Corpus corpus = generate_corpus(cfg);
  save_corpus(corpus, out);
  std::printf("wrote %zu domains to %s\n", 1 + corpus.sequence.size() + corpus.unseen.size(), out.c_str());
  return 0;
}

int cmd_train(const Options& o) {
  const auto cfg = resolve(o);
  const Corpus corpus = load_corpus(cfg, need(o.data, "--data"));
  const auto out = prepare_output(cfg);
  const fs::path ckpt = o.ckpt.empty() ? out / "checkpoint" : fs::path(o.ckpt);
  const auto result = train_sequence(cfg, corpus, &ckpt, &std::cout);
  write_scores_csv(result.scores, out / "scores.csv");
  write_forgetting_csv(forgetting_report(result.scores), out / "forgetting.csv");
  std::printf("checkpoint: %s\n", ckpt.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const auto cfg = resolve(o);
  const LifelongState st = load_checkpoint(need(o.ckpt, "--ckpt"));
  const Corpus corpus = load_corpus(cfg, need(o.data, "--data"));
  const auto out = prepare_output(cfg);
  std::vector<const DomainDataset*> seen, unseen;
  for (const auto& name : o.domains.empty() ? st.domains : o.domains) seen.push_back(&corpus.find(name));
  if (o.unseen) unseen = corpus.unseen_all();
  const auto rows = evaluate_all(st, seen, unseen, standard_modes(cfg.method), eval_options(cfg));
  write_scores_csv(rows, out / "scores.csv");
  print_rows(rows);
  return 0;
}

int cmd_similarity(const Options& o) {
  const auto cfg = resolve(o);
  const LifelongState st = load_checkpoint(need(o.ckpt, "--ckpt"));
  const Corpus corpus = load_corpus(cfg, need(o.data, "--data"));
  const auto out = prepare_output(cfg);
  const MatD m = reference_similarity(st, corpus, cfg.method);
  write_similarity_csv(m, st.domains, st.domains, out / "similarity.csv");
  std::printf("%-14s", "test \\ stored");
  for (const auto& d : st.domains) std::printf(" %10s", d.c_str());
  std::printf("\n");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::printf("%-14s", st.domains[static_cast<std::size_t>(i)].c_str());
    for (Eigen::Index j = 0; j < m.cols(); ++j) std::printf(" %10.4f", m(i, j));
    std::printf("\n");
  }
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto cfg = resolve(o);
  const auto& axis = o.axis;
  static const std::set<std::string> axes{"temperature-family", "a-b-grid",      "rank-alpha",
                                          "sites",              "stats-samples", "fixed-temperature"};
  if (!axes.count(axis))
    fail(ErrorKind::Config, "unknown ablation axis '" + axis +
                                "' (expected temperature-family, a-b-grid, rank-alpha, sites, stats-samples or "
                                "fixed-temperature)");
  const Corpus corpus = load_corpus(cfg, need(o.data, "--data"));
  const auto out = prepare_output(cfg);
  Sweep sweep{axis, {}};

  auto retrain = [&](const std::string& setting, const ExperimentConfig& c) {
    std::printf("[%s] %s\n", axis.c_str(), setting.c_str());
    std::fflush(stdout);
    sweep.add_scores(setting, train_sequence(c, corpus).scores);
  };

  if (axis == "temperature-family") {
    for (ScheduleFamily f : all_schedule_families()) {
      auto c = cfg;
      c.method.schedule.family = f;
      c.method.fixed_temperature.reset();
      retrain(to_string(f), c);
    }
  } else if (axis == "a-b-grid") {
    for (double a : {0.0, 0.25, 0.5, 1.0})
      for (double b : {0.05, 0.1, 0.2}) {
        auto c = cfg;
        c.method.schedule.a = a;
        c.method.schedule.b = b;
        c.method.fixed_temperature.reset();
        retrain("a=" + fmt(a) + ";b=" + fmt(b), c);
      }
  } else if (axis == "fixed-temperature") {
    for (double tau : {0.05, 0.1, 0.5, 1.0}) {
      auto c = cfg;
      c.method.fixed_temperature = tau;
      retrain("t=" + fmt(tau), c);
    }
    auto c = cfg;
    c.method.fixed_temperature.reset();
    retrain("scheduled", c);
  } else if (axis == "rank-alpha") {
    for (auto [r, a] : std::vector<std::pair<int, double>>{{8, 32}, {16, 64}, {32, 128}, {64, 256}}) {
      if (r > cfg.method.encoder.d_model) continue;
      auto c = cfg;
      c.method.adapter = {r, a};
      retrain("r=" + std::to_string(r) + ";alpha=" + fmt(a), c);
    }
  } else if (axis == "sites") {
    using S = SiteKind;
    const std::vector<std::pair<std::string, std::set<S>>> options{
        {"Q;K;V;Proj", {S::Q, S::K, S::V, S::Proj}},
        {"Q;V", {S::Q, S::V}},
        {"Proj", {S::Proj}},
        {"FFN", {S::FFN}},
        {"Q;K;V;Proj;FFN", {S::Q, S::K, S::V, S::Proj, S::FFN}}};
    for (const auto& [name, sites] : options) {
      auto c = cfg;
      c.method.encoder.sites = sites;
      retrain(name, c);
    }
  } else {
    const LifelongState st = load_checkpoint(need(o.ckpt, "--ckpt"));
    constexpr int kTrials = 10;
    for (int n : {2, 4, 8, 16, 32, 64, 0}) {
      const std::string setting = n == 0 ? "all" : std::to_string(n);
      std::printf("[%s] %s\n", axis.c_str(), setting.c_str());
      std::fflush(stdout);
      for (std::size_t k = 0; k < st.domains.size(); ++k) {
        const auto& d = corpus.find(st.domains[k]);
        if (n > static_cast<int>(d.indices(Split::Query).size() + d.indices(Split::Gallery).size())) continue;
        double map = 0.0, hit = 0.0;
        const int trials = n == 0 ? 1 : kTrials;
        for (int t = 0; t < trials; ++t) {
          EvalOptions opt{n == 0 ? std::nullopt : std::optional<int>(n),
                          stage_seed(cfg.method.seed, kSeedStatsSample, static_cast<std::uint64_t>(t)), cfg.threads};
          const auto e = evaluate_domain(st, d, cfg.method.policy(), opt);
          map += e.score.mAP;
          hit += static_cast<double>(
              std::min_element(e.distances.begin(), e.distances.end()) - e.distances.begin() ==
              static_cast<std::ptrdiff_t>(k));
        }
        sweep.add(setting, cfg.method.policy_name(), d.name, "mAP", map / trials);
        sweep.add(setting, cfg.method.policy_name(), d.name, "selection_accuracy", hit / trials);
      }
    }
  }
  const fs::path path = out / ("ablation_" + axis + ".csv");
  sweep.write(path);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_storage_report(const Options& o) {
  const auto cfg = resolve(o);
  const auto out = prepare_output(cfg);
  struct Row {
    std::string name;
    StorageConfig sc;
  };
  std::vector<Row> rows;
  StorageConfig ref;  // ViT-B/16 scale
  rows.push_back({"reference", ref});
  StorageConfig ref_ffn = ref;
  ref_ffn.sites.insert(SiteKind::FFN);
  rows.push_back({"reference+ffn", ref_ffn});
  const auto& e = cfg.method.encoder;
  rows.push_back({"configured",
                  {e.blocks, e.d_model, e.ffn_dim, cfg.method.adapter.rank, e.sites, e.d_model}});

  std::ofstream csv(out / "storage.csv");
  if (!csv) fail(ErrorKind::Io, "cannot write storage.csv");
  csv << "config,blocks,d_model,ffn_dim,rank,sites,adapter_bytes,adapter_mb,stats_bytes_f32,stats_mb,stats_file_bytes\n";
  std::printf("%-14s %6s %7s %5s %-16s %12s %9s %10s %8s\n", "config", "blocks", "d_model", "rank", "sites",
              "adapter B", "adapt MB", "stats B", "stats MB");
  for (const auto& r : rows) {
    const auto rep = storage_bytes(r.sc);
    std::string sites;
    for (SiteKind s : r.sc.sites) sites += (sites.empty() ? "" : ";") + to_string(s);
    csv << r.name << ',' << r.sc.blocks << ',' << r.sc.d_model << ',' << r.sc.ffn_dim << ',' << r.sc.rank << ','
        << sites << ',' << rep.adapter_bytes << ',' << format_score(to_mb(rep.adapter_bytes)) << ','
        << rep.stats_bytes_f32 << ',' << format_score(to_mb(rep.stats_bytes_f32)) << ',' << rep.stats_file_bytes
        << '\n';
    std::printf("%-14s %6d %7d %5d %-16s %12llu %9.2f %10llu %8.2f\n", r.name.c_str(), r.sc.blocks, r.sc.d_model,
                r.sc.rank, sites.c_str(), static_cast<unsigned long long>(rep.adapter_bytes), to_mb(rep.adapter_bytes),
                static_cast<unsigned long long>(rep.stats_bytes_f32), to_mb(rep.stats_bytes_f32));
  }
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const auto cfg = resolve(o);
  const auto out = prepare_output(cfg);
  const auto results = run_gradcheck_suite();
  std::ofstream csv(out / "gradcheck.csv");
  if (!csv) fail(ErrorKind::Io, "cannot write gradcheck.csv");
  csv << "check,max_relative_error,passed\n";
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    csv << r.name << ',' << r.max_relative_error << ',' << (r.passed ? 1 : 0) << '\n';
    std::printf("%-28s %12.3e %s\n", r.name.c_str(), r.max_relative_error, r.passed ? "ok" : "FAIL");
  }
  std::printf("%s (%zu checks)\n", ok ? "all gradient checks passed" : "gradient checks FAILED", results.size());
  return ok ? 0 : 1;
}

int cmd_baseline(const Options& o) {
  const auto cfg = resolve(o);
  const Corpus corpus = load_corpus(cfg, need(o.data, "--data"));
  const auto out = prepare_output(cfg);
  const auto result = baseline_sequence(cfg, corpus, &std::cout);
  write_scores_csv(result.scores, out / "scores.csv");
  write_forgetting_csv(forgetting_report(result.scores), out / "forgetting.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong re-identification with distribution-selected low-rank adapters"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "JSON configuration (defaults when omitted)")->check(CLI::ExistingFile);
    cmd->add_option("--out", o.out, "Output directory (overrides output_dir)");
    cmd->add_option("--seed", o.seed, "Master seed (overrides seed)");
    cmd->add_option("--threads", o.threads, "Worker cap for evaluation")->check(CLI::PositiveNumber);
  };
  auto with_data = [&](CLI::App* cmd) { cmd->add_option("--data", o.data, "Dataset directory from gen-data"); };
  auto with_ckpt = [&](CLI::App* cmd) { cmd->add_option("--ckpt", o.ckpt, "Checkpoint directory"); };
  auto with_stats = [&](CLI::App* cmd) {
    cmd->add_option("--stats-samples", o.stats_samples, "Test samples used for the domain statistics")
        ->check(CLI::Range(2, 1 << 30));
  };

  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> commands;
  auto add = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    CLI::App* cmd = app.add_subcommand(name, help);
    common(cmd);
    commands.emplace_back(cmd, fn);
    return cmd;
  };

  add("gen-data", "Generate the synthetic domains", cmd_gen_data);
  auto* train = add("train", "Run the lifelong sequence, evaluating after every step", cmd_train);
  with_data(train);
  with_stats(train);
  train->add_option("--ckpt", o.ckpt, "Checkpoint directory (default <out>/checkpoint)");
  auto* eval = add("eval", "Evaluate a checkpoint", cmd_eval);
  with_data(eval);
  with_ckpt(eval);
  with_stats(eval);
  eval->add_option("--domains", o.domains, "Seen domains to evaluate (default: all in the checkpoint)")
      ->delimiter(',');
  eval->add_flag("--unseen", o.unseen, "Also evaluate the unseen domains");
  auto* sim = add("similarity", "Domain similarity matrix of a checkpoint", cmd_similarity);
  with_data(sim);
  with_ckpt(sim);
  auto* ablate = add("ablate", "Ablation sweep along one axis", cmd_ablate);
  with_data(ablate);
  with_ckpt(ablate);
  with_stats(ablate);
  ablate->add_option("--axis", o.axis, "temperature-family, a-b-grid, rank-alpha, sites, stats-samples, fixed-temperature")
      ->required();
  add("storage-report", "Per-domain adapter and statistics storage", cmd_storage_report);
  add("gradcheck", "Finite-difference gradient checks", cmd_gradcheck);
  auto* base = add("baseline", "Sequential full fine-tuning run", cmd_baseline);
  with_data(base);
  with_stats(base);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (const auto& [cmd, fn] : commands)
      if (cmd->parsed()) return fn(o);
  } catch (const Error& e) {
    std::cerr << "kadapt: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "kadapt: io error: " << e.what() << '\n';
    return exit_code(ErrorKind::Io);
  } catch (const std::exception& e) {
    std::cerr << "kadapt: internal error: " << e.what() << '\n';
    return 70;
  }
  return 2;
}
