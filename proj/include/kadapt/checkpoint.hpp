#pragma once

// Checkpoint directory: manifest.json, base.bin, adapters.bin,
// prototypes.bin, stats/<domain>.stats and log.csv.

#include <filesystem>
#include <string>
#include <vector>

#include "kadapt/config.hpp"
#include "kadapt/io/tensor_archive.hpp"
#include "kadapt/lifelong.hpp"

namespace kadapt {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  EncoderConfig encoder;
  AdapterConfig adapter;
  std::vector<std::string> domains;
};

namespace detail {

inline std::vector<io::TensorEntry> base_tensors(Encoder<float>& enc) {
  std::vector<io::TensorEntry> out;
  for_each_base_tensor(enc, [&](const std::string& name, MatF& m) { out.push_back({name, m}); });
  return out;
}

inline std::vector<io::TensorEntry> adapter_tensors(Encoder<float>& enc) {
  std::vector<io::TensorEntry> out;
  for (std::size_t k = 0; k < enc.adapter_count(); ++k)
    for_each_adapter_tensor(enc, k, [&](const std::string& name, MatF& m) { out.push_back({name, m}); });
  return out;
}

inline std::string prototype_name(std::size_t step, const char* what) {
  return std::to_string(step + 1) + ".prototypes." + what;
}

}  // namespace detail

inline void save_checkpoint(const LifelongState& st, const AdapterConfig& adapter, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  require(st.stats.size() == st.encoder.adapter_count() && st.domains.size() == st.stats.size() &&
              st.prototypes.steps.size() == st.stats.size(),
          ErrorKind::State, "lifelong state is inconsistent: stats, adapters, domains and prototypes must match");
  fs::create_directories(dir / "stats");
  Encoder<float> enc = st.encoder;

  auto base = detail::base_tensors(enc);
  auto adapters = detail::adapter_tensors(enc);
  std::vector<io::TensorEntry> protos;
  Json proto_ids = Json::array();
  for (std::size_t s = 0; s < st.prototypes.steps.size(); ++s) {
    const auto& p = st.prototypes.steps[s];
    protos.push_back({detail::prototype_name(s, "value"), p.prototypes});
    protos.push_back({detail::prototype_name(s, "log_scale"), p.log_scale});
    proto_ids.push_back(p.identities);
  }

  auto listing = [](const std::vector<io::TensorEntry>& ts) {
    Json out = Json::array();
    for (const auto& t : ts) out.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}});
    return out;
  };
  const Json manifest = {
      {"version", kCheckpointVersion},
      {"steps", st.steps()},
      {"encoder", encoder_json(st.encoder.config)},
      {"adapter", {{"rank", adapter.rank}, {"alpha", adapter.alpha}}},
      {"domains", st.domains},
      {"prototype_identities", proto_ids},
      {"identities", std::vector<int>(st.identities.begin(), st.identities.end())},
      {"tensors", {{"base", listing(base)}, {"adapters", listing(adapters)}, {"prototypes", listing(protos)}}},
  };
  write_json_file(manifest, dir / "manifest.json");
  io::save_tensors(base, dir / "base.bin");
  io::save_tensors(adapters, dir / "adapters.bin");
  io::save_tensors(protos, dir / "prototypes.bin");
  for (std::size_t s = 0; s < st.stats.size(); ++s) save_stats(st.stats[s], dir / "stats" / (st.domains[s] + ".stats"));
  st.log.write_csv(dir / "log.csv");
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const Json m = read_json_file(dir / "manifest.json");
  try {
    if (m.at("version").get<int>() != kCheckpointVersion) fail(ErrorKind::Format, "unsupported checkpoint version");
    CheckpointInfo info;
    info.encoder = encoder_from_json(m.at("encoder"));
    info.encoder.validate();
    info.adapter.rank = m.at("adapter").at("rank").get<int>();
    info.adapter.alpha = m.at("adapter").at("alpha").get<double>();
    info.domains = m.at("domains").get<std::vector<std::string>>();
    require(m.at("steps").get<std::size_t>() == info.domains.size(), ErrorKind::Format,
            "manifest step count does not match its domain list");
    return info;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest: " + std::string(e.what()));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format) throw;
    fail(ErrorKind::Format, "malformed manifest: " + std::string(e.what()));
  }
}

/// Rebuilds the state from a checkpoint directory. The training log is not
/// restored.
inline LifelongState load_checkpoint(const std::filesystem::path& dir) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  const Json m = read_json_file(dir / "manifest.json");
  LifelongState st;
  st.encoder = make_encoder<float>(info.encoder, 0);
  st.encoder.frozen = true;
  for (std::size_t s = 0; s < info.domains.size(); ++s) add_adapters(st.encoder, info.adapter.rank, info.adapter.alpha, 0);

  const auto base = io::load_tensors(dir / "base.bin");
  for_each_base_tensor(st.encoder, [&](const std::string& name, MatF& t) { io::restore(base, name, t); });
  const auto adapters = io::load_tensors(dir / "adapters.bin");
  for (std::size_t k = 0; k < info.domains.size(); ++k)
    for_each_adapter_tensor(st.encoder, k, [&](const std::string& name, MatF& t) { io::restore(adapters, name, t); });

  const auto protos = io::load_tensors(dir / "prototypes.bin");
  std::vector<std::vector<int>> ids;
  try {
    ids = m.at("prototype_identities").get<std::vector<std::vector<int>>>();
    const auto seen = m.at("identities").get<std::vector<int>>();
    st.identities.insert(seen.begin(), seen.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest: " + std::string(e.what()));
  }
  require(ids.size() == info.domains.size(), ErrorKind::Format, "one prototype identity list per step is required");
  for (std::size_t s = 0; s < ids.size(); ++s) {
    PrototypeSet p;
    p.identities = ids[s];
    p.prototypes = MatF(static_cast<Eigen::Index>(ids[s].size()), info.encoder.d_model);
    p.log_scale = MatF(1, 1);
    io::restore(protos, detail::prototype_name(s, "value"), p.prototypes);
    io::restore(protos, detail::prototype_name(s, "log_scale"), p.log_scale);
    st.prototypes.steps.push_back(std::move(p));
  }
  for (const auto& name : info.domains) {
    st.stats.push_back(load_stats(dir / "stats" / (name + ".stats")));
    require(st.stats.back().dim() == info.encoder.d_model, ErrorKind::Format,
            "statistics of " + name + " do not match the feature width");
  }
  st.domains = info.domains;
  return st;
}

}  // namespace kadapt
