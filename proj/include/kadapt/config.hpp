#pragma once

// Experiment configuration: JSON reading with defaults and exhaustive
// validation (unknown keys are errors), and canonical JSON writing.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kadapt/data.hpp"
#include "kadapt/lifelong.hpp"

namespace kadapt {

using Json = nlohmann::json;

struct DataConfig {
  GeneratorShape shape;
  DomainSpec base;                  // pre-training corpus, never evaluated
  std::vector<DomainSpec> sequence;  // lifelong order
  std::vector<DomainSpec> unseen;    // evaluated only

  std::vector<const DomainSpec*> all() const {
    std::vector<const DomainSpec*> out{&base};
    for (const auto& d : sequence) out.push_back(&d);
    for (const auto& d : unseen) out.push_back(&d);
    return out;
  }
};

struct ExperimentConfig {
  MethodConfig method;
  DataConfig data;
  std::optional<int> stats_samples;
  unsigned threads = 1;
  std::string output_dir = "out";

  void validate() const {
    method.validate();
    require(data.shape.d_gen >= 1, ErrorKind::Config, "generator d_gen must be >= 1");
    require(data.shape.feat_dim == method.encoder.input_dim(), ErrorKind::Config,
            "generator feat_dim " + std::to_string(data.shape.feat_dim) + " must equal tokens * token_dim = " +
                std::to_string(method.encoder.input_dim()));
    require(!data.sequence.empty(), ErrorKind::Config, "the domain sequence must not be empty");
    std::set<std::string> names;
    for (const auto* d : data.all()) {
      d->validate();
      require(names.insert(d->name).second, ErrorKind::Config, "duplicate domain name " + d->name);
    }
    if (stats_samples) require(*stats_samples >= 2, ErrorKind::Config, "stats_samples must be >= 2");
    require(threads >= 1, ErrorKind::Config, "threads must be >= 1");
  }
};

/// Defaults: a base corpus, four seen domains with distinct gaps, and one
/// unseen domain whose transform blends the seen ones.
inline ExperimentConfig default_config() {
  ExperimentConfig c;
  c.data.base.name = "base";
  c.data.base.num_identities = 100;
  c.data.base.gap_seed = 100;
  for (int i = 1; i <= 4; ++i) {
    DomainSpec d;
    d.name = "domain" + std::to_string(i);
    d.gap_seed = static_cast<std::uint64_t>(i);
    c.data.sequence.push_back(d);
  }
  DomainSpec u;
  u.name = "unseen";
  u.gap_seed = 50;
  for (int i = 1; i <= 4; ++i) u.blend.push_back({static_cast<std::uint64_t>(i), 1.0});
  c.data.unseen.push_back(u);
  return c;
}

/// Identity offsets: base first, then the sequence, then unseen domains.
inline std::vector<int> identity_offsets(const DataConfig& d) {
  std::vector<int> out;
  int next = 0;
  for (const auto* s : d.all()) {
    out.push_back(next);
    next += s->num_identities;
  }
  return out;
}

namespace detail {

/// Object reader that records consumed keys so leftovers can be rejected.
class JsonObject {
 public:
  JsonObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorKind::Config, path_ + " must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& target) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      target = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::Config, path_ + "." + key + " has the wrong type");
    }
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(ErrorKind::Config, "unknown key " + path_ + "." + k);
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_encoder(const Json& j, EncoderConfig& e, const std::string& path) {
  JsonObject o(j, path);
  o.get("blocks", e.blocks);
  o.get("d_model", e.d_model);
  o.get("heads", e.heads);
  o.get("ffn_dim", e.ffn_dim);
  o.get("tokens", e.tokens);
  o.get("token_dim", e.token_dim);
  std::optional<std::vector<std::string>> sites;
  if (const Json* s = o.child("sites")) {
    try {
      sites = s->get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::Config, o.path("sites") + " must be a list of site names");
    }
  }
  if (sites) {
    e.sites.clear();
    for (const auto& name : *sites) e.sites.insert(parse_site(name));
  }
  o.finish();
}

inline void read_train(const Json& j, TrainConfig& t, const std::string& path) {
  JsonObject o(j, path);
  o.get("stage1_iterations", t.stage1_iterations);
  o.get("stage1_lr", t.stage1_lr);
  o.get("stage2_iterations", t.stage2_iterations);
  o.get("stage2_lr", t.stage2_lr);
  o.get("p_ids", t.p_ids);
  o.get("k_instances", t.k_instances);
  o.get("margin", t.margin);
  o.get("weight_i2tce", t.weight_i2tce);
  o.get("weight_triplet", t.weight_triplet);
  o.get("weight_id", t.weight_id);
  o.get("init_temperature", t.init_temperature);
  o.get("pretrain_iterations", t.pretrain_iterations);
  o.get("pretrain_lr", t.pretrain_lr);
  o.finish();
}

inline void read_domain(const Json& j, DomainSpec& d, const std::string& path) {
  JsonObject o(j, path);
  o.get("name", d.name);
  o.get("num_identities", d.num_identities);
  o.get("samples_per_identity", d.samples_per_identity);
  o.get("cameras", d.cameras);
  o.get("gap_seed", d.gap_seed);
  o.get("noise_std", d.noise_std);
  o.get("camera_shift_std", d.camera_shift_std);
  o.get("camera_scale_spread", d.camera_scale_spread);
  o.get("nuisance_dim", d.nuisance_dim);
  o.get("nuisance_std", d.nuisance_std);
  o.get("offset_std", d.offset_std);
  o.get("eval_fraction", d.eval_fraction);
  if (const Json* b = o.child("blend")) {
    if (!b->is_array()) fail(ErrorKind::Config, o.path("blend") + " must be a list");
    d.blend.clear();
    for (std::size_t i = 0; i < b->size(); ++i) {
      JsonObject c((*b)[i], o.path("blend") + "[" + std::to_string(i) + "]");
      BlendComponent comp;
      c.get("gap_seed", comp.gap_seed);
      c.get("weight", comp.weight);
      c.finish();
      d.blend.push_back(comp);
    }
  }
  o.finish();
}

inline std::vector<DomainSpec> read_domain_list(const Json& j, const std::string& path) {
  if (!j.is_array()) fail(ErrorKind::Config, path + " must be a list of domains");
  std::vector<DomainSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    DomainSpec d;
    read_domain(j[i], d, path + "[" + std::to_string(i) + "]");
    out.push_back(d);
  }
  return out;
}

inline Json domain_json(const DomainSpec& d) {
  Json blend = Json::array();
  for (const auto& b : d.blend) blend.push_back({{"gap_seed", b.gap_seed}, {"weight", b.weight}});
  return {{"name", d.name},
          {"num_identities", d.num_identities},
          {"samples_per_identity", d.samples_per_identity},
          {"cameras", d.cameras},
          {"gap_seed", d.gap_seed},
          {"noise_std", d.noise_std},
          {"camera_shift_std", d.camera_shift_std},
          {"camera_scale_spread", d.camera_scale_spread},
          {"nuisance_dim", d.nuisance_dim},
          {"nuisance_std", d.nuisance_std},
          {"offset_std", d.offset_std},
          {"eval_fraction", d.eval_fraction},
          {"blend", blend}};
}

}  // namespace detail

inline Json encoder_json(const EncoderConfig& e) {
  Json sites = Json::array();
  for (SiteKind s : e.sites) sites.push_back(to_string(s));
  return {{"blocks", e.blocks},   {"d_model", e.d_model}, {"heads", e.heads},         {"ffn_dim", e.ffn_dim},
          {"tokens", e.tokens},   {"token_dim", e.token_dim}, {"sites", sites}};
}

inline EncoderConfig encoder_from_json(const Json& j) {
  EncoderConfig e;
  detail::read_encoder(j, e, "encoder");
  return e;
}

inline Json to_json(const ExperimentConfig& c) {
  const auto& m = c.method;
  const auto& t = m.train;
  Json seq = Json::array(), unseen = Json::array();
  for (const auto& d : c.data.sequence) seq.push_back(detail::domain_json(d));
  for (const auto& d : c.data.unseen) unseen.push_back(detail::domain_json(d));
  return {
      {"encoder", encoder_json(m.encoder)},
      {"adapter", {{"rank", m.adapter.rank}, {"alpha", m.adapter.alpha}}},
      {"schedule",
       {{"family", to_string(m.schedule.family)},
        {"a", m.schedule.a},
        {"b", m.schedule.b},
        {"fixed_temperature", m.fixed_temperature ? Json(*m.fixed_temperature) : Json(nullptr)}}},
      {"train",
       {{"stage1_iterations", t.stage1_iterations},
        {"stage1_lr", t.stage1_lr},
        {"stage2_iterations", t.stage2_iterations},
        {"stage2_lr", t.stage2_lr},
        {"p_ids", t.p_ids},
        {"k_instances", t.k_instances},
        {"margin", t.margin},
        {"weight_i2tce", t.weight_i2tce},
        {"weight_triplet", t.weight_triplet},
        {"weight_id", t.weight_id},
        {"init_temperature", t.init_temperature},
        {"pretrain_iterations", t.pretrain_iterations},
        {"pretrain_lr", t.pretrain_lr}}},
      {"validation_fraction", m.validation_fraction},
      {"seed", m.seed},
      {"data",
       {{"d_gen", c.data.shape.d_gen},
        {"feat_dim", c.data.shape.feat_dim},
        {"base", detail::domain_json(c.data.base)},
        {"sequence", seq},
        {"unseen", unseen}}},
      {"stats_samples", c.stats_samples ? Json(*c.stats_samples) : Json(nullptr)},
      {"threads", c.threads},
      {"output_dir", c.output_dir},
  };
}

/// Overlays `j` on the defaults; every key must be known.
inline ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c = default_config();
  detail::JsonObject o(j, "config");
  if (const Json* e = o.child("encoder")) detail::read_encoder(*e, c.method.encoder, "config.encoder");
  if (const Json* a = o.child("adapter")) {
    detail::JsonObject ao(*a, "config.adapter");
    ao.get("rank", c.method.adapter.rank);
    ao.get("alpha", c.method.adapter.alpha);
    ao.finish();
  }
  if (const Json* s = o.child("schedule")) {
    detail::JsonObject so(*s, "config.schedule");
    if (const Json* f = so.child("family")) {
      if (!f->is_string()) fail(ErrorKind::Config, "config.schedule.family must be a string");
      try {
        c.method.schedule.family = parse_schedule_family(f->get<std::string>());
      } catch (const Error& err) {
        fail(ErrorKind::Config, err.what());
      }
    }
    so.get("a", c.method.schedule.a);
    so.get("b", c.method.schedule.b);
    if (const Json* f = so.child("fixed_temperature")) {
      if (f->is_null()) {
        c.method.fixed_temperature.reset();
      } else if (f->is_number()) {
        c.method.fixed_temperature = f->get<double>();
      } else {
        fail(ErrorKind::Config, "config.schedule.fixed_temperature must be a number or null");
      }
    }
    so.finish();
  }
  if (const Json* t = o.child("train")) detail::read_train(*t, c.method.train, "config.train");
  o.get("validation_fraction", c.method.validation_fraction);
  o.get("seed", c.method.seed);
  if (const Json* d = o.child("data")) {
    detail::JsonObject dobj(*d, "config.data");
    dobj.get("d_gen", c.data.shape.d_gen);
    dobj.get("feat_dim", c.data.shape.feat_dim);
    if (const Json* b = dobj.child("base")) detail::read_domain(*b, c.data.base, "config.data.base");
    if (const Json* s = dobj.child("sequence")) c.data.sequence = detail::read_domain_list(*s, "config.data.sequence");
    if (const Json* u = dobj.child("unseen")) c.data.unseen = detail::read_domain_list(*u, "config.data.unseen");
    dobj.finish();
  }
  if (const Json* s = o.child("stats_samples")) {
    if (s->is_null()) {
      c.stats_samples.reset();
    } else if (s->is_number_integer()) {
      c.stats_samples = s->get<int>();
    } else {
      fail(ErrorKind::Config, "config.stats_samples must be an integer or null");
    }
  }
  o.get("threads", c.threads);
  o.get("output_dir", c.output_dir);
  o.finish();
  try {
    c.validate();
  } catch (const Error& err) {
    if (err.kind() == ErrorKind::Config) throw;
    fail(ErrorKind::Config, err.what());
  }
  return c;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Config, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const Json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline ExperimentConfig load_config(const std::filesystem::path& path) { return from_json(read_json_file(path)); }

}  // namespace kadapt
