#pragma once

// Synthetic multi-domain re-identification benchmark.
//
// A sample is identity embedding + camera shift + noise in a d_gen-dimensional
// latent space, scaled per camera, rotated, concatenated with a domain-specific
// nuisance latent, then mapped to tokens*token_dim features by a fixed random
// mixing matrix plus a domain offset.

#include <Eigen/QR>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kadapt/io/binary.hpp"
#include "kadapt/numerics/matrix.hpp"

namespace kadapt {

struct BlendComponent {
  std::uint64_t gap_seed = 0;
  double weight = 1.0;
};

struct DomainSpec {
  std::string name;
  int num_identities = 50;
  int samples_per_identity = 20;
  int cameras = 4;
  std::uint64_t gap_seed = 0;
  double noise_std = 0.5;
  double camera_shift_std = 0.5;
  double camera_scale_spread = 0.2;  // per-camera scale drawn from [1 - s, 1 + s]
  int nuisance_dim = 16;
  double nuisance_std = 1.0;
  double offset_std = 1.0;
  double eval_fraction = 0.2;
  std::vector<BlendComponent> blend;  // non-empty: transform interpolates these domains

  void validate() const {
    require(!name.empty(), ErrorKind::Config, "domain name must not be empty");
    require(name.find_first_of("/\\ ,") == std::string::npos, ErrorKind::Config,
            "domain name '" + name + "' must not contain separators or spaces");
    require(num_identities >= 2, ErrorKind::Config, name + ": num_identities must be >= 2");
    require(samples_per_identity >= 4, ErrorKind::Config, name + ": samples_per_identity must be >= 4");
    require(cameras >= 2, ErrorKind::Config, name + ": cameras must be >= 2");
    require(cameras <= samples_per_identity, ErrorKind::Config, name + ": more cameras than samples per identity");
    require(noise_std >= 0 && camera_shift_std >= 0 && nuisance_std >= 0 && offset_std >= 0, ErrorKind::Config,
            name + ": standard deviations must be >= 0");
    require(camera_scale_spread >= 0 && camera_scale_spread < 1, ErrorKind::Config,
            name + ": camera_scale_spread must be in [0, 1)");
    require(nuisance_dim >= 0, ErrorKind::Config, name + ": nuisance_dim must be >= 0");
    require(eval_fraction > 0 && eval_fraction < 1, ErrorKind::Config, name + ": eval_fraction must be in (0, 1)");
    for (const auto& b : blend) require(b.weight > 0, ErrorKind::Config, name + ": blend weights must be > 0");
  }
};

struct GeneratorShape {
  int d_gen = 32;
  int feat_dim = 128;
};

enum class Split : std::uint8_t { Train, Query, Gallery };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Query: return "query";
    case Split::Gallery: return "gallery";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "query") return Split::Query;
  if (s == "gallery") return Split::Gallery;
  fail(ErrorKind::Format, "unknown split '" + s + "'");
}

struct DomainDataset {
  std::string name;
  MatF x;
  std::vector<int> identity;
  std::vector<int> camera;
  std::vector<Split> split;

  std::size_t size() const { return identity.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }

  std::vector<int> identities(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(identity[i]);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

/// Rows/labels of one split, in sample order.
struct SplitView {
  MatF x;
  std::vector<int> identity;
  std::vector<int> camera;
};

inline SplitView view(const DomainDataset& d, const std::vector<std::size_t>& rows) {
  SplitView v;
  v.x.resize(static_cast<Eigen::Index>(rows.size()), d.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    v.x.row(static_cast<Eigen::Index>(i)) = d.x.row(static_cast<Eigen::Index>(rows[i]));
    v.identity.push_back(d.identity[rows[i]]);
    v.camera.push_back(d.camera[rows[i]]);
  }
  return v;
}

inline SplitView view(const DomainDataset& d, Split s) { return view(d, d.indices(s)); }

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct DomainTransform {
  MatD map;           // feat_dim x (d_gen + nuisance_dim): mixing * blockdiag(rotation, I)
  VecD offset;        // feat_dim
  MatD camera_shift;  // cameras x d_gen
  VecD camera_scale;  // cameras
};

inline MatD random_orthogonal(Eigen::Index n, std::mt19937_64& rng) {
  const MatD g = gaussian_matrix<double>(n, n, 1.0, rng);
  Eigen::HouseholderQR<MatD> qr(g);
  MatD q = qr.householderQ();
  // Sign convention makes the factorization unique.
  const MatD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

inline DomainTransform base_transform(const DomainSpec& spec, std::uint64_t master_seed, std::uint64_t gap_seed,
                                      const GeneratorShape& shape) {
  std::mt19937_64 rng(mix_seed(master_seed, gap_seed));
  const Eigen::Index g = shape.d_gen, nd = spec.nuisance_dim, f = shape.feat_dim;
  const MatD rot = random_orthogonal(g, rng);
  const MatD mixing = gaussian_matrix<double>(f, g + nd, 1.0 / std::sqrt(static_cast<double>(g + nd)), rng);
  MatD block = MatD::Identity(g + nd, g + nd);
  block.topLeftCorner(g, g) = rot;
  DomainTransform t;
  t.map = mixing * block;
  t.offset = gaussian_matrix<double>(f, 1, spec.offset_std, rng);
  t.camera_shift = gaussian_matrix<double>(spec.cameras, g, spec.camera_shift_std, rng);
  std::uniform_real_distribution<double> sc(1.0 - spec.camera_scale_spread, 1.0 + spec.camera_scale_spread);
  t.camera_scale.resize(spec.cameras);
  for (int c = 0; c < spec.cameras; ++c) t.camera_scale(c) = sc(rng);
  return t;
}

/// The domain's own transform, or a weighted interpolation of other domains'
/// transforms when `blend` is set (the linear map is renormalized so its
/// overall scale matches a single domain's).
inline DomainTransform domain_transform(const DomainSpec& spec, std::uint64_t master_seed, const GeneratorShape& shape) {
  if (spec.blend.empty()) return base_transform(spec, master_seed, spec.gap_seed, shape);
  double total = 0.0, sq = 0.0;
  for (const auto& b : spec.blend) total += b.weight;
  DomainTransform out;
  for (const auto& b : spec.blend) {
    const double w = b.weight / total;
    sq += w * w;
    const DomainTransform t = base_transform(spec, master_seed, b.gap_seed, shape);
    if (out.map.size() == 0) {
      out.map = w * t.map;
      out.offset = w * t.offset;
      out.camera_shift = w * t.camera_shift;
      out.camera_scale = w * t.camera_scale;
    } else {
      out.map += w * t.map;
      out.offset += w * t.offset;
      out.camera_shift += w * t.camera_shift;
      out.camera_scale += w * t.camera_scale;
    }
  }
  out.map /= std::sqrt(sq);
  out.camera_shift /= std::sqrt(sq);
  return out;
}

/// Generates one domain. Identities are first_identity, first_identity+1, ...
/// The last eval_fraction of identities (at least one) form the query/gallery
/// pool; for each of them one seeded camera becomes the query camera.
inline DomainDataset generate_domain(const DomainSpec& spec, std::uint64_t master_seed, int first_identity,
                                     const GeneratorShape& shape = {}) {
  spec.validate();
  const DomainTransform tf = domain_transform(spec, master_seed, shape);
  std::mt19937_64 rng(mix_seed(mix_seed(master_seed, spec.gap_seed), 0x5A17));
  const Eigen::Index g = shape.d_gen;
  const int ids = spec.num_identities, per = spec.samples_per_identity;
  const int n = ids * per;
  const int eval_ids = std::max(1, static_cast<int>(std::lround(spec.eval_fraction * ids)));
  require(eval_ids < ids, ErrorKind::Config, spec.name + ": no identities left for training");

  const MatD centers = gaussian_matrix<double>(ids, g, 1.0, rng);
  std::uniform_int_distribution<int> pick_cam(0, spec.cameras - 1);
  std::vector<int> query_cam(static_cast<std::size_t>(ids), -1);
  for (int i = ids - eval_ids; i < ids; ++i) query_cam[static_cast<std::size_t>(i)] = pick_cam(rng);

  DomainDataset d;
  d.name = spec.name;
  MatD latent(n, g);
  MatD full(n, g + spec.nuisance_dim);
  for (int i = 0; i < ids; ++i) {
    for (int k = 0; k < per; ++k) {
      const int row = i * per + k;
      const int cam = k % spec.cameras;
      VecD h = centers.row(i).transpose() + tf.camera_shift.row(cam).transpose();
      if (spec.noise_std > 0) h += gaussian_matrix<double>(g, 1, spec.noise_std, rng);
      h *= tf.camera_scale(cam);
      latent.row(row) = h.transpose();
      full.row(row).head(g) = h.transpose();
      if (spec.nuisance_dim > 0)
        full.row(row).tail(spec.nuisance_dim) = gaussian_matrix<double>(1, spec.nuisance_dim, spec.nuisance_std, rng);
      d.identity.push_back(first_identity + i);
      d.camera.push_back(cam);
      const int qc = query_cam[static_cast<std::size_t>(i)];
      d.split.push_back(qc < 0 ? Split::Train : (cam == qc ? Split::Query : Split::Gallery));
    }
  }
  d.x = ((full * tf.map.transpose()).rowwise() + tf.offset.transpose()).cast<float>();

  // Identity must dominate camera and noise in the generating space.
  double within = 0.0, across = 0.0;
  long nw = 0, na = 0;
  for (int a = 0; a < n; a += 3) {
    for (int b = a + 1; b < n; ++b) {
      const double dist = (latent.row(a) - latent.row(b)).norm();
      if (d.identity[static_cast<std::size_t>(a)] == d.identity[static_cast<std::size_t>(b)]) {
        if (d.camera[static_cast<std::size_t>(a)] != d.camera[static_cast<std::size_t>(b)]) {
          within += dist;
          ++nw;
        }
      } else {
        across += dist;
        ++na;
      }
    }
  }
  require(nw > 0 && na > 0 && within / nw < across / na, ErrorKind::Data,
          spec.name + ": within-identity cross-camera distance is not below cross-identity distance");
  return d;
}

/// Identity disjointness across domains.
inline void check_disjoint(const std::vector<const DomainDataset*>& domains) {
  std::map<int, std::string> owner;
  for (const auto* d : domains)
    for (int id : d->identity) {
      auto [it, inserted] = owner.emplace(id, d->name);
      if (!inserted && it->second != d->name)
        fail(ErrorKind::Protocol, "identity " + std::to_string(id) + " appears in both " + it->second + " and " + d->name);
    }
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDataMagic = "ADLDATA0";
inline constexpr std::uint32_t kDataVersion = 1;

inline void save_dataset(const DomainDataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = io::open_out(dir / "data.bin");
    io::write_magic(out, kDataMagic);
    io::write_le<std::uint32_t>(out, kDataVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.x.rows()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.x.cols()));
    for (Eigen::Index i = 0; i < d.x.size(); ++i) io::write_le<float>(out, d.x.data()[i]);
    if (!out) fail(ErrorKind::Io, "failed writing " + (dir / "data.bin").string());
  }
  std::ofstream meta(dir / "meta.csv");
  if (!meta) fail(ErrorKind::Io, "cannot write " + (dir / "meta.csv").string());
  meta << "sample_index,identity,camera,split\n";
  for (std::size_t i = 0; i < d.size(); ++i)
    meta << i << ',' << d.identity[i] << ',' << d.camera[i] << ',' << to_string(d.split[i]) << '\n';
}

inline DomainDataset load_dataset(const std::filesystem::path& dir, const std::string& name = {}) {
  DomainDataset d;
  d.name = name.empty() ? dir.filename().string() : name;
  {
    auto in = io::open_in(dir / "data.bin");
    io::expect_magic(in, kDataMagic);
    const auto version = io::read_le<std::uint32_t>(in, "dataset header");
    if (version != kDataVersion) fail(ErrorKind::Format, "unsupported dataset version " + std::to_string(version));
    const auto n = io::read_le<std::uint32_t>(in, "dataset header");
    const auto f = io::read_le<std::uint32_t>(in, "dataset header");
    if (f == 0) fail(ErrorKind::Format, "dataset feature dimension is zero");
    d.x.resize(n, f);
    for (Eigen::Index i = 0; i < d.x.size(); ++i) d.x.data()[i] = io::read_le<float>(in, "dataset body");
    io::expect_eof(in, "dataset file");
  }
  std::ifstream meta(dir / "meta.csv");
  if (!meta) fail(ErrorKind::Io, "cannot open " + (dir / "meta.csv").string());
  std::string line;
  std::getline(meta, line);
  if (line != "sample_index,identity,camera,split") fail(ErrorKind::Format, "bad meta.csv header");
  std::size_t expected = 0;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string idx, id, cam, split;
    if (!std::getline(ss, idx, ',') || !std::getline(ss, id, ',') || !std::getline(ss, cam, ',') ||
        !std::getline(ss, split))
      fail(ErrorKind::Format, "malformed meta.csv row: " + line);
    try {
      if (std::stoull(idx) != expected) fail(ErrorKind::Format, "meta.csv rows out of order at " + idx);
      d.identity.push_back(std::stoi(id));
      d.camera.push_back(std::stoi(cam));
    } catch (const std::logic_error&) {
      fail(ErrorKind::Format, "malformed meta.csv row: " + line);
    }
    d.split.push_back(parse_split(split));
    ++expected;
  }
  if (static_cast<Eigen::Index>(expected) != d.x.rows())
    fail(ErrorKind::Format, "meta.csv has " + std::to_string(expected) + " rows for " + std::to_string(d.x.rows()) +
                                " samples");
  return d;
}

}  // namespace kadapt
