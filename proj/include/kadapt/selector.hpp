#pragma once

// Turns per-domain distances into adapter mixing weights. The temperature of
// the softmax shrinks with depth so shallow blocks blend adapters and deep
// blocks commit to the closest domain.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kadapt/error.hpp"

namespace kadapt {

/// Mixing weights over registered domains, in registration order.
struct MixWeights {
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  double operator[](std::size_t i) const { return weights[i]; }

  static MixWeights one_hot(std::size_t n, std::size_t k) {
    require(k < n, ErrorKind::Index, "one_hot index out of range");
    MixWeights m{std::vector<double>(n, 0.0)};
    m.weights[k] = 1.0;
    return m;
  }
};

enum class ScheduleFamily { Linear, Cosinoidal, Exponential, Logarithmic, SquareRoot };

inline const std::vector<ScheduleFamily>& all_schedule_families() {
  static const std::vector<ScheduleFamily> all{ScheduleFamily::Exponential, ScheduleFamily::Cosinoidal,
                                               ScheduleFamily::Linear, ScheduleFamily::Logarithmic,
                                               ScheduleFamily::SquareRoot};
  return all;
}

inline std::string to_string(ScheduleFamily f) {
  switch (f) {
    case ScheduleFamily::Linear: return "linear";
    case ScheduleFamily::Cosinoidal: return "cosinoidal";
    case ScheduleFamily::Exponential: return "exponential";
    case ScheduleFamily::Logarithmic: return "logarithmic";
    case ScheduleFamily::SquareRoot: return "square_root";
  }
  return "?";
}

inline ScheduleFamily parse_schedule_family(const std::string& name) {
  for (auto f : all_schedule_families())
    if (to_string(f) == name) return f;
  if (name == "cosine" || name == "cosinodial") return ScheduleFamily::Cosinoidal;
  if (name == "sqrt") return ScheduleFamily::SquareRoot;
  fail(ErrorKind::Config, "unknown schedule family '" + name + "'");
}

struct ScheduleConfig {
  ScheduleFamily family = ScheduleFamily::Cosinoidal;
  double a = 0.5;
  double b = 0.1;
  int total_layers = 4;

  void validate() const {
    require(a >= 0.0, ErrorKind::Parameter, "schedule scale a must be >= 0");
    require(b > 0.0, ErrorKind::Parameter, "schedule shift b must be > 0");
    require(total_layers >= 1, ErrorKind::Parameter, "schedule needs at least one layer");
  }
};

/// Decreasing shape g on [0, 1] with g(0) = 1 and g(1) = 0. Exponential and
/// cosinoidal are concave, logarithmic and square-root convex.
inline double schedule_g(ScheduleFamily family, double x) {
  require(x >= 0.0 && x <= 1.0, ErrorKind::Domain, "schedule ratio " + std::to_string(x) + " outside [0, 1]");
  constexpr double e = std::numbers::e;
  switch (family) {
    case ScheduleFamily::Linear: return 1.0 - x;
    case ScheduleFamily::Cosinoidal: return x == 1.0 ? 0.0 : std::cos(std::numbers::pi * x / 2.0);
    case ScheduleFamily::Exponential: return 1.0 - (std::exp(x) - 1.0) / (e - 1.0);
    case ScheduleFamily::Logarithmic: return 1.0 - std::log1p((e - 1.0) * x);
    case ScheduleFamily::SquareRoot: return 1.0 - std::sqrt(x);
  }
  return 0.0;
}

/// Softmax temperature for 1-based block index `layer`: a * g(layer / L) + b.
inline double temperature(int layer, const ScheduleConfig& cfg) {
  cfg.validate();
  require(layer >= 1 && layer <= cfg.total_layers, ErrorKind::Index,
          "layer " + std::to_string(layer) + " outside [1, " + std::to_string(cfg.total_layers) + "]");
  const double x = static_cast<double>(layer) / static_cast<double>(cfg.total_layers);
  return cfg.a * schedule_g(cfg.family, x) + cfg.b;
}

/// softmax_i(-sqrt(d_i) / tau), evaluated with max-subtraction.
inline MixWeights similarity(std::span<const double> distances, double tau) {
  require(!distances.empty(), ErrorKind::EmptyInput, "similarity needs at least one distance");
  require(tau > 0.0 && std::isfinite(tau), ErrorKind::Parameter, "temperature must be positive");
  std::vector<double> scores(distances.size());
  for (std::size_t i = 0; i < distances.size(); ++i) {
    require(distances[i] >= 0.0 && std::isfinite(distances[i]), ErrorKind::Parameter,
            "distances must be finite and non-negative");
    scores[i] = -std::sqrt(distances[i]) / tau;
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (auto& s : scores) {
    s = std::exp(s - mx);
    total += s;
  }
  for (auto& s : scores) s /= total;
  return MixWeights{std::move(scores)};
}

/// How test-time (or training-time) mixing weights are produced per block.
struct MixPolicy {
  enum class Kind { Scheduled, Fixed, OneHot };
  Kind kind = Kind::Scheduled;
  ScheduleConfig schedule;
  double fixed_tau = 0.05;

  static MixPolicy scheduled(ScheduleConfig s) { return {Kind::Scheduled, s, 0.0}; }
  static MixPolicy fixed(double tau) { return {Kind::Fixed, {}, tau}; }
  static MixPolicy one_hot() { return {Kind::OneHot, {}, 0.0}; }
};

/// Per-block mixing vectors for `blocks` blocks from one distance vector.
inline std::vector<MixWeights> block_mixing(std::span<const double> distances, const MixPolicy& policy, int blocks) {
  require(blocks >= 1, ErrorKind::Parameter, "block_mixing needs at least one block");
  std::vector<MixWeights> out;
  out.reserve(static_cast<std::size_t>(blocks));
  if (policy.kind == MixPolicy::Kind::OneHot) {
    require(!distances.empty(), ErrorKind::EmptyInput, "one-hot selection needs at least one distance");
    const auto best = static_cast<std::size_t>(std::min_element(distances.begin(), distances.end()) - distances.begin());
    for (int l = 0; l < blocks; ++l) out.push_back(MixWeights::one_hot(distances.size(), best));
    return out;
  }
  for (int l = 1; l <= blocks; ++l) {
    double tau = policy.fixed_tau;
    if (policy.kind == MixPolicy::Kind::Scheduled) {
      ScheduleConfig s = policy.schedule;
      s.total_layers = blocks;
      tau = temperature(l, s);
    }
    out.push_back(similarity(distances, tau));
  }
  return out;
}

inline double entropy(const MixWeights& m) {
  double h = 0.0;
  for (double w : m.weights)
    if (w > 0.0) h -= w * std::log(w);
  return h;
}

}  // namespace kadapt
