#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kadapt/numerics/tape.hpp"

namespace kadapt {

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;  // worst parameter tensor
  bool passed = false;
};

/// Builds a scalar loss on a fresh tape from parameter variables.
using LossBuilder = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Compares tape gradients with central differences, one parameter tensor at
/// a time. The error for a tensor is ||analytic - numeric|| / max(||analytic||,
/// ||numeric||); tensors whose gradients are both below 1e-10 count as exact.
inline GradCheckResult check_gradients(const std::string& name, const std::vector<MatD>& params,
                                       const LossBuilder& build, double step = 1e-4, double tolerance = 1e-4) {
  std::vector<MatD> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    auto loss = build(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<MatD>& values) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& p : values) vars.push_back(tape.constant(p));
    return build(tape, vars).value()(0, 0);
  };

  GradCheckResult result{name, 0.0, true};
  std::vector<MatD> work = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    MatD numeric(params[k].rows(), params[k].cols());
    for (Eigen::Index i = 0; i < params[k].size(); ++i) {
      const double saved = work[k].data()[i];
      work[k].data()[i] = saved + step;
      const double up = evaluate(work);
      work[k].data()[i] = saved - step;
      const double down = evaluate(work);
      work[k].data()[i] = saved;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    const double scale = std::max(analytic[k].norm(), numeric.norm());
    const double err = scale < 1e-10 ? 0.0 : (analytic[k] - numeric).norm() / scale;
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  result.passed = result.max_relative_error < tolerance;
  return result;
}

namespace detail {

// Reduces an op output to a scalar through a fixed random weighting so that
// invariant-sum outputs (softmax rows, normalized rows) still carry gradient.
inline ad::Var<double> weighted_sum(ad::Var<double> x, std::uint64_t seed) {
  return ad::sum_all(ad::mul_const(x, gaussian_matrix<double>(x.rows(), x.cols(), 1.0, seed)));
}

struct OpCase {
  std::vector<MatD> params;
  LossBuilder build;
};

inline std::map<std::string, std::function<OpCase(std::uint64_t)>> op_cases() {
  using V = ad::Var<double>;
  using Vs = std::vector<V>;
  std::map<std::string, std::function<OpCase(std::uint64_t)>> cases;
  auto g = [](Eigen::Index r, Eigen::Index c, std::uint64_t s, double sd = 1.0) {
    return gaussian_matrix<double>(r, c, sd, s);
  };

  cases["matmul"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s), g(5, 3, s + 1)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::matmul(p[0], p[1]), s + 9); }};
  };
  cases["matmul_nt"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s), g(3, 5, s + 1)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::matmul_nt(p[0], p[1]), s + 9); }};
  };
  cases["transpose"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::transpose(p[0]), s + 9); }};
  };
  cases["add"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s), g(3, 4, s + 1)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::add(p[0], p[1]), s + 9); }};
  };
  cases["bias_add"] = [g](std::uint64_t s) {
    return OpCase{{g(5, 4, s), g(1, 4, s + 1)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::add_row(p[0], p[1]), s + 9); }};
  };
  cases["scale"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::scale(p[0], -1.7), s + 9); }};
  };
  cases["mul_const"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [s, g](auto&, const Vs& p) {
                    return weighted_sum(ad::mul_const(p[0], g(3, 4, s + 5)), s + 9);
                  }};
  };
  cases["mul_scalar"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s), g(1, 1, s + 1)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::mul_scalar(p[0], p[1]), s + 9); }};
  };
  cases["exp"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s, 0.5)}, [s](auto&, const Vs& p) { return weighted_sum(ad::exp(p[0]), s + 9); }};
  };
  cases["log"] = [g](std::uint64_t s) {
    MatD x = g(3, 4, s).cwiseAbs().array() + 0.5;
    return OpCase{{x}, [s](auto&, const Vs& p) { return weighted_sum(ad::log(p[0]), s + 9); }};
  };
  cases["relu"] = [g](std::uint64_t s) {
    // Keep inputs away from the kink so central differences are exact.
    MatD x = g(4, 5, s);
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;
    return OpCase{{x}, [s](auto&, const Vs& p) { return weighted_sum(ad::relu(p[0]), s + 9); }};
  };
  cases["gelu"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s, 1.5)}, [s](auto&, const Vs& p) { return weighted_sum(ad::gelu(p[0]), s + 9); }};
  };
  cases["layer_norm"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 6, s), g(1, 6, s + 1), g(1, 6, s + 2)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::layer_norm(p[0], p[1], p[2]), s + 9); }};
  };
  cases["softmax"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::softmax_rows(p[0]), s + 9); }};
  };
  cases["log_softmax"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::log_softmax_rows(p[0]), s + 9); }};
  };
  cases["l2_normalize"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::l2_normalize_rows(p[0]), s + 9); }};
  };
  cases["concat_rows"] = [g](std::uint64_t s) {
    return OpCase{{g(2, 3, s), g(4, 3, s + 1)}, [s](auto&, const Vs& p) {
                    return weighted_sum(ad::concat_rows(std::span<const V>(p)), s + 9);
                  }};
  };
  cases["concat_cols"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 2, s), g(3, 4, s + 1)}, [s](auto&, const Vs& p) {
                    return weighted_sum(ad::concat_cols(std::span<const V>(p)), s + 9);
                  }};
  };
  cases["slice_cols"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 6, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::slice_cols(p[0], 1, 3), s + 9); }};
  };
  cases["slice_rows"] = [g](std::uint64_t s) {
    return OpCase{{g(6, 3, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::slice_rows(p[0], 2, 3), s + 9); }};
  };
  cases["embedding"] = [g](std::uint64_t s) {
    return OpCase{{g(5, 3, s)}, [s](auto&, const Vs& p) {
                    return weighted_sum(ad::gather_rows(p[0], {4, 0, 0, 2, 4, 1}), s + 9);
                  }};
  };
  cases["pick"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::pick(p[0], {0, 4, 2, 2}), s + 9); }};
  };
  cases["sum"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [](auto&, const Vs& p) { return ad::scale(ad::sum_all(p[0]), 0.3); }};
  };
  cases["mean"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [s](auto&, const Vs& p) {
                    return ad::mean_all(ad::mul_const(p[0], gaussian_matrix<double>(3, 4, 1.0, s + 3)));
                  }};
  };
  cases["sum_rows"] = [g](std::uint64_t s) {
    return OpCase{{g(3, 4, s)}, [s](auto&, const Vs& p) { return weighted_sum(ad::sum_rows(p[0]), s + 9); }};
  };
  cases["attention"] = [g](std::uint64_t s) {
    return OpCase{{g(6, 4, s), g(6, 4, s + 1), g(6, 4, s + 2)}, [s](auto&, const Vs& p) {
                    return weighted_sum(ad::attention(p[0], p[1], p[2], 3, 2), s + 9);
                  }};
  };
  cases["pairwise_distance"] = [g](std::uint64_t s) {
    return OpCase{{g(5, 3, s)},
                  [s](auto&, const Vs& p) { return weighted_sum(ad::pairwise_distance(p[0]), s + 9); }};
  };
  cases["triplet"] = [g](std::uint64_t s) {
    return OpCase{{g(8, 4, s)}, [](auto&, const Vs& p) {
                    return ad::batch_hard_triplet(ad::pairwise_distance(p[0]), {0, 0, 1, 1, 2, 2, 3, 3}, 1.5);
                  }};
  };
  cases["cross_entropy"] = [g](std::uint64_t s) {
    return OpCase{{g(4, 5, s)}, [](auto&, const Vs& p) { return ad::cross_entropy(p[0], {1, 0, 4, 2}); }};
  };
  return cases;
}

}  // namespace detail

inline std::vector<std::string> supported_ops() {
  std::vector<std::string> names;
  for (const auto& [name, _] : detail::op_cases()) names.push_back(name);
  return names;
}

/// Finite-difference check of a single op in isolation.
inline GradCheckResult check_op(const std::string& name, std::uint64_t seed = 1) {
  const auto cases = detail::op_cases();
  const auto it = cases.find(name);
  if (it == cases.end()) fail(ErrorKind::UnsupportedOp, "no gradient rule for op '" + name + "'");
  const detail::OpCase c = it->second(seed);
  return check_gradients(name, c.params, c.build);
}

}  // namespace kadapt
