#pragma once

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <vector>

#include "kadapt/numerics/matrix.hpp"

namespace kadapt {

struct SymEig {
  VecD values;   // ascending
  MatD vectors;  // column k pairs with values[k]
};

namespace detail {

inline double off_diagonal_norm2(const MatD& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return s;
}

}  // namespace detail

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// Symmetry is checked to 1e-9 relative to the largest entry. Sweeps stop once
/// the off-diagonal mass falls below n * (eps * ||A||_F)^2 or after `max_sweeps`.
inline SymEig sym_eig(const MatD& input, int max_sweeps = 100) {
  require(input.rows() == input.cols(), ErrorKind::Dimension,
          "sym_eig needs a square matrix, got " + std::to_string(input.rows()) + "x" +
              std::to_string(input.cols()));
  require(input.allFinite(), ErrorKind::Parameter, "sym_eig input contains NaN/Inf");
  const Eigen::Index n = input.rows();
  const double scale = n == 0 ? 0.0 : input.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > 1e-9 * std::max(scale, 1e-300))
        fail(ErrorKind::Symmetry, "sym_eig input is not symmetric at (" + std::to_string(i) +
                                      "," + std::to_string(j) + ")");

  MatD a = 0.5 * (input + input.transpose());
  MatD v = MatD::Identity(n, n);
  const double total = a.squaredNorm();
  const double eps = std::numeric_limits<double>::epsilon();
  const double tol = static_cast<double>(n) * eps * eps * total;

  bool converged = n <= 1 || total == 0.0;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    if (detail::off_diagonal_norm2(a) <= tol) {
      converged = true;
      break;
    }
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        if (std::abs(app) + 100.0 * std::abs(apq) == std::abs(app) &&
            std::abs(aqq) + 100.0 * std::abs(apq) == std::abs(aqq)) {
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          continue;
        }
        // Rotation angle annihilating a(p,q); the smaller root keeps |theta| <= pi/4.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged && detail::off_diagonal_norm2(a) > tol)
    fail(ErrorKind::Convergence, "Jacobi eigensolver did not converge in " +
                                     std::to_string(max_sweeps) + " sweeps");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return a(x, x) < a(y, y); });

  SymEig out{VecD(n), MatD(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values(k) = a(order[k], order[k]);
    out.vectors.col(k) = v.col(order[k]);
  }
  return out;
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues below -1e-6 * max|lambda| are rejected as not PSD; smaller
/// negative values are estimation noise and are clamped to zero.
inline MatD sqrtm_psd(const MatD& a) {
  const SymEig eig = sym_eig(a);
  const Eigen::Index n = a.rows();
  if (n == 0) return MatD(0, 0);
  const double max_abs = eig.values.cwiseAbs().maxCoeff();
  VecD roots(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double lambda = eig.values(k);
    if (lambda < -1e-6 * max_abs)
      fail(ErrorKind::NotPsd, "eigenvalue " + std::to_string(lambda) + " is materially negative");
    roots(k) = std::sqrt(std::max(lambda, 0.0));
  }
  MatD r = eig.vectors * roots.asDiagonal() * eig.vectors.transpose();
  return 0.5 * (r + r.transpose());
}

}  // namespace kadapt
