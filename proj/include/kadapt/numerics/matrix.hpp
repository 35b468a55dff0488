#pragma once

// Dense storage shared by every module. Row-major Eigen matrices; float for
// training tensors, double for statistics, distances and gradient checks.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

#include "kadapt/error.hpp"

namespace kadapt {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecD = Vec<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// ||a - b||_F / max(||b||_F, tiny)
template <typename A, typename B>
double relative_frobenius(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double denom = std::max(static_cast<double>(b.norm()), 1e-300);
  return static_cast<double>((a - b).norm()) / denom;
}

/// Fills with N(0, std^2) draws from a 64-bit Mersenne twister seeded with `seed`.
template <typename T>
Mat<T> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
Mat<T> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gaussian_matrix<T>(rows, cols, stddev, rng);
}

/// Mixes two 64-bit values into a well-scrambled seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace kadapt
