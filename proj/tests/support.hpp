#pragma once

// Test-only helpers: seeded generators and straight-line oracles that do not
// share code paths with the library routines they check.

#include "embedlens/algebra.hpp"
#include "embedlens/projection.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace testing {

using embedlens::Mat;
using embedlens::Vec;

template <typename T>
Mat<T> random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(nd(rng));
  return m;
}

template <typename T>
Vec<T> random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  return random_matrix<T>(rng, n, 1, scale);
}

// Naive triple loop: s += a(i,k) * b(k,j) over k ascending.
template <typename T>
Mat<T> naive_matmul(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> out(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      T s = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// Full materialization + stable sort by (score desc, src asc, dst asc).
template <typename T>
std::vector<embedlens::PairScore> brute_force_top_pairs(const Mat<T>& full, std::size_t k) {
  std::vector<embedlens::PairScore> all;
  for (Eigen::Index i = 0; i < full.rows(); ++i)
    for (Eigen::Index j = 0; j < full.cols(); ++j)
      all.push_back({i, j, static_cast<double>(full(i, j))});
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  all.resize(std::min(k, all.size()));
  return all;
}

// Stable full sort of (index, value) by value descending.
template <typename T>
std::vector<Eigen::Index> sort_oracle_top_k(const Vec<T>& v, std::size_t k) {
  std::vector<Eigen::Index> idx(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] > v[b]; });
  idx.resize(k);
  return idx;
}

inline std::set<Eigen::Index> as_set(const std::vector<Eigen::Index>& v) { return {v.begin(), v.end()}; }

// Pseudo-inverse of a full-row-rank wide matrix via the normal equations:
// A+ = A^T (A A^T)^-1.
inline embedlens::MatD normal_equation_pinv(const embedlens::MatD& a) {
  return a.transpose() * (a * a.transpose()).inverse();
}

inline double plain_pearson(const std::vector<double>& u, const std::vector<double>& v) {
  const double n = static_cast<double>(u.size());
  double mu = 0, mv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= n;
  mv /= n;
  double suv = 0, suu = 0, svv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    suv += (u[i] - mu) * (v[i] - mv);
    suu += (u[i] - mu) * (u[i] - mu);
    svv += (v[i] - mv) * (v[i] - mv);
  }
  if (suu == 0 || svv == 0) return 0;
  return suv / std::sqrt(suu * svv);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("embedlens_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
