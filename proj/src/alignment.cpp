#include "embedlens/alignment.hpp"

#include "embedlens/error.hpp"
#include "embedlens/io.hpp"
#include "embedlens/parallel.hpp"
#include "embedlens/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

namespace embedlens {

namespace {

struct Standardized {
  std::vector<MatD> layers;  // per layer: sample x width, rows centered with unit norm
  bool degenerate = false;
};

template <typename T>
Standardized standardize_model(const WeightStore& store, int model_id, ParamGroup group,
                               const Projector<T>& proj, const AlignOptions& opt) {
  const int L = store.config().num_layers;
  Standardized out;
  out.layers.resize(L);
  std::vector<char> degenerate(L, 0);
  parallel_for(static_cast<std::size_t>(L), opt.threads, [&](std::size_t li) {
    const int l = static_cast<int>(li);
    const Mat<T> all = store.group_vectors<T>(l, group);
    auto rng = stream_rng(opt.seed, static_cast<std::uint64_t>(model_id), li,
                          static_cast<std::uint64_t>(group));
    const auto idx =
        sample_without_replacement(rng, static_cast<std::size_t>(all.rows()),
                                   static_cast<std::size_t>(opt.sample));
    Mat<T> picked(static_cast<Eigen::Index>(idx.size()), all.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) picked.row(i) = all.row(idx[i]);
    MatD z = opt.projected ? proj.project_rows(picked, side_for(group)).template cast<double>()
                           : picked.template cast<double>();
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      z.row(r).array() -= z.row(r).mean();
      const double n = z.row(r).norm();
      if (n == 0) {
        degenerate[li] = 1;
        z.row(r).setZero();
      } else {
        z.row(r) /= n;
      }
    }
    out.layers[li] = std::move(z);
  });
  out.degenerate = std::any_of(degenerate.begin(), degenerate.end(), [](char c) { return c != 0; });
  return out;
}

}  // namespace

template <typename T>
LayerSimilarity layer_similarity(const WeightStore& a, const WeightStore& b, ParamGroup group,
                                 const Projector<T>& proj_a, const Projector<T>& proj_b,
                                 const AlignOptions& opt) {
  const auto& ca = a.config();
  const auto& cb = b.config();
  if (ca.vocab_size != cb.vocab_size)
    throw Error("alignment", "vocab_size", std::to_string(cb.vocab_size),
                "models differ in vocabulary size (" + std::to_string(ca.vocab_size) + ")");
  if (!opt.projected && ca.hidden_dim != cb.hidden_dim)
    throw Error("alignment", "hidden_dim", std::to_string(cb.hidden_dim),
                "unprojected comparison needs equal hidden sizes");
  if (opt.sample < 1) throw Error("alignment", "sample", std::to_string(opt.sample), "must be >= 1");

  const Eigen::Index size_a = a.group_vectors<T>(0, group).rows();
  const Eigen::Index size_b = b.group_vectors<T>(0, group).rows();
  AlignOptions eff = opt;
  eff.sample = std::min({opt.sample, size_a, size_b});
  if (eff.sample < opt.sample)
    log_line("warn", "alignment",
             "sample " + std::to_string(opt.sample) + " exceeds " + group_name(group) +
                 " group size; clamped to " + std::to_string(eff.sample));

  const auto za = standardize_model(a, 0, group, proj_a, eff);
  const auto zb = standardize_model(b, 1, group, proj_b, eff);

  LayerSimilarity out;
  out.group = group_name(group);
  out.sample = eff.sample;
  out.projected = opt.projected;
  out.degenerate = za.degenerate || zb.degenerate;
  out.S = MatD::Zero(ca.num_layers, cb.num_layers);
  parallel_for(static_cast<std::size_t>(ca.num_layers), opt.threads, [&](std::size_t la) {
    for (int lb = 0; lb < cb.num_layers; ++lb) {
      const MatD corr = za.layers[la] * zb.layers[lb].transpose();
      out.S(static_cast<Eigen::Index>(la), lb) = corr.cwiseAbs().mean();
    }
  });
  return out;
}

namespace {

// Min-cost assignment on a square matrix (potential-based O(n^3) Hungarian).
// Returns row -> column plus the optimal dual potentials.
struct SquareSolution {
  std::vector<int> row_to_col;
  std::vector<double> u, v;
};

SquareSolution solve_min_square(const MatD& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  SquareSolution s;
  s.row_to_col.assign(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j]) s.row_to_col[p[j] - 1] = j - 1;
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

// Lexicographically smallest optimal assignment for rows [0, real_rows) of a
// square max-similarity matrix `sim`; extra rows are zero-similarity padding.
std::vector<int> lexicographic_optimum(const MatD& sim, int real_rows) {
  const int n = static_cast<int>(sim.rows());
  const MatD cost = -sim;
  auto sol = solve_min_square(cost);
  const double scale = std::max(1.0, sim.cwiseAbs().maxCoeff());
  const double tol = 1e-9 * scale * n;
  auto tight = [&](int i, int j) { return cost(i, j) - sol.u[i] - sol.v[j] <= tol; };

  std::vector<int> row_to_col = sol.row_to_col;
  std::vector<int> col_to_row(n, -1);
  for (int i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;
  std::vector<char> fixed(n, 0);

  for (int i = 0; i < real_rows; ++i) {
    for (int c = 0; c < n; ++c) {
      if (!tight(i, c)) continue;
      if (row_to_col[i] == c) break;
      const int displaced = col_to_row[c];
      if (fixed[displaced]) continue;
      const int freed = row_to_col[i];
      // Re-match `displaced` along tight edges so that it ends on `freed`,
      // never touching fixed rows, row i or column c.
      std::vector<char> seen(n, 0);
      seen[c] = 1;
      std::vector<std::pair<int, int>> path;
      std::function<bool(int)> dfs = [&](int r) -> bool {
        for (int j = 0; j < n; ++j) {
          if (seen[j] || !tight(r, j)) continue;
          seen[j] = 1;
          if (j == freed) {
            path.emplace_back(r, j);
            return true;
          }
          const int next = col_to_row[j];
          if (fixed[next] || next == i) continue;
          if (dfs(next)) {
            path.emplace_back(r, j);
            return true;
          }
        }
        return false;
      };
      if (!dfs(displaced)) continue;
      for (auto [r, j] : path) {
        row_to_col[r] = j;
        col_to_row[j] = r;
      }
      row_to_col[i] = c;
      col_to_row[c] = i;
      break;
    }
    fixed[i] = 1;
  }
  row_to_col.resize(real_rows);
  return row_to_col;
}

}  // namespace

AlignmentResult hungarian(const MatD& S) {
  if (!S.allFinite()) throw Error("alignment", "S", "non-finite", "similarity matrix has non-finite entries");
  const int ra = static_cast<int>(S.rows()), rb = static_cast<int>(S.cols());
  AlignmentResult out;
  if (ra == 0 || rb == 0) return out;
  const bool transposed = ra > rb;
  const MatD base = transposed ? MatD(S.transpose()) : S;
  const int small = static_cast<int>(base.rows()), large = static_cast<int>(base.cols());
  MatD square = MatD::Zero(large, large);
  square.topRows(small) = base;
  const auto assign = lexicographic_optimum(square, small);

  out.permutation.assign(ra, -1);
  for (int i = 0; i < small; ++i) {
    if (transposed) out.permutation[assign[i]] = i;
    else out.permutation[i] = assign[i];
  }
  for (int a = 0; a < ra; ++a)
    if (out.permutation[a] >= 0) out.objective += S(a, out.permutation[a]);
  return out;
}

template <typename T>
AlignmentReport align_models(const WeightStore& a, const WeightStore& b,
                             const std::vector<ParamGroup>& groups, const Projector<T>& proj_a,
                             const Projector<T>& proj_b, const AlignOptions& opt) {
  if (groups.empty()) throw Error("alignment", "groups", "[]", "no parameter groups requested");
  AlignmentReport report;
  MatD mean = MatD::Zero(a.config().num_layers, b.config().num_layers);
  for (auto g : groups) {
    auto sim = layer_similarity(a, b, g, proj_a, proj_b, opt);
    auto result = hungarian(sim.S);
    result.group = group_name(g);
    mean += sim.S;
    result.similarities.push_back(std::move(sim));
    report.per_group.push_back(std::move(result));
  }
  mean /= static_cast<double>(groups.size());
  report.mean = hungarian(mean);
  report.mean.group = "mean";
  LayerSimilarity agg;
  agg.S = mean;
  agg.group = "mean";
  agg.projected = opt.projected;
  agg.sample = report.per_group.front().similarities.front().sample;
  for (const auto& r : report.per_group) agg.degenerate |= r.similarities.front().degenerate;
  report.mean.similarities.push_back(std::move(agg));
  return report;
}

std::string similarity_to_csv(const MatD& S) {
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    for (Eigen::Index j = 0; j < S.cols(); ++j) os << (j ? "," : "") << S(i, j);
    os << "\n";
  }
  return os.str();
}

std::string alignment_to_json(const AlignmentReport& report) {
  nlohmann::ordered_json j;
  auto one = [](const AlignmentResult& r) {
    nlohmann::ordered_json g;
    g["group"] = r.group;
    g["permutation"] = r.permutation;
    g["objective"] = r.objective;
    int diagonal = 0;
    for (std::size_t l = 0; l < r.permutation.size(); ++l)
      if (r.permutation[l] == static_cast<int>(l)) ++diagonal;
    g["diagonal_matches"] = diagonal;
    if (!r.similarities.empty()) {
      g["sample"] = r.similarities.front().sample;
      g["projected"] = r.similarities.front().projected;
      g["degenerate"] = r.similarities.front().degenerate;
    }
    return g;
  };
  j["groups"] = nlohmann::ordered_json::array();
  for (const auto& r : report.per_group) j["groups"].push_back(one(r));
  j["mean"] = one(report.mean);
  return j.dump(2) + "\n";
}

#define EMBEDLENS_INSTANTIATE(T)                                                                  \
  template LayerSimilarity layer_similarity(const WeightStore&, const WeightStore&, ParamGroup,   \
                                            const Projector<T>&, const Projector<T>&,             \
                                            const AlignOptions&);                                 \
  template AlignmentReport align_models(const WeightStore&, const WeightStore&,                   \
                                        const std::vector<ParamGroup>&, const Projector<T>&,      \
                                        const Projector<T>&, const AlignOptions&);

EMBEDLENS_INSTANTIATE(float)
EMBEDLENS_INSTANTIATE(double)

#undef EMBEDLENS_INSTANTIATE

}  // namespace embedlens
