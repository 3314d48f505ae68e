#include "embedlens/metrics.hpp"

#include "embedlens/error.hpp"
#include "embedlens/parallel.hpp"
#include "embedlens/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

namespace embedlens {

std::string report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = "metric";
  j["metric"] = r.metric;
  j["layer"] = r.layer;
  j["group"] = r.group;
  j["aligned"] = r.aligned;
  j["baseline"] = r.baseline;
  j["samples"] = r.samples;
  for (const auto& [k, v] : r.parameters) {
    // Integral parameters print as integers.
    if (std::isfinite(v) && v == std::floor(v) && std::abs(v) < 9007199254740992.0)
      j[k] = static_cast<std::int64_t>(v);
    else
      j[k] = v;
  }
  return j.dump();
}

double jaccard(std::vector<Eigen::Index> a, std::vector<Eigen::Index> b) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<Eigen::Index> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  const std::size_t uni = a.size() + b.size() - inter.size();
  return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

template <typename T>
double sim_k(const Vec<T>& x_proj, const Vec<T>& y_proj, Eigen::Index k) {
  if (x_proj.size() != y_proj.size())
    throw Error("metrics", "length", std::to_string(y_proj.size()),
                "sim_k inputs differ in length (" + std::to_string(x_proj.size()) + ")");
  return jaccard(top_k_ids<T>(x_proj, k), top_k_ids<T>(y_proj, k));
}

std::string pairing_name(Pairing p) {
  switch (p) {
    case Pairing::ff_kv: return "ff-kv";
    case Pairing::attn_vo: return "attn-vo";
    case Pairing::attn_qk: return "attn-qk";
  }
  return "?";
}

Pairing pairing_from_name(const std::string& name) {
  if (name == "ff-kv") return Pairing::ff_kv;
  if (name == "attn-vo") return Pairing::attn_vo;
  if (name == "attn-qk") return Pairing::attn_qk;
  throw Error("metrics", "pairing", name, "expected ff-kv, attn-vo or attn-qk");
}

Shuffler seeded_shuffler(std::uint64_t seed) {
  return [seed](int layer, std::size_t n) {
    auto rng = stream_rng(seed, static_cast<std::uint64_t>(layer));
    return random_permutation(rng, n);
  };
}

namespace {

constexpr Eigen::Index kProjectionChunk = 256;

// Top-k ids of every projected row, chunked so at most kProjectionChunk x e
// projected values are alive at once.
template <typename T>
std::vector<std::vector<Eigen::Index>> top_ids_of_rows(const Mat<T>& rows, const Projector<T>& proj,
                                                       ProjectionSide side, Eigen::Index k) {
  std::vector<std::vector<Eigen::Index>> out(rows.rows());
  for (Eigen::Index b = 0; b < rows.rows(); b += kProjectionChunk) {
    const Eigen::Index n = std::min(kProjectionChunk, rows.rows() - b);
    const Mat<T> projected = proj.project_rows(rows.middleRows(b, n), side);
    for (Eigen::Index i = 0; i < n; ++i)
      out[b + i] = top_k_ids<T>(Vec<T>(projected.row(i).transpose()), k);
  }
  return out;
}

void require_k(Eigen::Index k, Eigen::Index e, const char* op) {
  if (k < 1 || k > e)
    throw Error("metrics", "k", std::to_string(k),
                std::string(op) + " requires 1 <= k <= vocab size " + std::to_string(e));
}

}  // namespace

template <typename T>
std::vector<MetricReport> related_pairs_report(const WeightStore& store, Pairing pairing,
                                               Eigen::Index k, const Projector<T>& proj,
                                               const Shuffler& shuffle, int threads) {
  require_k(k, proj.vocab_size(), "related_pairs_report");
  const int L = store.config().num_layers;
  std::vector<MetricReport> out(L);
  parallel_for(static_cast<std::size_t>(L), threads, [&](std::size_t li) {
    const int l = static_cast<int>(li);
    ParamGroup first = ParamGroup::K_ff, second = ParamGroup::V_ff;
    if (pairing == Pairing::attn_vo) first = ParamGroup::W_V, second = ParamGroup::W_O;
    if (pairing == Pairing::attn_qk) first = ParamGroup::W_Q, second = ParamGroup::W_K;
    const auto xs = top_ids_of_rows(store.group_vectors<T>(l, first), proj, side_for(first), k);
    const auto ys = top_ids_of_rows(store.group_vectors<T>(l, second), proj, side_for(second), k);
    const std::size_t n = xs.size();
    const auto perm = shuffle(l, n);
    if (perm.size() != n)
      throw Error("metrics", "permutation", std::to_string(perm.size()),
                  "shuffle length does not match pair count " + std::to_string(n));
    double aligned = 0, baseline = 0;
    for (std::size_t j = 0; j < n; ++j) {
      aligned += jaccard(xs[j], ys[j]);
      baseline += jaccard(xs[j], ys.at(perm[j]));
    }
    auto& r = out[li];
    r.metric = "sim_k";
    r.layer = l;
    r.group = pairing_name(pairing);
    r.aligned = aligned / static_cast<double>(n);
    r.baseline = baseline / static_cast<double>(n);
    r.samples = static_cast<std::int64_t>(n);
    r.parameters["k"] = static_cast<double>(k);
  });
  return out;
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::gelu_tanh: return "gelu";
    case Activation::gelu_erf: return "gelu-erf";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation activation_from_name(const std::string& name) {
  if (name == "gelu" || name == "gelu-tanh") return Activation::gelu_tanh;
  if (name == "gelu-erf") return Activation::gelu_erf;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw Error("metrics", "activation", name, "expected gelu, gelu-erf, relu or identity");
}

template <typename T>
T apply_activation(Activation a, T x) {
  switch (a) {
    case Activation::gelu_tanh: {
      const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
      return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
    }
    case Activation::gelu_erf:
      return T(0.5) * x * (T(1) + std::erf(x / static_cast<T>(std::numbers::sqrt2)));
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::identity: return x;
  }
  return x;
}

template <typename T>
Mat<T> activation_coefficients(const Mat<T>& inputs, const ParameterGroup<T>& params,
                               CoefficientKind kind, Activation act) {
  if (params.kind != kind)
    throw Error("metrics", "kind",
                kind == CoefficientKind::ff_key ? "ff-key" : "attn-value-subhead",
                "parameter group has a different role");
  if (params.vectors.cols() != inputs.cols())
    throw Error("metrics", "params", std::to_string(params.vectors.cols()),
                "vector width does not match input width " + std::to_string(inputs.cols()));
  Mat<T> c = inputs * params.vectors.transpose();
  if (kind == CoefficientKind::ff_key) c = c.unaryExpr([act](T x) { return apply_activation(act, x); });
  return c;
}

double r_k_ids(const std::vector<Eigen::Index>& h_top,
               const std::vector<std::vector<Eigen::Index>>& active_tops, Eigen::Index k) {
  if (active_tops.empty()) throw Error("metrics", "active", "0", "R_k requires at least one active vector");
  std::vector<Eigen::Index> uni;
  for (const auto& t : active_tops) uni.insert(uni.end(), t.begin(), t.end());
  std::sort(uni.begin(), uni.end());
  uni.erase(std::unique(uni.begin(), uni.end()), uni.end());
  std::vector<Eigen::Index> h = h_top;
  std::sort(h.begin(), h.end());
  std::size_t hits = 0;
  for (auto id : h)
    if (std::binary_search(uni.begin(), uni.end(), id)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

template <typename T>
double r_k(const Vec<T>& h_proj, const std::vector<Vec<T>>& active_projs, Eigen::Index k) {
  if (active_projs.empty())
    throw Error("metrics", "active", "0", "R_k requires at least one active vector");
  std::vector<std::vector<Eigen::Index>> tops;
  for (const auto& a : active_projs) {
    if (a.size() != h_proj.size())
      throw Error("metrics", "active", std::to_string(a.size()), "projection length mismatch");
    tops.push_back(top_k_ids<T>(a, k));
  }
  return r_k_ids(top_k_ids<T>(h_proj, k), tops, k);
}

std::string rk_target_name(RkTarget t) { return t == RkTarget::per_layer ? "per-layer" : "final-logits"; }

RkTarget rk_target_from_name(const std::string& name) {
  if (name == "per-layer") return RkTarget::per_layer;
  if (name == "final-logits") return RkTarget::final_logits;
  throw Error("metrics", "target", name, "expected per-layer or final-logits");
}

template <typename T>
std::vector<MetricReport> r_k_experiment(const WeightStore& store, const HiddenStateDump& dump,
                                         const Projector<T>& proj, const RkOptions& opt) {
  const auto& cfg = store.config();
  const int L = cfg.num_layers;
  const Eigen::Index N = dump.num_tokens(), d = cfg.hidden_dim;
  if (static_cast<int>(dump.num_levels()) != L + 1)
    throw Error("metrics", "levels", std::to_string(dump.num_levels()),
                "dump must hold num_layers + 1 = " + std::to_string(L + 1) + " levels");
  if (dump.hidden_dim() != d)
    throw Error("metrics", "hidden_dim", std::to_string(dump.hidden_dim()),
                "dump width does not match checkpoint hidden size " + std::to_string(d));
  require_k(opt.k, proj.vocab_size(), "r_k_experiment");
  if (opt.m < 1 || opt.m > std::min<Eigen::Index>(cfg.ff_dim, d))
    throw Error("metrics", "m", std::to_string(opt.m),
                "m exceeds group size (FF " + std::to_string(cfg.ff_dim) + ", attention subheads " +
                    std::to_string(d) + ")");

  const auto [gamma, beta] = store.final_layer_norm<T>();
  const std::size_t levels = dump.num_levels();

  // Top-k ids of every dumped state after the final layer norm.
  std::vector<std::vector<Eigen::Index>> state_tops(levels * static_cast<std::size_t>(N));
  parallel_for(levels, opt.threads, [&](std::size_t lvl) {
    Mat<T> h = dump.level<T>(lvl);
    for (Eigen::Index t = 0; t < N; ++t)
      h.row(t) = fold_final_layer_norm<T>(h.row(t).transpose(), gamma, beta).value.transpose();
    auto tops = top_ids_of_rows(h, proj, ProjectionSide::output, opt.k);
    for (Eigen::Index t = 0; t < N; ++t) state_tops[lvl * N + t] = std::move(tops[t]);
  });

  const auto& groups = rk_groups();
  std::vector<MetricReport> out(static_cast<std::size_t>(L) * groups.size());
  parallel_for(static_cast<std::size_t>(L), opt.threads, [&](std::size_t li) {
    const int l = static_cast<int>(li);
    const auto lw = layer_weights<T>(store, l);
    const auto heads = split_heads(lw, cfg.num_heads);
    const Eigen::Index dh = cfg.head_dim();

    const auto attn_in = dump.attn_inputs().find(l);
    const Mat<T> x = attn_in != dump.attn_inputs().end() ? attn_in->second.template matrix<T>()
                                                         : dump.level<T>(l);
    const Mat<T> mask = cfg.causal() ? causal_mask<T>(N) : Mat<T>::Zero(N, N);
    const auto mixes = attention_mixes(x, lw, mask);

    Mat<T> q;
    if (auto it = dump.ff_inputs().find(l); it != dump.ff_inputs().end()) {
      q = it->second.template matrix<T>();
    } else {
      // Residual stream after attention: X + sum_i (A^i X W_V^i) W_O^i.
      q = x;
      for (const auto& h : heads) q += (mixes[h.index] * h.W_V) * h.W_O;
    }

    const Mat<T> ff_coef =
        activation_coefficients(q, ParameterGroup<T>{CoefficientKind::ff_key, lw.K},
                                CoefficientKind::ff_key, opt.activation);
    Mat<T> attn_coef(N, d);
    for (const auto& h : heads) {
      ParameterGroup<T> g{CoefficientKind::attn_value_subhead, h.W_V.transpose()};
      attn_coef.middleCols(h.index * dh, dh) = activation_coefficients(
          mixes[h.index], g, CoefficientKind::attn_value_subhead, opt.activation);
    }

    // Vectors per group (rows) and their lazily computed top-k ids.
    const Mat<T> value_subheads = lw.W_V.transpose();
    const Mat<T>* vectors[] = {&lw.K, &lw.V, &value_subheads, &lw.W_O};
    const ProjectionSide sides[] = {ProjectionSide::input, ProjectionSide::output,
                                    ProjectionSide::input, ProjectionSide::output};
    std::unordered_map<Eigen::Index, std::vector<Eigen::Index>> cache[4];
    auto tops_of = [&](int g, Eigen::Index idx) -> const std::vector<Eigen::Index>& {
      auto it = cache[g].find(idx);
      if (it != cache[g].end()) return it->second;
      const Vec<T> p = proj.project(Vec<T>(vectors[g]->row(idx).transpose()), sides[g]);
      return cache[g].emplace(idx, top_k_ids<T>(p, opt.k)).first->second;
    };

    double aligned[4] = {0, 0, 0, 0}, baseline[4] = {0, 0, 0, 0};
    const std::size_t target_level = opt.target == RkTarget::per_layer ? li + 1 : levels - 1;
    for (Eigen::Index t = 0; t < N; ++t) {
      const auto& h_top = state_tops[target_level * N + t];
      auto rng = stream_rng(opt.baseline_seed, li, static_cast<std::uint64_t>(t));
      const auto& rand_top = state_tops[uniform_index(rng, levels * static_cast<std::uint64_t>(N))];
      const auto ff_active = top_k_ids<T>(Vec<T>(ff_coef.row(t).transpose()), opt.m);
      const auto attn_active = top_k_ids<T>(Vec<T>(attn_coef.row(t).transpose()), opt.m);
      for (int g = 0; g < 4; ++g) {
        const auto& active = g < 2 ? ff_active : attn_active;
        std::vector<std::vector<Eigen::Index>> tops;
        tops.reserve(active.size());
        for (auto idx : active) tops.push_back(tops_of(g, idx));
        aligned[g] += r_k_ids(h_top, tops, opt.k);
        baseline[g] += r_k_ids(rand_top, tops, opt.k);
      }
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto& r = out[li * groups.size() + g];
      r.metric = opt.target == RkTarget::per_layer ? "r_k" : "r_k_final";
      r.layer = l;
      r.group = groups[g];
      r.aligned = aligned[g] / static_cast<double>(N);
      r.baseline = baseline[g] / static_cast<double>(N);
      r.samples = N;
      r.parameters = {{"k", static_cast<double>(opt.k)},
                      {"m", static_cast<double>(opt.m)},
                      {"seed", static_cast<double>(opt.baseline_seed)}};
    }
  });
  return out;
}

namespace {

template <typename T>
using Sparse = std::vector<std::pair<Eigen::Index, double>>;

template <typename T>
Sparse<T> sparse_keep_k(const Vec<T>& v, Eigen::Index k) {
  Sparse<T> out;
  for (const auto& [i, _] : top_k_indices<T>(v.cwiseAbs(), k)) out.emplace_back(i, static_cast<double>(v[i]));
  std::sort(out.begin(), out.end());
  return out;
}

template <typename T>
double sparse_dot(const Sparse<T>& a, const Sparse<T>& b) {
  double s = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first < b[j].first) ++i;
    else if (b[j].first < a[i].first) ++j;
    else s += a[i++].second * b[j++].second;
  }
  return s;
}

struct CosineAccumulator {
  double ab = 0, aa = 0, bb = 0;
  void add(double a, double b) {
    ab += a * b;
    aa += a * a;
    bb += b * b;
  }
  void merge(const CosineAccumulator& o) {
    ab += o.ab;
    aa += o.aa;
    bb += o.bb;
  }
  double cosine() const {
    if (aa == 0 || bb == 0)
      throw Error("metrics", "score_vector", "zero-norm",
                  "keep-k inverse score undefined for degenerate inputs");
    return ab / std::sqrt(aa * bb);
  }
};

}  // namespace

template <typename T>
double keep_k_inverse_score(const std::vector<std::pair<Vec<T>, Vec<T>>>& pairs,
                            const Projector<T>& proj, Eigen::Index k) {
  if (pairs.size() < 2)
    throw Error("metrics", "pairs", std::to_string(pairs.size()), "at least two pairs required");
  require_k(k, proj.vocab_size(), "keep_k_inverse_score");
  CosineAccumulator acc;
  for (const auto& [x, y] : pairs) {
    const double a = static_cast<double>(x.dot(y));
    const auto xs = sparse_keep_k<T>(proj.project(x, ProjectionSide::output), k);
    const auto ys = sparse_keep_k<T>(proj.project(y, ProjectionSide::input), k);
    acc.add(a, sparse_dot<T>(xs, ys));
  }
  return acc.cosine();
}

template <typename T>
double keep_k_inverse_score_all_pairs(const Mat<T>& samples, const Projector<T>& proj,
                                      Eigen::Index k, int threads) {
  const Eigen::Index n = samples.rows();
  if (n < 3) throw Error("metrics", "samples", std::to_string(n), "at least three samples required");
  require_k(k, proj.vocab_size(), "keep_k_inverse_score");
  std::vector<Sparse<T>> xs(n), ys(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    const Vec<T> v = samples.row(i).transpose();
    xs[i] = sparse_keep_k<T>(proj.project(v, ProjectionSide::output), k);
    ys[i] = sparse_keep_k<T>(proj.project(v, ProjectionSide::input), k);
  });
  const MatD gram = samples.template cast<double>() * samples.template cast<double>().transpose();
  std::vector<CosineAccumulator> rows(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    for (Eigen::Index j = static_cast<Eigen::Index>(i) + 1; j < n; ++j)
      rows[i].add(gram(i, j), sparse_dot<T>(xs[i], ys[j]));
  });
  CosineAccumulator total;
  for (const auto& r : rows) total.merge(r);
  return total.cosine();
}

template <typename T>
PearsonResult pearson(const Vec<T>& u, const Vec<T>& v) {
  if (u.size() != v.size())
    throw Error("metrics", "length", std::to_string(v.size()),
                "pearson inputs differ in length (" + std::to_string(u.size()) + ")");
  if (u.size() < 2) throw Error("metrics", "length", std::to_string(u.size()), "pearson needs >= 2 values");
  const VecD a = u.template cast<double>(), b = v.template cast<double>();
  const VecD ca = a.array() - a.mean();
  const VecD cb = b.array() - b.mean();
  const double na = ca.squaredNorm(), nb = cb.squaredNorm();
  if (na == 0 || nb == 0) return {0.0, true};
  const double r = ca.dot(cb) / std::sqrt(na * nb);
  return {std::clamp(r, -1.0, 1.0), false};
}

#define EMBEDLENS_INSTANTIATE(T)                                                                    \
  template double sim_k(const Vec<T>&, const Vec<T>&, Eigen::Index);                                \
  template std::vector<MetricReport> related_pairs_report(const WeightStore&, Pairing, Eigen::Index, \
                                                          const Projector<T>&, const Shuffler&, int); \
  template T apply_activation(Activation, T);                                                       \
  template Mat<T> activation_coefficients(const Mat<T>&, const ParameterGroup<T>&, CoefficientKind, \
                                          Activation);                                              \
  template double r_k(const Vec<T>&, const std::vector<Vec<T>>&, Eigen::Index);                     \
  template std::vector<MetricReport> r_k_experiment(const WeightStore&, const HiddenStateDump&,     \
                                                    const Projector<T>&, const RkOptions&);         \
  template double keep_k_inverse_score(const std::vector<std::pair<Vec<T>, Vec<T>>>&,               \
                                       const Projector<T>&, Eigen::Index);                          \
  template double keep_k_inverse_score_all_pairs(const Mat<T>&, const Projector<T>&, Eigen::Index,  \
                                                 int);                                              \
  template PearsonResult pearson(const Vec<T>&, const Vec<T>&);

EMBEDLENS_INSTANTIATE(float)
EMBEDLENS_INSTANTIATE(double)

#undef EMBEDLENS_INSTANTIATE

}  // namespace embedlens
