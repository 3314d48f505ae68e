#include "embedlens/projection.hpp"

#include "embedlens/error.hpp"
#include "embedlens/parallel.hpp"

#include <algorithm>
#include <queue>

namespace embedlens {

std::string inverse_kind_name(InverseKind k) {
  return k == InverseKind::transpose ? "transpose" : "pinv";
}

InverseKind inverse_kind_from_name(const std::string& name) {
  if (name == "transpose") return InverseKind::transpose;
  if (name == "pinv" || name == "pseudo_inverse") return InverseKind::pseudo_inverse;
  throw Error("projection", "inverse", name, "expected transpose or pinv");
}

ProjectionSide side_for(ParamGroup g) {
  return g == ParamGroup::V_ff || g == ParamGroup::W_O ? ProjectionSide::output
                                                       : ProjectionSide::input;
}

template <typename T>
Projector<T>::Projector(Mat<T> embedding, ProjectionSpec spec, std::optional<Mat<T>> pinv)
    : spec_(spec), output_map_(std::move(embedding)) {
  if (output_map_.rows() > output_map_.cols())
    throw Error("projection", "embedding",
                std::to_string(output_map_.rows()) + "x" + std::to_string(output_map_.cols()),
                "E must be d x e with d <= e");
  mean_ = output_map_.rowwise().mean();
  if (spec_.mean_center) output_map_.colwise() -= mean_;
  if (spec_.inverse_kind == InverseKind::transpose) {
    input_map_ = output_map_;
  } else {
    if (pinv) {
      if (pinv->rows() != output_map_.cols() || pinv->cols() != output_map_.rows())
        throw Error("projection", "pinv",
                    std::to_string(pinv->rows()) + "x" + std::to_string(pinv->cols()),
                    "cached pseudo-inverse has wrong shape");
      input_map_ = pinv->transpose();
    } else {
      input_map_ = pseudo_inverse(output_map_, "embedding.E").matrix.transpose();
    }
  }
}

template <typename T>
Vec<T> Projector<T>::project(const Vec<T>& v, ProjectionSide side) const {
  const auto& m = map(side);
  if (v.size() != m.rows())
    throw Error("projection", "vector", std::to_string(v.size()),
                "length does not match hidden size " + std::to_string(m.rows()));
  return (v.transpose() * m).transpose();
}

template <typename T>
Mat<T> Projector<T>::project_rows(const Mat<T>& rows, ProjectionSide side) const {
  const auto& m = map(side);
  if (rows.cols() != m.rows())
    throw Error("projection", "rows", std::to_string(rows.cols()),
                "width does not match hidden size " + std::to_string(m.rows()));
  return rows * m;
}

template <typename T>
void Projector<T>::set_layer_norm(Vec<T> gamma, Vec<T> beta) {
  layer_norm_.emplace(std::move(gamma), std::move(beta));
}

template <typename T>
Vec<T> Projector<T>::project_hidden(const Vec<T>& h) const {
  if (!spec_.fold_layer_norm) return project(h, ProjectionSide::output);
  if (layer_norm_)
    return project(fold_final_layer_norm(h, layer_norm_->first, layer_norm_->second).value,
                   ProjectionSide::output);
  const Vec<T> ones = Vec<T>::Ones(h.size()), zeros = Vec<T>::Zero(h.size());
  return project(fold_final_layer_norm(h, ones, zeros).value, ProjectionSide::output);
}

template <typename T>
Vec<T> project_vector(const Vec<T>& v, const Mat<T>& embedding, const ProjectionSpec& spec) {
  return Projector<T>(embedding, spec).project(v);
}

template <typename T>
FactoredMatrix<T> project_qk(const FactoredMatrix<T>& w_qk, const Projector<T>& proj) {
  if (w_qk.rows() != proj.hidden_dim() || w_qk.cols() != proj.hidden_dim())
    throw Error("projection", "W_QK", std::to_string(w_qk.rows()) + "x" + std::to_string(w_qk.cols()),
                "interaction matrix must be d x d");
  const auto& p = proj.input_map();
  return FactoredMatrix<T>(p.transpose() * w_qk.left(), w_qk.right() * p);
}

template <typename T>
FactoredMatrix<T> project_vo(const FactoredMatrix<T>& w_vo, const Projector<T>& proj) {
  if (w_vo.rows() != proj.hidden_dim() || w_vo.cols() != proj.hidden_dim())
    throw Error("projection", "W_VO", std::to_string(w_vo.rows()) + "x" + std::to_string(w_vo.cols()),
                "interaction matrix must be d x d");
  return FactoredMatrix<T>(proj.input_map().transpose() * w_vo.left(),
                           w_vo.right() * proj.output_map());
}

namespace {

struct WorstOnTop {
  bool operator()(const PairScore& a, const PairScore& b) const { return ranks_before(a, b); }
};

using PairHeap = std::priority_queue<PairScore, std::vector<PairScore>, WorstOnTop>;

void offer(PairHeap& heap, const PairScore& p, std::size_t k) {
  if (heap.size() < k) {
    heap.push(p);
  } else if (ranks_before(p, heap.top())) {
    heap.pop();
    heap.push(p);
  }
}

std::vector<PairScore> drain_sorted(PairHeap& heap) {
  std::vector<PairScore> out;
  out.reserve(heap.size());
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

}  // namespace

template <typename T>
std::vector<PairScore> top_pairs(const FactoredMatrix<T>& m, Eigen::Index k,
                                 Eigen::Index block_rows, int threads) {
  const double total = static_cast<double>(m.rows()) * static_cast<double>(m.cols());
  if (k < 1 || static_cast<double>(k) > total)
    throw Error("projection", "k", std::to_string(k),
                "top_pairs requires 1 <= k <= rows*cols = " + to_str(total));
  if (block_rows < 1)
    throw Error("projection", "block_rows", std::to_string(block_rows), "must be >= 1");

  const Eigen::Index rows = m.rows(), cols = m.cols();
  const auto num_blocks = static_cast<std::size_t>((rows + block_rows - 1) / block_rows);
  const auto kk = static_cast<std::size_t>(k);
  std::vector<std::vector<PairScore>> per_block(num_blocks);

  parallel_for(num_blocks, threads, [&](std::size_t b) {
    const Eigen::Index begin = static_cast<Eigen::Index>(b) * block_rows;
    const Eigen::Index count = std::min(block_rows, rows - begin);
    const Mat<T> slab = m.evaluate_rows(begin, count);
    if (!slab.allFinite())
      throw Error("projection", "block", std::to_string(begin), "non-finite scores in row block");
    PairHeap heap;
    for (Eigen::Index i = 0; i < count; ++i) {
      const T* row = slab.row(i).data();
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double s = static_cast<double>(row[j]);
        if (heap.size() == kk && s < heap.top().score) continue;
        offer(heap, PairScore{begin + i, j, s}, kk);
      }
    }
    per_block[b] = drain_sorted(heap);
  });

  PairHeap merged;
  for (const auto& block : per_block)
    for (const auto& p : block) offer(merged, p, kk);
  return drain_sorted(merged);
}

template <typename T>
std::vector<TokenScore> resolve_tokens(const std::vector<std::pair<Eigen::Index, T>>& scores,
                                       const Vocabulary& vocab) {
  std::vector<TokenScore> out;
  out.reserve(scores.size());
  for (const auto& [id, s] : scores)
    out.push_back({id, vocab.token(static_cast<std::size_t>(id)), static_cast<double>(s)});
  return out;
}

std::vector<TokenPairScore> resolve_pairs(const std::vector<PairScore>& pairs, const Vocabulary& vocab) {
  std::vector<TokenPairScore> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back({p.src, p.dst, vocab.token(static_cast<std::size_t>(p.src)),
                   vocab.token(static_cast<std::size_t>(p.dst)), p.score});
  return out;
}

template <typename T>
std::vector<std::pair<Eigen::Index, T>> top_tokens(const Vec<T>& v, const Projector<T>& proj,
                                                   Eigen::Index k, ProjectionSide side) {
  return top_k_indices<T>(proj.project(v, side), k);
}

template <typename T>
std::vector<std::pair<Eigen::Index, T>> knowledge_lookup(const std::vector<Eigen::Index>& seeds,
                                                         const Mat<T>& candidates,
                                                         const Mat<T>& embedding, Eigen::Index k) {
  if (seeds.empty()) throw Error("projection", "seeds", "[]", "seed list is empty");
  const Eigen::Index d = embedding.rows(), e = embedding.cols();
  if (candidates.cols() != d)
    throw Error("projection", "candidates", std::to_string(candidates.cols()),
                "width does not match hidden size " + std::to_string(d));
  const Vec<T> mu = embedding.rowwise().mean();
  Vec<T> s = Vec<T>::Zero(d);
  for (auto id : seeds) {
    if (id < 0 || id >= e)
      throw Error("projection", "seed", std::to_string(id), "id outside vocabulary");
    s += embedding.col(id) - mu;
  }
  s /= static_cast<T>(seeds.size());
  const Vec<T> scores = candidates * s;
  return top_k_indices<T>(scores, std::min<Eigen::Index>(k, scores.size()));
}

template <typename T>
std::vector<DiffEntry<T>> diff_projection(const WeightStore& base, const WeightStore& tuned,
                                          const std::regex& selector, Eigen::Index k,
                                          const Projector<T>& proj,
                                          const std::vector<Eigen::Index>& indices) {
  if (!(base.config() == tuned.config()))
    throw Error("projection", "config", "tuned", "base and tuned checkpoints differ in configuration");
  std::vector<DiffEntry<T>> out;
  for (int l = 0; l < base.config().num_layers; ++l) {
    for (auto g : all_groups()) {
      const std::string name = group_param_name(l, g);
      if (!std::regex_search(name, selector)) continue;
      const Mat<T> delta = tuned.group_vectors<T>(l, g) - base.group_vectors<T>(l, g);
      std::vector<Eigen::Index> which = indices;
      if (which.empty())
        for (Eigen::Index i = 0; i < delta.rows(); ++i) which.push_back(i);
      const auto side = side_for(g);
      for (auto i : which) {
        if (i < 0 || i >= delta.rows())
          throw Error("projection", "index", std::to_string(i), "vector index outside " + name);
        const Vec<T> v = delta.row(i).transpose();
        const Vec<T> projected = proj.project(v, side);
        out.push_back({name, i, top_k_indices<T>(projected, k),
                       top_k_indices<T>(Vec<T>(-projected), k)});
      }
    }
  }
  return out;
}

#define EMBEDLENS_INSTANTIATE(T)                                                                  \
  template class Projector<T>;                                                                    \
  template Vec<T> project_vector(const Vec<T>&, const Mat<T>&, const ProjectionSpec&);            \
  template FactoredMatrix<T> project_qk(const FactoredMatrix<T>&, const Projector<T>&);           \
  template FactoredMatrix<T> project_vo(const FactoredMatrix<T>&, const Projector<T>&);           \
  template std::vector<PairScore> top_pairs(const FactoredMatrix<T>&, Eigen::Index, Eigen::Index, \
                                            int);                                                 \
  template std::vector<TokenScore> resolve_tokens(const std::vector<std::pair<Eigen::Index, T>>&, \
                                                  const Vocabulary&);                             \
  template std::vector<std::pair<Eigen::Index, T>> top_tokens(const Vec<T>&, const Projector<T>&, \
                                                              Eigen::Index, ProjectionSide);      \
  template std::vector<std::pair<Eigen::Index, T>> knowledge_lookup(                              \
      const std::vector<Eigen::Index>&, const Mat<T>&, const Mat<T>&, Eigen::Index);              \
  template std::vector<DiffEntry<T>> diff_projection(const WeightStore&, const WeightStore&,      \
                                                     const std::regex&, Eigen::Index,             \
                                                     const Projector<T>&,                         \
                                                     const std::vector<Eigen::Index>&);

EMBEDLENS_INSTANTIATE(float)
EMBEDLENS_INSTANTIATE(double)

#undef EMBEDLENS_INSTANTIATE

}  // namespace embedlens
