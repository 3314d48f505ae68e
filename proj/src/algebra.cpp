#include "embedlens/algebra.hpp"

#include "embedlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace embedlens {

template <typename T>
LayerWeights<T> layer_weights(const WeightStore& store, int layer) {
  if (layer < 0 || layer >= store.config().num_layers)
    throw Error("algebra", "layer", std::to_string(layer), "layer out of range");
  LayerWeights<T> w;
  w.W_Q = store.matrix<T>(names::attn(layer, "W_Q"));
  w.W_K = store.matrix<T>(names::attn(layer, "W_K"));
  w.W_V = store.matrix<T>(names::attn(layer, "W_V"));
  w.W_O = store.matrix<T>(names::attn(layer, "W_O"));
  w.K = store.matrix<T>(names::ff(layer, "K"));
  w.V = store.matrix<T>(names::ff(layer, "V"));
  w.num_heads = store.config().num_heads;
  return w;
}

template <typename T>
std::vector<HeadWeights<T>> split_heads(const LayerWeights<T>& layer, int num_heads) {
  const Eigen::Index d = layer.W_Q.rows();
  if (num_heads <= 0 || d % num_heads != 0)
    throw Error("algebra", "num_heads", std::to_string(num_heads),
                "does not divide hidden size " + std::to_string(d));
  for (const Mat<T>* m : {&layer.W_Q, &layer.W_K, &layer.W_V, &layer.W_O})
    if (m->rows() != d || m->cols() != d)
      throw Error("algebra", "layer", std::to_string(m->rows()) + "x" + std::to_string(m->cols()),
                  "attention matrices must be d x d");
  const Eigen::Index dh = d / num_heads;
  std::vector<HeadWeights<T>> heads(num_heads);
  for (int i = 0; i < num_heads; ++i) {
    auto& h = heads[i];
    h.index = i;
    h.W_Q = layer.W_Q.middleCols(i * dh, dh);
    h.W_K = layer.W_K.middleCols(i * dh, dh);
    h.W_V = layer.W_V.middleCols(i * dh, dh);
    h.W_O = layer.W_O.middleRows(i * dh, dh);
  }
  return heads;
}

template <typename T>
LayerWeights<T> merge_heads(const std::vector<HeadWeights<T>>& heads) {
  if (heads.empty()) throw Error("algebra", "heads", "0", "no heads to merge");
  const Eigen::Index d = heads[0].W_Q.rows(), dh = heads[0].W_Q.cols();
  const auto H = static_cast<Eigen::Index>(heads.size());
  LayerWeights<T> w;
  w.num_heads = static_cast<int>(H);
  w.W_Q.resize(d, dh * H);
  w.W_K.resize(d, dh * H);
  w.W_V.resize(d, dh * H);
  w.W_O.resize(dh * H, d);
  for (Eigen::Index i = 0; i < H; ++i) {
    w.W_Q.middleCols(i * dh, dh) = heads[i].W_Q;
    w.W_K.middleCols(i * dh, dh) = heads[i].W_K;
    w.W_V.middleCols(i * dh, dh) = heads[i].W_V;
    w.W_O.middleRows(i * dh, dh) = heads[i].W_O;
  }
  return w;
}

template <typename T>
Mat<T> ordered_product(const Mat<T>& left, const Mat<T>& right, Eigen::Index begin,
                       Eigen::Index count) {
  if (left.cols() != right.rows())
    throw Error("algebra", "inner", std::to_string(left.cols()) + "!=" + std::to_string(right.rows()),
                "factor shapes do not chain");
  if (begin < 0 || count < 0 || begin + count > left.rows())
    throw Error("algebra", "rows", std::to_string(begin) + "+" + std::to_string(count),
                "row range outside factor with " + std::to_string(left.rows()) + " rows");
  const Eigen::Index n = right.cols(), r = left.cols();
  Mat<T> out = Mat<T>::Zero(count, n);
  for (Eigen::Index i = 0; i < count; ++i) {
    T* o = out.row(i).data();
    for (Eigen::Index k = 0; k < r; ++k) {
      const T a = left(begin + i, k);
      const T* b = right.row(k).data();
      for (Eigen::Index j = 0; j < n; ++j) o[j] += a * b[j];
    }
  }
  return out;
}

template <typename T>
FactoredMatrix<T>::FactoredMatrix(Mat<T> left, Mat<T> right)
    : left_(std::move(left)), right_(std::move(right)) {
  if (left_.cols() != right_.rows())
    throw Error("algebra", "inner",
                std::to_string(left_.cols()) + "!=" + std::to_string(right_.rows()),
                "factor shapes do not chain");
}

template <typename T>
Mat<T> FactoredMatrix<T>::evaluate_rows(Eigen::Index begin, Eigen::Index count) const {
  return ordered_product(left_, right_, begin, count);
}

template <typename T>
Mat<T> FactoredMatrix<T>::materialize(std::int64_t budget) const {
  const std::int64_t elems = static_cast<std::int64_t>(rows()) * cols();
  if (elems > budget)
    throw Error("algebra", "elements", std::to_string(elems),
                "product exceeds materialization budget " + std::to_string(budget) +
                    "; evaluate row blocks (e.g. top_pairs) instead");
  return evaluate_rows(0, rows());
}

template <typename T>
FactoredMatrix<T> interaction_qk(const HeadWeights<T>& head) {
  if (head.W_Q.rows() != head.W_K.rows() || head.W_Q.cols() != head.W_K.cols())
    throw Error("algebra", "head", std::to_string(head.index), "W_Q and W_K shapes differ");
  return FactoredMatrix<T>(head.W_Q, head.W_K.transpose());
}

template <typename T>
FactoredMatrix<T> interaction_vo(const HeadWeights<T>& head) {
  if (head.W_V.cols() != head.W_O.rows() || head.W_V.rows() != head.W_O.cols())
    throw Error("algebra", "head", std::to_string(head.index), "W_V and W_O shapes do not chain");
  return FactoredMatrix<T>(head.W_V, head.W_O);
}

template <typename T>
std::vector<Subhead<T>> subheads(const HeadWeights<T>& head, SubheadKind kind) {
  const Eigen::Index dh = head.W_V.cols();
  std::vector<Subhead<T>> out(dh);
  for (Eigen::Index j = 0; j < dh; ++j) {
    auto& s = out[j];
    s.head = head.index;
    s.index = static_cast<int>(j);
    if (kind == SubheadKind::vo) {
      s.first = head.W_V.col(j);
      s.second = head.W_O.row(j).transpose();
    } else {
      s.first = head.W_Q.col(j);
      s.second = head.W_K.col(j);
    }
  }
  return out;
}

template <typename T>
PseudoInverse<T> pseudo_inverse(const Mat<T>& m, const std::string& identifier) {
  if (m.size() == 0) throw Error("algebra", "matrix", identifier, "empty matrix");
  if (!m.allFinite()) throw Error("algebra", "matrix", identifier, "non-finite entries");
  using Dyn = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  Eigen::BDCSVD<Dyn> svd(Dyn(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success)
    throw Error("algebra", "matrix", identifier, "SVD did not converge");
  const auto& s = svd.singularValues();
  PseudoInverse<T> out;
  out.sigma_max = s.size() ? static_cast<double>(s[0]) : 0.0;
  out.sigma_min = s.size() ? static_cast<double>(s[s.size() - 1]) : 0.0;
  out.rcond = static_cast<double>(std::max(m.rows(), m.cols())) *
              static_cast<double>(std::numeric_limits<T>::epsilon()) * out.sigma_max;
  Vec<T> inv = Vec<T>::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (static_cast<double>(s[i]) > out.rcond) {
      inv[i] = T(1) / s[i];
      ++out.rank;
    }
  }
  out.matrix = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  return out;
}

namespace {

template <typename T>
void require_k(Eigen::Index len, Eigen::Index k, const char* op) {
  if (k < 1 || k > len)
    throw Error("algebra", "k", std::to_string(k),
                std::string(op) + " requires 1 <= k <= " + std::to_string(len));
}

template <typename T>
void require_finite(const Vec<T>& v, const char* op) {
  if (!v.allFinite()) throw Error("algebra", "vector", op, "non-finite entries");
}

}  // namespace

template <typename T>
Vec<T> keep_k(const Vec<T>& v, Eigen::Index k) {
  require_k<T>(v.size(), k, "keep_k");
  require_finite(v, "keep_k");
  std::vector<Eigen::Index> idx(v.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    const T fa = std::abs(v[a]), fb = std::abs(v[b]);
    return fa != fb ? fa > fb : a < b;
  });
  Vec<T> out = Vec<T>::Zero(v.size());
  for (Eigen::Index i = 0; i < k; ++i) out[idx[i]] = v[idx[i]];
  return out;
}

template <typename T>
std::vector<std::pair<Eigen::Index, T>> top_k_indices(const Vec<T>& v, Eigen::Index k) {
  require_k<T>(v.size(), k, "top_k_indices");
  require_finite(v, "top_k_indices");
  std::vector<Eigen::Index> idx(v.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return v[a] != v[b] ? v[a] > v[b] : a < b;
  });
  std::vector<std::pair<Eigen::Index, T>> out;
  out.reserve(k);
  for (Eigen::Index i = 0; i < k; ++i) out.emplace_back(idx[i], v[idx[i]]);
  return out;
}

template <typename T>
std::vector<Eigen::Index> top_k_ids(const Vec<T>& v, Eigen::Index k) {
  std::vector<Eigen::Index> ids;
  for (const auto& [i, _] : top_k_indices(v, k)) ids.push_back(i);
  return ids;
}

template <typename T>
Mat<T> causal_mask(Eigen::Index n) {
  Mat<T> m = Mat<T>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = -std::numeric_limits<T>::infinity();
  return m;
}

template <typename T>
Mat<T> attention_map(const Mat<T>& scores, const Mat<T>& mask, Eigen::Index head_dim) {
  if (scores.rows() != mask.rows() || scores.cols() != mask.cols())
    throw Error("algebra", "mask", std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()),
                "mask shape does not match scores");
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  Mat<T> a = scores * scale + mask;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const T mx = a.row(i).maxCoeff();
    if (!std::isfinite(mx))
      throw Error("algebra", "attention_row", std::to_string(i), "non-finite attention logits");
    a.row(i) = (a.row(i).array() - mx).exp();
    a.row(i) /= a.row(i).sum();
  }
  if (!a.allFinite()) throw Error("algebra", "attention", "softmax", "non-finite attention map");
  return a;
}

template <typename T>
Mat<T> head_scores_direct(const Mat<T>& x, const HeadWeights<T>& head) {
  const Mat<T> q = x * head.W_Q;
  const Mat<T> k = x * head.W_K;
  return q * k.transpose();
}

template <typename T>
Mat<T> head_scores_interaction(const Mat<T>& x, const HeadWeights<T>& head) {
  const Mat<T> qk = interaction_qk(head).materialize();
  return x * qk * x.transpose();
}

template <typename T>
std::vector<Mat<T>> attention_mixes(const Mat<T>& x, const LayerWeights<T>& layer,
                                    const Mat<T>& mask) {
  const auto heads = split_heads(layer, layer.num_heads);
  std::vector<Mat<T>> out;
  out.reserve(heads.size());
  for (const auto& h : heads) {
    const Mat<T> a = attention_map(head_scores_direct(x, h), mask, h.W_Q.cols());
    out.push_back(a * x);
  }
  return out;
}

template <typename T>
AttentionForms<T> attention_oracle(const Mat<T>& x, const LayerWeights<T>& layer,
                                   const Mat<T>& mask) {
  if (!x.allFinite()) throw Error("algebra", "X", "input", "non-finite input");
  if (x.cols() != layer.hidden_dim())
    throw Error("algebra", "X", std::to_string(x.cols()),
                "input width does not match hidden size " + std::to_string(layer.hidden_dim()));
  const auto heads = split_heads(layer, layer.num_heads);
  const Eigen::Index n = x.rows(), d = x.cols(), dh = layer.head_dim();

  // Concatenated heads then W_O.
  Mat<T> concat(n, d);
  for (const auto& h : heads) {
    const Mat<T> a = attention_map(head_scores_direct(x, h), mask, dh);
    const Mat<T> v = x * h.W_V;
    concat.middleCols(h.index * dh, dh) = a * v;
  }
  AttentionForms<T> out;
  out.concat = concat * layer.W_O;

  // Sum of per-head interaction-matrix terms.
  out.interaction = Mat<T>::Zero(n, d);
  for (const auto& h : heads) {
    const Mat<T> a = attention_map(head_scores_interaction(x, h), mask, dh);
    const Mat<T> vo = interaction_vo(h).materialize();
    out.interaction += a * x * vo;
  }
  if (!out.concat.allFinite() || !out.interaction.allFinite())
    throw Error("algebra", "attention", "output", "non-finite attention output");
  return out;
}

template <typename T>
double relative_frobenius(const Mat<T>& a, const Mat<T>& b) {
  const double diff = (a.template cast<double>() - b.template cast<double>()).norm();
  const double ref = b.template cast<double>().norm();
  return ref > 0 ? diff / ref : diff;
}

#define EMBEDLENS_INSTANTIATE(T)                                                              \
  template LayerWeights<T> layer_weights<T>(const WeightStore&, int);                         \
  template std::vector<HeadWeights<T>> split_heads(const LayerWeights<T>&, int);              \
  template LayerWeights<T> merge_heads(const std::vector<HeadWeights<T>>&);                   \
  template Mat<T> ordered_product(const Mat<T>&, const Mat<T>&, Eigen::Index, Eigen::Index);  \
  template class FactoredMatrix<T>;                                                           \
  template FactoredMatrix<T> interaction_qk(const HeadWeights<T>&);                           \
  template FactoredMatrix<T> interaction_vo(const HeadWeights<T>&);                           \
  template std::vector<Subhead<T>> subheads(const HeadWeights<T>&, SubheadKind);              \
  template PseudoInverse<T> pseudo_inverse(const Mat<T>&, const std::string&);                \
  template Vec<T> keep_k(const Vec<T>&, Eigen::Index);                                        \
  template std::vector<std::pair<Eigen::Index, T>> top_k_indices(const Vec<T>&, Eigen::Index); \
  template std::vector<Eigen::Index> top_k_ids(const Vec<T>&, Eigen::Index);                  \
  template Mat<T> causal_mask<T>(Eigen::Index);                                               \
  template Mat<T> attention_map(const Mat<T>&, const Mat<T>&, Eigen::Index);                  \
  template Mat<T> head_scores_direct(const Mat<T>&, const HeadWeights<T>&);                   \
  template Mat<T> head_scores_interaction(const Mat<T>&, const HeadWeights<T>&);              \
  template std::vector<Mat<T>> attention_mixes(const Mat<T>&, const LayerWeights<T>&,         \
                                               const Mat<T>&);                                \
  template AttentionForms<T> attention_oracle(const Mat<T>&, const LayerWeights<T>&,          \
                                              const Mat<T>&);                                 \
  template double relative_frobenius(const Mat<T>&, const Mat<T>&);

EMBEDLENS_INSTANTIATE(float)
EMBEDLENS_INSTANTIATE(double)

#undef EMBEDLENS_INSTANTIATE

}  // namespace embedlens
