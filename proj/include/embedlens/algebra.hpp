#pragma once

#include "embedlens/checkpoint.hpp"
#include "embedlens/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace embedlens {

// Element budget above which an implicit product may only be evaluated in
// row blocks.
inline constexpr std::int64_t kMaterializeBudget = std::int64_t{1} << 26;

template <typename T>
struct LayerWeights {
  Mat<T> W_Q, W_K, W_V, W_O;  // d x d, right-multiplication
  Mat<T> K, V;                // d_ff x d, one key / value per row
  int num_heads = 1;

  Eigen::Index hidden_dim() const { return W_Q.rows(); }
  Eigen::Index head_dim() const { return W_Q.rows() / num_heads; }
};

template <typename T>
LayerWeights<T> layer_weights(const WeightStore& store, int layer);

template <typename T>
struct HeadWeights {
  int index = 0;
  Mat<T> W_Q, W_K, W_V;  // d x d/H column blocks
  Mat<T> W_O;            // d/H x d row block
};

template <typename T>
std::vector<HeadWeights<T>> split_heads(const LayerWeights<T>& layer, int num_heads);

// Reassembles the full projection matrices from heads (inverse of split_heads).
template <typename T>
LayerWeights<T> merge_heads(const std::vector<HeadWeights<T>>& heads);

// out = left.rows[begin, begin+count) * right, accumulated over the inner
// dimension in ascending order for every element. Values therefore do not
// depend on how rows are blocked.
template <typename T>
Mat<T> ordered_product(const Mat<T>& left, const Mat<T>& right, Eigen::Index begin,
                       Eigen::Index count);

// Implicit product left * right, never materialized above a budget.
template <typename T>
class FactoredMatrix {
 public:
  FactoredMatrix() = default;
  FactoredMatrix(Mat<T> left, Mat<T> right);

  Eigen::Index rows() const { return left_.rows(); }
  Eigen::Index cols() const { return right_.cols(); }
  Eigen::Index inner() const { return left_.cols(); }

  const Mat<T>& left() const { return left_; }
  const Mat<T>& right() const { return right_; }

  // Exact rows [begin, begin+count) of the product. Safe to call concurrently
  // on disjoint ranges.
  Mat<T> evaluate_rows(Eigen::Index begin, Eigen::Index count) const;

  Mat<T> materialize(std::int64_t budget = kMaterializeBudget) const;

 private:
  Mat<T> left_;
  Mat<T> right_;
};

template <typename T>
FactoredMatrix<T> interaction_qk(const HeadWeights<T>& head);
template <typename T>
FactoredMatrix<T> interaction_vo(const HeadWeights<T>& head);

enum class SubheadKind { vo, qk };

// One rank-1 term of an interaction matrix. For vo: (column j of W_V^i,
// row j of W_O^i); for qk: (column j of W_Q^i, column j of W_K^i). The term
// is outer(first, second).
template <typename T>
struct Subhead {
  int head = 0;
  int index = 0;
  Vec<T> first;
  Vec<T> second;

  Mat<T> outer() const { return first * second.transpose(); }
};

template <typename T>
std::vector<Subhead<T>> subheads(const HeadWeights<T>& head, SubheadKind kind);

template <typename T>
struct PseudoInverse {
  Mat<T> matrix;         // e x d for a d x e input
  double rcond = 0;      // absolute singular-value cutoff used
  Eigen::Index rank = 0; // singular values kept
  double sigma_max = 0;
  double sigma_min = 0;  // smallest singular value
};

// Moore-Penrose pseudo-inverse via SVD; singular values below
// max(d,e) * eps(T) * sigma_max are treated as zero.
template <typename T>
PseudoInverse<T> pseudo_inverse(const Mat<T>& m, const std::string& identifier = "matrix");

// Keeps the k coordinates with largest |value| (ties: lower index wins).
template <typename T>
Vec<T> keep_k(const Vec<T>& v, Eigen::Index k);

// k largest signed values, descending; ties broken by lower index.
template <typename T>
std::vector<std::pair<Eigen::Index, T>> top_k_indices(const Vec<T>& v, Eigen::Index k);

// Ids only, in the same order as top_k_indices.
template <typename T>
std::vector<Eigen::Index> top_k_ids(const Vec<T>& v, Eigen::Index k);

// 0 on and below the diagonal, -inf above.
template <typename T>
Mat<T> causal_mask(Eigen::Index n);

// Row-wise softmax of scores/sqrt(d/H) + mask.
template <typename T>
Mat<T> attention_map(const Mat<T>& scores, const Mat<T>& mask, Eigen::Index head_dim);

// Per-head pre-softmax scores, two routes: (X W_Q^i)(X W_K^i)^T and X W_QK^i X^T.
template <typename T>
Mat<T> head_scores_direct(const Mat<T>& x, const HeadWeights<T>& head);
template <typename T>
Mat<T> head_scores_interaction(const Mat<T>& x, const HeadWeights<T>& head);

// A^i X for every head (the inputs whose rows meet the value subheads).
template <typename T>
std::vector<Mat<T>> attention_mixes(const Mat<T>& x, const LayerWeights<T>& layer,
                                    const Mat<T>& mask);

template <typename T>
struct AttentionForms {
  Mat<T> concat;       // Concat[A^1 V^1, ..., A^H V^H] W_O
  Mat<T> interaction;  // sum_i A^i X W_VO^i
};

// Attention output (no biases, no residual) via the concatenated-heads route
// and the interaction-matrix route, computed independently.
template <typename T>
AttentionForms<T> attention_oracle(const Mat<T>& x, const LayerWeights<T>& layer, const Mat<T>& mask);

template <typename T>
double relative_frobenius(const Mat<T>& a, const Mat<T>& b);

}  // namespace embedlens
