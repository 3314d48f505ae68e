#pragma once

#include "embedlens/algebra.hpp"
#include "embedlens/checkpoint.hpp"

#include <optional>
#include <regex>
#include <string>
#include <vector>

namespace embedlens {

enum class InverseKind { transpose, pseudo_inverse };

std::string inverse_kind_name(InverseKind k);
InverseKind inverse_kind_from_name(const std::string& name);

struct ProjectionSpec {
  InverseKind inverse_kind = InverseKind::transpose;
  bool mean_center = false;
  bool fold_layer_norm = false;
};

inline constexpr int kDefaultPairK = 50;
inline constexpr int kDefaultVectorK = 100;
inline constexpr int kDefaultBlockRows = 256;

// Which side of a right-inverse a parameter vector is read through.
// Input-side vectors (FF keys, Q/K/V subheads) are multiplied by E'^T;
// output-side vectors (FF values, W_O subheads) by E. Under E' = E^T both
// sides are the same map.
enum class ProjectionSide { input, output };

ProjectionSide side_for(ParamGroup g);

// Holds E (d x e) and the maps derived from it for one ProjectionSpec.
template <typename T>
class Projector {
 public:
  // `pinv`, when given, must be the pseudo-inverse (e x d) of the possibly
  // mean-centered E; otherwise it is computed on demand.
  Projector(Mat<T> embedding, ProjectionSpec spec, std::optional<Mat<T>> pinv = std::nullopt);

  const ProjectionSpec& spec() const { return spec_; }
  Eigen::Index hidden_dim() const { return output_map_.rows(); }
  Eigen::Index vocab_size() const { return output_map_.cols(); }

  // d x e: E' ^T for the input side, E for the output side.
  const Mat<T>& input_map() const { return input_map_; }
  const Mat<T>& output_map() const { return output_map_; }
  const Mat<T>& map(ProjectionSide side) const {
    return side == ProjectionSide::input ? input_map_ : output_map_;
  }
  // Mean embedding over all columns of the original E.
  const Vec<T>& mean_embedding() const { return mean_; }

  Vec<T> project(const Vec<T>& v, ProjectionSide side = ProjectionSide::input) const;
  Mat<T> project_rows(const Mat<T>& rows, ProjectionSide side = ProjectionSide::input) const;

  // Hidden states go through the final layer norm first when the spec asks for it.
  void set_layer_norm(Vec<T> gamma, Vec<T> beta);
  Vec<T> project_hidden(const Vec<T>& h) const;

 private:
  ProjectionSpec spec_;
  Mat<T> output_map_;
  Mat<T> input_map_;
  Vec<T> mean_;
  std::optional<std::pair<Vec<T>, Vec<T>>> layer_norm_;
};

template <typename T>
Vec<T> project_vector(const Vec<T>& v, const Mat<T>& embedding, const ProjectionSpec& spec);

// E' W_QK E'^T in factor form: (E' A, B E'^T).
template <typename T>
FactoredMatrix<T> project_qk(const FactoredMatrix<T>& w_qk, const Projector<T>& proj);
// E' W_VO E in factor form: (E' A, B E).
template <typename T>
FactoredMatrix<T> project_vo(const FactoredMatrix<T>& w_vo, const Projector<T>& proj);

struct PairScore {
  Eigen::Index src = 0;
  Eigen::Index dst = 0;
  double score = 0;

  bool operator==(const PairScore&) const = default;
};

// Total order used for every top-k list: score descending, then ids ascending.
inline bool ranks_before(const PairScore& a, const PairScore& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.src != b.src) return a.src < b.src;
  return a.dst < b.dst;
}

// Global top-k entries of the implicit matrix by signed score, streaming
// block_rows x cols slabs through a bounded heap.
template <typename T>
std::vector<PairScore> top_pairs(const FactoredMatrix<T>& m, Eigen::Index k,
                                 Eigen::Index block_rows = kDefaultBlockRows, int threads = 1);

struct TokenScore {
  Eigen::Index id = 0;
  std::string token;
  double score = 0;
};

struct TokenPairScore {
  Eigen::Index src_id = 0;
  Eigen::Index dst_id = 0;
  std::string src_token;
  std::string dst_token;
  double score = 0;
};

template <typename T>
std::vector<TokenScore> resolve_tokens(const std::vector<std::pair<Eigen::Index, T>>& scores,
                                       const Vocabulary& vocab);
std::vector<TokenPairScore> resolve_pairs(const std::vector<PairScore>& pairs, const Vocabulary& vocab);

// Top-k tokens of a projected parameter vector.
template <typename T>
std::vector<std::pair<Eigen::Index, T>> top_tokens(const Vec<T>& v, const Projector<T>& proj,
                                                   Eigen::Index k,
                                                   ProjectionSide side = ProjectionSide::input);

// Ranks candidate rows by dot product with the mean of the seeds' centered
// embeddings (E columns minus the mean embedding).
template <typename T>
std::vector<std::pair<Eigen::Index, T>> knowledge_lookup(const std::vector<Eigen::Index>& seeds,
                                                         const Mat<T>& candidates,
                                                         const Mat<T>& embedding, Eigen::Index k);

template <typename T>
struct DiffEntry {
  std::string param;
  Eigen::Index index = 0;
  std::vector<std::pair<Eigen::Index, T>> positive;  // top-k of projected delta
  std::vector<std::pair<Eigen::Index, T>> negative;  // top-k of projected -delta
};

// For every layer parameter whose canonical name matches `selector`, projects
// tuned - base per vector. `indices` restricts which vectors (all when empty).
template <typename T>
std::vector<DiffEntry<T>> diff_projection(const WeightStore& base, const WeightStore& tuned,
                                          const std::regex& selector, Eigen::Index k,
                                          const Projector<T>& proj,
                                          const std::vector<Eigen::Index>& indices = {});

}  // namespace embedlens
