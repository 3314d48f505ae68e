#pragma once

#include "embedlens/checkpoint.hpp"
#include "embedlens/projection.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace embedlens {

struct LayerSimilarity {
  MatD S;  // L_A x L_B, mean |pearson| per layer pair
  std::string group;
  Eigen::Index sample = 0;
  bool projected = true;
  bool degenerate = false;  // some sampled vector had zero variance
};

struct AlignmentResult {
  std::string group;
  // permutation[a] = matched layer of B, or -1 when L_A > L_B leaves a unmatched.
  std::vector<int> permutation;
  double objective = 0;
  std::vector<LayerSimilarity> similarities;
};

struct AlignOptions {
  bool projected = true;
  Eigen::Index sample = 128;  // vectors per layer per model; clamped to the group size
  std::uint64_t seed = 0;
  int threads = 1;
};

template <typename T>
LayerSimilarity layer_similarity(const WeightStore& a, const WeightStore& b, ParamGroup group,
                                 const Projector<T>& proj_a, const Projector<T>& proj_b,
                                 const AlignOptions& opt);

// Maximizes sum S[l, perm(l)] over injective maps of the smaller side. Among
// optimal assignments the lexicographically smallest map (over the smaller
// side's indices) is returned.
AlignmentResult hungarian(const MatD& S);

struct AlignmentReport {
  std::vector<AlignmentResult> per_group;
  AlignmentResult mean;  // assignment on the element-wise mean of the groups' S
};

template <typename T>
AlignmentReport align_models(const WeightStore& a, const WeightStore& b,
                             const std::vector<ParamGroup>& groups, const Projector<T>& proj_a,
                             const Projector<T>& proj_b, const AlignOptions& opt);

std::string similarity_to_csv(const MatD& S);
std::string alignment_to_json(const AlignmentReport& report);

}  // namespace embedlens
