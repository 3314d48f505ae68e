#pragma once

#include "embedlens/checkpoint.hpp"
#include "embedlens/projection.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace embedlens {

struct MetricReport {
  std::string metric;
  int layer = -1;
  std::string group;
  double aligned = 0;
  double baseline = 0;
  std::int64_t samples = 0;
  std::map<std::string, double> parameters;  // k, m, seed, ...
};

std::string report_to_json(const MetricReport& r);

// Jaccard index of two id sets (duplicates ignored).
double jaccard(std::vector<Eigen::Index> a, std::vector<Eigen::Index> b);

template <typename T>
double sim_k(const Vec<T>& x_proj, const Vec<T>& y_proj, Eigen::Index k);

enum class Pairing { ff_kv, attn_vo, attn_qk };

std::string pairing_name(Pairing p);
Pairing pairing_from_name(const std::string& name);

// Permutation applied to the second element of each pair in layer `layer`
// with `n` pairs.
using Shuffler = std::function<std::vector<std::size_t>(int layer, std::size_t n)>;

Shuffler seeded_shuffler(std::uint64_t seed);

// Mean Sim_k over matched pairs (aligned) and over a within-layer shuffle
// of the second elements (baseline), one report per layer.
template <typename T>
std::vector<MetricReport> related_pairs_report(const WeightStore& store, Pairing pairing,
                                               Eigen::Index k, const Projector<T>& proj,
                                               const Shuffler& shuffle, int threads = 1);

enum class Activation { gelu_tanh, gelu_erf, relu, identity };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

template <typename T>
T apply_activation(Activation a, T x);

enum class CoefficientKind { ff_key, attn_value_subhead };

// Vectors as rows plus the role they play.
template <typename T>
struct ParameterGroup {
  CoefficientKind kind = CoefficientKind::ff_key;
  Mat<T> vectors;  // n x d
};

// N x n coefficients: ff-key -> act(q . k_j); attn-value-subhead -> x . v_j.
template <typename T>
Mat<T> activation_coefficients(const Mat<T>& inputs, const ParameterGroup<T>& params,
                               CoefficientKind kind, Activation act = Activation::gelu_tanh);

// |top-k(h) intersect union_i top-k(x_i)| / k.
template <typename T>
double r_k(const Vec<T>& h_proj, const std::vector<Vec<T>>& active_projs, Eigen::Index k);

double r_k_ids(const std::vector<Eigen::Index>& h_top,
               const std::vector<std::vector<Eigen::Index>>& active_tops, Eigen::Index k);

enum class RkTarget { per_layer, final_logits };

std::string rk_target_name(RkTarget t);
RkTarget rk_target_from_name(const std::string& name);

struct RkOptions {
  Eigen::Index m = 10;
  Eigen::Index k = 100;
  RkTarget target = RkTarget::per_layer;
  std::uint64_t baseline_seed = 0;
  Activation activation = Activation::gelu_tanh;
  int threads = 1;
};

// The activated-parameter groups scored by the R_k experiment.
inline const std::vector<std::string>& rk_groups() {
  static const std::vector<std::string> g = {"ff_keys", "ff_values", "attn_values", "attn_outputs"};
  return g;
}

// Per layer and group: mean R_k of the m most activated parameter vectors
// against the aligned hidden state (aligned) and a seeded uniform draw from
// all dumped states (baseline). Hidden states pass through the final layer
// norm before projection; parameters are projected directly.
template <typename T>
std::vector<MetricReport> r_k_experiment(const WeightStore& store, const HiddenStateDump& dump,
                                         const Projector<T>& proj, const RkOptions& opt);

// Cosine similarity, across pairs, between x.y and keep_k(xE).keep_k(yE').
// E' is the projector's input map (E for transpose, E+^T for pinv).
template <typename T>
double keep_k_inverse_score(const std::vector<std::pair<Vec<T>, Vec<T>>>& pairs,
                            const Projector<T>& proj, Eigen::Index k);

// Same score over all unordered pairs (i < j) of the rows of `samples`,
// without materializing the pair list.
template <typename T>
double keep_k_inverse_score_all_pairs(const Mat<T>& samples, const Projector<T>& proj,
                                      Eigen::Index k, int threads = 1);

struct PearsonResult {
  double r = 0;
  bool degenerate = false;  // one input had zero variance; r defined as 0
};

template <typename T>
PearsonResult pearson(const Vec<T>& u, const Vec<T>& v);

}  // namespace embedlens
