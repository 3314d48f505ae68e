#pragma once

#include "embedlens/tensor.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace embedlens {

enum class Architecture { gpt2_style, bert_style, raw };

std::string architecture_name(Architecture a);
Architecture architecture_from_name(const std::string& name);

struct ModelConfig {
  int num_layers = 0;
  int num_heads = 0;
  int hidden_dim = 0;
  int ff_dim = 0;
  int vocab_size = 0;
  Architecture architecture = Architecture::raw;
  bool tied_embeddings = true;

  int head_dim() const { return hidden_dim / num_heads; }
  // bert-style encoders attend bidirectionally; everything else is treated as
  // a causal decoder.
  bool causal() const { return architecture != Architecture::bert_style; }

  // Throws on non-positive dims, H not dividing d, or d > e.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

ModelConfig load_config(const std::filesystem::path& path);
ModelConfig parse_config(std::string_view json_text);
std::string config_to_json(const ModelConfig& cfg);

// Canonical parameter names.
namespace names {
inline constexpr std::string_view embedding = "embedding.E";
inline constexpr std::string_view final_ln_gamma = "final_ln.gamma";
inline constexpr std::string_view final_ln_beta = "final_ln.beta";
std::string attn(int layer, std::string_view which);  // which in {W_Q, W_K, W_V, W_O}
std::string ff(int layer, std::string_view which);    // which in {K, V}
}  // namespace names

// Parameter groups whose individual vectors are interpreted in embedding space.
// W_Q/W_K/W_V contribute their columns, W_O its rows, FF keys/values their rows.
enum class ParamGroup { W_Q, W_K, W_V, W_O, K_ff, V_ff };

std::string group_name(ParamGroup g);
ParamGroup group_from_name(const std::string& name);
const std::vector<ParamGroup>& all_groups();
std::string group_param_name(int layer, ParamGroup g);

// Immutable after load; safe to share across reader threads.
class WeightStore {
 public:
  WeightStore() = default;
  WeightStore(ModelConfig config, std::map<std::string, Tensor> params,
              std::map<std::string, Tensor> extras = {}, std::vector<std::string> warnings = {});

  const ModelConfig& config() const noexcept { return config_; }
  const std::map<std::string, Tensor>& params() const noexcept { return params_; }
  const std::map<std::string, Tensor>& extras() const noexcept { return extras_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  bool has(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& param(const std::string& name) const;

  template <typename T>
  Mat<T> matrix(const std::string& name) const {
    return param(name).template matrix<T>();
  }

  // d x e.
  template <typename T>
  Mat<T> embedding() const {
    return matrix<T>(std::string(names::embedding));
  }

  // Vectors of a parameter group as rows (n x d).
  template <typename T>
  Mat<T> group_vectors(int layer, ParamGroup g) const;

  // Final layer-norm (gamma, beta); ones/zeros when the checkpoint has none.
  template <typename T>
  std::pair<Vec<T>, Vec<T>> final_layer_norm() const;

  int total_heads() const { return config_.num_layers * config_.num_heads; }
  bool bit_equal(const WeightStore& other) const;

 private:
  void check_invariants() const;

  ModelConfig config_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> extras_;
  std::vector<std::string> warnings_;
};

// Reads a safetensors checkpoint and normalizes it to canonical names and
// right-multiplication orientation (x -> xW). gpt2-style fused c_attn is split
// into W_Q/W_K/W_V; bert-style nn.Linear kernels are transposed; e x d
// embeddings are transposed to d x e.
WeightStore load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);
WeightStore normalize_checkpoint(std::map<std::string, Tensor> raw, const ModelConfig& config);

// Writes a store in the raw canonical layout.
void save_checkpoint(const std::filesystem::path& path, const WeightStore& store);

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(std::size_t id) const;
  std::optional<std::size_t> id_of(const std::string& token) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class VocabFormat { json_map, line_per_token };

Vocabulary parse_vocabulary(std::string_view text, VocabFormat format,
                            std::optional<std::size_t> expected_size = std::nullopt);
Vocabulary load_vocabulary(const std::filesystem::path& path, VocabFormat format,
                           std::optional<std::size_t> expected_size = std::nullopt);
// json-map for *.json, line-per-token otherwise.
VocabFormat vocab_format_for(const std::filesystem::path& path);
std::string vocabulary_to_json(const Vocabulary& vocab);

// Per-level hidden states: level 0 is the embedding output, level l+1 the
// output of layer l. Optional per-layer module inputs ("attn_input.<l>",
// "ff_input.<l>") are kept when the producer supplies them.
class HiddenStateDump {
 public:
  HiddenStateDump() = default;
  HiddenStateDump(std::vector<Tensor> levels, std::map<int, Tensor> attn_inputs = {},
                  std::map<int, Tensor> ff_inputs = {});

  std::size_t num_levels() const noexcept { return levels_.size(); }
  std::int64_t num_tokens() const noexcept { return levels_.empty() ? 0 : levels_[0].dim(0); }
  std::int64_t hidden_dim() const noexcept { return levels_.empty() ? 0 : levels_[0].dim(1); }

  const Tensor& level_tensor(std::size_t level) const { return levels_.at(level); }
  template <typename T>
  Mat<T> level(std::size_t level) const {
    return levels_.at(level).template matrix<T>();
  }

  const std::map<int, Tensor>& attn_inputs() const noexcept { return attn_inputs_; }
  const std::map<int, Tensor>& ff_inputs() const noexcept { return ff_inputs_; }

  bool bit_equal(const HiddenStateDump& other) const;

 private:
  std::vector<Tensor> levels_;
  std::map<int, Tensor> attn_inputs_;
  std::map<int, Tensor> ff_inputs_;
};

HiddenStateDump load_hidden_states(const std::filesystem::path& path);
HiddenStateDump hidden_states_from(const std::map<std::string, Tensor>& tensors,
                                   const std::string& origin = "<memory>");
void save_hidden_states(const std::filesystem::path& path, const HiddenStateDump& dump);

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct FoldedState {
  Vec<T> value;
  bool degenerate = false;  // h had (numerically) zero variance
};

// standardize(h) * gamma + beta with population variance and eps inside the sqrt.
template <typename T>
FoldedState<T> fold_final_layer_norm(const Vec<T>& h, const Vec<T>& gamma, const Vec<T>& beta,
                                     double eps = kLayerNormEps);

}  // namespace embedlens
