#include "embedlens/checkpoint.hpp"

#include "embedlens/error.hpp"
#include "embedlens/io.hpp"
#include "embedlens/safetensors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <regex>
#include <set>
#include <sstream>

namespace embedlens {

using json = nlohmann::json;

std::string architecture_name(Architecture a) {
  switch (a) {
    case Architecture::gpt2_style: return "gpt2-style";
    case Architecture::bert_style: return "bert-style";
    case Architecture::raw: return "raw";
  }
  return "raw";
}

Architecture architecture_from_name(const std::string& name) {
  if (name == "gpt2-style" || name == "gpt2") return Architecture::gpt2_style;
  if (name == "bert-style" || name == "bert") return Architecture::bert_style;
  if (name == "raw") return Architecture::raw;
  throw Error("checkpoint", "architecture", name, "expected gpt2-style, bert-style or raw");
}

void ModelConfig::validate() const {
  const std::pair<const char*, int> dims[] = {{"num_layers", num_layers},
                                              {"num_heads", num_heads},
                                              {"hidden_dim", hidden_dim},
                                              {"ff_dim", ff_dim},
                                              {"vocab_size", vocab_size}};
  for (auto [name, v] : dims)
    if (v <= 0) throw Error("checkpoint", name, std::to_string(v), "dimension must be positive");
  if (hidden_dim % num_heads != 0)
    throw Error("checkpoint", "num_heads", std::to_string(num_heads),
                "does not divide hidden_dim " + std::to_string(hidden_dim));
  if (hidden_dim > vocab_size)
    throw Error("checkpoint", "hidden_dim", std::to_string(hidden_dim),
                "exceeds vocab_size " + std::to_string(vocab_size) + "; no right-inverse of E exists");
}

ModelConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
    ModelConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.ff_dim = j.at("ff_dim").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.architecture = architecture_from_name(j.value("architecture", std::string("raw")));
    cfg.tied_embeddings = j.value("tied_embeddings", true);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw Error("checkpoint", "config", std::string(json_text.substr(0, 64)),
                std::string("malformed config: ") + e.what());
  }
}

ModelConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string config_to_json(const ModelConfig& cfg) {
  json j = {{"num_layers", cfg.num_layers},   {"num_heads", cfg.num_heads},
            {"hidden_dim", cfg.hidden_dim},   {"ff_dim", cfg.ff_dim},
            {"vocab_size", cfg.vocab_size},   {"architecture", architecture_name(cfg.architecture)},
            {"tied_embeddings", cfg.tied_embeddings}};
  return j.dump(2) + "\n";
}

namespace names {
std::string attn(int layer, std::string_view which) {
  return "layer." + std::to_string(layer) + ".attn." + std::string(which);
}
std::string ff(int layer, std::string_view which) {
  return "layer." + std::to_string(layer) + ".ff." + std::string(which);
}
}  // namespace names

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::W_Q: return "W_Q";
    case ParamGroup::W_K: return "W_K";
    case ParamGroup::W_V: return "W_V";
    case ParamGroup::W_O: return "W_O";
    case ParamGroup::K_ff: return "K_ff";
    case ParamGroup::V_ff: return "V_ff";
  }
  return "?";
}

ParamGroup group_from_name(const std::string& name) {
  for (auto g : all_groups())
    if (group_name(g) == name) return g;
  throw Error("checkpoint", "group", name, "expected one of W_Q,W_K,W_V,W_O,K_ff,V_ff");
}

const std::vector<ParamGroup>& all_groups() {
  static const std::vector<ParamGroup> groups = {ParamGroup::W_Q, ParamGroup::W_K,
                                                 ParamGroup::W_V, ParamGroup::W_O,
                                                 ParamGroup::K_ff, ParamGroup::V_ff};
  return groups;
}

std::string group_param_name(int layer, ParamGroup g) {
  switch (g) {
    case ParamGroup::K_ff: return names::ff(layer, "K");
    case ParamGroup::V_ff: return names::ff(layer, "V");
    default: return names::attn(layer, group_name(g));
  }
}

// ---------------------------------------------------------------------------
// WeightStore

WeightStore::WeightStore(ModelConfig config, std::map<std::string, Tensor> params,
                         std::map<std::string, Tensor> extras, std::vector<std::string> warnings)
    : config_(config),
      params_(std::move(params)),
      extras_(std::move(extras)),
      warnings_(std::move(warnings)) {
  config_.validate();
  check_invariants();
}

const Tensor& WeightStore::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("checkpoint", "param", name, "no such parameter");
  return it->second;
}

namespace {

void expect_shape(const std::string& name, const Tensor& t, std::vector<std::int64_t> want) {
  if (t.shape() != want)
    throw Error("checkpoint", name, t.shape_string(),
                "shape mismatch: expected " + shape_string(want) + ", got " + t.shape_string());
}

}  // namespace

void WeightStore::check_invariants() const {
  const std::int64_t d = config_.hidden_dim, e = config_.vocab_size, dff = config_.ff_dim;
  std::vector<std::string> missing;
  auto need = [&](const std::string& name, std::vector<std::int64_t> shape) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      missing.push_back(name);
      return;
    }
    expect_shape(name, it->second, std::move(shape));
  };
  need(std::string(names::embedding), {d, e});
  for (int l = 0; l < config_.num_layers; ++l) {
    for (auto w : {"W_Q", "W_K", "W_V", "W_O"}) need(names::attn(l, w), {d, d});
    need(names::ff(l, "K"), {dff, d});
    need(names::ff(l, "V"), {dff, d});
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ",") + m;
    throw Error("checkpoint", "missing", list, "required tensors absent");
  }
  for (auto name : {names::final_ln_gamma, names::final_ln_beta}) {
    auto it = params_.find(std::string(name));
    if (it != params_.end()) expect_shape(std::string(name), it->second, {d});
  }
}

template <typename T>
Mat<T> WeightStore::group_vectors(int layer, ParamGroup g) const {
  if (layer < 0 || layer >= config_.num_layers)
    throw Error("checkpoint", "layer", std::to_string(layer), "layer out of range");
  Mat<T> m = matrix<T>(group_param_name(layer, g));
  switch (g) {
    case ParamGroup::W_Q:
    case ParamGroup::W_K:
    case ParamGroup::W_V: return m.transpose();
    default: return m;
  }
}

template MatF WeightStore::group_vectors<float>(int, ParamGroup) const;
template MatD WeightStore::group_vectors<double>(int, ParamGroup) const;

template <typename T>
std::pair<Vec<T>, Vec<T>> WeightStore::final_layer_norm() const {
  const auto d = config_.hidden_dim;
  Vec<T> gamma = Vec<T>::Ones(d);
  Vec<T> beta = Vec<T>::Zero(d);
  if (has(std::string(names::final_ln_gamma)))
    gamma = matrix<T>(std::string(names::final_ln_gamma)).row(0).transpose();
  if (has(std::string(names::final_ln_beta)))
    beta = matrix<T>(std::string(names::final_ln_beta)).row(0).transpose();
  return {gamma, beta};
}

template std::pair<VecF, VecF> WeightStore::final_layer_norm<float>() const;
template std::pair<VecD, VecD> WeightStore::final_layer_norm<double>() const;

bool WeightStore::bit_equal(const WeightStore& other) const {
  if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
  for (const auto& [name, t] : params_) {
    auto it = other.params_.find(name);
    if (it == other.params_.end() || !t.bit_equal(it->second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

enum class Transform { none, transpose };

struct Route {
  std::string canonical;
  Transform transform = Transform::none;
  std::vector<std::int64_t> stored_shape;
};

struct Normalizer {
  const ModelConfig& cfg;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> extras;
  std::vector<std::string> warnings;

  void keep_extra(const std::string& name, Tensor t, bool known_unused) {
    if (!known_unused) warnings.push_back("ignoring unknown tensor " + name);
    extras.emplace(name, std::move(t));
  }

  void place(const std::string& src, const Tensor& t, const Route& r) {
    expect_shape(src, t, r.stored_shape);
    if (!t.all_finite())
      throw Error("checkpoint", src, t.shape_string(), "non-finite values in tensor");
    Tensor out = r.transform == Transform::transpose ? t.transposed() : t;
    if (!params.emplace(r.canonical, std::move(out)).second)
      throw Error("checkpoint", "param", r.canonical, "mapped from more than one tensor");
  }

  bool layer_in_range(const std::smatch& m, const std::string& name, const Tensor& t) {
    const int l = std::stoi(m[1].str());
    if (l < cfg.num_layers) return true;
    warnings.push_back("tensor " + name + " refers to layer beyond num_layers");
    extras.emplace(name, t);
    return false;
  }
};

std::string strip_prefix(const std::string& name, std::initializer_list<const char*> prefixes) {
  for (auto p : prefixes) {
    std::string_view sv(p);
    if (name.rfind(sv, 0) == 0) return name.substr(sv.size());
  }
  return name;
}

void normalize_raw(Normalizer& n, std::map<std::string, Tensor>& raw) {
  static const std::regex attn_re(R"(^layer\.(\d+)\.attn\.(W_[QKVO])$)");
  static const std::regex ff_re(R"(^layer\.(\d+)\.ff\.([KV])$)");
  const std::int64_t d = n.cfg.hidden_dim, e = n.cfg.vocab_size, dff = n.cfg.ff_dim;
  for (auto& [name, t] : raw) {
    std::smatch m;
    if (name == names::embedding) {
      // e x d storage is accepted and transposed; square case is taken as d x e.
      if (t.shape() == std::vector<std::int64_t>{e, d} && d != e)
        n.place(name, t, {name, Transform::transpose, {e, d}});
      else
        n.place(name, t, {name, Transform::none, {d, e}});
    } else if (name == names::final_ln_gamma || name == names::final_ln_beta) {
      n.place(name, t, {name, Transform::none, {d}});
    } else if (std::regex_match(name, m, attn_re)) {
      if (n.layer_in_range(m, name, t)) n.place(name, t, {name, Transform::none, {d, d}});
    } else if (std::regex_match(name, m, ff_re)) {
      if (n.layer_in_range(m, name, t)) n.place(name, t, {name, Transform::none, {dff, d}});
    } else {
      static const std::regex unused(R"((bias|ln|norm|LayerNorm|position|pos_embed))");
      n.keep_extra(name, std::move(t), std::regex_search(name, unused));
    }
  }
}

void normalize_gpt2(Normalizer& n, std::map<std::string, Tensor>& raw) {
  static const std::regex c_attn(R"(^h\.(\d+)\.attn\.c_attn\.weight$)");
  static const std::regex c_proj(R"(^h\.(\d+)\.attn\.c_proj\.weight$)");
  static const std::regex c_fc(R"(^h\.(\d+)\.mlp\.c_fc\.weight$)");
  static const std::regex mlp_proj(R"(^h\.(\d+)\.mlp\.c_proj\.weight$)");
  static const std::regex unused(
      R"(^(h\.\d+\.(ln_1|ln_2)\..*|.*\.bias|wpe\.weight|lm_head\.weight|.*masked_bias)$)");
  const std::int64_t d = n.cfg.hidden_dim, e = n.cfg.vocab_size, dff = n.cfg.ff_dim;
  for (auto& [full, t] : raw) {
    const std::string name = strip_prefix(full, {"transformer."});
    std::smatch m;
    if (name == "wte.weight") {
      n.place(full, t, {std::string(names::embedding), Transform::transpose, {e, d}});
    } else if (name == "ln_f.weight") {
      n.place(full, t, {std::string(names::final_ln_gamma), Transform::none, {d}});
    } else if (name == "ln_f.bias") {
      n.place(full, t, {std::string(names::final_ln_beta), Transform::none, {d}});
    } else if (std::regex_match(name, m, c_attn)) {
      if (!n.layer_in_range(m, full, t)) continue;
      // Conv1D kernels are already x -> xW; the fused columns are [Q | K | V].
      expect_shape(full, t, {d, 3 * d});
      const int l = std::stoi(m[1].str());
      const char* which[] = {"W_Q", "W_K", "W_V"};
      for (int i = 0; i < 3; ++i) {
        Tensor block = t.column_block(i * d, (i + 1) * d);
        n.place(full, block, {names::attn(l, which[i]), Transform::none, {d, d}});
      }
    } else if (std::regex_match(name, m, c_proj)) {
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::attn(std::stoi(m[1].str()), "W_O"), Transform::none, {d, d}});
    } else if (std::regex_match(name, m, c_fc)) {
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::ff(std::stoi(m[1].str()), "K"), Transform::transpose, {d, dff}});
    } else if (std::regex_match(name, m, mlp_proj)) {
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::ff(std::stoi(m[1].str()), "V"), Transform::none, {dff, d}});
    } else {
      n.keep_extra(full, std::move(t), std::regex_match(name, unused));
    }
  }
}

void normalize_bert(Normalizer& n, std::map<std::string, Tensor>& raw) {
  static const std::regex qkv(R"(^encoder\.layer\.(\d+)\.attention\.self\.(query|key|value)\.weight$)");
  static const std::regex out(R"(^encoder\.layer\.(\d+)\.attention\.output\.dense\.weight$)");
  static const std::regex inter(R"(^encoder\.layer\.(\d+)\.intermediate\.dense\.weight$)");
  static const std::regex ffout(R"(^encoder\.layer\.(\d+)\.output\.dense\.weight$)");
  static const std::regex unused(
      R"(^(.*\.bias|.*LayerNorm.*|embeddings\.(position|token_type)_.*|pooler\..*|cls\..*|.*position_ids)$)");
  const std::int64_t d = n.cfg.hidden_dim, e = n.cfg.vocab_size, dff = n.cfg.ff_dim;
  for (auto& [full, t] : raw) {
    const std::string name = strip_prefix(full, {"bert."});
    std::smatch m;
    // nn.Linear stores out x in and computes x W^T.
    if (name == "embeddings.word_embeddings.weight") {
      n.place(full, t, {std::string(names::embedding), Transform::transpose, {e, d}});
    } else if (std::regex_match(name, m, qkv)) {
      if (!n.layer_in_range(m, full, t)) continue;
      const std::string kind = m[2].str();
      const char* which = kind == "query" ? "W_Q" : kind == "key" ? "W_K" : "W_V";
      n.place(full, t, {names::attn(std::stoi(m[1].str()), which), Transform::transpose, {d, d}});
    } else if (std::regex_match(name, m, out)) {
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::attn(std::stoi(m[1].str()), "W_O"), Transform::transpose, {d, d}});
    } else if (std::regex_match(name, m, inter)) {
      // Stored d_ff x d, which is already the key-per-row layout.
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::ff(std::stoi(m[1].str()), "K"), Transform::none, {dff, d}});
    } else if (std::regex_match(name, m, ffout)) {
      if (n.layer_in_range(m, full, t))
        n.place(full, t, {names::ff(std::stoi(m[1].str()), "V"), Transform::transpose, {d, dff}});
    } else {
      n.keep_extra(full, std::move(t), std::regex_match(name, unused));
    }
  }
}

}  // namespace

WeightStore normalize_checkpoint(std::map<std::string, Tensor> raw, const ModelConfig& config) {
  config.validate();
  Normalizer n{config, {}, {}, {}};
  switch (config.architecture) {
    case Architecture::raw: normalize_raw(n, raw); break;
    case Architecture::gpt2_style: normalize_gpt2(n, raw); break;
    case Architecture::bert_style: normalize_bert(n, raw); break;
  }
  return WeightStore(config, std::move(n.params), std::move(n.extras), std::move(n.warnings));
}

WeightStore load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  auto file = safetensors::read(path);
  std::vector<std::string> skipped;
  for (const auto& s : file.skipped) skipped.push_back("skipping tensor " + s + " with unsupported dtype");
  WeightStore store = normalize_checkpoint(std::move(file.tensors), config);
  if (skipped.empty()) return store;
  auto warnings = store.warnings();
  warnings.insert(warnings.end(), skipped.begin(), skipped.end());
  return WeightStore(store.config(), store.params(), store.extras(), std::move(warnings));
}

void save_checkpoint(const std::filesystem::path& path, const WeightStore& store) {
  safetensors::write(path, store.params(), {{"format", "embedlens-canonical"}});
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], i).second)
      throw Error("checkpoint", "token", tokens_[i], "duplicate token in vocabulary");
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size())
    throw Error("checkpoint", "token_id", std::to_string(id),
                "id outside vocabulary of size " + std::to_string(tokens_.size()));
  return tokens_[id];
}

std::optional<std::size_t> Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Vocabulary parse_vocabulary(std::string_view text, VocabFormat format,
                            std::optional<std::size_t> expected_size) {
  std::vector<std::string> tokens;
  if (format == VocabFormat::json_map) {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw Error("checkpoint", "vocab", "json", std::string("malformed vocabulary: ") + e.what());
    }
    if (!j.is_object()) throw Error("checkpoint", "vocab", "json", "expected token -> id object");
    const std::size_t e = expected_size.value_or(j.size());
    std::vector<std::optional<std::string>> slots(e);
    for (const auto& [tok, idv] : j.items()) {
      if (!idv.is_number_integer())
        throw Error("checkpoint", "token", tok, "id is not an integer");
      const auto id = idv.get<std::int64_t>();
      if (id < 0 || static_cast<std::size_t>(id) >= e)
        throw Error("checkpoint", "token_id", std::to_string(id),
                    "id outside vocabulary of size " + std::to_string(e));
      if (slots[id]) throw Error("checkpoint", "token_id", std::to_string(id), "duplicate id");
      slots[id] = tok;
    }
    tokens.reserve(e);
    for (std::size_t i = 0; i < e; ++i) {
      if (!slots[i]) throw Error("checkpoint", "token_id", std::to_string(i), "id gap in vocabulary");
      tokens.push_back(std::move(*slots[i]));
    }
  } else {
    std::size_t start = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      tokens.emplace_back(line);
      start = end + 1;
    }
    if (expected_size && tokens.size() != *expected_size)
      throw Error("checkpoint", "vocab_size", std::to_string(tokens.size()),
                  "expected " + std::to_string(*expected_size) + " tokens");
  }
  return Vocabulary(std::move(tokens));
}

Vocabulary load_vocabulary(const std::filesystem::path& path, VocabFormat format,
                           std::optional<std::size_t> expected_size) {
  return parse_vocabulary(read_file(path), format, expected_size);
}

VocabFormat vocab_format_for(const std::filesystem::path& path) {
  return path.extension() == ".json" ? VocabFormat::json_map : VocabFormat::line_per_token;
}

std::string vocabulary_to_json(const Vocabulary& vocab) {
  json j = json::object();
  for (std::size_t i = 0; i < vocab.size(); ++i) j[vocab.token(i)] = i;
  return j.dump() + "\n";
}

// ---------------------------------------------------------------------------
// Hidden states

HiddenStateDump::HiddenStateDump(std::vector<Tensor> levels, std::map<int, Tensor> attn_inputs,
                                 std::map<int, Tensor> ff_inputs)
    : levels_(std::move(levels)),
      attn_inputs_(std::move(attn_inputs)),
      ff_inputs_(std::move(ff_inputs)) {
  if (levels_.empty()) throw Error("checkpoint", "hidden", "0", "dump has no levels");
  const auto want = levels_[0].shape();
  if (want.size() != 2) throw Error("checkpoint", "hidden.0", shape_string(want), "expected N x d");
  auto check = [&](const std::string& name, const Tensor& t) {
    if (t.shape() != want)
      throw Error("checkpoint", name, t.shape_string(),
                  "inconsistent shape; expected " + shape_string(want));
  };
  for (std::size_t i = 0; i < levels_.size(); ++i) check("hidden." + std::to_string(i), levels_[i]);
  for (const auto& [l, t] : attn_inputs_) check("attn_input." + std::to_string(l), t);
  for (const auto& [l, t] : ff_inputs_) check("ff_input." + std::to_string(l), t);
}

bool HiddenStateDump::bit_equal(const HiddenStateDump& other) const {
  auto eq_maps = [](const std::map<int, Tensor>& a, const std::map<int, Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [k, t] : a) {
      auto it = b.find(k);
      if (it == b.end() || !t.bit_equal(it->second)) return false;
    }
    return true;
  };
  if (levels_.size() != other.levels_.size()) return false;
  for (std::size_t i = 0; i < levels_.size(); ++i)
    if (!levels_[i].bit_equal(other.levels_[i])) return false;
  return eq_maps(attn_inputs_, other.attn_inputs_) && eq_maps(ff_inputs_, other.ff_inputs_);
}

HiddenStateDump hidden_states_from(const std::map<std::string, Tensor>& tensors,
                                   const std::string& origin) {
  static const std::regex re(R"(^(hidden|attn_input|ff_input)\.(\d+)$)");
  std::map<int, Tensor> hidden, attn, ff;
  for (const auto& [name, t] : tensors) {
    std::smatch m;
    if (!std::regex_match(name, m, re)) {
      log_line("warn", "checkpoint", "ignoring tensor " + name + " in " + origin);
      continue;
    }
    const int idx = std::stoi(m[2].str());
    auto& dst = m[1] == "hidden" ? hidden : m[1] == "attn_input" ? attn : ff;
    dst.emplace(idx, t);
  }
  if (hidden.empty()) throw Error("checkpoint", "hidden", origin, "no hidden.<layer> tensors");
  std::vector<Tensor> levels;
  for (int i = 0; i < static_cast<int>(hidden.size()); ++i) {
    auto it = hidden.find(i);
    if (it == hidden.end())
      throw Error("checkpoint", "hidden", std::to_string(i), "gap in hidden-state levels in " + origin);
    levels.push_back(it->second);
  }
  return HiddenStateDump(std::move(levels), std::move(attn), std::move(ff));
}

HiddenStateDump load_hidden_states(const std::filesystem::path& path) {
  auto file = safetensors::read(path);
  return hidden_states_from(file.tensors, path.string());
}

void save_hidden_states(const std::filesystem::path& path, const HiddenStateDump& dump) {
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < dump.num_levels(); ++i)
    out.emplace("hidden." + std::to_string(i), dump.level_tensor(i));
  for (const auto& [l, t] : dump.attn_inputs()) out.emplace("attn_input." + std::to_string(l), t);
  for (const auto& [l, t] : dump.ff_inputs()) out.emplace("ff_input." + std::to_string(l), t);
  safetensors::write(path, out);
}

// ---------------------------------------------------------------------------

template <typename T>
FoldedState<T> fold_final_layer_norm(const Vec<T>& h, const Vec<T>& gamma, const Vec<T>& beta,
                                     double eps) {
  if (gamma.size() != h.size() || beta.size() != h.size())
    throw Error("checkpoint", "layer_norm", std::to_string(gamma.size()),
                "gamma/beta length does not match hidden size " + std::to_string(h.size()));
  const double n = static_cast<double>(h.size());
  const double mean = h.template cast<double>().sum() / n;
  double var = 0;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    const double c = static_cast<double>(h[i]) - mean;
    var += c * c;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  FoldedState<T> out;
  out.degenerate = var <= eps * 1e-3;
  out.value.resize(h.size());
  for (Eigen::Index i = 0; i < h.size(); ++i)
    out.value[i] = static_cast<T>((static_cast<double>(h[i]) - mean) * inv * static_cast<double>(gamma[i]) +
                                  static_cast<double>(beta[i]));
  return out;
}

template FoldedState<float> fold_final_layer_norm(const VecF&, const VecF&, const VecF&, double);
template FoldedState<double> fold_final_layer_norm(const VecD&, const VecD&, const VecD&, double);

}  // namespace embedlens
