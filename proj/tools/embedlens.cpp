// embedlens: zero-pass inspection of transformer checkpoints in embedding space.
//
// Exit codes: 0 success, 1 data error, 2 usage error. Outputs go to --out
// (written atomically) or stdout; diagnostics go to stderr as structured lines.

#include "embedlens/algebra.hpp"
#include "embedlens/alignment.hpp"
#include "embedlens/checkpoint.hpp"
#include "embedlens/error.hpp"
#include "embedlens/io.hpp"
#include "embedlens/metrics.hpp"
#include "embedlens/parallel.hpp"
#include "embedlens/projection.hpp"
#include "embedlens/random.hpp"
#include "embedlens/safetensors.hpp"
#include "embedlens/stitching.hpp"
#include "embedlens/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;
using namespace embedlens;
using ojson = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- options

struct ModelArgs {
  std::string dir, checkpoint, config, vocab;
};

struct Common {
  std::string out;
  std::string dtype = "f32";
  std::string inverse = "transpose";
  int threads = 1;
};

struct Options {
  Common common;
  ModelArgs model, a, b, base, tuned;
  int layer = -1;
  std::vector<int> heads;
  std::string group = "V_ff";
  std::vector<std::string> groups;
  std::vector<Eigen::Index> indices;
  std::string kind = "vo";
  int k = -1;
  std::vector<int> ks;
  int m = 10;
  Eigen::Index sample = 128;
  std::uint64_t seed = 0;
  int block_rows = kDefaultBlockRows;
  std::string pairing = "ff-kv";
  std::string target = "per-layer";
  std::string activation = "gelu";
  std::string hidden;
  std::string distribution = "normal";
  std::vector<std::string> inverses;
  std::vector<std::string> tokens;
  std::string select = ".";
  bool unprojected = false;
  bool mean_center = false;
  bool fold_ln = false;
  int show = 10;
  // synth
  int num_layers = 2, num_heads = 2, hidden_dim = 8, ff_dim = 16, vocab_size = 32, num_tokens = 0;
};

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw UsageError("--dtype must be f32 or f64, got " + s);
}

InverseKind parse_inverse(const std::string& s) {
  try {
    return inverse_kind_from_name(s);
  } catch (const Error&) {
    throw UsageError("--inverse must be transpose or pinv, got " + s);
  }
}

// ---------------------------------------------------------------- loading

struct Loaded {
  WeightStore store;
  Vocabulary vocab;
  std::string id;
};

fs::path require_file(const fs::path& p, const std::string& flag) {
  if (p.empty()) throw UsageError(flag + " is required");
  if (!fs::is_regular_file(p)) throw UsageError(flag + " does not name an existing file: " + p.string());
  return p;
}

Loaded load_model(const ModelArgs& m, const std::string& flag) {
  fs::path ckpt = m.checkpoint, cfg = m.config, voc = m.vocab;
  if (!m.dir.empty()) {
    const fs::path dir = m.dir;
    if (!fs::is_directory(dir)) throw UsageError(flag + " does not name a directory: " + m.dir);
    if (ckpt.empty()) ckpt = dir / "weights.safetensors";
    if (cfg.empty()) cfg = dir / "config.json";
    if (voc.empty()) voc = fs::exists(dir / "vocab.json") ? dir / "vocab.json" : dir / "vocab.txt";
  } else if (ckpt.empty()) {
    throw UsageError(flag + " (or --checkpoint/--config/--vocab) is required");
  }
  require_file(ckpt, "--checkpoint");
  require_file(cfg, "--config");
  require_file(voc, "--vocab");
  Loaded out;
  const auto config = load_config(cfg);
  out.store = load_checkpoint(ckpt, config);
  for (const auto& w : out.store.warnings()) log_line("warn", "checkpoint", w);
  out.vocab = load_vocabulary(voc, vocab_format_for(voc), static_cast<std::size_t>(config.vocab_size));
  out.id = !m.dir.empty() ? fs::path(m.dir).lexically_normal().filename().string() : ckpt.stem().string();
  if (out.id.empty()) out.id = fs::path(m.dir).lexically_normal().parent_path().filename().string();
  return out;
}

// Pseudo-inverses of large embeddings are expensive; EMBEDLENS_CACHE names a
// directory where they are kept keyed by a hash of E's bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = 1469598103934665603ull) {
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
Projector<T> make_projector(const WeightStore& store, ProjectionSpec spec) {
  Mat<T> E = store.embedding<T>();
  if (spec.inverse_kind != InverseKind::pseudo_inverse) return Projector<T>(std::move(E), spec);
  Mat<T> centered = E;
  if (spec.mean_center) centered.colwise() -= Vec<T>(E.rowwise().mean());

  std::optional<fs::path> cache_file;
  if (const char* dir = std::getenv("EMBEDLENS_CACHE"); dir && *dir) {
    const auto& t = store.param(std::string(names::embedding));
    std::uint64_t h = fnv1a(t.bytes());
    const std::string tag = dtype_name(dtype_of<T>()) + (spec.mean_center ? "c" : "");
    h = fnv1a(std::as_bytes(std::span(tag.data(), tag.size())), h);
    std::ostringstream name;
    name << "pinv-" << std::hex << h << ".safetensors";
    cache_file = fs::path(dir) / name.str();
    if (fs::exists(*cache_file)) {
      auto file = safetensors::read(*cache_file);
      if (auto it = file.tensors.find("pinv"); it != file.tensors.end() && it->second.dtype() == dtype_of<T>()) {
        log_line("info", "cli", "pseudo-inverse loaded from cache " + cache_file->string());
        return Projector<T>(std::move(E), spec, it->second.matrix<T>());
      }
    }
  }
  Mat<T> pinv = pseudo_inverse<T>(centered, "embedding.E").matrix;
  if (cache_file) {
    fs::create_directories(cache_file->parent_path());
    safetensors::write(*cache_file, {{"pinv", Tensor::from_matrix<T>(pinv)}});
  }
  return Projector<T>(std::move(E), spec, std::move(pinv));
}

ProjectionSpec spec_from(const Options& o) {
  ProjectionSpec s;
  s.inverse_kind = parse_inverse(o.common.inverse);
  s.mean_center = o.mean_center;
  s.fold_layer_norm = o.fold_ln;
  return s;
}

// ---------------------------------------------------------------- output

void emit(const Common& c, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
    std::cout.flush();
  } else {
    write_file_atomic(c.out, text);
  }
}

template <typename F>
int with_dtype(const Options& o, F&& f) {
  return parse_dtype(o.common.dtype) == DType::f64 ? f(double{}) : f(float{});
}

int require_layer(const Options& o, const WeightStore& s) {
  if (o.layer < 0 || o.layer >= s.config().num_layers)
    throw UsageError("--layer must be in [0, " + std::to_string(s.config().num_layers) + ")");
  return o.layer;
}

ParamGroup parse_group(const std::string& g) {
  try {
    return group_from_name(g);
  } catch (const Error&) {
    throw UsageError("unknown group " + g + " (expected W_Q,W_K,W_V,W_O,K_ff,V_ff)");
  }
}

template <typename T>
ojson token_list(const std::vector<std::pair<Eigen::Index, T>>& scores, const Vocabulary& vocab) {
  ojson arr = ojson::array();
  for (const auto& t : resolve_tokens(scores, vocab)) arr.push_back(t.token);
  return arr;
}

// An explicit --k is validated downstream; the default shrinks to fit small vocabularies.
int pick_k(int requested, int fallback, Eigen::Index limit) {
  return requested >= 0 ? requested : static_cast<int>(std::min<Eigen::Index>(fallback, limit));
}

// ---------------------------------------------------------------- commands

int cmd_inspect(const Options& o) {
  auto m = load_model(o.model, "--model");
  ojson j;
  j["kind"] = "inspect";
  j["model"] = m.id;
  j["config"] = ojson::parse(config_to_json(m.store.config()));
  j["total_heads"] = m.store.total_heads();
  j["vocab_size"] = m.vocab.size();
  j["params"] = ojson::array();
  for (const auto& [name, t] : m.store.params())
    j["params"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name(t.dtype())}});
  j["extras"] = ojson::array();
  for (const auto& [name, t] : m.store.extras())
    j["extras"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name(t.dtype())}});
  j["warnings"] = m.store.warnings();
  emit(o.common, j.dump(2) + "\n");
  return 0;
}

int cmd_project(const Options& o) {
  auto m = load_model(o.model, "--model");
  const int k = pick_k(o.k, kDefaultVectorK, m.store.config().vocab_size);
  return with_dtype(o, [&]<typename T>(T) {
    auto proj = make_projector<T>(m.store, spec_from(o));
    std::string out;
    auto emit_vector = [&](const std::string& param, Eigen::Index index, const Vec<T>& projected) {
      for (const auto& t : resolve_tokens(top_k_indices<T>(projected, k), m.vocab)) {
        ojson r;
        r["kind"] = "token";
        r["param"] = param;
        r["index"] = index;
        r["token"] = t.token;
        r["id"] = t.id;
        r["score"] = t.score;
        out += r.dump() + "\n";
      }
    };
    if (!o.hidden.empty()) {
      const auto dump = load_hidden_states(require_file(o.hidden, "--hidden"));
      if (o.layer < 0 || o.layer >= static_cast<int>(dump.num_levels()))
        throw UsageError("--layer must name a dumped level in [0, " + std::to_string(dump.num_levels()) + ")");
      if (proj.spec().fold_layer_norm) {
        auto [gamma, beta] = m.store.final_layer_norm<T>();
        proj.set_layer_norm(gamma, beta);
      }
      const Mat<T> h = dump.level<T>(static_cast<std::size_t>(o.layer));
      std::vector<Eigen::Index> which = o.indices;
      if (which.empty())
        for (Eigen::Index i = 0; i < h.rows(); ++i) which.push_back(i);
      std::vector<Vec<T>> projected(which.size());
      for (auto i : which)
        if (i < 0 || i >= h.rows()) throw Error("cli", "index", std::to_string(i), "token index outside dump");
      parallel_for(which.size(), o.common.threads,
                   [&](std::size_t n) { projected[n] = proj.project_hidden(h.row(which[n]).transpose()); });
      for (std::size_t n = 0; n < which.size(); ++n)
        emit_vector("hidden." + std::to_string(o.layer), which[n], projected[n]);
    } else {
      const int layer = require_layer(o, m.store);
      const auto g = parse_group(o.group);
      const Mat<T> vecs = m.store.group_vectors<T>(layer, g);
      std::vector<Eigen::Index> which = o.indices;
      if (which.empty())
        for (Eigen::Index i = 0; i < vecs.rows(); ++i) which.push_back(i);
      for (auto i : which)
        if (i < 0 || i >= vecs.rows())
          throw Error("cli", "index", std::to_string(i), "vector index outside " + group_param_name(layer, g));
      std::vector<Vec<T>> projected(which.size());
      parallel_for(which.size(), o.common.threads, [&](std::size_t n) {
        projected[n] = proj.project(vecs.row(which[n]).transpose(), side_for(g));
      });
      for (std::size_t n = 0; n < which.size(); ++n)
        emit_vector(group_param_name(layer, g), which[n], projected[n]);
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_top_pairs(const Options& o) {
  auto m = load_model(o.model, "--model");
  const int layer = require_layer(o, m.store);
  const Eigen::Index e = m.store.config().vocab_size;
  const int k = pick_k(o.k, kDefaultPairK, e * e);
  if (o.kind != "vo" && o.kind != "qk") throw UsageError("--kind must be vo or qk");
  if (o.block_rows < 1) throw UsageError("--block-rows must be >= 1");
  return with_dtype(o, [&]<typename T>(T) {
    auto proj = make_projector<T>(m.store, spec_from(o));
    const auto lw = layer_weights<T>(m.store, layer);
    const auto heads = split_heads(lw, m.store.config().num_heads);
    std::vector<int> which = o.heads;
    if (which.empty())
      for (int h = 0; h < m.store.config().num_heads; ++h) which.push_back(h);
    std::string out;
    for (int h : which) {
      if (h < 0 || h >= m.store.config().num_heads)
        throw UsageError("--head must be in [0, " + std::to_string(m.store.config().num_heads) + ")");
      const auto fm = o.kind == "vo" ? project_vo(interaction_vo(heads[h]), proj)
                                     : project_qk(interaction_qk(heads[h]), proj);
      for (const auto& p : resolve_pairs(top_pairs(fm, k, o.block_rows, o.common.threads), m.vocab)) {
        ojson r;
        r["kind"] = "pair";
        r["layer"] = layer;
        r["head"] = h;
        r["src"] = p.src_token;
        r["dst"] = p.dst_token;
        r["score"] = p.score;
        r["src_id"] = p.src_id;
        r["dst_id"] = p.dst_id;
        r["matrix"] = o.kind;
        out += r.dump() + "\n";
      }
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_simk(const Options& o) {
  auto m = load_model(o.model, "--model");
  const int k = pick_k(o.k, kDefaultVectorK, m.store.config().vocab_size);
  Pairing pairing;
  try {
    pairing = pairing_from_name(o.pairing);
  } catch (const Error&) {
    throw UsageError("--pairing must be ff-kv, attn-vo or attn-qk");
  }
  return with_dtype(o, [&]<typename T>(T) {
    auto proj = make_projector<T>(m.store, spec_from(o));
    std::string out;
    for (const auto& r : related_pairs_report(m.store, pairing, k, proj, seeded_shuffler(o.seed), o.common.threads)) {
      ojson j = ojson::parse(report_to_json(r));
      j["seed"] = o.seed;
      out += j.dump() + "\n";
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_rk(const Options& o) {
  auto m = load_model(o.model, "--model");
  fs::path hidden = o.hidden;
  if (hidden.empty() && !o.model.dir.empty()) hidden = fs::path(o.model.dir) / "hidden.safetensors";
  const auto dump = load_hidden_states(require_file(hidden, "--hidden"));
  RkOptions opt;
  opt.m = o.m;
  opt.k = pick_k(o.k, kDefaultVectorK, m.store.config().vocab_size);
  opt.baseline_seed = o.seed;
  opt.threads = o.common.threads;
  try {
    opt.target = rk_target_from_name(o.target);
    opt.activation = activation_from_name(o.activation);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return with_dtype(o, [&]<typename T>(T) {
    auto proj = make_projector<T>(m.store, spec_from(o));
    std::string out;
    for (auto r : r_k_experiment(m.store, dump, proj, opt)) {
      ojson j = ojson::parse(report_to_json(r));
      j["seed"] = o.seed;
      j["activation"] = activation_name(opt.activation);
      j["target"] = rk_target_name(opt.target);
      out += j.dump() + "\n";
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_keepk(const Options& o) {
  auto m = load_model(o.model, "--model");
  const auto& cfg = m.store.config();
  if (o.sample < 3) throw UsageError("--sample must be >= 3");
  std::vector<int> ks = o.ks;
  if (ks.empty()) ks = {10, 50, 100, 200, 300, 500};
  std::vector<std::string> inverses = o.inverses;
  if (inverses.empty()) inverses = {o.common.inverse};
  for (const auto& inv : inverses) parse_inverse(inv);

  return with_dtype(o, [&]<typename T>(T) {
    const Eigen::Index n = o.sample, d = cfg.hidden_dim;
    Mat<T> samples(n, d);
    if (o.distribution == "normal") {
      for (Eigen::Index i = 0; i < n; ++i) {
        auto rng = stream_rng(o.seed, static_cast<std::uint64_t>(i));
        for (Eigen::Index j = 0; j < d; ++j) samples(i, j) = static_cast<T>(standard_normal(rng));
      }
    } else if (o.distribution == "ff-values") {
      const std::size_t pool = static_cast<std::size_t>(cfg.num_layers) * cfg.ff_dim;
      if (static_cast<std::size_t>(n) > pool) throw UsageError("--sample exceeds the number of FF values");
      auto rng = stream_rng(o.seed, 0);
      const auto idx = sample_without_replacement(rng, pool, static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) {
        const int l = static_cast<int>(idx[i] / cfg.ff_dim);
        samples.row(i) = m.store.matrix<T>(names::ff(l, "V")).row(idx[i] % cfg.ff_dim);
      }
    } else if (o.distribution == "hidden") {
      fs::path hidden = o.hidden;
      if (hidden.empty() && !o.model.dir.empty()) hidden = fs::path(o.model.dir) / "hidden.safetensors";
      const auto dump = load_hidden_states(require_file(hidden, "--hidden"));
      const std::size_t N = static_cast<std::size_t>(dump.num_tokens());
      const std::size_t pool = dump.num_levels() * N;
      if (static_cast<std::size_t>(n) > pool) throw UsageError("--sample exceeds the number of hidden states");
      auto rng = stream_rng(o.seed, 0);
      const auto idx = sample_without_replacement(rng, pool, static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) samples.row(i) = dump.level<T>(idx[i] / N).row(idx[i] % N);
    } else {
      throw UsageError("--distribution must be normal, ff-values or hidden");
    }

    std::string out;
    for (const auto& inv : inverses) {
      ProjectionSpec spec = spec_from(o);
      spec.inverse_kind = parse_inverse(inv);
      auto proj = make_projector<T>(m.store, spec);
      for (int k : ks) {
        ojson r;
        r["kind"] = "metric";
        r["metric"] = "keep_k_score";
        r["inverse"] = inverse_kind_name(spec.inverse_kind);
        r["distribution"] = o.distribution;
        r["k"] = k;
        r["score"] = keep_k_inverse_score_all_pairs(samples, proj, k, o.common.threads);
        r["samples"] = n;
        r["pairs"] = n * (n - 1) / 2;
        r["seed"] = o.seed;
        out += r.dump() + "\n";
      }
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_align(const Options& o) {
  auto a = load_model(o.a, "--a");
  auto b = load_model(o.b, "--b");
  if (o.common.out.empty()) throw UsageError("align requires --out DIR");
  std::vector<ParamGroup> groups;
  for (const auto& g : o.groups) groups.push_back(parse_group(g));
  if (groups.empty()) groups = all_groups();
  AlignOptions opt;
  opt.projected = !o.unprojected;
  opt.sample = o.sample;
  opt.seed = o.seed;
  opt.threads = o.common.threads;
  return with_dtype(o, [&]<typename T>(T) {
    auto pa = make_projector<T>(a.store, spec_from(o));
    auto pb = make_projector<T>(b.store, spec_from(o));
    const auto report = align_models(a.store, b.store, groups, pa, pb, opt);
    const fs::path dir = o.common.out;
    fs::create_directories(dir);
    for (const auto& r : report.per_group)
      write_file_atomic(dir / ("S_" + r.group + ".csv"), similarity_to_csv(r.similarities.front().S));
    write_file_atomic(dir / "S_mean.csv", similarity_to_csv(report.mean.similarities.front().S));
    ojson j = ojson::parse(alignment_to_json(report));
    j["a"] = a.id;
    j["b"] = b.id;
    j["seed"] = o.seed;
    write_file_atomic(dir / "alignment.json", j.dump(2) + "\n");
    return 0;
  });
}

int cmd_stitch(const Options& o) {
  auto a = load_model(o.a, "--a");
  auto b = load_model(o.b, "--b");
  if (o.common.out.empty()) throw UsageError("stitch-kernel requires --out PATH");
  if (a.vocab.tokens() != b.vocab.tokens())
    throw Error("stitching", "vocab", b.id, "models do not share a vocabulary");
  auto kernel = stitch_kernel(a.store.embedding<double>(), b.store.embedding<double>(), a.id, b.id);
  export_kernel(kernel, o.common.out, parse_dtype(o.common.dtype));
  log_line("info", "stitching",
           "kernel " + std::to_string(kernel.K.rows()) + "x" + std::to_string(kernel.K.cols()) + " written to " +
               o.common.out);
  return 0;
}

int cmd_diff(const Options& o) {
  auto base = load_model(o.base, "--base");
  auto tuned = load_model(o.tuned, "--tuned");
  const int k = pick_k(o.k, kDefaultVectorK, base.store.config().vocab_size);
  std::regex selector;
  try {
    selector = std::regex(o.select);
  } catch (const std::regex_error&) {
    throw UsageError("--select is not a valid regular expression: " + o.select);
  }
  return with_dtype(o, [&]<typename T>(T) {
    auto proj = make_projector<T>(base.store, spec_from(o));
    std::string out;
    for (const auto& d : diff_projection<T>(base.store, tuned.store, selector, k, proj, o.indices)) {
      for (const auto* list : {&d.positive, &d.negative}) {
        const bool positive = list == &d.positive;
        for (const auto& t : resolve_tokens(*list, base.vocab)) {
          ojson r;
          r["kind"] = "token";
          r["param"] = d.param;
          r["index"] = d.index;
          r["direction"] = positive ? "positive" : "negative";
          r["token"] = t.token;
          r["id"] = t.id;
          r["score"] = t.score;
          out += r.dump() + "\n";
        }
      }
    }
    emit(o.common, out);
    return 0;
  });
}

int cmd_lookup(const Options& o) {
  auto m = load_model(o.model, "--model");
  if (o.tokens.empty()) throw UsageError("--tokens is required");
  std::vector<Eigen::Index> seeds;
  for (const auto& t : o.tokens) {
    auto id = m.vocab.id_of(t);
    if (!id) throw Error("projection", "token", t, "seed token not in vocabulary");
    seeds.push_back(static_cast<Eigen::Index>(*id));
  }
  const auto g = parse_group(o.group);
  return with_dtype(o, [&]<typename T>(T) {
    const auto& cfg = m.store.config();
    std::vector<int> layers;
    if (o.layer >= 0) layers.push_back(require_layer(o, m.store));
    else
      for (int l = 0; l < cfg.num_layers; ++l) layers.push_back(l);
    std::vector<Mat<T>> blocks;
    Eigen::Index rows = 0;
    for (int l : layers) {
      blocks.push_back(m.store.group_vectors<T>(l, g));
      rows += blocks.back().rows();
    }
    Mat<T> candidates(rows, cfg.hidden_dim);
    std::vector<std::pair<int, Eigen::Index>> origin;
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      candidates.middleRows(at, blocks[i].rows()) = blocks[i];
      for (Eigen::Index r = 0; r < blocks[i].rows(); ++r) origin.emplace_back(layers[i], r);
      at += blocks[i].rows();
    }
    auto proj = make_projector<T>(m.store, spec_from(o));
    const int k = pick_k(o.k, kDefaultPairK, rows);
    const auto top = knowledge_lookup<T>(seeds, candidates, m.store.embedding<T>(), k);
    std::string out;
    int rank = 0;
    for (const auto& [row, score] : top) {
      const auto [layer, index] = origin[row];
      const Vec<T> v = candidates.row(row).transpose();
      ojson r;
      r["kind"] = "lookup";
      r["rank"] = ++rank;
      r["param"] = group_param_name(layer, g);
      r["layer"] = layer;
      r["index"] = index;
      r["score"] = static_cast<double>(score);
      r["tokens"] = token_list(top_k_indices<T>(proj.project(v, side_for(g)), o.show), m.vocab);
      out += r.dump() + "\n";
    }
    emit(o.common, out);
    return 0;
  });
}

// Algebraic identities on a generated model: attention forms, query-key
// scores, subhead sums, Penrose conditions and streaming top-pairs.
int cmd_self_test(const Options& o) {
  std::string out;
  bool ok = true;
  auto check = [&](const std::string& name, double value, double tol) {
    const bool pass = std::isfinite(value) && value <= tol;
    ok = ok && pass;
    ojson r;
    r["kind"] = "check";
    r["name"] = name;
    r["value"] = value;
    r["tolerance"] = tol;
    r["pass"] = pass;
    out += r.dump() + "\n";
  };
  const SyntheticSpec spec{2, 4, 32, 64, 128, o.seed, DType::f64};
  const auto store = synthetic_store(spec);
  const int N = 8;
  for (int l = 0; l < spec.num_layers; ++l) {
    auto rng = stream_rng(o.seed, 1000 + static_cast<std::uint64_t>(l));
    MatD x(N, spec.hidden_dim);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
    const auto ld = layer_weights<double>(store, l);
    const auto lf = layer_weights<float>(store, l);
    const MatF xf = x.cast<float>();
    const auto fd = attention_oracle(x, ld, causal_mask<double>(N));
    const auto ff = attention_oracle(xf, lf, causal_mask<float>(N));
    const std::string at = "layer " + std::to_string(l);
    check("attention_forms_f64 " + at, relative_frobenius<double>(fd.concat, fd.interaction), 1e-10);
    check("attention_forms_f32 " + at, relative_frobenius<float>(ff.concat, ff.interaction), 1e-5);
    double qk = 0, vo = 0, qkd = 0;
    for (const auto& h : split_heads(ld, spec.num_heads)) {
      qkd = std::max(qkd, relative_frobenius<double>(head_scores_direct(x, h), head_scores_interaction(x, h)));
      MatD svo = MatD::Zero(spec.hidden_dim, spec.hidden_dim), sqk = svo;
      for (const auto& s : subheads(h, SubheadKind::vo)) svo += s.outer();
      for (const auto& s : subheads(h, SubheadKind::qk)) sqk += s.outer();
      vo = std::max(vo, relative_frobenius<double>(svo, interaction_vo(h).materialize()));
      qk = std::max(qk, relative_frobenius<double>(sqk, interaction_qk(h).materialize()));
    }
    check("qk_scores_f64 " + at, qkd, 1e-10);
    check("subhead_sum_vo " + at, vo, 1e-6);
    check("subhead_sum_qk " + at, qk, 1e-6);
    const auto merged = merge_heads(split_heads(ld, spec.num_heads));
    check("split_merge " + at,
          (merged.W_Q == ld.W_Q && merged.W_K == ld.W_K && merged.W_V == ld.W_V && merged.W_O == ld.W_O) ? 0 : 1,
          0);
  }
  const MatD E = store.embedding<double>();
  const MatD P = pseudo_inverse<double>(E).matrix;
  const MatD EP = E * P, PE = P * E;
  double penrose = relative_frobenius<double>(E * P * E, E);
  penrose = std::max(penrose, relative_frobenius<double>(P * E * P, P));
  penrose = std::max(penrose, relative_frobenius<double>(EP.transpose(), EP));
  penrose = std::max(penrose, relative_frobenius<double>(PE.transpose(), PE));
  check("penrose_f64", penrose, 1e-9);
  check("right_inverse_f64", (EP - MatD::Identity(E.rows(), E.rows())).cwiseAbs().maxCoeff(), 1e-9);

  const Projector<double> proj(E, {});
  const auto fm = project_vo(interaction_vo(split_heads(layer_weights<double>(store, 0), spec.num_heads)[0]), proj);
  const MatD full = fm.materialize();
  std::vector<PairScore> brute;
  for (Eigen::Index i = 0; i < full.rows(); ++i)
    for (Eigen::Index j = 0; j < full.cols(); ++j) brute.push_back({i, j, full(i, j)});
  std::sort(brute.begin(), brute.end(), ranks_before);
  brute.resize(25);
  double mismatch = 0;
  for (int block : {1, 3, 128})
    if (top_pairs(fm, 25, block, o.common.threads) != brute) mismatch = 1;
  check("top_pairs_streaming", mismatch, 0);

  emit(o.common, out);
  if (!ok) log_line("error", "cli", "self-test failed");
  return ok ? 0 : 1;
}

int cmd_synth(const Options& o) {
  if (o.common.out.empty()) throw UsageError("synth requires --out DIR");
  SyntheticSpec spec{o.num_layers, o.num_heads, o.hidden_dim, o.ff_dim, o.vocab_size, o.seed,
                     parse_dtype(o.common.dtype)};
  WeightStore store;
  try {
    store = synthetic_store(spec);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const fs::path dir = o.common.out;
  fs::create_directories(dir);
  save_checkpoint(dir / "weights.safetensors", store);
  write_file_atomic(dir / "config.json", config_to_json(store.config()));
  write_file_atomic(dir / "vocab.json", vocabulary_to_json(synthetic_vocabulary(spec.vocab_size)));
  if (o.num_tokens > 0)
    save_hidden_states(dir / "hidden.safetensors", synthetic_hidden_states(store, o.num_tokens, o.seed));
  return 0;
}

// ---------------------------------------------------------------- wiring

void add_model(CLI::App* c, ModelArgs& m) {
  c->add_option("--model", m.dir, "Model directory (weights.safetensors, config.json, vocab.json|vocab.txt)");
  c->add_option("--checkpoint", m.checkpoint, "safetensors checkpoint");
  c->add_option("--config", m.config, "config.json");
  c->add_option("--vocab", m.vocab, "Vocabulary (json map or one token per line)");
}

void add_common(CLI::App* c, Common& o, bool projection = true) {
  c->add_option("--out", o.out, "Output path (stdout when omitted)");
  c->add_option("--dtype", o.dtype, "Compute dtype: f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  c->add_option("--threads", o.threads, "Worker threads")->check(CLI::Range(1, 1024));
  if (projection)
    c->add_option("--inverse", o.inverse, "Right-inverse: transpose or pinv")
        ->check(CLI::IsMember({"transpose", "pinv"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-pass interpretation of transformer checkpoints in embedding space"};
  app.require_subcommand(1);
  Options o;

  auto* inspect = app.add_subcommand("inspect", "Summarize a checkpoint");
  add_model(inspect, o.model);
  inspect->add_option("--out", o.common.out, "Output path");

  auto* project = app.add_subcommand("project", "Top-k tokens of projected parameter vectors or hidden states");
  add_model(project, o.model);
  add_common(project, o.common);
  project->add_option("--layer", o.layer, "Layer (or dump level with --hidden)");
  project->add_option("--group", o.group, "Parameter group: W_Q,W_K,W_V,W_O,K_ff,V_ff");
  project->add_option("--index", o.indices, "Vector indices (all when omitted)")->delimiter(',');
  project->add_option("--k", o.k, "Tokens per vector")->check(CLI::PositiveNumber);
  project->add_option("--hidden", o.hidden, "Hidden-state dump; projects its rows instead of parameters");
  project->add_flag("--fold-ln", o.fold_ln, "Apply the final layer norm to hidden states first");
  project->add_flag("--mean-center", o.mean_center, "Subtract the mean embedding from E");

  auto* pairs = app.add_subcommand("top-pairs", "Top vocabulary pairs of a head's W_VO or W_QK");
  add_model(pairs, o.model);
  add_common(pairs, o.common);
  pairs->add_option("--layer", o.layer, "Layer")->required();
  pairs->add_option("--head", o.heads, "Heads (all when omitted)")->delimiter(',');
  pairs->add_option("--kind", o.kind, "Interaction matrix: vo or qk")->check(CLI::IsMember({"vo", "qk"}));
  pairs->add_option("--k", o.k, "Pairs per head")->check(CLI::PositiveNumber);
  pairs->add_option("--block-rows", o.block_rows, "Rows per streamed block")->check(CLI::PositiveNumber);

  auto* simk = app.add_subcommand("simk", "Sim_k of matched parameter pairs against a shuffled baseline");
  add_model(simk, o.model);
  add_common(simk, o.common);
  simk->add_option("--pairing", o.pairing, "ff-kv, attn-vo or attn-qk");
  simk->add_option("--k", o.k, "Top-k size")->check(CLI::PositiveNumber);
  simk->add_option("--seed", o.seed, "Shuffle seed")->required();

  auto* rk = app.add_subcommand("rk", "R_k coverage of hidden states by activated parameters");
  add_model(rk, o.model);
  add_common(rk, o.common);
  rk->add_option("--hidden", o.hidden, "Hidden-state dump (default: <model>/hidden.safetensors)");
  rk->add_option("--m", o.m, "Active vectors per token")->check(CLI::PositiveNumber);
  rk->add_option("--k", o.k, "Top-k size")->check(CLI::PositiveNumber);
  rk->add_option("--target", o.target, "per-layer or final-logits");
  rk->add_option("--activation", o.activation, "gelu, gelu-erf, relu or identity");
  rk->add_option("--seed", o.seed, "Baseline seed")->required();

  auto* keepk = app.add_subcommand("keepk-score", "keep-k inverse score over all pairs of sampled vectors");
  add_model(keepk, o.model);
  add_common(keepk, o.common);
  keepk->add_option("--sample", o.sample, "Number of sampled vectors");
  keepk->add_option("--k", o.ks, "k values")->delimiter(',');
  keepk->add_option("--distribution", o.distribution, "normal, ff-values or hidden");
  keepk->add_option("--inverses", o.inverses, "Several right-inverses in one run")->delimiter(',');
  keepk->add_option("--hidden", o.hidden, "Hidden-state dump for --distribution hidden");
  keepk->add_option("--seed", o.seed, "Sampling seed")->required();

  auto* align = app.add_subcommand("align", "Layer alignment of two same-vocabulary models");
  align->add_option("--a", o.a.dir, "Model A directory")->required();
  align->add_option("--b", o.b.dir, "Model B directory")->required();
  add_common(align, o.common);
  align->add_option("--groups", o.groups, "Parameter groups (all when omitted)")->delimiter(',');
  align->add_option("--sample", o.sample, "Vectors per layer per model")->check(CLI::PositiveNumber);
  align->add_flag("--unprojected", o.unprojected, "Compare raw d-dimensional vectors");
  align->add_option("--seed", o.seed, "Sampling seed")->required();

  auto* stitch = app.add_subcommand("stitch-kernel", "Export K = E_A pinv(E_B)");
  stitch->add_option("--a", o.a.dir, "Source model directory")->required();
  stitch->add_option("--b", o.b.dir, "Target model directory")->required();
  stitch->add_option("--out", o.common.out, "Kernel path (a .json sidecar is written next to it)")->required();
  stitch->add_option("--dtype", o.common.dtype, "Stored dtype: f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  stitch->add_option("--threads", o.common.threads, "Accepted for uniformity");

  auto* diff = app.add_subcommand("diff", "Project fine-tuning differences into embedding space");
  diff->add_option("--base", o.base.dir, "Base model directory")->required();
  diff->add_option("--tuned", o.tuned.dir, "Fine-tuned model directory")->required();
  add_common(diff, o.common);
  diff->add_option("--select", o.select, "Regex over canonical parameter names");
  diff->add_option("--index", o.indices, "Vector indices (all when omitted)")->delimiter(',');
  diff->add_option("--k", o.k, "Tokens per direction")->check(CLI::PositiveNumber);

  auto* lookup = app.add_subcommand("lookup", "Rank FF vectors by similarity to seed tokens");
  add_model(lookup, o.model);
  add_common(lookup, o.common);
  lookup->add_option("--tokens", o.tokens, "Seed tokens")->delimiter(',');
  lookup->add_option("--group", o.group, "K_ff or V_ff (any group is accepted)");
  lookup->add_option("--layer", o.layer, "Restrict to one layer");
  lookup->add_option("--k", o.k, "Candidates to report")->check(CLI::PositiveNumber);
  lookup->add_option("--show", o.show, "Tokens shown per candidate")->check(CLI::PositiveNumber);

  auto* self = app.add_subcommand("self-test", "Algebraic identity checks on a generated model");
  self->add_option("--seed", o.seed, "Generator seed")->required();
  self->add_option("--out", o.common.out, "Output path");
  self->add_option("--threads", o.common.threads, "Worker threads")->check(CLI::Range(1, 1024));

  auto* synth = app.add_subcommand("synth", "Write a random model directory (fixtures, demos)");
  synth->add_option("--out", o.common.out, "Output directory")->required();
  synth->add_option("--seed", o.seed, "Generator seed")->required();
  synth->add_option("--dtype", o.common.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  synth->add_option("--layers", o.num_layers)->check(CLI::PositiveNumber);
  synth->add_option("--heads", o.num_heads)->check(CLI::PositiveNumber);
  synth->add_option("--hidden-dim", o.hidden_dim)->check(CLI::PositiveNumber);
  synth->add_option("--ff-dim", o.ff_dim)->check(CLI::PositiveNumber);
  synth->add_option("--vocab-size", o.vocab_size)->check(CLI::PositiveNumber);
  synth->add_option("--tokens", o.num_tokens, "Also write hidden.safetensors with this many tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*inspect) return cmd_inspect(o);
    if (*project) return cmd_project(o);
    if (*pairs) return cmd_top_pairs(o);
    if (*simk) return cmd_simk(o);
    if (*rk) return cmd_rk(o);
    if (*keepk) return cmd_keepk(o);
    if (*align) return cmd_align(o);
    if (*stitch) return cmd_stitch(o);
    if (*diff) return cmd_diff(o);
    if (*lookup) return cmd_lookup(o);
    if (*self) return cmd_self_test(o);
    if (*synth) return cmd_synth(o);
  } catch (const UsageError& e) {
    log_line("error", "cli", e.what());
    return 2;
  } catch (const Error& e) {
    log_line("error", e.module(), e.what());
    return 1;
  } catch (const std::exception& e) {
    log_line("error", "cli", e.what());
    return 1;
  }
  return 2;
}
