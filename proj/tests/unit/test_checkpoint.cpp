#include "doctest.h"

#include "../support.hpp"
#include "embedlens/algebra.hpp"
#include "embedlens/checkpoint.hpp"
#include "embedlens/error.hpp"
#include "embedlens/io.hpp"
#include "embedlens/safetensors.hpp"
#include "embedlens/synthetic.hpp"

#include <cstring>

using namespace embedlens;

namespace {

ModelConfig small_config(Architecture arch) {
  ModelConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.hidden_dim = 8;
  c.ff_dim = 16;
  c.vocab_size = 32;
  c.architecture = arch;
  return c;
}

Tensor tensor_of(const MatF& m) { return Tensor::from_matrix<float>(m); }

}  // namespace

TEST_CASE("safetensors round-trip is bit-exact and laid out as specified") {
  std::mt19937_64 rng(1);
  std::map<std::string, Tensor> in;
  in.emplace("b", tensor_of(testing::random_matrix<float>(rng, 3, 5)));
  in.emplace("a", Tensor::from_matrix<double>(testing::random_matrix<double>(rng, 2, 2)));
  const std::string bytes = safetensors::serialize(in, {{"note", "x"}});

  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  CHECK((8 + header_len) % 8 == 0);
  CHECK(bytes.size() == 8 + header_len + 3 * 5 * 4 + 2 * 2 * 8);

  auto file = safetensors::parse(bytes);
  REQUIRE(file.tensors.size() == 2);
  CHECK(file.metadata.at("note") == "x");
  for (const auto& [name, t] : in) CHECK(file.tensors.at(name).bit_equal(t));
  CHECK(safetensors::serialize(file.tensors, file.metadata) == bytes);
}

TEST_CASE("safetensors rejects truncated and inconsistent files") {
  CHECK_THROWS_AS(safetensors::parse("abc"), Error);
  std::map<std::string, Tensor> in;
  in.emplace("x", Tensor({2}, std::vector<float>{1, 2}));
  std::string bytes = safetensors::serialize(in);
  CHECK_THROWS_AS(safetensors::parse(bytes.substr(0, bytes.size() - 1)), Error);
  std::string huge = bytes;
  huge[7] = '\x7f';
  CHECK_THROWS_AS(safetensors::parse(huge), Error);
}

TEST_CASE("unsupported dtypes are skipped, not fatal") {
  const std::string header = R"({"m":{"dtype":"U8","shape":[2],"data_offsets":[0,2]}})";
  std::string bytes(8, '\0');
  const std::uint64_t n = header.size();
  std::memcpy(bytes.data(), &n, 8);
  bytes += header;
  bytes += "\x01\x02";
  auto file = safetensors::parse(bytes);
  CHECK(file.tensors.empty());
  REQUIRE(file.skipped.size() == 1);
  CHECK(file.skipped[0] == "m");
}

TEST_CASE("config parsing and validation") {
  auto c = parse_config(R"({"num_layers":2,"num_heads":2,"hidden_dim":8,"ff_dim":16,"vocab_size":32,
                            "architecture":"gpt2-style"})");
  CHECK(c.architecture == Architecture::gpt2_style);
  CHECK(c.tied_embeddings);
  CHECK(parse_config(config_to_json(c)) == c);

  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c.num_heads = 2;
  c.vocab_size = 4;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(parse_config("{\"num_layers\":1}"), Error);
}

TEST_CASE("raw checkpoint with padded identity embedding") {
  ModelConfig cfg = small_config(Architecture::raw);
  cfg.num_layers = 2;
  std::mt19937_64 rng(2);
  std::map<std::string, Tensor> raw;
  MatF E = MatF::Zero(8, 32);
  E.leftCols(8).setIdentity();
  raw.emplace("embedding.E", tensor_of(E));
  for (int l = 0; l < 2; ++l) {
    for (auto w : {"W_Q", "W_K", "W_V", "W_O"})
      raw.emplace(names::attn(l, w), tensor_of(testing::random_matrix<float>(rng, 8, 8)));
    raw.emplace(names::ff(l, "K"), tensor_of(testing::random_matrix<float>(rng, 16, 8)));
    raw.emplace(names::ff(l, "V"), tensor_of(testing::random_matrix<float>(rng, 16, 8)));
  }
  auto store = normalize_checkpoint(raw, cfg);
  CHECK(store.param("embedding.E").shape() == std::vector<std::int64_t>{8, 32});
  CHECK(store.warnings().empty());

  // e x d storage is transposed on load.
  auto transposed = raw;
  transposed.erase("embedding.E");
  transposed.emplace("embedding.E", tensor_of(MatF(E.transpose())));
  CHECK(normalize_checkpoint(transposed, cfg).bit_equal(store));

  auto dir = testing::temp_dir("raw_ckpt");
  save_checkpoint(dir / "w.safetensors", store);
  auto once = load_checkpoint(dir / "w.safetensors", cfg);
  auto twice = load_checkpoint(dir / "w.safetensors", cfg);
  CHECK(once.bit_equal(store));
  CHECK(once.bit_equal(twice));
}

TEST_CASE("missing tensors are listed together") {
  ModelConfig cfg = small_config(Architecture::raw);
  std::map<std::string, Tensor> raw;
  raw.emplace("embedding.E", tensor_of(MatF::Ones(8, 32)));
  try {
    normalize_checkpoint(raw, cfg);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.parameter() == "missing");
    CHECK(e.value().find("layer.0.attn.W_Q") != std::string::npos);
    CHECK(e.value().find("layer.0.ff.V") != std::string::npos);
  }
}

TEST_CASE("shape mismatch names both shapes; NaN is a load error") {
  auto store = synthetic_store({1, 2, 8, 16, 32, 5, DType::f32});
  auto raw = store.params();
  raw.erase(names::ff(0, "K"));
  raw.emplace(names::ff(0, "K"), tensor_of(MatF::Ones(16, 7)));
  try {
    normalize_checkpoint(raw, store.config());
    FAIL("expected error");
  } catch (const Error& e) {
    const std::string what = e.what();
    CHECK(what.find("[16,8]") != std::string::npos);
    CHECK(what.find("[16,7]") != std::string::npos);
  }

  raw = store.params();
  MatF bad = store.matrix<float>(names::attn(0, "W_Q"));
  bad(1, 1) = std::numeric_limits<float>::quiet_NaN();
  raw.erase(names::attn(0, "W_Q"));
  raw.emplace(names::attn(0, "W_Q"), tensor_of(bad));
  CHECK_THROWS_AS(normalize_checkpoint(raw, store.config()), Error);
}

TEST_CASE("gpt2-style fused attention is split into column blocks") {
  ModelConfig cfg = small_config(Architecture::gpt2_style);
  std::mt19937_64 rng(3);
  MatF fused = testing::random_matrix<float>(rng, 8, 24);
  MatF proj = testing::random_matrix<float>(rng, 8, 8);
  MatF fc = testing::random_matrix<float>(rng, 8, 16);
  MatF mproj = testing::random_matrix<float>(rng, 16, 8);
  MatF wte = testing::random_matrix<float>(rng, 32, 8);
  std::map<std::string, Tensor> raw;
  raw.emplace("transformer.wte.weight", tensor_of(wte));
  raw.emplace("transformer.h.0.attn.c_attn.weight", tensor_of(fused));
  raw.emplace("transformer.h.0.attn.c_attn.bias", Tensor({24}, std::vector<float>(24, 0.f)));
  raw.emplace("transformer.h.0.attn.c_proj.weight", tensor_of(proj));
  raw.emplace("transformer.h.0.mlp.c_fc.weight", tensor_of(fc));
  raw.emplace("transformer.h.0.mlp.c_proj.weight", tensor_of(mproj));
  raw.emplace("transformer.ln_f.weight", Tensor({8}, std::vector<float>(8, 2.f)));
  raw.emplace("transformer.h.0.attn.bias", Tensor({1, 1}, std::vector<float>{1.f}));
  raw.emplace("transformer.h.0.mystery", Tensor({3}, std::vector<float>{1, 2, 3}));

  auto store = normalize_checkpoint(raw, cfg);
  const char* which[] = {"W_Q", "W_K", "W_V"};
  for (int b = 0; b < 3; ++b) {
    MatF block = fused.middleCols(8 * b, 8);
    CHECK(store.param(names::attn(0, which[b])).bit_equal(tensor_of(block)));
  }
  CHECK(store.param(names::attn(0, "W_O")).bit_equal(tensor_of(proj)));
  CHECK(store.param(names::ff(0, "K")).bit_equal(tensor_of(MatF(fc.transpose()))));
  CHECK(store.param(names::ff(0, "V")).bit_equal(tensor_of(mproj)));
  CHECK(store.param("embedding.E").bit_equal(tensor_of(MatF(wte.transpose()))));
  CHECK(store.final_layer_norm<float>().first.isApprox(VecF::Constant(8, 2.f)));
  REQUIRE(store.warnings().size() == 1);
  CHECK(store.warnings()[0].find("mystery") != std::string::npos);
  CHECK(store.extras().count("transformer.h.0.mystery") == 1);
}

TEST_CASE("bert-style linear kernels are transposed to right-multiplication") {
  ModelConfig cfg = small_config(Architecture::bert_style);
  std::mt19937_64 rng(4);
  MatF q = testing::random_matrix<float>(rng, 8, 8), k = testing::random_matrix<float>(rng, 8, 8),
       v = testing::random_matrix<float>(rng, 8, 8), o = testing::random_matrix<float>(rng, 8, 8);
  MatF inter = testing::random_matrix<float>(rng, 16, 8);
  MatF out = testing::random_matrix<float>(rng, 8, 16);
  MatF words = testing::random_matrix<float>(rng, 32, 8);
  std::map<std::string, Tensor> raw;
  raw.emplace("bert.embeddings.word_embeddings.weight", tensor_of(words));
  raw.emplace("bert.embeddings.position_embeddings.weight", tensor_of(MatF::Ones(4, 8)));
  raw.emplace("bert.encoder.layer.0.attention.self.query.weight", tensor_of(q));
  raw.emplace("bert.encoder.layer.0.attention.self.key.weight", tensor_of(k));
  raw.emplace("bert.encoder.layer.0.attention.self.value.weight", tensor_of(v));
  raw.emplace("bert.encoder.layer.0.attention.output.dense.weight", tensor_of(o));
  raw.emplace("bert.encoder.layer.0.intermediate.dense.weight", tensor_of(inter));
  raw.emplace("bert.encoder.layer.0.output.dense.weight", tensor_of(out));

  auto store = normalize_checkpoint(raw, cfg);
  CHECK(store.warnings().empty());
  CHECK(store.param(names::attn(0, "W_Q")).bit_equal(tensor_of(MatF(q.transpose()))));
  CHECK(store.param(names::attn(0, "W_O")).bit_equal(tensor_of(MatF(o.transpose()))));
  CHECK(store.param(names::ff(0, "K")).bit_equal(tensor_of(inter)));
  CHECK(store.param(names::ff(0, "V")).bit_equal(tensor_of(MatF(out.transpose()))));
  CHECK(store.param("embedding.E").bit_equal(tensor_of(MatF(words.transpose()))));
  CHECK_FALSE(store.config().causal());
}

TEST_CASE("head split then merge reproduces every attention tensor bit-exactly") {
  auto store = synthetic_store({2, 4, 16, 32, 64, 6, DType::f32});
  for (int l = 0; l < 2; ++l) {
    auto layer = layer_weights<float>(store, l);
    auto merged = merge_heads(split_heads(layer, 4));
    CHECK(tensor_of(merged.W_Q).bit_equal(store.param(names::attn(l, "W_Q"))));
    CHECK(tensor_of(merged.W_K).bit_equal(store.param(names::attn(l, "W_K"))));
    CHECK(tensor_of(merged.W_V).bit_equal(store.param(names::attn(l, "W_V"))));
    CHECK(tensor_of(merged.W_O).bit_equal(store.param(names::attn(l, "W_O"))));
  }
}

TEST_CASE("vocabulary formats") {
  auto a = parse_vocabulary(R"({"a":0,"b":1})", VocabFormat::json_map);
  CHECK(a.tokens() == std::vector<std::string>{"a", "b"});
  auto b = parse_vocabulary("x\ny\nz", VocabFormat::line_per_token);
  CHECK(b.size() == 3);
  CHECK(b.id_of("z") == 2u);
  CHECK(b.token(1) == "y");
  CHECK_THROWS_AS(parse_vocabulary(R"({"a":0,"b":0})", VocabFormat::json_map), Error);
  CHECK_THROWS_AS(parse_vocabulary(R"({"a":0,"b":2})", VocabFormat::json_map), Error);
  CHECK_THROWS_AS(parse_vocabulary("x\nx\n", VocabFormat::line_per_token), Error);
  CHECK_THROWS_AS(parse_vocabulary("x\ny\n", VocabFormat::line_per_token, 3), Error);
  CHECK(parse_vocabulary(vocabulary_to_json(b), VocabFormat::json_map).tokens() == b.tokens());
}

TEST_CASE("hidden-state dumps") {
  std::mt19937_64 rng(5);
  std::map<std::string, Tensor> t;
  for (int l = 0; l < 3; ++l)
    t.emplace("hidden." + std::to_string(l), tensor_of(testing::random_matrix<float>(rng, 4, 8)));
  auto dump = hidden_states_from(t);
  CHECK(dump.num_levels() == 3);
  CHECK(dump.num_tokens() == 4);
  CHECK(dump.hidden_dim() == 8);

  auto dir = testing::temp_dir("hidden");
  save_hidden_states(dir / "h.safetensors", dump);
  CHECK(load_hidden_states(dir / "h.safetensors").bit_equal(dump));

  auto gap = t;
  gap.erase("hidden.1");
  CHECK_THROWS_AS(hidden_states_from(gap), Error);

  auto ragged = t;
  ragged.erase("hidden.2");
  ragged.emplace("hidden.2", tensor_of(testing::random_matrix<float>(rng, 5, 8)));
  CHECK_THROWS_AS(hidden_states_from(ragged), Error);
}

TEST_CASE("final layer-norm folding") {
  VecD ones = VecD::Ones(2), zeros = VecD::Zero(2);
  VecD h(2);
  h << 1, -1;
  auto f = fold_final_layer_norm<double>(h, ones, zeros);
  CHECK(f.value(0) == doctest::Approx(1.0 / std::sqrt(1.0 + kLayerNormEps)).epsilon(1e-15));
  CHECK(f.value(1) == doctest::Approx(-1.0 / std::sqrt(1.0 + kLayerNormEps)).epsilon(1e-15));
  CHECK_FALSE(f.degenerate);

  auto c = fold_final_layer_norm<double>(VecD::Constant(2, 3.0), ones, zeros);
  CHECK(c.value.isZero());
  CHECK(c.degenerate);

  VecD beta(2);
  beta << 0.25, -7;
  CHECK(fold_final_layer_norm<double>(h, zeros, beta).value == beta);
}

TEST_CASE("atomic writes leave no temp file behind") {
  auto dir = testing::temp_dir("atomic");
  write_file_atomic(dir / "out.txt", "hello");
  CHECK(read_file(dir / "out.txt") == "hello");
  std::size_t count = 0;
  for ([[maybe_unused]] auto& e : std::filesystem::directory_iterator(dir)) ++count;
  CHECK(count == 1);
}
