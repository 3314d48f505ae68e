#include "embedlens/synthetic.hpp"

#include "embedlens/algebra.hpp"
#include "embedlens/metrics.hpp"
#include "embedlens/random.hpp"

#include <cmath>

namespace embedlens {

namespace {

Tensor gaussian(std::mt19937_64& rng, std::int64_t rows, std::int64_t cols, double scale, DType dt) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng) * scale;
  return dt == DType::f64 ? Tensor::from_matrix<double>(m) : Tensor::from_matrix<float>(m.cast<float>());
}

}  // namespace

WeightStore synthetic_store(const SyntheticSpec& spec) {
  ModelConfig cfg;
  cfg.num_layers = spec.num_layers;
  cfg.num_heads = spec.num_heads;
  cfg.hidden_dim = spec.hidden_dim;
  cfg.ff_dim = spec.ff_dim;
  cfg.vocab_size = spec.vocab_size;
  cfg.architecture = Architecture::raw;
  cfg.validate();
  const std::int64_t d = cfg.hidden_dim, e = cfg.vocab_size, dff = cfg.ff_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto rng = stream_rng(spec.seed, 0x5eed);
  std::map<std::string, Tensor> params;
  params.emplace(std::string(names::embedding), gaussian(rng, d, e, 1.0, spec.dtype));
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (auto w : {"W_Q", "W_K", "W_V", "W_O"}) params.emplace(names::attn(l, w), gaussian(rng, d, d, scale, spec.dtype));
    params.emplace(names::ff(l, "K"), gaussian(rng, dff, d, scale, spec.dtype));
    params.emplace(names::ff(l, "V"), gaussian(rng, dff, d, scale, spec.dtype));
  }
  auto constant = [&](double value) {
    return spec.dtype == DType::f64 ? Tensor({d}, std::vector<double>(d, value))
                                    : Tensor({d}, std::vector<float>(d, static_cast<float>(value)));
  };
  params.emplace(std::string(names::final_ln_gamma), constant(1.0));
  params.emplace(std::string(names::final_ln_beta), constant(0.0));
  return WeightStore(cfg, std::move(params));
}

Vocabulary synthetic_vocabulary(int size) {
  std::vector<std::string> tokens;
  tokens.reserve(size);
  for (int i = 0; i < size; ++i) tokens.push_back("t" + std::to_string(i));
  return Vocabulary(std::move(tokens));
}

HiddenStateDump synthetic_hidden_states(const WeightStore& store, int num_tokens, std::uint64_t seed) {
  const auto& cfg = store.config();
  const MatD E = store.embedding<double>();
  auto rng = stream_rng(seed, 0xd0);
  MatD h(num_tokens, cfg.hidden_dim);
  for (int t = 0; t < num_tokens; ++t)
    h.row(t) = E.col(static_cast<Eigen::Index>(uniform_index(rng, cfg.vocab_size))).transpose();
  const DType dt = store.param(std::string(names::embedding)).dtype();
  auto as_tensor = [dt](const MatD& m) {
    return dt == DType::f64 ? Tensor::from_matrix<double>(m) : Tensor::from_matrix<float>(m.cast<float>());
  };
  std::vector<Tensor> levels{as_tensor(h)};
  const MatD mask = cfg.causal() ? causal_mask<double>(num_tokens) : MatD::Zero(num_tokens, num_tokens);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto lw = layer_weights<double>(store, l);
    const MatD q = h + attention_oracle(h, lw, mask).concat;
    const MatD act = (q * lw.K.transpose()).unaryExpr([](double x) {
      return apply_activation(Activation::gelu_tanh, x);
    });
    h = q + act * lw.V;
    levels.push_back(as_tensor(h));
  }
  return HiddenStateDump(std::move(levels));
}

}  // namespace embedlens
