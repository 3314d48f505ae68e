#pragma once

#include "embedlens/checkpoint.hpp"

#include <cstdint>

namespace embedlens {

struct SyntheticSpec {
  int num_layers = 2;
  int num_heads = 2;
  int hidden_dim = 8;
  int ff_dim = 16;
  int vocab_size = 32;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
};

// Gaussian weights scaled by 1/sqrt(d), canonical raw layout, final layer norm
// with gamma = 1 and beta = 0.
WeightStore synthetic_store(const SyntheticSpec& spec);

// Tokens named "t0", "t1", ...
Vocabulary synthetic_vocabulary(int size);

// Random token ids run through a bias-free, norm-free residual stack
// (attention then GELU feed-forward). Level 0 holds the token embeddings.
HiddenStateDump synthetic_hidden_states(const WeightStore& store, int num_tokens, std::uint64_t seed);

}  // namespace embedlens
