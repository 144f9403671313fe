#pragma once

#include <random>

#include "tail/policy.hpp"
#include "tail/tensor.hpp"

namespace tail::test {

inline Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Vec v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Small host for fast structural tests.
inline PolicySpec tiny_spec(Index d = 8, Index layers = 1, Index heads = 1) {
  PolicySpec s;
  s.embed_dim = d;
  s.decoder_layers = layers;
  s.decoder_heads = heads;
  s.perception_layers = 1;
  s.perception_heads = heads;
  s.perception_tokens = 2;
  s.mlp_ratio = 2;
  s.max_seq_len = 4;
  s.gmm_modes = 2;
  s.fusion_hidden = 4;
  s.head_hidden = 6;
  s.perception_lora_rank = 2;
  return s;
}

inline SeqBatch random_batch(const PolicySpec& s, Index b, Index n, std::mt19937_64& rng) {
  return {b, n, randn({b, n, s.perception_dim()}, rng), uniform({b, n, s.state_dim}, rng, 0.0, 1.0),
          randn({b, s.embed_dim}, rng)};
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

// Overwrites every parameter with N(0, sd) so no layer starts at zero.
inline void scramble(PolicyWeights& w, std::mt19937_64& rng, double sd = 0.3) {
  for (const auto& [name, p] : w.params()) w.set(name, randn(p.value.shape(), rng, sd));
}

}  // namespace tail::test
