// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vtr/tensor.hpp"

namespace vtr::nn {

struct StackConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t mlp_ratio = 4;
  std::size_t max_len = 16;
  bool final_norm = true;

  void validate() const;
  std::size_t head_dim() const { return width / heads; }
};

// per-position validity flags; false marks padding
struct AttentionMask {
  std::vector<std::uint8_t> valid;

  static AttentionMask all(std::size_t n) {
    return AttentionMask{std::vector<std::uint8_t>(n, 1)};
  }
  std::size_t size() const { return valid.size(); }
  bool fully_valid() const;
  void validate() const;  // at least one valid position
};

struct StackLayer {
  Tensor ln1_g, ln1_b;
  Tensor q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

struct StackParams {
  StackConfig config;
  std::vector<StackLayer> layers;
  Tensor final_g, final_b;  // present iff config.final_norm

  std::size_t parameter_count() const;
  void collect_parameters(const std::string& prefix,
                          std::vector<std::pair<std::string, Tensor>>& out) const;
};

/// Deterministic GPT-style init: normals with std 0.02, residual-path
/// output projections scaled down by 1/sqrt(layers), norms at identity.
StackParams init_stack(const StackConfig& config, std::uint64_t seed,
                       bool requires_grad = true);

Tensor embed_tokens(std::span<const int> ids, const Tensor& table);

// raw per-head dot-product scores, rows grouped head-major: [heads*L x L]
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads);
// weighted value mix back to [L x d]
Tensor attention_mix(const Tensor& weights, const Tensor& v,
                     std::size_t heads);

Tensor multi_head_attention(const Tensor& x, const StackLayer& layer,
                            const StackConfig& config,
                            const AttentionMask& mask);

/// Pre-norm residual blocks; a final layer norm follows the last block
/// when the stack was configured with one.
Tensor transformer_forward(const Tensor& x, const StackParams& params,
                           const AttentionMask& mask);

Tensor add_position_embedding(const Tensor& x, const Tensor& pos_table);

}  // namespace vtr::nn
