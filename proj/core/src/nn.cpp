// SPDX-License-Identifier: Apache-2.0
#include "vtr/nn.hpp"

#include <cmath>

namespace vtr::nn {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

Tensor normal_tensor(Shape shape, Rng& rng, double std_dev,
                     bool requires_grad) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal() * std_dev;
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace

void StackConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError(str("stack: width ", width,
                          " not divisible by heads ", heads));
  }
  if (layers < 1) throw ConfigError("stack: layers must be >= 1");
  if (max_len < 1) throw ConfigError("stack: max_len must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("stack: mlp_ratio must be >= 1");
}

bool AttentionMask::fully_valid() const {
  for (std::uint8_t v : valid)
    if (!v) return false;
  return true;
}

void AttentionMask::validate() const {
  for (std::uint8_t v : valid)
    if (v) return;
  throw DomainError("attention mask: no valid positions");
}

std::size_t StackParams::parameter_count() const {
  std::size_t n = 0;
  std::vector<std::pair<std::string, Tensor>> named;
  collect_parameters("", named);
  for (const auto& [name, t] : named) n += t.size();
  return n;
}

void StackParams::collect_parameters(
    const std::string& prefix,
    std::vector<std::pair<std::string, Tensor>>& out) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    const StackLayer& lay = layers[l];
    out.emplace_back(p + "ln1_g", lay.ln1_g);
    out.emplace_back(p + "ln1_b", lay.ln1_b);
    out.emplace_back(p + "q_w", lay.q_w);
    out.emplace_back(p + "q_b", lay.q_b);
    out.emplace_back(p + "k_w", lay.k_w);
    out.emplace_back(p + "k_b", lay.k_b);
    out.emplace_back(p + "v_w", lay.v_w);
    out.emplace_back(p + "v_b", lay.v_b);
    out.emplace_back(p + "o_w", lay.o_w);
    out.emplace_back(p + "o_b", lay.o_b);
    out.emplace_back(p + "ln2_g", lay.ln2_g);
    out.emplace_back(p + "ln2_b", lay.ln2_b);
    out.emplace_back(p + "fc1_w", lay.fc1_w);
    out.emplace_back(p + "fc1_b", lay.fc1_b);
    out.emplace_back(p + "fc2_w", lay.fc2_w);
    out.emplace_back(p + "fc2_b", lay.fc2_b);
  }
  if (config.final_norm) {
    out.emplace_back(prefix + "final_g", final_g);
    out.emplace_back(prefix + "final_b", final_b);
  }
}

StackParams init_stack(const StackConfig& config, std::uint64_t seed,
                       bool requires_grad) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.width;
  const std::size_t h = config.mlp_ratio * d;
  const double residual_std =
      kInitStd / std::sqrt(static_cast<double>(config.layers));
  StackParams params;
  params.config = config;
  params.layers.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    StackLayer lay;
    lay.ln1_g = Tensor::full({d}, 1.0, requires_grad);
    lay.ln1_b = Tensor::zeros({d}, requires_grad);
    lay.q_w = normal_tensor({d, d}, rng, kInitStd, requires_grad);
    lay.q_b = Tensor::zeros({d}, requires_grad);
    lay.k_w = normal_tensor({d, d}, rng, kInitStd, requires_grad);
    lay.k_b = Tensor::zeros({d}, requires_grad);
    lay.v_w = normal_tensor({d, d}, rng, kInitStd, requires_grad);
    lay.v_b = Tensor::zeros({d}, requires_grad);
    lay.o_w = normal_tensor({d, d}, rng, residual_std, requires_grad);
    lay.o_b = Tensor::zeros({d}, requires_grad);
    lay.ln2_g = Tensor::full({d}, 1.0, requires_grad);
    lay.ln2_b = Tensor::zeros({d}, requires_grad);
    lay.fc1_w = normal_tensor({d, h}, rng, kInitStd, requires_grad);
    lay.fc1_b = Tensor::zeros({h}, requires_grad);
    lay.fc2_w = normal_tensor({h, d}, rng, residual_std, requires_grad);
    lay.fc2_b = Tensor::zeros({d}, requires_grad);
    params.layers.push_back(std::move(lay));
  }
  if (config.final_norm) {
    params.final_g = Tensor::full({d}, 1.0, requires_grad);
    params.final_b = Tensor::zeros({d}, requires_grad);
  }
  return params;
}

Tensor embed_tokens(std::span<const int> ids, const Tensor& table) {
  return gather_rows(table, ids);
}

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || q.shape() != k.shape()) {
    throw ShapeError(str("attention_scores: q ", shape_str(q.shape()),
                         " vs k ", shape_str(k.shape())));
  }
  const std::size_t len = q.shape()[0], d = q.shape()[1];
  if (heads == 0 || d % heads != 0) {
    throw ShapeError(str("attention_scores: width ", d,
                         " not divisible by heads ", heads));
  }
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& qv = q.values();
  const auto& kv = k.values();
  std::vector<double> out(heads * len * len);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      const double* qrow = qv.data() + i * d + h * dh;
      double* orow = out.data() + (h * len + i) * len;
      for (std::size_t j = 0; j < len; ++j) {
        const double* krow = kv.data() + j * d + h * dh;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
        orow[j] = acc * scl;
      }
    }
  }
  auto* qn = q.node().get();
  auto* kn = k.node().get();
  const Tensor parents[] = {q, k};
  return detail::make_op(
      {heads * len, len}, std::move(out), parents,
      [qn, kn, heads, len, d, dh, scl](const ad::Node& o) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < len; ++i) {
            const double* grow = o.grad.data() + (h * len + i) * len;
            for (std::size_t j = 0; j < len; ++j) {
              const double gij = grow[j] * scl;
              if (gij == 0.0) continue;
              if (qn->requires_grad) {
                auto& gq = ad::ensure_grad(*qn);
                const double* krow = kn->value.data() + j * d + h * dh;
                double* dst = gq.data() + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dst[c] += gij * krow[c];
              }
              if (kn->requires_grad) {
                auto& gk = ad::ensure_grad(*kn);
                const double* qrow = qn->value.data() + i * d + h * dh;
                double* dst = gk.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dst[c] += gij * qrow[c];
              }
            }
          }
        }
      });
}

Tensor attention_mix(const Tensor& weights, const Tensor& v,
                     std::size_t heads) {
  if (weights.rank() != 2 || v.rank() != 2) {
    throw ShapeError("attention_mix: rank-2 inputs expected");
  }
  const std::size_t len = v.shape()[0], d = v.shape()[1];
  if (heads == 0 || d % heads != 0 ||
      weights.shape() != Shape{heads * len, len}) {
    throw ShapeError(str("attention_mix: weights ",
                         shape_str(weights.shape()), " vs v ",
                         shape_str(v.shape()), " with ", heads, " heads"));
  }
  const std::size_t dh = d / heads;
  const auto& wv = weights.values();
  const auto& vv = v.values();
  std::vector<double> out(len * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      const double* wrow = wv.data() + (h * len + i) * len;
      double* orow = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < len; ++j) {
        const double w = wrow[j];
        if (w == 0.0) continue;
        const double* vrow = vv.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
      }
    }
  }
  auto* wn = weights.node().get();
  auto* vn = v.node().get();
  const Tensor parents[] = {weights, v};
  return detail::make_op(
      {len, d}, std::move(out), parents,
      [wn, vn, heads, len, d, dh](const ad::Node& o) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < len; ++i) {
            const double* grow = o.grad.data() + i * d + h * dh;
            for (std::size_t j = 0; j < len; ++j) {
              if (wn->requires_grad) {
                auto& gw = ad::ensure_grad(*wn);
                const double* vrow = vn->value.data() + j * d + h * dh;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                gw[(h * len + i) * len + j] += acc;
              }
              if (vn->requires_grad) {
                const double w = wn->value[(h * len + i) * len + j];
                if (w == 0.0) continue;
                auto& gv = ad::ensure_grad(*vn);
                double* dst = gv.data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dst[c] += w * grow[c];
              }
            }
          }
        }
      });
}

Tensor multi_head_attention(const Tensor& x, const StackLayer& layer,
                            const StackConfig& config,
                            const AttentionMask& mask) {
  if (x.rank() != 2 || x.shape()[1] != config.width) {
    throw ShapeError(str("attention: input ", shape_str(x.shape()),
                         " vs width ", config.width));
  }
  if (mask.size() != x.shape()[0]) {
    throw ShapeError(str("attention: mask length ", mask.size(),
                         " vs sequence length ", x.shape()[0]));
  }
  mask.validate();
  Tensor q = linear(x, layer.q_w, layer.q_b);
  Tensor k = linear(x, layer.k_w, layer.k_b);
  Tensor v = linear(x, layer.v_w, layer.v_b);
  Tensor scores = attention_scores(q, k, config.heads);
  if (!mask.fully_valid()) {
    scores = add_key_mask(scores, mask.valid);
  }
  Tensor weights = softmax(scores, 1);
  Tensor mixed = attention_mix(weights, v, config.heads);
  return linear(mixed, layer.o_w, layer.o_b);
}

Tensor transformer_forward(const Tensor& x, const StackParams& params,
                           const AttentionMask& mask) {
  Tensor h = x;
  for (const StackLayer& layer : params.layers) {
    Tensor normed = layer_norm(h, layer.ln1_g, layer.ln1_b, kLayerNormEps);
    h = add(h, multi_head_attention(normed, layer, params.config, mask));
    Tensor normed2 = layer_norm(h, layer.ln2_g, layer.ln2_b, kLayerNormEps);
    Tensor hidden = gelu(add(matmul(normed2, layer.fc1_w), layer.fc1_b));
    h = add(h, add(matmul(hidden, layer.fc2_w), layer.fc2_b));
  }
  if (params.config.final_norm) {
    h = layer_norm(h, params.final_g, params.final_b, kLayerNormEps);
  }
  return h;
}

Tensor add_position_embedding(const Tensor& x, const Tensor& pos_table) {
  if (x.rank() != 2 || pos_table.rank() != 2 ||
      x.shape()[1] != pos_table.shape()[1]) {
    throw ShapeError(str("position embedding: ", shape_str(x.shape()),
                         " vs table ", shape_str(pos_table.shape())));
  }
  const std::size_t len = x.shape()[0];
  if (len > pos_table.shape()[0]) {
    throw ShapeError(str("position embedding: sequence length ", len,
                         " exceeds table max_len ", pos_table.shape()[0]));
  }
  return add(x, slice_rows(pos_table, 0, len));
}

}  // namespace vtr::nn
