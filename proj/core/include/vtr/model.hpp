// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vtr/nn.hpp"
#include "vtr/tensor.hpp"

namespace vtr {

// Table-style feature toggles; dual_softmax only affects inference.
struct AblationFlags {
  bool temporal = false;
  bool distill = false;
  bool fusion = false;
  bool dual_softmax = false;
};

struct ModelConfig {
  std::size_t frame_h = 16;
  std::size_t frame_w = 16;
  std::size_t patch = 4;
  std::size_t n_frames = 4;   // frames per clip
  std::size_t n_tokens = 8;   // padded caption length
  std::size_t vocab = 35;
  std::size_t d_video = 32;   // frame encoder width
  std::size_t d_text = 32;    // text encoder width
  std::size_t d_shared = 32;  // joint embedding width
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t video_layers = 2;
  std::size_t text_layers = 2;
  std::size_t temporal_layers = 2;
  std::size_t fusion_layers = 2;

  std::size_t patches_per_frame() const {
    return (frame_h / patch) * (frame_w / patch);
  }
  std::size_t patch_dim() const { return patch * patch; }

  nn::StackConfig video_stack() const;
  nn::StackConfig text_stack() const;
  nn::StackConfig temporal_stack() const;  // no final norm: residual branch
  nn::StackConfig fusion_stack() const;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// All learnable parameters. The temperature is stored as log(1/tau) and
/// exponentiated on use; the effective 1/tau is capped at 100.
struct ModelState {
  ModelConfig config;

  Tensor patch_w, patch_b;  // [p^2 x D_v], [D_v]
  Tensor patch_pos;         // [patches x D_v]
  nn::StackParams video_stack;
  Tensor token_table;  // [vocab x D_w]
  Tensor text_pos;     // [N_w x D_w]
  nn::StackParams text_stack;
  Tensor video_proj;  // [D_v x D]
  Tensor text_proj;   // [D_w x D]
  Tensor frame_pos;   // [N_v x D]
  nn::StackParams temporal_stack;
  nn::StackParams fusion_stack;
  Tensor match_ln_g, match_ln_b;
  Tensor match_fc1_w, match_fc1_b;  // [D x D], [D]
  Tensor match_fc2_w, match_fc2_b;  // [D x 1], [1]
  Tensor temperature;               // [1], log(1/tau)

  static ModelState init(const ModelConfig& config, std::uint64_t seed,
                         bool requires_grad = true);
  ModelState clone(bool requires_grad) const;

  // stable declaration order; the checkpoint format, the optimizer
  // groups and the EMA update all iterate this
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::size_t parameter_count() const;

  Tensor inv_temperature() const;    // on-tape exp(min(t, ln 100))
  double effective_inv_tau() const;  // plain value of the same
  void zero_grad();
  void clamp_temperature();  // post-step cap so 1/tau <= 100
};

inline constexpr double kMaxInvTau = 100.0;
inline constexpr double kInitInvTau = 1.0 / 0.07;

/// Per-frame: patchify, embed, encode, mean over patch tokens.
/// frames is [N_v x H x W]; result is [N_v x D_v].
Tensor encode_frames(const Tensor& frames, const ModelState& state);

/// V + TemporalStack(V + frame positions); V is already at width D.
Tensor temporal_enhance(const Tensor& v_emb, const ModelState& state);

/// Mean-pool over the frame axis: [N_v x D] -> [D].
Tensor video_representation(const Tensor& v_emb);

/// Frame encoder -> video projector -> optional temporal enhancement.
Tensor encode_video_embeddings(const Tensor& frames, const ModelState& state,
                               bool use_temporal);

struct TextEncoding {
  Tensor tokens;  // projected token embeddings [N_w x D]
  Tensor rep;     // EOS-position representation [D]
  std::size_t eos_index = 0;
  nn::AttentionMask mask;
};

/// Caption must be BOS.., exactly one EOS, then PAD to N_w.
TextEncoding encode_text(std::span<const int> token_ids,
                         const ModelState& state);

/// Fusion encoder over [video frames; caption tokens]; returns the
/// output at the caption's EOS position.
Tensor fuse(const Tensor& v_emb, const Tensor& w_emb, std::size_t eos_index,
            const nn::AttentionMask& text_mask, const ModelState& state);

/// LN -> FC -> ReLU -> FC scalar matching score.
Tensor matching_score(const Tensor& fusion_feature, const ModelState& state);

/// teacher <- m * teacher + (1 - m) * student, elementwise.
void ema_update(ModelState& teacher, const ModelState& student, double m);

}  // namespace vtr
