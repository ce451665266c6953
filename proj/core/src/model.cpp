// SPDX-License-Identifier: Apache-2.0
#include "vtr/model.hpp"

#include <cmath>

namespace vtr {

namespace {

// positional tables stay small so sample content, not shared position
// structure, dominates what the encoders see at initialization
constexpr double kPosInitStd = 0.01;

Tensor normal_tensor(Shape shape, Rng& rng, double std_dev,
                     bool requires_grad) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal() * std_dev;
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

double fan_in_std(std::size_t fan_in) {
  return 1.0 / std::sqrt(static_cast<double>(fan_in));
}

// row-major patch grid, row-major pixels inside each patch
std::vector<std::size_t> patch_index_map(std::size_t h, std::size_t w,
                                         std::size_t p) {
  std::vector<std::size_t> idx;
  idx.reserve(h * w);
  for (std::size_t pr = 0; pr < h / p; ++pr)
    for (std::size_t pc = 0; pc < w / p; ++pc)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          idx.push_back((pr * p + y) * w + pc * p + x);
  return idx;
}

}  // namespace

nn::StackConfig ModelConfig::video_stack() const {
  return {d_video, heads, video_layers, mlp_ratio, patches_per_frame(), true};
}

nn::StackConfig ModelConfig::text_stack() const {
  return {d_text, heads, text_layers, mlp_ratio, n_tokens, true};
}

nn::StackConfig ModelConfig::temporal_stack() const {
  return {d_shared, heads, temporal_layers, mlp_ratio, n_frames, false};
}

nn::StackConfig ModelConfig::fusion_stack() const {
  return {d_shared, heads, fusion_layers, mlp_ratio, n_frames + n_tokens,
          true};
}

void ModelConfig::validate() const {
  if (patch == 0 || frame_h % patch != 0 || frame_w % patch != 0) {
    throw ConfigError(str("model: frame ", frame_h, "x", frame_w,
                          " not divisible by patch ", patch));
  }
  if (n_frames < 1) throw ConfigError("model: n_frames must be >= 1");
  if (n_tokens < 3) {
    throw ConfigError("model: n_tokens must be >= 3 (BOS, content, EOS)");
  }
  if (vocab <= static_cast<std::size_t>(kEosToken)) {
    throw ConfigError("model: vocab too small for reserved tokens");
  }
  video_stack().validate();
  text_stack().validate();
  temporal_stack().validate();
  fusion_stack().validate();
}

ModelState ModelState::init(const ModelConfig& config, std::uint64_t seed,
                            bool requires_grad) {
  config.validate();
  ModelState s;
  s.config = config;
  const bool rg = requires_grad;
  Rng rng(mix_seed(seed, 0x7461626c65ULL));
  s.patch_w = normal_tensor({config.patch_dim(), config.d_video}, rng,
                            fan_in_std(config.patch_dim()), rg);
  s.patch_b = Tensor::zeros({config.d_video}, rg);
  s.patch_pos = normal_tensor({config.patches_per_frame(), config.d_video},
                              rng, kPosInitStd, rg);
  s.video_stack = nn::init_stack(config.video_stack(), mix_seed(seed, 1), rg);
  s.token_table = normal_tensor({config.vocab, config.d_text}, rng,
                                fan_in_std(config.d_text), rg);
  s.text_pos =
      normal_tensor({config.n_tokens, config.d_text}, rng, kPosInitStd, rg);
  s.text_stack = nn::init_stack(config.text_stack(), mix_seed(seed, 2), rg);
  s.video_proj = normal_tensor({config.d_video, config.d_shared}, rng,
                               fan_in_std(config.d_video), rg);
  s.text_proj = normal_tensor({config.d_text, config.d_shared}, rng,
                              fan_in_std(config.d_text), rg);
  s.frame_pos =
      normal_tensor({config.n_frames, config.d_shared}, rng, kPosInitStd, rg);
  s.temporal_stack =
      nn::init_stack(config.temporal_stack(), mix_seed(seed, 3), rg);
  s.fusion_stack = nn::init_stack(config.fusion_stack(), mix_seed(seed, 4), rg);
  s.match_ln_g = Tensor::full({config.d_shared}, 1.0, rg);
  s.match_ln_b = Tensor::zeros({config.d_shared}, rg);
  s.match_fc1_w = normal_tensor({config.d_shared, config.d_shared}, rng,
                                fan_in_std(config.d_shared), rg);
  s.match_fc1_b = Tensor::zeros({config.d_shared}, rg);
  s.match_fc2_w = normal_tensor({config.d_shared, 1}, rng,
                                fan_in_std(config.d_shared), rg);
  s.match_fc2_b = Tensor::zeros({1}, rg);
  s.temperature = Tensor::scalar(std::log(kInitInvTau), rg);
  return s;
}

ModelState ModelState::clone(bool requires_grad) const {
  ModelState out = ModelState::init(config, 0, requires_grad);
  auto src = named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].second.mutable_values() = src[i].second.values();
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch.w", patch_w);
  out.emplace_back("patch.b", patch_b);
  out.emplace_back("patch.pos", patch_pos);
  video_stack.collect_parameters("video.", out);
  out.emplace_back("token_table", token_table);
  out.emplace_back("text_pos", text_pos);
  text_stack.collect_parameters("text.", out);
  out.emplace_back("video_proj", video_proj);
  out.emplace_back("text_proj", text_proj);
  out.emplace_back("frame_pos", frame_pos);
  temporal_stack.collect_parameters("temporal.", out);
  fusion_stack.collect_parameters("fusion.", out);
  out.emplace_back("match.ln_g", match_ln_g);
  out.emplace_back("match.ln_b", match_ln_b);
  out.emplace_back("match.fc1_w", match_fc1_w);
  out.emplace_back("match.fc1_b", match_fc1_b);
  out.emplace_back("match.fc2_w", match_fc2_w);
  out.emplace_back("match.fc2_b", match_fc2_b);
  out.emplace_back("temperature", temperature);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

Tensor ModelState::inv_temperature() const {
  return clamp_max(vtr::exp(temperature), kMaxInvTau);
}

double ModelState::effective_inv_tau() const {
  return std::min(std::exp(temperature.value()), kMaxInvTau);
}

void ModelState::zero_grad() {
  for (auto& [name, t] : named_parameters()) t.zero_grad();
}

void ModelState::clamp_temperature() {
  auto& v = temperature.mutable_values();
  v[0] = std::min(v[0], std::log(kMaxInvTau));
}

Tensor encode_frames(const Tensor& frames, const ModelState& state) {
  const ModelConfig& cfg = state.config;
  const Shape want{cfg.n_frames, cfg.frame_h, cfg.frame_w};
  if (frames.shape() != want) {
    throw ShapeError(str("encode_frames: frames ", shape_str(frames.shape()),
                         " vs configured ", shape_str(want)));
  }
  const std::size_t patches = cfg.patches_per_frame();
  const auto idx = patch_index_map(cfg.frame_h, cfg.frame_w, cfg.patch);
  const nn::AttentionMask mask = nn::AttentionMask::all(patches);
  std::vector<Tensor> rows;
  rows.reserve(cfg.n_frames);
  // standardize intensities from [0, 1] to [-1, 1]; the shared DC level
  // of the raw pixels would otherwise dominate every patch embedding
  const Tensor half = Tensor::scalar(0.5);
  for (std::size_t f = 0; f < cfg.n_frames; ++f) {
    Tensor frame = reshape(slice_rows(frames, f, 1),
                           {cfg.frame_h * cfg.frame_w});
    Tensor patched =
        gather_flat(frame, idx, {patches, cfg.patch_dim()});
    Tensor standardized = scale(sub(patched, half), 2.0);
    Tensor emb = add(matmul(standardized, state.patch_w), state.patch_b);
    emb = add(emb, state.patch_pos);
    Tensor enc = nn::transformer_forward(emb, state.video_stack, mask);
    rows.push_back(reshape(mean(enc, 0), {1, cfg.d_video}));
  }
  return rows.size() == 1 ? rows[0]
                          : concat(std::span<const Tensor>(rows), 0);
}

Tensor temporal_enhance(const Tensor& v_emb, const ModelState& state) {
  const ModelConfig& cfg = state.config;
  if (v_emb.rank() != 2 || v_emb.shape()[1] != cfg.d_shared) {
    throw ShapeError(str("temporal_enhance: input ",
                         shape_str(v_emb.shape()), " vs width ",
                         cfg.d_shared));
  }
  const std::size_t n = v_emb.shape()[0];
  // residual from the pre-positional input; positions only feed the branch
  Tensor branch = nn::add_position_embedding(v_emb, state.frame_pos);
  Tensor enhanced = nn::transformer_forward(branch, state.temporal_stack,
                                            nn::AttentionMask::all(n));
  return add(v_emb, enhanced);
}

Tensor video_representation(const Tensor& v_emb) {
  if (v_emb.rank() != 2) {
    throw ShapeError(str("video_representation: expected [N x D], got ",
                         shape_str(v_emb.shape())));
  }
  return mean(v_emb, 0);
}

Tensor encode_video_embeddings(const Tensor& frames, const ModelState& state,
                               bool use_temporal) {
  Tensor projected = matmul(encode_frames(frames, state), state.video_proj);
  return use_temporal ? temporal_enhance(projected, state) : projected;
}

TextEncoding encode_text(std::span<const int> token_ids,
                         const ModelState& state) {
  const ModelConfig& cfg = state.config;
  if (token_ids.size() != cfg.n_tokens) {
    throw ShapeError(str("encode_text: caption length ", token_ids.size(),
                         " vs configured ", cfg.n_tokens));
  }
  std::size_t eos = cfg.n_tokens;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] == kEosToken) {
      if (eos != cfg.n_tokens) {
        throw DomainError("encode_text: malformed caption, multiple EOS");
      }
      eos = i;
    } else if (eos == cfg.n_tokens && token_ids[i] == kPadToken) {
      throw DomainError("encode_text: malformed caption, PAD before EOS");
    } else if (eos != cfg.n_tokens && token_ids[i] != kPadToken) {
      throw DomainError("encode_text: malformed caption, token after EOS");
    }
  }
  if (eos == cfg.n_tokens) {
    throw DomainError("encode_text: malformed caption, missing EOS");
  }
  nn::AttentionMask mask;
  mask.valid.assign(cfg.n_tokens, 0);
  for (std::size_t i = 0; i <= eos; ++i) mask.valid[i] = 1;

  Tensor emb = nn::embed_tokens(token_ids, state.token_table);
  emb = nn::add_position_embedding(emb, state.text_pos);
  Tensor enc = nn::transformer_forward(emb, state.text_stack, mask);
  Tensor projected = matmul(enc, state.text_proj);
  Tensor rep = reshape(slice_rows(projected, eos, 1), {cfg.d_shared});
  return TextEncoding{projected, rep, eos, std::move(mask)};
}

Tensor fuse(const Tensor& v_emb, const Tensor& w_emb, std::size_t eos_index,
            const nn::AttentionMask& text_mask, const ModelState& state) {
  const std::size_t d = state.config.d_shared;
  if (v_emb.rank() != 2 || w_emb.rank() != 2 || v_emb.shape()[1] != d ||
      w_emb.shape()[1] != d) {
    throw ShapeError(str("fuse: widths ", shape_str(v_emb.shape()), " and ",
                         shape_str(w_emb.shape()), " must both be ", d));
  }
  const std::size_t n_v = v_emb.shape()[0];
  const std::size_t n_w = w_emb.shape()[0];
  if (text_mask.size() != n_w || eos_index >= n_w) {
    throw ShapeError("fuse: text mask or EOS index inconsistent");
  }
  Tensor seq = concat(v_emb, w_emb, 0);
  nn::AttentionMask mask;
  mask.valid.assign(n_v, 1);
  mask.valid.insert(mask.valid.end(), text_mask.valid.begin(),
                    text_mask.valid.end());
  Tensor enc = nn::transformer_forward(seq, state.fusion_stack, mask);
  return reshape(slice_rows(enc, n_v + eos_index, 1), {d});
}

Tensor matching_score(const Tensor& fusion_feature, const ModelState& state) {
  const std::size_t d = state.config.d_shared;
  if (fusion_feature.shape() != Shape{d}) {
    throw ShapeError(str("matching_score: feature ",
                         shape_str(fusion_feature.shape()), " vs width ", d));
  }
  Tensor h = layer_norm(fusion_feature, state.match_ln_g, state.match_ln_b);
  h = add(matmul(reshape(h, {1, d}), state.match_fc1_w), state.match_fc1_b);
  h = relu(h);
  Tensor score = add(matmul(h, state.match_fc2_w), state.match_fc2_b);
  return reshape(score, {1});
}

void ema_update(ModelState& teacher, const ModelState& student, double m) {
  if (m < 0.0 || m > 1.0) {
    throw DomainError(str("ema_update: momentum ", m, " outside [0, 1]"));
  }
  auto tp = teacher.named_parameters();
  auto sp = student.named_parameters();
  if (tp.size() != sp.size()) {
    throw ShapeError("ema_update: parameter structure mismatch");
  }
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].first != sp[i].first ||
        tp[i].second.shape() != sp[i].second.shape()) {
      throw ShapeError(str("ema_update: parameter mismatch at ",
                           tp[i].first));
    }
    auto& tv = tp[i].second.mutable_values();
    const auto& sv = sp[i].second.values();
    for (std::size_t j = 0; j < tv.size(); ++j) {
      tv[j] = m * tv[j] + (1.0 - m) * sv[j];
    }
  }
}

}  // namespace vtr
