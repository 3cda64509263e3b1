#pragma once

#include <cmath>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/conditioning.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

struct DiTConfig {
  int patch_size = 2;
  int depth = 6;
  int heads = 8;
  int hidden = 256;
  int in_channels = 9;   // noised latent + reference latent + masked latent
  int out_channels = 3;
  int latent_height = 16;
  int latent_width = 16;

  int tokens() const { return (latent_height / patch_size) * (latent_width / patch_size); }

  void validate() const {
    if (hidden < 4 || hidden % heads != 0) throw ParameterError("dit: hidden must be divisible by heads");
    if (hidden % 4 != 0) throw ParameterError("dit: hidden must be divisible by 4 for the 2-d position embedding");
    if (latent_height % patch_size != 0 || latent_width % patch_size != 0)
      throw ParameterError("dit: latent dims must be divisible by patch_size");
    if (depth < 1) throw ParameterError("dit: depth must be >= 1");
  }
};

template <typename T>
struct SelfAttentionParams {
  Tensor<T> qkv_w, qkv_b;  // [3*hidden, hidden], [3*hidden]
  Tensor<T> out_w, out_b;  // [hidden, hidden], [hidden]
};

template <typename T>
struct CrossAttentionParams {
  Tensor<T> q_w, q_b;      // [hidden, hidden]
  Tensor<T> k_w, k_b;
  Tensor<T> v_w, v_b;
  Tensor<T> out_w, out_b;
};

template <typename T>
struct DitBlockParams {
  Tensor<T> ln1_g, ln1_b;
  SelfAttentionParams<T> self_attn;
  Tensor<T> ln2_g, ln2_b;
  CrossAttentionParams<T> cross_attn;
  Tensor<T> ln3_g, ln3_b;
  Tensor<T> mlp_w1, mlp_b1;  // [4*hidden, hidden]
  Tensor<T> mlp_w2, mlp_b2;  // [hidden, 4*hidden]
};

// tokens: [N, hidden] matrix of embedded patches with positions added
template <typename T>
struct PatchSequence {
  Tensor<T> tokens;  // [B, N, hidden]
  int grid_h = 0;
  int grid_w = 0;
};

namespace dit_detail {

// 2-d sinusoidal grid embedding: first half encodes the row, second half the
// column, each as (sin, cos) over log-spaced frequencies.
template <typename T>
Tensor<T> make_position_embedding(const DiTConfig& cfg) {
  int gh = cfg.latent_height / cfg.patch_size;
  int gw = cfg.latent_width / cfg.patch_size;
  int n = gh * gw;
  std::vector<T> pos(static_cast<size_t>(n) * cfg.hidden);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c) {
      Tensor<T> er = timestep_embedding<T>(r, cfg.hidden / 2);
      Tensor<T> ec = timestep_embedding<T>(c, cfg.hidden / 2);
      T* dst = pos.data() + (static_cast<size_t>(r) * gw + c) * cfg.hidden;
      std::copy(er.data(), er.data() + cfg.hidden / 2, dst);
      std::copy(ec.data(), ec.data() + cfg.hidden / 2, dst + cfg.hidden / 2);
    }
  return Tensor<T>::from_data({n, cfg.hidden}, std::move(pos));
}

}  // namespace dit_detail

template <typename T>
struct DitParams {
  DiTConfig config;
  Tensor<T> patch_embed_w, patch_embed_b;  // [hidden, patch^2 * in_channels]
  Tensor<T> pos_embed;                     // [N, hidden], fixed (not trained)
  std::vector<DitBlockParams<T>> blocks;
  Tensor<T> final_ln_g, final_ln_b;
  Tensor<T> out_w, out_b;                  // [patch^2 * out_channels, hidden]
  Tensor<T> audio_w, audio_b;              // [hidden, 363]; trained jointly

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> ps{patch_embed_w, patch_embed_b};
    for (auto& b : blocks) {
      for (auto& t : {b.ln1_g, b.ln1_b, b.self_attn.qkv_w, b.self_attn.qkv_b, b.self_attn.out_w, b.self_attn.out_b,
                      b.ln2_g, b.ln2_b, b.cross_attn.q_w, b.cross_attn.q_b, b.cross_attn.k_w, b.cross_attn.k_b,
                      b.cross_attn.v_w, b.cross_attn.v_b, b.cross_attn.out_w, b.cross_attn.out_b, b.ln3_g, b.ln3_b,
                      b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2})
        ps.push_back(t);
    }
    for (auto& t : {final_ln_g, final_ln_b, out_w, out_b, audio_w, audio_b}) ps.push_back(t);
    return ps;
  }
};

// Residual-branch output projections (and the final head) start at zero so an
// untrained model is the identity on tokens; disable for sensitivity probes.
template <typename T>
DitParams<T> make_dit_params(const DiTConfig& cfg, Rng& rng, bool zero_init_output = true) {
  cfg.validate();
  const double std0 = 0.02;
  auto w = [&](int rows, int cols) { return Tensor<T>::randn({rows, cols}, rng, std0); };
  auto zeros1 = [&](int n) { return Tensor<T>::zeros({n}); };
  auto ones1 = [&](int n) { return Tensor<T>::full({n}, T(1)); };
  int h = cfg.hidden;
  DitParams<T> p;
  p.config = cfg;
  int patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
  p.patch_embed_w = w(h, patch_dim);
  p.patch_embed_b = zeros1(h);
  p.pos_embed = dit_detail::make_position_embedding<T>(cfg);
  for (int i = 0; i < cfg.depth; ++i) {
    DitBlockParams<T> b;
    b.ln1_g = ones1(h);
    b.ln1_b = zeros1(h);
    b.self_attn.qkv_w = w(3 * h, h);
    b.self_attn.qkv_b = zeros1(3 * h);
    b.self_attn.out_w = zero_init_output ? Tensor<T>::zeros({h, h}) : w(h, h);
    b.self_attn.out_b = zeros1(h);
    b.ln2_g = ones1(h);
    b.ln2_b = zeros1(h);
    b.cross_attn.q_w = w(h, h);
    b.cross_attn.q_b = zeros1(h);
    b.cross_attn.k_w = w(h, h);
    b.cross_attn.k_b = zeros1(h);
    b.cross_attn.v_w = w(h, h);
    b.cross_attn.v_b = zeros1(h);
    b.cross_attn.out_w = zero_init_output ? Tensor<T>::zeros({h, h}) : w(h, h);
    b.cross_attn.out_b = zeros1(h);
    b.ln3_g = ones1(h);
    b.ln3_b = zeros1(h);
    b.mlp_w1 = w(4 * h, h);
    b.mlp_b1 = zeros1(4 * h);
    b.mlp_w2 = zero_init_output ? Tensor<T>::zeros({h, 4 * h}) : w(h, 4 * h);
    b.mlp_b2 = zeros1(h);
    p.blocks.push_back(std::move(b));
  }
  p.final_ln_g = ones1(h);
  p.final_ln_b = zeros1(h);
  int out_dim = cfg.patch_size * cfg.patch_size * cfg.out_channels;
  p.out_w = zero_init_output ? Tensor<T>::zeros({out_dim, h}) : w(out_dim, h);
  p.out_b = zeros1(out_dim);
  p.audio_w = w(h, kAudioWindowDim);
  p.audio_b = zeros1(h);
  for (auto& t : p.parameters()) t.set_requires_grad(true);
  return p;
}

// Channel-wise concatenation in the fixed order (noised, reference, masked).
template <typename T>
Tensor<T> concat_latents(const Tensor<T>& z_t, const Tensor<T>& z_r, const Tensor<T>& z_m) {
  if (z_t.shape() != z_r.shape() || z_t.shape() != z_m.shape())
    throw DimensionError("concat_latents: inputs must be spatially aligned with equal shapes");
  return concat<T>({z_t, z_r, z_m}, z_t.ndim() - 1);
}

// Non-overlapping patches flattened to rows: [B, h, w, C] -> [B, N, p*p*C].
template <typename T>
Tensor<T> patchify_raw(const Tensor<T>& x, int patch) {
  if (x.ndim() != 4) throw DimensionError("patchify: input must be [B,h,w,C]");
  int B = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
  if (h % patch != 0 || w % patch != 0) throw ParameterError("patchify: dims not divisible by patch size");
  int gh = h / patch, gw = w / patch;
  Tensor<T> r = reshape(x, {B, gh, patch, gw, patch, C});
  r = permute(r, {0, 1, 3, 2, 4, 5});  // [B, gh, gw, p, p, C]
  return reshape(r, {B, gh * gw, patch * patch * C});
}

// Inverse of patchify_raw.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, int grid_h, int grid_w, int patch, int channels) {
  if (tokens.ndim() != 3) throw DimensionError("unpatchify: tokens must be [B,N,D]");
  int B = tokens.dim(0);
  if (tokens.dim(1) != grid_h * grid_w || tokens.dim(2) != patch * patch * channels)
    throw DimensionError("unpatchify: token grid mismatch");
  Tensor<T> r = reshape(tokens, {B, grid_h, grid_w, patch, patch, channels});
  r = permute(r, {0, 1, 3, 2, 4, 5});  // [B, gh, p, gw, p, C]
  return reshape(r, {B, grid_h * patch, grid_w * patch, channels});
}

// Patch embedding: flatten patches, apply the linear embedding, add fixed
// positional embeddings.
template <typename T>
PatchSequence<T> patchify(const Tensor<T>& x, const DitParams<T>& params) {
  const DiTConfig& cfg = params.config;
  Tensor<T> raw = patchify_raw(x, cfg.patch_size);
  Tensor<T> tokens = linear(raw, params.patch_embed_w, params.patch_embed_b);
  tokens = add_suffix(tokens, params.pos_embed);
  PatchSequence<T> seq;
  seq.tokens = tokens;
  seq.grid_h = x.dim(1) / cfg.patch_size;
  seq.grid_w = x.dim(2) / cfg.patch_size;
  return seq;
}

namespace dit_detail {

// [B, N, hidden] -> [B, heads, N, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  int B = x.dim(0), N = x.dim(1), H = x.dim(2);
  Tensor<T> r = reshape(x, {B, N, heads, H / heads});
  return permute(r, {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  int B = x.dim(0), heads = x.dim(1), N = x.dim(2), dh = x.dim(3);
  Tensor<T> r = permute(x, {0, 2, 1, 3});
  return reshape(r, {B, N, heads * dh});
}

// Scaled dot-product attention over already-projected q/k/v token tensors.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads) {
  int H = q.dim(2);
  int dh = H / heads;
  Tensor<T> qh = split_heads(q, heads);                       // [B, heads, N, dh]
  Tensor<T> kh = split_heads(k, heads);                       // [B, heads, M, dh]
  Tensor<T> vh = split_heads(v, heads);
  qh = mul_scalar(qh, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> scores = matmul(qh, permute(kh, {0, 1, 3, 2}));   // [B, heads, N, M]
  Tensor<T> weights = softmax(scores, 3);
  Tensor<T> ctx = matmul(weights, vh);                        // [B, heads, N, dh]
  return merge_heads(ctx);                                    // [B, N, H]
}

}  // namespace dit_detail

// Multi-head self-attention over spatial tokens; shape preserving.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& tokens, const SelfAttentionParams<T>& p, int heads) {
  if (tokens.ndim() != 3) throw DimensionError("self_attention: tokens must be [B,N,hidden]");
  int H = tokens.dim(2);
  if (H % heads != 0) throw DimensionError("self_attention: hidden not divisible by heads");
  Tensor<T> qkv = linear(tokens, p.qkv_w, p.qkv_b);  // [B, N, 3H]
  Tensor<T> q = slice(qkv, 2, 0, H);
  Tensor<T> k = slice(qkv, 2, H, H);
  Tensor<T> v = slice(qkv, 2, 2 * H, H);
  Tensor<T> ctx = dit_detail::attention(q, k, v, heads);
  return linear(ctx, p.out_w, p.out_b);
}

// Queries from spatial tokens, keys/values from the condition sequence.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& spatial_tokens, const Tensor<T>& kv_sequence,
                          const CrossAttentionParams<T>& p, int heads) {
  if (spatial_tokens.ndim() != 3 || kv_sequence.ndim() != 3)
    throw DimensionError("cross_attention: tokens must be [B,N,hidden]");
  if (kv_sequence.dim(1) < 1) throw ParameterError("cross_attention: empty key/value sequence");
  if (spatial_tokens.dim(0) != kv_sequence.dim(0)) throw DimensionError("cross_attention: batch mismatch");
  int H = spatial_tokens.dim(2);
  if (H % heads != 0) throw DimensionError("cross_attention: hidden not divisible by heads");
  Tensor<T> q = linear(spatial_tokens, p.q_w, p.q_b);
  Tensor<T> k = linear(kv_sequence, p.k_w, p.k_b);
  Tensor<T> v = linear(kv_sequence, p.v_w, p.v_b);
  Tensor<T> ctx = dit_detail::attention(q, k, v, heads);
  return linear(ctx, p.out_w, p.out_b);
}

// Builds the cross-attention key/value side for a batch: the projected audio
// window and the timestep embedding, one token each, concatenated along the
// sequence axis.
template <typename T>
ConditionBundle<T> make_condition(const std::vector<std::vector<float>>& audio_windows, const std::vector<int>& ts,
                                  const DitParams<T>& params) {
  if (audio_windows.empty() || audio_windows.size() != ts.size())
    throw ParameterError("make_condition: batch of windows and timesteps must match");
  int B = static_cast<int>(audio_windows.size());
  int hidden = params.config.hidden;
  std::vector<T> win(static_cast<size_t>(B) * kAudioWindowDim);
  for (int b = 0; b < B; ++b) {
    if (static_cast<int>(audio_windows[static_cast<size_t>(b)].size()) != kAudioWindowDim)
      throw DimensionError("make_condition: audio window must have 363 values");
    for (int i = 0; i < kAudioWindowDim; ++i)
      win[static_cast<size_t>(b) * kAudioWindowDim + i] =
          static_cast<T>(audio_windows[static_cast<size_t>(b)][static_cast<size_t>(i)]);
  }
  ConditionBundle<T> cond;
  cond.audio_window = audio_windows[0];
  Tensor<T> window = Tensor<T>::from_data({B, kAudioWindowDim}, std::move(win));
  cond.audio_hidden = project_audio(window, params.audio_w, params.audio_b);  // [B, hidden]
  std::vector<T> te(static_cast<size_t>(B) * hidden);
  for (int b = 0; b < B; ++b) {
    Tensor<T> e = timestep_embedding<T>(ts[static_cast<size_t>(b)], hidden);
    std::copy(e.data(), e.data() + hidden, te.begin() + static_cast<size_t>(b) * hidden);
  }
  cond.timestep_embed = Tensor<T>::from_data({B, hidden}, std::move(te));
  Tensor<T> a_tok = reshape(cond.audio_hidden, {B, 1, hidden});
  Tensor<T> t_tok = reshape(cond.timestep_embed, {B, 1, hidden});
  cond.kv_sequence = concat<T>({a_tok, t_tok}, 1);  // [B, 2, hidden]
  return cond;
}

// Full denoiser forward pass: concat conditions channel-wise, patchify,
// depth x (self-attention, cross-attention, feed-forward) with pre-layernorm
// and residuals, final layernorm, linear head, unpatchify to a noise estimate.
template <typename T>
Tensor<T> predict_noise(const Tensor<T>& z_t, const Tensor<T>& z_r, const Tensor<T>& z_m,
                        const ConditionBundle<T>& cond, const DitParams<T>& params) {
  const DiTConfig& cfg = params.config;
  Tensor<T> x = concat_latents(z_t, z_r, z_m);  // [B, h, w, 9]
  if (x.dim(3) != cfg.in_channels) throw DimensionError("predict_noise: channel count");
  PatchSequence<T> seq = patchify(x, params);
  Tensor<T> tokens = seq.tokens;
  for (const auto& blk : params.blocks) {
    tokens = add(tokens, self_attention(layernorm(tokens, blk.ln1_g, blk.ln1_b), blk.self_attn, cfg.heads));
    tokens = add(tokens, cross_attention(layernorm(tokens, blk.ln2_g, blk.ln2_b), cond.kv_sequence, blk.cross_attn,
                                         cfg.heads));
    Tensor<T> m = layernorm(tokens, blk.ln3_g, blk.ln3_b);
    m = linear(m, blk.mlp_w1, blk.mlp_b1);
    m = gelu(m);
    m = linear(m, blk.mlp_w2, blk.mlp_b2);
    tokens = add(tokens, m);
  }
  tokens = layernorm(tokens, params.final_ln_g, params.final_ln_b);
  tokens = linear(tokens, params.out_w, params.out_b);  // [B, N, p*p*3]
  return unpatchify(tokens, seq.grid_h, seq.grid_w, cfg.patch_size, cfg.out_channels);
}

}  // namespace dithead
