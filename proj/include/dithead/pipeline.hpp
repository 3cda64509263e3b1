#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dithead/dataset.hpp"
#include "dithead/diffusion.hpp"
#include "dithead/dit.hpp"
#include "dithead/io.hpp"
#include "dithead/metrics.hpp"
#include "dithead/optim.hpp"
#include "dithead/vqae.hpp"

namespace dithead {

// ---------------------------------------------------------------------------
// training state
// ---------------------------------------------------------------------------

template <typename T>
struct VqaeTrainState {
  VqaeParams<T> gt;      // encoder/decoder for unmasked frames; decoder is the output decoder
  VqaeParams<T> masked;  // encoder for masked frames; its decoder is only used in stage 1
  std::unique_ptr<Adam<T>> opt_gt, opt_masked;
  int64_t step = 0;
  std::vector<float> loss_history;
  Rng rng;
};

template <typename T>
struct DitTrainState {
  DitParams<T> dit;
  std::unique_ptr<Adam<T>> opt;
  NoiseSchedule schedule;
  int64_t step = 0;
  std::vector<float> loss_history;
  Rng rng;
  uint64_t frozen_vqae_checksum = 0;
};

template <typename T>
VqaeTrainState<T> make_vqae_train_state(const RunConfig& cfg) {
  VqaeConfig vc;
  vc.image_size = cfg.image_size_px;
  vc.downsample_factor = cfg.vqae_downsample_factor;
  vc.channels = cfg.vqae_channels;
  vc.codebook_size = cfg.vqae_codebook_size;
  vc.commitment_beta = cfg.vqae_commitment_beta;
  VqaeTrainState<T> st;
  st.rng = Rng(cfg.seed);
  Rng init_gt = st.rng.fork();
  Rng init_mask = st.rng.fork();
  st.gt = make_vqae_params<T>(vc, init_gt);
  st.masked = make_vqae_params<T>(vc, init_mask);
  st.opt_gt = std::make_unique<Adam<T>>(st.gt.parameters(), cfg.train_learning_rate);
  st.opt_masked = std::make_unique<Adam<T>>(st.masked.parameters(), cfg.train_learning_rate);
  return st;
}

template <typename T>
DitTrainState<T> make_dit_train_state(const RunConfig& cfg) {
  DiTConfig dc;
  dc.patch_size = cfg.dit_patch_size;
  dc.depth = cfg.dit_depth;
  dc.heads = cfg.dit_heads;
  dc.hidden = cfg.dit_hidden_dim;
  dc.latent_height = cfg.image_size_px / cfg.vqae_downsample_factor;
  dc.latent_width = dc.latent_height;
  DitTrainState<T> st;
  st.rng = Rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
  Rng init = st.rng.fork();
  st.dit = make_dit_params<T>(dc, init);
  st.opt = std::make_unique<Adam<T>>(st.dit.parameters(), cfg.train_learning_rate);
  st.schedule = make_linear_schedule(cfg.schedule_num_steps, cfg.schedule_beta_start, cfg.schedule_beta_end);
  return st;
}

// ---------------------------------------------------------------------------
// checkpoint serializers
// ---------------------------------------------------------------------------

namespace pipeline_detail {

template <typename T>
void add_vqae(Checkpoint& ck, const std::string& prefix, VqaeParams<T>& p) {
  auto add_stack = [&](const std::string& sub, std::vector<ConvLayer<T>>& layers) {
    for (size_t i = 0; i < layers.size(); ++i) {
      ck.add_tensor(prefix + "." + sub + "." + std::to_string(i) + ".w", layers[i].w);
      ck.add_tensor(prefix + "." + sub + "." + std::to_string(i) + ".b", layers[i].b);
    }
  };
  add_stack("enc", p.encoder);
  add_stack("dec", p.decoder);
  ck.add_tensor(prefix + ".codebook", p.codebook);
  ck.add_values(prefix + ".usage", p.usage_counts);
}

template <typename T>
void read_vqae(const Checkpoint& ck, const std::string& prefix, VqaeParams<T>& p) {
  auto read_stack = [&](const std::string& sub, std::vector<ConvLayer<T>>& layers) {
    for (size_t i = 0; i < layers.size(); ++i) {
      layers[i].w = ck.tensor<T>(prefix + "." + sub + "." + std::to_string(i) + ".w");
      layers[i].b = ck.tensor<T>(prefix + "." + sub + "." + std::to_string(i) + ".b");
    }
  };
  read_stack("enc", p.encoder);
  read_stack("dec", p.decoder);
  p.codebook = ck.tensor<T>(prefix + ".codebook");
  p.usage_counts = ck.values<int64_t>(prefix + ".usage", p.usage_counts.size());
  for (auto& t : p.parameters()) t.set_requires_grad(true);
}

template <typename T>
void add_adam(Checkpoint& ck, const std::string& prefix, Adam<T>& opt) {
  std::vector<int64_t> meta{opt.step_count()};
  ck.add_values(prefix + ".t", meta);
  for (size_t i = 0; i < opt.first_moments().size(); ++i) {
    ck.add_values(prefix + ".m." + std::to_string(i), opt.first_moments()[i]);
    ck.add_values(prefix + ".v." + std::to_string(i), opt.second_moments()[i]);
  }
}

template <typename T>
void read_adam(const Checkpoint& ck, const std::string& prefix, Adam<T>& opt) {
  opt.set_step_count(ck.values<int64_t>(prefix + ".t")[0]);
  for (size_t i = 0; i < opt.first_moments().size(); ++i) {
    opt.first_moments()[i] = ck.values<T>(prefix + ".m." + std::to_string(i), opt.first_moments()[i].size());
    opt.second_moments()[i] = ck.values<T>(prefix + ".v." + std::to_string(i), opt.second_moments()[i].size());
  }
}

template <typename T>
void add_dit(Checkpoint& ck, const std::string& prefix, DitParams<T>& p) {
  ck.add_tensor(prefix + ".patch_embed.w", p.patch_embed_w);
  ck.add_tensor(prefix + ".patch_embed.b", p.patch_embed_b);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    std::string bp = prefix + ".block" + std::to_string(i);
    DitBlockParams<T>& b = p.blocks[i];
    ck.add_tensor(bp + ".ln1.g", b.ln1_g);
    ck.add_tensor(bp + ".ln1.b", b.ln1_b);
    ck.add_tensor(bp + ".self.qkv.w", b.self_attn.qkv_w);
    ck.add_tensor(bp + ".self.qkv.b", b.self_attn.qkv_b);
    ck.add_tensor(bp + ".self.out.w", b.self_attn.out_w);
    ck.add_tensor(bp + ".self.out.b", b.self_attn.out_b);
    ck.add_tensor(bp + ".ln2.g", b.ln2_g);
    ck.add_tensor(bp + ".ln2.b", b.ln2_b);
    ck.add_tensor(bp + ".cross.q.w", b.cross_attn.q_w);
    ck.add_tensor(bp + ".cross.q.b", b.cross_attn.q_b);
    ck.add_tensor(bp + ".cross.k.w", b.cross_attn.k_w);
    ck.add_tensor(bp + ".cross.k.b", b.cross_attn.k_b);
    ck.add_tensor(bp + ".cross.v.w", b.cross_attn.v_w);
    ck.add_tensor(bp + ".cross.v.b", b.cross_attn.v_b);
    ck.add_tensor(bp + ".cross.out.w", b.cross_attn.out_w);
    ck.add_tensor(bp + ".cross.out.b", b.cross_attn.out_b);
    ck.add_tensor(bp + ".ln3.g", b.ln3_g);
    ck.add_tensor(bp + ".ln3.b", b.ln3_b);
    ck.add_tensor(bp + ".mlp.w1", b.mlp_w1);
    ck.add_tensor(bp + ".mlp.b1", b.mlp_b1);
    ck.add_tensor(bp + ".mlp.w2", b.mlp_w2);
    ck.add_tensor(bp + ".mlp.b2", b.mlp_b2);
  }
  ck.add_tensor(prefix + ".final_ln.g", p.final_ln_g);
  ck.add_tensor(prefix + ".final_ln.b", p.final_ln_b);
  ck.add_tensor(prefix + ".out.w", p.out_w);
  ck.add_tensor(prefix + ".out.b", p.out_b);
  ck.add_tensor(prefix + ".audio.w", p.audio_w);
  ck.add_tensor(prefix + ".audio.b", p.audio_b);
}

template <typename T>
void read_dit(const Checkpoint& ck, const std::string& prefix, DitParams<T>& p) {
  p.patch_embed_w = ck.tensor<T>(prefix + ".patch_embed.w");
  p.patch_embed_b = ck.tensor<T>(prefix + ".patch_embed.b");
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    std::string bp = prefix + ".block" + std::to_string(i);
    DitBlockParams<T>& b = p.blocks[i];
    b.ln1_g = ck.tensor<T>(bp + ".ln1.g");
    b.ln1_b = ck.tensor<T>(bp + ".ln1.b");
    b.self_attn.qkv_w = ck.tensor<T>(bp + ".self.qkv.w");
    b.self_attn.qkv_b = ck.tensor<T>(bp + ".self.qkv.b");
    b.self_attn.out_w = ck.tensor<T>(bp + ".self.out.w");
    b.self_attn.out_b = ck.tensor<T>(bp + ".self.out.b");
    b.ln2_g = ck.tensor<T>(bp + ".ln2.g");
    b.ln2_b = ck.tensor<T>(bp + ".ln2.b");
    b.cross_attn.q_w = ck.tensor<T>(bp + ".cross.q.w");
    b.cross_attn.q_b = ck.tensor<T>(bp + ".cross.q.b");
    b.cross_attn.k_w = ck.tensor<T>(bp + ".cross.k.w");
    b.cross_attn.k_b = ck.tensor<T>(bp + ".cross.k.b");
    b.cross_attn.v_w = ck.tensor<T>(bp + ".cross.v.w");
    b.cross_attn.v_b = ck.tensor<T>(bp + ".cross.v.b");
    b.cross_attn.out_w = ck.tensor<T>(bp + ".cross.out.w");
    b.cross_attn.out_b = ck.tensor<T>(bp + ".cross.out.b");
    b.ln3_g = ck.tensor<T>(bp + ".ln3.g");
    b.ln3_b = ck.tensor<T>(bp + ".ln3.b");
    b.mlp_w1 = ck.tensor<T>(bp + ".mlp.w1");
    b.mlp_b1 = ck.tensor<T>(bp + ".mlp.b1");
    b.mlp_w2 = ck.tensor<T>(bp + ".mlp.w2");
    b.mlp_b2 = ck.tensor<T>(bp + ".mlp.b2");
  }
  p.final_ln_g = ck.tensor<T>(prefix + ".final_ln.g");
  p.final_ln_b = ck.tensor<T>(prefix + ".final_ln.b");
  p.out_w = ck.tensor<T>(prefix + ".out.w");
  p.out_b = ck.tensor<T>(prefix + ".out.b");
  p.audio_w = ck.tensor<T>(prefix + ".audio.w");
  p.audio_b = ck.tensor<T>(prefix + ".audio.b");
  for (auto& t : p.parameters()) t.set_requires_grad(true);
}

}  // namespace pipeline_detail

template <typename T>
Checkpoint vqae_state_to_checkpoint(VqaeTrainState<T>& st, const RunConfig& cfg) {
  Checkpoint ck;
  ck.step = static_cast<uint64_t>(st.step);
  ck.rng_state = st.rng.serialize();
  ck.config_text = cfg.to_text();
  pipeline_detail::add_vqae(ck, "gt", st.gt);
  pipeline_detail::add_vqae(ck, "mask", st.masked);
  pipeline_detail::add_adam(ck, "adam_gt", *st.opt_gt);
  pipeline_detail::add_adam(ck, "adam_mask", *st.opt_masked);
  ck.add_values("loss_history", st.loss_history);
  return ck;
}

template <typename T>
VqaeTrainState<T> vqae_state_from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg = RunConfig::from_map(ConfigMap::parse(ck.config_text));
  VqaeTrainState<T> st = make_vqae_train_state<T>(cfg);
  pipeline_detail::read_vqae(ck, "gt", st.gt);
  pipeline_detail::read_vqae(ck, "mask", st.masked);
  st.opt_gt = std::make_unique<Adam<T>>(st.gt.parameters(), cfg.train_learning_rate);
  st.opt_masked = std::make_unique<Adam<T>>(st.masked.parameters(), cfg.train_learning_rate);
  pipeline_detail::read_adam(ck, "adam_gt", *st.opt_gt);
  pipeline_detail::read_adam(ck, "adam_mask", *st.opt_masked);
  st.step = static_cast<int64_t>(ck.step);
  st.loss_history = ck.values<float>("loss_history");
  if (st.step == 0) st.loss_history.clear();
  st.loss_history.resize(static_cast<size_t>(st.step));
  st.rng.deserialize(ck.rng_state);
  return st;
}

template <typename T>
Checkpoint dit_state_to_checkpoint(DitTrainState<T>& st, const RunConfig& cfg) {
  Checkpoint ck;
  ck.step = static_cast<uint64_t>(st.step);
  ck.rng_state = st.rng.serialize();
  ck.config_text = cfg.to_text();
  pipeline_detail::add_dit(ck, "dit", st.dit);
  pipeline_detail::add_adam(ck, "adam", *st.opt);
  ck.add_values("loss_history", st.loss_history);
  std::vector<int64_t> checksum{static_cast<int64_t>(st.frozen_vqae_checksum)};
  ck.add_values("frozen_vqae_checksum", checksum);
  return ck;
}

template <typename T>
DitTrainState<T> dit_state_from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg = RunConfig::from_map(ConfigMap::parse(ck.config_text));
  DitTrainState<T> st = make_dit_train_state<T>(cfg);
  pipeline_detail::read_dit(ck, "dit", st.dit);
  st.opt = std::make_unique<Adam<T>>(st.dit.parameters(), cfg.train_learning_rate);
  pipeline_detail::read_adam(ck, "adam", *st.opt);
  st.step = static_cast<int64_t>(ck.step);
  st.loss_history = ck.values<float>("loss_history");
  st.loss_history.resize(static_cast<size_t>(st.step));
  st.rng.deserialize(ck.rng_state);
  st.frozen_vqae_checksum = static_cast<uint64_t>(ck.values<int64_t>("frozen_vqae_checksum")[0]);
  return st;
}

// Stage ordering: the denoiser trains against frozen stage-1 latents, so a
// stage-1 checkpoint must exist first.
inline void require_stage1_checkpoint(const fs::path& path) {
  if (!fs::exists(path))
    throw StateError("stage order: no autoencoder checkpoint at " + path.string() + "; run train-vqae first");
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

// Builds the masked frame for one dataset frame, with optional landmark
// jitter (shared offset per frame).
inline Image build_masked_frame(const Image& frame, const std::vector<Point2>& landmarks, int jitter_px,
                                int mask_kernel, double mask_sigma, Rng& rng,
                                std::vector<float>* alpha_out = nullptr) {
  std::vector<Point2> lm = landmarks;
  if (jitter_px > 0) lm = jitter_landmarks(lm, jitter_px, frame.height, frame.width, rng);
  auto mask = convex_hull_mask(lm, frame.height, frame.width);
  auto alpha = gaussian_blend(mask, frame.height, frame.width, mask_kernel, mask_sigma);
  Image out;
  out.height = frame.height;
  out.width = frame.width;
  out.pixels = apply_mask(frame.pixels, alpha, frame.height, frame.width, 3);
  if (alpha_out) *alpha_out = std::move(alpha);
  return out;
}

template <typename T>
struct DitBatch {
  Tensor<T> x, x_masked, x_reference;  // [B, H, W, 3] pixel-space
  std::vector<std::vector<float>> audio_windows;
};

template <typename T>
DitBatch<T> build_dit_batch(const std::vector<LoadedIdentity>& identities, int batch_size, const RunConfig& cfg,
                            Rng& rng) {
  if (identities.empty()) throw ParameterError("build_dit_batch: no identities");
  DitBatch<T> batch;
  std::vector<Image> gt, masked, ref;
  for (int b = 0; b < batch_size; ++b) {
    const LoadedIdentity& id = identities[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(identities.size()) - 1))];
    int nf = static_cast<int>(id.frames.size());
    int fi = static_cast<int>(rng.uniform_int(0, nf - 1));
    gt.push_back(id.frames[static_cast<size_t>(fi)]);
    masked.push_back(build_masked_frame(id.frames[static_cast<size_t>(fi)], id.landmarks[static_cast<size_t>(fi)],
                                        cfg.jitter_max_shift_px, cfg.mask_kernel_size_px, cfg.mask_sigma_px, rng));
    int ri = sample_reference(fi, nf, kReferenceMinGap, rng);
    ref.push_back(id.frames[static_cast<size_t>(ri)]);
    batch.audio_windows.push_back(window_audio(id.audio, fi));
  }
  auto to_batch = [](const std::vector<Image>& imgs) {
    std::vector<const Image*> ptrs;
    for (const auto& im : imgs) ptrs.push_back(&im);
    return images_to_batch<T>(ptrs);
  };
  batch.x = to_batch(gt);
  batch.x_masked = to_batch(masked);
  batch.x_reference = to_batch(ref);
  return batch;
}

// ---------------------------------------------------------------------------
// stage 1: autoencoder training
// ---------------------------------------------------------------------------

template <typename T>
float train_step_vqae_branch(VqaeParams<T>& params, Adam<T>& opt, const Tensor<T>& images) {
  QuantizedLatent<T> ql = encode(images, params);
  Tensor<T> recon = decode(ql.latent, params);
  VqaeLoss<T> loss = vqae_loss(images, recon, ql, params.codebook, params.config.commitment_beta);
  float value = static_cast<float>(loss.total.item());
  backward(loss.total);
  opt.step();
  opt.zero_grad();
  record_usage(params, ql.indices);
  return value;
}

struct TrainCallbacks {
  std::function<void(int64_t step, float loss)> on_step;
  std::function<void(int64_t step)> on_checkpoint;
  std::function<bool(int64_t step)> should_stop;  // checked at eval points
};

// Mean reconstruction PSNR over the given frames (peak 2 in [-1,1] space).
template <typename T>
double vqae_reconstruction_psnr(VqaeParams<T>& params, const std::vector<const Image*>& imgs, int batch = 8) {
  NoGradGuard ng;
  double total = 0.0;
  int count = 0;
  for (size_t base = 0; base < imgs.size(); base += static_cast<size_t>(batch)) {
    std::vector<const Image*> chunk(imgs.begin() + static_cast<std::ptrdiff_t>(base),
                                    imgs.begin() + static_cast<std::ptrdiff_t>(std::min(imgs.size(), base + batch)));
    Tensor<T> x = images_to_batch<T>(chunk);
    QuantizedLatent<T> ql = encode(x, params);
    Tensor<T> recon = decode(ql.latent, params);
    for (size_t i = 0; i < chunk.size(); ++i) {
      total += psnr(tensor_to_image(recon, static_cast<int>(i)), *chunk[i], 2.0);
      ++count;
    }
  }
  return total / count;
}

// Trains both autoencoders on the training identities. One optimizer step per
// branch per loop step; masked frames carry the training-time landmark jitter.
template <typename T>
void train_vqae(VqaeTrainState<T>& st, const LoadedDataset& dataset, const RunConfig& cfg, int64_t target_steps,
                const TrainCallbacks& cb = {}) {
  const int reseed_every = 250;
  while (st.step < target_steps) {
    std::vector<Image> gt_imgs, masked_imgs;
    for (int b = 0; b < cfg.train_batch_size; ++b) {
      const LoadedIdentity& id =
          dataset.train[static_cast<size_t>(st.rng.uniform_int(0, static_cast<int64_t>(dataset.train.size()) - 1))];
      int fi = static_cast<int>(st.rng.uniform_int(0, static_cast<int64_t>(id.frames.size()) - 1));
      Image img = id.frames[static_cast<size_t>(fi)];
      if (cfg.train_color_jitter > 0.0) {
        // global color offset per sample so the latent space covers colors
        // beyond the few training identities
        float dr = static_cast<float>(st.rng.uniform(-cfg.train_color_jitter, cfg.train_color_jitter));
        float dg = static_cast<float>(st.rng.uniform(-cfg.train_color_jitter, cfg.train_color_jitter));
        float db = static_cast<float>(st.rng.uniform(-cfg.train_color_jitter, cfg.train_color_jitter));
        for (int64_t pi = 0; pi < img.num_pixels(); ++pi) {
          float* px = img.pixels.data() + pi * 3;
          px[0] = std::clamp(px[0] + dr, -1.0f, 1.0f);
          px[1] = std::clamp(px[1] + dg, -1.0f, 1.0f);
          px[2] = std::clamp(px[2] + db, -1.0f, 1.0f);
        }
      }
      gt_imgs.push_back(img);
      masked_imgs.push_back(build_masked_frame(img, id.landmarks[static_cast<size_t>(fi)],
                                               cfg.jitter_max_shift_px, cfg.mask_kernel_size_px,
                                               cfg.mask_sigma_px, st.rng));
    }
    auto to_batch = [](const std::vector<Image>& imgs) {
      std::vector<const Image*> ptrs;
      for (const auto& im : imgs) ptrs.push_back(&im);
      return images_to_batch<T>(ptrs);
    };
    Tensor<T> gt_batch = to_batch(gt_imgs);
    Tensor<T> masked_batch = to_batch(masked_imgs);
    float loss_gt = train_step_vqae_branch(st.gt, *st.opt_gt, gt_batch);
    float loss_mask = train_step_vqae_branch(st.masked, *st.opt_masked, masked_batch);
    float loss = loss_gt + loss_mask;
    ++st.step;
    st.loss_history.push_back(loss);
    if (cb.on_step) cb.on_step(st.step, loss);

    if (st.step % reseed_every == 0) {
      NoGradGuard ng;
      Tensor<T> pq_gt = vqae_detail::run_stack(gt_batch, st.gt.encoder);
      reseed_dead_entries(st.gt, pq_gt, st.rng);
      Tensor<T> pq_mask = vqae_detail::run_stack(masked_batch, st.masked.encoder);
      reseed_dead_entries(st.masked, pq_mask, st.rng);
    }
    if (cb.on_checkpoint && st.step % cfg.train_checkpoint_every_steps == 0) cb.on_checkpoint(st.step);
    if (cb.should_stop && st.step % cfg.train_eval_every_steps == 0 && cb.should_stop(st.step)) break;
  }
}

// ---------------------------------------------------------------------------
// stage 2: denoiser training
// ---------------------------------------------------------------------------

// One optimization step of the noise-prediction objective. The autoencoders
// must be frozen; they only provide latents here.
template <typename T>
float train_step_dit(const DitBatch<T>& batch, DitTrainState<T>& st, VqaeParams<T>& vqae_gt,
                     VqaeParams<T>& vqae_mask) {
  if (!params_frozen(vqae_gt) || !params_frozen(vqae_mask))
    throw StateError("train_step_dit: autoencoder parameters must be frozen during denoiser training");
  int B = batch.x.dim(0);
  if (B < 1) throw ParameterError("train_step_dit: empty batch");

  Tensor<T> z0, z_m, z_r;
  {
    NoGradGuard ng;
    z0 = encode(batch.x, vqae_gt).latent;
    z_m = encode(batch.x_masked, vqae_mask).latent;
    z_r = encode(batch.x_reference, vqae_gt).latent;
  }
  int64_t per = z0.numel() / B;
  std::vector<int> ts(static_cast<size_t>(B));
  Tensor<T> eps = Tensor<T>::zeros(z0.shape());
  Tensor<T> z_t = Tensor<T>::zeros(z0.shape());
  for (int b = 0; b < B; ++b) {
    ts[static_cast<size_t>(b)] = static_cast<int>(st.rng.uniform_int(1, st.schedule.steps));
    double ab = st.schedule.alpha_bar(ts[static_cast<size_t>(b)]);
    T c0 = static_cast<T>(std::sqrt(ab));
    T c1 = static_cast<T>(std::sqrt(1.0 - ab));
    for (int64_t i = 0; i < per; ++i) {
      T e = static_cast<T>(st.rng.normal());
      eps.data()[b * per + i] = e;
      z_t.data()[b * per + i] = c0 * z0.data()[b * per + i] + c1 * e;
    }
  }

  ConditionBundle<T> cond = make_condition(batch.audio_windows, ts, st.dit);
  Tensor<T> eps_pred = predict_noise(z_t, z_r, z_m, cond, st.dit);
  Tensor<T> diff = sub(eps_pred, eps);
  Tensor<T> loss = mean_all(mul(diff, diff));
  float value = static_cast<float>(loss.item());
  if (!std::isfinite(value)) throw NumericError("train_step_dit: non-finite loss");
  backward(loss);
  st.opt->step();
  st.opt->zero_grad();
  return value;
}

template <typename T>
void train_dit(DitTrainState<T>& st, const LoadedDataset& dataset, const RunConfig& cfg, VqaeParams<T>& vqae_gt,
               VqaeParams<T>& vqae_mask, int64_t target_steps, const TrainCallbacks& cb = {}) {
  freeze_params(vqae_gt);
  freeze_params(vqae_mask);
  while (st.step < target_steps) {
    DitBatch<T> batch = build_dit_batch<T>(dataset.train, cfg.train_batch_size, cfg, st.rng);
    float loss = train_step_dit(batch, st, vqae_gt, vqae_mask);
    ++st.step;
    st.loss_history.push_back(loss);
    if (cb.on_step) cb.on_step(st.step, loss);
    if (cb.on_checkpoint && st.step % cfg.train_checkpoint_every_steps == 0) cb.on_checkpoint(st.step);
    if (cb.should_stop && st.step % cfg.train_eval_every_steps == 0 && cb.should_stop(st.step)) break;
  }
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

template <typename T>
struct PipelineModels {
  VqaeParams<T> vqae_gt;
  VqaeParams<T> vqae_mask;
  DitParams<T> dit;
  NoiseSchedule schedule;
};

template <typename T>
struct SynthesisJob {
  const LoadedIdentity* identity = nullptr;  // source frames for masks and the real reference
  AudioTrack audio;                          // driving audio; frame count == output frame count
  SamplerConfig sampler;
  int num_frames = 0;
  int reference_frame_index = -1;  // real reference used for frame 0
  int mask_kernel = 27;
  double mask_sigma = 5.0;
  bool evolving_reference = true;
  std::string reference_latent_mode = "final";  // final | noisy
  uint64_t seed = 0;

  void validate() const {
    if (identity == nullptr) throw ParameterError("synthesis: no identity source");
    if (num_frames < 1) throw ParameterError("synthesis: need at least one frame");
    if (audio.num_frames != num_frames)
      throw ParameterError("synthesis: audio frame count must equal requested video frame count");
    if (static_cast<int>(identity->frames.size()) < num_frames)
      throw ParameterError("synthesis: identity has fewer source frames than requested");
    if (reference_frame_index < 0 || reference_frame_index >= static_cast<int>(identity->frames.size()))
      throw ParameterError("synthesis: reference frame index out of range");
    if (reference_latent_mode != "final" && reference_latent_mode != "noisy")
      throw ParameterError("synthesis: unknown reference latent mode");
  }
};

template <typename T>
struct FrameSynthesis {
  Image decoded;         // decoder output, un-composited
  Tensor<T> ref_latent;  // latent to pass as the next frame's reference
  Tensor<T> out_latent;  // final denoised latent
};

// Generates one frame: fresh Gaussian latent denoised over the configured
// step subsequence, conditioned on the masked current frame, the reference
// latent and the audio window, then decoded.
template <typename T>
FrameSynthesis<T> synthesize_frame(const SynthesisJob<T>& job, int frame_index, const Tensor<T>* z_prev_ref,
                                   PipelineModels<T>& models) {
  job.validate();
  if (frame_index < 0 || frame_index >= job.num_frames) throw ParameterError("synthesize_frame: index out of range");
  NoGradGuard ng;
  const LoadedIdentity& id = *job.identity;
  const Image& src = id.frames[static_cast<size_t>(frame_index)];

  Rng frame_rng(job.seed ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(frame_index + 1)));
  Rng mask_rng(0);  // no jitter at inference time

  Image masked = build_masked_frame(src, id.landmarks[static_cast<size_t>(frame_index)], 0, job.mask_kernel,
                                    job.mask_sigma, mask_rng);
  Tensor<T> z_m = encode(images_to_batch<T>({&masked}), models.vqae_mask).latent;

  Tensor<T> z_r;
  bool use_prev = job.evolving_reference && frame_index > 0;
  if (use_prev) {
    if (z_prev_ref == nullptr || !z_prev_ref->defined())
      throw ParameterError("synthesize_frame: missing previous reference latent");
    z_r = *z_prev_ref;
  } else {
    const Image& ref = id.frames[static_cast<size_t>(job.reference_frame_index)];
    z_r = encode(images_to_batch<T>({&ref}), models.vqae_gt).latent;
  }

  std::vector<float> window = window_audio(job.audio, frame_index);
  Tensor<T> z = Tensor<T>::randn(z_m.shape(), frame_rng);
  Tensor<T> z_noisy_tail = z;

  if (job.sampler.kind == SamplerKind::ddim) {
    std::vector<int> seq = make_step_sequence(models.schedule.steps, job.sampler.num_inference_steps);
    for (size_t i = 0; i < seq.size(); ++i) {
      int t = seq[i];
      int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
      ConditionBundle<T> cond = make_condition({window}, {t}, models.dit);
      Tensor<T> eps_pred = predict_noise(z, z_r, z_m, cond, models.dit);
      Tensor<T> noise;
      if (job.sampler.eta > 0.0) noise = Tensor<T>::randn(z.shape(), frame_rng);
      if (t_prev == 0) z_noisy_tail = z;
      z = ddim_step(z, eps_pred, t, t_prev, models.schedule, job.sampler.eta, noise);
    }
  } else {
    if (job.sampler.num_inference_steps != models.schedule.steps)
      throw ParameterError("synthesize_frame: ancestral sampling runs every schedule step");
    for (int t = models.schedule.steps; t >= 1; --t) {
      ConditionBundle<T> cond = make_condition({window}, {t}, models.dit);
      Tensor<T> eps_pred = predict_noise(z, z_r, z_m, cond, models.dit);
      Tensor<T> noise;
      if (t > 1) noise = Tensor<T>::randn(z.shape(), frame_rng);
      if (t == 1) z_noisy_tail = z;
      z = ddpm_step(z, eps_pred, t, models.schedule, noise);
    }
  }

  FrameSynthesis<T> out;
  Tensor<T> decoded = decode(z, models.vqae_gt);
  out.decoded = tensor_to_image(decoded, 0);
  out.out_latent = z;
  out.ref_latent = job.reference_latent_mode == "noisy" ? z_noisy_tail : z;
  return out;
}

// Blends the generated face into the source frame through the alpha map;
// alpha 0 copies the source value bit-exactly, alpha 1 takes the generated one.
inline Image composite_frame(const Image& source, const Image& generated, const std::vector<float>& alpha) {
  if (!source.same_size(generated)) throw DimensionError("composite_frame: size mismatch");
  Image out = source;
  for (int64_t p = 0; p < source.num_pixels(); ++p) {
    float a = alpha[static_cast<size_t>(p)];
    if (a == 0.0f) continue;
    for (int c = 0; c < 3; ++c) {
      size_t off = static_cast<size_t>(p) * 3 + c;
      out.pixels[off] = a == 1.0f ? generated.pixels[off]
                                  : source.pixels[off] * (1.0f - a) + generated.pixels[off] * a;
    }
  }
  return out;
}

template <typename T>
struct SynthesisResult {
  std::vector<Image> frames;          // composited output
  std::vector<Image> decoded_faces;   // raw decoder output per frame
  std::vector<std::vector<float>> alpha_maps;
  std::vector<Tensor<T>> ref_latent_trace;       // latent passed as z_r per frame (undefined for real refs)
  std::vector<Tensor<T>> returned_ref_trace;     // latent each frame hands to its successor
  std::vector<Tensor<T>> out_latent_trace;       // final denoised latent per frame
};

template <typename T>
SynthesisResult<T> synthesize_video(const SynthesisJob<T>& job, PipelineModels<T>& models) {
  job.validate();
  SynthesisResult<T> result;
  Tensor<T> prev_ref;
  for (int i = 0; i < job.num_frames; ++i) {
    FrameSynthesis<T> fs = synthesize_frame(job, i, prev_ref.defined() ? &prev_ref : nullptr, models);
    const LoadedIdentity& id = *job.identity;
    std::vector<float> alpha;
    Rng mask_rng(0);
    build_masked_frame(id.frames[static_cast<size_t>(i)], id.landmarks[static_cast<size_t>(i)], 0, job.mask_kernel,
                       job.mask_sigma, mask_rng, &alpha);
    result.frames.push_back(composite_frame(id.frames[static_cast<size_t>(i)], fs.decoded, alpha));
    result.decoded_faces.push_back(fs.decoded);
    result.alpha_maps.push_back(std::move(alpha));
    result.ref_latent_trace.push_back(job.evolving_reference && i > 0 ? prev_ref : Tensor<T>());
    result.returned_ref_trace.push_back(fs.ref_latent);
    result.out_latent_trace.push_back(fs.out_latent);
    prev_ref = fs.ref_latent;
  }
  return result;
}

// ---------------------------------------------------------------------------
// post-processing
// ---------------------------------------------------------------------------

// Doubles the frame rate by inserting arithmetic midpoints; output length 2n-1.
inline std::vector<Image> interpolate_2x(const std::vector<Image>& frames) {
  if (frames.size() < 2) throw ParameterError("interpolate_2x: need at least 2 frames");
  std::vector<Image> out;
  out.reserve(frames.size() * 2 - 1);
  for (size_t i = 0; i < frames.size(); ++i) {
    out.push_back(frames[i]);
    if (i + 1 < frames.size()) {
      if (!frames[i].same_size(frames[i + 1])) throw DimensionError("interpolate_2x: frame size mismatch");
      Image mid(frames[i].height, frames[i].width);
      for (size_t p = 0; p < mid.pixels.size(); ++p)
        mid.pixels[p] = 0.5f * (frames[i].pixels[p] + frames[i + 1].pixels[p]);
      out.push_back(std::move(mid));
    }
  }
  return out;
}

}  // namespace dithead
