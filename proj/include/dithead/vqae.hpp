#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/optim.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

constexpr int kLatentChannels = 3;

struct VqaeConfig {
  int image_size = 64;        // H = W
  int downsample_factor = 4;  // spatial reduction f; latent grid is size/f
  int channels = 32;          // width of the conv trunk
  int codebook_size = 512;    // N_c entries of dimension 3
  double commitment_beta = 0.25;

  int latent_size() const { return image_size / downsample_factor; }

  void validate() const {
    if (image_size < 8) throw ParameterError("vqae: image_size too small");
    int f = downsample_factor;
    if (f < 2 || (f & (f - 1)) != 0) throw ParameterError("vqae: downsample_factor must be a power of two >= 2");
    if (image_size % f != 0) throw ParameterError("vqae: image_size not divisible by downsample_factor");
    if (codebook_size < 1) throw ParameterError("vqae: empty codebook");
    if (channels < 4) throw ParameterError("vqae: channels too small");
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [kh, kw, cin, cout]
  Tensor<T> b;  // [cout]
  int stride = 1;
  int pad = 1;
  bool upsample_before = false;
  bool activation = true;
};

template <typename T>
struct QuantizedLatent {
  std::vector<int> indices;  // grid of codebook indices, row-major
  Tensor<T> latent;          // quantized values, straight-through gradient
  Tensor<T> pre_quant;       // continuous encoder output
  int grid_h = 0, grid_w = 0, batch = 0;
};

// One vector-quantized autoencoder: strided conv encoder to a 3-channel
// latent grid, nearest-entry quantizer, mirrored conv decoder.
template <typename T>
struct VqaeParams {
  VqaeConfig config;
  std::vector<ConvLayer<T>> encoder;
  std::vector<ConvLayer<T>> decoder;
  Tensor<T> codebook;  // [N_c, 3]
  std::vector<int64_t> usage_counts;

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> ps;
    for (auto& l : encoder) {
      ps.push_back(l.w);
      ps.push_back(l.b);
    }
    for (auto& l : decoder) {
      ps.push_back(l.w);
      ps.push_back(l.b);
    }
    ps.push_back(codebook);
    return ps;
  }
};

template <typename T>
VqaeParams<T> make_vqae_params(const VqaeConfig& cfg, Rng& rng) {
  cfg.validate();
  VqaeParams<T> p;
  p.config = cfg;
  int c = cfg.channels;
  int stages = 0;
  for (int f = cfg.downsample_factor; f > 1; f /= 2) ++stages;

  auto conv = [&](int kh, int kw, int cin, int cout, int stride, int pad, bool up, bool act) {
    ConvLayer<T> l;
    double fan_in = static_cast<double>(kh) * kw * cin;
    l.w = Tensor<T>::randn({kh, kw, cin, cout}, rng, std::sqrt(2.0 / fan_in));
    l.b = Tensor<T>::zeros({cout});
    l.stride = stride;
    l.pad = pad;
    l.upsample_before = up;
    l.activation = act;
    return l;
  };

  p.encoder.push_back(conv(3, 3, 3, c, 1, 1, false, true));
  for (int s = 0; s < stages; ++s) p.encoder.push_back(conv(4, 4, c, c, 2, 1, false, true));
  p.encoder.push_back(conv(3, 3, c, kLatentChannels, 1, 1, false, false));

  p.decoder.push_back(conv(3, 3, kLatentChannels, c, 1, 1, false, true));
  for (int s = 0; s < stages; ++s) p.decoder.push_back(conv(3, 3, c, c, 1, 1, true, true));
  p.decoder.push_back(conv(3, 3, c, 3, 1, 1, false, false));

  p.codebook = Tensor<T>::uniform({cfg.codebook_size, kLatentChannels}, rng, -1.0, 1.0);
  p.usage_counts.assign(static_cast<size_t>(cfg.codebook_size), 0);
  for (auto& t : p.parameters()) t.set_requires_grad(true);
  return p;
}

template <typename T>
void freeze_params(VqaeParams<T>& p) {
  for (auto& t : p.parameters()) t.set_requires_grad(false);
}

template <typename T>
bool params_frozen(VqaeParams<T>& p) {
  for (auto& t : p.parameters())
    if (t.requires_grad()) return false;
  return true;
}

namespace vqae_detail {

template <typename T>
Tensor<T> run_stack(const Tensor<T>& x, const std::vector<ConvLayer<T>>& layers) {
  Tensor<T> h = x;
  for (const auto& l : layers) {
    if (l.upsample_before) h = upsample_nearest2(h);
    h = conv2d(h, l.w, l.stride, l.pad, l.b);
    if (l.activation) h = leaky_relu(h);
  }
  return h;
}

}  // namespace vqae_detail

// Nearest codebook entry per cell in Euclidean distance, ties broken by the
// lowest index. The returned latent carries a straight-through gradient: its
// value is the quantized entry, its backward is the identity into pre_quant.
template <typename T>
QuantizedLatent<T> quantize(const Tensor<T>& pre_quant, const Tensor<T>& codebook) {
  if (!codebook.defined() || codebook.numel() == 0) throw StateError("quantize: empty codebook");
  if (codebook.ndim() != 2 || codebook.dim(1) != kLatentChannels)
    throw DimensionError("quantize: codebook must be [N_c, 3]");
  if (pre_quant.dim(pre_quant.ndim() - 1) != kLatentChannels)
    throw DimensionError("quantize: latent channels must be 3");
  int nc = codebook.dim(0);
  int64_t cells = pre_quant.numel() / kLatentChannels;
  QuantizedLatent<T> out;
  out.indices.resize(static_cast<size_t>(cells));
  if (pre_quant.ndim() == 4) {
    out.batch = pre_quant.dim(0);
    out.grid_h = pre_quant.dim(1);
    out.grid_w = pre_quant.dim(2);
  } else if (pre_quant.ndim() == 3) {
    out.batch = 1;
    out.grid_h = pre_quant.dim(0);
    out.grid_w = pre_quant.dim(1);
  } else {
    throw DimensionError("quantize: expected [h,w,3] or [B,h,w,3]");
  }
  const T* pq = pre_quant.data();
  const T* cb = codebook.data();
#pragma omp parallel for schedule(static) if (cells * nc > 65536)
  for (int64_t i = 0; i < cells; ++i) {
    const T* cell = pq + i * kLatentChannels;
    int best = 0;
    double best_d = 1e300;
    for (int e = 0; e < nc; ++e) {
      const T* entry = cb + static_cast<int64_t>(e) * kLatentChannels;
      double d = 0.0;
      for (int c = 0; c < kLatentChannels; ++c) {
        double diff = static_cast<double>(cell[c]) - entry[c];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = e;
      }
    }
    out.indices[static_cast<size_t>(i)] = best;
  }
  // straight-through: value is exactly the selected entry, backward is the
  // identity into pre_quant
  std::vector<T> vals(static_cast<size_t>(pre_quant.numel()));
  for (int64_t i = 0; i < cells; ++i) {
    const T* entry = cb + static_cast<int64_t>(out.indices[static_cast<size_t>(i)]) * kLatentChannels;
    for (int c = 0; c < kLatentChannels; ++c) vals[static_cast<size_t>(i * kLatentChannels + c)] = entry[c];
  }
  Tensor<T> pq_handle = pre_quant;
  out.latent = Tensor<T>::make_result(pre_quant.shape(), std::move(vals), {pre_quant},
                                      [pq_handle](TensorNode<T>& self) mutable {
                                        accumulate_grad(pq_handle, self.grad.data(),
                                                        static_cast<int64_t>(self.grad.size()));
                                      });
  out.pre_quant = pre_quant;
  return out;
}

// image: [B, H, W, 3] with values in [-1, 1]
template <typename T>
QuantizedLatent<T> encode(const Tensor<T>& image, const VqaeParams<T>& params) {
  if (image.ndim() != 4 || image.dim(3) != 3) throw DimensionError("encode: image must be [B,H,W,3]");
  int f = params.config.downsample_factor;
  if (image.dim(1) % f != 0 || image.dim(2) % f != 0)
    throw ParameterError("encode: image dims must be divisible by the downsample factor");
  Tensor<T> pre_quant = vqae_detail::run_stack(image, params.encoder);
  return quantize(pre_quant, params.codebook);
}

// latent: [B, h, w, 3]; output clamped to [-1, 1]
template <typename T>
Tensor<T> decode(const Tensor<T>& latent, const VqaeParams<T>& params) {
  if (latent.ndim() != 4 || latent.dim(3) != kLatentChannels)
    throw DimensionError("decode: latent must be [B,h,w,3]");
  Tensor<T> out = vqae_detail::run_stack(latent, params.decoder);
  return clamp(out, T(-1), T(1));
}

template <typename T>
struct VqaeLoss {
  Tensor<T> reconstruction;  // L1
  Tensor<T> codebook;        // ||sg(pre_quant) - entries||^2, trains the codebook
  Tensor<T> commitment;      // beta * ||pre_quant - sg(entries)||^2, trains the encoder
  Tensor<T> total;
};

// Squared terms are summed over the 3 latent channels and averaged over cells.
template <typename T>
VqaeLoss<T> vqae_loss(const Tensor<T>& image, const Tensor<T>& reconstruction, const QuantizedLatent<T>& ql,
                      const Tensor<T>& codebook, double commitment_beta) {
  check_same_shape(image, reconstruction, "vqae_loss");
  VqaeLoss<T> loss;
  loss.reconstruction = mean_all(abs_val(sub(reconstruction, image)));

  int64_t cells = ql.pre_quant.numel() / kLatentChannels;
  int m = static_cast<int>(cells);
  Tensor<T> pq_flat = reshape(ql.pre_quant, {m, kLatentChannels});
  Tensor<T> entries = gather_rows(codebook, ql.indices);  // differentiable into the codebook
  Tensor<T> pq_sg = detach(pq_flat);
  Tensor<T> d1 = sub(pq_sg, entries);
  loss.codebook = mul_scalar(sum_all(mul(d1, d1)), static_cast<T>(1.0 / m));
  Tensor<T> entries_sg = detach(entries);
  Tensor<T> d2 = sub(pq_flat, entries_sg);
  loss.commitment = mul_scalar(sum_all(mul(d2, d2)), static_cast<T>(commitment_beta / m));
  loss.total = add(add(loss.reconstruction, loss.codebook), loss.commitment);
  return loss;
}

template <typename T>
void record_usage(VqaeParams<T>& params, const std::vector<int>& indices) {
  for (int i : indices) params.usage_counts[static_cast<size_t>(i)]++;
}

// Re-seed entries that went unused since the last call to random encoder
// outputs from the given batch; returns how many entries moved.
template <typename T>
int reseed_dead_entries(VqaeParams<T>& params, const Tensor<T>& pre_quant_batch, Rng& rng) {
  int64_t cells = pre_quant_batch.numel() / kLatentChannels;
  if (cells == 0) return 0;
  const T* pq = pre_quant_batch.data();
  T* cb = params.codebook.data();
  int moved = 0;
  for (size_t e = 0; e < params.usage_counts.size(); ++e) {
    if (params.usage_counts[e] != 0) continue;
    int64_t pick = rng.uniform_int(0, cells - 1);
    for (int c = 0; c < kLatentChannels; ++c)
      cb[e * kLatentChannels + c] = pq[pick * kLatentChannels + c] + static_cast<T>(rng.normal() * 0.01);
    ++moved;
  }
  std::fill(params.usage_counts.begin(), params.usage_counts.end(), 0);
  return moved;
}

// FNV-1a over the raw bytes of every parameter array, in declaration order.
// Used to assert the frozen-weights contract across the second training stage.
template <typename T>
uint64_t params_checksum(VqaeParams<T>& params) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& t : params.parameters()) mix(t.data(), static_cast<size_t>(t.numel()) * sizeof(T));
  return h;
}

}  // namespace dithead
