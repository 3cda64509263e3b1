#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

constexpr int kAudioWindowFrames = 11;   // 5 before + current + 5 after
constexpr int kAudioFeatureDim = 33;     // per-frame features; window is 11*33 = 363
constexpr int kAudioWindowDim = kAudioWindowFrames * kAudioFeatureDim;
constexpr int kVideoFps = 25;
constexpr int kReferenceMinGap = 60;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// Waveform plus per-frame features aligned to video frames.
struct AudioTrack {
  std::vector<float> samples;  // normalized to [-1, 1]
  int sample_rate = 16000;
  int num_frames = 0;
  int feature_dim = kAudioFeatureDim;
  std::vector<float> features;  // num_frames x feature_dim, row-major

  const float* frame_features(int i) const { return features.data() + static_cast<size_t>(i) * feature_dim; }
};

// The key/value side of cross-attention: projected audio window plus the
// timestep embedding, one token each.
template <typename T>
struct ConditionBundle {
  std::vector<float> audio_window;  // raw concatenated window, length 363
  Tensor<T> audio_hidden;           // [B, hidden]
  Tensor<T> timestep_embed;         // [B, hidden]
  Tensor<T> kv_sequence;            // [B, 2, hidden]
};

struct MaskSpec {
  std::vector<Point2> landmarks;
  std::vector<float> alpha_map;  // H*W in [0,1]
  int kernel_size = 27;
  double sigma = 5.0;
};

// Concatenates per-frame features for frame_index-5 .. frame_index+5,
// clamping indices at the clip edges.
inline std::vector<float> window_audio(const AudioTrack& track, int frame_index) {
  if (frame_index < 0 || frame_index >= track.num_frames)
    throw ParameterError("window_audio: frame index " + std::to_string(frame_index) + " outside [0, " +
                         std::to_string(track.num_frames) + ")");
  std::vector<float> out(static_cast<size_t>(kAudioWindowFrames) * track.feature_dim);
  int half = kAudioWindowFrames / 2;
  for (int k = 0; k < kAudioWindowFrames; ++k) {
    int idx = std::clamp(frame_index - half + k, 0, track.num_frames - 1);
    const float* src = track.frame_features(idx);
    std::copy(src, src + track.feature_dim, out.begin() + static_cast<size_t>(k) * track.feature_dim);
  }
  return out;
}

// Affine map of the 363-dim window into the transformer hidden width. Trained
// jointly with the denoiser, so it runs through the autodiff graph.
template <typename T>
Tensor<T> project_audio(const Tensor<T>& window, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.ndim() != 2 || weight.dim(1) != window.dim(window.ndim() - 1))
    throw DimensionError("project_audio: weight " + shape_str(weight.shape()) + " vs window " +
                         shape_str(window.shape()));
  return linear(window, weight, bias);
}

// Sinusoidal embedding over log-spaced frequencies; first half sines, second
// half cosines, so t=0 maps to (0,...,0,1,...,1).
template <typename T>
Tensor<T> timestep_embedding(int t, int hidden) {
  if (t < 0) throw ParameterError("timestep_embedding: t must be >= 0");
  if (hidden < 2 || hidden % 2 != 0) throw ParameterError("timestep_embedding: hidden must be even and >= 2");
  int half = hidden / 2;
  std::vector<T> out(static_cast<size_t>(hidden));
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    double phase = static_cast<double>(t) * freq;
    out[static_cast<size_t>(i)] = static_cast<T>(std::sin(phase));
    out[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(phase));
  }
  return Tensor<T>::from_data({hidden}, std::move(out));
}

namespace hull_detail {

inline double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew monotone chain; returns counter-clockwise hull without repeated last
// point. Throws if the input has fewer than 3 distinct non-collinear points.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  if (pts.size() < 3) throw GeometryError("convex hull needs at least 3 points");
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Point2& a, const Point2& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) throw GeometryError("convex hull needs at least 3 distinct points");
  size_t n = pts.size(), k = 0;
  std::vector<Point2> h(2 * n);
  for (size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  size_t lower = k + 1;
  for (size_t i = n - 1; i-- > 0;) {
    while (k >= lower && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  if (h.size() < 3) throw GeometryError("landmarks are collinear");
  return h;
}

}  // namespace hull_detail

// Binary mask: pixel (row r, col c) is 1 iff the point (c, r) lies inside or
// on the convex hull of the landmarks.
inline std::vector<uint8_t> convex_hull_mask(const std::vector<Point2>& landmarks, int height, int width) {
  if (height < 1 || width < 1) throw ParameterError("convex_hull_mask: empty image");
  std::vector<Point2> hull = hull_detail::convex_hull(landmarks);
  size_t nv = hull.size();
  std::vector<uint8_t> mask(static_cast<size_t>(height) * width, 0);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      Point2 p{static_cast<double>(c), static_cast<double>(r)};
      bool inside = true;
      for (size_t i = 0; i < nv && inside; ++i) {
        const Point2& a = hull[i];
        const Point2& b = hull[(i + 1) % nv];
        if (hull_detail::cross(a, b, p) < 0.0) inside = false;  // hull is CCW
      }
      if (inside) mask[static_cast<size_t>(r) * width + c] = 1;
    }
  }
  return mask;
}

// Normalized 1-d Gaussian taps; the 2-d kernel is their outer product and
// therefore also sums to 1.
inline std::vector<double> gaussian_kernel_1d(int kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ParameterError("gaussian kernel size must be odd");
  if (!(sigma > 0.0)) throw ParameterError("gaussian sigma must be positive");
  int radius = kernel_size / 2;
  std::vector<double> k(static_cast<size_t>(kernel_size));
  double sum = 0.0;
  for (int i = 0; i < kernel_size; ++i) {
    double d = static_cast<double>(i - radius);
    k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur of the binary mask with reflective borders. Output
// is the blending weight map: 1 deep inside the hull, 0 well outside, smooth
// across the boundary.
inline std::vector<float> gaussian_blend(const std::vector<uint8_t>& mask, int height, int width,
                                         int kernel_size = 27, double sigma = 5.0) {
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(height) * width)
    throw DimensionError("gaussian_blend: mask size");
  std::vector<double> k = gaussian_kernel_1d(kernel_size, sigma);
  int radius = kernel_size / 2;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  std::vector<double> tmp(mask.size());
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int j = -radius; j <= radius; ++j)
        s += k[static_cast<size_t>(j + radius)] * mask[static_cast<size_t>(r) * width + reflect(c + j, width)];
      tmp[static_cast<size_t>(r) * width + c] = s;
    }
  std::vector<float> out(mask.size());
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int j = -radius; j <= radius; ++j)
        s += k[static_cast<size_t>(j + radius)] * tmp[static_cast<size_t>(reflect(r + j, height)) * width + c];
      out[static_cast<size_t>(r) * width + c] = static_cast<float>(std::clamp(s, 0.0, 1.0));
    }
  return out;
}

// x_m = image * (1 - alpha) + fill * alpha. Fill is mid-gray (0) in [-1,1]
// pixel space. alpha==0 copies the source value bit-exactly.
inline std::vector<float> apply_mask(const std::vector<float>& image, const std::vector<float>& alpha_map,
                                     int height, int width, int channels, float fill = 0.0f) {
  if (image.size() != static_cast<size_t>(height) * width * channels)
    throw DimensionError("apply_mask: image size");
  if (alpha_map.size() != static_cast<size_t>(height) * width) throw DimensionError("apply_mask: alpha size");
  std::vector<float> out(image.size());
  for (int64_t p = 0; p < static_cast<int64_t>(height) * width; ++p) {
    float a = alpha_map[static_cast<size_t>(p)];
    for (int c = 0; c < channels; ++c) {
      size_t off = static_cast<size_t>(p) * channels + c;
      if (a == 0.0f)
        out[off] = image[off];
      else if (a == 1.0f)
        out[off] = fill;
      else
        out[off] = image[off] * (1.0f - a) + fill * a;
    }
  }
  return out;
}

// One shared integer offset for the whole frame, uniform in
// [-max_shift, max_shift]^2; points are clamped to image bounds.
inline std::vector<Point2> jitter_landmarks(const std::vector<Point2>& landmarks, int max_shift, int height,
                                            int width, Rng& rng) {
  if (max_shift < 0) throw ParameterError("jitter_landmarks: max_shift must be >= 0");
  int dx = 0, dy = 0;
  if (max_shift > 0) {
    dx = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    dy = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
  }
  std::vector<Point2> out = landmarks;
  for (auto& p : out) {
    p.x = std::clamp(p.x + dx, 0.0, static_cast<double>(width - 1));
    p.y = std::clamp(p.y + dy, 0.0, static_cast<double>(height - 1));
  }
  return out;
}

// Uniformly random frame index at least min_gap away from frame_index.
inline int sample_reference(int frame_index, int num_frames, int min_gap, Rng& rng) {
  if (num_frames <= min_gap)
    throw ParameterError("sample_reference: clip of " + std::to_string(num_frames) +
                         " frames is too short for gap " + std::to_string(min_gap));
  int left = std::max(0, frame_index - min_gap + 1);           // count of valid indices below
  int right = std::max(0, num_frames - (frame_index + min_gap));  // count of valid indices above
  int total = left + right;
  if (total <= 0) throw ParameterError("sample_reference: no valid reference index");
  int k = static_cast<int>(rng.uniform_int(0, total - 1));
  return k < left ? k : frame_index + min_gap + (k - left);
}

}  // namespace dithead
