#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/conditioning.hpp"
#include "dithead/image.hpp"

namespace dithead {

// Pixels darker than this luminance count as mouth interior; the palette
// keeps every other surface above it.
constexpr float kMouthDarkThreshold = -0.35f;
constexpr int kNumLandmarks = 12;

// A procedural face: flat-shaded head and eye ellipses on a plain background,
// with a mouth whose vertical opening scales linearly with the audio envelope.
struct IdentitySpec {
  uint64_t seed = 0;
  int height = 64, width = 64;
  std::array<float, 3> background{};
  std::array<float, 3> face{};
  std::array<float, 3> lips{};
  std::array<float, 3> eyes{};
  double head_cx = 0, head_cy = 0, head_ax = 0, head_ay = 0;
  double eye_y = 0, eye_dx = 0, eye_r = 0;
  double mouth_cx = 0, mouth_cy = 0;
  double mouth_half_width = 0;
  double max_opening = 0;  // pixels of full vertical extent at e = 1
};

inline IdentitySpec make_identity(uint64_t seed, int height = 64, int width = 64) {
  if (height < 32 || width < 32) throw ParameterError("make_identity: frame too small");
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 1);
  IdentitySpec id;
  id.seed = seed;
  id.height = height;
  id.width = width;
  auto color = [&](double lo, double hi) {
    std::array<float, 3> c;
    for (auto& v : c) v = static_cast<float>(rng.uniform(lo, hi));
    return c;
  };
  id.background = color(-0.2, 0.6);
  id.face = color(0.0, 0.55);
  id.lips = color(-0.28, -0.05);
  id.eyes = color(-0.25, 0.08);
  id.head_cx = width * rng.uniform(0.47, 0.53);
  id.head_cy = height * rng.uniform(0.45, 0.50);
  id.head_ax = width * rng.uniform(0.30, 0.36);
  id.head_ay = height * rng.uniform(0.38, 0.44);
  id.eye_y = height * rng.uniform(0.32, 0.38);
  id.eye_dx = width * rng.uniform(0.11, 0.15);
  id.eye_r = height * rng.uniform(0.035, 0.055);
  id.mouth_cx = width * rng.uniform(0.48, 0.52);
  id.mouth_cy = height * rng.uniform(0.66, 0.70);
  id.mouth_half_width = width * rng.uniform(0.11, 0.15);
  id.max_opening = height * rng.uniform(0.13, 0.17);
  return id;
}

namespace synth_detail {

// soft-edged ellipse coverage in [0,1]; edge softness ~1 pixel
inline double ellipse_coverage(double px, double py, double cx, double cy, double ax, double ay,
                               double soft = 0.9) {
  if (ax <= 0.0 || ay <= 0.0) return 0.0;
  double dx = (px - cx) / ax;
  double dy = (py - cy) / ay;
  double r = std::sqrt(dx * dx + dy * dy);
  double d = (r - 1.0) * std::min(ax, ay);  // approximate signed pixel distance
  return std::clamp(0.5 - d / soft, 0.0, 1.0);
}

inline void blend(float* dst, const std::array<float, 3>& color, double cov) {
  for (int c = 0; c < 3; ++c)
    dst[c] = static_cast<float>(dst[c] * (1.0 - cov) + color[c] * cov);
}

}  // namespace synth_detail

// Twelve analytic points on the jaw/mouth contour; the convex-hull input.
inline std::vector<Point2> face_landmarks(const IdentitySpec& id) {
  std::vector<Point2> pts(kNumLandmarks);
  double a = id.mouth_half_width * 1.7;
  double b = id.max_opening * 1.35;
  for (int k = 0; k < kNumLandmarks; ++k) {
    double th = 2.0 * 3.14159265358979323846 * k / kNumLandmarks;
    pts[static_cast<size_t>(k)].x =
        std::clamp(id.mouth_cx + a * std::cos(th), 0.0, static_cast<double>(id.width - 1));
    pts[static_cast<size_t>(k)].y =
        std::clamp(id.mouth_cy + b * std::sin(th), 0.0, static_cast<double>(id.height - 1));
  }
  return pts;
}

// Renders the face with mouth opening e * max_opening (full vertical extent).
inline std::pair<Image, std::vector<Point2>> render_frame(const IdentitySpec& id, double envelope_value) {
  if (envelope_value < 0.0 || envelope_value > 1.0)
    throw ParameterError("render_frame: envelope must be in [0,1]");
  using synth_detail::blend;
  using synth_detail::ellipse_coverage;
  Image img(id.height, id.width);
  const std::array<float, 3> mouth_dark{-0.88f, -0.92f, -0.90f};
  double opening = envelope_value * id.max_opening;  // full extent in pixels
  double lip_b = id.max_opening * 0.5 * 0.55 + opening * 0.5;
  for (int r = 0; r < id.height; ++r) {
    for (int c = 0; c < id.width; ++c) {
      float* p = img.px(r, c);
      for (int ch = 0; ch < 3; ++ch) p[ch] = id.background[static_cast<size_t>(ch)];
      double cov = ellipse_coverage(c, r, id.head_cx, id.head_cy, id.head_ax, id.head_ay);
      if (cov > 0.0) blend(p, id.face, cov);
      for (int side = -1; side <= 1; side += 2) {
        double ecov = ellipse_coverage(c, r, id.head_cx + side * id.eye_dx, id.eye_y, id.eye_r, id.eye_r);
        if (ecov > 0.0) blend(p, id.eyes, ecov);
      }
      double lcov = ellipse_coverage(c, r, id.mouth_cx, id.mouth_cy, id.mouth_half_width * 1.18, lip_b + 1.4);
      if (lcov > 0.0) blend(p, id.lips, lcov);
      if (opening > 0.05) {
        double mcov = ellipse_coverage(c, r, id.mouth_cx, id.mouth_cy, id.mouth_half_width, opening * 0.5, 1.3);
        if (mcov > 0.0) blend(p, mouth_dark, mcov);
      }
    }
  }
  return {std::move(img), face_landmarks(id)};
}

// Pixel-scan estimate of the mouth opening: the tallest per-column darkness
// mass. Boundary pixels count fractionally, which keeps the estimate smooth in
// the true opening. The palette guarantees only the mouth interior is dark.
inline double measure_mouth_opening(const Image& img) {
  const float soft_depth = 0.55f;
  double best = 0.0;
  for (int c = 0; c < img.width; ++c) {
    double mass = 0.0;
    for (int r = 0; r < img.height; ++r) {
      float lum = luminance(img.px(r, c));
      mass += std::clamp((kMouthDarkThreshold - lum) / soft_depth, 0.0f, 1.0f);
    }
    best = std::max(best, mass);
  }
  return best;
}

// Sum of low-frequency sinusoids rescaled to span [0, 1].
inline std::vector<float> make_envelope(uint64_t seed, int num_frames) {
  Rng rng(seed ^ 0xa0761d6478bd642full);
  struct Component {
    double freq, amp, phase;
  };
  std::vector<Component> comps(3);
  for (auto& c : comps) {
    c.freq = rng.uniform(0.3, 1.4);  // Hz
    c.amp = rng.uniform(0.4, 1.0);
    c.phase = rng.uniform(0.0, 6.283185307179586);
  }
  std::vector<float> env(static_cast<size_t>(num_frames));
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < num_frames; ++i) {
    double t = static_cast<double>(i) / kVideoFps;
    double v = 0.0;
    for (const auto& c : comps) v += c.amp * std::sin(2.0 * 3.141592653589793 * c.freq * t + c.phase);
    env[static_cast<size_t>(i)] = static_cast<float>(v);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-9) {
    std::fill(env.begin(), env.end(), 0.0f);
    return env;
  }
  for (auto& v : env) v = std::clamp(static_cast<float>((v - lo) / (hi - lo)), 0.0f, 1.0f);
  return env;
}

// 16 kHz waveform driven by the per-frame envelope; per-frame features are 33
// deterministic spectral band amplitudes with feature 0 equal to the envelope.
inline AudioTrack synth_audio_from_envelope(const std::vector<float>& envelope, uint64_t seed) {
  int num_frames = static_cast<int>(envelope.size());
  if (num_frames < 1) throw ParameterError("synth_audio: need at least one frame");
  AudioTrack track;
  track.sample_rate = 16000;
  track.num_frames = num_frames;
  track.feature_dim = kAudioFeatureDim;
  int spf = track.sample_rate / kVideoFps;  // samples per frame

  Rng rng(seed ^ 0xe7037ed1a0b428dbull);
  struct Carrier {
    double freq, amp, phase;
  };
  std::vector<Carrier> carriers(4);
  double amp_sum = 0.0;
  for (auto& c : carriers) {
    c.freq = rng.uniform(150.0, 2800.0);
    c.amp = rng.uniform(0.4, 1.0);
    c.phase = rng.uniform(0.0, 6.283185307179586);
    amp_sum += c.amp;
  }
  track.samples.resize(static_cast<size_t>(num_frames) * spf);
  for (int64_t n = 0; n < static_cast<int64_t>(track.samples.size()); ++n) {
    int fi = static_cast<int>(n / spf);
    double frac = static_cast<double>(n % spf) / spf;
    double e0 = envelope[static_cast<size_t>(fi)];
    double e1 = envelope[static_cast<size_t>(std::min(fi + 1, num_frames - 1))];
    double env = e0 + (e1 - e0) * frac;
    double s = 0.0;
    for (const auto& c : carriers)
      s += c.amp * std::sin(2.0 * 3.141592653589793 * c.freq * n / track.sample_rate + c.phase);
    track.samples[static_cast<size_t>(n)] = static_cast<float>(env * s / amp_sum);
  }

  // Goertzel amplitude at 32 log-spaced probe frequencies per frame
  track.features.assign(static_cast<size_t>(num_frames) * kAudioFeatureDim, 0.0f);
  int bands = kAudioFeatureDim - 1;
  std::vector<double> band_freq(static_cast<size_t>(bands));
  for (int b = 0; b < bands; ++b)
    band_freq[static_cast<size_t>(b)] = 100.0 * std::pow(6000.0 / 100.0, static_cast<double>(b) / (bands - 1));
  for (int fi = 0; fi < num_frames; ++fi) {
    float* feat = track.features.data() + static_cast<size_t>(fi) * kAudioFeatureDim;
    feat[0] = envelope[static_cast<size_t>(fi)];
    const float* frame = track.samples.data() + static_cast<size_t>(fi) * spf;
    for (int b = 0; b < bands; ++b) {
      double w = 2.0 * 3.141592653589793 * band_freq[static_cast<size_t>(b)] / track.sample_rate;
      double coeff = 2.0 * std::cos(w);
      double s0 = 0.0, s1 = 0.0, s2 = 0.0;
      for (int n = 0; n < spf; ++n) {
        s0 = frame[n] + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
      }
      double power = s1 * s1 + s2 * s2 - coeff * s1 * s2;
      feat[1 + b] = static_cast<float>(2.0 * std::sqrt(std::max(0.0, power)) / spf);
    }
  }
  return track;
}

inline AudioTrack synth_audio(uint64_t seed, int num_frames) {
  return synth_audio_from_envelope(make_envelope(seed, num_frames), seed);
}

// One training tuple: ground truth, masked and reference frames plus the
// aligned audio window.
struct FrameSample {
  Image ground_truth;
  Image masked;
  Image reference;
  std::vector<Point2> landmarks;
  std::vector<float> alpha_map;
  std::vector<float> audio_window;
  int frame_index = 0;
  int reference_index = 0;
  float envelope = 0.0f;
};

struct SequenceData {
  std::vector<FrameSample> samples;
  AudioTrack audio;
  std::vector<float> envelope;
};

// Renders a full clip: frames at 25 FPS, per-frame hull masks with Gaussian
// blending, references sampled at least 60 frames away.
inline SequenceData generate_sequence(const IdentitySpec& id, int num_frames, Rng& rng, int mask_kernel = 27,
                                      double mask_sigma = 5.0) {
  // every frame needs a reference at least kReferenceMinGap away on one side
  if (num_frames < 2 * kReferenceMinGap + 1)
    throw ParameterError("generate_sequence: need at least " + std::to_string(2 * kReferenceMinGap + 1) +
                         " frames so every frame has a valid reference");
  SequenceData seq;
  seq.envelope = make_envelope(rng.next_u64(), num_frames);
  seq.audio = synth_audio_from_envelope(seq.envelope, rng.next_u64());

  std::vector<Image> frames(static_cast<size_t>(num_frames));
  std::vector<std::vector<Point2>> lms(static_cast<size_t>(num_frames));
  for (int i = 0; i < num_frames; ++i) {
    auto [img, lm] = render_frame(id, seq.envelope[static_cast<size_t>(i)]);
    frames[static_cast<size_t>(i)] = std::move(img);
    lms[static_cast<size_t>(i)] = std::move(lm);
  }

  seq.samples.resize(static_cast<size_t>(num_frames));
  for (int i = 0; i < num_frames; ++i) {
    FrameSample& s = seq.samples[static_cast<size_t>(i)];
    s.frame_index = i;
    s.envelope = seq.envelope[static_cast<size_t>(i)];
    s.landmarks = lms[static_cast<size_t>(i)];
    s.ground_truth = frames[static_cast<size_t>(i)];
    auto mask = convex_hull_mask(s.landmarks, id.height, id.width);
    s.alpha_map = gaussian_blend(mask, id.height, id.width, mask_kernel, mask_sigma);
    s.masked.height = id.height;
    s.masked.width = id.width;
    s.masked.pixels = apply_mask(s.ground_truth.pixels, s.alpha_map, id.height, id.width, 3);
    s.reference_index = sample_reference(i, num_frames, kReferenceMinGap, rng);
    s.reference = frames[static_cast<size_t>(s.reference_index)];
    s.audio_window = window_audio(seq.audio, i);
  }
  return seq;
}

}  // namespace dithead
