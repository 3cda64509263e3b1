#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/image.hpp"
#include "dithead/synthdata.hpp"

namespace dithead {

constexpr double kPsnrCapDb = 100.0;  // reported for zero MSE

inline double mse(const Image& a, const Image& b) {
  if (!a.same_size(b)) throw DimensionError("mse: image sizes differ");
  double s = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

inline double psnr(const Image& a, const Image& b, double peak) {
  if (!(peak > 0.0)) throw ParameterError("psnr: peak must be positive");
  double m = mse(a, b);
  if (m == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / m));
}

// PSNR restricted to pixels where the alpha map is above a threshold; used to
// score the inpainted region on its own.
inline double psnr_masked(const Image& a, const Image& b, const std::vector<float>& alpha, double peak,
                          float threshold = 0.5f) {
  if (!a.same_size(b)) throw DimensionError("psnr_masked: image sizes differ");
  if (alpha.size() != static_cast<size_t>(a.num_pixels())) throw DimensionError("psnr_masked: alpha size");
  double s = 0.0;
  int64_t n = 0;
  for (int64_t p = 0; p < a.num_pixels(); ++p) {
    if (alpha[static_cast<size_t>(p)] < threshold) continue;
    for (int c = 0; c < 3; ++c) {
      double d = static_cast<double>(a.pixels[static_cast<size_t>(p * 3 + c)]) -
                 b.pixels[static_cast<size_t>(p * 3 + c)];
      s += d * d;
      ++n;
    }
  }
  if (n == 0) throw ParameterError("psnr_masked: empty mask region");
  double m = s / static_cast<double>(n);
  if (m == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / m));
}

namespace metrics_detail {

// separable Gaussian-weighted window sums over valid positions
inline void window_pass(const std::vector<double>& in, int h, int w, const std::vector<double>& taps,
                        std::vector<double>& out, int& oh, int& ow) {
  int k = static_cast<int>(taps.size());
  ow = w - k + 1;
  oh = h - k + 1;
  std::vector<double> tmp(static_cast<size_t>(h) * ow);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += taps[static_cast<size_t>(i)] * in[static_cast<size_t>(r) * w + c + i];
      tmp[static_cast<size_t>(r) * ow + c] = s;
    }
  out.assign(static_cast<size_t>(oh) * ow, 0.0);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += taps[static_cast<size_t>(i)] * tmp[static_cast<size_t>(r + i) * ow + c];
      out[static_cast<size_t>(r) * ow + c] = s;
    }
}

}  // namespace metrics_detail

// Windowed structural similarity, Gaussian window (sigma 1.5), computed per
// channel over all fully-interior windows and averaged.
inline double ssim(const Image& a, const Image& b, double peak, int window = 11, double k1 = 0.01,
                   double k2 = 0.03) {
  if (!a.same_size(b)) throw DimensionError("ssim: image sizes differ");
  if (window < 3 || window % 2 == 0) throw ParameterError("ssim: window must be odd and >= 3");
  if (a.height < window || a.width < window)
    throw ParameterError("ssim: image smaller than the " + std::to_string(window) + "-pixel window");
  if (!(peak > 0.0)) throw ParameterError("ssim: peak must be positive");
  std::vector<double> taps = gaussian_kernel_1d(window, 1.5);
  const double c1 = (k1 * peak) * (k1 * peak);
  const double c2 = (k2 * peak) * (k2 * peak);

  int h = a.height, w = a.width;
  std::vector<double> xa(static_cast<size_t>(h) * w), xb(xa.size()), xaa(xa.size()), xbb(xa.size()), xab(xa.size());
  double total = 0.0;
  int64_t count = 0;
  for (int ch = 0; ch < 3; ++ch) {
    for (int64_t p = 0; p < a.num_pixels(); ++p) {
      double va = a.pixels[static_cast<size_t>(p * 3 + ch)];
      double vb = b.pixels[static_cast<size_t>(p * 3 + ch)];
      xa[static_cast<size_t>(p)] = va;
      xb[static_cast<size_t>(p)] = vb;
      xaa[static_cast<size_t>(p)] = va * va;
      xbb[static_cast<size_t>(p)] = vb * vb;
      xab[static_cast<size_t>(p)] = va * vb;
    }
    std::vector<double> ma, mb, maa, mbb, mab;
    int oh = 0, ow = 0;
    metrics_detail::window_pass(xa, h, w, taps, ma, oh, ow);
    metrics_detail::window_pass(xb, h, w, taps, mb, oh, ow);
    metrics_detail::window_pass(xaa, h, w, taps, maa, oh, ow);
    metrics_detail::window_pass(xbb, h, w, taps, mbb, oh, ow);
    metrics_detail::window_pass(xab, h, w, taps, mab, oh, ow);
    for (size_t i = 0; i < ma.size(); ++i) {
      double mu_a = ma[i], mu_b = mb[i];
      double var_a = maa[i] - mu_a * mu_a;
      double var_b = mbb[i] - mu_b * mu_b;
      double cov = mab[i] - mu_a * mu_b;
      double v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      total += v;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw ParameterError("pearson: need equal lengths >= 3");
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw NumericError("pearson: undefined correlation for zero-variance input");
  return sxy / std::sqrt(sxx * syy);
}

// Correlation between pixel-measured mouth opening and the driving envelope.
inline double lip_sync_score(const std::vector<Image>& frames, const std::vector<float>& envelope) {
  if (frames.size() != envelope.size() || frames.size() < 3)
    throw ParameterError("lip_sync_score: need equal lengths >= 3");
  std::vector<double> opening(frames.size()), env(envelope.size());
  for (size_t i = 0; i < frames.size(); ++i) {
    opening[i] = measure_mouth_opening(frames[i]);
    env[i] = static_cast<double>(envelope[i]);
  }
  return pearson(opening, env);
}

struct MetricReport {
  std::vector<double> per_frame_psnr;
  std::vector<double> per_frame_ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double lip_sync = 0.0;
  bool has_lip_sync = false;
  int frame_count = 0;
};

inline MetricReport evaluate_frames(const std::vector<Image>& generated, const std::vector<Image>& reference,
                                    const std::vector<float>* envelope, double peak) {
  if (generated.size() != reference.size())
    throw ValidationError("evaluate_frames: generated and reference frame counts differ");
  if (generated.empty()) throw ValidationError("evaluate_frames: no frames");
  MetricReport rep;
  rep.frame_count = static_cast<int>(generated.size());
  for (size_t i = 0; i < generated.size(); ++i) {
    rep.per_frame_psnr.push_back(psnr(generated[i], reference[i], peak));
    rep.per_frame_ssim.push_back(ssim(generated[i], reference[i], peak));
  }
  for (double v : rep.per_frame_psnr) rep.mean_psnr += v;
  for (double v : rep.per_frame_ssim) rep.mean_ssim += v;
  rep.mean_psnr /= rep.frame_count;
  rep.mean_ssim /= rep.frame_count;
  if (envelope != nullptr) {
    rep.lip_sync = lip_sync_score(generated, *envelope);
    rep.has_lip_sync = true;
  }
  return rep;
}

inline void write_report(std::ostream& os, const MetricReport& rep) {
  os << "frame_count " << rep.frame_count << "\n";
  os << "mean_psnr_db " << rep.mean_psnr << "\n";
  os << "mean_ssim " << rep.mean_ssim << "\n";
  if (rep.has_lip_sync) os << "lip_sync_correlation " << rep.lip_sync << "\n";
}

inline void write_per_frame_table(std::ostream& os, const MetricReport& rep) {
  os << "frame,psnr_db,ssim\n";
  for (int i = 0; i < rep.frame_count; ++i)
    os << i << "," << rep.per_frame_psnr[static_cast<size_t>(i)] << ","
       << rep.per_frame_ssim[static_cast<size_t>(i)] << "\n";
}

}  // namespace dithead
