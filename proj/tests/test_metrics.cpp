#include <catch2/catch_amalgamated.hpp>

#include "dithead/metrics.hpp"

using namespace dithead;

namespace {

Image random_image(int h, int w, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Image img(h, w);
  Rng rng(seed);
  for (auto& v : img.pixels) v = float(rng.uniform(lo, hi));
  return img;
}

// direct formula evaluation: explicit 2-d window loops, no separable passes
double ssim_bruteforce(const Image& a, const Image& b, double peak, int window = 11) {
  auto taps = gaussian_kernel_1d(window, 1.5);
  double c1 = (0.01 * peak) * (0.01 * peak);
  double c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  int64_t count = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r + window <= a.height; ++r)
      for (int c = 0; c + window <= a.width; ++c) {
        double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j) {
            double wgt = taps[size_t(i)] * taps[size_t(j)];
            double va = a.px(r + i, c + j)[ch];
            double vb = b.px(r + i, c + j)[ch];
            ma += wgt * va;
            mb += wgt * vb;
            maa += wgt * va * va;
            mbb += wgt * vb * vb;
            mab += wgt * va * vb;
          }
        double var_a = maa - ma * ma, var_b = mbb - mb * mb, cov = mab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++count;
      }
  return total / double(count);
}

double psnr_bruteforce(const Image& a, const Image& b, double peak) {
  double s = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    double d = double(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  s /= double(a.pixels.size());
  return s == 0.0 ? 100.0 : 10.0 * std::log10(peak * peak / s);
}

}  // namespace

TEST_CASE("psnr identity, symmetry and closed form") {
  Image a = random_image(16, 16, 1);
  REQUIRE(psnr(a, a, 2.0) == 100.0);
  Image b = a;
  // constant offset of 16 levels on the 0..255 scale
  for (auto& v : b.pixels) v += 16.0f;
  double expect = 20.0 * std::log10(255.0 / 16.0);
  REQUIRE(psnr(a, b, 255.0) == Catch::Approx(expect).margin(1e-9));
  Image c = random_image(16, 16, 2);
  REQUIRE(psnr(a, c, 2.0) == Catch::Approx(psnr(c, a, 2.0)).margin(1e-12));
  Image d = random_image(8, 8, 3);
  REQUIRE_THROWS_AS(psnr(a, d, 2.0), DimensionError);
  REQUIRE_THROWS_AS(psnr(a, c, 0.0), ParameterError);
}

TEST_CASE("psnr strictly decreases with noise amplitude") {
  Image a = random_image(24, 24, 4, -0.5f, 0.5f);
  Rng rng(5);
  std::vector<float> noise(a.pixels.size());
  for (auto& v : noise) v = float(rng.normal());
  double prev = 1e300;
  for (double amp : {0.01, 0.03, 0.09, 0.27, 0.81}) {
    Image b = a;
    for (size_t i = 0; i < b.pixels.size(); ++i) b.pixels[i] += float(amp) * noise[i];
    double v = psnr(a, b, 2.0);
    REQUIRE(v < prev);
    prev = v;
  }
}

TEST_CASE("ssim identity, symmetry and range") {
  Image a = random_image(20, 20, 6);
  REQUIRE(ssim(a, a, 2.0) == Catch::Approx(1.0).margin(1e-9));
  Image b = random_image(20, 20, 7);
  REQUIRE(ssim(a, b, 2.0) == Catch::Approx(ssim(b, a, 2.0)).margin(1e-9));
  REQUIRE(ssim(a, b, 2.0) >= -1.0);
  REQUIRE(ssim(a, b, 2.0) <= 1.0);
  REQUIRE(ssim(a, b, 2.0) < 1.0);
  REQUIRE_THROWS_AS(ssim(random_image(8, 8, 8), random_image(8, 8, 9), 2.0), ParameterError);
}

TEST_CASE("ssim of a pattern against its negative is negative") {
  // zero-mean grating so the structural term dominates
  Image a(24, 24);
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c)
      for (int ch = 0; ch < 3; ++ch) a.px(r, c)[ch] = 0.8f * std::sin(0.9f * float(r + 2 * c));
  Image b = a;
  for (auto& v : b.pixels) v = -v;
  REQUIRE(ssim(a, b, 2.0) < 0.0);
}

TEST_CASE("metrics match brute-force reimplementations") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Image a = random_image(18, 22, 100 + seed);
    Image b = random_image(18, 22, 200 + seed);
    REQUIRE(psnr(a, b, 2.0) == Catch::Approx(psnr_bruteforce(a, b, 2.0)).margin(1e-6));
    REQUIRE(ssim(a, b, 2.0) == Catch::Approx(ssim_bruteforce(a, b, 2.0)).margin(1e-6));
  }
}

TEST_CASE("lip sync score on ground truth and shuffled frames") {
  IdentitySpec id = make_identity(3);
  Rng rng(17);
  SequenceData seq = generate_sequence(id, 130, rng);
  std::vector<Image> frames;
  for (const auto& s : seq.samples) frames.push_back(s.ground_truth);
  REQUIRE(lip_sync_score(frames, seq.envelope) > 0.99);

  // shuffling the frames destroys the correlation
  std::vector<Image> shuffled = frames;
  Rng shuffle_rng(23);
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[size_t(shuffle_rng.uniform_int(0, int64_t(i) - 1))]);
  REQUIRE(std::abs(lip_sync_score(shuffled, seq.envelope)) < 0.3);

  // constant envelope has no defined correlation
  std::vector<float> flat(frames.size(), 0.5f);
  REQUIRE_THROWS_AS(lip_sync_score(frames, flat), NumericError);
  REQUIRE_THROWS_AS(lip_sync_score({frames[0], frames[1]}, {0.1f, 0.2f}), ParameterError);
}

TEST_CASE("report aggregates per-frame metrics") {
  std::vector<Image> gen, ref;
  for (int i = 0; i < 5; ++i) {
    gen.push_back(random_image(16, 16, 300 + uint64_t(i)));
    ref.push_back(gen.back());
  }
  MetricReport rep = evaluate_frames(gen, ref, nullptr, 2.0);
  REQUIRE(rep.frame_count == 5);
  REQUIRE(rep.per_frame_psnr.size() == 5);
  REQUIRE(rep.mean_psnr == 100.0);
  REQUIRE(rep.mean_ssim == Catch::Approx(1.0).margin(1e-9));
  REQUIRE_FALSE(rep.has_lip_sync);
  ref.pop_back();
  REQUIRE_THROWS_AS(evaluate_frames(gen, ref, nullptr, 2.0), ValidationError);
}
