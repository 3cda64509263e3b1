#include <catch2/catch_amalgamated.hpp>

#include "dithead/image.hpp"
#include "dithead/metrics.hpp"
#include "dithead/synthdata.hpp"
#include "dithead/vqae.hpp"

using namespace dithead;

namespace {

VqaeConfig small_cfg(int size = 32, int f = 4, int channels = 16, int codebook = 64) {
  VqaeConfig c;
  c.image_size = size;
  c.downsample_factor = f;
  c.channels = channels;
  c.codebook_size = codebook;
  return c;
}

}  // namespace

TEST_CASE("encode produces the expected latent grid") {
  Rng rng(1);
  VqaeParams<float> p = make_vqae_params<float>(small_cfg(64, 4, 8, 32), rng);
  Tensor<float> img = Tensor<float>::uniform({1, 64, 64, 3}, rng, -1.0, 1.0);
  QuantizedLatent<float> ql = encode(img, p);
  REQUIRE(ql.grid_h == 16);
  REQUIRE(ql.grid_w == 16);
  REQUIRE(ql.latent.shape() == Shape{1, 16, 16, 3});
  REQUIRE(ql.pre_quant.shape() == Shape{1, 16, 16, 3});
  REQUIRE(ql.indices.size() == 16 * 16);

  // paper-scale geometry: 256 / 4 = 64
  Tensor<float> big = Tensor<float>::uniform({1, 256, 256, 3}, rng, -1.0, 1.0);
  QuantizedLatent<float> qb = encode(big, p);
  REQUIRE(qb.latent.shape() == Shape{1, 64, 64, 3});

  REQUIRE_THROWS_AS(encode(Tensor<float>::zeros({1, 62, 62, 3}), p), ParameterError);
}

TEST_CASE("encode is deterministic") {
  Rng rng(2);
  VqaeParams<float> p = make_vqae_params<float>(small_cfg(), rng);
  Tensor<float> img = Tensor<float>::uniform({2, 32, 32, 3}, rng, -1.0, 1.0);
  QuantizedLatent<float> a = encode(img, p);
  QuantizedLatent<float> b = encode(img, p);
  REQUIRE(a.indices == b.indices);
  for (int64_t i = 0; i < a.latent.numel(); ++i) REQUIRE(a.latent.data()[i] == b.latent.data()[i]);
}

TEST_CASE("quantize picks the nearest entry with low-index tie break") {
  Tensor<double> codebook = Tensor<double>::from_data({2, 3}, {0, 0, 0, 1, 1, 1});
  Tensor<double> cell = Tensor<double>::from_data({1, 1, 3}, {0.2, 0.1, 0.0});
  QuantizedLatent<double> q = quantize(cell, codebook);
  REQUIRE(q.indices == std::vector<int>{0});
  // equidistant cell resolves to the lower index
  Tensor<double> mid = Tensor<double>::from_data({1, 1, 3}, {0.5, 0.5, 0.5});
  REQUIRE(quantize(mid, codebook).indices == std::vector<int>{0});
  // exact equality with the selected entry
  REQUIRE(quantize(mid, codebook).latent.data()[0] == 0.0);
  REQUIRE_THROWS_AS(quantize(cell, Tensor<double>()), StateError);
}

TEST_CASE("quantize matches exhaustive nearest-neighbor search") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    int nc = 4 + int(rng.uniform_int(0, 508));
    Tensor<double> codebook = Tensor<double>::uniform({nc, 3}, rng, -1.0, 1.0);
    Tensor<double> cells = Tensor<double>::uniform({10, 10, 3}, rng, -1.2, 1.2);
    QuantizedLatent<double> q = quantize(cells, codebook);
    for (int i = 0; i < 100; ++i) {
      int best = 0;
      double best_d = 1e300;
      for (int e = 0; e < nc; ++e) {
        double d = 0;
        for (int c = 0; c < 3; ++c) {
          double diff = cells.data()[i * 3 + c] - codebook.data()[e * 3 + c];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = e;
        }
      }
      REQUIRE(q.indices[size_t(i)] == best);
      for (int c = 0; c < 3; ++c)
        REQUIRE(q.latent.data()[i * 3 + c] == codebook.data()[q.indices[size_t(i)] * 3 + c]);
    }
  }
}

TEST_CASE("quantize passes gradients straight through") {
  Rng rng(4);
  Tensor<double> codebook = Tensor<double>::uniform({8, 3}, rng, -1.0, 1.0);
  Tensor<double> w = Tensor<double>::randn({2, 2, 3}, rng);

  Tensor<double> pre = Tensor<double>::uniform({2, 2, 3}, rng, -1.0, 1.0);
  pre.set_requires_grad(true);
  QuantizedLatent<double> q = quantize(pre, codebook);
  Tensor<double> loss = sum_all(mul(q.latent, w));
  backward(loss);
  std::vector<double> grad_through_quantize(pre.grad(), pre.grad() + pre.numel());

  Tensor<double> pre2 = Tensor<double>::from_data(pre.shape(), pre.vec());
  pre2.set_requires_grad(true);
  Tensor<double> loss2 = sum_all(mul(pre2, w));  // quantize replaced by identity
  backward(loss2);
  for (int64_t i = 0; i < pre.numel(); ++i) REQUIRE(grad_through_quantize[size_t(i)] == pre2.grad()[i]);
}

TEST_CASE("loss is zero for perfect reconstruction on a codebook point") {
  Tensor<double> codebook = Tensor<double>::from_data({2, 3}, {0.5, -0.5, 0.25, -1, -1, -1});
  Tensor<double> pre = Tensor<double>::from_data({1, 1, 3}, {0.5, -0.5, 0.25});
  QuantizedLatent<double> q = quantize(pre, codebook);
  Tensor<double> img = Tensor<double>::from_data({1, 2, 2, 3}, std::vector<double>(12, 0.3));
  VqaeLoss<double> l = vqae_loss(img, img, q, codebook, 0.25);
  REQUIRE(l.reconstruction.item() == 0.0);
  REQUIRE(l.codebook.item() == 0.0);
  REQUIRE(l.commitment.item() == 0.0);
  REQUIRE(l.total.item() == 0.0);
}

TEST_CASE("commitment term closed form at unit distance") {
  // cell at unit euclidean distance from its entry: commitment = beta * 1
  Tensor<double> codebook = Tensor<double>::from_data({1, 3}, {0.0, 0.0, 0.0});
  Tensor<double> pre = Tensor<double>::from_data({1, 1, 3}, {1.0, 0.0, 0.0});
  QuantizedLatent<double> q = quantize(pre, codebook);
  Tensor<double> img = Tensor<double>::zeros({1, 2, 2, 3});
  VqaeLoss<double> l = vqae_loss(img, img, q, codebook, 0.25);
  REQUIRE(l.commitment.item() == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(l.codebook.item() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("decode shape, clamping and determinism") {
  Rng rng(5);
  VqaeParams<float> p = make_vqae_params<float>(small_cfg(64, 4, 8, 32), rng);
  Tensor<float> latent = Tensor<float>::uniform({1, 16, 16, 3}, rng, -1.0, 1.0);
  Tensor<float> out = decode(latent, p);
  REQUIRE(out.shape() == Shape{1, 64, 64, 3});
  for (int64_t i = 0; i < out.numel(); ++i) {
    REQUIRE(out.data()[i] >= -1.0f);
    REQUIRE(out.data()[i] <= 1.0f);
  }
  Tensor<float> again = decode(latent, p);
  for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == again.data()[i]);
  REQUIRE_THROWS_AS(decode(Tensor<float>::zeros({1, 16, 16, 4}), p), DimensionError);
}

TEST_CASE("round-trip shapes hold across sizes and factors") {
  Rng rng(6);
  struct Case {
    int h, w, f;
  };
  for (Case c : {Case{32, 32, 2}, Case{64, 64, 4}, Case{32, 64, 4}, Case{64, 32, 8}}) {
    VqaeConfig cfg = small_cfg(std::max(c.h, c.w), c.f, 8, 16);
    VqaeParams<float> p = make_vqae_params<float>(cfg, rng);
    Tensor<float> img = Tensor<float>::uniform({1, c.h, c.w, 3}, rng, -1.0, 1.0);
    QuantizedLatent<float> ql = encode(img, p);
    REQUIRE(ql.latent.shape() == Shape{1, c.h / c.f, c.w / c.f, 3});
    Tensor<float> rec = decode(ql.latent, p);
    REQUIRE(rec.shape() == img.shape());
  }
}

TEST_CASE("single-image overfit halves the loss in 500 steps") {
  Rng rng(7);
  VqaeConfig cfg = small_cfg(32, 4, 16, 64);
  VqaeParams<float> p = make_vqae_params<float>(cfg, rng);
  Adam<float> opt(p.parameters(), 2e-3);
  IdentitySpec id = make_identity(11, 32, 32);
  auto [img, lm] = render_frame(id, 0.6);
  Tensor<float> x = images_to_batch<float>({&img});
  float initial = -1.0f, final_loss = -1.0f;
  for (int step = 0; step < 500; ++step) {
    QuantizedLatent<float> ql = encode(x, p);
    Tensor<float> recon = decode(ql.latent, p);
    VqaeLoss<float> loss = vqae_loss(x, recon, ql, p.codebook, cfg.commitment_beta);
    if (step == 0) initial = float(loss.total.item());
    final_loss = float(loss.total.item());
    backward(loss.total);
    opt.step();
    opt.zero_grad();
  }
  REQUIRE(final_loss >= 0.0f);
  REQUIRE(final_loss < 0.5f * initial);
}

TEST_CASE("overfit reconstruction clears 30 dB") {
  Rng rng(8);
  VqaeConfig cfg = small_cfg(48, 4, 24, 128);
  VqaeParams<float> p = make_vqae_params<float>(cfg, rng);
  Adam<float> opt(p.parameters(), 2e-3);
  IdentitySpec id = make_identity(5, 48, 48);
  auto [img, lm] = render_frame(id, 0.4);
  Tensor<float> x = images_to_batch<float>({&img});
  for (int step = 0; step < 2000; ++step) {
    QuantizedLatent<float> ql = encode(x, p);
    Tensor<float> recon = decode(ql.latent, p);
    VqaeLoss<float> loss = vqae_loss(x, recon, ql, p.codebook, cfg.commitment_beta);
    backward(loss.total);
    opt.step();
    opt.zero_grad();
    if (step % 250 == 0) record_usage(p, ql.indices);
  }
  NoGradGuard ng;
  QuantizedLatent<float> ql = encode(x, p);
  Image rec = tensor_to_image(decode(ql.latent, p), 0);
  REQUIRE(psnr(rec, img, 2.0) > 30.0);
}

TEST_CASE("dead codebook entries reseed from encoder outputs") {
  Rng rng(9);
  VqaeParams<float> p = make_vqae_params<float>(small_cfg(32, 4, 8, 16), rng);
  Tensor<float> pre = Tensor<float>::uniform({1, 8, 8, 3}, rng, -1.0, 1.0);
  QuantizedLatent<float> q = quantize(pre, p.codebook);
  record_usage(p, q.indices);
  int dead = 0;
  for (int64_t c : p.usage_counts)
    if (c == 0) ++dead;
  int moved = reseed_dead_entries(p, pre, rng);
  REQUIRE(moved == dead);
  for (int64_t c : p.usage_counts) REQUIRE(c == 0);  // counters reset after the sweep
}

TEST_CASE("parameter checksum is order-sensitive and stable") {
  Rng rng(10);
  VqaeParams<float> p = make_vqae_params<float>(small_cfg(), rng);
  uint64_t a = params_checksum(p);
  REQUIRE(a == params_checksum(p));
  p.codebook.data()[0] += 1.0f;
  REQUIRE(a != params_checksum(p));
}
