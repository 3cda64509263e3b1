#include <catch2/catch_amalgamated.hpp>

#include "dithead/diffusion.hpp"

using namespace dithead;

TEST_CASE("linear schedule endpoints and derived tables") {
  NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  REQUIRE(s.beta(1) == Catch::Approx(1e-4).margin(1e-12));
  REQUIRE(s.beta(1000) == Catch::Approx(0.02).margin(1e-12));
  // betas monotone nondecreasing, alpha_bars strictly decreasing
  for (int t = 2; t <= 1000; ++t) {
    REQUIRE(s.beta(t) >= s.beta(t - 1));
    REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
    REQUIRE(s.beta(t) > 0.0);
    REQUIRE(s.beta(t) < 1.0);
  }
  REQUIRE(s.alpha_bar(0) == 1.0);
  // the running product evaluated independently
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - s.beta(t);
    REQUIRE(s.alpha_bar(t) == Catch::Approx(prod).margin(1e-6));
  }
  REQUIRE(s.alpha_bar(1000) < 1e-4);
}

TEST_CASE("single step schedule") {
  NoiseSchedule s = make_linear_schedule(1, 0.01, 0.02);
  REQUIRE(s.steps == 1);
  REQUIRE(s.beta(1) == Catch::Approx(0.01));
}

TEST_CASE("schedule rejects invalid ranges") {
  REQUIRE_THROWS_AS(make_linear_schedule(0, 1e-4, 0.02), ParameterError);
  REQUIRE_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ParameterError);
  REQUIRE_THROWS_AS(make_linear_schedule(10, 0.03, 0.02), ParameterError);
  REQUIRE_THROWS_AS(make_linear_schedule(10, 1e-4, 1.0), ParameterError);
}

TEST_CASE("q_sample identity at t=0 and zero-signal case") {
  NoiseSchedule s = make_linear_schedule(100, 1e-3, 0.05);
  Rng rng(1);
  Tensor<double> z0 = Tensor<double>::randn({4}, rng);
  Tensor<double> eps = Tensor<double>::randn({4}, rng);
  Tensor<double> zt = q_sample(z0, 0, eps, s);
  for (int i = 0; i < 4; ++i) REQUIRE(zt.data()[i] == z0.data()[i]);

  Tensor<double> zeros = Tensor<double>::zeros({4});
  Tensor<double> z1 = q_sample(zeros, 37, eps, s);
  double c = std::sqrt(1.0 - s.alpha_bar(37));
  for (int i = 0; i < 4; ++i) REQUIRE(z1.data()[i] == Catch::Approx(c * eps.data()[i]).margin(1e-12));

  REQUIRE_THROWS_AS(q_sample(z0, 101, eps, s), ParameterError);
  REQUIRE_THROWS_AS(q_sample(z0, -1, eps, s), ParameterError);
}

TEST_CASE("q_sample Monte-Carlo moments match the closed form") {
  NoiseSchedule s = make_linear_schedule(200, 1e-4, 0.02);
  Rng rng(41);
  Tensor<double> z0 = Tensor<double>::from_data({2}, {0.7, -1.3});
  const int t = 120;
  const int n = 100000;
  double ab = s.alpha_bar(t);
  std::vector<double> sum(2, 0.0), sumsq(2, 0.0);
  for (int trial = 0; trial < n; ++trial) {
    Tensor<double> eps = Tensor<double>::randn({2}, rng);
    Tensor<double> zt = q_sample(z0, t, eps, s);
    for (int i = 0; i < 2; ++i) {
      sum[size_t(i)] += zt.data()[i];
      sumsq[size_t(i)] += zt.data()[i] * zt.data()[i];
    }
  }
  double var_expect = 1.0 - ab;
  for (int i = 0; i < 2; ++i) {
    double mean = sum[size_t(i)] / n;
    double var = sumsq[size_t(i)] / n - mean * mean;
    double se_mean = std::sqrt(var_expect / n);
    double se_var = var_expect * std::sqrt(2.0 / (n - 1));
    REQUIRE(std::abs(mean - std::sqrt(ab) * z0.data()[i]) < 3.0 * se_mean);
    REQUIRE(std::abs(var - var_expect) < 3.0 * se_var);
  }
}

TEST_CASE("iterative forward process: single step and noiseless chain") {
  NoiseSchedule s = make_linear_schedule(50, 1e-3, 0.05);
  Rng rng(5);
  Tensor<double> z0 = Tensor<double>::randn({3}, rng);
  Tensor<double> e1 = Tensor<double>::randn({3}, rng);
  Tensor<double> one_step = q_sample_iterative(z0, 1, {e1}, s);
  double b1 = s.beta(1);
  for (int i = 0; i < 3; ++i)
    REQUIRE(one_step.data()[i] ==
            Catch::Approx(std::sqrt(1.0 - b1) * z0.data()[i] + std::sqrt(b1) * e1.data()[i]).margin(1e-12));

  std::vector<Tensor<double>> zeros_seq(50, Tensor<double>::zeros({3}));
  Tensor<double> z50 = q_sample_iterative(z0, 50, zeros_seq, s);
  double c = std::sqrt(s.alpha_bar(50));
  for (int i = 0; i < 3; ++i) REQUIRE(z50.data()[i] == Catch::Approx(c * z0.data()[i]).margin(1e-9));
}

TEST_CASE("closed-form and iterative forward process agree in distribution") {
  // five (z0, t) cases; 1e5 trials each; first and second moments within 3
  // standard errors of each other
  NoiseSchedule s = make_linear_schedule(200, 1e-4, 0.02);
  const int n = 100000;
  struct Case {
    double z0v;
    int t;
  };
  std::vector<Case> cases{{0.5, 1}, {-0.8, 3}, {1.2, 10}, {0.1, 60}, {-1.5, 200}};
  Rng rng(77);
  for (const auto& c : cases) {
    Tensor<double> z0 = Tensor<double>::full({1}, c.z0v);
    double m1 = 0, v1 = 0, m2 = 0, v2 = 0;
    for (int trial = 0; trial < n; ++trial) {
      Tensor<double> eps = Tensor<double>::randn({1}, rng);
      double a = q_sample(z0, c.t, eps, s).data()[0];
      m1 += a;
      v1 += a * a;
      std::vector<Tensor<double>> seq;
      seq.reserve(size_t(c.t));
      for (int k = 0; k < c.t; ++k) seq.push_back(Tensor<double>::randn({1}, rng));
      double b = q_sample_iterative(z0, c.t, seq, s).data()[0];
      m2 += b;
      v2 += b * b;
    }
    m1 /= n;
    m2 /= n;
    v1 = v1 / n - m1 * m1;
    v2 = v2 / n - m2 * m2;
    double sigma2 = 1.0 - s.alpha_bar(c.t);
    double se_mean = std::sqrt(2.0 * sigma2 / n);  // difference of two estimates
    double se_var = sigma2 * std::sqrt(2.0 * 2.0 / (n - 1));
    INFO("t=" << c.t);
    REQUIRE(std::abs(m1 - m2) < 3.0 * std::max(se_mean, 1e-12));
    REQUIRE(std::abs(v1 - v2) < 3.0 * std::max(se_var, 1e-12));
  }
}

TEST_CASE("ddim exact-noise inversion in one hop") {
  NoiseSchedule s = make_linear_schedule(200, 1e-4, 0.02);
  Rng rng(9);
  Tensor<double> z0 = Tensor<double>::randn({5}, rng);
  for (int t : {1, 17, 100, 200}) {
    Tensor<double> eps = Tensor<double>::randn({5}, rng);
    Tensor<double> zt = q_sample(z0, t, eps, s);
    Tensor<double> rec = ddim_step(zt, eps, t, 0, s, 0.0);
    for (int i = 0; i < 5; ++i) REQUIRE(rec.data()[i] == Catch::Approx(z0.data()[i]).margin(1e-10));
  }
}

TEST_CASE("ddim at eta=0 is deterministic") {
  NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
  Rng rng(13);
  Tensor<double> zt = Tensor<double>::randn({6}, rng);
  Tensor<double> eps = Tensor<double>::randn({6}, rng);
  Tensor<double> a = ddim_step(zt, eps, 50, 25, s, 0.0);
  Tensor<double> b = ddim_step(zt, eps, 50, 25, s, 0.0);
  for (int i = 0; i < 6; ++i) REQUIRE(a.data()[i] == b.data()[i]);
  REQUIRE_THROWS_AS(ddim_step(zt, eps, 25, 50, s, 0.0), ParameterError);
  REQUIRE_THROWS_AS(ddim_step(zt, eps, 25, 25, s, 0.0), ParameterError);
}

TEST_CASE("chained ddim steps recover z0 with the exact noise") {
  // with eps_pred equal to the true residual noise at every visited step, the
  // eta=0 chain walks back to z0
  NoiseSchedule s = make_linear_schedule(200, 1e-4, 0.02);
  Rng rng(21);
  Tensor<double> z0 = Tensor<double>::randn({4}, rng);
  Tensor<double> eps = Tensor<double>::randn({4}, rng);
  std::vector<int> seq = make_step_sequence(200, 200);
  Tensor<double> z = q_sample(z0, 200, eps, s);
  for (size_t i = 0; i < seq.size(); ++i) {
    int t = seq[i];
    int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
    double ab = s.alpha_bar(t);
    Tensor<double> eps_t = Tensor<double>::zeros({4});
    for (int j = 0; j < 4; ++j)
      eps_t.data()[j] = (z.data()[j] - std::sqrt(ab) * z0.data()[j]) / std::sqrt(1.0 - ab);
    z = ddim_step(z, eps_t, t, t_prev, s, 0.0);
  }
  for (int j = 0; j < 4; ++j) REQUIRE(z.data()[j] == Catch::Approx(z0.data()[j]).margin(1e-4));
}

TEST_CASE("step sequences are strictly decreasing and bounded") {
  std::vector<int> seq = make_step_sequence(200, 50);
  REQUIRE(seq.size() == 50);
  REQUIRE(seq.front() == 200);
  REQUIRE(seq.back() == 1);
  for (size_t i = 1; i < seq.size(); ++i) REQUIRE(seq[i] < seq[i - 1]);
  REQUIRE_THROWS_AS(make_step_sequence(100, 101), ParameterError);
  REQUIRE_THROWS_AS(make_step_sequence(100, 0), ParameterError);
  REQUIRE(make_step_sequence(100, 1) == std::vector<int>{100});
}

TEST_CASE("ddpm final step adds no noise") {
  NoiseSchedule s = make_linear_schedule(50, 1e-3, 0.05);
  Rng rng(31);
  Tensor<double> zt = Tensor<double>::randn({4}, rng);
  Tensor<double> eps = Tensor<double>::randn({4}, rng);
  Tensor<double> noise = Tensor<double>::randn({4}, rng);
  Tensor<double> with_noise = ddpm_step(zt, eps, 1, s, noise);
  Tensor<double> without = ddpm_step(zt, eps, 1, s);
  for (int i = 0; i < 4; ++i) REQUIRE(with_noise.data()[i] == without.data()[i]);
  REQUIRE_THROWS_AS(ddpm_step(zt, eps, 0, s), ParameterError);
  REQUIRE_THROWS_AS(ddpm_step(zt, eps, 51, s), ParameterError);
}

TEST_CASE("ddpm zero-input case leaves scaled posterior noise") {
  NoiseSchedule s = make_linear_schedule(50, 1e-3, 0.05);
  Rng rng(33);
  Tensor<double> zeros = Tensor<double>::zeros({4});
  Tensor<double> noise = Tensor<double>::randn({4}, rng);
  int t = 20;
  Tensor<double> out = ddpm_step(zeros, zeros, t, s, noise);
  double beta_tilde = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
  for (int i = 0; i < 4; ++i)
    REQUIRE(out.data()[i] == Catch::Approx(std::sqrt(beta_tilde) * noise.data()[i]).margin(1e-12));
}

TEST_CASE("noise-free ddpm reverse chain recovers z0") {
  NoiseSchedule s = make_linear_schedule(200, 1e-4, 0.02);
  Rng rng(35);
  Tensor<double> z0 = Tensor<double>::randn({4}, rng);
  Tensor<double> eps0 = Tensor<double>::randn({4}, rng);
  Tensor<double> z = q_sample(z0, 200, eps0, s);
  for (int t = 200; t >= 1; --t) {
    double ab = s.alpha_bar(t);
    Tensor<double> eps_t = Tensor<double>::zeros({4});
    for (int j = 0; j < 4; ++j)
      eps_t.data()[j] = (z.data()[j] - std::sqrt(ab) * z0.data()[j]) / std::sqrt(1.0 - ab);
    z = ddpm_step(z, eps_t, t, s);  // no injected noise
  }
  for (int j = 0; j < 4; ++j) REQUIRE(z.data()[j] == Catch::Approx(z0.data()[j]).margin(1e-3));
}
