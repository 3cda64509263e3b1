#include <catch2/catch_amalgamated.hpp>

#include "dithead/metrics.hpp"
#include "dithead/synthdata.hpp"

using namespace dithead;

TEST_CASE("synthetic audio stays in range and has 33 features per frame") {
  AudioTrack t = synth_audio(42, 80);
  REQUIRE(t.sample_rate == 16000);
  REQUIRE(t.num_frames == 80);
  REQUIRE(t.feature_dim == 33);
  REQUIRE(t.samples.size() == size_t(80) * (16000 / 25));
  for (float s : t.samples) {
    REQUIRE(s >= -1.0f);
    REQUIRE(s <= 1.0f);
  }
  REQUIRE(t.features.size() == size_t(80) * 33);
  // feature 0 carries the envelope
  std::vector<float> env = make_envelope(42, 80);
  for (int i = 0; i < 80; ++i) REQUIRE(t.frame_features(i)[0] == env[size_t(i)]);
}

TEST_CASE("silent envelope produces zero band energies") {
  std::vector<float> zeros(70, 0.0f);
  AudioTrack t = synth_audio_from_envelope(zeros, 3);
  for (float s : t.samples) REQUIRE(s == 0.0f);
  for (float f : t.features) REQUIRE(f == 0.0f);
}

TEST_CASE("envelope spans [0,1]") {
  std::vector<float> env = make_envelope(7, 200);
  float lo = 1.0f, hi = 0.0f;
  for (float v : env) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  REQUIRE(lo == 0.0f);
  REQUIRE(hi == 1.0f);
}

TEST_CASE("closed mouth renders no dark pixels") {
  IdentitySpec id = make_identity(1);
  auto [img, lm] = render_frame(id, 0.0);
  REQUIRE(measure_mouth_opening(img) == 0.0);
}

TEST_CASE("mouth opening tracks the envelope within a pixel") {
  for (uint64_t seed : {2ull, 5ull, 9ull}) {
    IdentitySpec id = make_identity(seed);
    for (double e : {0.25, 0.5, 0.75, 1.0}) {
      auto [img, lm] = render_frame(id, e);
      double measured = measure_mouth_opening(img);
      double analytic = e * id.max_opening;
      INFO("seed " << seed << " e " << e << " measured " << measured << " analytic " << analytic);
      REQUIRE(std::abs(measured - analytic) <= 1.0);
    }
  }
}

TEST_CASE("landmarks stay inside the frame with positive hull area") {
  for (uint64_t seed = 0; seed < 12; ++seed) {
    IdentitySpec id = make_identity(seed);
    std::vector<Point2> lm = face_landmarks(id);
    REQUIRE(lm.size() == size_t(kNumLandmarks));
    for (const auto& p : lm) {
      REQUIRE(p.x >= 0.0);
      REQUIRE(p.x <= id.width - 1.0);
      REQUIRE(p.y >= 0.0);
      REQUIRE(p.y <= id.height - 1.0);
    }
    auto mask = convex_hull_mask(lm, id.height, id.width);
    int64_t area = 0;
    for (uint8_t v : mask) area += v;
    REQUIRE(area > 0);
  }
}

TEST_CASE("generated sequences obey the reference gap and mask definition") {
  IdentitySpec id = make_identity(4);
  Rng rng(11);
  SequenceData seq = generate_sequence(id, 130, rng);
  REQUIRE(seq.samples.size() == 130);
  for (const auto& s : seq.samples) {
    REQUIRE(std::abs(s.reference_index - s.frame_index) >= kReferenceMinGap);
    REQUIRE(s.audio_window.size() == size_t(kAudioWindowDim));
    // masked frame equals the fill wherever blending saturates
    for (int64_t p = 0; p < s.ground_truth.num_pixels(); ++p)
      if (s.alpha_map[size_t(p)] == 1.0f)
        for (int c = 0; c < 3; ++c) REQUIRE(s.masked.pixels[size_t(p) * 3 + c] == 0.0f);
    // and equals the source exactly where blending is zero
    for (int64_t p = 0; p < s.ground_truth.num_pixels(); ++p)
      if (s.alpha_map[size_t(p)] == 0.0f)
        for (int c = 0; c < 3; ++c)
          REQUIRE(s.masked.pixels[size_t(p) * 3 + c] == s.ground_truth.pixels[size_t(p) * 3 + c]);
  }
  REQUIRE_THROWS_AS(generate_sequence(id, 60, rng), ParameterError);
}

TEST_CASE("mouth opening correlates with the envelope by construction") {
  IdentitySpec id = make_identity(6);
  Rng rng(13);
  SequenceData seq = generate_sequence(id, 130, rng);
  std::vector<Image> frames;
  for (const auto& s : seq.samples) frames.push_back(s.ground_truth);
  double r = lip_sync_score(frames, seq.envelope);
  REQUIRE(r > 0.99);
}

TEST_CASE("identical seeds reproduce sequences bit for bit") {
  IdentitySpec id = make_identity(8);
  Rng r1(21), r2(21);
  SequenceData a = generate_sequence(id, 125, r1);
  SequenceData b = generate_sequence(id, 125, r2);
  REQUIRE(a.envelope == b.envelope);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    REQUIRE(a.samples[i].ground_truth.pixels == b.samples[i].ground_truth.pixels);
    REQUIRE(a.samples[i].masked.pixels == b.samples[i].masked.pixels);
    REQUIRE(a.samples[i].reference_index == b.samples[i].reference_index);
    REQUIRE(a.samples[i].audio_window == b.samples[i].audio_window);
  }
}
