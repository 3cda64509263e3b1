#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dithead/io.hpp"
#include "dithead/synthdata.hpp"

namespace dithead {

// Writes one identity subdirectory: frames as P6 pixmaps plus landmark,
// audio-feature and envelope tables.
inline void write_identity_dir(const fs::path& dir, const IdentitySpec& id, const SequenceData& seq) {
  fs::create_directories(dir / "frames");
  char buf[64];
  std::ofstream lm(dir / "landmarks.txt");
  std::ofstream af(dir / "audio_features.txt");
  if (!lm || !af) throw IoError("cannot open tables under " + dir.string());
  for (size_t i = 0; i < seq.samples.size(); ++i) {
    const FrameSample& s = seq.samples[i];
    write_ppm(dir / "frames" / frame_filename(static_cast<int>(i)), s.ground_truth);
    lm << i;
    for (const auto& p : s.landmarks) {
      std::snprintf(buf, sizeof(buf), " %.9g %.9g", p.x, p.y);
      lm << buf;
    }
    lm << "\n";
    af << i;
    const float* feats = seq.audio.frame_features(static_cast<int>(i));
    for (int f = 0; f < seq.audio.feature_dim; ++f) {
      std::snprintf(buf, sizeof(buf), " %.9g", static_cast<double>(feats[f]));
      af << buf;
    }
    af << "\n";
  }
  write_envelope_file(dir / "envelope.txt", seq.envelope);
  (void)id;
}

inline std::string identity_dirname(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "identity_%02d", index);
  return buf;
}

// Generates the full synthetic dataset: train identities first, then held-out
// ones, all derived deterministically from the config seed.
inline void write_dataset(const fs::path& root, const RunConfig& cfg) {
  fs::create_directories(root);
  int total = cfg.num_train_identities + cfg.num_heldout_identities;
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw IoError("cannot open manifest under " + root.string());
  manifest << "format_version = 1\n";
  manifest << "seed = " << cfg.seed << "\n";
  manifest << "num_train_identities = " << cfg.num_train_identities << "\n";
  manifest << "num_heldout_identities = " << cfg.num_heldout_identities << "\n";
  manifest << "frames_per_identity = " << cfg.frames_per_identity << "\n";
  manifest << "image_size_px = " << cfg.image_size_px << "\n";
  manifest << "fps = " << kVideoFps << "\n";
  for (int i = 0; i < total; ++i) {
    uint64_t id_seed = cfg.seed * 1000003ull + static_cast<uint64_t>(i);
    IdentitySpec id = make_identity(id_seed, cfg.image_size_px, cfg.image_size_px);
    Rng rng(id_seed ^ 0x5851f42d4c957f2dull);
    SequenceData seq = generate_sequence(id, cfg.frames_per_identity, rng, cfg.mask_kernel_size_px,
                                         cfg.mask_sigma_px);
    std::string name = identity_dirname(i);
    write_identity_dir(root / name, id, seq);
    manifest << name << ".role = " << (i < cfg.num_train_identities ? "train" : "heldout") << "\n";
    manifest << name << ".seed = " << id_seed << "\n";
  }
}

// Rows are "<frame_index> <values...>"; the frame count is inferred from the
// highest index and every row must be present. expected < 0 skips the check.
inline std::vector<std::vector<Point2>> read_landmark_table(const fs::path& path, int expected = -1) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::vector<Point2>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int idx;
    if (!(ls >> idx) || idx < 0) throw IoError(path.string() + ": malformed landmark row");
    std::vector<Point2> pts;
    double x, y;
    while (ls >> x >> y) pts.push_back({x, y});
    if (pts.size() < 3) throw IoError(path.string() + ": landmark row needs at least 3 points");
    if (static_cast<size_t>(idx) >= out.size()) out.resize(static_cast<size_t>(idx) + 1);
    out[static_cast<size_t>(idx)] = std::move(pts);
  }
  for (const auto& row : out)
    if (row.empty()) throw IoError(path.string() + ": missing landmark rows");
  if (expected >= 0 && static_cast<int>(out.size()) != expected)
    throw IoError(path.string() + ": landmark row count mismatch");
  return out;
}

inline AudioTrack read_audio_feature_table(const fs::path& path, int expected = -1) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int idx;
    if (!(ls >> idx) || idx < 0) throw IoError(path.string() + ": malformed feature row");
    std::vector<float> feats(kAudioFeatureDim);
    for (int f = 0; f < kAudioFeatureDim; ++f) {
      double v;
      if (!(ls >> v)) throw IoError(path.string() + ": feature row too short");
      feats[static_cast<size_t>(f)] = static_cast<float>(v);
    }
    if (static_cast<size_t>(idx) >= rows.size()) rows.resize(static_cast<size_t>(idx) + 1);
    rows[static_cast<size_t>(idx)] = std::move(feats);
  }
  if (rows.empty()) throw IoError(path.string() + ": empty feature table");
  for (const auto& row : rows)
    if (row.empty()) throw IoError(path.string() + ": missing feature rows");
  if (expected >= 0 && static_cast<int>(rows.size()) != expected)
    throw IoError(path.string() + ": feature row count mismatch");
  AudioTrack track;
  track.num_frames = static_cast<int>(rows.size());
  track.feature_dim = kAudioFeatureDim;
  track.features.resize(rows.size() * kAudioFeatureDim);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(), track.features.begin() + i * kAudioFeatureDim);
  return track;
}

inline LoadedIdentity load_identity_dir(const fs::path& dir, int num_frames) {
  LoadedIdentity id;
  id.name = dir.filename().string();
  id.frames.reserve(static_cast<size_t>(num_frames));
  for (int i = 0; i < num_frames; ++i) id.frames.push_back(read_ppm(dir / "frames" / frame_filename(i)));
  id.landmarks = read_landmark_table(dir / "landmarks.txt", num_frames);
  id.audio = read_audio_feature_table(dir / "audio_features.txt", num_frames);
  id.envelope = read_envelope_file(dir / "envelope.txt");
  if (static_cast<int>(id.envelope.size()) != num_frames) throw IoError(dir.string() + ": envelope length mismatch");
  return id;
}

inline LoadedDataset load_dataset(const fs::path& root) {
  ConfigMap manifest = ConfigMap::load(root / "manifest.txt");
  LoadedDataset ds;
  ds.seed = static_cast<uint64_t>(manifest.get_int("seed", 0));
  ds.image_size_px = static_cast<int>(manifest.get_int("image_size_px", 0));
  ds.frames_per_identity = static_cast<int>(manifest.get_int("frames_per_identity", 0));
  int num_train = static_cast<int>(manifest.get_int("num_train_identities", 0));
  int num_heldout = static_cast<int>(manifest.get_int("num_heldout_identities", 0));
  if (ds.frames_per_identity <= 0 || ds.image_size_px <= 0)
    throw IoError(root.string() + ": malformed dataset manifest");
  for (int i = 0; i < num_train + num_heldout; ++i) {
    std::string name = identity_dirname(i);
    std::string role = manifest.get_string(name + ".role", "");
    if (role != "train" && role != "heldout") throw IoError(root.string() + ": manifest missing role for " + name);
    LoadedIdentity id = load_identity_dir(root / name, ds.frames_per_identity);
    if (role == "train")
      ds.train.push_back(std::move(id));
    else
      ds.heldout.push_back(std::move(id));
  }
  if (ds.train.empty()) throw IoError(root.string() + ": dataset has no training identities");
  return ds;
}

}  // namespace dithead
