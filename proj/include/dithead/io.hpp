#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/conditioning.hpp"
#include "dithead/image.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// portable pixmap (P6) export; [-1,1] floats <-> 8-bit
// ---------------------------------------------------------------------------

inline uint8_t float_to_byte(float v) {
  float scaled = (v + 1.0f) * 127.5f;
  int b = static_cast<int>(std::lround(scaled));
  return static_cast<uint8_t>(std::clamp(b, 0, 255));
}

inline float byte_to_float(uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> bytes(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i) bytes[i] = float_to_byte(img.pixels[i]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError(path.string() + ": not a P6 pixmap");
  auto next_int = [&is, &path]() {
    int v;
    // skip whitespace and '#' comments
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    if (!(is >> v)) throw IoError(path.string() + ": malformed pixmap header");
    return v;
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (maxval != 255) throw IoError(path.string() + ": unsupported maxval");
  is.get();  // single whitespace after header
  Image img(h, w);
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError(path.string() + ": truncated pixmap");
  for (size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = byte_to_float(bytes[i]);
  return img;
}

// ---------------------------------------------------------------------------
// flat key-value config: "section.key = value", '#' comments
// ---------------------------------------------------------------------------

class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text) {
    ConfigMap cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static ConfigMap load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t pos = 0;
      int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ValidationError(key + ": not an integer: '" + it->second + "'");
    }
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ValidationError(key + ": not a number: '" + it->second + "'");
    }
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ValidationError(key + ": not a boolean: '" + it->second + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// All tunables for the pipeline; field names mirror the config keys.
struct RunConfig {
  uint64_t seed = 1;

  int num_train_identities = 8;
  int num_heldout_identities = 2;
  int frames_per_identity = 140;
  int image_size_px = 64;

  int mask_kernel_size_px = 27;
  double mask_sigma_px = 5.0;
  int jitter_max_shift_px = 2;

  int vqae_downsample_factor = 4;
  int vqae_codebook_size = 512;
  int vqae_channels = 32;
  double vqae_commitment_beta = 0.25;

  int dit_patch_size = 2;
  int dit_depth = 6;
  int dit_heads = 8;
  int dit_hidden_dim = 256;

  int schedule_num_steps = 1000;
  double schedule_beta_start = 1e-4;
  double schedule_beta_end = 0.02;

  std::string sampler_kind = "ddim";
  int sampler_num_inference_steps = 250;
  double sampler_eta = 0.0;

  double train_learning_rate = 1e-4;
  double train_color_jitter = 0.15;  // stage-1 per-sample color offset amplitude
  int train_batch_size = 16;
  int train_vqae_steps = 4000;
  int train_dit_steps = 4000;
  int train_checkpoint_every_steps = 1000;
  int train_eval_every_steps = 250;

  bool synthesis_evolving_reference = true;
  std::string synthesis_reference_latent = "final";  // final | noisy

  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string output_dir = "out";

  static const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "seed",
        "dataset.num_train_identities",
        "dataset.num_heldout_identities",
        "dataset.frames_per_identity",
        "dataset.image_size_px",
        "mask.kernel_size_px",
        "mask.sigma_px",
        "mask.jitter_max_shift_px",
        "vqae.downsample_factor",
        "vqae.codebook_size",
        "vqae.channels",
        "vqae.commitment_beta",
        "dit.patch_size",
        "dit.depth",
        "dit.heads",
        "dit.hidden_dim",
        "schedule.num_steps",
        "schedule.beta_start",
        "schedule.beta_end",
        "sampler.kind",
        "sampler.num_inference_steps",
        "sampler.eta",
        "train.learning_rate",
        "train.color_jitter",
        "train.batch_size",
        "train.vqae_steps",
        "train.dit_steps",
        "train.checkpoint_every_steps",
        "train.eval_every_steps",
        "synthesis.evolving_reference",
        "synthesis.reference_latent",
        "paths.data_dir",
        "paths.checkpoint_dir",
        "paths.output_dir",
    };
    return keys;
  }

  static RunConfig from_map(const ConfigMap& m) {
    for (const auto& [key, value] : m.values()) {
      (void)value;
      bool known = false;
      for (const auto& k : known_keys()) known = known || k == key;
      if (!known) throw ValidationError(key + ": unknown config key");
    }
    RunConfig c;
    c.seed = static_cast<uint64_t>(m.get_int("seed", static_cast<int64_t>(c.seed)));
    c.num_train_identities = static_cast<int>(m.get_int("dataset.num_train_identities", c.num_train_identities));
    c.num_heldout_identities =
        static_cast<int>(m.get_int("dataset.num_heldout_identities", c.num_heldout_identities));
    c.frames_per_identity = static_cast<int>(m.get_int("dataset.frames_per_identity", c.frames_per_identity));
    c.image_size_px = static_cast<int>(m.get_int("dataset.image_size_px", c.image_size_px));
    c.mask_kernel_size_px = static_cast<int>(m.get_int("mask.kernel_size_px", c.mask_kernel_size_px));
    c.mask_sigma_px = m.get_double("mask.sigma_px", c.mask_sigma_px);
    c.jitter_max_shift_px = static_cast<int>(m.get_int("mask.jitter_max_shift_px", c.jitter_max_shift_px));
    c.vqae_downsample_factor = static_cast<int>(m.get_int("vqae.downsample_factor", c.vqae_downsample_factor));
    c.vqae_codebook_size = static_cast<int>(m.get_int("vqae.codebook_size", c.vqae_codebook_size));
    c.vqae_channels = static_cast<int>(m.get_int("vqae.channels", c.vqae_channels));
    c.vqae_commitment_beta = m.get_double("vqae.commitment_beta", c.vqae_commitment_beta);
    c.dit_patch_size = static_cast<int>(m.get_int("dit.patch_size", c.dit_patch_size));
    c.dit_depth = static_cast<int>(m.get_int("dit.depth", c.dit_depth));
    c.dit_heads = static_cast<int>(m.get_int("dit.heads", c.dit_heads));
    c.dit_hidden_dim = static_cast<int>(m.get_int("dit.hidden_dim", c.dit_hidden_dim));
    c.schedule_num_steps = static_cast<int>(m.get_int("schedule.num_steps", c.schedule_num_steps));
    c.schedule_beta_start = m.get_double("schedule.beta_start", c.schedule_beta_start);
    c.schedule_beta_end = m.get_double("schedule.beta_end", c.schedule_beta_end);
    c.sampler_kind = m.get_string("sampler.kind", c.sampler_kind);
    c.sampler_num_inference_steps =
        static_cast<int>(m.get_int("sampler.num_inference_steps", c.sampler_num_inference_steps));
    c.sampler_eta = m.get_double("sampler.eta", c.sampler_eta);
    c.train_learning_rate = m.get_double("train.learning_rate", c.train_learning_rate);
    c.train_color_jitter = m.get_double("train.color_jitter", c.train_color_jitter);
    c.train_batch_size = static_cast<int>(m.get_int("train.batch_size", c.train_batch_size));
    c.train_vqae_steps = static_cast<int>(m.get_int("train.vqae_steps", c.train_vqae_steps));
    c.train_dit_steps = static_cast<int>(m.get_int("train.dit_steps", c.train_dit_steps));
    c.train_checkpoint_every_steps =
        static_cast<int>(m.get_int("train.checkpoint_every_steps", c.train_checkpoint_every_steps));
    c.train_eval_every_steps = static_cast<int>(m.get_int("train.eval_every_steps", c.train_eval_every_steps));
    c.synthesis_evolving_reference = m.get_bool("synthesis.evolving_reference", c.synthesis_evolving_reference);
    c.synthesis_reference_latent = m.get_string("synthesis.reference_latent", c.synthesis_reference_latent);
    c.data_dir = m.get_string("paths.data_dir", c.data_dir);
    c.checkpoint_dir = m.get_string("paths.checkpoint_dir", c.checkpoint_dir);
    c.output_dir = m.get_string("paths.output_dir", c.output_dir);
    c.validate();
    return c;
  }

  static RunConfig from_file(const fs::path& path) { return from_map(ConfigMap::load(path)); }

  void validate() const {
    auto positive = [](int64_t v, const std::string& field) {
      if (v < 1) throw ValidationError(field + ": must be >= 1");
    };
    positive(num_train_identities, "dataset.num_train_identities");
    positive(frames_per_identity, "dataset.frames_per_identity");
    if (num_heldout_identities < 0) throw ValidationError("dataset.num_heldout_identities: must be >= 0");
    if (frames_per_identity < 2 * kReferenceMinGap + 1)
      throw ValidationError("dataset.frames_per_identity: must be at least " +
                            std::to_string(2 * kReferenceMinGap + 1) +
                            " so every frame has a reference " + std::to_string(kReferenceMinGap) +
                            "+ frames away");
    positive(image_size_px, "dataset.image_size_px");
    if (mask_kernel_size_px < 1 || mask_kernel_size_px % 2 == 0)
      throw ValidationError("mask.kernel_size_px: must be odd and >= 1");
    if (!(mask_sigma_px > 0.0)) throw ValidationError("mask.sigma_px: must be positive");
    if (jitter_max_shift_px < 0) throw ValidationError("mask.jitter_max_shift_px: must be >= 0");
    int f = vqae_downsample_factor;
    if (f < 2 || (f & (f - 1)) != 0)
      throw ValidationError("vqae.downsample_factor: must be a power of two >= 2");
    if (image_size_px % f != 0)
      throw ValidationError("dataset.image_size_px: not divisible by vqae.downsample_factor");
    positive(vqae_codebook_size, "vqae.codebook_size");
    positive(vqae_channels, "vqae.channels");
    int latent = image_size_px / f;
    positive(dit_patch_size, "dit.patch_size");
    if (latent % dit_patch_size != 0)
      throw ValidationError("dit.patch_size: latent grid " + std::to_string(latent) + " not divisible by patch size");
    positive(dit_depth, "dit.depth");
    positive(dit_heads, "dit.heads");
    if (dit_hidden_dim % dit_heads != 0)
      throw ValidationError("dit.hidden_dim: not divisible by dit.heads");
    if (dit_hidden_dim % 4 != 0) throw ValidationError("dit.hidden_dim: must be divisible by 4");
    positive(schedule_num_steps, "schedule.num_steps");
    if (!(schedule_beta_start > 0.0) || !(schedule_beta_start <= schedule_beta_end) || !(schedule_beta_end < 1.0))
      throw ValidationError("schedule.beta_start: need 0 < beta_start <= beta_end < 1");
    if (sampler_kind != "ddim" && sampler_kind != "ddpm")
      throw ValidationError("sampler.kind: must be ddim or ddpm");
    if (sampler_num_inference_steps < 1 || sampler_num_inference_steps > schedule_num_steps)
      throw ValidationError("sampler.num_inference_steps: must be in [1..schedule.num_steps]");
    if (sampler_eta < 0.0 || sampler_eta > 1.0) throw ValidationError("sampler.eta: must be in [0,1]");
    if (!(train_learning_rate > 0.0)) throw ValidationError("train.learning_rate: must be positive");
    if (train_color_jitter < 0.0) throw ValidationError("train.color_jitter: must be >= 0");
    positive(train_batch_size, "train.batch_size");
    positive(train_checkpoint_every_steps, "train.checkpoint_every_steps");
    positive(train_eval_every_steps, "train.eval_every_steps");
    if (synthesis_reference_latent != "final" && synthesis_reference_latent != "noisy")
      throw ValidationError("synthesis.reference_latent: must be final or noisy");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "seed = " << seed << "\n";
    os << "dataset.num_train_identities = " << num_train_identities << "\n";
    os << "dataset.num_heldout_identities = " << num_heldout_identities << "\n";
    os << "dataset.frames_per_identity = " << frames_per_identity << "\n";
    os << "dataset.image_size_px = " << image_size_px << "\n";
    os << "mask.kernel_size_px = " << mask_kernel_size_px << "\n";
    os << "mask.sigma_px = " << mask_sigma_px << "\n";
    os << "mask.jitter_max_shift_px = " << jitter_max_shift_px << "\n";
    os << "vqae.downsample_factor = " << vqae_downsample_factor << "\n";
    os << "vqae.codebook_size = " << vqae_codebook_size << "\n";
    os << "vqae.channels = " << vqae_channels << "\n";
    os << "vqae.commitment_beta = " << vqae_commitment_beta << "\n";
    os << "dit.patch_size = " << dit_patch_size << "\n";
    os << "dit.depth = " << dit_depth << "\n";
    os << "dit.heads = " << dit_heads << "\n";
    os << "dit.hidden_dim = " << dit_hidden_dim << "\n";
    os << "schedule.num_steps = " << schedule_num_steps << "\n";
    os << "schedule.beta_start = " << schedule_beta_start << "\n";
    os << "schedule.beta_end = " << schedule_beta_end << "\n";
    os << "sampler.kind = " << sampler_kind << "\n";
    os << "sampler.num_inference_steps = " << sampler_num_inference_steps << "\n";
    os << "sampler.eta = " << sampler_eta << "\n";
    os << "train.learning_rate = " << train_learning_rate << "\n";
    os << "train.color_jitter = " << train_color_jitter << "\n";
    os << "train.batch_size = " << train_batch_size << "\n";
    os << "train.vqae_steps = " << train_vqae_steps << "\n";
    os << "train.dit_steps = " << train_dit_steps << "\n";
    os << "train.checkpoint_every_steps = " << train_checkpoint_every_steps << "\n";
    os << "train.eval_every_steps = " << train_eval_every_steps << "\n";
    os << "synthesis.evolving_reference = " << (synthesis_evolving_reference ? "true" : "false") << "\n";
    os << "synthesis.reference_latent = " << synthesis_reference_latent << "\n";
    os << "paths.data_dir = " << data_dir << "\n";
    os << "paths.checkpoint_dir = " << checkpoint_dir << "\n";
    os << "paths.output_dir = " << output_dir << "\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// checkpoint container: little-endian, 8-byte magic, versioned, named arrays
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[8] = {'D', 'I', 'T', 'H', 'E', 'A', 'D', '1'};
constexpr uint32_t kCheckpointVersion = 1;

enum class ArrayType : uint8_t { f32 = 0, f64 = 1, i64 = 2 };

struct CheckpointArray {
  ArrayType dtype = ArrayType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;
};

namespace io_detail {

template <typename T>
constexpr ArrayType dtype_of();
template <>
constexpr ArrayType dtype_of<float>() {
  return ArrayType::f32;
}
template <>
constexpr ArrayType dtype_of<double>() {
  return ArrayType::f64;
}
template <>
constexpr ArrayType dtype_of<int64_t>() {
  return ArrayType::i64;
}

inline size_t dtype_size(ArrayType t) {
  switch (t) {
    case ArrayType::f32: return 4;
    case ArrayType::f64: return 8;
    case ArrayType::i64: return 8;
  }
  throw IoError("checkpoint: unknown dtype");
}

template <typename T>
void write_le(std::ostream& os, T v) {
  // the build targets little-endian hosts; raw write keeps the format exact
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace io_detail

class Checkpoint {
 public:
  uint64_t step = 0;
  std::string rng_state;
  std::string config_text;

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t) {
    CheckpointArray a;
    a.dtype = io_detail::dtype_of<T>();
    a.shape = t.shape();
    a.bytes.resize(static_cast<size_t>(t.numel()) * sizeof(T));
    std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
    add_array(name, std::move(a));
  }

  template <typename T>
  void add_values(const std::string& name, const std::vector<T>& v) {
    CheckpointArray a;
    a.dtype = io_detail::dtype_of<T>();
    a.shape = {static_cast<int>(std::max<size_t>(v.size(), 1))};
    if (v.empty()) a.shape = {1};
    a.bytes.resize(std::max<size_t>(v.size(), 1) * sizeof(T));
    std::memset(a.bytes.data(), 0, a.bytes.size());
    if (!v.empty()) std::memcpy(a.bytes.data(), v.data(), v.size() * sizeof(T));
    add_array(name, std::move(a));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const CheckpointArray& array(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint: missing array '" + name + "'");
    return arrays_[it->second].second;
  }

  // converts dtype if the stored precision differs
  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const CheckpointArray& a = array(name);
    int64_t n = shape_numel(a.shape);
    std::vector<T> data(static_cast<size_t>(n));
    if (a.dtype == ArrayType::f32) {
      const float* p = reinterpret_cast<const float*>(a.bytes.data());
      for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(p[i]);
    } else if (a.dtype == ArrayType::f64) {
      const double* p = reinterpret_cast<const double*>(a.bytes.data());
      for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(p[i]);
    } else {
      throw IoError("checkpoint: array '" + name + "' is not floating point");
    }
    return Tensor<T>::from_data(a.shape, std::move(data));
  }

  template <typename T>
  std::vector<T> values(const std::string& name, size_t expected = SIZE_MAX) const {
    const CheckpointArray& a = array(name);
    if (a.dtype != io_detail::dtype_of<T>()) throw IoError("checkpoint: dtype mismatch for '" + name + "'");
    size_t n = a.bytes.size() / sizeof(T);
    std::vector<T> v(n);
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    if (expected != SIZE_MAX) v.resize(expected);
    return v;
  }

  const std::vector<std::pair<std::string, CheckpointArray>>& arrays() const { return arrays_; }

  void save(const fs::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, 8);
    io_detail::write_le(os, kCheckpointVersion);
    io_detail::write_le(os, step);
    io_detail::write_le(os, static_cast<uint32_t>(rng_state.size()));
    os.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
    io_detail::write_le(os, static_cast<uint64_t>(config_text.size()));
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    io_detail::write_le(os, static_cast<uint32_t>(arrays_.size()));
    for (const auto& [name, a] : arrays_) {
      io_detail::write_le(os, static_cast<uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io_detail::write_le(os, static_cast<uint8_t>(a.dtype));
      io_detail::write_le(os, static_cast<uint8_t>(a.shape.size()));
      for (int d : a.shape) io_detail::write_le(os, static_cast<uint32_t>(d));
      io_detail::write_le(os, static_cast<uint64_t>(a.bytes.size()));
      os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    }
    if (!os) throw IoError("short write to " + path.string());
  }

  static Checkpoint load(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
      throw IoError(path.string() + ": bad checkpoint magic");
    uint32_t version = io_detail::read_le<uint32_t>(is);
    if (version != kCheckpointVersion)
      throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.step = io_detail::read_le<uint64_t>(is);
    uint32_t rng_len = io_detail::read_le<uint32_t>(is);
    if (rng_len > (1u << 20)) throw IoError(path.string() + ": corrupt rng state length");
    ck.rng_state.resize(rng_len);
    is.read(ck.rng_state.data(), rng_len);
    uint64_t cfg_len = io_detail::read_le<uint64_t>(is);
    if (cfg_len > (1ull << 24)) throw IoError(path.string() + ": corrupt config length");
    ck.config_text.resize(cfg_len);
    is.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len));
    uint32_t n = io_detail::read_le<uint32_t>(is);
    if (n > (1u << 20)) throw IoError(path.string() + ": corrupt array count");
    for (uint32_t i = 0; i < n; ++i) {
      uint16_t name_len = io_detail::read_le<uint16_t>(is);
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      CheckpointArray a;
      uint8_t dtype = io_detail::read_le<uint8_t>(is);
      if (dtype > 2) throw IoError(path.string() + ": unknown array dtype");
      a.dtype = static_cast<ArrayType>(dtype);
      uint8_t ndim = io_detail::read_le<uint8_t>(is);
      if (ndim > 8) throw IoError(path.string() + ": corrupt array rank");
      int64_t numel = 1;
      for (uint8_t d = 0; d < ndim; ++d) {
        uint32_t dim = io_detail::read_le<uint32_t>(is);
        if (dim == 0 || dim > (1u << 28)) throw IoError(path.string() + ": corrupt array dim");
        a.shape.push_back(static_cast<int>(dim));
        numel *= dim;
      }
      uint64_t byte_len = io_detail::read_le<uint64_t>(is);
      if (byte_len != static_cast<uint64_t>(numel) * io_detail::dtype_size(a.dtype))
        throw IoError(path.string() + ": array byte length mismatch for '" + name + "'");
      a.bytes.resize(byte_len);
      is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(byte_len));
      if (!is) throw IoError(path.string() + ": truncated array data");
      ck.add_array(name, std::move(a));
    }
    return ck;
  }

 private:
  void add_array(const std::string& name, CheckpointArray a) {
    if (index_.count(name)) throw IoError("checkpoint: duplicate array '" + name + "'");
    index_[name] = arrays_.size();
    arrays_.emplace_back(name, std::move(a));
  }

  std::vector<std::pair<std::string, CheckpointArray>> arrays_;
  std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

struct LoadedIdentity {
  std::string name;
  std::vector<Image> frames;
  std::vector<std::vector<Point2>> landmarks;
  AudioTrack audio;
  std::vector<float> envelope;
};

struct LoadedDataset {
  uint64_t seed = 0;
  int image_size_px = 0;
  int frames_per_identity = 0;
  std::vector<LoadedIdentity> train;
  std::vector<LoadedIdentity> heldout;
};

inline std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.ppm", index);
  return buf;
}

inline void write_envelope_file(const fs::path& path, const std::vector<float>& env) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  char buf[64];
  for (float v : env) {
    std::snprintf(buf, sizeof(buf), "%.9g\n", static_cast<double>(v));
    os << buf;
  }
}

inline std::vector<float> read_envelope_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<float> env;
  double v;
  while (is >> v) env.push_back(static_cast<float>(v));
  if (env.empty()) throw IoError(path.string() + ": empty envelope file");
  return env;
}

}  // namespace dithead
