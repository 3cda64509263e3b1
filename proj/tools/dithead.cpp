// Command-line front end: synthetic dataset generation, the two training
// stages, video synthesis and evaluation.

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dithead/dataset.hpp"
#include "dithead/pipeline.hpp"

namespace {

using namespace dithead;

struct CliArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out_dir;
  std::string data_dir;
  std::string vqae_checkpoint;
  std::string dit_checkpoint;
  std::string resume_path;
  std::string identity_dir;
  std::string audio_path;
  std::string generated_dir;
  std::string reference_dir;
  std::string envelope_path;
  std::optional<int> steps;
  std::optional<double> eta;
  std::optional<int> frames;
  bool interp2x = false;
};

RunConfig load_config(const CliArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig() : RunConfig::from_file(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  if (!args.data_dir.empty()) cfg.data_dir = args.data_dir;
  if (args.eta) cfg.sampler_eta = *args.eta;
  cfg.validate();
  return cfg;
}

std::ofstream open_loss_log(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot open loss log " + path.string());
  return os;
}

int cmd_gen_data(const CliArgs& args) {
  RunConfig cfg = load_config(args);
  fs::path out = args.out_dir.empty() ? fs::path(cfg.data_dir) : fs::path(args.out_dir);
  write_dataset(out, cfg);
  std::cout << "dataset written to " << out.string() << " (" << cfg.num_train_identities << " train + "
            << cfg.num_heldout_identities << " held-out identities, " << cfg.frames_per_identity
            << " frames each)\n";
  return 0;
}

template <typename T>
int cmd_train_vqae(const CliArgs& args) {
  RunConfig cfg = load_config(args);
  fs::path data = args.data_dir.empty() ? fs::path(cfg.data_dir) : fs::path(args.data_dir);
  LoadedDataset dataset = load_dataset(data);
  fs::path ckpt_dir = args.out_dir.empty() ? fs::path(cfg.checkpoint_dir) : fs::path(args.out_dir);
  fs::create_directories(ckpt_dir);

  VqaeTrainState<T> st;
  if (!args.resume_path.empty())
    st = vqae_state_from_checkpoint<T>(Checkpoint::load(args.resume_path));
  else
    st = make_vqae_train_state<T>(cfg);

  std::ofstream loss_log = open_loss_log(ckpt_dir / "vqae_loss.log");
  TrainCallbacks cb;
  cb.on_step = [&](int64_t step, float loss) {
    loss_log << step << " " << loss << "\n";
    if (step % 100 == 0) {
      loss_log.flush();
      std::cout << "vqae step " << step << " loss " << loss << std::endl;
    }
  };
  cb.on_checkpoint = [&](int64_t step) {
    Checkpoint ck = vqae_state_to_checkpoint(st, cfg);
    ck.save(ckpt_dir / ("vqae_step_" + std::to_string(step) + ".ckpt"));
  };
  int64_t target = args.steps ? *args.steps : cfg.train_vqae_steps;
  train_vqae(st, dataset, cfg, target, cb);
  Checkpoint final_ck = vqae_state_to_checkpoint(st, cfg);
  final_ck.save(ckpt_dir / "vqae.ckpt");

  std::vector<const Image*> sample;
  for (const auto& id : dataset.train)
    for (size_t i = 0; i < id.frames.size(); i += 16) sample.push_back(&id.frames[i]);
  std::cout << "vqae training done at step " << st.step << ", reconstruction psnr "
            << vqae_reconstruction_psnr(st.gt, sample) << " dB\n";
  return 0;
}

template <typename T>
int cmd_train_dit(const CliArgs& args) {
  RunConfig cfg = load_config(args);
  fs::path data = args.data_dir.empty() ? fs::path(cfg.data_dir) : fs::path(args.data_dir);
  fs::path ckpt_dir = args.out_dir.empty() ? fs::path(cfg.checkpoint_dir) : fs::path(args.out_dir);
  fs::path vqae_path = args.vqae_checkpoint.empty() ? ckpt_dir / "vqae.ckpt" : fs::path(args.vqae_checkpoint);
  require_stage1_checkpoint(vqae_path);
  LoadedDataset dataset = load_dataset(data);
  fs::create_directories(ckpt_dir);

  VqaeTrainState<T> vqae_st = vqae_state_from_checkpoint<T>(Checkpoint::load(vqae_path));
  freeze_params(vqae_st.gt);
  freeze_params(vqae_st.masked);

  DitTrainState<T> st;
  if (!args.resume_path.empty())
    st = dit_state_from_checkpoint<T>(Checkpoint::load(args.resume_path));
  else
    st = make_dit_train_state<T>(cfg);
  if (st.frozen_vqae_checksum == 0)
    st.frozen_vqae_checksum = params_checksum(vqae_st.gt) ^ (params_checksum(vqae_st.masked) << 1);

  std::ofstream loss_log = open_loss_log(ckpt_dir / "dit_loss.log");
  TrainCallbacks cb;
  cb.on_step = [&](int64_t step, float loss) {
    loss_log << step << " " << loss << "\n";
    if (step % 100 == 0) {
      loss_log.flush();
      std::cout << "dit step " << step << " loss " << loss << std::endl;
    }
  };
  cb.on_checkpoint = [&](int64_t step) {
    Checkpoint ck = dit_state_to_checkpoint(st, cfg);
    ck.save(ckpt_dir / ("dit_step_" + std::to_string(step) + ".ckpt"));
  };
  int64_t target = args.steps ? *args.steps : cfg.train_dit_steps;
  train_dit(st, dataset, cfg, vqae_st.gt, vqae_st.masked, target, cb);
  Checkpoint final_ck = dit_state_to_checkpoint(st, cfg);
  final_ck.save(ckpt_dir / "dit.ckpt");

  uint64_t checksum_after = params_checksum(vqae_st.gt) ^ (params_checksum(vqae_st.masked) << 1);
  std::cout << "dit training done at step " << st.step << ", frozen autoencoder checksum "
            << (checksum_after == st.frozen_vqae_checksum ? "intact" : "CHANGED") << "\n";
  return checksum_after == st.frozen_vqae_checksum ? 0 : 1;
}

template <typename T>
int cmd_synthesize(const CliArgs& args) {
  RunConfig cfg = load_config(args);
  if (args.steps) {
    cfg.sampler_num_inference_steps = *args.steps;  // --steps picks the sampler step count here
    cfg.validate();
  }
  fs::path ckpt_dir(cfg.checkpoint_dir);
  fs::path vqae_path = args.vqae_checkpoint.empty() ? ckpt_dir / "vqae.ckpt" : fs::path(args.vqae_checkpoint);
  fs::path dit_path = args.dit_checkpoint.empty() ? ckpt_dir / "dit.ckpt" : fs::path(args.dit_checkpoint);
  if (!fs::exists(vqae_path)) throw IoError("missing autoencoder checkpoint " + vqae_path.string());
  if (!fs::exists(dit_path)) throw IoError("missing denoiser checkpoint " + dit_path.string());
  if (args.identity_dir.empty()) throw ParameterError("synthesize: --identity is required");

  VqaeTrainState<T> vqae_st = vqae_state_from_checkpoint<T>(Checkpoint::load(vqae_path));
  DitTrainState<T> dit_st = dit_state_from_checkpoint<T>(Checkpoint::load(dit_path));
  freeze_params(vqae_st.gt);
  freeze_params(vqae_st.masked);

  PipelineModels<T> models;
  models.vqae_gt = std::move(vqae_st.gt);
  models.vqae_mask = std::move(vqae_st.masked);
  models.dit = std::move(dit_st.dit);
  models.schedule = dit_st.schedule;

  // identity frames come from the dataset directory layout
  fs::path id_dir(args.identity_dir);
  std::vector<std::vector<Point2>> landmarks = read_landmark_table(id_dir / "landmarks.txt");
  LoadedIdentity identity;
  identity.name = id_dir.filename().string();
  identity.landmarks = std::move(landmarks);
  for (int i = 0; i < static_cast<int>(identity.landmarks.size()); ++i)
    identity.frames.push_back(read_ppm(id_dir / "frames" / frame_filename(i)));

  AudioTrack audio = args.audio_path.empty() ? read_audio_feature_table(id_dir / "audio_features.txt")
                                             : read_audio_feature_table(args.audio_path);

  SynthesisJob<T> job;
  job.identity = &identity;
  job.num_frames = args.frames ? *args.frames
                               : std::min<int>(audio.num_frames, static_cast<int>(identity.frames.size()));
  if (audio.num_frames > job.num_frames) {
    audio.num_frames = job.num_frames;
    audio.features.resize(static_cast<size_t>(job.num_frames) * audio.feature_dim);
  }
  job.audio = std::move(audio);
  job.sampler.kind = cfg.sampler_kind == "ddim" ? SamplerKind::ddim : SamplerKind::ddpm;
  job.sampler.num_inference_steps = cfg.sampler_num_inference_steps;
  job.sampler.eta = cfg.sampler_eta;
  job.mask_kernel = cfg.mask_kernel_size_px;
  job.mask_sigma = cfg.mask_sigma_px;
  job.evolving_reference = cfg.synthesis_evolving_reference;
  job.reference_latent_mode = cfg.synthesis_reference_latent;
  job.seed = cfg.seed;
  job.reference_frame_index =
      std::min<int>(static_cast<int>(identity.frames.size()) - 1, job.num_frames - 1 + kReferenceMinGap);

  SynthesisResult<T> result = synthesize_video(job, models);

  fs::path out = args.out_dir.empty() ? fs::path(cfg.output_dir) : fs::path(args.out_dir);
  fs::create_directories(out);
  for (size_t i = 0; i < result.frames.size(); ++i)
    write_ppm(out / frame_filename(static_cast<int>(i)), result.frames[i]);
  if (args.interp2x) {
    std::vector<Image> interp = interpolate_2x(result.frames);
    fs::create_directories(out / "interp2x");
    for (size_t i = 0; i < interp.size(); ++i)
      write_ppm(out / "interp2x" / frame_filename(static_cast<int>(i)), interp[i]);
  }
  std::ofstream manifest(out / "manifest.txt");
  manifest << "seed = " << job.seed << "\n";
  manifest << "sampler.kind = " << cfg.sampler_kind << "\n";
  manifest << "sampler.num_inference_steps = " << job.sampler.num_inference_steps << "\n";
  manifest << "sampler.eta = " << job.sampler.eta << "\n";
  manifest << "synthesis.evolving_reference = " << (job.evolving_reference ? "true" : "false") << "\n";
  manifest << "synthesis.reference_latent = " << job.reference_latent_mode << "\n";
  manifest << "frames = " << job.num_frames << "\n";
  manifest << "interp2x = " << (args.interp2x ? "true" : "false") << "\n";
  manifest << "identity = " << identity.name << "\n";
  std::cout << "synthesized " << result.frames.size() << " frames into " << out.string() << "\n";
  return 0;
}

std::vector<Image> read_frame_dir(const fs::path& dir) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".ppm") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  std::vector<Image> frames;
  for (const auto& p : paths) frames.push_back(read_ppm(p));
  if (frames.empty()) throw IoError("no .ppm frames under " + dir.string());
  return frames;
}

int cmd_eval(const CliArgs& args) {
  if (args.generated_dir.empty() || args.reference_dir.empty())
    throw ParameterError("eval: --generated and --reference are required");
  std::vector<Image> generated = read_frame_dir(args.generated_dir);
  std::vector<Image> reference = read_frame_dir(args.reference_dir);
  if (generated.size() != reference.size())
    throw ValidationError("eval: generated has " + std::to_string(generated.size()) + " frames, reference has " +
                          std::to_string(reference.size()));
  std::vector<float> envelope;
  if (!args.envelope_path.empty()) {
    envelope = read_envelope_file(args.envelope_path);
    if (envelope.size() != generated.size())
      throw ValidationError("eval: envelope length does not match frame count");
  }
  MetricReport rep = evaluate_frames(generated, reference, envelope.empty() ? nullptr : &envelope, 2.0);
  fs::path out = args.out_dir.empty() ? fs::path(args.generated_dir) : fs::path(args.out_dir);
  fs::create_directories(out);
  {
    std::ofstream os(out / "report.txt");
    write_report(os, rep);
  }
  {
    std::ofstream os(out / "per_frame.csv");
    write_per_frame_table(os, rep);
  }
  std::cout << "mean psnr " << rep.mean_psnr << " dB, mean ssim " << rep.mean_ssim;
  if (rep.has_lip_sync) std::cout << ", lip-sync r " << rep.lip_sync;
  std::cout << "\n";
  return 0;
}

bool use_f64() {
  const char* p = std::getenv("DITHEAD_PRECISION");
  if (p == nullptr) return false;
  std::string s(p);
  if (s == "f64") return true;
  if (s == "f32" || s.empty()) return false;
  throw ParameterError("DITHEAD_PRECISION must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"audio-driven talking head pipeline on synthetic data"};
  app.require_subcommand(1);
  CliArgs args;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out_dir, "output directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen);

  CLI::App* tv = app.add_subcommand("train-vqae", "stage 1: train both autoencoders");
  add_common(tv);
  tv->add_option("--data", args.data_dir, "dataset directory");
  tv->add_option("--steps", args.steps, "train to this step count");
  tv->add_option("--resume", args.resume_path, "resume from a checkpoint");

  CLI::App* td = app.add_subcommand("train-dit", "stage 2: train the denoiser");
  add_common(td);
  td->add_option("--data", args.data_dir, "dataset directory");
  td->add_option("--vqae", args.vqae_checkpoint, "stage-1 checkpoint");
  td->add_option("--steps", args.steps, "train to this step count");
  td->add_option("--resume", args.resume_path, "resume from a checkpoint");

  CLI::App* sy = app.add_subcommand("synthesize", "generate a talking-head clip");
  add_common(sy);
  sy->add_option("--vqae", args.vqae_checkpoint, "stage-1 checkpoint");
  sy->add_option("--dit", args.dit_checkpoint, "stage-2 checkpoint");
  sy->add_option("--identity", args.identity_dir, "identity directory (frames + landmarks)")->required();
  sy->add_option("--audio", args.audio_path, "driving audio feature table (defaults to the identity's)");
  sy->add_option("--steps", args.steps, "sampler steps");
  sy->add_option("--eta", args.eta, "sampler stochasticity in [0,1]");
  sy->add_option("--frames", args.frames, "number of frames to synthesize");
  sy->add_flag("--interp2x", args.interp2x, "also write 2x frame-interpolated output");

  CLI::App* ev = app.add_subcommand("eval", "score generated frames against references");
  ev->add_option("--generated", args.generated_dir, "generated frame directory")->required();
  ev->add_option("--reference", args.reference_dir, "reference frame directory")->required();
  ev->add_option("--envelope", args.envelope_path, "driving envelope for the lip-sync score");
  ev->add_option("--out", args.out_dir, "report directory");

  CLI11_PARSE(app, argc, argv);

  try {
    bool f64 = use_f64();
    if (gen->parsed()) return cmd_gen_data(args);
    if (tv->parsed()) return f64 ? cmd_train_vqae<double>(args) : cmd_train_vqae<float>(args);
    if (td->parsed()) return f64 ? cmd_train_dit<double>(args) : cmd_train_dit<float>(args);
    if (sy->parsed()) return f64 ? cmd_synthesize<double>(args) : cmd_synthesize<float>(args);
    if (ev->parsed()) return cmd_eval(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
