// Copyright (c) 2026 The bkd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// bkd: command-line front end for training, distilling, sampling and
// analysing block-removed diffusion U-Nets.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bkd/bkd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bkd::cli {

enum Exit { kOk = 0, kConfig = 2, kRuntime = 3, kNumerical = 4 };

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError(p.string() + ": file not found");
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void require_dir(const std::string& flag, const fs::path& p) {
  if (!fs::is_directory(p)) throw ConfigError(flag + ": directory not found: " + p.string());
}

/// Shared by every subcommand.
struct Common {
  std::string out = "out";
  std::uint64_t seed = 0;
  int threads = 1;
  std::string verbosity = "info";
  std::string run_config;
  CLI::Option* out_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* app, Common& c) {
  c.out_opt = app->add_option("-o,--out", c.out, "Output directory (BKD_OUT when not given)")->capture_default_str();
  c.seed_opt = app->add_option("--seed", c.seed, "Root random seed")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads for parallel analyses")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--verbosity", c.verbosity, "Log verbosity")
      ->capture_default_str()
      ->check(CLI::IsMember({"quiet", "info", "debug"}));
  app->add_option("--run-config", c.run_config, "JSON object of flag values; explicit flags take precedence");
}

fs::path resolve_out(const Common& c) {
  if (c.out_opt->count() == 0) {
    if (const char* env = std::getenv("BKD_OUT"); env && *env) return env;
  }
  return c.out;
}

class Logger {
 public:
  explicit Logger(const std::string& level) : level_(level == "quiet" ? 0 : level == "info" ? 1 : 2) {}
  bool info() const { return level_ >= 1; }
  bool debug() const { return level_ >= 2; }

 private:
  int level_;
};

void write_run_record(const fs::path& out, const std::string& command, const Common& c, const json& resolved) {
  json r;
  r["command"] = command;
  r["version"] = kVersion;
  r["seed"] = c.seed;
  r["threads"] = c.threads;
  r["config"] = resolved;
  r["config_hash"] = hex(detail::fnv1a(resolved.dump()));
  r["libraries"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                  std::to_string(EIGEN_MINOR_VERSION)},
                    {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                    {"png", png_supported()}};
  write_file(out / "run.json", r.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared loaders

UNetConfig builtin_config(const std::string& name) {
  if (name == "fullsize_v1") return sdm_v1_config();
  if (name == "fullsize_v2") return sdm_v2_config();
  if (name == "toy") return toy_config();
  throw ConfigError("unknown model config '" + name + "'");
}

/// A JSON file, or one of the built-in names (with or without .json).
UNetConfig load_model_config(const std::string& spec) {
  if (fs::exists(spec)) return config_from_json(read_json(spec));
  const std::string stem = fs::path(spec).stem().string();
  if (stem == "fullsize_v1" || stem == "fullsize_v2" || stem == "toy") return builtin_config(stem);
  throw ConfigError("--config: no such file and not a built-in config: " + spec);
}

struct Loaded {
  Model<float> model;
  TextEncoder<float> encoder;
  std::optional<DatasetManifest> manifest;
};

Loaded load_checkpoint(const std::string& flag, const fs::path& dir) {
  require_dir(flag, dir);
  for (const char* f : {"model.bkd", "text_encoder.bkd"}) {
    if (!fs::exists(dir / f)) throw ConfigError(flag + ": " + (dir / f).string() + " not found");
  }
  Loaded l{load_model(read_archive(dir / "model.bkd")), text_encoder_from_archive(read_archive(dir / "text_encoder.bkd")),
           std::nullopt};
  if (fs::exists(dir / "data_manifest.json")) l.manifest = manifest_from_json(read_json(dir / "data_manifest.json"));
  return l;
}

/// A dataset directory (with manifest.json) or a manifest JSON file.
Dataset load_data(const std::string& spec, const std::optional<DatasetManifest>& fallback) {
  if (spec.empty()) {
    if (!fallback) return generate_synthetic(DatasetManifest{});
    return dataset_from_manifest(*fallback);
  }
  if (fs::is_directory(spec)) {
    if (!fs::exists(fs::path(spec) / "manifest.json")) throw ConfigError("--data: " + spec + " has no manifest.json");
    return load_dataset(spec);
  }
  return dataset_from_manifest(manifest_from_json(read_json(spec)));
}

/// Manifest that regenerates `d` (folder datasets point at their directory).
DatasetManifest portable_manifest(const Dataset& d, const std::string& spec) {
  DatasetManifest m = d.manifest;
  if (!spec.empty() && fs::is_directory(spec)) {
    m.source = "folder";
    m.folder = fs::absolute(spec).string();
    m.caption_file = "captions.tsv";
  }
  return m;
}

std::pair<int, int> parse_hw(const std::string& flag, const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError(flag + ": expected HxW, got '" + s + "'");
  }
}

// ---------------------------------------------------------------------------
// Training flags

struct TrainFlags {
  std::string train_config, data, resume;
  int iterations = 0, batch_size = 0, grad_accum = 0, eval_every = 0, eval_size = 0, checkpoint_every = 0;
  double lr = 0, weight_decay = 0, cond_dropout = 0;
  std::vector<CLI::Option*> opts;
  CLI::Option *it_o, *bs_o, *ga_o, *ee_o, *es_o, *lr_o, *wd_o, *cd_o;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--train-config", f.train_config, "TrainConfig JSON file");
  app->add_option("--data", f.data, "Dataset directory or manifest JSON");
  app->add_option("--resume", f.resume, "Checkpoint directory to resume from");
  f.it_o = app->add_option("--iterations", f.iterations, "Optimizer steps");
  f.bs_o = app->add_option("--batch-size", f.batch_size, "Samples per micro-batch");
  f.ga_o = app->add_option("--grad-accum", f.grad_accum, "Micro-batches per optimizer step");
  f.lr_o = app->add_option("--lr", f.lr, "AdamW learning rate");
  f.wd_o = app->add_option("--weight-decay", f.weight_decay, "AdamW decoupled weight decay");
  f.cd_o = app->add_option("--cond-dropout", f.cond_dropout, "Caption dropout probability");
  f.ee_o = app->add_option("--eval-every", f.eval_every, "Iterations between evaluations");
  f.es_o = app->add_option("--eval-size", f.eval_size, "Held-out samples per evaluation");
  app->add_option("--checkpoint-every", f.checkpoint_every, "Iterations between checkpoints (0: end only)");
}

TrainConfig resolve_train(const TrainFlags& f, const Common& c) {
  TrainConfig tc;
  if (!f.train_config.empty()) tc = train_config_from_json(read_json(f.train_config));
  if (f.it_o->count()) tc.iterations = f.iterations;
  if (f.bs_o->count()) tc.batch_size = f.batch_size;
  if (f.ga_o->count()) tc.grad_accum_steps = f.grad_accum;
  if (f.lr_o->count()) tc.learning_rate = f.lr;
  if (f.wd_o->count()) tc.weight_decay = f.weight_decay;
  if (f.cd_o->count()) tc.cond_dropout = f.cond_dropout;
  if (f.ee_o->count()) tc.eval_every = f.eval_every;
  if (f.es_o->count()) tc.eval_size = f.eval_size;
  if (c.seed_opt->count() || f.train_config.empty()) tc.seed = c.seed;
  return tc;
}

TrainHooks make_hooks(const TrainFlags& f, const fs::path& out, const Logger& log) {
  TrainHooks h;
  h.checkpoint_dir = out / "checkpoint";
  h.checkpoint_every = f.checkpoint_every;
  if (!f.resume.empty()) {
    require_dir("--resume", f.resume);
    h.resume_from = f.resume;
  }
  h.on_eval = [&log](const TrainRecord& r) {
    if (!log.info()) return;
    std::fprintf(stderr, "[%d] total %.6g task %.6g eval_loss %.6g", r.iteration, r.total, r.task, r.eval_denoise_loss);
    if (!std::isnan(r.eval_teacher_mse)) std::fprintf(stderr, " teacher_mse %.6g", r.eval_teacher_mse);
    std::fprintf(stderr, "\n");
  };
  h.on_step = [&log](int it, const LossBreakdown& b) {
    if (log.debug()) std::fprintf(stderr, "step %d total %.6g\n", it, b.total);
  };
  return h;
}

void write_train_outputs(const fs::path& out, const TrainResult& r, const DatasetManifest& m) {
  write_file(out / "train_log.csv", r.log.to_csv());
  write_file(out / "train_log.json", r.log.to_json().dump(2) + "\n");
  write_file(out / "checkpoint" / "data_manifest.json", to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Sampling flags

struct SampleFlags {
  int steps = 25;
  double guidance = 7.5;
  std::string sampler = "ddim";
  double eta = 0.0;
  std::string size;
  bool no_clip = false;
};

void add_sample_flags(CLI::App* app, SampleFlags& f) {
  app->add_option("--steps", f.steps, "Denoising steps")->capture_default_str();
  app->add_option("--guidance", f.guidance, "Classifier-free guidance scale")->capture_default_str();
  app->add_option("--sampler", f.sampler, "Sampler")->capture_default_str()->check(CLI::IsMember({"ddim", "ddpm"}));
  app->add_option("--eta", f.eta, "DDIM stochasticity")->capture_default_str();
  app->add_option("--size", f.size, "Image size HxW (default: the training image size)");
  app->add_flag("--no-clip", f.no_clip, "Do not clamp x0 estimates to [-1, 1]");
}

SamplerConfig resolve_sampler(const SampleFlags& f, const Common& c) {
  SamplerConfig s;
  s.steps = f.steps;
  s.guidance_scale = f.guidance;
  s.sampler = f.sampler == "ddpm" ? SamplerKind::Ddpm : SamplerKind::Ddim;
  s.eta = f.eta;
  s.seed = c.seed;
  s.clip_denoised = !f.no_clip;
  return s;
}

/// Latent factor and image size for a checkpoint.
std::tuple<int, int, int> geometry(const SampleFlags& f, const Loaded& l) {
  const int k = l.manifest ? l.manifest->latent_factor : 1;
  int h = l.manifest ? l.manifest->image_size : 16, w = h;
  if (!f.size.empty()) std::tie(h, w) = parse_hw("--size", f.size);
  if (h <= 0 || w <= 0 || h % k || w % k) {
    throw ConfigError("--size: must be positive and divisible by the latent factor " + std::to_string(k));
  }
  return {k, h, w};
}

Tensor<float> contexts(const TextEncoder<float>& enc, const std::vector<std::string>& prompts, bool null) {
  std::vector<std::vector<int>> ids;
  for (const auto& p : prompts) ids.push_back(null ? enc.null_tokens() : enc.tokenize(p));
  return enc.encode(ids);
}

void write_images(const fs::path& dir, const Tensor<float>& latents, int k, bool grid) {
  const int n = latents.dim(0);
  const Tensor<float> imgs = decode_latent(latents, k);
  for (int i = 0; i < n; ++i) {
    const auto one = slice_batch(imgs, i, i + 1);
    char name[32];
    std::snprintf(name, sizeof name, "%03d.ppm", i);
    write_image(dir / name, tensor_to_image(one.reshaped({one.dim(1), one.dim(2), one.dim(3)})), true);
  }
  if (grid) write_image(dir / "grid.ppm", make_grid(imgs, 4), true);
}

// ---------------------------------------------------------------------------
// Commands

using Handler = std::function<int()>;

struct Cli {
  CLI::App app{"Block-removed, knowledge-distilled diffusion U-Nets", "bkd"};
  Handler handler;
  std::vector<CLI::App*> subs;
  std::vector<std::unique_ptr<Common>> commons;

  Common& common(CLI::App* s) {
    commons.push_back(std::make_unique<Common>());
    add_common(s, *commons.back());
    subs.push_back(s);
    return *commons.back();
  }
};

void cmd_gen_data(Cli& cli) {
  auto* s = cli.app.add_subcommand("gen-data", "Generate or ingest a captioned dataset");
  auto& c = cli.common(s);
  struct F {
    std::string config, source, folder, captions;
    int count = 0, image_size = 0, latent_factor = 0;
    double val_fraction = 0;
    bool flip = false;
  };
  auto f = std::make_shared<F>();
  s->add_option("--data-config", f->config, "DatasetManifest JSON file");
  auto* so = s->add_option("--source", f->source, "synthetic or folder")->check(CLI::IsMember({"synthetic", "folder"}));
  auto* fo = s->add_option("--folder", f->folder, "Image folder to ingest");
  auto* co = s->add_option("--captions", f->captions, "Caption TSV inside the folder");
  auto* no = s->add_option("--count", f->count, "Synthetic sample count");
  auto* io = s->add_option("--image-size", f->image_size, "Square image size");
  auto* lo = s->add_option("--latent-factor", f->latent_factor, "Average-pool factor of the latent codec");
  auto* vo = s->add_option("--val-fraction", f->val_fraction, "Held-out fraction");
  auto* ro = s->add_flag("--random-flip", f->flip, "Horizontal flip augmentation during training");
  cli.handler = nullptr;
  s->callback([&cli, &c, f, so, fo, co, no, io, lo, vo, ro] {
    cli.handler = [&c, f, so, fo, co, no, io, lo, vo, ro] {
      json j = f->config.empty() ? to_json(DatasetManifest{}) : read_json(f->config);
      if (so->count()) j["source"] = f->source;
      if (fo->count()) j["folder"] = f->folder;
      if (co->count()) j["caption_file"] = f->captions;
      if (no->count()) j["count"] = f->count;
      if (io->count()) j["image_size"] = f->image_size;
      if (lo->count()) j["latent_factor"] = f->latent_factor;
      if (vo->count()) j["val_fraction"] = f->val_fraction;
      if (ro->count()) j["random_flip"] = f->flip;
      if (c.seed_opt->count()) j["seed"] = c.seed;
      const DatasetManifest m = manifest_from_json(j);
      const Dataset d = dataset_from_manifest(m);
      const fs::path out = resolve_out(c);
      write_dataset(out, d);
      for (const auto& w : d.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      write_run_record(out, "gen-data", c, {{"manifest", to_json(m)}});
      Logger log(c.verbosity);
      if (log.info()) std::printf("wrote %zu records to %s\n", d.records.size(), out.string().c_str());
      return kOk;
    };
  });
}

void cmd_train_teacher(Cli& cli) {
  auto* s = cli.app.add_subcommand("train-teacher", "Pretrain a teacher U-Net on a dataset");
  auto& c = cli.common(s);
  auto f = std::make_shared<TrainFlags>();
  auto model = std::make_shared<std::string>("toy");
  s->add_option("--config", *model, "Model config JSON or built-in name")->capture_default_str();
  add_train_flags(s, *f);
  s->callback([&cli, &c, f, model] {
    cli.handler = [&c, f, model] {
      const Logger log(c.verbosity);
      const UNetConfig cfg = load_model_config(*model);
      const TrainConfig tc = resolve_train(*f, c);
      validate(tc);
      const Dataset data = load_data(f->data, std::nullopt);
      const fs::path out = resolve_out(c);
      const json resolved = {{"model", to_json(cfg)}, {"train", to_json(tc)},
                             {"data", to_json(portable_manifest(data, f->data))}, {"resume", f->resume}};
      fs::create_directories(out);
      write_run_record(out, "train-teacher", c, resolved);
      const TrainResult r =
          train_teacher(cfg, data, tc, default_schedule(cfg.num_timesteps), make_hooks(*f, out, log));
      write_train_outputs(out, r, portable_manifest(data, f->data));
      if (log.info()) std::printf("teacher checkpoint: %s\n", (out / "checkpoint").string().c_str());
      return kOk;
    };
  });
}

void cmd_distill(Cli& cli) {
  auto* s = cli.app.add_subcommand("distill", "Compress a teacher and retrain the student with distillation");
  auto& c = cli.common(s);
  struct F {
    std::string teacher, preset = "base", plan, kd = "on", init = "teacher";
    double lambda_out = 0, lambda_feat = 0;
  };
  auto f = std::make_shared<F>();
  auto t = std::make_shared<TrainFlags>();
  s->add_option("--teacher", f->teacher, "Teacher checkpoint directory")->required();
  auto* po = s->add_option("--preset", f->preset, "Compression preset")
                 ->capture_default_str()
                 ->check(CLI::IsMember({"base", "small", "tiny"}));
  s->add_option("--plan", f->plan, "CompressionPlan JSON (overrides --preset)")->excludes(po);
  auto* ko = s->add_option("--kd", f->kd, "Distillation terms")->capture_default_str()->check(CLI::IsMember({"on", "off"}));
  auto* io = s->add_option("--init", f->init, "Student initialisation")
                 ->capture_default_str()
                 ->check(CLI::IsMember({"teacher", "random"}));
  auto* lo = s->add_option("--lambda-out", f->lambda_out, "Output-KD weight");
  auto* lf = s->add_option("--lambda-feat", f->lambda_feat, "Feature-KD weight");
  add_train_flags(s, *t);
  s->callback([&cli, &c, f, t, ko, io, lo, lf] {
    cli.handler = [&c, f, t, ko, io, lo, lf] {
      const Logger log(c.verbosity);
      const Loaded teacher = load_checkpoint("--teacher", f->teacher);
      TrainConfig tc = resolve_train(*t, c);
      if (ko->count() || t->train_config.empty()) tc.kd_enabled = f->kd == "on";
      if (io->count() || t->train_config.empty()) tc.init_mode = parse_init_mode(f->init);
      if (lo->count()) tc.loss_weights.lambda_out = f->lambda_out;
      if (lf->count()) tc.loss_weights.lambda_feat = f->lambda_feat;
      validate(tc);
      const CompressionPlan plan = f->plan.empty()
                                       ? preset_plan(parse_preset(f->preset), teacher.model.config())
                                       : plan_from_json(read_json(f->plan), teacher.model.config());
      const Dataset data = load_data(t->data, teacher.manifest);
      const fs::path out = resolve_out(c);
      const json resolved = {{"teacher", fs::absolute(f->teacher).string()},
                             {"teacher_hash", hex(detail::fnv1a(read_file(fs::path(f->teacher) / "model.bkd")))},
                             {"plan", to_json(plan)},
                             {"train", to_json(tc)},
                             {"data", to_json(portable_manifest(data, t->data))},
                             {"resume", t->resume}};
      fs::create_directories(out);
      write_run_record(out, "distill", c, resolved);
      const TrainResult r = distill_student(teacher.model, teacher.encoder, plan, data, tc,
                                            default_schedule(teacher.model.config().num_timesteps),
                                            make_hooks(*t, out, log));
      write_train_outputs(out, r, portable_manifest(data, t->data));
      write_file(out / "plan.json", to_json(plan).dump(2) + "\n");
      if (log.info()) {
        std::printf("student %lld params (teacher %lld)\n", static_cast<long long>(r.model.num_parameters()),
                    static_cast<long long>(teacher.model.num_parameters()));
      }
      return kOk;
    };
  });
}

void cmd_sample(Cli& cli) {
  auto* s = cli.app.add_subcommand("sample", "Generate images from text prompts");
  auto& c = cli.common(s);
  struct F {
    std::string checkpoint;
    std::vector<std::string> prompts;
    int num = 1;
    SampleFlags sf;
  };
  auto f = std::make_shared<F>();
  s->add_option("--checkpoint", f->checkpoint, "Checkpoint directory")->required();
  s->add_option("--prompt", f->prompts, "Prompt (repeatable)")->required();
  s->add_option("--num", f->num, "Images per prompt")->capture_default_str()->check(CLI::PositiveNumber);
  add_sample_flags(s, f->sf);
  s->callback([&cli, &c, f] {
    cli.handler = [&c, f] {
      const Loaded l = load_checkpoint("--checkpoint", f->checkpoint);
      const SamplerConfig sc = resolve_sampler(f->sf, c);
      const auto [k, h, w] = geometry(f->sf, l);
      std::vector<std::string> prompts;
      for (const auto& p : f->prompts) prompts.insert(prompts.end(), static_cast<std::size_t>(f->num), p);
      const fs::path out = resolve_out(c);
      fs::create_directories(out);
      write_run_record(out, "sample", c,
                       {{"checkpoint", fs::absolute(f->checkpoint).string()},
                        {"model_hash", hex(detail::fnv1a(read_file(fs::path(f->checkpoint) / "model.bkd")))},
                        {"prompts", prompts},
                        {"sampler", to_json(sc)},
                        {"height", h},
                        {"width", w}});
      const auto sched = default_schedule(l.model.config().num_timesteps);
      const auto z = sample(l.model, contexts(l.encoder, prompts, false), contexts(l.encoder, prompts, true), sc,
                            sched, h / k, w / k);
      write_images(out, z, k, true);
      if (Logger(c.verbosity).info()) std::printf("wrote %zu images to %s\n", prompts.size(), out.string().c_str());
      return kOk;
    };
  });
}

void cmd_img2img(Cli& cli) {
  auto* s = cli.app.add_subcommand("img2img", "Edit an image towards a prompt (partial noising and denoising)");
  auto& c = cli.common(s);
  struct F {
    std::string checkpoint, input, prompt;
    double strength = 0.8;
    SampleFlags sf;
  };
  auto f = std::make_shared<F>();
  s->add_option("--checkpoint", f->checkpoint, "Checkpoint directory")->required();
  s->add_option("--input", f->input, "Input image (PPM or PNG)")->required();
  s->add_option("--prompt", f->prompt, "Target prompt")->required();
  s->add_option("--strength", f->strength, "Noise strength in [0, 1]")->capture_default_str();
  add_sample_flags(s, f->sf);
  s->callback([&cli, &c, f] {
    cli.handler = [&c, f] {
      const Loaded l = load_checkpoint("--checkpoint", f->checkpoint);
      if (!fs::exists(f->input)) throw ConfigError("--input: file not found: " + f->input);
      if (!(f->strength >= 0 && f->strength <= 1)) throw ConfigError("--strength: must lie in [0, 1]");
      const SamplerConfig sc = resolve_sampler(f->sf, c);
      const auto [k, h, w] = geometry(f->sf, l);
      if (h != w) throw ConfigError("--size: img2img needs a square size");
      const Image img = resize_and_center_crop(read_image(f->input), h);
      Tensor<float> x = image_to_tensor(img);
      x = encode_latent(x.reshaped({1, 3, h, w}), k);
      const fs::path out = resolve_out(c);
      fs::create_directories(out);
      write_run_record(out, "img2img", c,
                       {{"checkpoint", fs::absolute(f->checkpoint).string()},
                        {"input_hash", hex(detail::fnv1a(read_file(f->input)))},
                        {"prompt", f->prompt},
                        {"strength", f->strength},
                        {"sampler", to_json(sc)}});
      const auto sched = default_schedule(l.model.config().num_timesteps);
      const auto z = sdedit(l.model, x, f->strength, contexts(l.encoder, {f->prompt}, false),
                            contexts(l.encoder, {f->prompt}, true), sc, sched);
      write_images(out, z, k, false);
      return kOk;
    };
  });
}

std::string millions(std::int64_t v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.1fM", v / 1e6);
  return b;
}

std::string giga(std::int64_t v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.1fG", v / 1e9);
  return b;
}

std::string pct(std::int64_t v, std::int64_t ref) {
  char b[32];
  std::snprintf(b, sizeof b, "%+.1f%%", 100.0 * (static_cast<double>(v) - ref) / ref);
  return b;
}

void cmd_profile(Cli& cli) {
  auto* s = cli.app.add_subcommand("profile", "Parameter and MAC accounting for a U-Net or a compressed student");
  auto& c = cli.common(s);
  struct F {
    std::string config = "toy", checkpoint, preset, plan, latent = "64x64";
    int steps = 25;
  };
  auto f = std::make_shared<F>();
  auto* co = s->add_option("--config", f->config, "Model config JSON or built-in name")->capture_default_str();
  s->add_option("--checkpoint", f->checkpoint, "Profile a checkpoint's model instead")->excludes(co);
  auto* po = s->add_option("--preset", f->preset, "Compression preset")->check(CLI::IsMember({"base", "small", "tiny"}));
  s->add_option("--plan", f->plan, "CompressionPlan JSON")->excludes(po);
  s->add_option("--latent", f->latent, "Latent resolution HxW")->capture_default_str();
  s->add_option("--steps", f->steps, "Denoising steps for the total")->capture_default_str()->check(CLI::PositiveNumber);
  s->callback([&cli, &c, f] {
    cli.handler = [&c, f] {
      const UNetConfig teacher = f->checkpoint.empty() ? load_model_config(f->config)
                                                       : load_checkpoint("--checkpoint", f->checkpoint).model.config();
      UNetConfig target = teacher;
      json plan_json = nullptr;
      if (!f->preset.empty() || !f->plan.empty()) {
        const CompressionPlan plan = f->plan.empty() ? preset_plan(parse_preset(f->preset), teacher)
                                                     : plan_from_json(read_json(f->plan), teacher);
        target = apply_plan(teacher, plan).student;
        plan_json = to_json(plan);
      }
      const auto [h, w] = parse_hw("--latent", f->latent);
      const ComputeReport base = count_macs(teacher, h, w, f->steps);
      const ComputeReport rep = count_macs(target, h, w, f->steps);
      const fs::path out = resolve_out(c);
      fs::create_directories(out);
      write_run_record(out, "profile", c,
                       {{"model", to_json(teacher)}, {"plan", plan_json}, {"latent", {h, w}}, {"steps", f->steps}});
      json j = to_json(rep);
      j["seed"] = c.seed;
      j["reference"] = {{"params", base.total_params}, {"macs", base.total_macs}};
      write_file(out / "profile.json", j.dump(2) + "\n");
      write_file(out / "profile.csv", to_csv(rep));
      std::printf("params %s (%lld)", millions(rep.total_params).c_str(), static_cast<long long>(rep.total_params));
      if (!plan_json.is_null()) std::printf(" %s vs %s", pct(rep.total_params, base.total_params).c_str(),
                                            millions(base.total_params).c_str());
      std::printf("\nmacs/step %s (%lld)", giga(rep.total_macs).c_str(), static_cast<long long>(rep.total_macs));
      if (!plan_json.is_null()) std::printf(" %s", pct(rep.total_macs, base.total_macs).c_str());
      std::printf("\nmacs x%d steps %s\n", f->steps, giga(rep.macs_all_steps()).c_str());
      return kOk;
    };
  });
}

void cmd_sensitivity(Cli& cli) {
  auto* s = cli.app.add_subcommand("sensitivity", "Score every removable block or group of a teacher");
  auto& c = cli.common(s);
  struct F {
    std::string checkpoint, data, granularity = "group";
    int eval_size = 64;
  };
  auto f = std::make_shared<F>();
  s->add_option("--checkpoint", f->checkpoint, "Teacher checkpoint directory")->required();
  s->add_option("--data", f->data, "Dataset directory or manifest JSON (default: the training data)");
  s->add_option("--granularity", f->granularity, "block or group")
      ->capture_default_str()
      ->check(CLI::IsMember({"block", "group"}));
  s->add_option("--eval-size", f->eval_size, "Held-out samples scored per probe")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  s->callback([&cli, &c, f] {
    cli.handler = [&c, f] {
      const Loaded l = load_checkpoint("--checkpoint", f->checkpoint);
      const Dataset data = load_data(f->data, l.manifest);
      const fs::path out = resolve_out(c);
      fs::create_directories(out);
      write_run_record(out, "sensitivity", c,
                       {{"checkpoint", fs::absolute(f->checkpoint).string()},
                        {"granularity", f->granularity},
                        {"eval_size", f->eval_size},
                        {"data", to_json(portable_manifest(data, f->data))}});
      const auto sched = default_schedule(l.model.config().num_timesteps);
      EvalSet e = make_eval_set(data, f->eval_size, sched, c.seed);
      attach_teacher(e, l.model, l.encoder);
      const auto rep = sensitivity_analysis(l.model, parse_granularity(f->granularity),
                                            default_metric(l.encoder, e), c.threads);
      json j = to_json(rep);
      j["seed"] = c.seed;
      write_file(out / "sensitivity.json", j.dump(2) + "\n");
      write_file(out / "sensitivity.csv", to_csv(rep));
      if (Logger(c.verbosity).info()) {
        for (const auto& r : rep.ranked("teacher_mse")) {
          if (r.error.empty()) {
            std::printf("%-12s %-14s teacher_mse %+.6g\n", r.target.c_str(), r.substitution.c_str(),
                        r.delta.at("teacher_mse"));
          } else {
            std::printf("%-12s error: %s\n", r.target.c_str(), r.error.c_str());
          }
        }
      }
      return kOk;
    };
  });
}

void cmd_attribution(Cli& cli) {
  auto* s = cli.app.add_subcommand("attribution", "Per-word cross-attention maps for a prompt");
  auto& c = cli.common(s);
  struct F {
    std::string checkpoint, compare, prompt;
    SampleFlags sf;
  };
  auto f = std::make_shared<F>();
  s->add_option("--checkpoint", f->checkpoint, "Checkpoint directory")->required();
  s->add_option("--compare", f->compare, "Second checkpoint; reports per-word map similarity");
  s->add_option("--prompt", f->prompt, "Prompt")->required();
  add_sample_flags(s, f->sf);
  s->callback([&cli, &c, f] {
    cli.handler = [&c, f] {
      const Loaded l = load_checkpoint("--checkpoint", f->checkpoint);
      std::optional<Loaded> other;
      if (!f->compare.empty()) other = load_checkpoint("--compare", f->compare);
      const SamplerConfig sc = resolve_sampler(f->sf, c);
      const auto [k, h, w] = geometry(f->sf, l);
      const fs::path out = resolve_out(c);
      fs::create_directories(out);
      write_run_record(out, "attribution", c,
                       {{"checkpoint", fs::absolute(f->checkpoint).string()},
                        {"compare", f->compare.empty() ? json() : json(fs::absolute(f->compare).string())},
                        {"prompt", f->prompt},
                        {"sampler", to_json(sc)}});
      const auto sched = default_schedule(l.model.config().num_timesteps);
      const auto a = attribution_maps(l.model, l.encoder, f->prompt, sc, sched, h / k, w / k);
      write_attribution(out / "maps", a, true);
      if (other) {
        const auto b = attribution_maps(other->model, other->encoder, f->prompt, sc, sched, h / k, w / k);
        write_attribution(out / "compare_maps", b, true);
        json sim;
        sim["seed"] = c.seed;
        sim["mean_cosine"] = map_similarity(a, b);
        for (std::size_t i = 0; i < a.tokens.size(); ++i) sim["per_token"][a.tokens[i]] = cosine(a.maps[i], b.maps[i]);
        write_file(out / "similarity.json", sim.dump(2) + "\n");
        if (Logger(c.verbosity).info()) std::printf("mean cosine %.4f\n", sim["mean_cosine"].get<double>());
      }
      return kOk;
    };
  });
}

// ---------------------------------------------------------------------------
// --run-config expansion

std::string flag_of(const std::string& arg) {
  if (arg.rfind("--", 0) != 0) return "";
  return arg.substr(0, arg.find('='));
}

/// Splices the JSON object named by --run-config into argv, right after the
/// subcommand and before the explicit flags. Keys given explicitly are skipped.
std::vector<std::string> expand_run_config(std::vector<std::string> args) {
  std::size_t at = args.size();
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--run-config" && i + 1 < args.size()) {
      path = args[i + 1];
      at = i;
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--run-config=", 0) == 0) {
      path = args[i].substr(13);
      at = i;
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  const json j = read_json(path);
  if (!j.is_object()) throw ConfigError("--run-config: expected a JSON object of flag values");
  std::set<std::string> explicit_flags;
  for (const auto& a : args) explicit_flags.insert(flag_of(a));
  std::vector<std::string> extra;
  std::vector<std::string> problems;
  for (const auto& [key, v] : j.items()) {
    const std::string flag = "--" + key;
    if (explicit_flags.count(flag)) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) extra.push_back(flag);
    } else if (v.is_array()) {
      for (const auto& e : v) {
        extra.push_back(flag);
        extra.push_back(e.is_string() ? e.get<std::string>() : e.dump());
      }
    } else if (v.is_string()) {
      extra.push_back(flag);
      extra.push_back(v.get<std::string>());
    } else if (v.is_number()) {
      extra.push_back(flag);
      extra.push_back(v.dump());
    } else {
      problems.push_back("--run-config: '" + key + "' must be a string, number, boolean or array");
    }
  }
  if (!problems.empty()) throw ConfigError(problems);
  // Insert just after the subcommand name, which precedes --run-config.
  std::size_t sub = 1;
  while (sub < at && args[sub].rfind("-", 0) == 0) ++sub;
  args.insert(args.begin() + static_cast<long>(std::min(sub + 1, args.size())), extra.begin(), extra.end());
  return args;
}

void emit_error(const char* kind, const std::string& message, const std::vector<std::string>& problems, int code) {
  json e = {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
  if (!problems.empty()) e["error"]["problems"] = problems;
  std::cerr << e.dump() << std::endl;
}

int run(int argc, char** argv) {
  Cli cli;
  cli.app.require_subcommand(1);
  cli.app.set_version_flag("--version", kVersion);
  cmd_gen_data(cli);
  cmd_train_teacher(cli);
  cmd_distill(cli);
  cmd_sample(cli);
  cmd_img2img(cli);
  cmd_profile(cli);
  cmd_sensitivity(cli);
  cmd_attribution(cli);
  try {
    std::vector<std::string> args = expand_run_config(std::vector<std::string>(argv, argv + argc));
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    try {
      cli.app.parse(std::move(rev));
    } catch (const CLI::CallForHelp& e) {
      return cli.app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return cli.app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return cli.app.exit(e);
    } catch (const CLI::ParseError& e) {
      emit_error("config", e.what(), {}, kConfig);
      return kConfig;
    }
    return cli.handler();
  } catch (const ConfigError& e) {
    emit_error("config", e.what(), e.problems(), kConfig);
    return kConfig;
  } catch (const NumericalError& e) {
    emit_error("numerical", e.what(), {}, kNumerical);
    return kNumerical;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what(), {}, kRuntime);
    return kRuntime;
  }
}

}  // namespace bkd::cli

int main(int argc, char** argv) { return bkd::cli::run(argc, argv); }
