#pragma once

// Command implementations behind the `atddpm` executable. Each command is a
// plain function so tests and the acceptance suite can drive it in-process.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "atddpm/denoiser.hpp"
#include "atddpm/diffusion.hpp"
#include "atddpm/error.hpp"
#include "atddpm/io.hpp"
#include "atddpm/metrics.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/schedule.hpp"
#include "atddpm/toyfaces.hpp"
#include "atddpm/trainer.hpp"
#include "atddpm/turbsim.hpp"

namespace atddpm {

/// Keeps large freed blocks in the heap instead of returning them to the OS;
/// the training loop allocates and frees the same activation sizes every step.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// gen-data

struct DatasetConfig {
  std::size_t image_size = 32;
  std::size_t weak_factor = 4;
  DegradationConfig degradation;

  static DatasetConfig from(ConfigMap& cfg) {
    DatasetConfig d;
    d.image_size = cfg.take_uint("image_size", d.image_size);
    d.weak_factor = cfg.take_uint("weak_factor", d.weak_factor);
    auto& g = d.degradation;
    g.elastic_sigma = cfg.take_double("elastic_sigma", g.elastic_sigma);
    g.elastic_alpha = cfg.take_double("elastic_alpha", g.elastic_alpha);
    g.blur_sigma_min = cfg.take_double("blur_sigma_min", g.blur_sigma_min);
    g.blur_sigma_max = cfg.take_double("blur_sigma_max", g.blur_sigma_max);
    g.noise_std = cfg.take_double("noise_std", g.noise_std);
    cfg.reject_unknown();
    g.validate();
    if (d.image_size < 2 || d.image_size % d.weak_factor) {
      throw UsageError("dataset config: weak_factor must divide image_size");
    }
    return d;
  }
};

struct DatasetItem {
  std::uint64_t seed = 0;
  Tensor clean, weak, strong;
};

inline std::uint64_t item_seed(std::uint64_t dataset_seed, std::size_t index) {
  return Rng(dataset_seed, index).next_u64();
}

/// Everything about item `index` follows from its item seed alone.
inline DatasetItem generate_item(std::uint64_t seed, const DatasetConfig& cfg) {
  DatasetItem item;
  item.seed = seed;
  Rng face_rng(seed, 0);
  Rng degrade_rng(seed, 1);
  item.clean = render(sample_spec(face_rng, cfg.image_size));
  item.weak = degrade_weak(item.clean, cfg.weak_factor);
  DegradationConfig d = cfg.degradation;
  d.seed = seed;
  item.strong = degrade_strong(item.clean, d, degrade_rng);
  return item;
}

inline std::string item_name(std::size_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

struct GenDataOptions {
  fs::path out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::optional<fs::path> config;
};

inline void cmd_gen_data(const GenDataOptions& opt, std::ostream& log) {
  ConfigMap cfg = opt.config ? ConfigMap::load(*opt.config) : ConfigMap();
  const auto dc = DatasetConfig::from(cfg);
  for (const char* sub : {"clean", "weak", "strong"}) fs::create_directories(opt.out / sub);
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < opt.count; ++i) {
    const auto name = item_name(i);
    const auto item = generate_item(item_seed(opt.seed, i), dc);
    ManifestRow r{name, "clean/" + name + ".pgm", "weak/" + name + ".pgm", "strong/" + name + ".pgm", item.seed};
    write_pgm(opt.out / r.clean_path, item.clean);
    write_pgm(opt.out / r.weak_path, item.weak);
    write_pgm(opt.out / r.strong_path, item.strong);
    rows.push_back(std::move(r));
  }
  write_manifest(opt.out / "manifest.txt", rows);
  log << "wrote " << rows.size() << " items to " << opt.out.string() << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  Stage stage = Stage::WeakCond;
  fs::path data;
  std::optional<fs::path> init;
  std::optional<fs::path> teacher;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<fs::path> loss_csv;  // default: <out>.loss.csv
  ConfigMap overrides;               // command-line values, applied over the file
};

struct TrainSummary {
  std::size_t steps = 0;
  double final_l_t = 0;
  double final_l_s = 0;
  std::vector<LossRecord> history;
};

inline void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& history) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << "step,L_T,L_S,L_final\n";
  for (const auto& r : history) {
    out << r.step << ',' << format_double(r.l_t) << ',' << format_double(r.l_s) << ',' << format_double(r.l_final) << '\n';
  }
}

inline NoiseSchedule schedule_from_header(const std::map<std::string, std::string>& h) {
  const auto get = [&](const char* k, const char* fallback) {
    const auto it = h.find(k);
    return it == h.end() ? std::string(fallback) : it->second;
  };
  return linear_schedule(parse_uint(get("diffusion_steps", "1000"), "diffusion_steps"),
                         parse_double(get("beta_start", "1e-4"), "beta_start"),
                         parse_double(get("beta_end", "0.02"), "beta_end"));
}

/// `prior_steps` counts the optimizer steps already behind the init model.
inline Checkpoint checkpoint_of(const TrainState& state, const TrainConfig& cfg, std::size_t prior_steps = 0) {
  Checkpoint c;
  c.header["stage"] = to_string(state.stage);
  c.header["step"] = std::to_string(state.step);
  c.header["total_steps"] = std::to_string(prior_steps + state.step);
  c.header["gamma"] = format_double(cfg.gamma);
  c.header["gamma1"] = format_double(cfg.gamma1);
  c.header["seed"] = std::to_string(cfg.seed);
  c.header["learning_rate"] = format_double(cfg.learning_rate);
  c.header["batch_size"] = std::to_string(cfg.batch_size);
  c.header["diffusion_steps"] = std::to_string(cfg.diffusion_steps);
  c.header["beta_start"] = format_double(cfg.beta_start);
  c.header["beta_end"] = format_double(cfg.beta_end);
  c.student = state.student.clone();
  if (state.teacher) c.teacher = state.teacher->clone();
  if (!state.optimizer.m.empty()) c.moments = state.optimizer;
  return c;
}

inline TrainConfig train_config_from(ConfigMap& cfg, Stage stage, DenoiserDescriptor& desc) {
  TrainConfig t;
  t.stage = stage;
  t.gamma = cfg.take_double("gamma", t.gamma);
  t.gamma1 = cfg.take_double("gamma1", t.gamma1);
  t.learning_rate = cfg.take_double("learning_rate", t.learning_rate);
  t.adam_beta1 = cfg.take_double("adam_beta1", t.adam_beta1);
  t.adam_beta2 = cfg.take_double("adam_beta2", t.adam_beta2);
  t.adam_eps = cfg.take_double("adam_eps", t.adam_eps);
  t.batch_size = cfg.take_uint("batch_size", t.batch_size);
  t.steps = cfg.take_uint("steps", t.steps);
  t.seed = cfg.take_uint("seed", t.seed);
  t.diffusion_steps = cfg.take_uint("diffusion_steps", t.diffusion_steps);
  t.beta_start = cfg.take_double("beta_start", t.beta_start);
  t.beta_end = cfg.take_double("beta_end", t.beta_end);
  t.checkpoint_every = cfg.take_uint("checkpoint_every", t.checkpoint_every);
  desc.widths = parse_widths(cfg.take_string("widths", detail::join_widths(desc.widths)));
  desc.groups = cfg.take_uint("groups", desc.groups);
  desc.time_dim = cfg.take_uint("time_dim", desc.time_dim);
  desc.kernel = cfg.take_uint("kernel", desc.kernel);
  cfg.reject_unknown();
  t.validate();
  return t;
}

inline void require_same_schedule(const Checkpoint& c, const TrainConfig& t, const std::string& what) {
  const auto s = schedule_from_header(c.header);
  const auto mine = t.schedule();
  if (s.steps() != mine.steps() || s.betas() != mine.betas()) {
    throw ContractError(what + " checkpoint was trained with a different noise schedule");
  }
}

/// Runs one training stage over a dataset directory and writes the checkpoint
/// and the loss history.
inline TrainSummary cmd_train(const TrainOptions& opt, std::ostream& log) {
  ConfigMap cfg = opt.config ? ConfigMap::load(*opt.config) : ConfigMap();
  // Flags override file values.
  ConfigMap flags = opt.overrides;
  for (const char* key : {"gamma", "gamma1", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "batch_size", "steps",
                          "seed", "diffusion_steps", "beta_start", "beta_end", "checkpoint_every", "widths", "groups",
                          "time_dim", "kernel"}) {
    if (flags.contains(key)) cfg.set(key, flags.take_string(key, ""));
  }
  flags.reject_unknown();

  if (opt.stage == Stage::StrongDistill && !opt.teacher) {
    throw UsageError("train: --stage strong requires --teacher (the weak-stage checkpoint)");
  }
  const TripletDataset data = load_dataset(opt.data);
  DenoiserDescriptor desc;
  std::optional<Checkpoint> init, teacher;
  if (opt.init) init = load_checkpoint(*opt.init);
  if (opt.teacher) teacher = load_checkpoint(*opt.teacher);
  if (init) desc = init->student.descriptor();
  else if (teacher) desc = teacher->student.descriptor();
  const TrainConfig tc = train_config_from(cfg, opt.stage, desc);
  if (init && !(init->student.descriptor() == desc)) {
    throw ContractError("train: architecture settings conflict with the --init checkpoint");
  }
  if (!init) desc.image_size = data.image_size ? data.image_size : desc.image_size;
  desc.validate();
  if (init && teacher && !init->student.combinable_with(teacher->student)) {
    throw ContractError("train: --init and --teacher checkpoints have different architectures");
  }
  if (init) require_same_schedule(*init, tc, "--init");
  if (teacher) require_same_schedule(*teacher, tc, "--teacher");

  std::size_t prior_steps = 0;
  if (init && init->header.count("total_steps")) prior_steps = parse_uint(init->header.at("total_steps"), "total_steps");
  StageInit si;
  si.descriptor = desc;
  if (init) {
    si.params = std::move(init->student);
    si.optimizer = std::move(init->moments);
  }
  if (opt.stage == Stage::StrongDistill) si.teacher = std::move(teacher->student);

  const auto t0 = std::chrono::steady_clock::now();
  const TrainState state = train_stage(tc, data, std::move(si), [&](const TrainState& s) {
    save_checkpoint(opt.out, checkpoint_of(s, tc, prior_steps));
    log << "step " << s.step << " L_T " << s.history.back().l_t << "\n";
  });
  save_checkpoint(opt.out, checkpoint_of(state, tc, prior_steps));
  write_loss_csv(opt.loss_csv ? *opt.loss_csv : fs::path(opt.out.string() + ".loss.csv"), state.history);

  TrainSummary summary;
  summary.steps = state.step;
  summary.history = state.history;
  if (!state.history.empty()) {
    summary.final_l_t = state.history.back().l_t;
    summary.final_l_s = state.history.back().l_s;
  }
  log << "stage " << to_string(opt.stage) << ": " << state.step << " steps in " << std::fixed << std::setprecision(1)
      << seconds_since(t0) << " s" << std::defaultfloat << std::setprecision(6);
  log << ", final L_T " << summary.final_l_t;
  if (opt.stage == Stage::StrongDistill) log << ", final L_S " << summary.final_l_s;
  log << "\n";
  return summary;
}

// ---------------------------------------------------------------------------
// restore

struct RestoredImage {
  Tensor image;  // [H,W] in [0,1]
  SampleTrace trace;
  double wall_seconds = 0;
};

/// Restores one [H,W] image in [0,1] with the student of a checkpoint.
inline RestoredImage restore_image(const DenoiserParams& params, const RespacedSchedule& s, const Tensor& degraded,
                                   std::size_t t1, const Rng& rng, const RestoreOptions& ro = {}) {
  const auto n = params.descriptor().image_size;
  if (degraded.shape() != Shape{n, n}) {
    throw ContractError("restore: input " + to_string(degraded.shape()) + " does not match the model resolution " +
                        std::to_string(n) + "x" + std::to_string(n));
  }
  std::vector<double> v(degraded.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0 * degraded[i] - 1.0;
  const Tensor x({1, 1, n, n}, std::move(v));
  Denoiser model{&params};
  const auto t0 = std::chrono::steady_clock::now();
  auto result = restore(x, model, s, t1, rng, ro);
  RestoredImage out;
  out.wall_seconds = seconds_since(t0);
  const auto to_unit = [n](const Tensor& y) {
    std::vector<double> u(y.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::clamp(0.5 * (y[i] + 1.0), 0.0, 1.0);
    return Tensor({n, n}, std::move(u));
  };
  out.image = to_unit(result.image);
  for (auto& [k, snap] : result.trace.snapshots) snap = to_unit(snap);
  out.trace = std::move(result.trace);
  return out;
}

/// Rng for restoring the index-th input of a run.
inline Rng restore_rng(std::uint64_t seed, std::size_t index) { return Rng(seed, 3).split(index); }

struct RestoreCmdOptions {
  fs::path ckpt;
  std::vector<fs::path> inputs;  // files, or directories of .pgm files
  fs::path out;
  std::size_t t1 = 30;
  std::size_t steps = 60;
  bool noise_start = false;
  std::size_t snapshots = 0;
  std::uint64_t seed = 0;
  ReverseVariance variance = ReverseVariance::Beta;
};

inline ReverseVariance parse_variance(const std::string& s) {
  if (s == "beta") return ReverseVariance::Beta;
  if (s == "posterior") return ReverseVariance::Posterior;
  throw UsageError("unknown reverse variance '" + s + "' (expected beta or posterior)");
}

inline std::vector<fs::path> expand_inputs(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> files;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".pgm") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }
  return files;
}

struct RestoreTraceRow {
  std::string item;
  std::size_t nfe = 0;
  std::size_t start_step = 0;
  double wall_seconds = 0;
};

inline std::vector<RestoreTraceRow> cmd_restore(const RestoreCmdOptions& opt, std::ostream& log) {
  if (opt.t1 < 1 || opt.t1 > opt.steps) {
    throw UsageError("restore: --t1 must lie in [1, --steps]");
  }
  const Checkpoint ckpt = load_checkpoint(opt.ckpt);
  const RespacedSchedule s = respace(schedule_from_header(ckpt.header), opt.steps);
  fs::create_directories(opt.out);
  const auto files = expand_inputs(opt.inputs);
  RestoreOptions ro;
  ro.noise_start = opt.noise_start;
  ro.snapshot_every = opt.snapshots;
  ro.variance = opt.variance;
  std::vector<RestoreTraceRow> rows;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Tensor in = read_pgm(files[i]);
    auto r = restore_image(ckpt.student, s, in, opt.t1, restore_rng(opt.seed, i), ro);
    const auto stem = files[i].stem().string();
    write_pgm(opt.out / (stem + ".pgm"), r.image);
    if (opt.snapshots) {
      fs::create_directories(opt.out / "snapshots");
      for (const auto& [k, snap] : r.trace.snapshots) {
        write_pgm(opt.out / "snapshots" / (stem + "_k" + std::to_string(k) + ".pgm"), snap);
      }
    }
    rows.push_back({stem, r.trace.nfe, r.trace.start_step, r.wall_seconds});
  }
  std::ofstream csv(opt.out / "trace.csv");
  csv << "item,nfe,start_step,wall_seconds\n";
  for (const auto& r : rows) csv << r.item << ',' << r.nfe << ',' << r.start_step << ',' << format_double(r.wall_seconds) << '\n';
  log << "restored " << rows.size() << " images (t1 " << opt.t1 << " of " << opt.steps << ") into " << opt.out.string() << "\n";
  return rows;
}

// ---------------------------------------------------------------------------
// eval

/// Pairs files by name across the two directories.
inline MetricReport evaluate_dirs(const fs::path& pred, const fs::path& ref) {
  const auto list = [](const fs::path& dir) {
    std::map<std::string, fs::path> m;
    if (!fs::is_directory(dir)) throw ContractError("eval: " + dir.string() + " is not a directory");
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".pgm") m[e.path().stem().string()] = e.path();
    }
    return m;
  };
  const auto p = list(pred), r = list(ref);
  std::string unmatched;
  for (const auto& [k, v] : p) {
    if (!r.count(k)) unmatched += " " + k + "(pred only)";
  }
  for (const auto& [k, v] : r) {
    if (!p.count(k)) unmatched += " " + k + "(ref only)";
  }
  if (!unmatched.empty()) throw ContractError("eval: unmatched items:" + unmatched);
  MetricReport report;
  for (const auto& [k, path] : p) {
    const Tensor a = read_pgm(path), b = read_pgm(r.at(k));
    report.rows.push_back({k, psnr(a, b), ssim(a, b)});
  }
  return report;
}

inline void write_metric_csv(const fs::path& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << "item_id,psnr,ssim\n";
  for (const auto& r : report.rows) out << r.item_id << ',' << format_double(r.psnr) << ',' << format_double(r.ssim) << '\n';
  if (report.count()) {
    out << "# count=" << report.count() << " mean_psnr=" << format_double(report.mean_psnr())
        << " median_psnr=" << format_double(report.median_psnr()) << " mean_ssim=" << format_double(report.mean_ssim())
        << " median_ssim=" << format_double(report.median_ssim()) << '\n';
  }
}

inline MetricReport cmd_eval(const fs::path& pred, const fs::path& ref, const fs::path& out_csv, std::ostream& log) {
  const auto report = evaluate_dirs(pred, ref);
  write_metric_csv(out_csv, report);
  log << report.count() << " items";
  if (report.count()) log << ": mean PSNR " << report.mean_psnr() << " dB, mean SSIM " << report.mean_ssim();
  log << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// ablate

struct HeldOut {
  std::vector<std::string> ids;
  std::vector<Tensor> clean;
  std::vector<Tensor> degraded;
};

inline HeldOut load_heldout(const fs::path& dir) {
  HeldOut h;
  for (const auto& r : read_manifest(dir / "manifest.txt")) {
    h.ids.push_back(r.item_id);
    h.clean.push_back(read_pgm(dir / r.clean_path));
    h.degraded.push_back(read_pgm(dir / r.strong_path));
  }
  return h;
}

struct VariantScore {
  std::string variant;
  std::size_t total_steps = 0;
  MetricReport report;
};

struct RestorationRun {
  MetricReport report;
  std::vector<Tensor> outputs;
  std::vector<std::size_t> nfe;  // denoiser evaluations per item, from the sampler trace
  double wall_seconds = 0;
};

/// Restores every held-out input at start step t1 and scores it against the
/// clean image.
inline RestorationRun score_restoration(const DenoiserParams& params, const RespacedSchedule& s, const HeldOut& h,
                                        std::size_t t1, std::uint64_t seed, const RestoreOptions& ro = {}) {
  RestorationRun run;
  for (std::size_t i = 0; i < h.clean.size(); ++i) {
    auto r = restore_image(params, s, h.degraded[i], t1, restore_rng(seed, i), ro);
    run.wall_seconds += r.wall_seconds;
    run.nfe.push_back(r.trace.nfe);
    run.report.rows.push_back({h.ids[i], psnr(r.image, h.clean[i]), ssim(r.image, h.clean[i])});
    run.outputs.push_back(std::move(r.image));
  }
  return run;
}

inline MetricReport score_degraded(const HeldOut& h) {
  MetricReport report;
  for (std::size_t i = 0; i < h.clean.size(); ++i) {
    report.rows.push_back({h.ids[i], psnr(h.degraded[i], h.clean[i]), ssim(h.degraded[i], h.clean[i])});
  }
  return report;
}

struct PtAblationOptions {
  fs::path data;
  fs::path heldout;
  fs::path out;  // directory for checkpoints and the table
  std::size_t weak_steps = 2000;
  std::size_t strong_steps = 2000;
  std::optional<fs::path> config;
  ConfigMap overrides;
  std::optional<fs::path> distilled_ckpt;  // skip training when both are given
  std::optional<fs::path> direct_ckpt;
  std::size_t t1 = 30;
  std::size_t steps = 60;
  std::uint64_t seed = 0;
};

struct PtAblation {
  MetricReport degraded;
  VariantScore distilled;
  VariantScore direct;
  fs::path distilled_ckpt;
  fs::path direct_ckpt;
};

inline PtAblation cmd_ablate_pt(const PtAblationOptions& opt, std::ostream& log) {
  fs::create_directories(opt.out);
  PtAblation result;
  result.distilled_ckpt = opt.distilled_ckpt.value_or(opt.out / "distilled.ckpt");
  result.direct_ckpt = opt.direct_ckpt.value_or(opt.out / "direct.ckpt");
  if (!(opt.distilled_ckpt && opt.direct_ckpt)) {
    const auto run = [&](Stage stage, std::size_t steps, std::optional<fs::path> init, std::optional<fs::path> teacher,
                         const fs::path& out) {
      TrainOptions t;
      t.stage = stage;
      t.data = opt.data;
      t.init = std::move(init);
      t.teacher = std::move(teacher);
      t.out = out;
      t.config = opt.config;
      t.overrides = opt.overrides;
      t.overrides.set("steps", std::to_string(steps));
      cmd_train(t, log);
    };
    const auto weak = opt.out / "weak.ckpt";
    run(Stage::WeakCond, opt.weak_steps, std::nullopt, std::nullopt, weak);
    run(Stage::StrongDistill, opt.strong_steps, weak, weak, result.distilled_ckpt);
    run(Stage::StrongDirect, opt.weak_steps + opt.strong_steps, std::nullopt, std::nullopt, result.direct_ckpt);
  }
  const HeldOut h = load_heldout(opt.heldout);
  result.degraded = score_degraded(h);
  const auto score = [&](const fs::path& ckpt_path, const std::string& name) {
    const Checkpoint c = load_checkpoint(ckpt_path);
    const auto s = respace(schedule_from_header(c.header), opt.steps);
    VariantScore v;
    v.variant = name;
    const auto it = c.header.find("total_steps");
    v.total_steps = it == c.header.end() ? 0 : parse_uint(it->second, "total_steps");
    v.report = score_restoration(c.student, s, h, opt.t1, opt.seed).report;
    return v;
  };
  result.distilled = score(result.distilled_ckpt, "distilled");
  result.direct = score(result.direct_ckpt, "direct");

  std::ofstream csv(opt.out / "pt_ablation.csv");
  csv << "variant,total_steps,count,mean_psnr,median_psnr,mean_ssim\n";
  const auto row = [&](const std::string& name, std::size_t steps, const MetricReport& r) {
    csv << name << ',' << steps << ',' << r.count() << ',' << format_double(r.mean_psnr()) << ','
        << format_double(r.median_psnr()) << ',' << format_double(r.mean_ssim()) << '\n';
    log << std::left << std::setw(10) << name << " PSNR " << std::fixed << std::setprecision(3) << r.mean_psnr()
        << " dB  SSIM " << std::setprecision(4) << r.mean_ssim() << std::defaultfloat << std::setprecision(6) << "\n";
  };
  row("degraded", 0, result.degraded);
  row(result.distilled.variant, result.distilled.total_steps, result.distilled.report);
  row(result.direct.variant, result.direct.total_steps, result.direct.report);
  return result;
}

struct SamplingAblationOptions {
  fs::path ckpt;
  fs::path heldout;
  fs::path out_csv;
  std::vector<std::size_t> t1_list{10, 20, 30, 45, 60};
  std::size_t steps = 60;
  std::uint64_t seed = 0;
};

struct SamplingRow {
  std::size_t t1 = 0;
  std::size_t nfe = 0;
  double runtime_seconds = 0;
  double mean_psnr = 0;
  double mean_ssim = 0;
  double mean_distance = 0;  // mean squared distance of output to the degraded input
  std::vector<double> item_distance;
  std::vector<std::size_t> item_nfe;
};

struct SamplingAblation {
  std::vector<SamplingRow> rows;
  double noise_start_runtime_seconds = 0;
  std::size_t noise_start_nfe = 0;
};

inline SamplingAblation cmd_ablate_sampling(const SamplingAblationOptions& opt, std::ostream& log) {
  const Checkpoint c = load_checkpoint(opt.ckpt);
  const auto s = respace(schedule_from_header(c.header), opt.steps);
  const HeldOut h = load_heldout(opt.heldout);
  SamplingAblation result;
  for (auto t1 : opt.t1_list) {
    if (t1 < 1 || t1 > opt.steps) throw UsageError("ablate: t1 " + std::to_string(t1) + " outside [1, steps]");
    SamplingRow row;
    row.t1 = t1;
    const auto run = score_restoration(c.student, s, h, t1, opt.seed);
    const auto& outputs = run.outputs;
    row.runtime_seconds = run.wall_seconds;
    row.item_nfe = run.nfe;
    row.nfe = run.nfe.empty() ? 0 : run.nfe.front();
    row.mean_psnr = run.report.mean_psnr();
    row.mean_ssim = run.report.mean_ssim();
    for (std::size_t i = 0; i < outputs.size(); ++i) row.item_distance.push_back(mean_squared_error(outputs[i], h.degraded[i]));
    for (double d : row.item_distance) row.mean_distance += d;
    if (!outputs.empty()) row.mean_distance /= static_cast<double>(outputs.size());
    log << "t1 " << std::setw(3) << t1 << ": " << std::fixed << std::setprecision(2) << row.runtime_seconds << " s, PSNR "
        << std::setprecision(3) << row.mean_psnr << " dB, distance to input " << std::scientific << std::setprecision(3)
        << row.mean_distance << std::defaultfloat << std::setprecision(6) << "\n";
    result.rows.push_back(std::move(row));
  }
  RestoreOptions noise;
  noise.noise_start = true;
  const auto full = score_restoration(c.student, s, h, opt.steps, opt.seed, noise);
  result.noise_start_runtime_seconds = full.wall_seconds;
  result.noise_start_nfe = full.nfe.empty() ? 0 : full.nfe.front();
  log << "noise start (" << opt.steps << " steps): " << result.noise_start_runtime_seconds << " s\n";

  std::ofstream csv(opt.out_csv);
  if (!csv) throw ContractError("cannot write " + opt.out_csv.string());
  csv << "t1,nfe,runtime_seconds,mean_psnr,mean_ssim,mean_distance_to_input\n";
  for (const auto& r : result.rows) {
    csv << r.t1 << ',' << r.nfe << ',' << format_double(r.runtime_seconds) << ',' << format_double(r.mean_psnr) << ','
        << format_double(r.mean_ssim) << ',' << format_double(r.mean_distance) << '\n';
  }
  csv << "# noise_start_steps=" << result.noise_start_nfe
      << " noise_start_runtime_seconds=" << format_double(result.noise_start_runtime_seconds) << '\n';
  return result;
}

}  // namespace atddpm
