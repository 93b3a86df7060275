// atddpm: dataset generation, staged training, restoration, evaluation and
// ablations from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 numeric failure.

#include <CLI11.hpp>

#include <iostream>

#include "atddpm/atddpm.hpp"

namespace {

using namespace atddpm;

// Copies a flag into the override map only when the user gave it.
template <class T>
void override_if(CLI::Option* opt, ConfigMap& map, const std::string& key, const T& value) {
  if (opt->count()) {
    if constexpr (std::is_floating_point_v<T>) map.set(key, format_double(value));
    else map.set(key, std::to_string(value));
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Conditional diffusion restoration of turbulence-degraded toy faces"};
  app.require_subcommand(1);

  GenDataOptions gen;
  std::string gen_out, gen_config;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write clean/weak/strong toy-face triplets and a manifest");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of items")->default_val(4096);
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->default_val(0);
  gen_cmd->add_option("--config", gen_config, "key=value degradation settings");

  TrainOptions train;
  std::string stage = "weak", data, init = "none", teacher, out, config, loss_csv;
  std::size_t steps = 0, batch = 0, every = 0;
  double lr = 0, gamma = 0, gamma1 = 0;
  std::uint64_t seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  train_cmd->add_option("--stage", stage, "uncond, weak, strong or direct")->default_val("weak");
  train_cmd->add_option("--data", data, "Dataset directory")->required();
  train_cmd->add_option("--init", init, "Warm-start checkpoint, or 'none'")->default_val("none");
  train_cmd->add_option("--teacher", teacher, "Weak-stage checkpoint (strong stage)");
  train_cmd->add_option("--out", out, "Output checkpoint")->required();
  train_cmd->add_option("--config", config, "key=value training settings");
  train_cmd->add_option("--loss-csv", loss_csv, "Loss history (default: <out>.loss.csv)");
  auto* o_steps = train_cmd->add_option("--steps", steps, "Optimizer steps");
  auto* o_batch = train_cmd->add_option("--batch", batch, "Batch size");
  auto* o_lr = train_cmd->add_option("--lr", lr, "Adam learning rate");
  auto* o_gamma = train_cmd->add_option("--gamma", gamma, "Distillation weight");
  auto* o_gamma1 = train_cmd->add_option("--gamma1", gamma1, "Teacher EMA rate");
  auto* o_seed = train_cmd->add_option("--seed", seed, "Training seed");
  auto* o_every = train_cmd->add_option("--checkpoint-every", every, "Write the checkpoint every N steps");

  RestoreCmdOptions rest;
  std::string rest_ckpt, rest_out, rest_variance;
  std::vector<std::string> rest_in;
  auto* rest_cmd = app.add_subcommand("restore", "Restore degraded images with a trained checkpoint");
  rest_cmd->add_option("--ckpt", rest_ckpt, "Checkpoint")->required();
  rest_cmd->add_option("--in", rest_in, "Input images or directories")->required();
  rest_cmd->add_option("--out", rest_out, "Output directory")->required();
  rest_cmd->add_option("--t1", rest.t1, "Start step on the respaced grid")->default_val(30);
  rest_cmd->add_option("--steps", rest.steps, "Respaced sampling steps")->default_val(60);
  rest_cmd->add_flag("--noise-start", rest.noise_start, "Start from pure noise (requires t1 == steps)");
  rest_cmd->add_option("--snapshots", rest.snapshots, "Dump every m-th intermediate image")->default_val(0);
  rest_cmd->add_option("--seed", rest.seed, "Sampling seed")->default_val(0);
  rest_cmd->add_option("--variance", rest_variance, "Reverse-step variance: beta or posterior")
      ->default_val("beta")
      ->check(CLI::IsMember({"beta", "posterior"}));

  std::string pred, ref, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of predicted vs reference images");
  eval_cmd->add_option("--pred", pred, "Predicted image directory")->required();
  eval_cmd->add_option("--ref", ref, "Reference image directory")->required();
  eval_cmd->add_option("--out", eval_out, "Metric CSV")->required();

  std::string which, ab_data, ab_heldout, ab_out, ab_config, ab_ckpt, ab_distilled, ab_direct;
  PtAblationOptions pt;
  SamplingAblationOptions smp;
  std::size_t ab_batch = 0;
  double ab_lr = 0;
  std::uint64_t ab_train_seed = 0;
  auto* ab_cmd = app.add_subcommand("ablate", "Progressive-training or sampling ablation");
  ab_cmd->add_option("--which", which, "pt or sampling")->required()->check(CLI::IsMember({"pt", "sampling"}));
  ab_cmd->add_option("--heldout", ab_heldout, "Held-out dataset directory")->required();
  ab_cmd->add_option("--out", ab_out, "Output directory (pt) or CSV (sampling)")->required();
  ab_cmd->add_option("--data", ab_data, "Training dataset directory (pt)");
  ab_cmd->add_option("--config", ab_config, "key=value training settings (pt)");
  ab_cmd->add_option("--weak-steps", pt.weak_steps, "Weak-stage steps (pt)")->default_val(pt.weak_steps);
  ab_cmd->add_option("--strong-steps", pt.strong_steps, "Strong-stage steps (pt)")->default_val(pt.strong_steps);
  auto* ab_o_batch = ab_cmd->add_option("--batch", ab_batch, "Batch size (pt)");
  auto* ab_o_lr = ab_cmd->add_option("--lr", ab_lr, "Learning rate (pt)");
  auto* ab_o_seed = ab_cmd->add_option("--train-seed", ab_train_seed, "Training seed (pt)");
  ab_cmd->add_option("--distilled", ab_distilled, "Existing distilled checkpoint (pt, skips training)");
  ab_cmd->add_option("--direct", ab_direct, "Existing direct checkpoint (pt, skips training)");
  ab_cmd->add_option("--ckpt", ab_ckpt, "Checkpoint to sweep (sampling)");
  ab_cmd->add_option("--t1", smp.t1_list, "Start steps to sweep (sampling)")->default_val(smp.t1_list);
  ab_cmd->add_option("--steps", smp.steps, "Respaced sampling steps")->default_val(60);
  ab_cmd->add_option("--seed", smp.seed, "Sampling seed")->default_val(0);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.out = gen_out;
      if (!gen_config.empty()) gen.config = gen_config;
      cmd_gen_data(gen, std::cout);
    } else if (train_cmd->parsed()) {
      train.stage = parse_stage(stage);
      train.data = data;
      if (init != "none") train.init = init;
      if (!teacher.empty()) train.teacher = teacher;
      train.out = out;
      if (!config.empty()) train.config = config;
      if (!loss_csv.empty()) train.loss_csv = loss_csv;
      override_if(o_steps, train.overrides, "steps", steps);
      override_if(o_batch, train.overrides, "batch_size", batch);
      override_if(o_lr, train.overrides, "learning_rate", lr);
      override_if(o_gamma, train.overrides, "gamma", gamma);
      override_if(o_gamma1, train.overrides, "gamma1", gamma1);
      override_if(o_seed, train.overrides, "seed", seed);
      override_if(o_every, train.overrides, "checkpoint_every", every);
      cmd_train(train, std::cout);
    } else if (rest_cmd->parsed()) {
      rest.ckpt = rest_ckpt;
      rest.variance = parse_variance(rest_variance);
      rest.out = rest_out;
      for (const auto& p : rest_in) rest.inputs.emplace_back(p);
      cmd_restore(rest, std::cout);
    } else if (eval_cmd->parsed()) {
      cmd_eval(pred, ref, eval_out, std::cout);
    } else if (ab_cmd->parsed()) {
      if (which == "pt") {
        const bool have_ckpts = !ab_distilled.empty() && !ab_direct.empty();
        if (ab_data.empty() && !have_ckpts) throw UsageError("ablate pt: --data is required unless --distilled and --direct are given");
        pt.data = ab_data;
        pt.heldout = ab_heldout;
        pt.out = ab_out;
        if (!ab_config.empty()) pt.config = ab_config;
        if (!ab_distilled.empty()) pt.distilled_ckpt = ab_distilled;
        if (!ab_direct.empty()) pt.direct_ckpt = ab_direct;
        pt.steps = smp.steps;
        pt.seed = smp.seed;
        override_if(ab_o_batch, pt.overrides, "batch_size", ab_batch);
        override_if(ab_o_lr, pt.overrides, "learning_rate", ab_lr);
        override_if(ab_o_seed, pt.overrides, "seed", ab_train_seed);
        cmd_ablate_pt(pt, std::cout);
      } else {
        if (ab_ckpt.empty()) throw UsageError("ablate sampling: --ckpt is required");
        smp.ckpt = ab_ckpt;
        smp.heldout = ab_heldout;
        smp.out_csv = ab_out;
        cmd_ablate_sampling(smp, std::cout);
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
