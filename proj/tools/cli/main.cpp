#include <algorithm>
#include <iostream>
#include <limits>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"
#include "tubelet/errors.hpp"

namespace fs = std::filesystem;
using namespace tubelet::cli;

namespace {

const CLI::Range kPositive(1, std::numeric_limits<int>::max());
const CLI::Validator kFoldSpec(
    [](std::string& s) -> std::string {
      if (s == "all" || (!s.empty() && s.size() < 10 && std::all_of(s.begin(), s.end(), ::isdigit))) return {};
      return "expected 'all' or a fold index, got '" + s + "'";
    },
    "all|INT");
const std::vector<std::string> kLayers{"IMG", "F2", "F4", "F6", "F8"};
const std::vector<std::string> kEmbedModes{"none", "all", "last"};
const std::vector<std::string> kPathologies{"pe", "con"};

void add_tracker_options(CLI::App* cmd, TrackerOptions& t) {
  cmd->add_option("--iou-threshold", t.iou_threshold, "Minimum IoU for a detection-track match")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--min-hits", t.min_hits, "Consecutive hits before a track is confirmed")
      ->capture_default_str()
      ->check(kPositive);
  cmd->add_option("--min-length", t.min_length, "Shortest tracklet kept")->capture_default_str()->check(kPositive);
  cmd->add_option("--max-age", t.max_age, "Frames a track survives without a match")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
}

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--layer", m.layer, "Feature source")
      ->capture_default_str()
      ->transform(CLI::IsMember(kLayers, CLI::ignore_case));
  cmd->add_option("--embed", m.embed, "Context embedding mode")
      ->capture_default_str()
      ->transform(CLI::IsMember(kEmbedModes, CLI::ignore_case));
  cmd->add_option("--base-width", m.base_width, "Channels of the first encoder block, doubling after (0: layer default)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--epochs", m.epochs, "Training epochs")->capture_default_str()->check(kPositive);
  cmd->add_option("--lr", m.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", m.seed, "Initialisation seed")->capture_default_str();
  cmd->add_option("--w-ins", m.w_ins, "Instance loss weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--w-tubelet", m.w_tubelet, "Tubelet loss weight")->capture_default_str()->check(CLI::NonNegativeNumber);
}

// Every resolved setting of the run, readable back through --config.
std::string config_echo(const CLI::App& cmd) {
  return "[" + cmd.get_name() + "]\n" + cmd.config_to_str(true, false);
}

void write_config_echo(const CLI::App& cmd, const fs::path& dir, const std::string& name) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path path = dir / (name + ".config.toml");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw tubelet::IoError("cannot write " + path.string());
  out << config_echo(cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware video tubelet classification"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Replay a config echo file");
  app.option_defaults()->always_capture_default();

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic video dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--videos", synth.config.videos, "Number of videos")->check(kPositive);
  synth_cmd->add_option("--frames", synth.config.frames, "Frames per video")->check(kPositive);
  synth_cmd->add_option("--height", synth.config.height, "Frame height")->check(CLI::Range(16, 4096));
  synth_cmd->add_option("--width", synth.config.width, "Frame width")->check(CLI::Range(16, 4096));
  synth_cmd->add_option("--videos-per-patient", synth.config.videos_per_patient)->check(kPositive);
  synth_cmd->add_option("--prior-pe", synth.config.prior_pe, "Probability a video has a PE blob")
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--prior-con", synth.config.prior_con, "Probability a video has a CON blob")
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--max-distractors", synth.config.max_distractors)->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--jitter", synth.config.jitter_sigma, "Detector box jitter (pixels)")
      ->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--false-positive-rate", synth.config.false_positive_rate)->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--miss-rate", synth.config.miss_rate)->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--layers", synth.layers, "Feature volumes to write")
      ->transform(CLI::IsMember(kLayers, CLI::ignore_case));
  synth_cmd->add_option("--seed", synth.config.seed, "Dataset seed");
  synth_cmd->configurable();

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier on all folds but the held-out one");
  train_cmd->add_option("--data", train.data, "Dataset directory or manifest")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--pathology", train.pathology, "Target pathology")
      ->transform(CLI::IsMember(kPathologies, CLI::ignore_case));
  train_cmd->add_option("--fold", train.fold, "Held-out fold index, or 'all' to train every fold")
      ->check(kFoldSpec);
  train_cmd->add_option("--folds", train.folds.folds, "Number of patient-level folds")->check(CLI::Range(2, 1000));
  train_cmd->add_option("--fold-seed", train.folds.fold_seed, "Fold shuffle seed");
  train_cmd->add_option("--stratify", train.folds.stratify, "Deal positive patients first for this pathology")
      ->transform(CLI::IsMember({"none", "pe", "con"}, CLI::ignore_case));
  add_model_options(train_cmd, train.model);
  add_tracker_options(train_cmd, train.tracker);
  train_cmd->configurable();

  InferOptions infer;
  auto* infer_cmd = app.add_subcommand("infer", "Score every video of a dataset");
  infer_cmd->add_option("--data", infer.data, "Dataset directory or manifest")->required();
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--out", infer.out, "Predictions file (JSON lines)")->required();
  infer_cmd->add_option("--layer", infer.layer, "Feature source the checkpoint was trained on")
      ->transform(CLI::IsMember(kLayers, CLI::ignore_case));
  infer_cmd->add_option("--jobs", infer.jobs, "Videos scored in parallel")->check(kPositive);
  add_tracker_options(infer_cmd, infer.tracker);
  infer_cmd->configurable();

  EvalOptions eval;
  std::optional<int> eval_fold;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out AUROC per fold; paired t-test for two runs");
  eval_cmd->add_option("--data", eval.data, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoints, "Training run directory or fold checkpoint (one or two)")
      ->required()
      ->expected(1, 2)
      ->allow_extra_args(false);
  eval_cmd->add_option("--name", eval.names, "Report name per checkpoint");
  eval_cmd->add_option("--out", eval.out, "Report directory")->required();
  eval_cmd->add_option("--fold", eval_fold, "Evaluate this fold only")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--split", eval.split, "Videos to score: test (held-out), train, or all")
      ->transform(CLI::IsMember({"test", "train", "all"}));
  eval_cmd->add_flag("--profile", eval.profile, "Append a params/FLOPs table");
  eval_cmd->add_option("--jobs", eval.jobs, "Videos scored in parallel")->check(kPositive);
  add_tracker_options(eval_cmd, eval.tracker);
  eval_cmd->configurable();

  ProfileOptions prof;
  fs::path prof_out;
  auto* prof_cmd = app.add_subcommand("profile", "Parameter and FLOPs accounting");
  add_model_options(prof_cmd, prof.model);
  prof_cmd->add_option("--frames", prof.frames, "Tubelet length for per-tubelet FLOPs")->check(kPositive);
  prof_cmd->add_option("--out", prof_out, "Directory for the config echo (stderr when absent)");
  prof_cmd->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth_cmd->parsed()) {
      write_config_echo(*synth_cmd, synth.out, "synth");
      run_synth(synth);
    } else if (train_cmd->parsed()) {
      write_config_echo(*train_cmd, train.out, "train");
      run_train(train);
    } else if (infer_cmd->parsed()) {
      write_config_echo(*infer_cmd, infer.out.has_parent_path() ? infer.out.parent_path() : fs::path("."),
                        infer.out.filename().string());
      run_infer(infer);
    } else if (eval_cmd->parsed()) {
      eval.fold = eval_fold;
      write_config_echo(*eval_cmd, eval.out, "eval");
      run_eval(eval);
    } else if (prof_cmd->parsed()) {
      if (prof_out.empty()) std::cerr << config_echo(*prof_cmd) << '\n';
      else write_config_echo(*prof_cmd, prof_out, "profile");
      run_profile(prof);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
