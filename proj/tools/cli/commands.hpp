#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tubelet/classifier.hpp"
#include "tubelet/synth.hpp"
#include "tubelet/tracker.hpp"

namespace tubelet::cli {

/// Bad flag combination detected after parsing; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrackerOptions {
  double iou_threshold = 0.5;
  int min_hits = 3;
  int min_length = 5;
  int max_age = 3;
  TrackerParams resolve() const;
};

struct ModelOptions {
  std::string layer = "F4";
  std::string embed = "last";
  int base_width = 0;  // 0: layer default
  int epochs = 500;
  double lr = 1e-5;
  std::uint64_t seed = 0;
  double w_ins = 1.0;
  double w_tubelet = 1.0;
  ClassifierConfig resolve() const;
};

struct FoldOptions {
  int folds = 5;
  std::uint64_t fold_seed = 0;
  std::string stratify = "none";  // none, pe or con
};

struct SynthOptions {
  std::filesystem::path out;
  SynthConfig config;
  std::vector<std::string> layers{"IMG", "F2", "F4", "F6", "F8"};
};

struct TrainOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  std::string pathology = "pe";
  std::string fold = "0";
  ModelOptions model;
  FoldOptions folds;
  TrackerOptions tracker;
};

struct InferOptions {
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::filesystem::path out;
  std::string layer = "F4";
  int jobs = 1;
  TrackerOptions tracker;
};

struct EvalOptions {
  std::filesystem::path data;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::string> names;
  std::filesystem::path out;
  std::optional<int> fold;
  std::string split = "test";
  bool profile = false;
  int jobs = 1;
  TrackerOptions tracker;
};

struct ProfileOptions {
  ModelOptions model;
  int frames = 16;
};

void run_synth(const SynthOptions& o);
void run_train(const TrainOptions& o);
void run_infer(const InferOptions& o);
void run_eval(const EvalOptions& o);
void run_profile(const ProfileOptions& o);

}  // namespace tubelet::cli
