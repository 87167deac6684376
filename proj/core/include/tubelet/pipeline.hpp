#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tubelet/classifier.hpp"
#include "tubelet/data_io.hpp"
#include "tubelet/metrics.hpp"
#include "tubelet/tracker.hpp"
#include "tubelet/tubelet.hpp"

namespace tubelet {

struct TubeletPrediction {
  int track_id = 0;
  int first_frame = 0;
  int last_frame = 0;
  UnionBox box;
  double confidence = 0;
};

struct VideoPrediction {
  std::string video_id;
  /// Max tubelet confidence, 0 when the video yields no tubelet.
  double confidence = 0;
  std::vector<TubeletPrediction> tubelets;
};

/// Tracks the detections, builds one tubelet per tracklet, and scores the
/// video as the maximum tubelet probability. `detections` must cover exactly
/// the volume's frames.
VideoPrediction classify_video(const std::string& video_id, const PerFrameBoxes& detections,
                               const FeatureVolume& volume, int frame_width, int frame_height, const Model& model,
                               const TrackerParams& tracker = {});

/// Everything needed to build the tubelets of one video for one layer.
struct VideoSample {
  VideoRecord record;
  FeatureVolume volume;
  PerFrameBoxes detections;
  GroundTruth truth;
  std::vector<Tracklet> tracklets;
};

VideoSample load_video_sample(const Manifest& manifest, const VideoRecord& record, LayerTag layer,
                              const TrackerParams& tracker = {});

/// Tubelet `index` of `sample`, labeled against the given pathology.
Tubelet labeled_tubelet(const VideoSample& sample, std::size_t index, int roi_res, Pathology pathology);

/// Predictions run `jobs` videos concurrently; output keeps manifest order.
std::vector<VideoPrediction> predict_videos(std::span<const VideoSample> samples, const Model& model,
                                            const TrackerParams& tracker = {}, int jobs = 1);

/// Trains on every tubelet of `train_videos`, in sample order.
TrainResult train_on_samples(std::span<const VideoSample> samples, std::span<const int> train_videos,
                             const ClassifierConfig& cfg, Pathology pathology,
                             const std::function<void(const EpochLog&)>& on_epoch = {});

struct FoldResult {
  int fold = 0;
  std::size_t train_tubelets = 0;
  std::vector<int> test_videos;
  std::vector<VideoPrediction> predictions;
  std::vector<int> labels;
  double auroc = 0;
};

/// Trains on all folds but `fold` and scores the held-out videos.
FoldResult run_fold(std::span<const VideoSample> samples, const FoldAssignment& folds, int fold,
                    const ClassifierConfig& cfg, Pathology pathology, const TrackerParams& tracker = {},
                    const std::function<void(const EpochLog&)>& on_epoch = {});

/// Predictions file: one JSON object per line.
void write_predictions(const std::filesystem::path& path, std::span<const VideoPrediction> predictions);
std::vector<VideoPrediction> read_predictions(const std::filesystem::path& path);

struct MetricsRow {
  std::string name;
  std::vector<double> fold_auroc;
  double mean() const;
  double stddev() const;
};

/// Fixed-width text table: one row per configuration, one column per fold.
std::string format_metrics_table(std::span<const MetricsRow> rows);

}  // namespace tubelet
