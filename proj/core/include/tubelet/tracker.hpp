#pragma once

#include <Eigen/Core>

#include <span>
#include <utility>
#include <vector>

#include "tubelet/box.hpp"

namespace tubelet {

/// Noise magnitudes of the constant-velocity box model. Defaults are the
/// reference SORT constants.
struct KalmanConfig {
  Eigen::Vector4d measurement_noise{1.0, 1.0, 10.0, 10.0};
  Eigen::Matrix<double, 7, 1> initial_covariance =
      (Eigen::Matrix<double, 7, 1>() << 10, 10, 10, 10, 1e4, 1e4, 1e4).finished();
  Eigen::Matrix<double, 7, 1> process_noise =
      (Eigen::Matrix<double, 7, 1>() << 1, 1, 1, 1, 1e-2, 1e-2, 1e-4).finished();
};

struct TrackPoint {
  int frame = 0;
  BoundingBox box;
  bool matched = false;
};

/// Kalman state over [cx, cy, area, aspect, v_cx, v_cy, v_area].
struct TrackState {
  Eigen::Matrix<double, 7, 1> mean = Eigen::Matrix<double, 7, 1>::Zero();
  Eigen::Matrix<double, 7, 7> covariance = Eigen::Matrix<double, 7, 7>::Identity();
  int track_id = 0;
  int hits = 0;
  int hit_streak = 0;
  int time_since_update = 0;
  int age = 0;
  bool confirmed = false;
  std::vector<TrackPoint> history;
};

struct Tracklet {
  int track_id = 0;
  std::vector<int> frames;
  std::vector<BoundingBox> boxes;

  int length() const noexcept { return static_cast<int>(frames.size()); }
  friend bool operator==(const Tracklet&, const Tracklet&) = default;
};

struct TrackerParams {
  double iou_threshold = 0.5;
  int hit_threshold = 3;
  int min_track_length = 5;
  int max_age = 3;
  /// Keep the boxes recorded before a track reached the hit threshold.
  bool include_tentative = true;
  KalmanConfig kalman;
};

Eigen::Vector4d box_to_measurement(const BoundingBox& box);
BoundingBox state_to_box(const TrackState& track, double confidence = 0.0);

TrackState make_track(const BoundingBox& det, int track_id, const KalmanConfig& cfg = {});
TrackState kalman_predict(TrackState track, const KalmanConfig& cfg = {});
TrackState kalman_update(TrackState track, const BoundingBox& det, const KalmanConfig& cfg = {});

/// Minimum-cost perfect assignment on a rectangular cost matrix (Hungarian
/// method). Returns, per row, the assigned column or -1 when rows > cols.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

struct Association {
  std::vector<std::pair<int, int>> matches;  // (detection, track)
  std::vector<int> unmatched_detections;
  std::vector<int> unmatched_tracks;
};

/// One-to-one matching maximising the summed IoU over pairs whose IoU reaches
/// the threshold; weaker pairs are left unmatched.
Association associate(std::span<const BoundingBox> detections, std::span<const BoundingBox> predicted,
                      double iou_threshold);

struct FrameDetections {
  int frame = 0;
  std::vector<BoundingBox> boxes;
};

/// Online SORT tracker. Frames must be fed in strictly ascending order.
class SortTracker {
 public:
  explicit SortTracker(TrackerParams params = {});

  void step(int frame, std::span<const BoundingBox> detections);
  /// Closes every live track and returns all emitted tracklets by track id.
  std::vector<Tracklet> finish();

  const std::vector<TrackState>& live_tracks() const noexcept { return tracks_; }

 private:
  void retire(TrackState& track);

  TrackerParams params_;
  std::vector<TrackState> tracks_;
  std::vector<Tracklet> emitted_;
  int next_id_ = 1;
  int last_frame_ = -1;
};

std::vector<Tracklet> track_video(std::span<const FrameDetections> frames, const TrackerParams& params = {});
/// Dense variant: element t holds the detections of frame t.
std::vector<Tracklet> track_video(std::span<const std::vector<BoundingBox>> per_frame,
                                  const TrackerParams& params = {});

}  // namespace tubelet
