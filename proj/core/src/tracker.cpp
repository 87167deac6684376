#include "tubelet/tracker.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tubelet {

namespace {

using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat7 = Eigen::Matrix<double, 7, 7>;
using Mat47 = Eigen::Matrix<double, 4, 7>;

Mat7 transition() {
  Mat7 f = Mat7::Identity();
  f(0, 4) = f(1, 5) = f(2, 6) = 1.0;
  return f;
}

Mat47 observation() {
  Mat47 h = Mat47::Zero();
  for (int i = 0; i < 4; ++i) h(i, i) = 1.0;
  return h;
}

void validate_box(const BoundingBox& b) {
  if (!(b.x1 <= b.x2 && b.y1 <= b.y2))
    throw std::invalid_argument("detection box has x1 > x2 or y1 > y2");
}

}  // namespace

Eigen::Vector4d box_to_measurement(const BoundingBox& box) {
  const double w = box.width(), h = box.height();
  return {box.x1 + w / 2.0, box.y1 + h / 2.0, w * h, h > 0 ? w / h : 0.0};
}

BoundingBox state_to_box(const TrackState& track, double confidence) {
  const double s = std::max(track.mean(2), 0.0);
  const double r = std::max(track.mean(3), 0.0);
  const double w = std::sqrt(s * r);
  const double h = w > 0 ? s / w : 0.0;
  return {track.mean(0) - w / 2.0, track.mean(1) - h / 2.0, track.mean(0) + w / 2.0, track.mean(1) + h / 2.0,
          confidence};
}

TrackState make_track(const BoundingBox& det, int track_id, const KalmanConfig& cfg) {
  TrackState t;
  t.mean.head<4>() = box_to_measurement(det);
  t.covariance = cfg.initial_covariance.asDiagonal();
  t.track_id = track_id;
  return t;
}

TrackState kalman_predict(TrackState track, const KalmanConfig& cfg) {
  // Area cannot shrink below zero.
  if (track.mean(6) + track.mean(2) <= 0) track.mean(6) = 0.0;
  static const Mat7 f = transition();
  track.mean = f * track.mean;
  Mat7 p = f * track.covariance * f.transpose();
  p.diagonal() += cfg.process_noise;
  track.covariance = 0.5 * (p + p.transpose());
  ++track.age;
  if (track.time_since_update > 0) track.hit_streak = 0;
  ++track.time_since_update;
  return track;
}

TrackState kalman_update(TrackState track, const BoundingBox& det, const KalmanConfig& cfg) {
  static const Mat47 h = observation();
  const Eigen::Vector4d z = box_to_measurement(det);
  const Eigen::Vector4d innovation = z - h * track.mean;
  Eigen::Matrix4d s = h * track.covariance * h.transpose();
  s.diagonal() += cfg.measurement_noise;
  const Eigen::Matrix<double, 7, 4> gain = track.covariance * h.transpose() * s.inverse();
  track.mean += gain * innovation;
  // Joseph form keeps the posterior symmetric positive semi-definite.
  const Mat7 ikh = Mat7::Identity() - gain * h;
  Mat7 p = ikh * track.covariance * ikh.transpose() +
           gain * cfg.measurement_noise.asDiagonal() * gain.transpose();
  track.covariance = 0.5 * (p + p.transpose());
  track.time_since_update = 0;
  ++track.hits;
  ++track.hit_streak;
  return track;
}

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  if (rows == 0 || cols == 0) return std::vector<int>(rows, -1);
  if (rows > cols) {
    const std::vector<int> t = solve_assignment(cost.transpose());
    std::vector<int> out(rows, -1);
    for (int c = 0; c < cols; ++c)
      if (t[c] >= 0) out[t[c]] = c;
    return out;
  }
  // Shortest augmenting path with row/column potentials; 1-based, column 0
  // is a virtual start.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  return out;
}

Association associate(std::span<const BoundingBox> detections, std::span<const BoundingBox> predicted,
                      double iou_threshold) {
  Association result;
  const int nd = static_cast<int>(detections.size());
  const int nt = static_cast<int>(predicted.size());
  if (nt == 0 || nd == 0) {
    for (int d = 0; d < nd; ++d) result.unmatched_detections.push_back(d);
    for (int t = 0; t < nt; ++t) result.unmatched_tracks.push_back(t);
    return result;
  }
  Eigen::MatrixXd overlap(nd, nt);
  for (int d = 0; d < nd; ++d)
    for (int t = 0; t < nt; ++t) {
      const double v = iou(detections[d], predicted[t]);
      overlap(d, t) = v >= iou_threshold ? v : 0.0;
    }
  const std::vector<int> assignment = solve_assignment(-overlap);
  std::vector<char> track_used(nt, 0);
  for (int d = 0; d < nd; ++d) {
    const int t = assignment[d];
    if (t >= 0 && overlap(d, t) > 0.0) {
      result.matches.emplace_back(d, t);
      track_used[t] = 1;
    } else {
      result.unmatched_detections.push_back(d);
    }
  }
  for (int t = 0; t < nt; ++t)
    if (!track_used[t]) result.unmatched_tracks.push_back(t);
  return result;
}

SortTracker::SortTracker(TrackerParams params) : params_(std::move(params)) {
  if (params_.hit_threshold < 1 || params_.min_track_length < 1 || params_.max_age < 0)
    throw std::invalid_argument("tracker: hit_threshold and min_track_length must be >= 1, max_age >= 0");
}

void SortTracker::step(int frame, std::span<const BoundingBox> detections) {
  if (frame <= last_frame_)
    throw std::invalid_argument("tracker: frame " + std::to_string(frame) + " does not follow frame " +
                                std::to_string(last_frame_));
  for (const auto& d : detections) validate_box(d);
  last_frame_ = frame;

  std::vector<BoundingBox> predicted;
  predicted.reserve(tracks_.size());
  for (auto& t : tracks_) {
    t = kalman_predict(std::move(t), params_.kalman);
    const BoundingBox p = state_to_box(t);
    t.history.push_back({frame, p, false});
    predicted.push_back(p);
  }

  const Association a = associate(detections, predicted, params_.iou_threshold);
  for (const auto& [d, ti] : a.matches) {
    TrackState& t = tracks_[ti];
    t = kalman_update(std::move(t), detections[d], params_.kalman);
    t.history.back() = {frame, detections[d], true};
    if (t.hit_streak >= params_.hit_threshold) t.confirmed = true;
  }
  for (int d : a.unmatched_detections) {
    TrackState t = make_track(detections[d], next_id_++, params_.kalman);
    t.hits = 1;
    t.hit_streak = 1;
    t.history.push_back({frame, detections[d], true});
    if (t.hit_streak >= params_.hit_threshold) t.confirmed = true;
    tracks_.push_back(std::move(t));
  }

  std::vector<TrackState> alive;
  alive.reserve(tracks_.size());
  for (auto& t : tracks_) {
    if (t.time_since_update > params_.max_age) {
      retire(t);
    } else {
      alive.push_back(std::move(t));
    }
  }
  tracks_ = std::move(alive);
}

void SortTracker::retire(TrackState& track) {
  if (!track.confirmed) return;
  auto& h = track.history;
  while (!h.empty() && !h.back().matched) h.pop_back();
  std::size_t first = 0;
  if (!params_.include_tentative) {
    // Drop the boxes recorded before the streak reached the hit threshold.
    int streak = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      streak = h[i].matched ? streak + 1 : 0;
      if (streak >= params_.hit_threshold) {
        first = i;
        break;
      }
    }
  }
  Tracklet out;
  out.track_id = track.track_id;
  for (std::size_t i = first; i < h.size(); ++i) {
    out.frames.push_back(h[i].frame);
    out.boxes.push_back(h[i].box);
  }
  if (out.length() >= params_.min_track_length) emitted_.push_back(std::move(out));
}

std::vector<Tracklet> SortTracker::finish() {
  for (auto& t : tracks_) retire(t);
  tracks_.clear();
  std::vector<Tracklet> out = std::move(emitted_);
  emitted_.clear();
  std::sort(out.begin(), out.end(), [](const Tracklet& a, const Tracklet& b) { return a.track_id < b.track_id; });
  return out;
}

std::vector<Tracklet> track_video(std::span<const FrameDetections> frames, const TrackerParams& params) {
  SortTracker tracker(params);
  for (const auto& f : frames) tracker.step(f.frame, f.boxes);
  return tracker.finish();
}

std::vector<Tracklet> track_video(std::span<const std::vector<BoundingBox>> per_frame, const TrackerParams& params) {
  SortTracker tracker(params);
  for (std::size_t t = 0; t < per_frame.size(); ++t) tracker.step(static_cast<int>(t), per_frame[t]);
  return tracker.finish();
}

}  // namespace tubelet
