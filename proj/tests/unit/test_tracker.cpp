#include <doctest.h>

#include <Eigen/Dense>

#include <random>

#include "oracles.hpp"
#include "tubelet/tracker.hpp"

using namespace tubelet;

namespace {

using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat7 = Eigen::Matrix<double, 7, 7>;

std::vector<std::vector<BoundingBox>> stationary(const BoundingBox& b, int frames) {
  return std::vector<std::vector<BoundingBox>>(frames, std::vector<BoundingBox>{b});
}

}  // namespace

TEST_CASE("kalman_predict propagates with constant velocity") {
  TrackState t = make_track({10, 20, 30, 60, 0.9}, 1);
  const Vec7 before = t.mean;
  TrackState p = kalman_predict(t);
  CHECK((p.mean - before).norm() == 0.0);
  CHECK(p.time_since_update == 1);

  t.mean(4) = 2.0;
  p = kalman_predict(t);
  CHECK(p.mean(0) == doctest::Approx(before(0) + 2.0));

  t.mean(4) = 0.7;
  t.mean(5) = -0.3;
  t.mean(6) = 1.5;
  TrackState q = t;
  for (int i = 0; i < 10; ++i) q = kalman_predict(q);
  CHECK(q.mean(0) == doctest::Approx(before(0) + 7.0).epsilon(1e-12));
  CHECK(q.mean(1) == doctest::Approx(before(1) - 3.0).epsilon(1e-12));
  CHECK(q.mean(2) == doctest::Approx(before(2) + 15.0).epsilon(1e-12));
  CHECK(q.mean(3) == before(3));
  CHECK(q.time_since_update == 10);
}

TEST_CASE("kalman_update matches the textbook formulas") {
  KalmanConfig cfg;
  TrackState t = make_track({10, 20, 30, 60, 0.9}, 1, cfg);
  t.mean(4) = 1.0;
  t = kalman_predict(t, cfg);
  const BoundingBox det{12, 21, 33, 59, 0.8};

  // Direct evaluation: K = P H^T (H P H^T + R)^-1, x' = x + K (z - H x),
  // P' = (I - K H) P.
  Eigen::Matrix<double, 4, 7> h = Eigen::Matrix<double, 4, 7>::Zero();
  for (int i = 0; i < 4; ++i) h(i, i) = 1;
  const Eigen::Matrix4d r = cfg.measurement_noise.asDiagonal();
  const Mat7 p = t.covariance;
  const Eigen::Matrix<double, 7, 4> k = p * h.transpose() * (h * p * h.transpose() + r).inverse();
  const double w = det.x2 - det.x1, hh = det.y2 - det.y1;
  const Eigen::Vector4d z((det.x1 + det.x2) / 2, (det.y1 + det.y2) / 2, w * hh, w / hh);
  const Vec7 mean = t.mean + k * (z - h * t.mean);
  const Mat7 cov = (Mat7::Identity() - k * h) * p;

  const TrackState u = kalman_update(t, det, cfg);
  CHECK((u.mean - mean).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((u.covariance - cov).cwiseAbs().maxCoeff() < 1e-6 * cov.cwiseAbs().maxCoeff());
  CHECK(u.time_since_update == 0);
  CHECK(u.hit_streak == t.hit_streak + 1);

  // Symmetric PSD, and no larger than the prior in the measured block.
  CHECK((u.covariance - u.covariance.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<Mat7> eig(u.covariance);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-9);
  const Eigen::Matrix4d shrink = (p - u.covariance).topLeftCorner<4, 4>();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig4(shrink);
  CHECK(eig4.eigenvalues().minCoeff() >= -1e-9);
}

TEST_CASE("kalman_update limiting cases") {
  TrackState t = make_track({10, 20, 30, 60, 0.9}, 1);
  t = kalman_predict(t);
  const BoundingBox same = state_to_box(t);
  const TrackState u = kalman_update(t, same);
  CHECK((u.mean - t.mean).cwiseAbs().maxCoeff() < 1e-9);

  KalmanConfig precise;
  precise.measurement_noise = Eigen::Vector4d::Constant(1e-10);
  TrackState s = kalman_predict(make_track({10, 20, 30, 60}, 1, precise), precise);
  const BoundingBox det{14, 22, 36, 63};
  const TrackState v = kalman_update(s, det, precise);
  const BoundingBox post = state_to_box(v);
  CHECK(std::abs(post.x1 - det.x1) < 1e-3);
  CHECK(std::abs(post.y1 - det.y1) < 1e-3);
  CHECK(std::abs(post.x2 - det.x2) < 1e-3);
  CHECK(std::abs(post.y2 - det.y2) < 1e-3);
}

TEST_CASE("associate examples") {
  const std::vector<BoundingBox> dets{{0, 0, 10, 10}, {20, 20, 30, 30}};
  const auto none = associate(dets, {}, 0.5);
  CHECK(none.matches.empty());
  CHECK(none.unmatched_detections == std::vector<int>{0, 1});

  const std::vector<BoundingBox> one_det{{0, 0, 10, 10}};
  const std::vector<BoundingBox> one_trk{{0, 0, 10, 9}};
  const auto m = associate(one_det, one_trk, 0.5);
  REQUIRE(m.matches.size() == 1);
  CHECK(m.matches[0] == std::pair<int, int>{0, 0});

  const std::vector<BoundingBox> far{{0, 0, 10, 4}};
  const auto low = associate(one_det, far, 0.5);
  CHECK(low.matches.empty());
  CHECK(low.unmatched_tracks == std::vector<int>{0});
}

TEST_CASE("associate reaches the brute-force optimum on random 4x4 problems") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> pos(0, 12), size(4, 10);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<BoundingBox> dets, trks;
    for (int i = 0; i < 4; ++i) {
      double x = pos(rng), y = pos(rng);
      dets.push_back({x, y, x + size(rng), y + size(rng)});
      x = pos(rng);
      y = pos(rng);
      trks.push_back({x, y, x + size(rng), y + size(rng)});
    }
    std::vector<std::vector<double>> m(4, std::vector<double>(4));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) m[i][j] = iou(dets[i], trks[j]);
    const auto a = associate(dets, trks, 0.5);
    double total = 0;
    for (auto [d, t] : a.matches) {
      CHECK(m[d][t] >= 0.5);
      total += m[d][t];
    }
    CHECK(total == doctest::Approx(oracle::best_assignment_value(m, 0.5)).epsilon(1e-12));
    CHECK(a.matches.size() + a.unmatched_detections.size() == 4);
    CHECK(a.matches.size() + a.unmatched_tracks.size() == 4);
  }
}

TEST_CASE("solve_assignment handles rectangular costs") {
  Eigen::MatrixXd c(3, 2);
  c << 1, 9, 9, 1, 0, 5;
  const auto r = solve_assignment(c);
  // Unique optimum: row 2 takes column 0, row 0 is left out.
  CHECK(r == std::vector<int>{-1, 1, 0});
  Eigen::MatrixXd wide(1, 3);
  wide << 5, 2, 7;
  CHECK(solve_assignment(wide) == std::vector<int>{1});
}

TEST_CASE("track_video examples") {
  const BoundingBox box{10, 10, 30, 30, 0.9};
  auto one = track_video(stationary(box, 8));
  REQUIRE(one.size() == 1);
  CHECK(one[0].length() == 8);
  CHECK(one[0].track_id == 1);
  CHECK(one[0].frames == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});

  std::vector<std::vector<BoundingBox>> brief(10);
  brief[3] = {box};
  brief[4] = {box};
  CHECK(track_video(brief).empty());

  std::vector<std::vector<BoundingBox>> two(10, std::vector<BoundingBox>{box, {60, 60, 80, 90, 0.7}});
  const auto pair = track_video(two);
  REQUIRE(pair.size() == 2);
  CHECK(pair[0].track_id != pair[1].track_id);
  CHECK(pair[0].length() == 10);
  CHECK(pair[1].length() == 10);
}

TEST_CASE("track_video rejects unordered frames") {
  SortTracker t;
  t.step(0, {});
  t.step(2, {});
  CHECK_THROWS_AS(t.step(2, {}), std::invalid_argument);
  CHECK_THROWS_AS(t.step(1, {}), std::invalid_argument);
  std::vector<FrameDetections> frames(2);
  frames[0].frame = 3;
  frames[1].frame = 1;
  CHECK_THROWS_AS(track_video(frames), std::invalid_argument);
}

TEST_CASE("gap frames carry the predicted box and tentative frames are kept") {
  const BoundingBox box{10, 10, 30, 30, 0.9};
  auto frames = stationary(box, 9);
  frames[4].clear();
  const auto out = track_video(frames);
  REQUIRE(out.size() == 1);
  CHECK(out[0].length() == 9);
  CHECK(out[0].boxes[4].confidence == 0.0);
  CHECK(std::abs(out[0].boxes[4].x1 - 10) < 1e-6);
  CHECK(out[0].boxes[0] == box);

  TrackerParams drop;
  drop.include_tentative = false;
  const auto confirmed_only = track_video(stationary(box, 8), drop);
  REQUIRE(confirmed_only.size() == 1);
  CHECK(confirmed_only[0].frames.front() == 2);
  CHECK(confirmed_only[0].length() == 6);
}

TEST_CASE("a track unmatched for longer than max_age ends and trailing gaps are trimmed") {
  const BoundingBox box{10, 10, 30, 30, 0.9};
  std::vector<std::vector<BoundingBox>> frames(20);
  for (int t = 0; t < 6; ++t) frames[t] = {box};
  for (int t = 12; t < 18; ++t) frames[t] = {box};
  const auto out = track_video(frames);
  REQUIRE(out.size() == 2);
  CHECK(out[0].frames == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(out[1].frames.front() == 12);
  CHECK(out[1].frames.back() == 17);
  CHECK(out[0].track_id < out[1].track_id);
}

TEST_CASE("tracklets respect the minimum length and are deterministic") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> pos(0, 100), size(5, 25), u(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<BoundingBox>> frames(15);
    for (auto& f : frames) {
      const int n = static_cast<int>(u(rng) * 4);
      for (int i = 0; i < n; ++i) {
        const double x = pos(rng), y = pos(rng);
        f.push_back({x, y, x + size(rng), y + size(rng), u(rng)});
      }
      if (u(rng) < 0.7) f.push_back({40, 40, 60, 60, 0.8});
    }
    const auto a = track_video(frames);
    CHECK(a == track_video(frames));
    for (const auto& t : a) {
      CHECK(t.length() >= 5);
      for (std::size_t i = 1; i < t.frames.size(); ++i) CHECK(t.frames[i] > t.frames[i - 1]);
    }
  }
}

TEST_CASE("gapless non-overlapping streams match greedy IoU chaining") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> vel(-0.8, 0.8), size(12, 24), u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<BoundingBox>> frames(12);
    // Objects live in disjoint 60-pixel cells, so they never overlap.
    for (int cell = 0; cell < 4; ++cell) {
      const int first = static_cast<int>(u(rng) * 5), last = 12 - static_cast<int>(u(rng) * 5);
      double x = cell * 60 + 15, y = 15;
      const double w = size(rng), h = size(rng), vx = vel(rng), vy = vel(rng);
      for (int t = first; t < last; ++t) {
        frames[t].push_back({x, y, x + w, y + h, 0.9});
        x += vx;
        y += vy;
      }
    }
    const auto got = track_video(frames);
    const auto want = oracle::greedy_chains(frames, 0.5, 5);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].frames == want[i].frames);
      CHECK(got[i].boxes == want[i].boxes);
    }
  }
}
