#include "tubelet/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "tubelet/errors.hpp"

namespace tubelet {

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

VideoPrediction classify_video(const std::string& video_id, const PerFrameBoxes& detections,
                               const FeatureVolume& volume, int frame_width, int frame_height, const Model& model,
                               const TrackerParams& tracker) {
  if (static_cast<int>(detections.size()) != volume.frames)
    throw std::invalid_argument("classify_video: " + video_id + " has detections for " +
                                std::to_string(detections.size()) + " frames but " + std::to_string(volume.frames) +
                                " feature frames");
  if (volume.channels != model.config.in_channels)
    throw std::invalid_argument("classify_video: feature volume has " + std::to_string(volume.channels) +
                                " channels, model expects " + std::to_string(model.config.in_channels));
  VideoPrediction out;
  out.video_id = video_id;
  for (const auto& tr : track_video(std::span<const std::vector<BoundingBox>>(detections), tracker)) {
    const Tubelet tb = build_tubelet(tr, volume, frame_width, frame_height, model.config.roi_res);
    const TubeletScores s = classify_tubelet(tb, model.params, model.config);
    TubeletPrediction p;
    p.track_id = tb.track_id;
    p.first_frame = tb.frames.front();
    p.last_frame = tb.frames.back();
    p.box = tb.box;
    p.confidence = sigmoid(s.tubelet_logit);
    out.confidence = std::max(out.confidence, p.confidence);
    out.tubelets.push_back(p);
  }
  return out;
}

VideoSample load_video_sample(const Manifest& manifest, const VideoRecord& record, LayerTag layer,
                              const TrackerParams& tracker) {
  const auto it = record.features_path.find(layer);
  if (it == record.features_path.end())
    throw std::invalid_argument("video " + record.video_id + " has no " + std::string(to_string(layer)) +
                                " features");
  VideoSample s;
  s.record = record;
  s.volume = read_feature_volume(manifest.resolve(it->second));
  if (s.volume.frames != record.frames)
    throw FormatError("frames", "video " + record.video_id + ": feature volume has " +
                                    std::to_string(s.volume.frames) + " frames, manifest says " +
                                    std::to_string(record.frames));
  s.detections = read_detections(manifest.resolve(record.detections_path), record.frames);
  if (!record.gt_path.empty()) s.truth = read_ground_truth(manifest.resolve(record.gt_path), record.frames);
  s.tracklets = track_video(std::span<const std::vector<BoundingBox>>(s.detections), tracker);
  return s;
}

Tubelet labeled_tubelet(const VideoSample& sample, std::size_t index, int roi_res, Pathology pathology) {
  Tubelet tb =
      build_tubelet(sample.tracklets.at(index), sample.volume, sample.record.width, sample.record.height, roi_res);
  const PerFrameBoxes gt = pathology_boxes(sample.truth, pathology);
  label_tubelet(tb, gt);
  return tb;
}

std::vector<VideoPrediction> predict_videos(std::span<const VideoSample> samples, const Model& model,
                                            const TrackerParams& tracker, int jobs) {
  if (jobs < 1) throw std::invalid_argument("predict_videos: jobs must be >= 1");
  std::vector<VideoPrediction> out(samples.size());
  auto run = [&](std::size_t i) {
    const auto& s = samples[i];
    out[i] = classify_video(s.record.video_id, s.detections, s.volume, s.record.width, s.record.height, model,
                            tracker);
  };
  if (jobs == 1 || samples.size() < 2) {
    for (std::size_t i = 0; i < samples.size(); ++i) run(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), samples.size());
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < samples.size(); i = next++) {
        try {
          run(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

TrainResult train_on_samples(std::span<const VideoSample> samples, std::span<const int> train_videos,
                             const ClassifierConfig& cfg, Pathology pathology,
                             const std::function<void(const EpochLog&)>& on_epoch) {
  std::vector<std::pair<std::size_t, std::size_t>> index;
  for (int v : train_videos) {
    const auto& s = samples[static_cast<std::size_t>(v)];
    for (std::size_t k = 0; k < s.tracklets.size(); ++k) index.emplace_back(static_cast<std::size_t>(v), k);
  }
  if (index.empty()) throw DegenerateInputError("training videos yield no tubelets");
  // Tubelets are built once and reused by every epoch.
  std::vector<Tubelet> tubelets;
  tubelets.reserve(index.size());
  for (const auto& [v, k] : index) tubelets.push_back(labeled_tubelet(samples[v], k, cfg.roi_res, pathology));
  return train(tubelets, cfg, on_epoch);
}

FoldResult run_fold(std::span<const VideoSample> samples, const FoldAssignment& folds, int fold,
                    const ClassifierConfig& cfg, Pathology pathology, const TrackerParams& tracker,
                    const std::function<void(const EpochLog&)>& on_epoch) {
  if (folds.video_fold.size() != samples.size())
    throw std::invalid_argument("run_fold: fold assignment does not match the sample list");
  if (fold < 0 || fold >= folds.folds) throw std::invalid_argument("run_fold: fold out of range");
  const auto train_idx = folds.videos_outside(fold);
  FoldResult r;
  r.fold = fold;
  r.test_videos = folds.videos_in(fold);
  for (int v : train_idx) r.train_tubelets += samples[static_cast<std::size_t>(v)].tracklets.size();
  TrainResult trained = train_on_samples(samples, train_idx, cfg, pathology, on_epoch);
  Model model{std::move(trained.params), cfg};
  std::vector<VideoSample> held;
  for (int v : r.test_videos) held.push_back(samples[static_cast<std::size_t>(v)]);
  r.predictions = predict_videos(held, model, tracker);
  std::vector<double> scores;
  for (std::size_t i = 0; i < held.size(); ++i) {
    scores.push_back(r.predictions[i].confidence);
    r.labels.push_back(held[i].record.label(pathology));
  }
  r.auroc = auroc(scores, r.labels);
  return r;
}

void write_predictions(const std::filesystem::path& path, std::span<const VideoPrediction> predictions) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : predictions) {
    nlohmann::json tubes = nlohmann::json::array();
    for (const auto& t : p.tubelets)
      tubes.push_back({{"track_id", t.track_id},
                       {"first_frame", t.first_frame},
                       {"last_frame", t.last_frame},
                       {"box", {t.box.x1, t.box.y1, t.box.x2, t.box.y2}},
                       {"box_conf", t.box.confidence},
                       {"confidence", t.confidence}});
    out << nlohmann::json{{"video_id", p.video_id}, {"confidence", p.confidence}, {"tubelets", tubes}}.dump()
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<VideoPrediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<VideoPrediction> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      VideoPrediction p;
      p.video_id = j.at("video_id").get<std::string>();
      p.confidence = j.at("confidence").get<double>();
      for (const auto& t : j.value("tubelets", nlohmann::json::array())) {
        TubeletPrediction tp;
        tp.track_id = t.at("track_id").get<int>();
        tp.first_frame = t.at("first_frame").get<int>();
        tp.last_frame = t.at("last_frame").get<int>();
        const auto& b = t.at("box");
        tp.box = UnionBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>(),
                          t.value("box_conf", 0.0)};
        tp.confidence = t.at("confidence").get<double>();
        p.tubelets.push_back(tp);
      }
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(line_no), path.string() + ": " + e.what());
    }
  }
  return out;
}

double MetricsRow::mean() const {
  if (fold_auroc.empty()) return 0;
  double s = 0;
  for (double v : fold_auroc) s += v;
  return s / static_cast<double>(fold_auroc.size());
}

double MetricsRow::stddev() const {
  if (fold_auroc.size() < 2) return 0;
  const double m = mean();
  double ss = 0;
  for (double v : fold_auroc) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(fold_auroc.size() - 1));
}

std::string format_metrics_table(std::span<const MetricsRow> rows) {
  std::size_t name_w = 6, folds = 0;
  for (const auto& r : rows) {
    name_w = std::max(name_w, r.name.size());
    folds = std::max(folds, r.fold_auroc.size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "config";
  for (std::size_t f = 0; f < folds; ++f) os << "  " << std::right << std::setw(6) << ("f" + std::to_string(f));
  os << "  " << std::setw(6) << "mean" << "  " << std::setw(6) << "std" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r.name << std::right;
    for (std::size_t f = 0; f < folds; ++f) {
      os << "  " << std::setw(6);
      if (f < r.fold_auroc.size()) os << r.fold_auroc[f];
      else os << "-";
    }
    os << "  " << std::setw(6) << r.mean() << "  " << std::setw(6) << r.stddev() << '\n';
  }
  return os.str();
}

}  // namespace tubelet
