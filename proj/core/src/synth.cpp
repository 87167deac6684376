#include "tubelet/synth.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "tubelet/errors.hpp"
#include "tubelet/ops.hpp"
#include "tubelet/random.hpp"

namespace tubelet {

namespace {

constexpr std::uint64_t kVideoStream = 1;
constexpr std::uint64_t kDetectorStream = 2;
constexpr std::uint64_t kBackboneStream = 3;

struct Blob {
  double cx, cy, vx, vy, radius, intensity;
  bool pe = false, con = false;

  double x_at(int t) const { return cx + vx * t; }
  double y_at(int t) const { return cy + vy * t; }
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool inside_band(const Blob& b, Band band, int frames, double height) {
  for (int t : {0, frames - 1}) {
    const double y = b.y_at(t) / height;
    if (y < band.lo || y > band.hi) return false;
  }
  return true;
}

bool clear_of(const Blob& b, const std::vector<Blob>& others, int frames) {
  for (const auto& o : others)
    for (int t = 0; t < frames; ++t) {
      const double d = std::hypot(b.x_at(t) - o.x_at(t), b.y_at(t) - o.y_at(t));
      if (d < b.radius + o.radius + 2.0) return false;
    }
  return true;
}

// Rejection-samples a blob whose whole trajectory stays inside `band` and
// apart from the already placed blobs.
Blob place_blob(std::mt19937_64& rng, const SynthConfig& cfg, Band band, bool large,
                const std::vector<Blob>& placed) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Blob b{};
    b.radius = large ? uniform(rng, cfg.large_radius_min, cfg.large_radius_max)
                     : uniform(rng, cfg.small_radius_min, cfg.small_radius_max);
    b.cx = uniform(rng, 0.2 * cfg.width, 0.8 * cfg.width);
    b.cy = uniform(rng, band.lo * cfg.height, band.hi * cfg.height);
    const double speed = uniform(rng, 0.0, cfg.max_speed);
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    b.vx = speed * std::cos(angle);
    b.vy = speed * std::sin(angle);
    b.intensity = uniform(rng, cfg.intensity_min, cfg.intensity_max);
    const double x_end = b.x_at(cfg.frames - 1);
    if (x_end < 0.15 * cfg.width || x_end > 0.85 * cfg.width) continue;
    if (!inside_band(b, band, cfg.frames, cfg.height)) continue;
    if (!clear_of(b, placed, cfg.frames)) continue;
    return b;
  }
  throw std::runtime_error("synth: could not place a blob; frame too small for the configured radii");
}

BoundingBox blob_box(const Blob& b, int t, const SynthConfig& cfg) {
  const double x = b.x_at(t), y = b.y_at(t);
  return {std::clamp(x - b.radius, 0.0, double(cfg.width)), std::clamp(y - b.radius, 0.0, double(cfg.height)),
          std::clamp(x + b.radius, 0.0, double(cfg.width)), std::clamp(y + b.radius, 0.0, double(cfg.height)), 1.0};
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::string format_id(const char* prefix, int value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05d", prefix, value);
  return buf;
}

int stages_for(LayerTag tag) {
  int stages = 0;
  for (int s = layer_stride(tag); s > 1; s /= 2) ++stages;
  return stages;
}

nlohmann::json config_json(const SynthConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (auto l : cfg.layers) layers.push_back(std::string(to_string(l)));
  return {{"videos", cfg.videos},
          {"frames", cfg.frames},
          {"height", cfg.height},
          {"width", cfg.width},
          {"videos_per_patient", cfg.videos_per_patient},
          {"prior_pe", cfg.prior_pe},
          {"prior_con", cfg.prior_con},
          {"max_distractors", cfg.max_distractors},
          {"radius_threshold", cfg.radius_threshold},
          {"large_radius", {cfg.large_radius_min, cfg.large_radius_max}},
          {"small_radius", {cfg.small_radius_min, cfg.small_radius_max}},
          {"intensity", {cfg.intensity_min, cfg.intensity_max}},
          {"max_speed", cfg.max_speed},
          {"background_mean", cfg.background_mean},
          {"background_noise", cfg.background_noise},
          {"jitter_sigma", cfg.jitter_sigma},
          {"false_positive_rate", cfg.false_positive_rate},
          {"miss_rate", cfg.miss_rate},
          {"layers", layers},
          {"seed", cfg.seed}};
}

}  // namespace

void validate(const SynthConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
  if (cfg.videos < 1) fail("videos must be >= 1");
  if (cfg.frames < 1) fail("frames must be >= 1");
  if (cfg.height < 16 || cfg.width < 16) fail("frame size must be at least 16x16");
  if (cfg.videos_per_patient < 1) fail("videos_per_patient must be >= 1");
  for (double p : {cfg.prior_pe, cfg.prior_con, cfg.false_positive_rate, cfg.miss_rate})
    if (p < 0 || p > 1) fail("probabilities must lie in [0, 1]");
  if (cfg.max_distractors < 0) fail("max_distractors must be >= 0");
  if (cfg.large_radius_min < cfg.radius_threshold) fail("large radii must reach the radius threshold");
  if (cfg.small_radius_max >= cfg.radius_threshold) fail("small radii must stay below the radius threshold");
  if (cfg.large_radius_min > cfg.large_radius_max || cfg.small_radius_min > cfg.small_radius_max ||
      cfg.small_radius_min <= 0)
    fail("radius ranges must be positive and ordered");
  if (cfg.jitter_sigma < 0 || cfg.max_speed < 0 || cfg.background_noise < 0) fail("noise scales must be >= 0");
}

bool satisfies_rule(Pathology p, double cy, double radius, const SynthConfig& cfg) {
  const Band band = p == Pathology::PE ? kPeBand : kConBand;
  const double y = cy / cfg.height;
  return radius >= cfg.radius_threshold && y >= band.lo && y <= band.hi;
}

SynthVideo generate_video(const SynthConfig& cfg, int index) {
  validate(cfg);
  auto rng = make_rng(cfg.seed, {kVideoStream, static_cast<std::uint64_t>(index)});
  std::bernoulli_distribution pe_draw(cfg.prior_pe), con_draw(cfg.prior_con);
  const bool pe = pe_draw(rng);
  const bool con = con_draw(rng);

  std::vector<Blob> blobs;
  if (pe) {
    blobs.push_back(place_blob(rng, cfg, kPeBand, true, blobs));
    blobs.back().pe = true;
  }
  if (con) {
    blobs.push_back(place_blob(rng, cfg, kConBand, true, blobs));
    blobs.back().con = true;
  }
  const int min_distractors = blobs.empty() ? 1 : 0;
  const int distractors =
      std::uniform_int_distribution<int>(min_distractors, std::max(min_distractors, cfg.max_distractors))(rng);
  for (int i = 0; i < distractors; ++i) {
    const bool large = std::bernoulli_distribution(0.5)(rng);
    const Band band = large ? kDistractorBand : Band{kConBand.lo, kPeBand.hi};
    blobs.push_back(place_blob(rng, cfg, band, large, blobs));
  }

  SynthVideo v;
  v.record.video_id = format_id("v", index);
  v.record.patient_id = format_id("p", index / cfg.videos_per_patient);
  v.record.frames = cfg.frames;
  v.record.height = cfg.height;
  v.record.width = cfg.width;
  v.record.label_pe = pe ? 1 : 0;
  v.record.label_con = con ? 1 : 0;

  v.frames.layer = LayerTag::IMG;
  v.frames.stride = 1;
  v.frames.channels = 1;
  v.frames.height = cfg.height;
  v.frames.width = cfg.width;
  v.frames.frames = cfg.frames;
  v.frames.values.resize(static_cast<std::size_t>(cfg.frames) * cfg.height * cfg.width);
  std::normal_distribution<double> noise(0.0, 1.0);
  v.truth.resize(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) {
    float* img = v.frames.values.data() + static_cast<std::size_t>(t) * cfg.height * cfg.width;
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        double value = cfg.background_mean + cfg.background_noise * noise(rng);
        for (const auto& b : blobs) {
          const double dx = x + 0.5 - b.x_at(t), dy = y + 0.5 - b.y_at(t);
          const double sigma = 0.5 * b.radius;
          value += b.intensity * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
        img[y * cfg.width + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
    for (const auto& b : blobs) {
      const BoundingBox box = blob_box(b, t, cfg);
      v.truth[t].objects.push_back(box);
      if (b.pe) v.truth[t].pe.push_back(box);
      if (b.con) v.truth[t].con.push_back(box);
    }
  }
  return v;
}

SurrogateBackbone::SurrogateBackbone(std::uint64_t seed) {
  for (LayerTag tag : kAllLayers) {
    if (tag == LayerTag::IMG) continue;
    auto rng = make_rng(seed, {kBackboneStream, static_cast<std::uint64_t>(tag)});
    ParamSet stack;
    int in = 1;
    const int stages = stages_for(tag);
    for (int s = 0; s < stages; ++s) {
      const int out = 16 << s;
      const double bound = std::sqrt(6.0 / (in * 9));
      stack.add("stage" + std::to_string(s) + ".weight", uniform_tensor({out, in, 3, 3}, bound, rng));
      stack.add("stage" + std::to_string(s) + ".bias", Tensor({out}));
      in = out;
    }
    stacks_.emplace(tag, std::move(stack));
  }
}

FeatureVolume SurrogateBackbone::extract(const FeatureVolume& frames, LayerTag tag) const {
  if (frames.layer != LayerTag::IMG || frames.channels != 1)
    throw std::invalid_argument("backbone input must be a 1-channel IMG volume");
  if (tag == LayerTag::IMG) return frames;
  const ParamSet& stack = stacks_.at(tag);
  FeatureVolume out;
  out.layer = tag;
  out.stride = layer_stride(tag);
  out.frames = frames.frames;
  for (int t = 0; t < frames.frames; ++t) {
    Tensor x = frames.frame_tensor(t);
    for (std::size_t s = 0; s < stack.size(); s += 2) {
      x = conv2d_forward(x, stack[s].value, stack[s + 1].value, 2, 1);
      x = leaky_relu_forward(x, 0.1f);
    }
    if (t == 0) {
      out.channels = x.dim(0);
      out.height = x.dim(1);
      out.width = x.dim(2);
      out.values.reserve(out.frame_size() * out.frames);
    }
    out.values.insert(out.values.end(), x.data().begin(), x.data().end());
  }
  return out;
}

DetectorOutput detector_stub(const SynthVideo& video, const SynthConfig& cfg, const SurrogateBackbone& backbone) {
  auto rng = make_rng(cfg.seed, {kDetectorStream, fnv1a(video.record.video_id)});
  std::bernoulli_distribution miss(cfg.miss_rate), spurious(cfg.false_positive_rate);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double w = cfg.width, h = cfg.height;
  DetectorOutput out;
  out.detections.resize(video.truth.size());
  for (std::size_t t = 0; t < video.truth.size(); ++t) {
    for (const auto& obj : video.truth[t].objects) {
      if (miss(rng)) continue;
      double x1 = obj.x1 + cfg.jitter_sigma * jitter(rng), y1 = obj.y1 + cfg.jitter_sigma * jitter(rng);
      double x2 = obj.x2 + cfg.jitter_sigma * jitter(rng), y2 = obj.y2 + cfg.jitter_sigma * jitter(rng);
      if (x1 > x2) std::swap(x1, x2);
      if (y1 > y2) std::swap(y1, y2);
      const double conf = uniform(rng, 0.6, 0.95);
      out.detections[t].push_back({std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
                                   std::clamp(y2, 0.0, h), conf});
    }
    if (spurious(rng)) {
      const double size = uniform(rng, 4.0, 12.0);
      const double cx = uniform(rng, size / 2, w - size / 2), cy = uniform(rng, size / 2, h - size / 2);
      out.detections[t].push_back({cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2, uniform(rng, 0.05, 0.3)});
    }
  }
  for (LayerTag tag : cfg.layers) out.features.emplace(tag, backbone.extract(video.frames, tag));
  return out;
}

Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  validate(cfg);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "videos", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  SurrogateBackbone backbone(cfg.seed);
  Manifest manifest;
  manifest.root = out_dir;
  for (int i = 0; i < cfg.videos; ++i) {
    SynthVideo video = generate_video(cfg, i);
    DetectorOutput det = detector_stub(video, cfg, backbone);
    VideoRecord rec = video.record;
    const fs::path rel = fs::path("videos") / rec.video_id;
    fs::create_directories(out_dir / rel, ec);
    if (ec) throw IoError("cannot create " + (out_dir / rel).string() + ": " + ec.message());
    rec.detections_path = (rel / "detections.jsonl").generic_string();
    rec.gt_path = (rel / "gt.jsonl").generic_string();
    write_detections(out_dir / rec.detections_path, det.detections);
    write_ground_truth(out_dir / rec.gt_path, video.truth);
    for (const auto& [tag, fv] : det.features) {
      const std::string p = (rel / (std::string(to_string(tag)) + ".tbfv")).generic_string();
      write_feature_volume(out_dir / p, fv);
      rec.features_path[tag] = p;
    }
    manifest.videos.push_back(std::move(rec));
  }
  write_manifest(out_dir / kManifestName, manifest.videos);
  std::ofstream cfg_out(out_dir / "synth_config.json", std::ios::trunc);
  if (!cfg_out) throw IoError("cannot write " + (out_dir / "synth_config.json").string());
  cfg_out << config_json(cfg).dump(2) << '\n';
  return manifest;
}

}  // namespace tubelet
