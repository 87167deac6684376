#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "tubelet/data_io.hpp"
#include "tubelet/params.hpp"

namespace tubelet {

/// Seeded moving-blob video generator standing in for a clinical dataset.
///
/// Each pathology has a positional rule: a PE blob sits in the lower band of
/// the frame, a CON blob in the upper band, and both are large (radius at
/// least `radius_threshold`). Distractor blobs are either small or confined to
/// the middle band, so the class of a blob is decided by where it is and how
/// big it is, not by how it looks.
struct SynthConfig {
  int videos = 100;
  int frames = 10;
  int height = 64;
  int width = 64;
  int videos_per_patient = 2;
  double prior_pe = 0.5;
  double prior_con = 0.3;
  int max_distractors = 1;
  double radius_threshold = 6.0;
  double large_radius_min = 7.0, large_radius_max = 10.0;
  double small_radius_min = 3.0, small_radius_max = 5.0;
  double intensity_min = 0.6, intensity_max = 1.0;
  double max_speed = 0.5;  // pixels per frame
  double background_mean = 0.1, background_noise = 0.03;
  // Detector surrogate.
  double jitter_sigma = 0.5;
  double false_positive_rate = 0.05;  // probability of one spurious box per frame
  double miss_rate = 0.05;
  std::vector<LayerTag> layers{LayerTag::IMG, LayerTag::F2, LayerTag::F4, LayerTag::F6, LayerTag::F8};
  std::uint64_t seed = 7;
};

/// Throws std::invalid_argument on out-of-range settings.
void validate(const SynthConfig& cfg);

struct SynthVideo {
  VideoRecord record;
  FeatureVolume frames;  // IMG volume: raw grayscale, 1 channel, stride 1
  GroundTruth truth;
};

/// Frame band (as fractions of height) that hosts each blob category.
struct Band {
  double lo, hi;
};
inline constexpr Band kPeBand{0.62, 0.88};
inline constexpr Band kConBand{0.12, 0.38};
inline constexpr Band kDistractorBand{0.44, 0.56};

/// True when a blob centred at `cy` with radius `r` satisfies the rule of `p`.
bool satisfies_rule(Pathology p, double cy, double radius, const SynthConfig& cfg);

SynthVideo generate_video(const SynthConfig& cfg, int index);

/// Fixed random-weight conv stacks, one per layer tag, seeded by the config:
/// stride-2 3x3 stages with leaky-ReLU, channels 16/32/64/128.
class SurrogateBackbone {
 public:
  explicit SurrogateBackbone(std::uint64_t seed);
  FeatureVolume extract(const FeatureVolume& frames, LayerTag tag) const;

 private:
  std::map<LayerTag, ParamSet> stacks_;
};

struct DetectorOutput {
  PerFrameBoxes detections;
  std::map<LayerTag, FeatureVolume> features;
};

/// Jittered ground-truth object boxes (some dropped) plus low-confidence
/// false positives, and the feature volumes for `cfg.layers`.
DetectorOutput detector_stub(const SynthVideo& video, const SynthConfig& cfg, const SurrogateBackbone& backbone);

/// Writes the whole dataset under `out_dir` and returns its manifest.
Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace tubelet
