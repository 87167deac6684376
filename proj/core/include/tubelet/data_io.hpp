#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tubelet/box.hpp"
#include "tubelet/tensor.hpp"

namespace tubelet {

/// Source of a feature volume: the raw frame or the last conv layer of a
/// backbone stage.
enum class LayerTag : std::uint8_t { IMG = 0, F2 = 1, F4 = 2, F6 = 3, F8 = 4 };

inline constexpr LayerTag kAllLayers[] = {LayerTag::IMG, LayerTag::F2, LayerTag::F4, LayerTag::F6, LayerTag::F8};

std::string_view to_string(LayerTag tag);
/// Accepts "IMG", "F2", ... (case-insensitive); throws std::invalid_argument.
LayerTag parse_layer_tag(std::string_view text);

int layer_stride(LayerTag tag);
int layer_channels(LayerTag tag);
int layer_roi_res(LayerTag tag);

/// C x h x w maps for T frames, frame-major: value (t, c, y, x) lives at
/// ((t * C + c) * h + y) * w + x.
struct FeatureVolume {
  LayerTag layer = LayerTag::IMG;
  int stride = 1;
  int channels = 0, height = 0, width = 0, frames = 0;
  std::vector<float> values;

  std::size_t frame_size() const noexcept {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const float> frame(int t) const;
  /// Copy of frame t as a C x h x w tensor.
  Tensor frame_tensor(int t) const;
  /// Throws std::invalid_argument when the value count disagrees with the dims.
  void validate() const;

  friend bool operator==(const FeatureVolume&, const FeatureVolume&) = default;
};

inline constexpr std::uint32_t kFeatureVolumeVersion = 1;

std::vector<std::uint8_t> encode_feature_volume(const FeatureVolume& fv);
/// Throws FormatError naming the failing field; never returns a partial volume.
FeatureVolume decode_feature_volume(std::span<const std::uint8_t> bytes);
void write_feature_volume(const std::filesystem::path& path, const FeatureVolume& fv);
FeatureVolume read_feature_volume(const std::filesystem::path& path);

using PerFrameBoxes = std::vector<std::vector<BoundingBox>>;

// Detection files hold one JSON object per line:
//   {"frame": 3, "boxes": [{"x1": .., "y1": .., "x2": .., "y2": .., "conf": ..}]}
// Frames may appear in any order; absent frames have no detections.

/// When `frame_count` is given the result has exactly that many frames and a
/// record beyond it is an error.
PerFrameBoxes parse_detections(std::istream& in, std::optional<int> frame_count = {});
PerFrameBoxes read_detections(const std::filesystem::path& path, std::optional<int> frame_count = {});
void write_detections(const std::filesystem::path& path, const PerFrameBoxes& frames);

enum class Pathology { PE, CON };
std::string_view to_string(Pathology p);
Pathology parse_pathology(std::string_view text);

/// Per-frame annotation: every rendered object plus the subset that carries
/// each pathology.
struct FrameTruth {
  std::vector<BoundingBox> objects;
  std::vector<BoundingBox> pe;
  std::vector<BoundingBox> con;

  const std::vector<BoundingBox>& boxes(Pathology p) const { return p == Pathology::PE ? pe : con; }
  friend bool operator==(const FrameTruth&, const FrameTruth&) = default;
};

using GroundTruth = std::vector<FrameTruth>;

void write_ground_truth(const std::filesystem::path& path, const GroundTruth& gt);
GroundTruth read_ground_truth(const std::filesystem::path& path, int frame_count);
PerFrameBoxes pathology_boxes(const GroundTruth& gt, Pathology p);

struct VideoRecord {
  std::string video_id;
  std::string patient_id;
  int frames = 0;
  int height = 0;
  int width = 0;
  int label_pe = 0;
  int label_con = 0;
  std::string detections_path;
  std::string gt_path;
  std::map<LayerTag, std::string> features_path;

  int label(Pathology p) const { return p == Pathology::PE ? label_pe : label_con; }
  friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

/// Dataset index. Paths inside records are relative to `root`.
struct Manifest {
  std::filesystem::path root;
  std::vector<VideoRecord> videos;

  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

inline constexpr const char* kManifestName = "manifest.jsonl";

void write_manifest(const std::filesystem::path& path, const std::vector<VideoRecord>& videos);
/// Loads `path` (a manifest file or a dataset directory containing one).
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace tubelet
