#pragma once

#include <array>
#include <span>
#include <vector>

#include "tubelet/box.hpp"
#include "tubelet/data_io.hpp"
#include "tubelet/tensor.hpp"
#include "tubelet/tracker.hpp"

namespace tubelet {

/// ROI-aligned feature stack of one tracklet plus its global context.
struct Tubelet {
  int track_id = 0;
  std::vector<int> frames;
  /// T x C x R x R, one ROI-aligned slab per tracklet frame.
  Tensor features;
  /// Union box in image pixels.
  UnionBox box;
  /// (x1 / W, y1 / H, x2 / W, y2 / H, confidence), each in [0, 1].
  std::array<float, 5> context{};
  std::vector<int> instance_labels;
  int label = 0;

  int length() const noexcept { return static_cast<int>(frames.size()); }
  int channels() const { return features.dim(1); }
  int roi_res() const { return features.dim(2); }
};

/// Bilinear ROI align of one C x h x w map over `box` (image pixels). The
/// box is divided by `stride`, split into roi_res x roi_res bins, and each
/// bin takes one sample at its centre. Feature cell (i, j) is centred at
/// (j + 0.5, i + 0.5); samples beyond the map clamp to the border.
Tensor roi_align(std::span<const float> map, int channels, int height, int width, double stride,
                 const UnionBox& box, int roi_res);
Tensor roi_align(const Tensor& map, double stride, const UnionBox& box, int roi_res);

std::array<float, 5> context_vector(const UnionBox& box, int frame_width, int frame_height);

/// One union box for the whole tracklet, applied to every frame slice.
Tubelet build_tubelet(const Tracklet& tracklet, const FeatureVolume& volume, int frame_width, int frame_height,
                      int roi_res);

/// Instance labels from center matching against each frame's ground truth,
/// tubelet label as their OR. `gt_per_frame` is indexed by frame number;
/// frames beyond it count as having no ground truth.
void label_tubelet(Tubelet& tubelet, std::span<const std::vector<BoundingBox>> gt_per_frame);

}  // namespace tubelet
