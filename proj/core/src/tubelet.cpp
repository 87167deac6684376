#include "tubelet/tubelet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tubelet {

Tensor roi_align(std::span<const float> map, int channels, int height, int width, double stride,
                 const UnionBox& box, int roi_res) {
  if (channels <= 0 || height <= 0 || width <= 0) throw std::invalid_argument("roi_align: empty feature map");
  if (map.size() != static_cast<std::size_t>(channels) * height * width)
    throw std::invalid_argument("roi_align: map size does not match C x h x w");
  if (roi_res < 1) throw std::invalid_argument("roi_align: roi_res must be >= 1");
  if (stride <= 0) throw std::invalid_argument("roi_align: stride must be positive");
  const double fx1 = box.x1 / stride, fy1 = box.y1 / stride;
  const double bin_w = (box.x2 - box.x1) / stride / roi_res;
  const double bin_h = (box.y2 - box.y1) / stride / roi_res;
  if (!(bin_w > 0) || !(bin_h > 0)) throw std::invalid_argument("roi_align: box has zero area");

  // Sample coordinates and weights are shared by all channels.
  struct Tap {
    int lo, hi;
    double frac;
  };
  auto taps = [](double start, double bin, int res, int extent) {
    std::vector<Tap> out(res);
    for (int i = 0; i < res; ++i) {
      const double u = std::clamp(start + (i + 0.5) * bin - 0.5, 0.0, double(extent - 1));
      const int lo = static_cast<int>(std::floor(u));
      out[i] = {lo, std::min(lo + 1, extent - 1), u - lo};
    }
    return out;
  };
  const auto xs = taps(fx1, bin_w, roi_res, width);
  const auto ys = taps(fy1, bin_h, roi_res, height);

  Tensor out({channels, roi_res, roi_res});
  float* dst = out.data().data();
  for (int c = 0; c < channels; ++c) {
    const float* plane = map.data() + static_cast<std::size_t>(c) * height * width;
    for (const auto& ty : ys) {
      const float* r0 = plane + static_cast<std::size_t>(ty.lo) * width;
      const float* r1 = plane + static_cast<std::size_t>(ty.hi) * width;
      for (const auto& tx : xs) {
        const double top = r0[tx.lo] + (r0[tx.hi] - double(r0[tx.lo])) * tx.frac;
        const double bottom = r1[tx.lo] + (r1[tx.hi] - double(r1[tx.lo])) * tx.frac;
        *dst++ = static_cast<float>(top + (bottom - top) * ty.frac);
      }
    }
  }
  return out;
}

Tensor roi_align(const Tensor& map, double stride, const UnionBox& box, int roi_res) {
  if (map.rank() != 3) throw std::invalid_argument("roi_align: map must be C x h x w, got " + shape_str(map.shape()));
  return roi_align(map.data(), map.dim(0), map.dim(1), map.dim(2), stride, box, roi_res);
}

std::array<float, 5> context_vector(const UnionBox& box, int frame_width, int frame_height) {
  if (frame_width <= 0 || frame_height <= 0) throw std::invalid_argument("context_vector: frame size must be positive");
  auto unit = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  return {unit(box.x1 / frame_width), unit(box.y1 / frame_height), unit(box.x2 / frame_width),
          unit(box.y2 / frame_height), unit(box.confidence)};
}

Tubelet build_tubelet(const Tracklet& tracklet, const FeatureVolume& volume, int frame_width, int frame_height,
                      int roi_res) {
  if (tracklet.frames.empty()) throw std::invalid_argument("build_tubelet: empty tracklet");
  if (tracklet.frames.size() != tracklet.boxes.size())
    throw std::invalid_argument("build_tubelet: tracklet frames and boxes differ in length");
  volume.validate();
  for (int f : tracklet.frames)
    if (f < 0 || f >= volume.frames)
      throw std::invalid_argument("build_tubelet: frame " + std::to_string(f) + " outside feature volume of " +
                                  std::to_string(volume.frames) + " frames");

  Tubelet tb;
  tb.track_id = tracklet.track_id;
  tb.frames = tracklet.frames;
  tb.box = union_box(tracklet.boxes);
  tb.context = context_vector(tb.box, frame_width, frame_height);
  const int t_len = tracklet.length();
  const std::size_t slab = static_cast<std::size_t>(volume.channels) * roi_res * roi_res;
  std::vector<float> data;
  data.reserve(slab * t_len);
  for (int f : tracklet.frames) {
    Tensor s = roi_align(volume.frame(f), volume.channels, volume.height, volume.width, volume.stride, tb.box, roi_res);
    data.insert(data.end(), s.data().begin(), s.data().end());
  }
  tb.features = Tensor({t_len, volume.channels, roi_res, roi_res}, std::move(data));
  tb.instance_labels.assign(t_len, 0);
  return tb;
}

void label_tubelet(Tubelet& tubelet, std::span<const std::vector<BoundingBox>> gt_per_frame) {
  tubelet.instance_labels.assign(tubelet.frames.size(), 0);
  for (std::size_t i = 0; i < tubelet.frames.size(); ++i) {
    const int f = tubelet.frames[i];
    if (f >= 0 && static_cast<std::size_t>(f) < gt_per_frame.size())
      tubelet.instance_labels[i] = instance_label(gt_per_frame[f], tubelet.box);
  }
  tubelet.label = tubelet_label(tubelet.instance_labels);
}

}  // namespace tubelet
