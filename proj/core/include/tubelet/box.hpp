#pragma once

#include <span>
#include <vector>

namespace tubelet {

/// Axis-aligned detection box in image pixels with a confidence in [0, 1].
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double confidence = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() * height(); }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }
  bool valid() const noexcept { return x1 <= x2 && y1 <= y2 && confidence >= 0 && confidence <= 1; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Minimal box covering every box of a tracklet; confidence is the maximum
/// member confidence.
struct UnionBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double confidence = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }
  BoundingBox as_box() const noexcept { return {x1, y1, x2, y2, confidence}; }

  friend bool operator==(const UnionBox&, const UnionBox&) = default;
};

double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Throws std::invalid_argument on an empty list.
UnionBox union_box(std::span<const BoundingBox> boxes);

/// Mutual center containment, boundaries inclusive: the union box center
/// lies inside `gt` and the `gt` center lies inside the union box.
bool center_match(const BoundingBox& gt, const UnionBox& pred) noexcept;

/// 1 when any ground-truth box of the frame center-matches `pred`.
int instance_label(std::span<const BoundingBox> gt_boxes, const UnionBox& pred) noexcept;

/// 1 when any instance label is positive. Throws on an empty list.
int tubelet_label(std::span<const int> instance_labels);

}  // namespace tubelet
