#include "tubelet/box.hpp"

#include <algorithm>
#include <stdexcept>

namespace tubelet {

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  // Ordered sum keeps the result bit-identical under argument swap even when
  // the compiler fuses a multiply into the add.
  const double aa = a.area(), ab = b.area();
  const double uni = std::min(aa, ab) + std::max(aa, ab) - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

UnionBox union_box(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) throw std::invalid_argument("union_box: empty box list");
  UnionBox u{boxes[0].x1, boxes[0].y1, boxes[0].x2, boxes[0].y2, boxes[0].confidence};
  for (const auto& b : boxes.subspan(1)) {
    u.x1 = std::min(u.x1, b.x1);
    u.y1 = std::min(u.y1, b.y1);
    u.x2 = std::max(u.x2, b.x2);
    u.y2 = std::max(u.y2, b.y2);
    u.confidence = std::max(u.confidence, b.confidence);
  }
  return u;
}

bool center_match(const BoundingBox& gt, const UnionBox& pred) noexcept {
  const double pcx = pred.center_x(), pcy = pred.center_y();
  const double gcx = gt.center_x(), gcy = gt.center_y();
  return gt.x1 <= pcx && pcx <= gt.x2 && gt.y1 <= pcy && pcy <= gt.y2 &&  //
         pred.x1 <= gcx && gcx <= pred.x2 && pred.y1 <= gcy && gcy <= pred.y2;
}

int instance_label(std::span<const BoundingBox> gt_boxes, const UnionBox& pred) noexcept {
  return std::any_of(gt_boxes.begin(), gt_boxes.end(), [&](const BoundingBox& gt) { return center_match(gt, pred); })
             ? 1
             : 0;
}

int tubelet_label(std::span<const int> instance_labels) {
  if (instance_labels.empty()) throw std::invalid_argument("tubelet_label: empty instance label list");
  int total = 0;
  for (int l : instance_labels) total += l;
  return total > 0 ? 1 : 0;
}

}  // namespace tubelet
