#include "petduet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "petduet/error.hpp"

namespace petduet::geometry {

NormalizedBox normalize_box(const AbsoluteBox& box, double image_w, double image_h) {
  if (!(image_w > 0.0) || !(image_h > 0.0)) {
    throw ValidationError("normalize_box: image dimensions must be positive");
  }
  if (!std::isfinite(box.x0) || !std::isfinite(box.y0) || !std::isfinite(box.x1) ||
      !std::isfinite(box.y1)) {
    throw ValidationError("normalize_box: non-finite coordinate");
  }
  if (!(box.x1 > box.x0) || !(box.y1 > box.y0)) {
    throw ValidationError("normalize_box: degenerate box [" + std::to_string(box.x0) + "," +
                          std::to_string(box.y0) + "," + std::to_string(box.x1) + "," +
                          std::to_string(box.y1) + "]");
  }
  return {(box.x0 + box.x1) * 0.5 / image_w, (box.y0 + box.y1) * 0.5 / image_h,
          (box.x1 - box.x0) / image_w, (box.y1 - box.y0) / image_h};
}

AbsoluteBox denormalize_box(const NormalizedBox& box, double image_w, double image_h) {
  return {(box.cx - box.w * 0.5) * image_w, (box.cy - box.h * 0.5) * image_h,
          (box.cx + box.w * 0.5) * image_w, (box.cy + box.h * 0.5) * image_h};
}

bool is_valid(const NormalizedBox& box) {
  for (double v : {box.cx, box.cy, box.w, box.h}) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) return false;
  }
  return box.w > 0.0 && box.h > 0.0;
}

void validate(const NormalizedBox& box) {
  if (!is_valid(box)) {
    throw ValidationError("invalid normalized box (" + std::to_string(box.cx) + "," +
                          std::to_string(box.cy) + "," + std::to_string(box.w) + "," +
                          std::to_string(box.h) + ")");
  }
}

std::array<double, 4> to_xyxy(const NormalizedBox& box) {
  return {box.cx - box.w * 0.5, box.cy - box.h * 0.5, box.cx + box.w * 0.5, box.cy + box.h * 0.5};
}

NormalizedBox from_xyxy(double x0, double y0, double x1, double y1) {
  return {(x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0};
}

std::vector<double> sincos_encode(const NormalizedBox& box, int dim) {
  if (dim <= 0 || dim % 8 != 0) {
    throw ValidationError("sincos_encode: dim must be a positive multiple of 8, got " +
                          std::to_string(dim));
  }
  const int per_coord = dim / 4;
  const int n_freq = dim / 8;
  std::vector<double> out(static_cast<std::size_t>(dim));
  const double coords[4] = {box.cx, box.cy, box.w, box.h};
  for (int j = 0; j < 4; ++j) {
    for (int k = 0; k < n_freq; ++k) {
      const double freq =
          std::pow(kPositionalTemperature, 2.0 * k / static_cast<double>(per_coord));
      const double angle = coords[j] * 2.0 * std::numbers::pi / freq;
      out[j * per_coord + 2 * k] = std::sin(angle);
      out[j * per_coord + 2 * k + 1] = std::cos(angle);
    }
  }
  return out;
}

namespace {

struct Overlap {
  double inter;
  double uni;
  double hull;
};

Overlap overlap(const AbsoluteBox& a, const AbsoluteBox& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  const double hull = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) *
                      (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  return {inter, uni, hull};
}

AbsoluteBox as_corners(const NormalizedBox& b) {
  const auto c = to_xyxy(b);
  return {c[0], c[1], c[2], c[3]};
}

}  // namespace

double iou(const AbsoluteBox& a, const AbsoluteBox& b) {
  const auto o = overlap(a, b);
  return o.uni > 0.0 ? o.inter / o.uni : 0.0;
}

double iou(const NormalizedBox& a, const NormalizedBox& b) { return iou(as_corners(a), as_corners(b)); }

double giou(const AbsoluteBox& a, const AbsoluteBox& b) {
  const auto o = overlap(a, b);
  if (!(o.uni > 0.0) || !(o.hull > 0.0)) return 0.0;
  return o.inter / o.uni - (o.hull - o.uni) / o.hull;
}

double giou(const NormalizedBox& a, const NormalizedBox& b) {
  return giou(as_corners(a), as_corners(b));
}

}  // namespace petduet::geometry
