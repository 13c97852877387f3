#pragma once

#include <array>
#include <vector>

namespace petduet::geometry {

/// Box in center form, every component a fraction of the image extent.
struct NormalizedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const NormalizedBox&, const NormalizedBox&) = default;
};

/// Pixel-space corner box, as stored in annotation files.
struct AbsoluteBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  friend bool operator==(const AbsoluteBox&, const AbsoluteBox&) = default;
};

/// The box covering the full image; used as the aggregation carrier's anchor.
inline constexpr NormalizedBox kGlobalBox{0.5, 0.5, 1.0, 1.0};

/// Throws ValidationError for non-positive image dimensions or a box with
/// zero or negative extent.
NormalizedBox normalize_box(const AbsoluteBox& box, double image_w, double image_h);
AbsoluteBox denormalize_box(const NormalizedBox& box, double image_w, double image_h);

/// True when all components are finite and in [0,1] and w, h > 0.
bool is_valid(const NormalizedBox& box);
void validate(const NormalizedBox& box);

/// Corner form of a center box (no clamping).
std::array<double, 4> to_xyxy(const NormalizedBox& box);
NormalizedBox from_xyxy(double x0, double y0, double x1, double y1);

/// Sine/cosine code of the four box coordinates. Each coordinate occupies
/// dim/4 consecutive slots holding interleaved (sin, cos) pairs over dim/8
/// geometrically spaced frequencies (temperature 10000, angle scaled by 2*pi).
/// Throws ValidationError unless dim is a positive multiple of 8.
std::vector<double> sincos_encode(const NormalizedBox& box, int dim);
inline constexpr double kPositionalTemperature = 10000.0;

/// Intersection over union; 0 when the union is empty.
double iou(const AbsoluteBox& a, const AbsoluteBox& b);
double iou(const NormalizedBox& a, const NormalizedBox& b);

/// Generalized IoU: iou - (hull - union) / hull, in [-1, 1].
double giou(const AbsoluteBox& a, const AbsoluteBox& b);
double giou(const NormalizedBox& a, const NormalizedBox& b);

}  // namespace petduet::geometry
