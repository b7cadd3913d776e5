#pragma once

#include <algorithm>

namespace icod {

/// Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2 when valid.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union. Zero-area boxes contribute no overlap.
double iou(const Box& a, const Box& b);

}  // namespace icod
