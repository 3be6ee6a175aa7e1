#pragma once

#include <algorithm>
#include <array>
#include <cstdint>

namespace ccd {

/// Axis-aligned pixel rectangle, inclusive-exclusive: [x0, x1) x [y0, y1).
struct Box {
  std::int32_t x0 = 0;
  std::int32_t y0 = 0;
  std::int32_t x1 = 0;
  std::int32_t y1 = 0;

  std::int64_t width() const { return std::int64_t{x1} - x0; }
  std::int64_t height() const { return std::int64_t{y1} - y0; }
  std::int64_t area() const {
    return (x1 > x0 && y1 > y0) ? width() * height() : 0;
  }
  bool empty() const { return x1 <= x0 || y1 <= y0; }

  bool valid_in(std::int32_t image_w, std::int32_t image_h) const {
    return 0 <= x0 && x0 < x1 && x1 <= image_w && 0 <= y0 && y0 < y1 &&
           y1 <= image_h;
  }

  Box clipped(std::int32_t image_w, std::int32_t image_h) const {
    return Box{std::clamp(x0, 0, image_w), std::clamp(y0, 0, image_h),
               std::clamp(x1, 0, image_w), std::clamp(y1, 0, image_h)};
  }

  std::array<std::int32_t, 4> coords() const { return {x0, y0, x1, y1}; }

  friend bool operator==(const Box&, const Box&) = default;
  friend auto operator<=>(const Box&, const Box&) = default;
};

inline std::int64_t intersection_area(const Box& a, const Box& b) {
  const Box inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0),
                  std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  return inter.area();
}

inline double iou(const Box& a, const Box& b) {
  const std::int64_t inter = intersection_area(a, b);
  const std::int64_t uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace ccd
