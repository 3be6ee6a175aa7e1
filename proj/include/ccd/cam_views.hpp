#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccd/geometry.hpp"
#include "json.hpp"

namespace ccd {

class ClassifierHead;

/// Backbone feature map g(x), row-major (Q, h, w).
struct FeatureMap {
  std::string image_id;
  std::uint32_t channels = 0;
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::int32_t width_px = 0;
  std::int32_t height_px = 0;
  std::vector<float> values;

  float at(std::size_t q, std::size_t y, std::size_t x) const {
    return values[(q * grid_h + y) * grid_w + x];
  }
  std::size_t cells() const { return std::size_t{grid_h} * grid_w; }
  void validate() const;

  /// Global average pool over the grid, one value per channel.
  std::vector<double> pooled() const;
};

struct ActivationMap {
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::size_t class_index = 0;
  bool normalized = false;
  std::vector<double> values;  // row-major (h, w)

  double at(std::size_t y, std::size_t x) const { return values[y * grid_w + x]; }
};

enum class BoxKind { kBase, kExpanded, kPerturbed };

const char* to_string(BoxKind kind);

struct PixelBox {
  Box box;
  std::size_t class_index = 0;
  BoxKind kind = BoxKind::kBase;
  std::uint64_t seed = 0;

  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

struct ViewSet {
  std::string image_id;
  std::vector<PixelBox> boxes;
  std::size_t size() const { return boxes.size(); }
};

struct ViewConfig {
  double cam_threshold = 0.95;
  double classifier_threshold = 0.5;
  std::int32_t offset_px = 80;
  std::size_t perturb_k = 2;
  std::size_t views_cap = 0;  // 0: number of classes
  std::uint64_t seed = 0;

  void validate() const;
};

/// G_c[y][x] = sum_q w_c[q] * g_q[y][x]. `class_weights` is row c of the head.
ActivationMap compute_cam(const FeatureMap& fm,
                          std::span<const double> class_weights,
                          std::size_t class_index);
ActivationMap compute_cam(const FeatureMap& fm, const ClassifierHead& head,
                          std::size_t class_index);

/// Min-max normalization to [0, 1]; a constant map becomes all zeros.
ActivationMap normalize_map(const ActivationMap& m);

/// Tight grid box around every cell >= threshold, scaled outward to pixels.
std::optional<Box> extract_box(const ActivationMap& m, double cam_threshold,
                               std::int32_t width_px, std::int32_t height_px);

/// [expanded base] ++ up to k jittered copies of base. Deterministic in seed.
std::vector<PixelBox> perturb_boxes(const PixelBox& base, std::int32_t offset_px,
                                    std::size_t k, std::uint64_t seed,
                                    std::int32_t width_px, std::int32_t height_px);

/// Classes with probability strictly above threshold, ascending.
std::vector<std::size_t> select_classes(std::span<const double> probs,
                                        double classifier_threshold);

ViewSet propose_views(const FeatureMap& fm, const ClassifierHead& head,
                      const ViewConfig& cfg);

nlohmann::json views_to_json(const ViewSet& views);

}  // namespace ccd
