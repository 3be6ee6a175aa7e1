#include "ccd/cam_views.hpp"

#include <algorithm>
#include <cmath>

#include "ccd/error.hpp"
#include "ccd/rng.hpp"
#include "ccd/trainer.hpp"

namespace ccd {
namespace {

constexpr int kPerturbAttempts = 8;

std::int32_t floor_scale(std::int64_t cell, std::int64_t pixels, std::int64_t cells) {
  return static_cast<std::int32_t>((cell * pixels) / cells);
}

std::int32_t ceil_scale(std::int64_t cell, std::int64_t pixels, std::int64_t cells) {
  return static_cast<std::int32_t>((cell * pixels + cells - 1) / cells);
}

}  // namespace

void FeatureMap::validate() const {
  if (channels == 0 || grid_h == 0 || grid_w == 0) {
    throw InputError("feature map \"" + image_id + "\" has an empty shape");
  }
  if (values.size() != std::size_t{channels} * grid_h * grid_w) {
    throw InputError("feature map \"" + image_id + "\" payload does not match (Q, h, w)");
  }
  if (width_px <= 0 || height_px <= 0) {
    throw InputError("feature map \"" + image_id + "\" has no pixel dimensions");
  }
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw InputError("feature map \"" + image_id + "\" has non-finite values");
    }
  }
}

std::vector<double> FeatureMap::pooled() const {
  std::vector<double> out(channels, 0.0);
  const std::size_t n = cells();
  for (std::size_t q = 0; q < channels; ++q) {
    double acc = 0.0;
    const float* ch = values.data() + q * n;
    for (std::size_t k = 0; k < n; ++k) acc += ch[k];
    out[q] = acc / static_cast<double>(n);
  }
  return out;
}

const char* to_string(BoxKind kind) {
  switch (kind) {
    case BoxKind::kBase: return "base";
    case BoxKind::kExpanded: return "expanded";
    case BoxKind::kPerturbed: return "perturbed";
  }
  return "?";
}

void ViewConfig::validate() const {
  if (!(cam_threshold >= 0.0 && cam_threshold <= 1.0)) {
    throw ConfigError("cam_threshold must lie in [0, 1]");
  }
  if (!(classifier_threshold >= 0.0 && classifier_threshold <= 1.0)) {
    throw ConfigError("classifier_threshold must lie in [0, 1]");
  }
  if (offset_px < 0) throw ConfigError("offset_px must be non-negative");
}

ActivationMap compute_cam(const FeatureMap& fm,
                          std::span<const double> class_weights,
                          std::size_t class_index) {
  if (class_weights.size() != fm.channels) {
    throw InputError("compute_cam: head has " + std::to_string(class_weights.size()) +
                     " weights per class but feature map has " +
                     std::to_string(fm.channels) + " channels");
  }
  ActivationMap m;
  m.grid_h = fm.grid_h;
  m.grid_w = fm.grid_w;
  m.class_index = class_index;
  const std::size_t n = fm.cells();
  m.values.assign(n, 0.0);
  for (std::size_t q = 0; q < fm.channels; ++q) {
    const double w = class_weights[q];
    const float* ch = fm.values.data() + q * n;
    for (std::size_t k = 0; k < n; ++k) m.values[k] += w * ch[k];
  }
  return m;
}

ActivationMap compute_cam(const FeatureMap& fm, const ClassifierHead& head,
                          std::size_t class_index) {
  if (class_index >= head.num_classes()) {
    throw InputError("compute_cam: class index out of range");
  }
  return compute_cam(fm, head.weights_row(class_index), class_index);
}

ActivationMap normalize_map(const ActivationMap& m) {
  ActivationMap out = m;
  out.normalized = true;
  if (m.values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(m.values.begin(), m.values.end());
  const double lo = *mn, hi = *mx;
  if (!(hi > lo)) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
  }
  const double range = hi - lo;
  for (double& v : out.values) v = (v - lo) / range;
  return out;
}

std::optional<Box> extract_box(const ActivationMap& m, double cam_threshold,
                               std::int32_t width_px, std::int32_t height_px) {
  std::int64_t gx0 = m.grid_w, gy0 = m.grid_h, gx1 = -1, gy1 = -1;
  for (std::size_t y = 0; y < m.grid_h; ++y) {
    for (std::size_t x = 0; x < m.grid_w; ++x) {
      if (!(m.at(y, x) >= cam_threshold)) continue;
      gx0 = std::min<std::int64_t>(gx0, x);
      gy0 = std::min<std::int64_t>(gy0, y);
      gx1 = std::max<std::int64_t>(gx1, x);
      gy1 = std::max<std::int64_t>(gy1, y);
    }
  }
  if (gx1 < 0) return std::nullopt;
  return Box{floor_scale(gx0, width_px, m.grid_w), floor_scale(gy0, height_px, m.grid_h),
             ceil_scale(gx1 + 1, width_px, m.grid_w),
             ceil_scale(gy1 + 1, height_px, m.grid_h)};
}

std::vector<PixelBox> perturb_boxes(const PixelBox& base, std::int32_t offset_px,
                                    std::size_t k, std::uint64_t seed,
                                    std::int32_t width_px, std::int32_t height_px) {
  std::vector<PixelBox> out;
  out.reserve(1 + k);
  const Box& b = base.box;
  PixelBox expanded = base;
  expanded.kind = offset_px == 0 ? base.kind : BoxKind::kExpanded;
  expanded.seed = seed;
  expanded.box = Box{b.x0 - offset_px, b.y0 - offset_px, b.x1 + offset_px,
                     b.y1 + offset_px}
                     .clipped(width_px, height_px);
  if (!expanded.box.empty()) out.push_back(expanded);

  Rng rng(seed);
  for (std::size_t j = 0; j < k; ++j) {
    for (int attempt = 0; attempt < kPerturbAttempts; ++attempt) {
      Box jittered{
          b.x0 + static_cast<std::int32_t>(rng.uniform_int(-offset_px, offset_px)),
          b.y0 + static_cast<std::int32_t>(rng.uniform_int(-offset_px, offset_px)),
          b.x1 + static_cast<std::int32_t>(rng.uniform_int(-offset_px, offset_px)),
          b.y1 + static_cast<std::int32_t>(rng.uniform_int(-offset_px, offset_px))};
      jittered = jittered.clipped(width_px, height_px);
      if (jittered.empty()) continue;
      out.push_back(PixelBox{jittered, base.class_index, BoxKind::kPerturbed, seed});
      break;
    }
  }
  return out;
}

std::vector<std::size_t> select_classes(std::span<const double> probs,
                                        double classifier_threshold) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (probs[c] > classifier_threshold) out.push_back(c);
  }
  return out;
}

ViewSet propose_views(const FeatureMap& fm, const ClassifierHead& head,
                      const ViewConfig& cfg) {
  cfg.validate();
  if (head.num_features() != fm.channels) {
    throw InputError("propose_views: head expects " +
                     std::to_string(head.num_features()) +
                     " channels, feature map \"" + fm.image_id + "\" has " +
                     std::to_string(fm.channels));
  }
  ViewSet views;
  views.image_id = fm.image_id;
  const auto probs = head.forward(fm.pooled());
  const std::uint64_t image_seed = derive_seed(cfg.seed, fm.image_id);
  for (std::size_t c : select_classes(probs, cfg.classifier_threshold)) {
    const auto cam = normalize_map(compute_cam(fm, head, c));
    const auto box = extract_box(cam, cfg.cam_threshold, fm.width_px, fm.height_px);
    if (!box) continue;
    const PixelBox base{*box, c, BoxKind::kBase, 0};
    const auto boxes = perturb_boxes(base, cfg.offset_px, cfg.perturb_k,
                                     derive_seed(image_seed, c), fm.width_px,
                                     fm.height_px);
    views.boxes.insert(views.boxes.end(), boxes.begin(), boxes.end());
  }
  const std::size_t cap = cfg.views_cap == 0 ? head.num_classes() : cfg.views_cap;
  if (views.boxes.size() > cap) views.boxes.resize(cap);
  return views;
}

nlohmann::json views_to_json(const ViewSet& views) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : views.boxes) {
    boxes.push_back({{"box", b.box.coords()},
                     {"class", b.class_index},
                     {"kind", to_string(b.kind)},
                     {"seed", b.seed}});
  }
  return {{"image_id", views.image_id}, {"boxes", std::move(boxes)}};
}

}  // namespace ccd
