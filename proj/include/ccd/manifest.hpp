#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccd/error.hpp"
#include "ccd/geometry.hpp"
#include "ccd/tensor_store.hpp"

namespace ccd {

class ManifestError : public InputError {
 public:
  using InputError::InputError;
};

struct GtBox {
  std::size_t class_index = 0;
  Box box;
  friend bool operator==(const GtBox&, const GtBox&) = default;
};

struct ImageRecord {
  std::string image_id;
  std::int32_t width_px = 0;
  std::int32_t height_px = 0;
  // Paths as written in the manifest (relative paths are relative to the
  // manifest's directory; use DatasetManifest::resolve).
  std::string global_embedding_path;
  std::string feature_map_path;
  std::optional<std::string> weak_feature_path;
  std::optional<std::string> strong_feature_path;
  std::optional<std::string> gt_label_path;
  std::vector<GtBox> gt_boxes;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<std::string> class_names;
  std::vector<ImageRecord> images;
  std::string text_embedding_path;
  std::uint32_t embedding_dim = 0;
  std::uint32_t feature_channels = 0;  // Q
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;

  std::size_t num_classes() const { return class_names.size(); }
  std::filesystem::path resolve(const std::string& p) const;
  std::optional<std::size_t> class_index(const std::string& name) const;
};

/// Parses and eagerly validates a manifest: schema, class list, and every
/// referenced tensor's dims. Errors name the offending record and tensor.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Schema-only parse (no tensor reads).
DatasetManifest parse_manifest(const std::string& json_text,
                               const std::filesystem::path& base_dir);

/// Checks every referenced tensor against declared dims.
void validate_tensors(const DatasetManifest& manifest);

void write_manifest(const std::filesystem::path& path,
                    const DatasetManifest& manifest);

}  // namespace ccd
