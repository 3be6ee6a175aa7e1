#include "ccd/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ccd {
namespace {

using nlohmann::json;

const json& require(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ManifestError(where + ": missing field \"" + key + "\"");
  }
  return *it;
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ManifestError(where + ": field \"" + key + "\" has the wrong type");
  }
}

std::optional<std::string> optional_path(const json& obj, const char* key,
                                         const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw ManifestError(where + ": field \"" + key + "\" must be a string");
  }
  return it->get<std::string>();
}

std::uint32_t positive_u32(const json& obj, const char* key,
                           const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number_integer() || v.get<std::int64_t>() <= 0 ||
      v.get<std::int64_t>() > INT32_MAX) {
    throw ManifestError(where + ": field \"" + key +
                        "\" must be a positive integer");
  }
  return v.get<std::uint32_t>();
}

std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

void check_dims(const DatasetManifest& m, const std::string& rel,
                const std::vector<std::uint32_t>& expected,
                const std::string& where, const char* what) {
  Tensor t;
  try {
    t = read_tensor(m.resolve(rel));
  } catch (const TensorError& e) {
    throw ManifestError(where + ": " + what + " tensor " + rel + ": " + e.what());
  }
  if (t.dims != expected) {
    throw ManifestError(where + ": " + what + " tensor " + rel + " has dims " +
                        dims_string(t.dims) + ", expected " +
                        dims_string(expected));
  }
}

}  // namespace

std::filesystem::path DatasetManifest::resolve(const std::string& p) const {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

std::optional<std::size_t> DatasetManifest::class_index(
    const std::string& name) const {
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    if (class_names[i] == name) return i;
  }
  return std::nullopt;
}

DatasetManifest parse_manifest(const std::string& json_text,
                               const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ManifestError("manifest root must be an object");

  DatasetManifest m;
  m.base_dir = base_dir;
  const std::string top = "manifest";
  m.class_names = get_as<std::vector<std::string>>(doc, "class_names", top);
  if (m.class_names.empty()) throw ManifestError("manifest: class_names is empty");
  std::set<std::string> seen;
  for (const auto& name : m.class_names) {
    if (!seen.insert(name).second) {
      throw ManifestError("manifest: duplicate class name \"" + name + "\"");
    }
  }
  m.text_embedding_path = get_as<std::string>(doc, "text_embedding_path", top);
  m.embedding_dim = positive_u32(doc, "embedding_dim", top);
  m.feature_channels = positive_u32(doc, "feature_channels", top);
  const auto grid = get_as<std::vector<std::int64_t>>(doc, "feature_grid", top);
  if (grid.size() != 2 || grid[0] <= 0 || grid[1] <= 0) {
    throw ManifestError("manifest: feature_grid must be [h, w] with h, w >= 1");
  }
  m.grid_h = static_cast<std::uint32_t>(grid[0]);
  m.grid_w = static_cast<std::uint32_t>(grid[1]);

  const json& images = require(doc, "images", top);
  if (!images.is_array()) throw ManifestError("manifest: images must be an array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const json& rec = images[i];
    std::string where = "images[" + std::to_string(i) + "]";
    if (!rec.is_object()) throw ManifestError(where + ": must be an object");
    ImageRecord r;
    r.image_id = get_as<std::string>(rec, "image_id", where);
    where = "image \"" + r.image_id + "\"";
    if (r.image_id.empty()) throw ManifestError(where + ": empty image_id");
    if (!ids.insert(r.image_id).second) {
      throw ManifestError(where + ": duplicate image_id");
    }
    r.width_px = static_cast<std::int32_t>(positive_u32(rec, "width_px", where));
    r.height_px = static_cast<std::int32_t>(positive_u32(rec, "height_px", where));
    r.global_embedding_path = get_as<std::string>(rec, "global_embedding_path", where);
    r.feature_map_path = get_as<std::string>(rec, "feature_map_path", where);
    r.weak_feature_path = optional_path(rec, "weak_feature_path", where);
    r.strong_feature_path = optional_path(rec, "strong_feature_path", where);
    r.gt_label_path = optional_path(rec, "gt_label_path", where);
    if (auto it = rec.find("gt_boxes"); it != rec.end() && !it->is_null()) {
      if (!it->is_array()) throw ManifestError(where + ": gt_boxes must be an array");
      for (const json& gb : *it) {
        const auto cls = get_as<std::string>(gb, "class", where + " gt_boxes");
        const auto idx = m.class_index(cls);
        if (!idx) {
          throw ManifestError(where + ": gt box names unknown class \"" + cls + "\"");
        }
        const auto c = get_as<std::vector<std::int32_t>>(gb, "box", where + " gt_boxes");
        if (c.size() != 4) throw ManifestError(where + ": gt box must have 4 coords");
        GtBox box{*idx, Box{c[0], c[1], c[2], c[3]}};
        if (!box.box.valid_in(r.width_px, r.height_px)) {
          throw ManifestError(where + ": gt box outside image bounds");
        }
        r.gt_boxes.push_back(box);
      }
    }
    m.images.push_back(std::move(r));
  }
  return m;
}

void validate_tensors(const DatasetManifest& m) {
  const auto C = static_cast<std::uint32_t>(m.num_classes());
  check_dims(m, m.text_embedding_path, {C, m.embedding_dim}, "manifest",
             "text_embedding");
  const std::vector<std::uint32_t> fm_dims{m.feature_channels, m.grid_h, m.grid_w};
  for (const auto& r : m.images) {
    const std::string where = "image \"" + r.image_id + "\"";
    check_dims(m, r.global_embedding_path, {m.embedding_dim}, where,
               "global_embedding");
    check_dims(m, r.feature_map_path, fm_dims, where, "feature_map");
    if (r.weak_feature_path) {
      check_dims(m, *r.weak_feature_path, fm_dims, where, "weak_feature");
    }
    if (r.strong_feature_path) {
      check_dims(m, *r.strong_feature_path, fm_dims, where, "strong_feature");
    }
    if (r.gt_label_path) {
      check_dims(m, *r.gt_label_path, {C}, where, "gt_label");
      const Tensor gt = read_tensor(m.resolve(*r.gt_label_path));
      for (float v : gt.data) {
        if (v != 0.0f && v != 1.0f) {
          throw ManifestError(where + ": gt_label entries must be 0 or 1");
        }
      }
    }
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  DatasetManifest m = parse_manifest(ss.str(), path.parent_path());
  validate_tensors(m);
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    const DatasetManifest& m) {
  json doc;
  doc["format"] = "ccd-manifest";
  doc["version"] = 1;
  doc["class_names"] = m.class_names;
  doc["text_embedding_path"] = m.text_embedding_path;
  doc["embedding_dim"] = m.embedding_dim;
  doc["feature_channels"] = m.feature_channels;
  doc["feature_grid"] = {m.grid_h, m.grid_w};
  json images = json::array();
  for (const auto& r : m.images) {
    json rec;
    rec["image_id"] = r.image_id;
    rec["width_px"] = r.width_px;
    rec["height_px"] = r.height_px;
    rec["global_embedding_path"] = r.global_embedding_path;
    rec["feature_map_path"] = r.feature_map_path;
    if (r.weak_feature_path) rec["weak_feature_path"] = *r.weak_feature_path;
    if (r.strong_feature_path) rec["strong_feature_path"] = *r.strong_feature_path;
    if (r.gt_label_path) rec["gt_label_path"] = *r.gt_label_path;
    if (!r.gt_boxes.empty()) {
      json boxes = json::array();
      for (const auto& gb : r.gt_boxes) {
        boxes.push_back({{"class", m.class_names.at(gb.class_index)},
                         {"box", gb.box.coords()}});
      }
      rec["gt_boxes"] = std::move(boxes);
    }
    images.push_back(std::move(rec));
  }
  doc["images"] = std::move(images);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace ccd
