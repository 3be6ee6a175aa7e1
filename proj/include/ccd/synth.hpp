#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ccd/geometry.hpp"
#include "ccd/manifest.hpp"
#include "ccd/view_provider.hpp"
#include "json.hpp"

namespace ccd {

/// Parameters of a synthetic world. Global embeddings are built so that their
/// cosine scores against the class text embeddings equal
///   s0 + reference_tau * logit_c,
/// where logit_c sums, over present objects k with salience sigma_k,
/// sigma_k * class_logit_k on class k and sigma_k * confuser_logit on k's
/// confuser class, plus Gaussian noise. class_logit_k is chosen so that a
/// lone object of class k has top-1 probability planted_bias[k] at the
/// reference temperature.
struct WorldSpec {
  std::size_t n_classes = 8;
  std::size_t n_images = 400;
  std::size_t n_test_images = 400;
  std::uint32_t embedding_dim = 32;
  std::uint32_t feature_channels = 16;
  std::uint32_t grid_h = 8;
  std::uint32_t grid_w = 8;
  std::int32_t width_px = 640;
  std::int32_t height_px = 640;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_box_frac = 0.2;
  double max_box_frac = 0.55;
  std::vector<double> planted_bias;  // empty: all 1.0
  double unbiased_top1 = 0.985;      // realized top-1 for planted bias 1.0
  double leak_concentration = 0.95;  // share of lost mass on the confuser
  double salience_power = 1.0;
  double reference_tau = 0.01;
  double global_logit_noise = 0.15;
  double crop_logit_noise = 0.15;
  double crop_full_coverage = 0.6;   // crop share at which an object counts fully
  double prototype_perturbation = 0.05;
  double blob_amplitude = 10.0;
  double feature_noise = 1.0;
  double channel_mixing = 0.3;
  std::size_t distractors = 2;       // random clutter blobs per feature map
  double distractor_amplitude = 6.0;
  std::uint64_t seed = 7;

  void validate() const;
  double bias_of(std::size_t c) const {
    return planted_bias.empty() ? 1.0 : planted_bias[c];
  }
};

nlohmann::json spec_to_json(const WorldSpec& spec);
WorldSpec spec_from_json(const nlohmann::json& doc);

struct WorldImage {
  std::string image_id;
  bool test = false;
  std::int32_t width_px = 0;
  std::int32_t height_px = 0;
  std::vector<std::uint8_t> gt_labels;  // C entries
  std::vector<GtBox> gt_boxes;          // one per present class
};

struct SyntheticWorld {
  WorldSpec spec;
  std::vector<std::string> class_names;
  std::vector<std::vector<float>> prototypes;  // C classes, then background
  std::vector<std::size_t> confuser;           // per class
  std::vector<double> class_logit;             // per class, lone-object margin
  double confuser_logit = 0.0;
  std::vector<WorldImage> images;

  const WorldImage* find(const std::string& image_id) const;
  std::size_t n_classes() const { return class_names.size(); }
};

/// Deterministic in spec (including seed). Does not touch the filesystem.
SyntheticWorld build_world(const WorldSpec& spec);

/// Files written by generate_world.
struct WorldFiles {
  std::filesystem::path world_json;
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
};

/// Builds the world and writes manifests, CCDT tensors and world.json into
/// `out_dir`. Output bytes are identical for identical specs.
WorldFiles generate_world(const WorldSpec& spec, const std::filesystem::path& out_dir);

void save_world(const SyntheticWorld& world, const std::filesystem::path& path);
SyntheticWorld load_world(const std::filesystem::path& path);

/// Designed logits for an image's global view (before noise), per class.
std::vector<double> global_logits(const SyntheticWorld& world, const WorldImage& image);

/// Global embedding of an image: designed logits plus seeded noise, realized
/// as a unit vector whose cosines to the text embeddings encode them.
std::vector<float> global_embedding(const SyntheticWorld& world, const WorldImage& image);

/// Embedding the synthetic provider returns for a crop. Built like a global
/// embedding, with each object's salience replaced by
///   min(1, purity / crop_full_coverage) * completeness,
/// purity being the share of the crop the object occupies and completeness
/// the share of the object inside the crop. Noise is seeded by the request.
std::vector<float> crop_embedding(const SyntheticWorld& world, const ViewRequest& req);

/// Protocol v1 server backed by crop_embedding; unknown images answer with
/// error code "unknown_image".
void serve_synthetic(LineChannel& channel, const SyntheticWorld& world);

// --- proof-of-concept local view policies -----------------------------------

enum class ViewPolicy { kCam, kAroundGt, kGt, kRandom, kGrid };

const char* to_string(ViewPolicy policy);
ViewPolicy view_policy_from_string(const std::string& s);

struct PolicyView {
  Box box;
  std::int32_t resize_long = 640;
  friend bool operator==(const PolicyView&, const PolicyView&) = default;
};

/// around_gt: k boxes, box j jitters every vertex of gt[j mod n] by up to
///   offset_px; gt: the GT boxes padded to k with full-image views at
///   decreasing resize_long; random: k uniform boxes; grid: a sqrt(k) x sqrt(k)
///   tiling. Throws InputError when a GT policy has no boxes.
std::vector<PolicyView> policy_views(ViewPolicy policy, const std::vector<Box>& gt,
                                     std::int32_t width_px, std::int32_t height_px,
                                     std::size_t k, std::int32_t offset_px,
                                     std::uint64_t seed, std::int32_t resize_long = 640);

}  // namespace ccd
