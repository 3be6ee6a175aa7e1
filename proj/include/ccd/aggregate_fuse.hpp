#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccd {

/// N patches x C calibrated class probabilities for one image.
struct PatchProbs {
  std::string image_id;
  std::size_t n_classes = 0;
  std::vector<double> probs;  // row-major N x C

  std::size_t n_patches() const { return n_classes ? probs.size() / n_classes : 0; }
  void add_patch(std::span<const double> row);
};

/// Class-wise max over patches; nullopt when there are no patches.
std::optional<std::vector<double>> aggregate_patches(const PatchProbs& pp);

/// alpha * initial + (1 - alpha) * local; the initial label when local is
/// absent. Throws ConfigError for alpha outside [0, 1].
std::vector<double> fuse_labels(std::span<const double> initial,
                                const std::optional<std::vector<double>>& local,
                                double alpha);

}  // namespace ccd
