#include "ccd/aggregate_fuse.hpp"

#include <algorithm>

#include "ccd/error.hpp"

namespace ccd {

void PatchProbs::add_patch(std::span<const double> row) {
  if (row.size() != n_classes) {
    throw InputError("patch for image \"" + image_id + "\" has " +
                     std::to_string(row.size()) + " classes, expected " +
                     std::to_string(n_classes));
  }
  probs.insert(probs.end(), row.begin(), row.end());
}

std::optional<std::vector<double>> aggregate_patches(const PatchProbs& pp) {
  const std::size_t n = pp.n_patches();
  if (n == 0) return std::nullopt;
  std::vector<double> out(pp.probs.begin(), pp.probs.begin() + pp.n_classes);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t c = 0; c < pp.n_classes; ++c) {
      out[c] = std::max(out[c], pp.probs[i * pp.n_classes + c]);
    }
  }
  return out;
}

std::vector<double> fuse_labels(std::span<const double> initial,
                                const std::optional<std::vector<double>>& local,
                                double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("fusion alpha must lie in [0, 1]");
  }
  std::vector<double> out(initial.begin(), initial.end());
  if (!local) return out;
  if (local->size() != initial.size()) {
    throw InputError("fuse_labels: initial and local labels differ in length");
  }
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = alpha * initial[c] + (1.0 - alpha) * (*local)[c];
  }
  return out;
}

}  // namespace ccd
