#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccd/debias.hpp"
#include "ccd/pseudo_label.hpp"
#include "json.hpp"

namespace ccd {

/// All-point average precision. Scores are ranked descending with ties kept
/// in original order. Returns nullopt when gt has no positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> gt);

/// Arithmetic mean over the defined entries; throws InputError if none are.
double mean_ap(std::span<const std::optional<double>> per_class);

struct EvalResult {
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  std::vector<std::size_t> skipped_classes;
};

/// `scores` and `gt` are n_images x n_classes, row-major.
EvalResult evaluate(std::span<const double> scores,
                    std::span<const std::uint8_t> gt, std::size_t n_classes);

/// mAP of scores against labels binarized at `threshold` (strict >); 0 when
/// no class has a positive.
double map_against_labels(std::span<const double> scores,
                          const PseudoLabelSet& labels, double threshold);

nlohmann::json eval_to_json(const EvalResult& r,
                            std::span<const std::string> class_names);
std::string eval_to_csv(const EvalResult& r,
                        std::span<const std::string> class_names);
/// Fixed-width per-class AP table (values in percent), last column mAP.
std::string format_ap_table(const EvalResult& r,
                            std::span<const std::string> class_names);

struct BiasReport {
  nlohmann::json json;
  std::string csv;
};

/// Per-class mean top-1 probability and top-1 counts, with ground-truth
/// occurrence counts when `gt_counts` is given.
BiasReport bias_report(const PseudoLabelSet& initial, const BiasVector& bias,
                       std::span<const std::string> class_names,
                       std::span<const std::uint64_t> gt_counts = {});

}  // namespace ccd
