#pragma once

#include <span>
#include <string>
#include <vector>

#include "ccd/error.hpp"
#include "json.hpp"
#include "ccd/pseudo_label.hpp"

namespace ccd {

enum class EntropyMode {
  kNormalized,  // H(p) / ln(C), threshold in (0, 1]
  kRaw,         // H(p) in nats
};

struct CalibrationConfig {
  double entropy_threshold = 0.5;
  EntropyMode entropy_mode = EntropyMode::kNormalized;
  double floor = 0.01;
  static constexpr double kClampMax = 1.0;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

/// Per-class mean top-1 probability over entropy-admitted samples.
struct BiasVector {
  std::vector<double> bias;           // neutral 1.0 where counts == 0
  std::vector<std::uint64_t> counts;  // top-1 occurrences among admitted
  std::uint64_t n_filtered = 0;       // samples admitted by the filter

  std::size_t size() const { return bias.size(); }
  static BiasVector neutral(std::size_t n_classes);
  void validate() const;
};

/// Thrown by estimate_bias when the filter admits nothing.
class EmptyAdmissionError : public InputError {
 public:
  using InputError::InputError;
};

double entropy(std::span<const double> probs);
double normalized_entropy(std::span<const double> probs);
double normalized_entropy(std::span<const float> probs);

/// Accumulates top-1 statistics; mergeable so the reduction can be sharded.
class BiasAccumulator {
 public:
  BiasAccumulator(std::size_t n_classes, CalibrationConfig cfg);

  /// Returns true when the sample passed the entropy filter.
  bool add(std::span<const float> probs);
  void merge(const BiasAccumulator& other);
  std::uint64_t admitted() const { return admitted_; }

  /// Throws EmptyAdmissionError when no sample was admitted.
  BiasVector finish() const;

 private:
  CalibrationConfig cfg_;
  std::vector<double> sum_;
  std::vector<std::uint64_t> count_;
  std::uint64_t admitted_ = 0;
};

BiasVector estimate_bias(const PseudoLabelSet& labels,
                         const CalibrationConfig& cfg);

/// out_c = clamp(p_c / bias_c, floor, 1).
std::vector<double> calibrate(std::span<const double> probs,
                              const BiasVector& bias,
                              const CalibrationConfig& cfg);

/// Row-wise calibration of a label set; result is marked calibrated.
PseudoLabelSet calibrate(const PseudoLabelSet& labels, const BiasVector& bias,
                         const CalibrationConfig& cfg);

/// {"n_filtered": N, "classes": {name: {"bias": b, "count": n}}}
nlohmann::json bias_to_json(const BiasVector& bias,
                            std::span<const std::string> class_names);
BiasVector bias_from_json(const nlohmann::json& doc,
                          std::span<const std::string> class_names);

}  // namespace ccd
