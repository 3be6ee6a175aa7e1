#include "ccd/debias.hpp"

#include <algorithm>
#include <cmath>

namespace ccd {

void CalibrationConfig::validate() const {
  if (!(floor > 0.0 && floor < 0.5)) {
    throw ConfigError("calibration floor must lie in (0, 0.5)");
  }
  if (entropy_mode == EntropyMode::kNormalized) {
    if (!(entropy_threshold > 0.0 && entropy_threshold <= 1.0)) {
      throw ConfigError("normalized entropy threshold must lie in (0, 1]");
    }
  } else if (!(entropy_threshold > 0.0 && std::isfinite(entropy_threshold))) {
    throw ConfigError("raw entropy threshold must be positive");
  }
}

BiasVector BiasVector::neutral(std::size_t n_classes) {
  BiasVector b;
  b.bias.assign(n_classes, 1.0);
  b.counts.assign(n_classes, 0);
  return b;
}

void BiasVector::validate() const {
  if (bias.size() != counts.size()) {
    throw InputError("bias vector: bias and counts differ in length");
  }
  for (std::size_t c = 0; c < bias.size(); ++c) {
    if (!(bias[c] > 0.0 && bias[c] <= 1.0)) {
      throw InputError("bias vector: class " + std::to_string(c) +
                       " bias outside (0, 1]");
    }
  }
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double normalized_entropy(std::span<const double> probs) {
  if (probs.size() < 2) {
    throw InputError("normalized entropy needs at least two classes");
  }
  return entropy(probs) / std::log(static_cast<double>(probs.size()));
}

double normalized_entropy(std::span<const float> probs) {
  std::vector<double> p(probs.begin(), probs.end());
  return normalized_entropy(p);
}

BiasAccumulator::BiasAccumulator(std::size_t n_classes, CalibrationConfig cfg)
    : cfg_(cfg), sum_(n_classes, 0.0), count_(n_classes, 0) {
  cfg_.validate();
  if (n_classes < 2) throw InputError("bias estimation needs at least two classes");
}

bool BiasAccumulator::add(std::span<const float> probs) {
  if (probs.size() != sum_.size()) {
    throw InputError("bias accumulator: class count mismatch");
  }
  std::vector<double> p(probs.begin(), probs.end());
  const double h = cfg_.entropy_mode == EntropyMode::kNormalized
                       ? normalized_entropy(p)
                       : entropy(p);
  if (!(h < cfg_.entropy_threshold)) return false;
  // max_element returns the first maximum: lowest index wins ties.
  const auto k = static_cast<std::size_t>(
      std::max_element(p.begin(), p.end()) - p.begin());
  sum_[k] += p[k];
  ++count_[k];
  ++admitted_;
  return true;
}

void BiasAccumulator::merge(const BiasAccumulator& other) {
  if (other.sum_.size() != sum_.size()) {
    throw InputError("bias accumulator: cannot merge different class counts");
  }
  for (std::size_t c = 0; c < sum_.size(); ++c) {
    sum_[c] += other.sum_[c];
    count_[c] += other.count_[c];
  }
  admitted_ += other.admitted_;
}

BiasVector BiasAccumulator::finish() const {
  if (admitted_ == 0) {
    throw EmptyAdmissionError(
        "bias estimation: no sample passed the entropy threshold; raise "
        "entropy_threshold");
  }
  BiasVector b = BiasVector::neutral(sum_.size());
  b.n_filtered = admitted_;
  for (std::size_t c = 0; c < sum_.size(); ++c) {
    b.counts[c] = count_[c];
    if (count_[c] > 0) b.bias[c] = sum_[c] / static_cast<double>(count_[c]);
  }
  return b;
}

BiasVector estimate_bias(const PseudoLabelSet& labels,
                         const CalibrationConfig& cfg) {
  BiasAccumulator acc(labels.n_classes, cfg);
  for (std::size_t i = 0; i < labels.n_images; ++i) acc.add(labels.row(i));
  return acc.finish();
}

std::vector<double> calibrate(std::span<const double> probs,
                              const BiasVector& bias,
                              const CalibrationConfig& cfg) {
  if (probs.size() != bias.size()) {
    throw InputError("calibrate: class count mismatch");
  }
  std::vector<double> out(probs.size());
  for (std::size_t c = 0; c < probs.size(); ++c) {
    out[c] = std::clamp(probs[c] / bias.bias[c], cfg.floor,
                        CalibrationConfig::kClampMax);
  }
  return out;
}

PseudoLabelSet calibrate(const PseudoLabelSet& labels, const BiasVector& bias,
                         const CalibrationConfig& cfg) {
  PseudoLabelSet out = labels;
  out.calibrated = true;
  std::vector<double> row(labels.n_classes);
  for (std::size_t i = 0; i < labels.n_images; ++i) {
    const auto src = labels.row(i);
    std::copy(src.begin(), src.end(), row.begin());
    const auto cal = calibrate(row, bias, cfg);
    auto dst = out.row(i);
    for (std::size_t c = 0; c < cal.size(); ++c) dst[c] = static_cast<float>(cal[c]);
  }
  return out;
}

nlohmann::json bias_to_json(const BiasVector& bias,
                            std::span<const std::string> class_names) {
  if (class_names.size() != bias.size()) {
    throw InputError("bias_to_json: class name count mismatch");
  }
  nlohmann::json classes = nlohmann::json::object();
  for (std::size_t c = 0; c < bias.size(); ++c) {
    classes[class_names[c]] = {{"bias", bias.bias[c]}, {"count", bias.counts[c]}};
  }
  return {{"n_filtered", bias.n_filtered}, {"classes", std::move(classes)}};
}

BiasVector bias_from_json(const nlohmann::json& doc,
                          std::span<const std::string> class_names) {
  BiasVector b = BiasVector::neutral(class_names.size());
  try {
    b.n_filtered = doc.at("n_filtered").get<std::uint64_t>();
    const auto& classes = doc.at("classes");
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      const auto& entry = classes.at(class_names[c]);
      b.bias[c] = entry.at("bias").get<double>();
      b.counts[c] = entry.at("count").get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed bias document: ") + e.what());
  }
  b.validate();
  return b;
}

}  // namespace ccd
