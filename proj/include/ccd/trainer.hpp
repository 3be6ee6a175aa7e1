#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccd/pseudo_label.hpp"
#include "ccd/tensor_store.hpp"
#include "json.hpp"

namespace ccd {

/// Linear multi-label head over pooled features: sigmoid(W x + b).
/// Its weight rows are the per-class CAM weights.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t n_classes, std::size_t n_features);

  /// W ~ N(0, scale^2) from the seed, b = 0.
  static ClassifierHead initialized(std::size_t n_classes,
                                    std::size_t n_features,
                                    std::uint64_t seed, double scale);

  std::size_t num_classes() const { return n_classes_; }
  std::size_t num_features() const { return n_features_; }

  std::span<const double> weights_row(std::size_t c) const {
    return {weights_.data() + c * n_features_, n_features_};
  }
  std::vector<double>& weights() { return weights_; }
  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& biases() { return biases_; }
  const std::vector<double>& biases() const { return biases_; }

  std::vector<double> logits(std::span<const double> x) const;
  std::vector<double> forward(std::span<const double> x) const;

  /// Parameters stored as float32: weights (C, Q) and biases (C).
  Tensor weights_tensor() const;
  Tensor biases_tensor() const;
  static ClassifierHead from_tensors(const Tensor& weights, const Tensor& biases);

  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;

 private:
  std::size_t n_classes_ = 0;
  std::size_t n_features_ = 0;
  std::vector<double> weights_;
  std::vector<double> biases_;
};

double sigmoid(double z);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad_logits;  // d loss / d z_c
};

/// Mean over classes of soft-target binary cross-entropy. `pred` are sigmoid
/// outputs; they are clamped to [1e-7, 1 - 1e-7] inside the log only.
LossAndGrad bce_soft(std::span<const double> pred, std::span<const double> target);

/// BCE of the strong-branch prediction against the weak-branch prediction,
/// which is treated as a constant target.
LossAndGrad consistency_loss(std::span<const double> weak_pred,
                             std::span<const double> strong_pred);

/// x * (1 + gamma) + delta with gamma, delta ~ N(0, strength^2) elementwise.
std::vector<double> augment_features(std::span<const double> x, double strength,
                                     std::uint64_t seed);

/// First strict interior local minimum of the mAP gradient sequence, as an
/// index into `map_history`; nullopt if none yet.
std::optional<std::size_t> early_stop_check(std::span<const double> map_history);

/// Pooled features per image plus optional precomputed augmented views.
struct TrainingSet {
  std::vector<std::string> image_ids;
  std::size_t n_features = 0;
  std::vector<double> features;  // n x Q
  std::vector<double> weak;      // n x Q or empty
  std::vector<double> strong;    // n x Q or empty

  std::size_t size() const { return image_ids.size(); }
  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * n_features, n_features};
  }
  void validate() const;
};

enum class TrainPhase { kWarmup, kMain };

const char* to_string(TrainPhase phase);

struct TrainConfig {
  double learning_rate = 1e-5;
  std::size_t batch_size = 16;
  std::size_t warmup_epochs = 2;
  std::size_t max_epochs = 10;
  double beta_warmup = 0.0;
  double beta_main = 1.0;
  bool consistency = true;
  double weak_strength = 0.02;
  double strong_strength = 0.1;
  double init_scale = 0.01;
  double label_threshold = 0.5;  // binarization for the train-mAP signal
  bool early_stopping = true;
  std::uint64_t seed = 0;

  void validate() const;
  double beta(TrainPhase phase) const {
    return phase == TrainPhase::kWarmup ? beta_warmup : beta_main;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, counted across phases
  TrainPhase phase = TrainPhase::kWarmup;
  double mean_loss = 0.0;
  double mean_ce = 0.0;
  double mean_consistency = 0.0;
  double train_map = 0.0;
  std::optional<double> map_gradient;
};

struct TrainLog {
  TrainPhase phase = TrainPhase::kWarmup;
  double initial_map = 0.0;  // head before the phase's first epoch
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::string stop_reason;

  /// One JSON object per epoch, then a summary line.
  std::string to_jsonl() const;
};

struct TrainResult {
  ClassifierHead head;
  TrainLog log;
};

/// Full objective on a batch: mean over samples of
///   BCE(sigmoid(W x_weak + b), target) + beta * BCE(sigmoid(W x_strong + b),
///   stopgrad sigmoid(W x_weak + b)).
/// Augmented views are keyed to (seed, epoch, image_id). When grad_w/grad_b
/// are non-null they receive the gradient.
struct BatchTerms {
  double total = 0.0;
  double ce = 0.0;
  double consistency = 0.0;
};

BatchTerms batch_objective(const ClassifierHead& head, const TrainingSet& data,
                           const PseudoLabelSet& labels,
                           std::span<const std::size_t> indices, double beta,
                           const TrainConfig& cfg, std::size_t epoch,
                           std::vector<double>* grad_w,
                           std::vector<double>* grad_b);

/// Image indices in the order visited during `epoch`; the order depends only
/// on (seed, epoch, image_id).
std::vector<std::size_t> epoch_order(const TrainingSet& data,
                                     std::uint64_t seed, std::size_t epoch);

/// Predictions on the un-augmented features, n x C.
std::vector<double> predict(const ClassifierHead& head, const TrainingSet& data);

/// Warm-up runs `warmup_epochs`; main runs up to `max_epochs - warmup_epochs`
/// with early stopping. Throws NumericError on a non-finite loss.
TrainResult train(const TrainingSet& data, const PseudoLabelSet& labels,
                  const TrainConfig& cfg, TrainPhase phase,
                  const ClassifierHead& init);

}  // namespace ccd
