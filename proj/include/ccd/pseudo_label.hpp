#pragma once

#include <span>
#include <string>
#include <vector>

#include "ccd/tensor_store.hpp"

namespace ccd {

/// Row-major matrix of embeddings: one row per image or per class.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<float> values);

  std::span<const float> row(std::size_t i) const {
    return {values.data() + i * dim, dim};
  }

  /// Throws InputError on non-finite entries or (near-)zero rows.
  void validate(const std::string& what) const;
};

enum class LabelKind { kInitial, kLocal, kFinal };

const char* to_string(LabelKind kind);
LabelKind label_kind_from_string(const std::string& s);

/// Per-image, per-class probabilities. Raw initial labels are softmax rows;
/// calibrated, local and final labels carry no row-sum constraint.
struct PseudoLabelSet {
  std::size_t n_images = 0;
  std::size_t n_classes = 0;
  LabelKind kind = LabelKind::kInitial;
  bool calibrated = false;
  std::vector<float> probs;

  PseudoLabelSet() = default;
  PseudoLabelSet(std::size_t n_images, std::size_t n_classes, LabelKind kind);

  std::span<const float> row(std::size_t i) const {
    return {probs.data() + i * n_classes, n_classes};
  }
  std::span<float> row(std::size_t i) {
    return {probs.data() + i * n_classes, n_classes};
  }

  void validate() const;

  Tensor to_tensor() const;
  static PseudoLabelSet from_tensor(const Tensor& t, LabelKind kind,
                                    bool calibrated);
};

double cosine_similarity(std::span<const float> f, std::span<const float> w);

/// Temperature softmax with max-subtraction. Throws ConfigError if tau <= 0
/// and NumericError on non-finite scores.
std::vector<double> softmax_probs(std::span<const double> scores, double tau);

/// Cosine scores of one embedding against every class text embedding.
std::vector<double> class_scores(std::span<const float> f,
                                 const EmbeddingMatrix& texts);

PseudoLabelSet initial_labels(const EmbeddingMatrix& images,
                              const EmbeddingMatrix& texts, double tau);

}  // namespace ccd
