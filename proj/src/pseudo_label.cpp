#include "ccd/pseudo_label.hpp"

#include <algorithm>
#include <cmath>

namespace ccd {

EmbeddingMatrix::EmbeddingMatrix(std::size_t r, std::size_t d,
                                 std::vector<float> v)
    : rows(r), dim(d), values(std::move(v)) {
  if (values.size() != rows * dim) {
    throw InputError("embedding matrix payload does not match rows x dim");
  }
}

void EmbeddingMatrix::validate(const std::string& what) const {
  for (std::size_t i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (float v : row(i)) {
      if (!std::isfinite(v)) {
        throw InputError(what + " row " + std::to_string(i) +
                         " has a non-finite entry");
      }
      sq += static_cast<double>(v) * v;
    }
    if (std::sqrt(sq) <= 1e-12) {
      throw InputError(what + " row " + std::to_string(i) + " is a zero vector");
    }
  }
}

const char* to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::kInitial: return "initial";
    case LabelKind::kLocal: return "local";
    case LabelKind::kFinal: return "final";
  }
  return "?";
}

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "initial") return LabelKind::kInitial;
  if (s == "local") return LabelKind::kLocal;
  if (s == "final") return LabelKind::kFinal;
  throw InputError("unknown label kind \"" + s + "\"");
}

PseudoLabelSet::PseudoLabelSet(std::size_t n, std::size_t c, LabelKind k)
    : n_images(n), n_classes(c), kind(k), probs(n * c, 0.0f) {}

void PseudoLabelSet::validate() const {
  if (probs.size() != n_images * n_classes) {
    throw InputError("pseudo-label payload does not match n_images x n_classes");
  }
  for (std::size_t i = 0; i < n_images; ++i) {
    double sum = 0.0;
    for (float p : row(i)) {
      if (!(p >= 0.0f && p <= 1.0f)) {
        throw InputError("pseudo-label row " + std::to_string(i) +
                         " has an entry outside [0, 1]");
      }
      sum += p;
    }
    if (kind == LabelKind::kInitial && !calibrated && std::abs(sum - 1.0) > 1e-6) {
      throw InputError("initial pseudo-label row " + std::to_string(i) +
                       " does not sum to 1");
    }
  }
}

Tensor PseudoLabelSet::to_tensor() const {
  return Tensor({static_cast<std::uint32_t>(n_images),
                 static_cast<std::uint32_t>(n_classes)},
                probs);
}

PseudoLabelSet PseudoLabelSet::from_tensor(const Tensor& t, LabelKind kind,
                                           bool calibrated) {
  if (t.rank() != 2) throw InputError("pseudo-label tensor must have rank 2");
  PseudoLabelSet s(t.dims[0], t.dims[1], kind);
  s.calibrated = calibrated;
  s.probs = t.data;
  s.validate();
  return s;
}

double cosine_similarity(std::span<const float> f, std::span<const float> w) {
  if (f.size() != w.size()) {
    throw InputError("cosine_similarity: dimension mismatch (" +
                     std::to_string(f.size()) + " vs " +
                     std::to_string(w.size()) + ")");
  }
  double dot = 0.0, ff = 0.0, ww = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    dot += static_cast<double>(f[i]) * w[i];
    ff += static_cast<double>(f[i]) * f[i];
    ww += static_cast<double>(w[i]) * w[i];
  }
  const double nf = std::sqrt(ff), nw = std::sqrt(ww);
  if (nf <= 1e-12 || nw <= 1e-12) {
    throw InputError("cosine_similarity: zero-norm input");
  }
  return std::clamp(dot / (nf * nw), -1.0, 1.0);
}

std::vector<double> softmax_probs(std::span<const double> scores, double tau) {
  if (!(tau > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (scores.empty()) return {};
  double mx = -INFINITY;
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("softmax: non-finite score");
    mx = std::max(mx, s);
  }
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - mx) / tau);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

std::vector<double> class_scores(std::span<const float> f,
                                 const EmbeddingMatrix& texts) {
  std::vector<double> s(texts.rows);
  for (std::size_t c = 0; c < texts.rows; ++c) {
    s[c] = cosine_similarity(f, texts.row(c));
  }
  return s;
}

PseudoLabelSet initial_labels(const EmbeddingMatrix& images,
                              const EmbeddingMatrix& texts, double tau) {
  if (images.dim != texts.dim) {
    throw InputError("image and text embeddings differ in dimension");
  }
  PseudoLabelSet out(images.rows, texts.rows, LabelKind::kInitial);
  for (std::size_t i = 0; i < images.rows; ++i) {
    const auto p = softmax_probs(class_scores(images.row(i), texts), tau);
    auto dst = out.row(i);
    for (std::size_t c = 0; c < p.size(); ++c) dst[c] = static_cast<float>(p[c]);
  }
  return out;
}

}  // namespace ccd
