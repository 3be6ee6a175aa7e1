#include "ccd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ccd/eval_report.hpp"
#include "ccd/rng.hpp"

namespace ccd {
namespace {

constexpr double kProbClamp = 1e-7;

std::uint64_t view_seed(std::uint64_t seed, std::size_t epoch,
                        const std::string& image_id, const char* branch) {
  return derive_seed(derive_seed(seed, epoch), image_id + '\x1f' + branch);
}

}  // namespace

ClassifierHead::ClassifierHead(std::size_t n_classes, std::size_t n_features)
    : n_classes_(n_classes),
      n_features_(n_features),
      weights_(n_classes * n_features, 0.0),
      biases_(n_classes, 0.0) {}

ClassifierHead ClassifierHead::initialized(std::size_t n_classes,
                                           std::size_t n_features,
                                           std::uint64_t seed, double scale) {
  ClassifierHead h(n_classes, n_features);
  Rng rng(derive_seed(seed, "head-init"));
  for (double& w : h.weights_) w = scale * rng.normal();
  return h;
}

std::vector<double> ClassifierHead::logits(std::span<const double> x) const {
  if (x.size() != n_features_) {
    throw InputError("classifier head expects " + std::to_string(n_features_) +
                     " features, got " + std::to_string(x.size()));
  }
  std::vector<double> z(n_classes_);
  for (std::size_t c = 0; c < n_classes_; ++c) {
    const double* w = weights_.data() + c * n_features_;
    double acc = biases_[c];
    for (std::size_t q = 0; q < n_features_; ++q) acc += w[q] * x[q];
    z[c] = acc;
  }
  return z;
}

std::vector<double> ClassifierHead::forward(std::span<const double> x) const {
  auto z = logits(x);
  for (double& v : z) v = sigmoid(v);
  return z;
}

Tensor ClassifierHead::weights_tensor() const {
  return Tensor({static_cast<std::uint32_t>(n_classes_),
                 static_cast<std::uint32_t>(n_features_)},
                std::vector<float>(weights_.begin(), weights_.end()));
}

Tensor ClassifierHead::biases_tensor() const {
  return Tensor({static_cast<std::uint32_t>(n_classes_)},
                std::vector<float>(biases_.begin(), biases_.end()));
}

ClassifierHead ClassifierHead::from_tensors(const Tensor& weights,
                                            const Tensor& biases) {
  if (weights.rank() != 2 || biases.rank() != 1 || biases.dims[0] != weights.dims[0]) {
    throw InputError("classifier head tensors must be (C, Q) and (C)");
  }
  ClassifierHead h(weights.dims[0], weights.dims[1]);
  std::copy(weights.data.begin(), weights.data.end(), h.weights_.begin());
  std::copy(biases.data.begin(), biases.data.end(), h.biases_.begin());
  for (double v : h.weights_) {
    if (!std::isfinite(v)) throw InputError("classifier head has non-finite weights");
  }
  for (double v : h.biases_) {
    if (!std::isfinite(v)) throw InputError("classifier head has non-finite biases");
  }
  return h;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

LossAndGrad bce_soft(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw InputError("bce_soft: prediction/target size mismatch");
  }
  const double inv_c = 1.0 / static_cast<double>(pred.size());
  LossAndGrad out;
  out.grad_logits.resize(pred.size());
  for (std::size_t c = 0; c < pred.size(); ++c) {
    const double p = std::clamp(pred[c], kProbClamp, 1.0 - kProbClamp);
    const double t = target[c];
    out.loss -= t * std::log(p) + (1.0 - t) * std::log1p(-p);
    out.grad_logits[c] = (pred[c] - t) * inv_c;
  }
  out.loss *= inv_c;
  return out;
}

LossAndGrad consistency_loss(std::span<const double> weak_pred,
                             std::span<const double> strong_pred) {
  return bce_soft(strong_pred, weak_pred);
}

std::vector<double> augment_features(std::span<const double> x, double strength,
                                     std::uint64_t seed) {
  std::vector<double> out(x.begin(), x.end());
  if (strength == 0.0) return out;
  if (!(strength > 0.0)) throw ConfigError("augmentation strength must be >= 0");
  Rng rng(seed);
  for (double& v : out) {
    const double gamma = strength * rng.normal();
    const double delta = strength * rng.normal();
    v = v * (1.0 + gamma) + delta;
  }
  return out;
}

std::optional<std::size_t> early_stop_check(std::span<const double> map_history) {
  if (map_history.size() < 4) return std::nullopt;  // needs three gradients
  // g[t] = m[t] - m[t-1] for t >= 1.
  for (std::size_t t = 2; t + 1 < map_history.size(); ++t) {
    const double g_prev = map_history[t - 1] - map_history[t - 2];
    const double g = map_history[t] - map_history[t - 1];
    const double g_next = map_history[t + 1] - map_history[t];
    if (g_prev > g && g_next > g) return t;
  }
  return std::nullopt;
}

void TrainingSet::validate() const {
  const std::size_t n = image_ids.size();
  if (n_features == 0 || features.size() != n * n_features) {
    throw InputError("training set: features do not match n x Q");
  }
  if (!weak.empty() && weak.size() != features.size()) {
    throw InputError("training set: weak views do not match n x Q");
  }
  if (!strong.empty() && strong.size() != features.size()) {
    throw InputError("training set: strong views do not match n x Q");
  }
}

const char* to_string(TrainPhase phase) {
  return phase == TrainPhase::kWarmup ? "warmup" : "main";
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0 && std::isfinite(learning_rate))) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (warmup_epochs > max_epochs) {
    throw ConfigError("warmup_epochs must not exceed max_epochs");
  }
  if (!(weak_strength >= 0.0 && weak_strength <= strong_strength)) {
    throw ConfigError("augmentation strengths must satisfy 0 <= weak <= strong");
  }
  if (!(beta_warmup >= 0.0 && beta_main >= 0.0)) {
    throw ConfigError("beta must be non-negative");
  }
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be non-negative");
}

std::string TrainLog::to_jsonl() const {
  std::ostringstream os;
  for (const auto& e : epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"phase", to_string(e.phase)},
                        {"mean_loss", e.mean_loss},
                        {"mean_ce", e.mean_ce},
                        {"mean_consistency", e.mean_consistency},
                        {"train_map", e.train_map}};
    j["map_gradient"] = e.map_gradient ? nlohmann::json(*e.map_gradient) : nlohmann::json();
    os << j.dump() << '\n';
  }
  nlohmann::json summary = {{"summary", true},
                            {"phase", to_string(phase)},
                            {"initial_map", initial_map},
                            {"stop_epoch", stop_epoch},
                            {"stop_reason", stop_reason}};
  os << summary.dump() << '\n';
  return os.str();
}

BatchTerms batch_objective(const ClassifierHead& head, const TrainingSet& data,
                           const PseudoLabelSet& labels,
                           std::span<const std::size_t> indices, double beta,
                           const TrainConfig& cfg, std::size_t epoch,
                           std::vector<double>* grad_w,
                           std::vector<double>* grad_b) {
  const std::size_t C = head.num_classes();
  const std::size_t Q = head.num_features();
  if (grad_w) grad_w->assign(C * Q, 0.0);
  if (grad_b) grad_b->assign(C, 0.0);
  BatchTerms terms;
  if (indices.empty()) return terms;
  const double inv_n = 1.0 / static_cast<double>(indices.size());

  std::vector<double> target(C);
  auto accumulate = [&](std::span<const double> g, std::span<const double> x,
                        double scale) {
    if (!grad_w) return;
    for (std::size_t c = 0; c < C; ++c) {
      const double gc = g[c] * scale;
      double* row = grad_w->data() + c * Q;
      for (std::size_t q = 0; q < Q; ++q) row[q] += gc * x[q];
      if (grad_b) (*grad_b)[c] += gc;
    }
  };
  auto check_finite = [&](const LossAndGrad& lg, std::span<const double> pred,
                          std::span<const double> tgt, std::size_t i,
                          const char* term) {
    if (std::isfinite(lg.loss)) return;
    std::size_t bad = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (!std::isfinite(pred[c]) || !std::isfinite(tgt[c])) {
        bad = c;
        break;
      }
    }
    throw NumericError("non-finite " + std::string(term) + " loss at epoch " +
                       std::to_string(epoch) + ", image \"" +
                       data.image_ids[i] + "\", class " + std::to_string(bad));
  };

  for (std::size_t i : indices) {
    const auto& id = data.image_ids[i];
    const std::vector<double> x_weak =
        !data.weak.empty()
            ? std::vector<double>(data.weak.begin() + i * Q, data.weak.begin() + (i + 1) * Q)
            : augment_features(data.row(i), cfg.weak_strength,
                               view_seed(cfg.seed, epoch, id, "weak"));
    const auto lrow = labels.row(i);
    std::copy(lrow.begin(), lrow.end(), target.begin());

    const auto p_weak = head.forward(x_weak);
    const auto ce = bce_soft(p_weak, target);
    check_finite(ce, p_weak, target, i, "cross-entropy");
    terms.ce += ce.loss * inv_n;
    accumulate(ce.grad_logits, x_weak, inv_n);

    if (cfg.consistency) {
      const std::vector<double> x_strong =
          !data.strong.empty()
              ? std::vector<double>(data.strong.begin() + i * Q,
                                    data.strong.begin() + (i + 1) * Q)
              : augment_features(data.row(i), cfg.strong_strength,
                                 view_seed(cfg.seed, epoch, id, "strong"));
      const auto p_strong = head.forward(x_strong);
      const auto cons = consistency_loss(p_weak, p_strong);
      check_finite(cons, p_strong, p_weak, i, "consistency");
      terms.consistency += cons.loss * inv_n;
      accumulate(cons.grad_logits, x_strong, beta * inv_n);
    }
  }
  terms.total = terms.ce + beta * terms.consistency;
  return terms;
}

std::vector<std::size_t> epoch_order(const TrainingSet& data, std::uint64_t seed,
                                     std::size_t epoch) {
  const std::uint64_t epoch_seed = derive_seed(seed, epoch);
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    keyed.emplace_back(derive_seed(epoch_seed, data.image_ids[i]), i);
  }
  std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return data.image_ids[a.second] < data.image_ids[b.second];
  });
  std::vector<std::size_t> order;
  order.reserve(keyed.size());
  for (const auto& k : keyed) order.push_back(k.second);
  return order;
}

std::vector<double> predict(const ClassifierHead& head, const TrainingSet& data) {
  std::vector<double> out;
  out.reserve(data.size() * head.num_classes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = head.forward(data.row(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

TrainResult train(const TrainingSet& data, const PseudoLabelSet& labels,
                  const TrainConfig& cfg, TrainPhase phase,
                  const ClassifierHead& init) {
  cfg.validate();
  data.validate();
  if (phase == TrainPhase::kWarmup && labels.kind != LabelKind::kInitial) {
    throw InputError("warm-up training expects initial pseudo-labels");
  }
  if (phase == TrainPhase::kMain && labels.kind != LabelKind::kFinal) {
    throw InputError("main training expects final pseudo-labels");
  }
  if (labels.n_images != data.size() || labels.n_classes != init.num_classes() ||
      init.num_features() != data.n_features) {
    throw InputError("train: labels, features and head dimensions disagree");
  }

  const double beta = cfg.beta(phase);
  const std::size_t n_epochs = phase == TrainPhase::kWarmup
                                   ? cfg.warmup_epochs
                                   : cfg.max_epochs - cfg.warmup_epochs;
  const std::size_t first_epoch =
      phase == TrainPhase::kWarmup ? 1 : cfg.warmup_epochs + 1;

  TrainResult result{init, {}};
  TrainLog& log = result.log;
  log.phase = phase;
  ClassifierHead& head = result.head;

  std::vector<double> history{
      map_against_labels(predict(head, data), labels, cfg.label_threshold)};
  log.initial_map = history.front();
  std::vector<ClassifierHead> snapshots{head};

  std::vector<double> grad_w, grad_b;
  for (std::size_t e = 0; e < n_epochs; ++e) {
    const std::size_t epoch = first_epoch + e;
    const auto order = epoch_order(data, cfg.seed, epoch);
    double loss_sum = 0.0, ce_sum = 0.0, cons_sum = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size();
         start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      BatchTerms terms;
      try {
        terms = batch_objective(head, data, labels, idx, beta, cfg, epoch,
                                &grad_w, &grad_b);
      } catch (const NumericError& err) {
        throw NumericError(std::string(err.what()) + " (batch " +
                           std::to_string(batch) + ")");
      }
      if (!std::isfinite(terms.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch));
      }
      const double w = static_cast<double>(idx.size());
      loss_sum += terms.total * w;
      ce_sum += terms.ce * w;
      cons_sum += terms.consistency * w;
      auto& W = head.weights();
      auto& b = head.biases();
      for (std::size_t k = 0; k < W.size(); ++k) W[k] -= cfg.learning_rate * grad_w[k];
      for (std::size_t k = 0; k < b.size(); ++k) b[k] -= cfg.learning_rate * grad_b[k];
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    const double n = static_cast<double>(std::max<std::size_t>(1, order.size()));
    rec.mean_loss = loss_sum / n;
    rec.mean_ce = ce_sum / n;
    rec.mean_consistency = cons_sum / n;
    rec.train_map = map_against_labels(predict(head, data), labels, cfg.label_threshold);
    rec.map_gradient = rec.train_map - history.back();
    history.push_back(rec.train_map);
    snapshots.push_back(head);
    log.epochs.push_back(rec);

    if (phase == TrainPhase::kMain && cfg.early_stopping) {
      if (const auto stop = early_stop_check(history)) {
        head = snapshots[*stop];
        log.stop_epoch = cfg.warmup_epochs + *stop;
        log.stop_reason = "early_stop";
        return result;
      }
    }
  }
  log.stop_epoch = n_epochs == 0 ? first_epoch - 1 : first_epoch + n_epochs - 1;
  log.stop_reason = phase == TrainPhase::kWarmup ? "warmup_complete" : "max_epochs";
  return result;
}

}  // namespace ccd
