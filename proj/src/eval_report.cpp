#include "ccd/eval_report.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ccd {

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> gt) {
  if (scores.size() != gt.size()) {
    throw InputError("average_precision: scores and labels differ in length");
  }
  const auto n_pos = std::count_if(gt.begin(), gt.end(),
                                   [](std::uint8_t g) { return g != 0; });
  if (n_pos == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  // Sum of precision@k times the recall increment at k; the increment is
  // 1/n_pos at a positive and 0 elsewhere.
  const double recall_step = 1.0 / static_cast<double>(n_pos);
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (gt[order[k]] == 0) continue;
    ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    ap += precision * recall_step;
  }
  return ap;
}

double mean_ap(std::span<const std::optional<double>> per_class) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ap : per_class) {
    if (!ap) continue;
    sum += *ap;
    ++n;
  }
  if (n == 0) throw InputError("mean_ap: every class was skipped (no positives)");
  return sum / static_cast<double>(n);
}

EvalResult evaluate(std::span<const double> scores,
                    std::span<const std::uint8_t> gt, std::size_t n_classes) {
  if (n_classes == 0 || scores.size() != gt.size() ||
      scores.size() % n_classes != 0) {
    throw InputError("evaluate: scores/labels shape mismatch");
  }
  const std::size_t n = scores.size() / n_classes;
  EvalResult r;
  std::vector<double> col(n);
  std::vector<std::uint8_t> gcol(n);
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * n_classes + c];
      gcol[i] = gt[i * n_classes + c];
    }
    r.per_class_ap.push_back(average_precision(col, gcol));
    if (!r.per_class_ap.back()) r.skipped_classes.push_back(c);
  }
  r.map = mean_ap(r.per_class_ap);
  return r;
}

double map_against_labels(std::span<const double> scores,
                          const PseudoLabelSet& labels, double threshold) {
  std::vector<std::uint8_t> gt(labels.probs.size());
  for (std::size_t k = 0; k < gt.size(); ++k) gt[k] = labels.probs[k] > threshold;
  try {
    return evaluate(scores, gt, labels.n_classes).map;
  } catch (const InputError&) {
    if (std::none_of(gt.begin(), gt.end(), [](std::uint8_t g) { return g; })) {
      return 0.0;
    }
    throw;
  }
}

nlohmann::json eval_to_json(const EvalResult& r,
                            std::span<const std::string> class_names) {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    per_class[class_names[c]] =
        r.per_class_ap[c] ? nlohmann::json(*r.per_class_ap[c]) : nlohmann::json();
  }
  nlohmann::json skipped = nlohmann::json::array();
  for (std::size_t c : r.skipped_classes) skipped.push_back(class_names[c]);
  return {{"map", r.map}, {"per_class_ap", per_class}, {"skipped_classes", skipped}};
}

std::string eval_to_csv(const EvalResult& r,
                        std::span<const std::string> class_names) {
  std::ostringstream os;
  os << "class,ap\n";
  char buf[64];
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    os << class_names[c] << ',';
    if (r.per_class_ap[c]) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.per_class_ap[c]);
      os << buf;
    }
    os << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.6f", r.map);
  os << "mAP," << buf << '\n';
  return os.str();
}

std::string format_ap_table(const EvalResult& r,
                            std::span<const std::string> class_names) {
  std::size_t width = 5;
  for (const auto& n : class_names) width = std::max(width, n.size());
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s %7s\n", static_cast<int>(width), "class", "AP");
  os << buf;
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    if (r.per_class_ap[c]) {
      std::snprintf(buf, sizeof buf, "%-*s %7.1f\n", static_cast<int>(width),
                    class_names[c].c_str(), 100.0 * *r.per_class_ap[c]);
    } else {
      std::snprintf(buf, sizeof buf, "%-*s %7s\n", static_cast<int>(width),
                    class_names[c].c_str(), "-");
    }
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s %7.1f\n", static_cast<int>(width), "mAP",
                100.0 * r.map);
  os << buf;
  return os.str();
}

BiasReport bias_report(const PseudoLabelSet& initial, const BiasVector& bias,
                       std::span<const std::string> class_names,
                       std::span<const std::uint64_t> gt_counts) {
  const std::size_t C = initial.n_classes;
  if (bias.size() != C || class_names.size() != C ||
      (!gt_counts.empty() && gt_counts.size() != C)) {
    throw InputError("bias_report: class count mismatch");
  }
  // Unfiltered top-1 distribution over the whole label set.
  std::vector<std::uint64_t> top1_all(C, 0);
  for (std::size_t i = 0; i < initial.n_images; ++i) {
    const auto row = initial.row(i);
    ++top1_all[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) -
                                        row.begin())];
  }

  nlohmann::json classes = nlohmann::json::array();
  std::ostringstream csv;
  csv << "class,mean_top1_prob,top1_count_admitted,top1_count_all";
  if (!gt_counts.empty()) csv << ",gt_count";
  csv << '\n';
  char buf[64];
  for (std::size_t c = 0; c < C; ++c) {
    nlohmann::json entry = {{"class", class_names[c]},
                            {"bias", bias.bias[c]},
                            {"top1_count_admitted", bias.counts[c]},
                            {"top1_count_all", top1_all[c]}};
    entry["mean_top1_prob"] =
        bias.counts[c] > 0 ? nlohmann::json(bias.bias[c]) : nlohmann::json();
    csv << class_names[c] << ',';
    if (bias.counts[c] > 0) {
      std::snprintf(buf, sizeof buf, "%.6f", bias.bias[c]);
      csv << buf;
    }
    csv << ',' << bias.counts[c] << ',' << top1_all[c];
    if (!gt_counts.empty()) {
      entry["gt_count"] = gt_counts[c];
      csv << ',' << gt_counts[c];
    }
    csv << '\n';
    classes.push_back(std::move(entry));
  }
  BiasReport report;
  report.json = {{"n_images", initial.n_images},
                 {"n_filtered", bias.n_filtered},
                 {"empty_admission", bias.n_filtered == 0},
                 {"classes", std::move(classes)}};
  report.csv = csv.str();
  return report;
}

}  // namespace ccd
