#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitforge/errors.hpp"
#include "vitforge/tensor.hpp"
#include "json.hpp"

namespace vitforge::metrics {

// counts[t][p] = samples with true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes)
      : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t operator()(std::size_t t, std::size_t p) const {
    return counts_[t * classes_ + p];
  }
  std::uint64_t& operator()(std::size_t t, std::size_t p) {
    return counts_[t * classes_ + p];
  }

  std::uint64_t total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < classes_; ++c) s += (*this)(c, c);
    return s;
  }
  std::uint64_t true_count(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < classes_; ++p) s += (*this)(t, p);
    return s;
  }
  std::uint64_t predicted_count(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < classes_; ++t) s += (*this)(t, p);
    return s;
  }

  static ConfusionMatrix from_rows(
      std::initializer_list<std::initializer_list<std::uint64_t>> rows) {
    ConfusionMatrix cm(rows.size());
    std::size_t t = 0;
    for (const auto& r : rows) {
      if (r.size() != rows.size()) throw DimensionError("confusion matrix must be square");
      std::size_t p = 0;
      for (auto v : r) cm(t, p++) = v;
      ++t;
    }
    return cm;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion(std::span<const std::int64_t> truth,
                                 std::span<const std::int64_t> pred,
                                 std::size_t classes) {
  if (truth.size() != pred.size()) {
    throw DimensionError("confusion: " + std::to_string(truth.size()) +
                         " true labels vs " + std::to_string(pred.size()) +
                         " predictions");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (auto v : {truth[i], pred[i]}) {
      if (v < 0 || static_cast<std::size_t>(v) >= classes) {
        throw LabelError("confusion: label " + std::to_string(v) + " at index " +
                         std::to_string(i) + " outside [0, " +
                         std::to_string(classes) + ")");
      }
    }
    ++cm(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw UndefinedMetricError("accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total) * 100.0;
}

// Per-class figures; nullopt marks a 0/0 entry.
struct ClassAverages {
  std::vector<std::optional<double>> per_class;
  std::optional<double> macro;
  std::optional<double> weighted;
};

namespace detail {
inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

inline ClassAverages average(const ConfusionMatrix& cm,
                             std::vector<std::optional<double>> per_class) {
  ClassAverages a;
  double sum = 0, wsum = 0;
  std::size_t defined = 0;
  std::uint64_t support = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (!per_class[c]) continue;
    sum += *per_class[c];
    ++defined;
    const auto s = cm.true_count(c);
    wsum += *per_class[c] * static_cast<double>(s);
    support += s;
  }
  if (defined) a.macro = sum / static_cast<double>(defined);
  if (support) a.weighted = wsum / static_cast<double>(support);
  a.per_class = std::move(per_class);
  return a;
}
}  // namespace detail

inline ClassAverages recall(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> r(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c)
    r[c] = detail::ratio(cm(c, c), cm.true_count(c));
  auto a = detail::average(cm, std::move(r));
  // Support-weighted recall collapses to trace / total; use the count form.
  if (cm.total()) a.weighted = detail::ratio(cm.trace(), cm.total());
  return a;
}

inline ClassAverages precision(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> p(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c)
    p[c] = detail::ratio(cm(c, c), cm.predicted_count(c));
  return detail::average(cm, std::move(p));
}

struct PrecisionRecall {
  ClassAverages precision;
  ClassAverages recall;
};

inline PrecisionRecall precision_recall(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UndefinedMetricError("precision/recall of an empty matrix");
  return {precision(cm), recall(cm)};
}

// Mean recall over classes that have at least one true sample.
inline double balanced_accuracy(const ConfusionMatrix& cm,
                                std::vector<std::size_t>* excluded = nullptr) {
  auto r = recall(cm);
  if (excluded) {
    excluded->clear();
    for (std::size_t c = 0; c < r.per_class.size(); ++c)
      if (!r.per_class[c]) excluded->push_back(c);
  }
  if (!r.macro) throw UndefinedMetricError("balanced accuracy: no class has true samples");
  return *r.macro;
}

struct SensitivitySpecificity {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

inline SensitivitySpecificity sensitivity_specificity(const ConfusionMatrix& cm,
                                                      std::size_t positive) {
  if (cm.classes() != 2 || positive > 1) {
    throw DimensionError("sensitivity/specificity need a 2x2 matrix and positive class 0 or 1");
  }
  const std::size_t negative = 1 - positive;
  return {detail::ratio(cm(positive, positive), cm.true_count(positive)),
          detail::ratio(cm(negative, negative), cm.true_count(negative))};
}

// Mann-Whitney AUC of `scores` for the binary labels `positive`, via average
// ranks. Returns a fraction in [0, 1]; nullopt when either side is empty.
inline std::optional<double> binary_auc_fraction(std::span<const double> scores,
                                                 const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (positive[order[k]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j + 1;
  }
  const std::uint64_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * q);
}

enum class AucMode { kBinary, kOneVsRestMacro };

struct AucResult {
  double percent;
  std::vector<std::size_t> skipped_classes;  // one-vs-rest classes without both sides
};

// scores: n x C probabilities (rows summing to 1 within 1e-4).
// kBinary uses column `positive` and requires C == 2.
inline AucResult roc_auc(const Tensor<double>& scores,
                         std::span<const std::int64_t> truth, AucMode mode,
                         std::size_t positive = 1) {
  if (scores.rank() != 2 || scores.dim(0) != truth.size()) {
    throw DimensionError("roc_auc: scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(truth.size()) + " labels");
  }
  const std::size_t n = scores.dim(0), classes = scores.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += scores.at(i, c);
    if (std::abs(s - 1.0) > 1e-4) {
      throw ContractError("roc_auc: probability row " + std::to_string(i) +
                          " sums to " + std::to_string(s));
    }
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes)
      throw LabelError("roc_auc: label out of range at index " + std::to_string(i));
  }
  auto column_auc = [&](std::size_t c) {
    std::vector<double> col(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores.at(i, c);
      pos[i] = static_cast<std::size_t>(truth[i]) == c;
    }
    return binary_auc_fraction(col, pos);
  };
  AucResult r{0.0, {}};
  if (mode == AucMode::kBinary) {
    if (classes != 2 || positive > 1)
      throw DimensionError("binary AUC needs two score columns");
    auto a = column_auc(positive);
    if (!a) throw UndefinedMetricError("binary AUC needs positive and negative samples");
    r.percent = 100.0 * *a;
    return r;
  }
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (auto a = column_auc(c)) {
      sum += *a;
      ++used;
    } else {
      r.skipped_classes.push_back(c);
    }
  }
  if (!used) throw UndefinedMetricError("one-vs-rest AUC: no class has both sides");
  r.percent = 100.0 * sum / static_cast<double>(used);
  return r;
}

struct MetricsReport {
  double accuracy = 0;
  double balanced_accuracy = 0;
  std::vector<std::size_t> balanced_accuracy_excluded;
  std::optional<double> auc;  // absent when undefined
  std::vector<std::size_t> auc_skipped;
  std::optional<double> sensitivity, specificity;  // binary only
  ClassAverages precision, recall;
  ConfusionMatrix confusion{0};
};

// Full report from pooled predictions and class probabilities. For binary
// problems `positive` names the positive class used for sensitivity, AUC.
inline MetricsReport make_report(std::span<const std::int64_t> truth,
                                 std::span<const std::int64_t> pred,
                                 const Tensor<double>& probabilities,
                                 std::size_t classes, std::size_t positive = 1) {
  MetricsReport r;
  r.confusion = confusion(truth, pred, classes);
  r.accuracy = accuracy(r.confusion);
  r.balanced_accuracy = balanced_accuracy(r.confusion, &r.balanced_accuracy_excluded);
  auto pr = precision_recall(r.confusion);
  r.precision = std::move(pr.precision);
  r.recall = std::move(pr.recall);
  const bool binary = classes == 2;
  if (binary) {
    auto ss = sensitivity_specificity(r.confusion, positive);
    r.sensitivity = ss.sensitivity;
    r.specificity = ss.specificity;
  }
  try {
    auto a = roc_auc(probabilities, truth,
                     binary ? AucMode::kBinary : AucMode::kOneVsRestMacro, positive);
    r.auc = a.percent;
    r.auc_skipped = std::move(a.skipped_classes);
  } catch (const UndefinedMetricError&) {
    r.auc.reset();
  }
  return r;
}

// Two-decimal rounding used for every rendered percentage.
inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline nlohmann::json to_json(const std::optional<double>& v) {
  return v ? nlohmann::json(round2(*v)) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ClassAverages& a) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : a.per_class) per.push_back(to_json(v));
  return {{"per_class", per}, {"macro", to_json(a.macro)},
          {"weighted", to_json(a.weighted)}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json cm = nlohmann::json::array();
  for (std::size_t t = 0; t < r.confusion.classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion(t, p));
    cm.push_back(row);
  }
  nlohmann::json j = {
      {"accuracy", round2(r.accuracy)},
      {"balanced_accuracy", round2(r.balanced_accuracy)},
      {"auc", to_json(r.auc)},
      {"sensitivity", to_json(r.sensitivity)},
      {"specificity", to_json(r.specificity)},
      {"precision", to_json(r.precision)},
      {"recall", to_json(r.recall)},
      {"confusion", cm},
  };
  nlohmann::json undefined = nlohmann::json::object();
  if (!r.balanced_accuracy_excluded.empty())
    undefined["balanced_accuracy_excluded_classes"] = r.balanced_accuracy_excluded;
  if (!r.auc_skipped.empty()) undefined["auc_skipped_classes"] = r.auc_skipped;
  auto undefined_classes = [](const ClassAverages& a) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < a.per_class.size(); ++c)
      if (!a.per_class[c]) out.push_back(c);
    return out;
  };
  if (auto u = undefined_classes(r.precision); !u.empty()) undefined["precision_classes"] = u;
  if (auto u = undefined_classes(r.recall); !u.empty()) undefined["recall_classes"] = u;
  if (!r.auc) undefined["auc"] = true;
  if (r.confusion.classes() == 2) {
    if (!r.sensitivity) undefined["sensitivity"] = true;
    if (!r.specificity) undefined["specificity"] = true;
  }
  if (!undefined.empty()) j["undefined"] = undefined;
  return j;
}

}  // namespace vitforge::metrics
