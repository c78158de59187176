#pragma once

// Classification metrics: confusion matrix, accuracy, per-class
// precision/recall/F1, one-vs-rest ROC and precision-recall curves.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/ops.hpp"
#include "rcmp/tensor.hpp"

namespace rcmp {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::int64_t> counts;  // row = true class, column = predicted
  std::vector<std::string> class_names;

  std::int64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth * classes + pred)]; }
  std::int64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }
  std::int64_t trace() const {
    std::int64_t t = 0;
    for (int c = 0; c < classes; ++c) t += at(c, c);
    return t;
  }
  std::int64_t row_sum(int c) const {
    std::int64_t s = 0;
    for (int p = 0; p < classes; ++p) s += at(c, p);
    return s;
  }
  std::int64_t col_sum(int c) const {
    std::int64_t s = 0;
    for (int t = 0; t < classes; ++t) s += at(t, c);
    return s;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline std::vector<std::string> default_class_names(int classes) {
  std::vector<std::string> out;
  for (int c = 0; c < classes; ++c) out.push_back(std::to_string(c));
  return out;
}

inline ConfusionMatrix confusion_matrix(const std::vector<int>& predictions, const std::vector<int>& labels, int classes,
                                        std::vector<std::string> class_names = {}) {
  if (classes <= 0) throw MetricsError("confusion_matrix: class count must be positive");
  if (predictions.size() != labels.size())
    throw MetricsError("confusion_matrix: " + std::to_string(predictions.size()) + " predictions vs " +
                       std::to_string(labels.size()) + " labels");
  if (class_names.empty()) class_names = default_class_names(classes);
  if (class_names.size() != static_cast<std::size_t>(classes))
    throw MetricsError("confusion_matrix: class name count differs from class count");
  ConfusionMatrix cm{classes, std::vector<std::int64_t>(static_cast<std::size_t>(classes * classes), 0),
                     std::move(class_names)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes)
      throw MetricsError("confusion_matrix: sample " + std::to_string(i) + " has a value outside [0, " +
                         std::to_string(classes) + ")");
    ++cm.counts[static_cast<std::size_t>(t * classes + p)];
  }
  return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw MetricsError("accuracy: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

/// A rate with an explicit marker for a zero denominator (value 0 then).
struct MetricValue {
  double value = 0.0;
  bool defined = false;
  bool operator==(const MetricValue&) const = default;
};

inline MetricValue ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return {0.0, false};
  return {static_cast<double>(num) / static_cast<double>(den), true};
}

inline void check_class(const ConfusionMatrix& cm, int c) {
  if (c < 0 || c >= cm.classes) throw MetricsError("class index " + std::to_string(c) + " out of range");
}

/// TP / (TP + FP)
inline MetricValue precision(const ConfusionMatrix& cm, int c) {
  check_class(cm, c);
  return ratio(cm.at(c, c), cm.col_sum(c));
}

/// TP / (TP + FN)
inline MetricValue recall(const ConfusionMatrix& cm, int c) {
  check_class(cm, c);
  return ratio(cm.at(c, c), cm.row_sum(c));
}

inline MetricValue f1(const ConfusionMatrix& cm, int c) {
  const auto p = precision(cm, c), r = recall(cm, c);
  if (!p.defined || !r.defined || p.value + r.value == 0.0) return {0.0, false};
  return {2.0 * p.value * r.value / (p.value + r.value), true};
}

// ---------------------------------------------------------------------------
// Curves

struct CurvePoints {
  std::vector<double> thresholds;  // +inf for the ROC origin
  std::vector<double> x;           // FPR (ROC) or recall (PR)
  std::vector<double> y;           // TPR (ROC) or precision (PR)
  double area = 0.0;               // AUC or average precision
};

namespace detail {

struct ThresholdStep {
  double threshold;
  std::int64_t tp, fp;  // cumulative counts of scores >= threshold
};

inline std::vector<ThresholdStep> threshold_sweep(const std::vector<double>& scores, const std::vector<int>& labels,
                                                  int positive, std::int64_t& positives, std::int64_t& negatives) {
  if (scores.size() != labels.size()) throw MetricsError("curve: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  positives = std::count(labels.begin(), labels.end(), positive);
  negatives = static_cast<std::int64_t>(labels.size()) - positives;
  std::vector<ThresholdStep> steps;
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    if (std::isnan(s)) throw MetricsError("curve: NaN score");
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == positive ? tp : fp) += 1;
    steps.push_back({s, tp, fp});
  }
  return steps;
}

}  // namespace detail

/// One-vs-rest ROC for `positive`; tied scores form a single step; AUC by the
/// trapezoidal rule.
inline CurvePoints roc_curve(const std::vector<double>& scores, const std::vector<int>& labels, int positive) {
  std::int64_t P = 0, N = 0;
  const auto steps = detail::threshold_sweep(scores, labels, positive, P, N);
  if (P == 0 || N == 0)
    throw MetricsError("roc_curve: class " + std::to_string(positive) + " has " + std::to_string(P) +
                       " positive and " + std::to_string(N) + " negative samples; both must be nonzero");
  CurvePoints c;
  c.thresholds.push_back(std::numeric_limits<double>::infinity());
  c.x.push_back(0.0);
  c.y.push_back(0.0);
  for (const auto& s : steps) {
    const double fpr = static_cast<double>(s.fp) / static_cast<double>(N);
    const double tpr = static_cast<double>(s.tp) / static_cast<double>(P);
    c.area += (fpr - c.x.back()) * (tpr + c.y.back()) / 2.0;
    c.thresholds.push_back(s.threshold);
    c.x.push_back(fpr);
    c.y.push_back(tpr);
  }
  return c;
}

/// Precision/recall over descending thresholds; average precision is
/// sum_k (R_k - R_{k-1}) * P_k with R_0 = 0.
inline CurvePoints pr_curve(const std::vector<double>& scores, const std::vector<int>& labels, int positive) {
  std::int64_t P = 0, N = 0;
  const auto steps = detail::threshold_sweep(scores, labels, positive, P, N);
  if (P == 0) throw MetricsError("pr_curve: class " + std::to_string(positive) + " has no positive samples");
  CurvePoints c;
  double prev_recall = 0.0;
  for (const auto& s : steps) {
    const double r = static_cast<double>(s.tp) / static_cast<double>(P);
    const double p = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
    c.area += (r - prev_recall) * p;
    prev_recall = r;
    c.thresholds.push_back(s.threshold);
    c.x.push_back(r);
    c.y.push_back(p);
  }
  return c;
}

inline void to_json(nlohmann::json& j, const CurvePoints& c) {
  auto th = nlohmann::json::array();
  for (double t : c.thresholds) th.push_back(std::isinf(t) ? nlohmann::json(nullptr) : nlohmann::json(t));
  j = nlohmann::json{{"thresholds", th}, {"x", c.x}, {"y", c.y}, {"area", c.area}};
}

inline std::string curve_csv(const CurvePoints& c, const std::string& x_name, const std::string& y_name) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold," << x_name << ',' << y_name << '\n';
  for (std::size_t i = 0; i < c.x.size(); ++i) {
    if (std::isinf(c.thresholds[i]))
      os << "inf";
    else
      os << c.thresholds[i];
    os << ',' << c.x[i] << ',' << c.y[i] << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Report

struct ClassMetrics {
  std::string name;
  std::int64_t support = 0;
  MetricValue precision, recall, f1;
  std::optional<CurvePoints> roc, pr;  // absent when the class lacks positives or negatives
};

struct EvalReport {
  std::int64_t samples = 0;
  double accuracy = 0.0;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> classes;
};

inline void to_json(nlohmann::json& j, const MetricValue& v) { j = {{"value", v.value}, {"defined", v.defined}}; }

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  auto rows = nlohmann::json::array();
  for (int t = 0; t < r.confusion.classes; ++t) {
    auto row = nlohmann::json::array();
    for (int p = 0; p < r.confusion.classes; ++p) row.push_back(r.confusion.at(t, p));
    rows.push_back(row);
  }
  auto per_class = nlohmann::json::array();
  for (const auto& c : r.classes) {
    per_class.push_back({{"name", c.name},
                         {"support", c.support},
                         {"precision", c.precision},
                         {"recall", c.recall},
                         {"f1", c.f1},
                         {"roc", c.roc ? nlohmann::json(*c.roc) : nlohmann::json(nullptr)},
                         {"pr", c.pr ? nlohmann::json(*c.pr) : nlohmann::json(nullptr)}});
  }
  j = nlohmann::json{{"samples", r.samples},
                     {"accuracy", r.accuracy},
                     {"macro", {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}}},
                     {"class_names", r.confusion.class_names},
                     {"confusion_matrix", rows},
                     {"classes", per_class}};
}

/// Row-wise softmax in double precision.
inline std::vector<std::vector<double>> softmax_scores(const Tensor<float>& logits) {
  require_rank(logits, 2, "softmax_scores");
  const auto p = ops::softmax(logits.cast<double>());
  const auto N = static_cast<std::size_t>(logits.dim(0)), C = static_cast<std::size_t>(logits.dim(1));
  std::vector<std::vector<double>> out(C, std::vector<double>(N));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) out[c][n] = p[n * C + c];
  return out;  // out[class][sample]
}

/// Builds the full report from N x C logits: argmax for hard predictions,
/// softmax for curve scores, macro averages as unweighted class means.
inline EvalReport evaluate_logits(const Tensor<float>& logits, const std::vector<int>& labels,
                                  std::vector<std::string> class_names = {}) {
  require_rank(logits, 2, "evaluate_logits");
  if (logits.dim(0) == 0 || labels.empty()) throw MetricsError("evaluate: empty test set");
  if (static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw MetricsError("evaluate: logits rows differ from label count");
  const int C = static_cast<int>(logits.dim(1));
  EvalReport r;
  r.samples = static_cast<std::int64_t>(labels.size());
  r.confusion = confusion_matrix(ops::argmax_rows(logits), labels, C, std::move(class_names));
  r.accuracy = accuracy(r.confusion);
  const auto scores = softmax_scores(logits);
  for (int c = 0; c < C; ++c) {
    ClassMetrics m{r.confusion.class_names[static_cast<std::size_t>(c)], r.confusion.row_sum(c),
                   precision(r.confusion, c), recall(r.confusion, c), f1(r.confusion, c), {}, {}};
    const auto positives = m.support, negatives = r.samples - m.support;
    if (positives > 0 && negatives > 0) m.roc = roc_curve(scores[static_cast<std::size_t>(c)], labels, c);
    if (positives > 0) m.pr = pr_curve(scores[static_cast<std::size_t>(c)], labels, c);
    r.macro_precision += m.precision.value;
    r.macro_recall += m.recall.value;
    r.macro_f1 += m.f1.value;
    r.classes.push_back(std::move(m));
  }
  r.macro_precision /= C;
  r.macro_recall /= C;
  r.macro_f1 /= C;
  return r;
}

}  // namespace rcmp
