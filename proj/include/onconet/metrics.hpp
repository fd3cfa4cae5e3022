#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace onconet::metrics {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricsReport {
  double auc = 0.5;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double threshold = 0.5;
  Confusion confusion;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("metrics: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  std::size_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l == 1)
      ++pos;
    else if (l == 0)
      ++neg;
    else
      throw std::invalid_argument("metrics: labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("metrics: both classes must be present");
}

}  // namespace detail

/// Mann-Whitney AUC from mid-ranks: ties between a positive and a negative
/// count one half.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n - n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Empirical ROC curve, one point per distinct score (descending), starting at (0,0).
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double P = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double N = static_cast<double>(n) - P;
  std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    pts.push_back({scores[order[i]], fp / N, tp / P});
    i = j;
  }
  return pts;
}

/// Trapezoidal area under roc_curve().
inline double roc_auc_trapezoid(std::span<const double> scores, std::span<const int> labels) {
  const auto pts = roc_curve(scores, labels);
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return area;
}

/// Predicts the positive class iff score >= threshold.
inline MetricsReport sens_spec(std::span<const double> scores, std::span<const int> labels,
                               double threshold = 0.5) {
  detail::check_inputs(scores, labels);
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("metrics: threshold must be in (0,1)");
  MetricsReport r;
  r.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      (pred ? r.confusion.tp : r.confusion.fn)++;
    else
      (pred ? r.confusion.fp : r.confusion.tn)++;
  }
  r.n_pos = r.confusion.tp + r.confusion.fn;
  r.n_neg = r.confusion.tn + r.confusion.fp;
  r.sensitivity = static_cast<double>(r.confusion.tp) / static_cast<double>(r.n_pos);
  r.specificity = static_cast<double>(r.confusion.tn) / static_cast<double>(r.n_neg);
  r.auc = roc_auc(scores, labels);
  return r;
}

inline void write_table(std::ostream& os, const MetricsReport& r) {
  os << std::fixed << std::setprecision(4);
  os << "metric        value\n";
  os << "auc           " << r.auc << '\n';
  os << "sensitivity   " << r.sensitivity << '\n';
  os << "specificity   " << r.specificity << '\n';
  os << "threshold     " << r.threshold << '\n';
  os << "TP FP TN FN   " << r.confusion.tp << ' ' << r.confusion.fp << ' ' << r.confusion.tn << ' '
     << r.confusion.fn << '\n';
  os << "n_pos n_neg   " << r.n_pos << ' ' << r.n_neg << '\n';
  os.unsetf(std::ios::floatfield);
}

/// Machine-readable key=value form.
inline void write_kv(std::ostream& os, const MetricsReport& r) {
  os << std::setprecision(17);
  os << "auc=" << r.auc << '\n'
     << "sensitivity=" << r.sensitivity << '\n'
     << "specificity=" << r.specificity << '\n'
     << "threshold=" << r.threshold << '\n'
     << "tp=" << r.confusion.tp << '\n'
     << "fp=" << r.confusion.fp << '\n'
     << "tn=" << r.confusion.tn << '\n'
     << "fn=" << r.confusion.fn << '\n'
     << "n_pos=" << r.n_pos << '\n'
     << "n_neg=" << r.n_neg << '\n';
}

inline void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& pts) {
  os << std::setprecision(17) << "threshold,fpr,tpr\n";
  for (const auto& p : pts) os << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
}

}  // namespace onconet::metrics
