#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "roadseg/grid.hpp"

namespace roadseg::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, tn += o.tn, fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// A pixel is predicted freespace when p > threshold.
inline ConfusionCounts confusion(const ProbabilityMap& p, const LabelImage& y, double threshold) {
  require_same_size(p, y, "confusion");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("confusion: threshold must lie in (0,1)");
  ConfusionCounts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pred = p[i] > threshold, truth = y[i] != 0;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct PointMetrics {
  double acc = 0, pre = 0, rec = 0, fsc = 0, iou = 0, fpr = 0, fnr = 0;
};

namespace detail {
inline double ratio(std::int64_t num, std::int64_t den, double if_zero) {
  return den == 0 ? if_zero : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

/// Zero-division conventions: Pre = 0 when TP+FP = 0, Rec = 0 when TP+FN = 0,
/// IoU = 1 when the union is empty, FPR = 0 when there are no negatives.
inline PointMetrics point_metrics(const ConfusionCounts& c) {
  using detail::ratio;
  PointMetrics m;
  m.acc = ratio(c.tp + c.tn, c.total(), 0.0);
  m.pre = ratio(c.tp, c.tp + c.fp, 0.0);
  m.rec = ratio(c.tp, c.tp + c.fn, 0.0);
  m.fsc = (m.pre + m.rec) > 0 ? 2.0 * m.pre * m.rec / (m.pre + m.rec) : 0.0;
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn, 1.0);
  m.fpr = ratio(c.fp, c.fp + c.tn, 0.0);
  m.fnr = ratio(c.fn, c.tp + c.fn, 0.0);
  return m;
}

struct CurvePoint {
  double threshold = 0, precision = 0, recall = 0, f = 0;
};

/// Thresholds in strictly decreasing order.
struct PRCurve {
  std::vector<CurvePoint> points;
};

struct CurveMetrics {
  double max_f = 0;
  double max_f_threshold = 0;
  double ap = 0;
  PRCurve curve;
};

inline constexpr int kThresholdLevels = 255;

/// k/256 for k = 255..1: 255 evenly spaced levels in (0,1), decreasing.
inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int k = kThresholdLevels; k >= 1; --k) t.push_back(k / 256.0);
  return t;
}

/// Counts at every threshold from a single sort of the scores.
inline std::vector<ConfusionCounts> confusion_sweep(const std::vector<std::pair<double, std::uint8_t>>& scored,
                                                    const std::vector<double>& thresholds) {
  std::vector<std::pair<double, std::uint8_t>> s = scored;
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::int64_t pos = 0;
  for (const auto& [p, y] : s) pos += y != 0;
  const std::int64_t neg = static_cast<std::int64_t>(s.size()) - pos;
  std::vector<ConfusionCounts> out;
  std::size_t i = 0;
  std::int64_t tp = 0, fp = 0;
  for (double t : thresholds) {
    while (i < s.size() && s[i].first > t) {
      (s[i].second ? tp : fp) += 1;
      ++i;
    }
    out.push_back({tp, fp, neg - fp, pos - tp});
  }
  return out;
}

/// 11-point interpolated AP: mean over r in {0, 0.1, ..., 1} of the best
/// precision at recall >= r.
inline double interpolated_ap(const PRCurve& curve) {
  double ap = 0.0;
  for (int k = 0; k <= 10; ++k) {
    const double r = k / 10.0;
    double best = 0.0;
    for (const auto& pt : curve.points)
      if (pt.recall >= r - 1e-12) best = std::max(best, pt.precision);
    ap += best;
  }
  return ap / 11.0;
}

inline CurveMetrics curve_from_counts(const std::vector<ConfusionCounts>& counts, const std::vector<double>& thresholds) {
  CurveMetrics m;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto pm = point_metrics(counts[i]);
    m.curve.points.push_back({thresholds[i], pm.pre, pm.rec, pm.fsc});
    if (pm.fsc > m.max_f) m.max_f = pm.fsc, m.max_f_threshold = thresholds[i];
  }
  m.ap = interpolated_ap(m.curve);
  return m;
}

inline void check_thresholds(const std::vector<double>& t) {
  if (t.size() < 2) throw ContractError("curve_metrics: at least two thresholds required");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] > 0.0 && t[i] < 1.0)) throw ContractError("curve_metrics: thresholds must lie in (0,1)");
    if (i && !(t[i] < t[i - 1])) throw ContractError("curve_metrics: thresholds must be strictly decreasing");
  }
}

inline CurveMetrics curve_metrics(const ProbabilityMap& p, const LabelImage& y,
                                  const std::vector<double>& thresholds = default_thresholds()) {
  require_same_size(p, y, "curve_metrics");
  check_thresholds(thresholds);
  std::vector<std::pair<double, std::uint8_t>> scored(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) scored[i] = {p[i], y[i]};
  return curve_from_counts(confusion_sweep(scored, thresholds), thresholds);
}

/// Dataset-level accumulator: point metrics at 0.5 and the curve over all pixels.
class Accumulator {
 public:
  explicit Accumulator(std::vector<double> thresholds = default_thresholds()) : thresholds_(std::move(thresholds)) {
    check_thresholds(thresholds_);
    sweep_.resize(thresholds_.size());
  }

  void add(const ProbabilityMap& p, const LabelImage& y) {
    require_same_size(p, y, "metrics accumulator");
    at_half_ += confusion(p, y, 0.5);
    std::vector<std::pair<double, std::uint8_t>> scored(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) scored[i] = {p[i], y[i]};
    const auto c = confusion_sweep(scored, thresholds_);
    for (std::size_t i = 0; i < c.size(); ++i) sweep_[i] += c[i];
    ++frames_;
  }

  std::size_t frames() const { return frames_; }
  const ConfusionCounts& counts() const { return at_half_; }
  PointMetrics point() const { return point_metrics(at_half_); }
  CurveMetrics curve() const { return curve_from_counts(sweep_, thresholds_); }

  /// Flat name -> value map used by the text and key-value reports.
  std::map<std::string, double> report() const {
    const auto pm = point();
    const auto cm = curve();
    return {{"acc", pm.acc}, {"pre", pm.pre}, {"rec", pm.rec}, {"fsc", pm.fsc}, {"iou", pm.iou},
            {"fpr", pm.fpr}, {"fnr", pm.fnr}, {"maxf", cm.max_f}, {"ap", cm.ap}};
  }

 private:
  std::vector<double> thresholds_;
  ConfusionCounts at_half_;
  std::vector<ConfusionCounts> sweep_;
  std::size_t frames_ = 0;
};

}  // namespace roadseg::metrics
