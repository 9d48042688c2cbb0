#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace duet {

struct PRPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid(101);
  for (int i = 0; i <= 100; ++i) grid[i] = i / 100.0;
  return grid;
}

// Mean squared distance between probabilities and binary labels.
inline double brier_score(const std::vector<double>& probs, const std::vector<double>& labels) {
  if (probs.empty() || probs.size() != labels.size())
    throw std::runtime_error("brier_score: empty or mismatched inputs");
  double s = 0;
  for (size_t i = 0; i < probs.size(); ++i) s += (probs[i] - labels[i]) * (probs[i] - labels[i]);
  return s / static_cast<double>(probs.size());
}

// Precision/recall/F1 at each grid threshold with prediction = (prob >= t).
// No predicted positives counts as precision 1; F1 is 0 when precision and
// recall are both 0.
inline std::vector<PRPoint> pr_curve(const std::vector<double>& probs,
                                     const std::vector<double>& labels,
                                     const std::vector<double>& grid) {
  if (probs.size() != labels.size())
    throw std::runtime_error("pr_curve: probs/labels size mismatch");
  if (grid.empty()) throw std::runtime_error("pr_curve: empty threshold grid");
  int64_t positives = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0)
      throw std::runtime_error("pr_curve: labels must be 0 or 1");
    positives += labels[i] == 1.0 ? 1 : 0;
  }
  if (positives == 0) throw std::runtime_error("pr_curve: no positive labels");

  std::vector<PRPoint> curve;
  curve.reserve(grid.size());
  for (double t : grid) {
    int64_t tp = 0, fp = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] >= t) (labels[i] == 1.0 ? tp : fp) += 1;
    }
    PRPoint pt;
    pt.threshold = t;
    pt.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = static_cast<double>(tp) / static_cast<double>(positives);
    pt.f1 = (pt.precision + pt.recall) == 0.0
                ? 0.0
                : 2.0 * pt.precision * pt.recall / (pt.precision + pt.recall);
    curve.push_back(pt);
  }
  return curve;
}

// Threshold of the max-F1 point; ties break toward the larger threshold (the
// more conservative adversarial call).
inline double select_threshold(const std::vector<PRPoint>& curve) {
  if (curve.empty()) throw std::runtime_error("select_threshold: empty curve");
  double best_f1 = -1.0, best_t = 0.0;
  for (const PRPoint& p : curve) {
    if (p.f1 > best_f1 || (p.f1 == best_f1 && p.threshold > best_t)) {
      best_f1 = p.f1;
      best_t = p.threshold;
    }
  }
  return best_t;
}

// CSV with one row per grid point; the brier column is constant (threshold-
// independent diagnostic of the raw probabilities).
inline void save_pr_curve(const std::vector<PRPoint>& curve, double brier,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_pr_curve: cannot open " + path);
  f << "threshold,precision,recall,f1,brier\n";
  char buf[160];
  for (const PRPoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", p.threshold, p.precision,
                  p.recall, p.f1, brier);
    f << buf;
  }
  if (!f) throw std::runtime_error("save_pr_curve: write failed for " + path);
}

}  // namespace duet
