#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "duet/tensor.hpp"

namespace duet {

namespace detail {
inline void check_binary_mask(const Tensor& t, const char* what) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (t[i] != 0.0 && t[i] != 1.0)
      throw std::runtime_error(std::string(what) + ": mask values must be 0 or 1");
}
}  // namespace detail

// Two-class mean IoU: average of the adversarial-class and background-class
// IoU. A class absent from both masks contributes IoU 1.
inline double miou(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw std::runtime_error("miou: mask shape mismatch: " + shape_str(pred.shape()) + " vs " +
                             shape_str(truth.shape()));
  detail::check_binary_mask(pred, "miou");
  detail::check_binary_mask(truth, "miou");
  int64_t inter_adv = 0, union_adv = 0, inter_bg = 0, union_bg = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] != 0.0, t = truth[i] != 0.0;
    inter_adv += (p && t) ? 1 : 0;
    union_adv += (p || t) ? 1 : 0;
    inter_bg += (!p && !t) ? 1 : 0;
    union_bg += (!p || !t) ? 1 : 0;
  }
  const double iou_adv = union_adv == 0 ? 1.0 : static_cast<double>(inter_adv) / union_adv;
  const double iou_bg = union_bg == 0 ? 1.0 : static_cast<double>(inter_bg) / union_bg;
  return 0.5 * (iou_adv + iou_bg);
}

// Clean-image variant: background IoU only (the adversarial class does not
// exist in the truth, so scoring it would be vacuous).
inline double miou_clean(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) throw std::runtime_error("miou_clean: mask shape mismatch");
  detail::check_binary_mask(pred, "miou_clean");
  for (int64_t i = 0; i < truth.numel(); ++i)
    if (truth[i] != 0.0)
      throw std::runtime_error("miou_clean: truth mask must be all-zero (clean image)");
  int64_t tn = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) tn += pred[i] == 0.0 ? 1 : 0;
  return static_cast<double>(tn) / static_cast<double>(pred.numel());
}

struct MetricReport {
  std::vector<std::pair<std::string, double>> per_image;  // (id, score)
  double mean = 0;
  double std_dev = 0;  // population standard deviation
};

inline MetricReport aggregate(std::vector<std::pair<std::string, double>> per_image) {
  if (per_image.empty()) throw std::runtime_error("aggregate: empty score list");
  MetricReport r;
  r.per_image = std::move(per_image);
  for (const auto& [id, v] : r.per_image) r.mean += v;
  r.mean /= static_cast<double>(r.per_image.size());
  for (const auto& [id, v] : r.per_image) r.std_dev += (v - r.mean) * (v - r.mean);
  r.std_dev = std::sqrt(r.std_dev / static_cast<double>(r.per_image.size()));
  return r;
}

// One row per image plus mean/std summary rows; columns id,metric,value.
inline void save_report(const MetricReport& r, const std::string& metric,
                        const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_report: cannot open " + path);
  f << "id,metric,value\n";
  char buf[128];
  for (const auto& [id, v] : r.per_image) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g\n", id.c_str(), metric.c_str(), v);
    f << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%s,%.17g\n", metric.c_str(), r.mean);
  f << buf;
  std::snprintf(buf, sizeof buf, "std,%s,%.17g\n", metric.c_str(), r.std_dev);
  f << buf;
  if (!f) throw std::runtime_error("save_report: write failed for " + path);
}

}  // namespace duet
