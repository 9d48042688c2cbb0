#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/model.hpp"
#include "duet/tensor.hpp"

namespace duet {

// --- quantiles --------------------------------------------------------------------

// Linear interpolation between order statistics (the "type 7" estimator),
// used project-wide. `sorted` must be ascending.
inline double quantile_sorted(const double* sorted, int64_t n, double p) {
  if (n < 1) throw std::runtime_error("quantile: need at least one sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::runtime_error("quantile: level must be in [0,1]");
  const double h = p * static_cast<double>(n - 1);
  const int64_t i = static_cast<int64_t>(h);
  if (i >= n - 1) return sorted[n - 1];
  return sorted[i] + (h - i) * (sorted[i + 1] - sorted[i]);
}

inline double quantile(std::vector<double> samples, double p) {
  std::sort(samples.begin(), samples.end());
  return quantile_sorted(samples.data(), static_cast<int64_t>(samples.size()), p);
}

// --- PIT levels --------------------------------------------------------------------

// Position of `reference` within its own MC sample distribution:
// (count(< ref) + count(== ref)/2) / N.
inline double empirical_level(const double* samples, int64_t n, double reference) {
  if (n < 2) throw std::runtime_error("empirical_level: need at least 2 samples");
  int64_t less = 0, eq = 0;
  for (int64_t i = 0; i < n; ++i) {
    less += samples[i] < reference ? 1 : 0;
    eq += samples[i] == reference ? 1 : 0;
  }
  return (static_cast<double>(less) + 0.5 * static_cast<double>(eq)) / static_cast<double>(n);
}

inline double empirical_level(const std::vector<double>& samples, double reference) {
  return empirical_level(samples.data(), static_cast<int64_t>(samples.size()), reference);
}

// --- isotonic regression -----------------------------------------------------------

struct CalibrationPair {
  double x = 0;  // PIT level of a pixel
  double y = 0;  // empirical CDF of x over the calibration set
};

// Monotone nondecreasing map on [0,1]: linear interpolation between
// breakpoints, constant outside them.
struct CalibrationModel {
  std::vector<double> breakpoints;  // strictly increasing
  std::vector<double> fitted;       // nondecreasing

  static CalibrationModel identity() { return {{0.0, 1.0}, {0.0, 1.0}}; }

  void validate() const {
    if (breakpoints.empty() || breakpoints.size() != fitted.size())
      throw std::runtime_error("CalibrationModel: empty or mismatched breakpoint/fitted arrays");
    for (size_t i = 0; i < breakpoints.size(); ++i) {
      if (!(breakpoints[i] >= 0.0 && breakpoints[i] <= 1.0) ||
          !(fitted[i] >= 0.0 && fitted[i] <= 1.0))
        throw std::runtime_error("CalibrationModel: values outside [0,1]");
      if (i > 0 && !(breakpoints[i] > breakpoints[i - 1]))
        throw std::runtime_error("CalibrationModel: breakpoints not strictly increasing");
      if (i > 0 && fitted[i] < fitted[i - 1])
        throw std::runtime_error("CalibrationModel: fitted values not monotone");
    }
  }

  double apply(double level) const {
    if (breakpoints.empty()) throw std::runtime_error("CalibrationModel: empty model");
    if (level <= breakpoints.front()) return fitted.front();
    if (level >= breakpoints.back()) return fitted.back();
    const auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), level);
    const size_t j = static_cast<size_t>(it - breakpoints.begin());
    const double t = (level - breakpoints[j - 1]) / (breakpoints[j] - breakpoints[j - 1]);
    return fitted[j - 1] + t * (fitted[j] - fitted[j - 1]);
  }

  // inf{p in [0,1] : apply(p) >= target}; 1 when the map never reaches target.
  double inverse_level(double target) const {
    if (breakpoints.empty()) throw std::runtime_error("CalibrationModel: empty model");
    if (fitted.front() >= target) return 0.0;
    if (fitted.back() < target) return 1.0;
    const auto it = std::lower_bound(fitted.begin(), fitted.end(), target);
    const size_t j = static_cast<size_t>(it - fitted.begin());  // first fitted >= target
    const double y0 = fitted[j - 1], y1 = fitted[j];
    const double p =
        breakpoints[j - 1] + (target - y0) / (y1 - y0) * (breakpoints[j] - breakpoints[j - 1]);
    return std::clamp(p, 0.0, 1.0);
  }
};

// Pool-adjacent-violators: least-squares nondecreasing fit to (x, y) pairs.
// Duplicate x values are pooled (weighted) before fitting so the result is a
// function of x.
inline CalibrationModel fit_isotonic(std::vector<CalibrationPair> pairs) {
  if (pairs.size() < 2) throw std::runtime_error("fit_isotonic: need at least 2 pairs");
  for (const CalibrationPair& p : pairs)
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0))
      throw std::runtime_error("fit_isotonic: pair outside [0,1]x[0,1]");
  std::sort(pairs.begin(), pairs.end(), [](const CalibrationPair& a, const CalibrationPair& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });

  // collapse duplicate x to (mean y, weight n)
  std::vector<double> xs, ys, ws;
  for (size_t i = 0; i < pairs.size();) {
    size_t j = i;
    double sum = 0;
    while (j < pairs.size() && pairs[j].x == pairs[i].x) sum += pairs[j++].y;
    xs.push_back(pairs[i].x);
    ys.push_back(sum / static_cast<double>(j - i));
    ws.push_back(static_cast<double>(j - i));
    i = j;
  }

  // PAVA over blocks
  struct Block {
    double wsum, wysum;
    size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    blocks.push_back({ws[i], ws[i] * ys[i], 1});
    while (blocks.size() > 1) {
      Block& b = blocks[blocks.size() - 1];
      Block& a = blocks[blocks.size() - 2];
      if (b.wysum * a.wsum >= a.wysum * b.wsum) break;  // means nondecreasing
      a.wsum += b.wsum;
      a.wysum += b.wysum;
      a.count += b.count;
      blocks.pop_back();
    }
  }

  CalibrationModel mdl;
  mdl.breakpoints = std::move(xs);
  mdl.fitted.reserve(mdl.breakpoints.size());
  for (const Block& b : blocks) {
    const double mean = b.wysum / b.wsum;
    for (size_t k = 0; k < b.count; ++k) mdl.fitted.push_back(mean);
  }
  mdl.validate();
  return mdl;
}

// Level-space calibration: invert the isotonic map on levels, then take the
// sample quantile at the corrected level.
inline double calibrated_quantile(const CalibrationModel& mdl, std::vector<double> samples,
                                  double target_level) {
  if (!(target_level > 0.0 && target_level < 1.0))
    throw std::runtime_error("calibrated_quantile: target level must be in (0,1)");
  mdl.validate();
  return quantile(std::move(samples), mdl.inverse_level(target_level));
}

// Empirical-CDF pairs for a set of PIT levels: x = level, y = rank(<=)/n.
inline std::vector<CalibrationPair> build_calibration_pairs(std::vector<double> levels) {
  if (levels.size() < 2)
    throw std::runtime_error("build_calibration_pairs: need at least 2 levels");
  std::sort(levels.begin(), levels.end());
  const double n = static_cast<double>(levels.size());
  std::vector<CalibrationPair> pairs(levels.size());
  for (size_t i = 0; i < levels.size(); ++i) {
    size_t j = i;  // advance over ties so every duplicate gets rank(<=)
    while (j + 1 < levels.size() && levels[j + 1] == levels[i]) ++j;
    for (size_t k = i; k <= j; ++k) pairs[k] = {levels[i], static_cast<double>(j + 1) / n};
    i = j;
  }
  return pairs;
}

// --- reference probabilities ------------------------------------------------------

// Per-pixel reference map from the deterministic (all-point-estimate)
// localizer: probability maps plus inclusion flags for pixels it classifies
// correctly at threshold T.
struct ReferenceMap {
  std::vector<Tensor> probs;     // [image] MxM probability map
  std::vector<Tensor> included;  // [image] MxM 0/1 flags
  int64_t included_count = 0;
};

inline ReferenceMap reference_probabilities(const LocalizerModel& nonbayes,
                                            const std::vector<const Tensor*>& images,
                                            const std::vector<const Tensor*>& masks, double T) {
  if (nonbayes.mask.any())
    throw std::runtime_error(
        "reference_probabilities: reference model must have all-point-estimate placement");
  if (images.empty() || images.size() != masks.size())
    throw std::runtime_error("reference_probabilities: images/masks size mismatch");
  ReferenceMap ref;
  std::vector<std::vector<Tensor>> out = mc_predict_batch(nonbayes, images, 1, 0);
  for (size_t i = 0; i < images.size(); ++i) {
    Tensor prob = std::move(out[i][0]);
    const Tensor& truth = *masks[i];
    if (truth.shape() != prob.shape())
      throw std::runtime_error("reference_probabilities: mask/prediction shape mismatch");
    Tensor inc(prob.shape());
    for (int64_t p = 0; p < prob.numel(); ++p) {
      const bool pred = prob[p] >= T;
      const bool is_adv = truth[p] != 0.0;
      inc[p] = pred == is_adv ? 1.0 : 0.0;
      ref.included_count += pred == is_adv ? 1 : 0;
    }
    ref.probs.push_back(std::move(prob));
    ref.included.push_back(std::move(inc));
  }
  if (ref.included_count == 0)
    throw std::runtime_error(
        "reference_probabilities: reference model classified no pixel correctly");
  return ref;
}

// PIT levels of the reference probabilities within the Bayesian model's MC
// samples, over included pixels only. mc_maps is indexed [image][draw].
inline std::vector<double> pit_levels(const std::vector<std::vector<Tensor>>& mc_maps,
                                      const ReferenceMap& ref) {
  if (mc_maps.size() != ref.probs.size())
    throw std::runtime_error("pit_levels: image count mismatch");
  std::vector<double> levels;
  std::vector<double> buf;
  for (size_t i = 0; i < mc_maps.size(); ++i) {
    const std::vector<Tensor>& draws = mc_maps[i];
    if (draws.size() < 2) throw std::runtime_error("pit_levels: need at least 2 MC draws");
    buf.resize(draws.size());
    for (int64_t p = 0; p < ref.probs[i].numel(); ++p) {
      if (ref.included[i][p] == 0.0) continue;
      for (size_t d = 0; d < draws.size(); ++d) buf[d] = draws[d][p];
      levels.push_back(
          empirical_level(buf.data(), static_cast<int64_t>(buf.size()), ref.probs[i][p]));
    }
  }
  return levels;
}

// --- persistence -------------------------------------------------------------------

inline void save_calibration(const CalibrationModel& mdl, const std::string& path) {
  mdl.validate();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_calibration: cannot open " + path);
  f << "level,fitted\n";
  char buf[64];
  for (size_t i = 0; i < mdl.breakpoints.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", mdl.breakpoints[i], mdl.fitted[i]);
    f << buf;
  }
  if (!f) throw std::runtime_error("save_calibration: write failed for " + path);
}

inline CalibrationModel load_calibration(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_calibration: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "level,fitted")
    throw std::runtime_error("load_calibration: bad header in " + path);
  CalibrationModel mdl;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("load_calibration: bad row in " + path);
    mdl.breakpoints.push_back(std::stod(line.substr(0, comma)));
    mdl.fitted.push_back(std::stod(line.substr(comma + 1)));
  }
  mdl.validate();
  return mdl;
}

}  // namespace duet
