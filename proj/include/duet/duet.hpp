#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/calibration.hpp"
#include "duet/model.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct DuetConfig {
  double confidence = 90.0;  // central confidence window in percent
  int n_samples = 20;        // MC forward draws
  double threshold = 0.5;    // adversarial decision threshold T
  CalibrationModel calibration;  // set explicitly; identity() must be opted into
};

// c=90 -> upper one-tail level 0.95
inline double upper_tail_level(double confidence) {
  return (confidence + (100.0 - confidence) / 2.0) / 100.0;
}

inline double lower_tail_level(double confidence) {
  return (100.0 - confidence) / 2.0 / 100.0;
}

inline void validate_duet(const DuetConfig& cfg) {
  if (!(cfg.confidence > 0.0 && cfg.confidence < 100.0))
    throw std::runtime_error("DuetConfig: confidence must be in (0,100)");
  if (cfg.n_samples < 2) throw std::runtime_error("DuetConfig: need at least 2 MC samples");
  if (!(cfg.threshold >= 0.0 && cfg.threshold <= 1.0))
    throw std::runtime_error("DuetConfig: threshold must be in [0,1]");
  cfg.calibration.validate();  // rejects a missing (empty) calibration map
}

struct LocalizationResult {
  Tensor mask;           // 1 = adversarial: upper window exceeds T
  Tensor upper_windows;  // calibrated upper-tail values
  Tensor lower_windows;  // calibrated lower-tail values (diagnostic only)
  Tensor mean_map;       // MC mean probabilities
};

// Per-pixel exceedance decision over a batch sharing one set of MC draws:
// pixel adversarial iff the calibrated upper confidence window exceeds T
// (equality stays non-adversarial).
inline std::vector<LocalizationResult> duet_localize_batch(
    const LocalizerModel& mdl, const std::vector<const Tensor*>& images, const DuetConfig& cfg,
    uint64_t seed) {
  validate_duet(cfg);
  // the target levels are fixed, so the isotonic map is inverted once
  const double p_hi = cfg.calibration.inverse_level(upper_tail_level(cfg.confidence));
  const double p_lo = cfg.calibration.inverse_level(lower_tail_level(cfg.confidence));
  std::vector<std::vector<Tensor>> mc = mc_predict_batch(mdl, images, cfg.n_samples, seed);

  std::vector<LocalizationResult> out;
  out.reserve(images.size());
  const int64_t m = mdl.m;
  std::vector<double> buf(cfg.n_samples);
  for (size_t i = 0; i < images.size(); ++i) {
    LocalizationResult r{Tensor({m, m}), Tensor({m, m}), Tensor({m, m}), Tensor({m, m})};
    for (int64_t p = 0; p < m * m; ++p) {
      double mean = 0;
      for (int n = 0; n < cfg.n_samples; ++n) {
        buf[n] = mc[i][n][p];
        mean += buf[n];
      }
      std::sort(buf.begin(), buf.end());
      const double upper = quantile_sorted(buf.data(), cfg.n_samples, p_hi);
      r.upper_windows[p] = upper;
      r.lower_windows[p] = quantile_sorted(buf.data(), cfg.n_samples, p_lo);
      r.mean_map[p] = mean / cfg.n_samples;
      r.mask[p] = upper > cfg.threshold ? 1.0 : 0.0;
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline LocalizationResult duet_localize(const LocalizerModel& mdl, const Tensor& image,
                                        const DuetConfig& cfg, uint64_t seed) {
  return std::move(duet_localize_batch(mdl, {&image}, cfg, seed)[0]);
}

// Baseline: threshold the MC mean (>= T is adversarial). A deterministic
// model with n=1 reduces to direct thresholding of its single output.
inline std::vector<Tensor> point_localize_batch(const LocalizerModel& mdl,
                                                const std::vector<const Tensor*>& images,
                                                double threshold, int n_samples, uint64_t seed) {
  if (n_samples < 1) throw std::runtime_error("point_localize: need at least 1 MC sample");
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw std::runtime_error("point_localize: threshold must be in [0,1]");
  std::vector<std::vector<Tensor>> mc = mc_predict_batch(mdl, images, n_samples, seed);
  std::vector<Tensor> masks;
  masks.reserve(images.size());
  const int64_t m = mdl.m;
  for (size_t i = 0; i < images.size(); ++i) {
    Tensor mask({m, m});
    for (int64_t p = 0; p < m * m; ++p) {
      double mean = 0;
      for (int n = 0; n < n_samples; ++n) mean += mc[i][n][p];
      mask[p] = mean / n_samples >= threshold ? 1.0 : 0.0;
    }
    masks.push_back(std::move(mask));
  }
  return masks;
}

inline Tensor point_localize(const LocalizerModel& mdl, const Tensor& image, double threshold,
                             int n_samples, uint64_t seed) {
  return std::move(point_localize_batch(mdl, {&image}, threshold, n_samples, seed)[0]);
}

// 8-bit binary PGM visualization of a mask: 0 = background, 255 = adversarial.
inline void write_pgm(const Tensor& mask, const std::string& path) {
  if (mask.rank() != 2) throw std::runtime_error("write_pgm: expected a rank-2 mask");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << mask.dim(1) << " " << mask.dim(0) << "\n255\n";
  std::vector<unsigned char> row(mask.dim(1));
  for (int64_t y = 0; y < mask.dim(0); ++y) {
    for (int64_t x = 0; x < mask.dim(1); ++x)
      row[x] = mask[y * mask.dim(1) + x] != 0.0 ? 255 : 0;
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

}  // namespace duet
