#include "duet/threshold.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "duet/rng.hpp"

namespace duet {
namespace {

namespace fs = std::filesystem;

TEST(PrCurve, PerfectPredictor) {
  const std::vector<double> probs = {1, 0, 1, 0, 1};
  const std::vector<double> labels = {1, 0, 1, 0, 1};
  std::vector<PRPoint> curve = pr_curve(probs, labels, {0.5});
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_DOUBLE_EQ(curve[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(curve[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(curve[0].f1, 1.0);
}

TEST(PrCurve, DegenerateNoPredictions) {
  // sentinel threshold above every probability: nothing predicted positive
  std::vector<PRPoint> curve = pr_curve({0.9, 0.2}, {1, 0}, {1.01});
  EXPECT_DOUBLE_EQ(curve[0].precision, 1.0);  // vacuous precision convention
  EXPECT_DOUBLE_EQ(curve[0].recall, 0.0);
  EXPECT_DOUBLE_EQ(curve[0].f1, 0.0);
}

TEST(PrCurve, HandEnumeratedSmallCase) {
  // t=0.5 predicts {0.9, 0.8}; TP=1 (0.9), FP=1 (0.8), FN=1 (0.3)
  std::vector<PRPoint> curve = pr_curve({0.9, 0.8, 0.3}, {1, 0, 1}, {0.5});
  EXPECT_DOUBLE_EQ(curve[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(curve[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(curve[0].f1, 0.5);
}

TEST(PrCurve, Validation) {
  EXPECT_THROW(pr_curve({0.5}, {1, 0}, {0.5}), std::runtime_error);
  EXPECT_THROW(pr_curve({0.5, 0.2}, {0, 0}, {0.5}), std::runtime_error);   // no positives
  EXPECT_THROW(pr_curve({0.5, 0.2}, {1, 0.5}, {0.5}), std::runtime_error);  // non-binary
  EXPECT_THROW(pr_curve({0.5, 0.2}, {1, 0}, {}), std::runtime_error);
}

TEST(PrCurve, RecallNonincreasingInThreshold) {
  Rng rng(17);
  std::vector<double> probs(500), labels(500);
  for (size_t i = 0; i < probs.size(); ++i) {
    labels[i] = rng.uniform01() < 0.3 ? 1.0 : 0.0;
    probs[i] = rng.uniform01() * 0.6 + 0.4 * labels[i];
  }
  std::vector<PRPoint> curve = pr_curve(probs, labels, default_threshold_grid());
  for (size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].recall, curve[i - 1].recall);
}

TEST(SelectThreshold, MaxF1AndTieRule) {
  PRPoint a{0.4, 1, 1, 0.7}, b{0.6, 1, 1, 0.7}, c{0.2, 1, 1, 0.5};
  EXPECT_DOUBLE_EQ(select_threshold({a, b, c}), 0.6);  // tie -> larger threshold
  EXPECT_DOUBLE_EQ(select_threshold({c}), 0.2);
  EXPECT_THROW(select_threshold({}), std::runtime_error);
}

TEST(SelectThreshold, MatchesBruteForceOnRandomData) {
  Rng rng(23);
  const std::vector<double> grid = default_threshold_grid();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> probs(1000), labels(1000);
    bool any_pos = false;
    for (size_t i = 0; i < probs.size(); ++i) {
      labels[i] = rng.uniform01() < 0.4 ? 1.0 : 0.0;
      any_pos |= labels[i] == 1.0;
      probs[i] = std::clamp(0.3 * rng.normal() + 0.25 + 0.45 * labels[i], 0.0, 1.0);
    }
    if (!any_pos) labels[0] = 1.0;
    std::vector<PRPoint> curve = pr_curve(probs, labels, grid);
    const double got = select_threshold(curve);
    // brute force over the same grid, same tie rule
    double best_f1 = -1, want = 0;
    for (const PRPoint& p : curve)
      if (p.f1 > best_f1 || (p.f1 == best_f1 && p.threshold > want)) {
        best_f1 = p.f1;
        want = p.threshold;
      }
    EXPECT_DOUBLE_EQ(got, want);
    // duplicating the dataset leaves the selection unchanged
    std::vector<double> probs2 = probs, labels2 = labels;
    probs2.insert(probs2.end(), probs.begin(), probs.end());
    labels2.insert(labels2.end(), labels.begin(), labels.end());
    EXPECT_DOUBLE_EQ(select_threshold(pr_curve(probs2, labels2, grid)), got);
  }
}

TEST(BrierScore, HandValues) {
  EXPECT_DOUBLE_EQ(brier_score({1, 0}, {1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(brier_score({0.5, 0.5}, {1, 0}), 0.25);
  EXPECT_THROW(brier_score({}, {}), std::runtime_error);
}

TEST(PrCurveCsv, FormatAndRowCount) {
  const fs::path dir = fs::temp_directory_path() / "duet_threshold_test";
  fs::create_directories(dir);
  const std::string path = (dir / "pr_curve.csv").string();
  std::vector<PRPoint> curve = pr_curve({0.9, 0.8, 0.3}, {1, 0, 1}, {0.25, 0.5, 0.75});
  save_pr_curve(curve, 0.125, path);
  std::ifstream f(path);
  std::string line;
  ASSERT_TRUE(std::getline(f, line));
  EXPECT_EQ(line, "threshold,precision,recall,f1,brier");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 3);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace duet
