#include "duet/attacks.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "duet/model.hpp"
#include "duet/rng.hpp"

namespace duet {
namespace {

// Color-separable classification set for the victim (same recipe as the
// model tests).
void make_color_set(int n, int64_t m, int num_classes, uint64_t seed, std::vector<Tensor>* images,
                    std::vector<int>* labels) {
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.uniform_int(0, num_classes - 1));
    Tensor img({m, m, 3});
    for (int64_t p = 0; p < m * m; ++p) {
      const double base = 0.15 + 0.7 * static_cast<double>(y) / (num_classes - 1);
      img[p * 3 + 0] = std::clamp(base + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      img[p * 3 + 1] = std::clamp(1.0 - base + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      img[p * 3 + 2] = std::clamp(0.5 + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    }
    images->push_back(std::move(img));
    labels->push_back(y);
  }
}

// One trained victim shared across tests (m=32, 3 classes).
const VictimClassifier& trained_victim() {
  static const VictimClassifier v = [] {
    std::vector<Tensor> images;
    std::vector<int> labels;
    make_color_set(60, 32, 3, 17, &images, &labels);
    VictimClassifier vv = build_victim(32, 3, {8, 16, 32}, 5);
    train_victim(vv, images, labels, 12, 8, 1e-3, 99);
    if (victim_accuracy(vv, images, labels) < 0.9)
      throw std::runtime_error("attack_test: victim failed to train");
    return vv;
  }();
  return v;
}

std::vector<double> per_image_ce(const VictimClassifier& v, const std::vector<Tensor>& images,
                                 const std::vector<int>& labels) {
  std::vector<const Tensor*> ptrs;
  for (const Tensor& t : images) ptrs.push_back(&t);
  Tensor probs = victim_predict(v, ptrs);
  std::vector<double> ce(images.size());
  for (size_t i = 0; i < images.size(); ++i)
    ce[i] = -std::log(std::max(probs[static_cast<int64_t>(i) * v.num_classes + labels[i]], 1e-300));
  return ce;
}

bool equal_outside_patch(const Tensor& a, const Tensor& b, const PatchSpec& s, int64_t m) {
  for (int64_t y = 0; y < m; ++y)
    for (int64_t x = 0; x < m; ++x) {
      if (y >= s.top && y < s.top + s.side && x >= s.left && x < s.left + s.side) continue;
      for (int64_t c = 0; c < 3; ++c)
        if (a[(y * m + x) * 3 + c] != b[(y * m + x) * 3 + c]) return false;
    }
  return true;
}

double linf_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

TEST(PlacePatch, TwoPercentAreaRule) {
  // 9^2/64^2 = 1.98% is allowed, 10^2/64^2 = 2.44% is not
  EXPECT_NO_THROW(place_patch(1, 64, 9));
  try {
    place_patch(1, 64, 10);
    FAIL() << "oversized patch accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("2%"), std::string::npos);
  }
  EXPECT_THROW(place_patch(1, 64, 0), std::runtime_error);
}

TEST(PlacePatch, BoundsAndDeterminism) {
  const PatchSpec a = place_patch(42, 64, 8);
  const PatchSpec b = place_patch(42, 64, 8);
  EXPECT_EQ(a.top, b.top);
  EXPECT_EQ(a.left, b.left);
  EXPECT_EQ(a.side, 8);
  EXPECT_GE(a.top, 0);
  EXPECT_LE(a.top, 56);
  EXPECT_GE(a.left, 0);
  EXPECT_LE(a.left, 56);
}

TEST(PlacePatch, UniformOverPlacementGrid) {
  // 10^4 seeded draws over the 57x57 valid-placement grid for m=64, side=8.
  // Critical value is the 0.99 quantile of chi-squared with 57*57-1 = 3248
  // degrees of freedom, computed with scipy.stats.chi2.ppf(0.99, 3248).
  const int n = 10000;
  std::vector<int> counts(57 * 57, 0);
  for (int i = 0; i < n; ++i) {
    PatchSpec s = place_patch(derive_seed(123, "place", static_cast<uint64_t>(i)), 64, 8);
    ++counts[s.top * 57 + s.left];
  }
  const double expected = static_cast<double>(n) / (57 * 57);
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 3438.4344483665);
}

TEST(PatchSpecT, ContainmentValidation) {
  EXPECT_NO_THROW(validate_patch({0, 0, 4}, 32));
  EXPECT_NO_THROW(validate_patch({28, 28, 4}, 32));
  EXPECT_THROW(validate_patch({29, 0, 4}, 32), std::runtime_error);
  EXPECT_THROW(validate_patch({0, 29, 4}, 32), std::runtime_error);
  EXPECT_THROW(validate_patch({-1, 0, 4}, 32), std::runtime_error);
  EXPECT_THROW(validate_patch({0, 0, 5}, 32), std::runtime_error);  // 25/1024 > 2%
}

TEST(AttackConfigT, Validation) {
  AttackConfig cfg;
  EXPECT_NO_THROW(validate_attack(cfg));
  cfg.gamma = 0.0;  // zero budget is a valid identity attack
  EXPECT_NO_THROW(validate_attack(cfg));
  cfg.gamma = -0.1;
  EXPECT_THROW(validate_attack(cfg), std::runtime_error);
  cfg.gamma = 1.5;
  EXPECT_THROW(validate_attack(cfg), std::runtime_error);
  cfg = {};
  cfg.alpha = 0.0;
  EXPECT_THROW(validate_attack(cfg), std::runtime_error);
  cfg = {};
  cfg.iters = 0;
  EXPECT_THROW(validate_attack(cfg), std::runtime_error);
}

TEST(Pgd, ZeroBudgetIsIdentity) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(3, 32, 3, 7, &images, &labels);
  AttackConfig cfg;
  cfg.gamma = 0.0;
  const PatchSpec spec = place_patch(11, 32, 4);
  for (size_t i = 0; i < images.size(); ++i) {
    Tensor adv = pgd_patch(v, images[i], labels[i], spec, cfg, 55 + i);
    EXPECT_EQ(adv, images[i]);
  }
}

TEST(Pgd, BudgetLocalityRangeAndDeterminism) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(30, 32, 3, 21, &images, &labels);
  AttackConfig cfg;  // defaults: gamma 0.3, alpha 0.05, 20 iters, random init
  for (size_t i = 0; i < images.size(); ++i) {
    const uint64_t seed = derive_seed(900, "attack", i);
    const PatchSpec spec = place_patch(derive_seed(900, "place", i), 32, 4);
    Tensor adv = pgd_patch(v, images[i], labels[i], spec, cfg, seed);
    EXPECT_LE(linf_diff(adv, images[i]), cfg.gamma + 1e-12);
    EXPECT_TRUE(equal_outside_patch(adv, images[i], spec, 32));
    for (int64_t j = 0; j < adv.numel(); ++j) {
      ASSERT_GE(adv[j], 0.0);
      ASSERT_LE(adv[j], 1.0);
    }
    Tensor again = pgd_patch(v, images[i], labels[i], spec, cfg, seed);
    EXPECT_EQ(adv, again);
  }
  // different seeds give different random starts, hence different outputs
  const PatchSpec spec = place_patch(1, 32, 4);
  Tensor a = pgd_patch(v, images[0], labels[0], spec, cfg, 100);
  Tensor b = pgd_patch(v, images[0], labels[0], spec, cfg, 101);
  EXPECT_NE(a, b);
}

TEST(Pgd, OneStepNoInitEqualsFgsm) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(5, 32, 3, 31, &images, &labels);
  AttackConfig pgd_cfg;
  pgd_cfg.kind = AttackKind::PGD;
  pgd_cfg.random_init = false;
  pgd_cfg.iters = 1;
  pgd_cfg.gamma = 0.1;
  pgd_cfg.alpha = 0.2;  // alpha >= gamma: one step saturates the ball
  AttackConfig fgsm_cfg = pgd_cfg;
  fgsm_cfg.kind = AttackKind::FGSM;
  for (size_t i = 0; i < images.size(); ++i) {
    const PatchSpec spec = place_patch(derive_seed(7, "p", i), 32, 4);
    Tensor a = pgd_patch(v, images[i], labels[i], spec, pgd_cfg, 3);
    Tensor b = fgsm_patch(v, images[i], labels[i], spec, fgsm_cfg);
    EXPECT_EQ(a, b);
  }
}

TEST(Fgsm, SignConventionMatchesInputGradient) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(4, 32, 3, 41, &images, &labels);
  AttackConfig cfg;
  cfg.kind = AttackKind::FGSM;
  cfg.random_init = false;
  cfg.iters = 1;
  cfg.gamma = 0.3;
  cfg.alpha = 0.04;  // alpha < gamma: the ball never clips a single step
  for (size_t i = 0; i < images.size(); ++i) {
    const PatchSpec spec = place_patch(derive_seed(13, "p", i), 32, 4);
    // input gradient of the victim cross-entropy, computed independently
    NetGraph ng = build_victim_graph(v, 1, {labels[i]});
    ParamBindings pb = bind_params(v, ng, 0);
    Tensor x = stack_hwc_to_nchw({&images[i]});
    pb.map.emplace(ng.x, &x);
    auto grads = ng.g.gradients(ng.loss, {ng.x}, pb.map);
    const Tensor& gx = grads.at(ng.x);

    Tensor adv = fgsm_patch(v, images[i], labels[i], spec, cfg);
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t xpx = 0; xpx < 32; ++xpx)
        for (int64_t c = 0; c < 3; ++c) {
          const double got = adv[(y * 32 + xpx) * 3 + c];
          const double x0v = images[i][(y * 32 + xpx) * 3 + c];
          const bool inside = y >= spec.top && y < spec.top + spec.side && xpx >= spec.left &&
                              xpx < spec.left + spec.side;
          if (!inside) {
            ASSERT_EQ(got, x0v);
            continue;
          }
          const double g = gx[(c * 32 + y) * 32 + xpx];
          const double sgn = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
          ASSERT_EQ(got, std::clamp(x0v + cfg.alpha * sgn, 0.0, 1.0));
        }
  }
}

TEST(Fgsm, ZeroGradientLeavesImageUntouched) {
  // zeroed weights make the logits constant in x, so sign(0)=0 moves nothing
  VictimClassifier v = build_victim(32, 3, {8, 16, 32}, 5);
  for (Param& p : v.params) std::fill(p.w.data(), p.w.data() + p.w.numel(), 0.0);
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(2, 32, 3, 47, &images, &labels);
  AttackConfig cfg;
  cfg.kind = AttackKind::FGSM;
  cfg.random_init = false;
  cfg.iters = 5;
  const PatchSpec spec = place_patch(3, 32, 4);
  for (size_t i = 0; i < images.size(); ++i) {
    Tensor adv = fgsm_patch(v, images[i], labels[i], spec, cfg);
    EXPECT_EQ(adv, images[i]);
  }
}

TEST(Pgd, RaisesVictimLossOnMostImages) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(50, 32, 3, 61, &images, &labels);
  AttackConfig cfg;  // gamma 0.3, alpha 0.05, 20 iters
  std::vector<Tensor> attacked;
  for (size_t i = 0; i < images.size(); ++i) {
    const PatchSpec spec = place_patch(derive_seed(77, "place", i), 32, 4);
    attacked.push_back(pgd_patch(v, images[i], labels[i], spec, cfg, derive_seed(77, "atk", i)));
  }
  const std::vector<double> before = per_image_ce(v, images, labels);
  const std::vector<double> after = per_image_ce(v, attacked, labels);
  int raised = 0;
  for (size_t i = 0; i < images.size(); ++i) raised += after[i] >= before[i] ? 1 : 0;
  EXPECT_GE(raised, 48);  // >= 95% of 50
}

TEST(Localized, LocalRangeAndTargetProbabilityRises) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(10, 32, 3, 71, &images, &labels);
  AttackConfig cfg;
  cfg.kind = AttackKind::LocalizedPatch;
  cfg.iters = 50;
  cfg.alpha = 0.05;
  double p_before = 0, p_after = 0;
  for (size_t i = 0; i < images.size(); ++i) {
    const int target = (labels[i] + 1) % v.num_classes;
    const PatchSpec spec = place_patch(derive_seed(88, "place", i), 32, 4);
    Tensor adv = localized_patch(v, images[i], target, spec, cfg, derive_seed(88, "atk", i));
    EXPECT_TRUE(equal_outside_patch(adv, images[i], spec, 32));
    for (int64_t j = 0; j < adv.numel(); ++j) {
      ASSERT_GE(adv[j], 0.0);
      ASSERT_LE(adv[j], 1.0);
    }
    Tensor again = localized_patch(v, images[i], target, spec, cfg, derive_seed(88, "atk", i));
    EXPECT_EQ(adv, again);
    Tensor pb = victim_predict(v, {&images[i]});
    Tensor pa = victim_predict(v, {&adv});
    p_before += pb[target];
    p_after += pa[target];
  }
  EXPECT_GT(p_after / 10.0, p_before / 10.0);
}

TEST(Attacks, LabelAndKindErrors) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(1, 32, 3, 91, &images, &labels);
  const PatchSpec spec = place_patch(5, 32, 4);
  AttackConfig cfg;
  EXPECT_THROW(pgd_patch(v, images[0], -1, spec, cfg, 1), std::runtime_error);
  EXPECT_THROW(pgd_patch(v, images[0], 3, spec, cfg, 1), std::runtime_error);
  AttackConfig fg = cfg;  // still kind PGD
  EXPECT_THROW(fgsm_patch(v, images[0], 0, spec, fg), std::runtime_error);
  fg.kind = AttackKind::FGSM;
  EXPECT_THROW(fgsm_patch(v, images[0], 0, spec, fg), std::runtime_error);  // random_init left on
  AttackConfig lp = cfg;
  EXPECT_THROW(localized_patch(v, images[0], 0, spec, lp, 1), std::runtime_error);
  EXPECT_THROW(pgd_patch(v, images[0], 0, PatchSpec{0, 0, 9}, cfg, 1), std::runtime_error);
  Tensor bad = images[0];
  bad[0] = 1.5;  // out of range pixel
  EXPECT_THROW(pgd_patch(v, bad, 0, spec, cfg, 1), std::runtime_error);
}

TEST(Attacks, RunAttackDispatch) {
  const VictimClassifier& v = trained_victim();
  std::vector<Tensor> images;
  std::vector<int> labels;
  make_color_set(1, 32, 3, 95, &images, &labels);
  const PatchSpec spec = place_patch(9, 32, 4);
  AttackConfig cfg;
  EXPECT_EQ(run_attack(v, images[0], labels[0], spec, cfg, 4),
            pgd_patch(v, images[0], labels[0], spec, cfg, 4));
  cfg.kind = AttackKind::FGSM;
  cfg.random_init = false;
  EXPECT_EQ(run_attack(v, images[0], labels[0], spec, cfg, 4),
            fgsm_patch(v, images[0], labels[0], spec, cfg));
  cfg.kind = AttackKind::LocalizedPatch;
  EXPECT_EQ(run_attack(v, images[0], 1, spec, cfg, 4),
            localized_patch(v, images[0], 1, spec, cfg, 4));
}

TEST(AttackKindT, NameRoundTrip) {
  for (AttackKind k : {AttackKind::PGD, AttackKind::FGSM, AttackKind::LocalizedPatch})
    EXPECT_EQ(attack_kind_from_string(attack_kind_name(k)), k);
  EXPECT_THROW(attack_kind_from_string("ddos"), std::runtime_error);
}

TEST(PatchMask, MarksExactlyTheSquare) {
  const PatchSpec spec{3, 5, 4};
  Tensor mask = patch_mask(spec, 32);
  ASSERT_EQ(mask.shape(), (Shape{32, 32}));
  double sum = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) sum += mask[i];
  EXPECT_EQ(sum, 16.0);
  EXPECT_EQ(mask[3 * 32 + 5], 1.0);
  EXPECT_EQ(mask[6 * 32 + 8], 1.0);
  EXPECT_EQ(mask[2 * 32 + 5], 0.0);
  EXPECT_EQ(mask[3 * 32 + 9], 0.0);
}

}  // namespace
}  // namespace duet
