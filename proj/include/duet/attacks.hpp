#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "duet/model.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

// --- patch geometry ---------------------------------------------------------------

// Square patch region, row-major pixel coordinates, half-open [top, top+side).
struct PatchSpec {
  int64_t top = 0;
  int64_t left = 0;
  int64_t side = 0;
};

// A patch must cover at most 2% of the image area and lie fully inside it.
inline void validate_patch(const PatchSpec& spec, int64_t m) {
  if (spec.side < 1) throw std::runtime_error("PatchSpec: side must be positive");
  if (spec.side * spec.side * 50 > m * m)
    throw std::runtime_error("PatchSpec: side " + std::to_string(spec.side) +
                             " exceeds 2% of a " + std::to_string(m) + "x" + std::to_string(m) +
                             " image (side^2 must be <= 0.02*m^2)");
  if (spec.top < 0 || spec.left < 0 || spec.top + spec.side > m || spec.left + spec.side > m)
    throw std::runtime_error("PatchSpec: patch not fully inside the image");
}

// Uniformly random valid placement for a side x side patch; deterministic per seed.
inline PatchSpec place_patch(uint64_t seed, int64_t m, int64_t side) {
  PatchSpec probe{0, 0, side};
  validate_patch(probe, m);  // reject oversized sides before drawing
  Rng rng(seed);
  PatchSpec spec;
  spec.side = side;
  spec.top = rng.uniform_int(0, m - side);
  spec.left = rng.uniform_int(0, m - side);
  return spec;
}

// --- attack configuration ---------------------------------------------------------

enum class AttackKind { PGD, FGSM, LocalizedPatch };

inline std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::PGD: return "pgd";
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::LocalizedPatch: return "localized";
  }
  throw std::runtime_error("attack_kind_name: unknown kind");
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "pgd") return AttackKind::PGD;
  if (s == "fgsm") return AttackKind::FGSM;
  if (s == "localized") return AttackKind::LocalizedPatch;
  throw std::runtime_error("attack kind must be pgd, fgsm or localized, got '" + s + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::PGD;
  double gamma = 0.3;   // l_inf budget; 0 turns PGD/FGSM into the identity
  double alpha = 0.05;  // sign-step size
  int iters = 20;
  bool random_init = true;  // PGD only
};

inline void validate_attack(const AttackConfig& cfg) {
  if (!(cfg.gamma >= 0.0) || cfg.gamma > 1.0)
    throw std::runtime_error("AttackConfig: gamma must be in [0, 1]");
  if (!(cfg.alpha > 0.0)) throw std::runtime_error("AttackConfig: alpha must be positive");
  if (cfg.iters < 1) throw std::runtime_error("AttackConfig: iters must be >= 1");
}

// --- shared attack machinery -------------------------------------------------------

namespace detail {

inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void check_attack_image(const VictimClassifier& victim, const Tensor& x0) {
  if (x0.shape() != Shape{victim.m, victim.m, 3})
    throw std::runtime_error("attack: expected image shape " +
                             shape_str({victim.m, victim.m, 3}) + ", got " +
                             shape_str(x0.shape()));
  for (int64_t i = 0; i < x0.numel(); ++i)
    if (!(x0[i] >= 0.0 && x0[i] <= 1.0))
      throw std::runtime_error("attack: image pixels must lie in [0,1]");
}

// Iterative sign-gradient attack on one image. The victim graph is built once
// and re-evaluated per step; only patch pixels of the NCHW buffer are ever
// written, and the result copies x0 with just those pixels replaced, so
// locality is bit-exact by construction. `ascend` +1 climbs the loss (PGD /
// FGSM), -1 descends it (localized targeted attack). `project_budget` keeps
// x - x0 inside the l_inf ball of radius gamma.
inline Tensor sign_attack_loop(const VictimClassifier& victim, const Tensor& x0, int label,
                               const PatchSpec& spec, const AttackConfig& cfg, uint64_t seed,
                               double ascend, bool project_budget, bool noise_init) {
  check_attack_image(victim, x0);
  validate_patch(spec, victim.m);
  validate_attack(cfg);
  if (label < 0 || label >= victim.num_classes)
    throw std::runtime_error("attack: label " + std::to_string(label) + " out of range [0, " +
                             std::to_string(victim.num_classes) + ")");

  const int64_t m = victim.m;
  NetGraph ng = build_victim_graph(victim, 1, {label});
  ParamBindings pb = bind_params(victim, ng, 0);
  Tensor x = stack_hwc_to_nchw({&x0});
  const Tensor x_ref = x;  // pristine NCHW copy for the budget projection
  pb.map.emplace(ng.x, &x);

  auto for_patch = [&](auto&& fn) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t py = spec.top; py < spec.top + spec.side; ++py)
        for (int64_t px = spec.left; px < spec.left + spec.side; ++px)
          fn((c * m + py) * m + px);
  };

  Rng rng(seed);
  if (noise_init) {
    // free patch variables start as uniform noise in [0,1]
    for_patch([&](int64_t i) { x[i] = rng.uniform01(); });
  } else if (cfg.random_init && cfg.gamma > 0.0) {
    for_patch([&](int64_t i) {
      x[i] = std::clamp(x[i] + rng.uniform(-cfg.gamma, cfg.gamma), 0.0, 1.0);
    });
  }

  std::vector<Tensor> values;
  Graph::BackwardScratch scratch;
  for (int t = 0; t < cfg.iters; ++t) {
    if (project_budget && cfg.gamma == 0.0) break;  // zero budget: nothing can move
    ng.g.forward_into(pb.map, values);
    Tensor gx = std::move(ng.g.backward(ng.loss, {ng.x}, values, scratch).at(ng.x));
    for_patch([&](int64_t i) {
      double v = x[i] + ascend * cfg.alpha * sgn(gx[i]);
      if (project_budget) v = x_ref[i] + std::clamp(v - x_ref[i], -cfg.gamma, cfg.gamma);
      x[i] = std::clamp(v, 0.0, 1.0);
    });
  }

  Tensor out = x0;
  for (int64_t py = spec.top; py < spec.top + spec.side; ++py)
    for (int64_t px = spec.left; px < spec.left + spec.side; ++px)
      for (int64_t c = 0; c < 3; ++c) out[(py * m + px) * 3 + c] = x[(c * m + py) * m + px];
  return out;
}

}  // namespace detail

// --- attacks ------------------------------------------------------------------------

// Projected gradient ascent on the victim's cross-entropy, confined to the
// patch: optional random start in the l_inf ball, sign steps, per-step
// projection to ||x - x0||_inf <= gamma and clamp to [0,1].
inline Tensor pgd_patch(const VictimClassifier& victim, const Tensor& x0, int y0,
                        const PatchSpec& spec, const AttackConfig& cfg, uint64_t seed) {
  if (cfg.kind != AttackKind::PGD) throw std::runtime_error("pgd_patch: cfg.kind must be PGD");
  return detail::sign_attack_loop(victim, x0, y0, spec, cfg, seed, +1.0, true, false);
}

// Iterated FGSM: PGD without the random start.
inline Tensor fgsm_patch(const VictimClassifier& victim, const Tensor& x0, int y0,
                         const PatchSpec& spec, const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::FGSM) throw std::runtime_error("fgsm_patch: cfg.kind must be FGSM");
  if (cfg.random_init) throw std::runtime_error("fgsm_patch: random_init must be false");
  return detail::sign_attack_loop(victim, x0, y0, spec, cfg, 0, +1.0, true, false);
}

// Targeted patch optimization: patch pixels are free variables in [0,1]
// (no gamma ball), initialized to uniform noise and driven toward
// target_class by sign-gradient descent on the victim loss.
inline Tensor localized_patch(const VictimClassifier& victim, const Tensor& x0, int target_class,
                              const PatchSpec& spec, const AttackConfig& cfg, uint64_t seed) {
  if (cfg.kind != AttackKind::LocalizedPatch)
    throw std::runtime_error("localized_patch: cfg.kind must be LocalizedPatch");
  return detail::sign_attack_loop(victim, x0, target_class, spec, cfg, seed, -1.0, false, true);
}

// Dispatch on cfg.kind; `label` is y0 for PGD/FGSM and the target class for
// the localized attack.
inline Tensor run_attack(const VictimClassifier& victim, const Tensor& x0, int label,
                         const PatchSpec& spec, const AttackConfig& cfg, uint64_t seed) {
  switch (cfg.kind) {
    case AttackKind::PGD: return pgd_patch(victim, x0, label, spec, cfg, seed);
    case AttackKind::FGSM: return fgsm_patch(victim, x0, label, spec, cfg);
    case AttackKind::LocalizedPatch:
      return localized_patch(victim, x0, label, spec, cfg, seed);
  }
  throw std::runtime_error("run_attack: unknown attack kind");
}

// Ground-truth segmentation mask for an attacked image: the patch square,
// whether or not the attack moved every pixel in it.
inline Tensor patch_mask(const PatchSpec& spec, int64_t m) {
  validate_patch(spec, m);
  Tensor mask({m, m});
  for (int64_t py = spec.top; py < spec.top + spec.side; ++py)
    for (int64_t px = spec.left; px < spec.left + spec.side; ++px) mask[py * m + px] = 1.0;
  return mask;
}

}  // namespace duet
