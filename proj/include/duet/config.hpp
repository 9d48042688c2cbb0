#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/attacks.hpp"
#include "duet/dataset.hpp"
#include "duet/model.hpp"

namespace duet {

// Every tunable of the pipeline as key=value text. Unknown keys are rejected,
// and a run directory always receives the fully resolved table (defaults
// materialized) so a run is reconstructible from its artifacts alone.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"run.name", "demo"},
        {"run.root", "runs"},
        {"seed", "1"},
        {"data.m", "64"},
        {"data.classes", "4"},
        {"data.train", "600"},
        {"data.val", "200"},
        {"data.calib", "60"},
        {"data.test", "200"},
        {"data.total", "0"},  // > 0 switches to fraction-based split sizing
        {"data.val_frac", "0.2"},
        {"data.calib_frac", "0.06"},
        {"data.test_frac", "0.2"},
        {"victim.channels", "8,16,32"},
        {"victim.epochs", "12"},
        {"victim.batch", "8"},
        {"victim.lr", "0.001"},
        {"attack.kind", "pgd"},
        {"attack.gamma", "0.3"},
        {"attack.alpha", "0.05"},
        {"attack.iters", "20"},
        {"attack.localized_iters", "100"},
        {"attack.side", "0"},  // 0: the largest side within the 2% area cap
        {"localizer.placement", "1110"},
        {"localizer.decoder_bayes", "0"},
        {"localizer.prior", "iso"},
        {"localizer.sigma_p", "1"},
        {"localizer.kappa", "1"},
        {"localizer.sigma0", "1"},
        {"localizer.sigma1", "0.1"},
        {"localizer.beta", "0.5"},
        {"localizer.channels", "16,32,64,64"},
        {"localizer.epochs", "30"},
        {"localizer.batch", "8"},
        {"localizer.lr", "0.001"},
        {"localizer.kl_weight", "-1"},  // negative: 1/minibatches-per-epoch
        {"duet.n", "30"},
        {"duet.c", "90"},
        {"threshold.value", "-1"},  // set by select-threshold; -1 means unset
        {"ablation.placements", "0000,1110"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("unknown config key '" + key + "'");
    return it->second;
  }

  int64_t i64(const std::string& key) const {
    try {
      size_t pos = 0;
      const int64_t v = std::stoll(str(key), &pos);
      if (pos != str(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': expected an integer, got '" +
                               str(key) + "'");
    }
  }

  uint64_t u64(const std::string& key) const {
    try {
      size_t pos = 0;
      const uint64_t v = std::stoull(str(key), &pos);
      if (pos != str(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': expected an unsigned integer, got '" +
                               str(key) + "'");
    }
  }

  double f64(const std::string& key) const {
    try {
      size_t pos = 0;
      const double v = std::stod(str(key), &pos);
      if (pos != str(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': expected a number, got '" + str(key) +
                               "'");
    }
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "0" || v == "false") return false;
    if (v == "1" || v == "true") return true;
    throw std::runtime_error("config key '" + key + "': expected 0/1/true/false, got '" + v + "'");
  }

  const std::map<std::string, std::string>& all() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

namespace detail {

inline std::pair<std::string, std::string> parse_kv_line(const std::string& line,
                                                         const std::string& where) {
  const size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw std::runtime_error(where + ": expected key=value, got '" + line + "'");
  auto trim = [](std::string s) {
    const size_t a = s.find_first_not_of(" \t");
    const size_t b = s.find_last_not_of(" \t");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

}  // namespace detail

// key=value lines; '#' starts a comment; blank lines ignored.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto [k, v] = detail::parse_kv_line(line, path + ":" + std::to_string(lineno));
    cfg.set(k, v);
  }
  return cfg;
}

inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    auto [k, v] = detail::parse_kv_line(s, "--set");
    cfg.set(k, v);
  }
}

inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config file " + path);
  for (const auto& [k, v] : cfg.all()) f << k << "=" << v << "\n";
  if (!f) throw std::runtime_error("write failed for config file " + path);
}

// --- typed views over the key table ---------------------------------------------------

template <size_t N>
inline std::array<int64_t, N> parse_channels(const std::string& s, const std::string& key) {
  std::array<int64_t, N> out{};
  std::stringstream ss(s);
  std::string cell;
  size_t i = 0;
  while (std::getline(ss, cell, ',')) {
    if (i >= N) throw std::runtime_error("config key '" + key + "': expected " +
                                         std::to_string(N) + " channels, got '" + s + "'");
    try {
      out[i++] = std::stoll(cell);
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': bad channel '" + cell + "'");
    }
  }
  if (i != N) throw std::runtime_error("config key '" + key + "': expected " + std::to_string(N) +
                                       " channels, got '" + s + "'");
  return out;
}

inline SplitCounts config_splits(const RunConfig& cfg) {
  const int64_t total = cfg.i64("data.total");
  if (total > 0)
    return split_counts(total, cfg.f64("data.val_frac"), cfg.f64("data.calib_frac"),
                        cfg.f64("data.test_frac"));
  SplitCounts c;
  c.train = cfg.i64("data.train");
  c.val = cfg.i64("data.val");
  c.calib = cfg.i64("data.calib");
  c.test = cfg.i64("data.test");
  return c;
}

// Largest square side whose area stays within 2% of an m-by-m image.
inline int64_t auto_patch_side(int64_t m) {
  int64_t s = 1;
  while ((s + 1) * (s + 1) * 50 <= m * m) ++s;
  return s;
}

inline int64_t config_patch_side(const RunConfig& cfg) {
  const int64_t side = cfg.i64("attack.side");
  return side == 0 ? auto_patch_side(cfg.i64("data.m")) : side;
}

// Attack settings for a given kind, honoring the per-kind iteration defaults
// (localized attacks run longer; FGSM never uses a random start).
inline AttackConfig config_attack(const RunConfig& cfg, AttackKind kind) {
  AttackConfig a;
  a.kind = kind;
  a.gamma = cfg.f64("attack.gamma");
  a.alpha = cfg.f64("attack.alpha");
  a.iters = static_cast<int>(cfg.i64(kind == AttackKind::LocalizedPatch
                                         ? "attack.localized_iters"
                                         : "attack.iters"));
  if (kind == AttackKind::FGSM) {
    a.random_init = false;
    a.iters = 1;
  }
  if (kind == AttackKind::LocalizedPatch) a.gamma = 1.0;  // patch pixels are unconstrained
  validate_attack(a);
  return a;
}

inline AttackConfig config_attack(const RunConfig& cfg) {
  return config_attack(cfg, attack_kind_from_string(cfg.str("attack.kind")));
}

inline Prior config_prior(const RunConfig& cfg) {
  const std::string kind = cfg.str("localizer.prior");
  if (kind == "iso") return Prior::iso_gaussian(cfg.f64("localizer.sigma_p"));
  if (kind == "cauchy") return Prior::cauchy(cfg.f64("localizer.kappa"));
  if (kind == "mixture")
    return Prior::scale_mixture(cfg.f64("localizer.sigma0"), cfg.f64("localizer.sigma1"),
                                cfg.f64("localizer.beta"));
  throw std::runtime_error("config key 'localizer.prior': unknown prior '" + kind + "'");
}

inline PlacementMask config_placement(const RunConfig& cfg) {
  return PlacementMask::from_string(cfg.str("localizer.placement"),
                                    cfg.flag("localizer.decoder_bayes"));
}

inline std::vector<std::string> config_ablation_placements(const RunConfig& cfg) {
  std::vector<std::string> out;
  std::stringstream ss(cfg.str("ablation.placements"));
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty()) out.push_back(cell);
  }
  if (out.empty()) throw std::runtime_error("config key 'ablation.placements': empty list");
  return out;
}

// Parses every typed key once so malformed values fail fast with the key name,
// then checks cross-key invariants.
inline void validate_run_config(const RunConfig& cfg) {
  if (cfg.str("run.name").empty()) throw std::runtime_error("config key 'run.name': empty");
  const int64_t m = cfg.i64("data.m");
  if (m < 8 || m % 8 != 0)
    throw std::runtime_error("config key 'data.m': must be a positive multiple of 8");
  if (cfg.i64("data.classes") < 2)
    throw std::runtime_error("config key 'data.classes': need at least 2 classes");
  const SplitCounts sc = config_splits(cfg);
  if (sc.train < 1 || sc.val < 1 || sc.calib < 1 || sc.test < 1)
    throw std::runtime_error("config: every split needs at least one image");
  parse_channels<3>(cfg.str("victim.channels"), "victim.channels");
  parse_channels<4>(cfg.str("localizer.channels"), "localizer.channels");
  for (const char* k : {"victim.epochs", "victim.batch", "localizer.epochs", "localizer.batch"})
    if (cfg.i64(k) < 1) throw std::runtime_error(std::string("config key '") + k + "': must be >= 1");
  for (const char* k : {"victim.lr", "localizer.lr"})
    if (!(cfg.f64(k) > 0)) throw std::runtime_error(std::string("config key '") + k + "': must be > 0");
  cfg.f64("localizer.kl_weight");
  validate_patch(PatchSpec{0, 0, config_patch_side(cfg)}, m);
  config_attack(cfg);
  config_attack(cfg, AttackKind::FGSM);
  config_attack(cfg, AttackKind::LocalizedPatch);
  config_prior(cfg);
  config_placement(cfg);
  config_ablation_placements(cfg);
  const int64_t n = cfg.i64("duet.n");
  if (n < 2) throw std::runtime_error("config key 'duet.n': need at least 2 samples");
  const double c = cfg.f64("duet.c");
  if (!(c > 0 && c < 100))
    throw std::runtime_error("config key 'duet.c': confidence must lie in (0,100)");
  const double t = cfg.f64("threshold.value");
  if (t != -1 && !(t >= 0 && t <= 1))
    throw std::runtime_error("config key 'threshold.value': must be -1 (unset) or in [0,1]");
  cfg.u64("seed");
}

}  // namespace duet
