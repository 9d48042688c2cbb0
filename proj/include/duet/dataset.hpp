#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/attacks.hpp"
#include "duet/model.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

// --- corpus -------------------------------------------------------------------------

// How an image was attacked; "none" rows carry a zero spec.
struct AttackRecord {
  std::string kind = "none";
  PatchSpec spec{0, 0, 0};
  uint64_t seed = 0;
};

struct Corpus {
  int64_t m = 64;
  int n_classes = 4;
  uint64_t seed = 0;
  std::string victim_hash = "-";  // checkpoint hash of the victim that attacked it
  std::vector<Tensor> images;     // [M,M,3] in [0,1]
  std::vector<Tensor> masks;      // [M,M] binary, all-zero for clean images
  std::vector<int> labels;
  std::vector<std::string> split;  // train / val / calib / test
  std::vector<AttackRecord> attacks;

  size_t size() const { return images.size(); }

  std::vector<size_t> split_indices(const std::string& name) const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < split.size(); ++i)
      if (split[i] == name) idx.push_back(i);
    return idx;
  }
};

struct SplitCounts {
  int64_t train = 600, val = 200, calib = 60, test = 200;
  int64_t total() const { return train + val + calib + test; }
};

// Fraction-based split sizing: floor rounding per split, remainder to train.
inline SplitCounts split_counts(int64_t n, double val_frac, double calib_frac, double test_frac) {
  if (val_frac < 0 || calib_frac < 0 || test_frac < 0 || val_frac + calib_frac + test_frac > 1.0)
    throw std::runtime_error("split_counts: fractions must be nonnegative and sum to at most 1");
  SplitCounts c;
  c.val = static_cast<int64_t>(std::floor(n * val_frac));
  c.calib = static_cast<int64_t>(std::floor(n * calib_frac));
  c.test = static_cast<int64_t>(std::floor(n * test_frac));
  c.train = n - c.val - c.calib - c.test;
  return c;
}

namespace detail {

// small fixed-saturation HSV -> RGB for class base colors
inline void class_base_color(int label, int n_classes, double* rgb) {
  const double h = 6.0 * label / n_classes;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double v = 0.62, s = 0.45;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; return;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; return;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; return;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; return;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; return;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; return;
  }
}

}  // namespace detail

// Class-conditional textured image: per-class base hue plus a sinusoidal
// grating whose frequency depends on the class, plus a few random soft blobs.
inline Tensor synth_image(uint64_t seed, int64_t m, int label, int n_classes) {
  Rng rng(seed);
  double base[3];
  detail::class_base_color(label, n_classes, base);
  const double freq = (0.25 + 0.18 * label) * 2.0 * M_PI / 8.0;  // class-dependent
  const double theta = rng.uniform(0.0, M_PI);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double ct = std::cos(theta), st = std::sin(theta);

  struct Blob {
    double cy, cx, inv2s2, amp[3];
  };
  std::vector<Blob> blobs(3);
  for (Blob& b : blobs) {
    b.cy = rng.uniform(0.0, static_cast<double>(m));
    b.cx = rng.uniform(0.0, static_cast<double>(m));
    const double sigma = rng.uniform(m / 10.0, m / 5.0);
    b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (double& a : b.amp) a = rng.uniform(-0.12, 0.12);
  }

  Tensor img({m, m, 3});
  for (int64_t y = 0; y < m; ++y)
    for (int64_t x = 0; x < m; ++x) {
      const double g = 0.14 * std::sin(freq * (ct * x + st * y) + phase);
      double add[3] = {g, g, g};
      for (const Blob& b : blobs) {
        const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
        const double w = std::exp(-d2 * b.inv2s2);
        for (int c = 0; c < 3; ++c) add[c] += b.amp[c] * w;
      }
      for (int64_t c = 0; c < 3; ++c)
        img[(y * m + x) * 3 + c] = std::clamp(base[c] + add[c] + rng.uniform(-0.02, 0.02), 0.0, 1.0);
    }
  return img;
}

// Clean synthetic corpus: labels cycle through the classes, per-image seeds
// derive from the root seed, splits are assigned contiguously in generation
// order (the images are i.i.d., so no shuffle is needed).
inline Corpus generate_corpus(uint64_t seed, int64_t m, const SplitCounts& counts,
                              int n_classes) {
  if (n_classes < 2) throw std::runtime_error("generate_corpus: need at least 2 classes");
  if (m < 8 || m % 8 != 0)
    throw std::runtime_error("generate_corpus: image side must be a positive multiple of 8");
  if (counts.train < 1 || counts.val < 0 || counts.calib < 0 || counts.test < 0)
    throw std::runtime_error("generate_corpus: invalid split counts");
  Corpus c;
  c.m = m;
  c.n_classes = n_classes;
  c.seed = seed;
  const int64_t n = counts.total();
  Rng label_rng(derive_seed(seed, "labels"));
  for (int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(label_rng.uniform_int(0, n_classes - 1));
    c.images.push_back(synth_image(derive_seed(seed, "image", static_cast<uint64_t>(i)), m,
                                   label, n_classes));
    c.masks.push_back(Tensor({m, m}));
    c.labels.push_back(label);
    const std::string s = i < counts.train                ? "train"
                          : i < counts.train + counts.val ? "val"
                          : i < counts.train + counts.val + counts.calib ? "calib"
                                                                         : "test";
    c.split.push_back(s);
    c.attacks.push_back({});
  }
  return c;
}

// FNV-1a over the victim's parameter bytes; identifies the checkpoint that
// produced an attacked corpus.
inline std::string victim_param_hash(const VictimClassifier& v) {
  uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  mix(&v.m, sizeof v.m);
  mix(&v.num_classes, sizeof v.num_classes);
  for (const Param& p : v.params) {
    if (p.bayes) {
      mix(p.post.mu.data(), sizeof(double) * static_cast<size_t>(p.post.mu.numel()));
      mix(p.post.rho.data(), sizeof(double) * static_cast<size_t>(p.post.rho.numel()));
    } else {
      mix(p.w.data(), sizeof(double) * static_cast<size_t>(p.w.numel()));
    }
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Attacks every image of a corpus with per-image random patch placement.
// LocalizedPatch drives the patch toward the next class ((label+1) mod K);
// PGD/FGSM ascend the loss of the true label. No attack config returns a
// clean copy (all-zero masks) so pipelines can run an unattacked baseline.
inline Corpus build_attacked_corpus(const Corpus& clean, const VictimClassifier& victim,
                                    const std::optional<AttackConfig>& cfg, int64_t side,
                                    uint64_t seed) {
  if (victim.m != clean.m)
    throw std::runtime_error("build_attacked_corpus: victim/corpus image size mismatch");
  Corpus out = clean;
  out.victim_hash = victim_param_hash(victim);
  if (!cfg) return out;
  validate_attack(*cfg);
  for (size_t i = 0; i < clean.size(); ++i) {
    const PatchSpec spec = place_patch(derive_seed(seed, "place", i), clean.m, side);
    const uint64_t atk_seed = derive_seed(seed, "attack", i);
    const int label = cfg->kind == AttackKind::LocalizedPatch
                          ? (clean.labels[i] + 1) % victim.num_classes
                          : clean.labels[i];
    out.images[i] = run_attack(victim, clean.images[i], label, spec, *cfg, atk_seed);
    out.masks[i] = patch_mask(spec, clean.m);
    out.attacks[i] = {attack_kind_name(cfg->kind), spec, atk_seed};
  }
  return out;
}

// --- directory layout ----------------------------------------------------------------
// img_%06d.dtf / mask_%06d.dtf plus labels.csv, splits.csv, manifest.csv.

namespace detail {
inline std::string corpus_id(size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}
}  // namespace detail

inline void save_corpus(const Corpus& c, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream labels(fs::path(dir) / "labels.csv");
  std::ofstream splits(fs::path(dir) / "splits.csv");
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!labels || !splits || !manifest)
    throw std::runtime_error("save_corpus: cannot open metadata files in " + dir);
  labels << "id,label\n";
  splits << "id,split\n";
  manifest << "id,attack,top,left,side,seed,victim_hash\n";
  manifest << "_corpus," << "none" << ",0,0,0," << c.seed << "," << c.victim_hash << "\n";
  for (size_t i = 0; i < c.size(); ++i) {
    const std::string id = detail::corpus_id(i);
    write_dtf((fs::path(dir) / ("img_" + id + ".dtf")).string(), c.images[i]);
    write_dtf((fs::path(dir) / ("mask_" + id + ".dtf")).string(), c.masks[i]);
    labels << id << "," << c.labels[i] << "\n";
    splits << id << "," << c.split[i] << "\n";
    const AttackRecord& a = c.attacks[i];
    manifest << id << "," << a.kind << "," << a.spec.top << "," << a.spec.left << ","
             << a.spec.side << "," << a.seed << "," << c.victim_hash << "\n";
  }
  // trailing metadata the loader needs to rebuild the struct
  std::ofstream meta(fs::path(dir) / "corpus.txt");
  meta << "m=" << c.m << "\nn_classes=" << c.n_classes << "\nseed=" << c.seed << "\n";
  if (!labels || !splits || !manifest || !meta)
    throw std::runtime_error("save_corpus: write failed in " + dir);
}

namespace detail {
inline std::vector<std::vector<std::string>> read_csv(const std::string& path,
                                                      const std::string& header) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != header)
    throw std::runtime_error("read_csv: unexpected header in " + path);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}
}  // namespace detail

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  Corpus c;
  {
    std::ifstream meta(fs::path(dir) / "corpus.txt");
    if (!meta) throw std::runtime_error("load_corpus: missing corpus.txt in " + dir);
    std::string line;
    while (std::getline(meta, line)) {
      const size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "m") c.m = std::stoll(v);
      else if (k == "n_classes") c.n_classes = std::stoi(v);
      else if (k == "seed") c.seed = std::stoull(v);
      else throw std::runtime_error("load_corpus: unknown key '" + k + "' in corpus.txt");
    }
  }
  auto labels = detail::read_csv((fs::path(dir) / "labels.csv").string(), "id,label");
  auto splits = detail::read_csv((fs::path(dir) / "splits.csv").string(), "id,split");
  auto manifest = detail::read_csv((fs::path(dir) / "manifest.csv").string(),
                                   "id,attack,top,left,side,seed,victim_hash");
  if (labels.size() != splits.size() || manifest.size() != labels.size() + 1)
    throw std::runtime_error("load_corpus: inconsistent metadata row counts in " + dir);
  c.victim_hash = manifest[0][6];
  for (size_t i = 0; i < labels.size(); ++i) {
    const std::string id = detail::corpus_id(i);
    if (labels[i][0] != id || splits[i][0] != id || manifest[i + 1][0] != id)
      throw std::runtime_error("load_corpus: unexpected id ordering in " + dir);
    c.images.push_back(read_dtf((fs::path(dir) / ("img_" + id + ".dtf")).string()));
    c.masks.push_back(read_dtf((fs::path(dir) / ("mask_" + id + ".dtf")).string()));
    c.labels.push_back(std::stoi(labels[i][1]));
    c.split.push_back(splits[i][1]);
    const auto& m = manifest[i + 1];
    c.attacks.push_back({m[1],
                         PatchSpec{std::stoll(m[2]), std::stoll(m[3]), std::stoll(m[4])},
                         std::stoull(m[5])});
    if (c.images.back().shape() != Shape{c.m, c.m, 3})
      throw std::runtime_error("load_corpus: image " + id + " has wrong shape");
  }
  return c;
}

}  // namespace duet
