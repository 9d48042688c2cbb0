#pragma once

// Shared helpers for the unit and acceptance suites: a random small-convnet
// graph generator and a central finite-difference gradient oracle.

#include <map>
#include <string>
#include <vector>

#include "duet/graph.hpp"
#include "duet/rng.hpp"

namespace duet::testutil {

// exact (bitwise) tensor equality, shape included
inline bool all_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

struct GraphCase {
  Graph g;
  int loss = -1;
  std::vector<int> leaf_ids;
  std::map<int, Tensor> leaf_values;

  Bindings bindings() const {
    Bindings b;
    for (const auto& [id, t] : leaf_values) b.emplace(id, &t);
    return b;
  }
};

// Random convnet: 1-3 conv layers with random stride/pad/dilation/kernel,
// activations, bias adds, optional upsample/concat, reduced to a scalar.
// Inputs are resampled if any relu/clamp argument sits within `kink_margin`
// of a kink, so the central-difference oracle stays valid.
inline GraphCase make_random_graph(uint64_t seed, double kink_margin = 1e-3) {
  for (int attempt = 0; attempt < 50; ++attempt) {
    Rng rng(derive_seed(seed, "graphgen", static_cast<uint64_t>(attempt)));
    GraphCase c;
    const int64_t ci = rng.uniform_int(1, 2);
    const int64_t h = rng.uniform_int(5, 8);
    const int64_t w = rng.uniform_int(5, 8);
    int x = c.g.leaf("x", {1, ci, h, w});
    c.leaf_ids.push_back(x);
    c.leaf_values[x] = rng.uniform_tensor({1, ci, h, w}, -1.0, 1.0);

    std::vector<int> relu_nodes;  // nodes whose values must avoid 0
    const int n_conv = static_cast<int>(rng.uniform_int(1, 3));
    for (int l = 0; l < n_conv; ++l) {
      const Shape xs = c.g.shape(x);  // copy: adding nodes reallocates
      const int64_t co = rng.uniform_int(1, 3);
      const int64_t k = rng.uniform01() < 0.3 ? 1 : 3;
      int stride = rng.uniform01() < 0.3 ? 2 : 1;
      int dil = (k == 3 && rng.uniform01() < 0.3) ? 2 : 1;
      int pad = (k == 3 && rng.uniform01() < 0.6) ? dil : 0;
      if (xs[2] + 2 * pad < dil * (k - 1) + 1 || xs[3] + 2 * pad < dil * (k - 1) + 1) {
        stride = 1;
        dil = 1;
        pad = 1;
      }
      int wleaf = c.g.leaf("w" + std::to_string(l), {co, xs[1], k, k});
      c.leaf_ids.push_back(wleaf);
      c.leaf_values[wleaf] = rng.uniform_tensor({co, xs[1], k, k}, -0.6, 0.6);
      x = c.g.conv2d(x, wleaf, stride, pad, dil);

      if (rng.uniform01() < 0.7) {
        int bleaf = c.g.leaf("b" + std::to_string(l), {co});
        c.leaf_ids.push_back(bleaf);
        c.leaf_values[bleaf] = rng.uniform_tensor({co}, -0.3, 0.3);
        x = c.g.add_bias_chan(x, bleaf);
      }
      const double pick = rng.uniform01();
      if (pick < 0.35) {
        relu_nodes.push_back(x);
        x = c.g.relu(x);
      } else if (pick < 0.6) {
        x = c.g.sigmoid(x);
      } else if (pick < 0.8) {
        x = c.g.softplus(x);
      }
      if (rng.uniform01() < 0.2 && c.g.shape(x)[2] <= 6 && c.g.shape(x)[3] <= 6)
        x = c.g.upsample2x(x);
      if (rng.uniform01() < 0.2) x = c.g.concat_chan({x, x});
    }

    int loss;
    const double tail = rng.uniform01();
    if (tail < 0.4) {
      int t = c.g.leaf("targets", c.g.shape(x));
      c.leaf_ids.push_back(t);
      c.leaf_values[t] = rng.uniform_tensor(c.g.shape(x), 0.0, 1.0);
      loss = c.g.bce_with_logits(x, t);
    } else if (tail < 0.7) {
      loss = c.g.reduce_mean(c.g.mul(x, x));
    } else {
      loss = c.g.reduce_mean(c.g.sigmoid(x));
    }
    c.loss = loss;

    // reject draws where a kinked op sits too close to its kink
    bool safe = true;
    std::vector<Tensor> vals = c.g.forward(c.bindings());
    for (int rn : relu_nodes) {
      const Tensor& t = vals[rn];
      for (int64_t i = 0; i < t.numel() && safe; ++i)
        if (std::abs(t[i]) < kink_margin) safe = false;
    }
    if (safe) return c;
  }
  throw std::runtime_error("make_random_graph: could not find kink-safe inputs");
}

// Composite Simpson integration (n must be even).
template <typename F>
double simpson(F f, double a, double b, int n = 20000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double log_normal_pdf(double x, double mu, double s) {
  const double z = (x - mu) / s;
  return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * M_PI);
}

// KL(N(mu,s^2) || N(0,sp^2)) by numerical quadrature of q log(q/p).
inline double quad_kl_iso(double mu, double s, double sp) {
  auto f = [&](double x) {
    return std::exp(log_normal_pdf(x, mu, s)) * (log_normal_pdf(x, mu, s) - log_normal_pdf(x, 0.0, sp));
  };
  return simpson(f, mu - 14.0 * s, mu + 14.0 * s);
}

// Central finite differences d(loss)/d(leaf[i]) for every element of every
// requested leaf; returns the max of |grad - fd| / (|fd| + 1e-4).
inline double finite_diff_max_rel_err(const GraphCase& c, double hstep = 1e-5) {
  auto grads = c.g.gradients(c.loss, c.leaf_ids, c.bindings());
  double worst = 0.0;
  std::map<int, Tensor> work = c.leaf_values;
  Bindings b;
  for (auto& [id, t] : work) b.emplace(id, &t);
  for (int leaf : c.leaf_ids) {
    Tensor& t = work[leaf];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + hstep;
      const double fp = c.g.forward(b)[c.loss].value();
      t[i] = orig - hstep;
      const double fm = c.g.forward(b)[c.loss].value();
      t[i] = orig;
      const double fd = (fp - fm) / (2.0 * hstep);
      const double rel = std::abs(grads.at(leaf)[i] - fd) / (std::abs(fd) + 1e-4);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace duet::testutil
