#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/graph.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/variational.hpp"

namespace duet {

// Which blocks carry variational weights. "1110" reads left to right as
// B1,B2,B3,B4; the decoder flag is separate. The pyramid block follows the
// encoder only when every encoder block is Bayesian.
struct PlacementMask {
  bool b1 = false, b2 = false, b3 = false, b4 = false, decoder = false;

  static PlacementMask from_string(const std::string& bits, bool decoder_bayes) {
    if (bits.size() != 4 || bits.find_first_not_of("01") != std::string::npos)
      throw std::runtime_error("PlacementMask: expected four 0/1 characters, got '" + bits + "'");
    PlacementMask m;
    m.b1 = bits[0] == '1';
    m.b2 = bits[1] == '1';
    m.b3 = bits[2] == '1';
    m.b4 = bits[3] == '1';
    m.decoder = decoder_bayes;
    return m;
  }

  std::string bits() const {
    std::string s;
    for (bool b : {b1, b2, b3, b4}) s += b ? '1' : '0';
    return s;
  }

  bool block(int i) const {
    switch (i) {
      case 1: return b1;
      case 2: return b2;
      case 3: return b3;
      case 4: return b4;
    }
    throw std::runtime_error("PlacementMask: block index out of range");
  }

  bool encoder_all() const { return b1 && b2 && b3 && b4; }
  bool all_bayes() const { return encoder_all() && decoder; }
  bool any() const { return b1 || b2 || b3 || b4 || decoder; }
};

// One weight or bias tensor: either a point estimate or a Gaussian posterior,
// never both populated.
struct Param {
  std::string name;
  bool bayes = false;
  Tensor w;
  GaussianPosterior post;

  const Shape& shape() const { return bayes ? post.mu.shape() : w.shape(); }
  int64_t numel() const { return bayes ? post.mu.numel() : w.numel(); }
};

struct ConvDef {
  std::string name;
  int64_t cin = 0, cout = 0, k = 3;
  int stride = 1, pad = 1, dil = 1;
  bool relu = true;
  bool bayes = false;
};

namespace detail {

inline Param make_weight_param(const std::string& name, Shape shape, int64_t fan_in, bool bayes,
                               Rng& rng) {
  Param p;
  p.name = name;
  p.bayes = bayes;
  // draw mu first so the values match across placements with the same seed
  GaussianPosterior post = init_posterior(std::move(shape), fan_in, rng);
  if (bayes)
    p.post = std::move(post);
  else
    p.w = std::move(post.mu);
  return p;
}

inline Param make_bias_param(const std::string& name, int64_t c, bool bayes) {
  Param p;
  p.name = name;
  p.bayes = bayes;
  if (bayes)
    p.post = GaussianPosterior(Tensor({c}), Tensor::full({c}, rho_init()));
  else
    p.w = Tensor({c});
  return p;
}

}  // namespace detail

// --- localizer ----------------------------------------------------------------

// Encoder B1-B4 (two 3x3 convs each, stride-2 entry for B2-B4), a three-branch
// dilated pyramid concatenated with the encoder output, and a two-conv decoder
// with 2x upsampling back to full resolution and a sigmoid head.
struct LocalizerModel {
  PlacementMask mask;
  Prior prior;
  int64_t m = 64;
  std::array<int64_t, 4> channels = {16, 32, 64, 64};
  uint64_t init_seed = 0;
  std::vector<ConvDef> convs;
  std::vector<Param> params;  // 2 per conv: weight then bias

  int64_t point_count() const {
    int64_t n = 0;
    for (const Param& p : params)
      if (!p.bayes) n += p.numel();
    return n;
  }
  int64_t variational_count() const {
    int64_t n = 0;
    for (const Param& p : params)
      if (p.bayes) n += 2 * p.numel();
    return n;
  }
};

inline LocalizerModel build_localizer(const PlacementMask& mask, const Prior& prior, int64_t m,
                                      std::array<int64_t, 4> channels, uint64_t seed) {
  if (m < 8 || m % 8 != 0)
    throw std::runtime_error("build_localizer: image side must be a positive multiple of 8, got " +
                             std::to_string(m));
  LocalizerModel mdl;
  mdl.mask = mask;
  mdl.prior = prior;
  mdl.m = m;
  mdl.channels = channels;
  mdl.init_seed = seed;

  const bool pyr_bayes = mask.encoder_all();
  auto add_conv = [&](const std::string& name, int64_t cin, int64_t cout, int stride, int dil,
                      bool relu, bool bayes) {
    ConvDef d;
    d.name = name;
    d.cin = cin;
    d.cout = cout;
    d.stride = stride;
    d.pad = dil;  // 3x3 convs keep spatial size at stride 1
    d.dil = dil;
    d.relu = relu;
    d.bayes = bayes;
    mdl.convs.push_back(d);
  };

  const int64_t c1 = channels[0], c2 = channels[1], c3 = channels[2], c4 = channels[3];
  add_conv("b1.conv1", 3, c1, 1, 1, true, mask.b1);
  add_conv("b1.conv2", c1, c1, 1, 1, true, mask.b1);
  add_conv("b2.conv1", c1, c2, 2, 1, true, mask.b2);
  add_conv("b2.conv2", c2, c2, 1, 1, true, mask.b2);
  add_conv("b3.conv1", c2, c3, 2, 1, true, mask.b3);
  add_conv("b3.conv2", c3, c3, 1, 1, true, mask.b3);
  add_conv("b4.conv1", c3, c4, 2, 1, true, mask.b4);
  add_conv("b4.conv2", c4, c4, 1, 1, true, mask.b4);
  add_conv("pyramid.d1", c4, c4, 1, 1, true, pyr_bayes);
  add_conv("pyramid.d2", c4, c4, 1, 2, true, pyr_bayes);
  add_conv("pyramid.d4", c4, c4, 1, 4, true, pyr_bayes);
  add_conv("decoder.conv1", 4 * c4, c2, 1, 1, true, mask.decoder);
  add_conv("decoder.conv2", c2, 1, 1, 1, false, mask.decoder);

  Rng rng(derive_seed(seed, "init"));
  for (const ConvDef& d : mdl.convs) {
    mdl.params.push_back(detail::make_weight_param(d.name + ".weight", {d.cout, d.cin, d.k, d.k},
                                                   d.cin * d.k * d.k, d.bayes, rng));
    mdl.params.push_back(detail::make_bias_param(d.name + ".bias", d.cout, d.bayes));
  }
  return mdl;
}

// --- victim classifier ----------------------------------------------------------

struct VictimClassifier {
  int64_t m = 64;
  int64_t num_classes = 4;
  std::array<int64_t, 3> channels = {8, 16, 32};
  uint64_t init_seed = 0;
  std::vector<ConvDef> convs;
  std::vector<Param> params;  // conv weight/bias pairs, then head.weight, head.bias
};

inline VictimClassifier build_victim(int64_t m, int64_t num_classes,
                                     std::array<int64_t, 3> channels, uint64_t seed) {
  if (m < 8 || m % 8 != 0)
    throw std::runtime_error("build_victim: image side must be a positive multiple of 8, got " +
                             std::to_string(m));
  if (num_classes < 2) throw std::runtime_error("build_victim: need at least 2 classes");
  VictimClassifier v;
  v.m = m;
  v.num_classes = num_classes;
  v.channels = channels;
  v.init_seed = seed;
  int64_t cin = 3;
  for (int i = 0; i < 3; ++i) {
    ConvDef d;
    d.name = "conv" + std::to_string(i + 1);
    d.cin = cin;
    d.cout = channels[i];
    d.stride = 2;
    d.pad = 1;
    d.relu = true;
    v.convs.push_back(d);
    cin = channels[i];
  }
  Rng rng(derive_seed(seed, "init"));
  for (const ConvDef& d : v.convs) {
    v.params.push_back(detail::make_weight_param(d.name + ".weight", {d.cout, d.cin, 3, 3},
                                                 d.cin * 9, false, rng));
    v.params.push_back(detail::make_bias_param(d.name + ".bias", d.cout, false));
  }
  v.params.push_back(detail::make_weight_param("head.weight", {channels[2], num_classes},
                                               channels[2], false, rng));
  v.params.push_back(detail::make_bias_param("head.bias", num_classes, false));
  return v;
}

// --- graph assembly --------------------------------------------------------------

struct TrainableRef {
  int param_index = -1;
  bool is_rho = false;
  int leaf = -1;
};

struct NetGraph {
  Graph g;
  int x = -1, targets = -1, logits = -1, prob = -1;
  int bce = -1, kl = -1, loss = -1;
  std::vector<int> param_leaf;   // per param: w or mu leaf
  std::vector<int> rho_leaf;     // per param: rho leaf or -1
  std::vector<int> eps_leaf;     // per param: eps leaf or -1
  std::vector<int> phi_node;     // per param: sampled-weight node or -1
  std::vector<TrainableRef> trainables;
};

namespace detail {

// Adds the leaves for one Param and returns the node carrying its weights
// (the reparameterized sample for Bayesian params).
inline int emit_param(NetGraph& ng, const std::vector<Param>& params, int pidx) {
  const Param& p = params[pidx];
  if (p.bayes) {
    int mu = ng.g.leaf(p.name + ".mu", p.post.mu.shape());
    int rho = ng.g.leaf(p.name + ".rho", p.post.rho.shape());
    int eps = ng.g.leaf(p.name + ".eps", p.post.mu.shape());
    ng.param_leaf[pidx] = mu;
    ng.rho_leaf[pidx] = rho;
    ng.eps_leaf[pidx] = eps;
    ng.trainables.push_back({pidx, false, mu});
    ng.trainables.push_back({pidx, true, rho});
    ng.phi_node[pidx] = ng.g.add(mu, ng.g.mul(ng.g.softplus(rho), eps));
    return ng.phi_node[pidx];
  }
  int w = ng.g.leaf(p.name, p.w.shape());
  ng.param_leaf[pidx] = w;
  ng.trainables.push_back({pidx, false, w});
  return w;
}

inline int emit_conv(NetGraph& ng, const std::vector<Param>& params, const ConvDef& d, int pidx,
                     int input) {
  int w = emit_param(ng, params, pidx);
  int b = emit_param(ng, params, pidx + 1);
  int y = ng.g.add_bias_chan(ng.g.conv2d(input, w, d.stride, d.pad, d.dil), b);
  return d.relu ? ng.g.relu(y) : y;
}

}  // namespace detail

// Builds the localizer forward graph for a batch, optionally with the
// ELBO-style loss (kl_weight * KL + mean pixel BCE). kl_weight 0 leaves the
// KL term out entirely so the loss graph is identical to a plain BCE one.
inline NetGraph build_localizer_graph(const LocalizerModel& mdl, int64_t batch, bool with_loss,
                                      double kl_weight) {
  NetGraph ng;
  ng.param_leaf.assign(mdl.params.size(), -1);
  ng.rho_leaf.assign(mdl.params.size(), -1);
  ng.eps_leaf.assign(mdl.params.size(), -1);
  ng.phi_node.assign(mdl.params.size(), -1);
  ng.x = ng.g.leaf("x", {batch, 3, mdl.m, mdl.m});

  int cur = ng.x;
  int enc = -1;
  std::map<std::string, int> taps;
  for (size_t i = 0; i < mdl.convs.size(); ++i) {
    const ConvDef& d = mdl.convs[i];
    if (d.name == "pyramid.d1") enc = cur;  // encoder output feeds all branches
    if (d.name.rfind("pyramid", 0) == 0) {
      taps[d.name] = detail::emit_conv(ng, mdl.params, d, static_cast<int>(2 * i), enc);
      cur = taps[d.name];
      continue;
    }
    if (d.name == "decoder.conv1")
      cur = ng.g.concat_chan({enc, taps["pyramid.d1"], taps["pyramid.d2"], taps["pyramid.d4"]});
    cur = detail::emit_conv(ng, mdl.params, d, static_cast<int>(2 * i), cur);
    // the head refines at M/2 so masks resolve at 2-pixel granularity
    if (d.name == "decoder.conv1")
      for (int u = 0; u < 2; ++u) cur = ng.g.upsample2x(cur);
    if (d.name == "decoder.conv2") cur = ng.g.upsample2x(cur);
  }
  ng.logits = cur;
  ng.prob = ng.g.sigmoid(ng.logits);

  if (!with_loss) return ng;
  ng.targets = ng.g.leaf("targets", {batch, 1, mdl.m, mdl.m});
  ng.bce = ng.g.bce_with_logits(ng.logits, ng.targets);
  if (kl_weight != 0.0 && mdl.mask.any()) {
    int kl = -1;
    for (size_t i = 0; i < mdl.params.size(); ++i) {
      if (!mdl.params[i].bayes) continue;
      int term;
      if (mdl.prior.kind == Prior::Kind::kIsoGaussian) {
        term = ng.g.kl_iso_closed(ng.param_leaf[i], ng.rho_leaf[i], mdl.prior.sigma_p);
      } else {
        // single-sample estimate log q(phi) - log p(phi) through the phi the
        // forward pass actually used
        int phi = ng.phi_node[i];
        int lq = ng.g.gaussian_logq(ng.param_leaf[i], ng.rho_leaf[i], phi);
        int lp = mdl.prior.kind == Prior::Kind::kCauchy
                     ? ng.g.log_prior_cauchy(phi, mdl.prior.kappa)
                     : ng.g.log_prior_mixture(phi, mdl.prior.sigma0, mdl.prior.sigma1,
                                              mdl.prior.beta);
        term = ng.g.sub(lq, lp);
      }
      kl = kl < 0 ? term : ng.g.add(kl, term);
    }
    ng.kl = kl;
    ng.loss = ng.g.add(ng.g.mul_scalar(ng.kl, kl_weight), ng.bce);
  } else {
    ng.loss = ng.bce;
  }
  return ng;
}

// Victim graph; labels non-empty adds the mean cross-entropy loss.
inline NetGraph build_victim_graph(const VictimClassifier& v, int64_t batch,
                                   const std::vector<int>& labels) {
  NetGraph ng;
  ng.param_leaf.assign(v.params.size(), -1);
  ng.rho_leaf.assign(v.params.size(), -1);
  ng.eps_leaf.assign(v.params.size(), -1);
  ng.phi_node.assign(v.params.size(), -1);
  ng.x = ng.g.leaf("x", {batch, 3, v.m, v.m});
  int cur = ng.x;
  for (size_t i = 0; i < v.convs.size(); ++i)
    cur = detail::emit_conv(ng, v.params, v.convs[i], static_cast<int>(2 * i), cur);
  int pooled = ng.g.reduce_mean(cur, {2, 3});  // global average pool -> [B,C]
  int hw = detail::emit_param(ng, v.params, static_cast<int>(v.params.size()) - 2);
  int hb = detail::emit_param(ng, v.params, static_cast<int>(v.params.size()) - 1);
  ng.logits = ng.g.add_bias_rows(ng.g.matmul(pooled, hw), hb);
  if (!labels.empty()) {
    if (static_cast<int64_t>(labels.size()) != batch)
      throw std::runtime_error("build_victim_graph: label count != batch");
    ng.loss = ng.g.cross_entropy_logits(ng.logits, labels);
  }
  return ng;
}

// Parameter bindings for one evaluation; eps tensors for Bayesian params are
// sampled from `seed` (one stream, fixed parameter order) and owned here.
struct ParamBindings {
  std::vector<Tensor> eps;
  Bindings map;
};

template <typename ModelT>
inline ParamBindings bind_params(const ModelT& mdl, const NetGraph& ng, uint64_t eps_seed) {
  ParamBindings pb;
  size_t n_bayes = 0;
  for (const Param& p : mdl.params) n_bayes += p.bayes ? 1 : 0;
  pb.eps.reserve(n_bayes);  // reserve keeps Tensor addresses stable
  Rng rng(eps_seed);
  for (size_t i = 0; i < mdl.params.size(); ++i) {
    const Param& p = mdl.params[i];
    if (p.bayes) {
      pb.map.emplace(ng.param_leaf[i], &p.post.mu);
      pb.map.emplace(ng.rho_leaf[i], &p.post.rho);
      pb.eps.push_back(rng.normal_tensor(p.post.mu.shape()));
      pb.map.emplace(ng.eps_leaf[i], &pb.eps.back());
    } else {
      pb.map.emplace(ng.param_leaf[i], &p.w);
    }
  }
  return pb;
}

// --- input packing ---------------------------------------------------------------

// Images are handled as [M,M,3] HWC float tensors in [0,1]; models consume
// NCHW batches.
inline Tensor stack_hwc_to_nchw(const std::vector<const Tensor*>& imgs) {
  if (imgs.empty()) throw std::runtime_error("stack_hwc_to_nchw: empty batch");
  const Shape& s0 = imgs[0]->shape();
  if (s0.size() != 3 || s0[2] != 3)
    throw std::runtime_error("stack_hwc_to_nchw: expected [M,M,3] images, got " + shape_str(s0));
  const int64_t h = s0[0], w = s0[1];
  Tensor out({static_cast<int64_t>(imgs.size()), 3, h, w});
  for (size_t b = 0; b < imgs.size(); ++b) {
    const Tensor& img = *imgs[b];
    if (img.shape() != s0)
      throw std::runtime_error("stack_hwc_to_nchw: mixed shapes in batch");
    double* dst = out.data() + b * 3 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c) dst[(c * h + y) * w + x] = img[(y * w + x) * 3 + c];
  }
  return out;
}

inline Tensor stack_masks(const std::vector<const Tensor*>& masks) {
  if (masks.empty()) throw std::runtime_error("stack_masks: empty batch");
  const Shape& s0 = masks[0]->shape();
  if (s0.size() != 2) throw std::runtime_error("stack_masks: expected [M,M] masks");
  Tensor out({static_cast<int64_t>(masks.size()), 1, s0[0], s0[1]});
  for (size_t b = 0; b < masks.size(); ++b) {
    if (masks[b]->shape() != s0) throw std::runtime_error("stack_masks: mixed shapes in batch");
    std::copy(masks[b]->data(), masks[b]->data() + masks[b]->numel(),
              out.data() + b * masks[b]->numel());
  }
  return out;
}

// --- inference -------------------------------------------------------------------

inline Tensor localizer_forward(const LocalizerModel& mdl, const Tensor& image, uint64_t seed) {
  if (image.shape() != Shape{mdl.m, mdl.m, 3})
    throw std::runtime_error("localizer_forward: expected image shape " +
                             shape_str({mdl.m, mdl.m, 3}) + ", got " + shape_str(image.shape()));
  if (!image.all_finite()) throw std::runtime_error("localizer_forward: non-finite image");
  NetGraph ng = build_localizer_graph(mdl, 1, false, 0.0);
  ParamBindings pb = bind_params(mdl, ng, seed);
  Tensor x = stack_hwc_to_nchw({&image});
  pb.map.emplace(ng.x, &x);
  std::vector<Tensor> vals = ng.g.forward(pb.map, ng.prob);
  Tensor out({mdl.m, mdl.m});
  std::copy(vals[ng.prob].data(), vals[ng.prob].data() + out.numel(), out.data());
  return out;
}

// N Monte-Carlo forward draws; draw i uses the seed derived from (seed, i).
inline std::vector<Tensor> mc_predict(const LocalizerModel& mdl, const Tensor& image, int n,
                                      uint64_t seed) {
  if (n < 1) throw std::runtime_error("mc_predict: need at least one sample");
  std::vector<Tensor> maps;
  maps.reserve(n);
  for (int i = 0; i < n; ++i)
    maps.push_back(localizer_forward(mdl, image, derive_seed(seed, "mc", static_cast<uint64_t>(i))));
  return maps;
}

// Batched MC inference for the pipeline: one weight draw per MC round shared
// across the batch (seeds derived as in mc_predict). Returns [image][draw].
inline std::vector<std::vector<Tensor>> mc_predict_batch(const LocalizerModel& mdl,
                                                         const std::vector<const Tensor*>& images,
                                                         int n, uint64_t seed) {
  if (n < 1) throw std::runtime_error("mc_predict_batch: need at least one sample");
  const int64_t b = static_cast<int64_t>(images.size());
  NetGraph ng = build_localizer_graph(mdl, b, false, 0.0);
  Tensor x = stack_hwc_to_nchw(images);
  std::vector<std::vector<Tensor>> out(images.size());
  std::vector<Tensor> vals;  // buffers shared across draws
  for (int i = 0; i < n; ++i) {
    ParamBindings pb = bind_params(mdl, ng, derive_seed(seed, "mc", static_cast<uint64_t>(i)));
    pb.map.emplace(ng.x, &x);
    ng.g.forward_into(pb.map, vals, ng.prob);
    const Tensor& probs = vals[ng.prob];
    for (int64_t j = 0; j < b; ++j) {
      Tensor map({mdl.m, mdl.m});
      std::copy(probs.data() + j * mdl.m * mdl.m, probs.data() + (j + 1) * mdl.m * mdl.m,
                map.data());
      out[j].push_back(std::move(map));
    }
  }
  return out;
}

// Softmax class probabilities for a batch of images.
inline Tensor victim_predict(const VictimClassifier& v, const std::vector<const Tensor*>& images) {
  NetGraph ng = build_victim_graph(v, static_cast<int64_t>(images.size()), {});
  ParamBindings pb = bind_params(v, ng, 0);
  Tensor x = stack_hwc_to_nchw(images);
  pb.map.emplace(ng.x, &x);
  std::vector<Tensor> vals = ng.g.forward(pb.map, ng.logits);
  const Tensor& z = vals[ng.logits];
  Tensor probs(z.shape());
  const int64_t n = z.dim(0), k = z.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * k;
    double m = row[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - m);
    for (int64_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - m) / sum;
  }
  return probs;
}

inline double victim_accuracy(const VictimClassifier& v, const std::vector<Tensor>& images,
                              const std::vector<int>& labels) {
  if (images.empty() || images.size() != labels.size())
    throw std::runtime_error("victim_accuracy: images/labels size mismatch");
  int correct = 0;
  const size_t chunk = 32;
  for (size_t off = 0; off < images.size(); off += chunk) {
    std::vector<const Tensor*> batch;
    for (size_t i = off; i < std::min(images.size(), off + chunk); ++i) batch.push_back(&images[i]);
    Tensor probs = victim_predict(v, batch);
    for (int64_t i = 0; i < probs.dim(0); ++i) {
      int64_t arg = 0;
      for (int64_t j = 1; j < probs.dim(1); ++j)
        if (probs[i * probs.dim(1) + j] > probs[i * probs.dim(1) + arg]) arg = j;
      if (arg == labels[off + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

// --- optimizer and training -------------------------------------------------------

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // params[i] and grads[i] must stay aligned call to call.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (m_.empty()) {
      for (Tensor* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (params.size() != m_.size())
      throw std::runtime_error("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (int64_t j = 0; j < p.numel(); ++j) {
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
        p[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TrainStep {
  double kl = 0.0, bce = 0.0, total = 0.0;
};

struct LossTrace {
  std::vector<TrainStep> steps;
  std::vector<TrainStep> epochs;  // per-epoch means
};

inline void write_loss_trace_csv(const LossTrace& trace, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_loss_trace_csv: cannot open " + path);
  f << "epoch,kl,bce,total\n";
  char buf[128];
  for (size_t e = 0; e < trace.epochs.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e + 1, trace.epochs[e].kl,
                  trace.epochs[e].bce, trace.epochs[e].total);
    f << buf;
  }
  if (!f) throw std::runtime_error("write_loss_trace_csv: write failed for " + path);
}

struct TrainConfig {
  int epochs = 30;
  int batch = 8;
  double lr = 1e-3;
  double kl_weight = -1.0;  // negative: use 1/num_minibatches
  uint64_t seed = 0;
  // optional progress hook, called with (1-based epoch, epoch-mean losses)
  std::function<void(int, const TrainStep&)> on_epoch;
};

namespace detail {

template <typename ModelT>
inline std::vector<Tensor*> trainable_tensors(ModelT& mdl, const NetGraph& ng) {
  std::vector<Tensor*> out;
  for (const TrainableRef& t : ng.trainables) {
    Param& p = mdl.params[t.param_index];
    out.push_back(t.is_rho ? &p.post.rho : (p.bayes ? &p.post.mu : &p.w));
  }
  return out;
}

inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(0, i - 1)]);
  return idx;
}

}  // namespace detail

// Minimizes kl_weight*KL + mean pixel BCE with Adam. Images are [M,M,3] HWC,
// masks [M,M] in {0,1}. A NaN loss aborts with a diagnostic.
inline LossTrace train_localizer(LocalizerModel& mdl, const std::vector<Tensor>& images,
                                 const std::vector<Tensor>& masks, const TrainConfig& cfg) {
  if (images.empty() || images.size() != masks.size())
    throw std::runtime_error("train_localizer: images/masks size mismatch");
  const size_t n = images.size();
  const size_t bs = static_cast<size_t>(cfg.batch);
  const size_t steps_per_epoch = (n + bs - 1) / bs;
  const double klw =
      cfg.kl_weight < 0 ? 1.0 / static_cast<double>(steps_per_epoch) : cfg.kl_weight;

  // per batch size: graph plus reusable forward/backward buffers
  struct Cached {
    NetGraph ng;
    std::vector<Tensor> vals;
    Graph::BackwardScratch scratch;
  };
  std::map<int64_t, Cached> graphs;
  auto graph_for = [&](int64_t b) -> Cached& {
    auto it = graphs.find(b);
    if (it == graphs.end()) {
      it = graphs.emplace(std::piecewise_construct, std::forward_as_tuple(b),
                          std::forward_as_tuple())
               .first;
      it->second.ng = build_localizer_graph(mdl, b, true, klw);
    }
    return it->second;
  };

  Adam opt(cfg.lr);
  LossTrace trace;
  uint64_t gstep = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order =
        detail::shuffled_indices(n, derive_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
    TrainStep esum;
    for (size_t off = 0; off < n; off += bs, ++gstep) {
      std::vector<const Tensor*> bi, bm;
      for (size_t i = off; i < std::min(n, off + bs); ++i) {
        bi.push_back(&images[order[i]]);
        bm.push_back(&masks[order[i]]);
      }
      Cached& cg = graph_for(static_cast<int64_t>(bi.size()));
      NetGraph& ng = cg.ng;
      Tensor x = stack_hwc_to_nchw(bi);
      Tensor t = stack_masks(bm);
      ParamBindings pb = bind_params(mdl, ng, derive_seed(cfg.seed, "eps", gstep));
      pb.map.emplace(ng.x, &x);
      pb.map.emplace(ng.targets, &t);

      ng.g.forward_into(pb.map, cg.vals);
      std::vector<Tensor>& vals = cg.vals;
      TrainStep s;
      s.bce = vals[ng.bce].value();
      s.kl = ng.kl >= 0 ? vals[ng.kl].value() : 0.0;
      s.total = vals[ng.loss].value();
      if (!std::isfinite(s.total))
        throw std::runtime_error("train_localizer: non-finite loss at epoch " +
                                 std::to_string(epoch + 1) + " step " + std::to_string(gstep) +
                                 " (kl=" + std::to_string(s.kl) + ", bce=" + std::to_string(s.bce) +
                                 ")");
      trace.steps.push_back(s);
      esum.kl += s.kl;
      esum.bce += s.bce;
      esum.total += s.total;

      std::vector<int> wrt;
      for (const TrainableRef& tr : ng.trainables) wrt.push_back(tr.leaf);
      auto grads = ng.g.backward(ng.loss, wrt, vals, cg.scratch);
      std::vector<Tensor*> ps = detail::trainable_tensors(mdl, ng);
      std::vector<const Tensor*> gs;
      for (const TrainableRef& tr : ng.trainables) gs.push_back(&grads.at(tr.leaf));
      opt.step(ps, gs);
    }
    const double k = static_cast<double>(steps_per_epoch);
    trace.epochs.push_back({esum.kl / k, esum.bce / k, esum.total / k});
  }
  return trace;
}

// Cross-entropy training for the victim. Returns per-epoch mean losses.
inline std::vector<double> train_victim(VictimClassifier& v, const std::vector<Tensor>& images,
                                        const std::vector<int>& labels, int epochs, int batch,
                                        double lr, uint64_t seed) {
  if (images.empty() || images.size() != labels.size())
    throw std::runtime_error("train_victim: images/labels size mismatch");
  for (int y : labels)
    if (y < 0 || y >= v.num_classes)
      throw std::runtime_error("train_victim: label out of range");
  const size_t n = images.size();
  const size_t bs = static_cast<size_t>(batch);
  Adam opt(lr);
  std::vector<double> epoch_losses;
  uint64_t gstep = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<size_t> order =
        detail::shuffled_indices(n, derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
    double esum = 0;
    size_t steps = 0;
    for (size_t off = 0; off < n; off += bs, ++gstep, ++steps) {
      std::vector<const Tensor*> bi;
      std::vector<int> by;
      for (size_t i = off; i < std::min(n, off + bs); ++i) {
        bi.push_back(&images[order[i]]);
        by.push_back(labels[order[i]]);
      }
      NetGraph ng = build_victim_graph(v, static_cast<int64_t>(bi.size()), by);
      ParamBindings pb = bind_params(v, ng, 0);
      Tensor x = stack_hwc_to_nchw(bi);
      pb.map.emplace(ng.x, &x);
      std::vector<Tensor> vals = ng.g.forward(pb.map);
      const double loss = vals[ng.loss].value();
      if (!std::isfinite(loss))
        throw std::runtime_error("train_victim: non-finite loss at epoch " +
                                 std::to_string(epoch + 1));
      esum += loss;
      std::vector<int> wrt;
      for (const TrainableRef& tr : ng.trainables) wrt.push_back(tr.leaf);
      auto grads = ng.g.backward(ng.loss, wrt, vals);
      std::vector<Tensor*> ps = detail::trainable_tensors(v, ng);
      std::vector<const Tensor*> gs;
      for (const TrainableRef& tr : ng.trainables) gs.push_back(&grads.at(tr.leaf));
      opt.step(ps, gs);
    }
    epoch_losses.push_back(esum / static_cast<double>(steps));
  }
  return epoch_losses;
}

// --- checkpoints -------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::map<std::string, std::string> read_kv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("checkpoint: malformed line '" + line + "' in " + path);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline const std::string& kv_get(const std::map<std::string, std::string>& kv,
                                 const std::string& key, const std::string& path) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw std::runtime_error("checkpoint: missing key '" + key + "' in " + path);
  return it->second;
}

inline void save_params(const std::vector<Param>& params, const std::filesystem::path& dir) {
  for (const Param& p : params) {
    if (p.bayes) {
      write_dtf((dir / (p.name + ".mu.dtf")).string(), p.post.mu);
      write_dtf((dir / (p.name + ".rho.dtf")).string(), p.post.rho);
    } else {
      write_dtf((dir / (p.name + ".w.dtf")).string(), p.w);
    }
  }
}

inline void load_params(std::vector<Param>& params, const std::filesystem::path& dir) {
  for (Param& p : params) {
    if (p.bayes) {
      Tensor mu = read_dtf((dir / (p.name + ".mu.dtf")).string());
      Tensor rho = read_dtf((dir / (p.name + ".rho.dtf")).string());
      if (mu.shape() != p.shape() || rho.shape() != p.shape())
        throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
      p.post = GaussianPosterior(std::move(mu), std::move(rho));
    } else {
      Tensor w = read_dtf((dir / (p.name + ".w.dtf")).string());
      if (w.shape() != p.shape())
        throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
      p.w = std::move(w);
    }
  }
}

}  // namespace detail

inline void save_localizer(const LocalizerModel& mdl, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(std::filesystem::path(dir) / "config.txt");
  f << "kind=localizer\n";
  f << "mask=" << mdl.mask.bits() << "\n";
  f << "decoder=" << (mdl.mask.decoder ? 1 : 0) << "\n";
  f << "prior=" << mdl.prior.kind_name() << "\n";
  f << "sigma_p=" << detail::fmt_double(mdl.prior.sigma_p) << "\n";
  f << "kappa=" << detail::fmt_double(mdl.prior.kappa) << "\n";
  f << "sigma0=" << detail::fmt_double(mdl.prior.sigma0) << "\n";
  f << "sigma1=" << detail::fmt_double(mdl.prior.sigma1) << "\n";
  f << "beta=" << detail::fmt_double(mdl.prior.beta) << "\n";
  f << "m=" << mdl.m << "\n";
  f << "channels=" << mdl.channels[0] << "," << mdl.channels[1] << "," << mdl.channels[2] << ","
    << mdl.channels[3] << "\n";
  f << "seed=" << mdl.init_seed << "\n";
  if (!f) throw std::runtime_error("save_localizer: write failed in " + dir);
  f.close();
  detail::save_params(mdl.params, dir);
}

inline LocalizerModel load_localizer(const std::string& dir) {
  auto cfg = detail::read_kv((std::filesystem::path(dir) / "config.txt").string());
  if (detail::kv_get(cfg, "kind", dir) != "localizer")
    throw std::runtime_error("load_localizer: " + dir + " is not a localizer checkpoint");
  PlacementMask mask = PlacementMask::from_string(detail::kv_get(cfg, "mask", dir),
                                                  detail::kv_get(cfg, "decoder", dir) == "1");
  const std::string pk = detail::kv_get(cfg, "prior", dir);
  Prior prior;
  if (pk == "iso")
    prior = Prior::iso_gaussian(std::stod(detail::kv_get(cfg, "sigma_p", dir)));
  else if (pk == "cauchy")
    prior = Prior::cauchy(std::stod(detail::kv_get(cfg, "kappa", dir)));
  else if (pk == "mixture")
    prior = Prior::scale_mixture(std::stod(detail::kv_get(cfg, "sigma0", dir)),
                                 std::stod(detail::kv_get(cfg, "sigma1", dir)),
                                 std::stod(detail::kv_get(cfg, "beta", dir)));
  else
    throw std::runtime_error("load_localizer: unknown prior kind '" + pk + "'");
  std::array<int64_t, 4> ch{};
  if (std::sscanf(detail::kv_get(cfg, "channels", dir).c_str(), "%ld,%ld,%ld,%ld", &ch[0], &ch[1],
                  &ch[2], &ch[3]) != 4)
    throw std::runtime_error("load_localizer: bad channels in " + dir);
  LocalizerModel mdl = build_localizer(mask, prior, std::stoll(detail::kv_get(cfg, "m", dir)), ch,
                                       std::stoull(detail::kv_get(cfg, "seed", dir)));
  detail::load_params(mdl.params, dir);
  return mdl;
}

inline void save_victim(const VictimClassifier& v, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(std::filesystem::path(dir) / "config.txt");
  f << "kind=victim\n";
  f << "m=" << v.m << "\n";
  f << "num_classes=" << v.num_classes << "\n";
  f << "channels=" << v.channels[0] << "," << v.channels[1] << "," << v.channels[2] << "\n";
  f << "seed=" << v.init_seed << "\n";
  if (!f) throw std::runtime_error("save_victim: write failed in " + dir);
  f.close();
  detail::save_params(v.params, dir);
}

inline VictimClassifier load_victim(const std::string& dir) {
  auto cfg = detail::read_kv((std::filesystem::path(dir) / "config.txt").string());
  if (detail::kv_get(cfg, "kind", dir) != "victim")
    throw std::runtime_error("load_victim: " + dir + " is not a victim checkpoint");
  std::array<int64_t, 3> ch{};
  if (std::sscanf(detail::kv_get(cfg, "channels", dir).c_str(), "%ld,%ld,%ld", &ch[0], &ch[1],
                  &ch[2]) != 3)
    throw std::runtime_error("load_victim: bad channels in " + dir);
  VictimClassifier v = build_victim(std::stoll(detail::kv_get(cfg, "m", dir)),
                                    std::stoll(detail::kv_get(cfg, "num_classes", dir)), ch,
                                    std::stoull(detail::kv_get(cfg, "seed", dir)));
  detail::load_params(v.params, dir);
  return v;
}

}  // namespace duet
