#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/tensor.hpp"

namespace duet {

// Reverse-mode autodiff over a recorded op list. A Graph is built once
// (shapes fixed at build time), then evaluated any number of times against
// leaf bindings. Evaluation order is the insertion order, which is already
// topological because builders only reference existing nodes.

enum class Op {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kMatmul,
  kAddBiasChan,  // [N,C,H,W] + [C]
  kAddBiasRows,  // [N,K] + [K]
  kConv2d,
  kRelu,
  kSigmoid,
  kSoftplus,
  kLog,
  kExp,
  kClamp,
  kUpsample2x,
  kReduceMean,  // over attr axes; empty axes = all
  kReduceSum,   // over all elements
  kConcatChan,
  kReshape,
  kHwcToChw,
  kCrossEntropyLogits,  // fused stable softmax cross-entropy, mean over rows
  kBceWithLogits,       // fused stable mean binary cross-entropy
  kGaussianLogQ,        // sum log N(phi; mu, softplus(rho)^2)
  kLogPriorIso,
  kLogPriorCauchy,
  kLogPriorMixture,
  kKlIsoClosed,  // closed-form KL(N(mu,softplus(rho)^2) || N(0, sigma_p^2))
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kAddBiasChan: return "add_bias_chan";
    case Op::kAddBiasRows: return "add_bias_rows";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClamp: return "clamp";
    case Op::kUpsample2x: return "upsample2x";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kConcatChan: return "concat_chan";
    case Op::kReshape: return "reshape";
    case Op::kHwcToChw: return "hwc_to_chw";
    case Op::kCrossEntropyLogits: return "cross_entropy_logits";
    case Op::kBceWithLogits: return "bce_with_logits";
    case Op::kGaussianLogQ: return "gaussian_logq";
    case Op::kLogPriorIso: return "log_prior_iso";
    case Op::kLogPriorCauchy: return "log_prior_cauchy";
    case Op::kLogPriorMixture: return "log_prior_mixture";
    case Op::kKlIsoClosed: return "kl_iso_closed";
  }
  return "?";
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
inline double sigmoid_scalar(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double log_mixture_density(double x, double s0, double s1, double beta);
inline void reduce_mean_fwd(const Tensor& a, const std::vector<int>& axes, Tensor& out);

using Bindings = std::unordered_map<int, const Tensor*>;

class Graph {
 public:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> in;
    Shape shape;
    std::string name;
    double a = 0.0, b = 0.0, c = 0.0;  // op scalars (clamp bounds, prior params, ...)
    int stride = 1, pad = 0, dilation = 1;
    std::vector<int> labels;  // cross-entropy class labels
    std::vector<int> axes;    // reduce_mean axes
    Tensor cval;              // kConst payload
  };

  int leaf(const std::string& name, Shape shape) {
    Node n;
    n.op = Op::kLeaf;
    n.shape = std::move(shape);
    n.name = name;
    return push(std::move(n));
  }

  int constant(Tensor t, const std::string& name = "const") {
    Node n;
    n.op = Op::kConst;
    n.shape = t.shape();
    n.name = name;
    n.cval = std::move(t);
    return push(std::move(n));
  }

  int add(int x, int y) { return binary(Op::kAdd, x, y); }
  int sub(int x, int y) { return binary(Op::kSub, x, y); }
  int mul(int x, int y) { return binary(Op::kMul, x, y); }
  int div(int x, int y) { return binary(Op::kDiv, x, y); }

  int add_scalar(int x, double s) { return unary_scalar(Op::kAddScalar, x, s); }
  int mul_scalar(int x, double s) { return unary_scalar(Op::kMulScalar, x, s); }

  int matmul(int x, int y) {
    const Shape& a = shape(x);
    const Shape& b = shape(y);
    if (a.size() != 2 || b.size() != 2 || a[1] != b[0])
      fail("matmul", {x, y}, "incompatible shapes " + shape_str(a) + " x " + shape_str(b));
    Node n;
    n.op = Op::kMatmul;
    n.in = {x, y};
    n.shape = {a[0], b[1]};
    return push(std::move(n));
  }

  int add_bias_chan(int x, int bias) {
    const Shape& a = shape(x);
    const Shape& b = shape(bias);
    if (a.size() != 4 || b.size() != 1 || b[0] != a[1])
      fail("add_bias_chan", {x, bias}, "expected [N,C,H,W] + [C], got " + shape_str(a) + " + " + shape_str(b));
    Node n;
    n.op = Op::kAddBiasChan;
    n.in = {x, bias};
    n.shape = a;
    return push(std::move(n));
  }

  int add_bias_rows(int x, int bias) {
    const Shape& a = shape(x);
    const Shape& b = shape(bias);
    if (a.size() != 2 || b.size() != 1 || b[0] != a[1])
      fail("add_bias_rows", {x, bias}, "expected [N,K] + [K], got " + shape_str(a) + " + " + shape_str(b));
    Node n;
    n.op = Op::kAddBiasRows;
    n.in = {x, bias};
    n.shape = a;
    return push(std::move(n));
  }

  // x: [N,Ci,H,W], w: [Co,Ci,kh,kw]; zero padding, square kernel.
  int conv2d(int x, int w, int stride = 1, int pad = 0, int dilation = 1) {
    const Shape& a = shape(x);
    const Shape& b = shape(w);
    if (a.size() != 4 || b.size() != 4)
      fail("conv2d", {x, w}, "expected 4-d input and weight, got " + shape_str(a) + ", " + shape_str(b));
    if (a[1] != b[1])
      fail("conv2d", {x, w}, "input channels " + std::to_string(a[1]) + " != weight channels " + std::to_string(b[1]));
    if (stride < 1 || stride > 2) fail("conv2d", {x, w}, "stride must be 1 or 2");
    if (dilation < 1) fail("conv2d", {x, w}, "dilation must be >= 1");
    int64_t ho = (a[2] + 2 * pad - dilation * (b[2] - 1) - 1) / stride + 1;
    int64_t wo = (a[3] + 2 * pad - dilation * (b[3] - 1) - 1) / stride + 1;
    if (ho <= 0 || wo <= 0) fail("conv2d", {x, w}, "empty output for input " + shape_str(a));
    Node n;
    n.op = Op::kConv2d;
    n.in = {x, w};
    n.shape = {a[0], b[0], ho, wo};
    n.stride = stride;
    n.pad = pad;
    n.dilation = dilation;
    return push(std::move(n));
  }

  int relu(int x) { return unary(Op::kRelu, x); }
  int sigmoid(int x) { return unary(Op::kSigmoid, x); }
  int softplus(int x) { return unary(Op::kSoftplus, x); }
  int log(int x) { return unary(Op::kLog, x); }
  int exp(int x) { return unary(Op::kExp, x); }

  int clamp(int x, double lo, double hi) {
    Node n;
    n.op = Op::kClamp;
    n.in = {x};
    n.shape = shape(x);
    n.a = lo;
    n.b = hi;
    return push(std::move(n));
  }

  int upsample2x(int x) {
    const Shape& a = shape(x);
    if (a.size() != 4) fail("upsample2x", {x}, "expected [N,C,H,W], got " + shape_str(a));
    Node n;
    n.op = Op::kUpsample2x;
    n.in = {x};
    n.shape = {a[0], a[1], a[2] * 2, a[3] * 2};
    return push(std::move(n));
  }

  // Mean over the given axes; empty list means all elements (scalar output).
  int reduce_mean(int x, std::vector<int> axes = {}) {
    const Shape& a = shape(x);
    Shape out;
    std::vector<bool> drop(a.size(), axes.empty());
    for (int ax : axes) {
      if (ax < 0 || ax >= static_cast<int>(a.size())) fail("reduce_mean", {x}, "axis out of range");
      drop[ax] = true;
    }
    for (size_t i = 0; i < a.size(); ++i)
      if (!drop[i]) out.push_back(a[i]);
    Node n;
    n.op = Op::kReduceMean;
    n.in = {x};
    n.shape = std::move(out);
    n.axes = std::move(axes);
    return push(std::move(n));
  }

  int reduce_sum(int x) {
    Node n;
    n.op = Op::kReduceSum;
    n.in = {x};
    n.shape = {};
    return push(std::move(n));
  }

  int concat_chan(const std::vector<int>& xs) {
    if (xs.empty()) throw std::runtime_error("concat_chan: no inputs");
    const Shape& a0 = shape(xs[0]);
    if (a0.size() != 4) fail("concat_chan", xs, "expected [N,C,H,W] inputs");
    int64_t csum = 0;
    for (int x : xs) {
      const Shape& a = shape(x);
      if (a.size() != 4 || a[0] != a0[0] || a[2] != a0[2] || a[3] != a0[3])
        fail("concat_chan", xs, "mismatched input shapes");
      csum += a[1];
    }
    Node n;
    n.op = Op::kConcatChan;
    n.in = xs;
    n.shape = {a0[0], csum, a0[2], a0[3]};
    return push(std::move(n));
  }

  int reshape(int x, Shape target) {
    if (shape_numel(target) != shape_numel(shape(x)))
      fail("reshape", {x}, "element count mismatch " + shape_str(shape(x)) + " -> " + shape_str(target));
    Node n;
    n.op = Op::kReshape;
    n.in = {x};
    n.shape = std::move(target);
    return push(std::move(n));
  }

  int hwc_to_chw(int x) {
    const Shape& a = shape(x);
    if (a.size() != 3) fail("hwc_to_chw", {x}, "expected [H,W,C], got " + shape_str(a));
    Node n;
    n.op = Op::kHwcToChw;
    n.in = {x};
    n.shape = {a[2], a[0], a[1]};
    return push(std::move(n));
  }

  // logits [N,K], labels.size()==N; scalar mean cross-entropy.
  int cross_entropy_logits(int logits, std::vector<int> labels) {
    const Shape& a = shape(logits);
    if (a.size() != 2 || static_cast<int64_t>(labels.size()) != a[0])
      fail("cross_entropy_logits", {logits}, "logits " + shape_str(a) + " vs " + std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= a[1]) fail("cross_entropy_logits", {logits}, "label out of range");
    Node n;
    n.op = Op::kCrossEntropyLogits;
    n.in = {logits};
    n.shape = {};
    n.labels = std::move(labels);
    return push(std::move(n));
  }

  // Mean over all elements of softplus(z) - z*t; same-shaped logits/targets.
  int bce_with_logits(int logits, int targets) {
    if (shape(logits) != shape(targets))
      fail("bce_with_logits", {logits, targets}, "shape mismatch");
    Node n;
    n.op = Op::kBceWithLogits;
    n.in = {logits, targets};
    n.shape = {};
    return push(std::move(n));
  }

  int gaussian_logq(int mu, int rho, int phi) {
    if (shape(mu) != shape(rho) || shape(mu) != shape(phi))
      fail("gaussian_logq", {mu, rho, phi}, "shape mismatch");
    Node n;
    n.op = Op::kGaussianLogQ;
    n.in = {mu, rho, phi};
    n.shape = {};
    return push(std::move(n));
  }

  int log_prior_iso(int phi, double sigma_p) {
    Node n;
    n.op = Op::kLogPriorIso;
    n.in = {phi};
    n.shape = {};
    n.a = sigma_p;
    return push(std::move(n));
  }

  int log_prior_cauchy(int phi, double kappa) {
    Node n;
    n.op = Op::kLogPriorCauchy;
    n.in = {phi};
    n.shape = {};
    n.a = kappa;
    return push(std::move(n));
  }

  int log_prior_mixture(int phi, double sigma0, double sigma1, double beta) {
    Node n;
    n.op = Op::kLogPriorMixture;
    n.in = {phi};
    n.shape = {};
    n.a = sigma0;
    n.b = sigma1;
    n.c = beta;
    return push(std::move(n));
  }

  int kl_iso_closed(int mu, int rho, double sigma_p) {
    if (shape(mu) != shape(rho)) fail("kl_iso_closed", {mu, rho}, "shape mismatch");
    Node n;
    n.op = Op::kKlIsoClosed;
    n.in = {mu, rho};
    n.shape = {};
    n.a = sigma_p;
    return push(std::move(n));
  }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const Shape& shape(int id) const { return nodes_.at(id).shape; }
  const Node& node(int id) const { return nodes_.at(id); }

  std::string describe(int id) const {
    const Node& n = nodes_.at(id);
    std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
  }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (int i = 0; i < num_nodes(); ++i)
      if (nodes_[i].op == Op::kLeaf) out.push_back(i);
    return out;
  }

  // Evaluates nodes 0..upto (all nodes when upto < 0); values[i] is the
  // output of node i. Leaves past `upto` may stay unbound. Call with the same
  // `values` vector across passes to reuse its buffers.
  void forward_into(const Bindings& bindings, std::vector<Tensor>& values, int upto = -1) const {
    values.resize(nodes_.size());
    const int last = upto < 0 ? num_nodes() - 1 : upto;
    for (int i = 0; i <= last; ++i) eval_node(i, bindings, values);
  }

  std::vector<Tensor> forward(const Bindings& bindings, int upto = -1) const {
    std::vector<Tensor> values;
    forward_into(bindings, values, upto);
    return values;
  }

  // Reusable backward storage; pass the same instance across steps to avoid
  // reallocating per-node gradient buffers.
  struct BackwardScratch {
    std::vector<Tensor> grads;
    std::vector<char> reached;
  };

  // Accumulates d(loss)/d(node) for the requested nodes; `values` must come
  // from forward() on the same bindings. Leaves unreachable from the loss get
  // zero gradients.
  std::unordered_map<int, Tensor> backward(int loss, const std::vector<int>& wrt,
                                           const std::vector<Tensor>& values,
                                           BackwardScratch& scratch) const {
    if (shape_numel(shape(loss)) != 1)
      throw std::runtime_error("backward: loss must be scalar, " + describe(loss) + " has shape " +
                               shape_str(shape(loss)));
    scratch.grads.resize(nodes_.size());
    scratch.reached.assign(nodes_.size(), 0);
    std::vector<Tensor>& grads = scratch.grads;
    Tensor& seed = grads[loss];
    if (seed.shape() != shape(loss) || seed.numel() == 0) seed = Tensor::full(shape(loss), 1.0);
    else std::fill(seed.data(), seed.data() + seed.numel(), 1.0);
    scratch.reached[loss] = 1;
    for (int i = loss; i >= 0; --i) {
      if (!scratch.reached[i]) continue;
      backprop_node(i, values, grads, scratch.reached);
    }
    std::unordered_map<int, Tensor> out;
    for (int id : wrt) {
      if (!scratch.reached[id] || grads[id].numel() == 0)
        grads[id] = Tensor(shape(id).empty() ? Shape{} : shape(id));
      out.emplace(id, std::move(grads[id]));
    }
    return out;
  }

  std::unordered_map<int, Tensor> backward(int loss, const std::vector<int>& wrt,
                                           const std::vector<Tensor>& values) const {
    BackwardScratch scratch;
    return backward(loss, wrt, values, scratch);
  }

  std::unordered_map<int, Tensor> gradients(int loss, const std::vector<int>& wrt,
                                            const Bindings& bindings) const {
    std::vector<Tensor> values = forward(bindings);
    return backward(loss, wrt, values);
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int unary(Op op, int x) {
    Node n;
    n.op = op;
    n.in = {x};
    n.shape = shape(x);
    return push(std::move(n));
  }

  int unary_scalar(Op op, int x, double s) {
    Node n;
    n.op = op;
    n.in = {x};
    n.shape = shape(x);
    n.a = s;
    return push(std::move(n));
  }

  int binary(Op op, int x, int y) {
    if (shape(x) != shape(y))
      fail(op_name(op), {x, y}, "shape mismatch " + shape_str(shape(x)) + " vs " + shape_str(shape(y)));
    Node n;
    n.op = op;
    n.in = {x, y};
    n.shape = shape(x);
    return push(std::move(n));
  }

  [[noreturn]] void fail(const std::string& opname, const std::vector<int>& ins, const std::string& msg) const {
    std::string s = opname + "(";
    for (size_t i = 0; i < ins.size(); ++i) s += (i ? ", " : "") + describe(ins[i]);
    throw std::runtime_error(s + "): " + msg);
  }

  void eval_node(int id, const Bindings& bindings, std::vector<Tensor>& v) const;
  void backprop_node(int id, const std::vector<Tensor>& v, std::vector<Tensor>& g,
                     std::vector<char>& reached) const;

  static void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad, int dil);
  static void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw,
                              int stride, int pad, int dil);

  std::vector<Node> nodes_;
};

// --- forward kernels ---------------------------------------------------------

// copy C HxW planes into the interior of a zero-padded (H+2P)x(W+2P) scratch
// layout; the caller zeroes the buffer once so only interiors are rewritten
inline void conv_pad_copy(double* dst, const double* src, int64_t C, int64_t H, int64_t W, int64_t P) {
  const int64_t Hp = H + 2 * P, Wp = W + 2 * P;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t h = 0; h < H; ++h)
      std::memcpy(dst + (c * Hp + h + P) * Wp + P, src + (c * H + h) * W, sizeof(double) * W);
}

// all nine 3x3 weight-gradient taps as flat dots in a single sweep: a is a
// zero-padded gy plane, b the matching padded input plane offset to tap (0,0);
// zeros in a absorb every out-of-window product, so b may read into margins
inline void conv_gw_flat(const double* __restrict a, const double* __restrict b, int64_t P,
                         int64_t D, int64_t rD, double* gkwp) {
  const int64_t D2 = 2 * D, rD2 = 2 * rD;
  double s00 = 0, s01 = 0, s02 = 0, s10 = 0, s11 = 0, s12 = 0, s20 = 0, s21 = 0, s22 = 0;
#pragma omp simd reduction(+ : s00, s01, s02, s10, s11, s12, s20, s21, s22)
  for (int64_t j = 0; j < P; ++j) {
    const double av = a[j];
    s00 += av * b[j];
    s01 += av * b[j + D];
    s02 += av * b[j + D2];
    s10 += av * b[j + rD];
    s11 += av * b[j + rD + D];
    s12 += av * b[j + rD + D2];
    s20 += av * b[j + rD2];
    s21 += av * b[j + rD2 + D];
    s22 += av * b[j + rD2 + D2];
  }
  gkwp[0] += s00;
  gkwp[1] += s01;
  gkwp[2] += s02;
  gkwp[3] += s10;
  gkwp[4] += s11;
  gkwp[5] += s12;
  gkwp[6] += s20;
  gkwp[7] += s21;
  gkwp[8] += s22;
}

inline void Graph::conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad, int dil) {
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const int64_t Ho = y.dim(2), Wo = y.dim(3);
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();

  if (Kh == 3 && Kw == 3 && stride == 1 && pad == dil) {
    // fast path for 3x3 stride-1 same-size convs (any dilation): inputs are
    // staged into zero-padded scratch planes so every row pass is one
    // branch-free nine-tap loop over the full width, two channels at a time
    const int64_t D = dil, D2 = 2 * D, Hp = H + 2 * D, Wp = W + 2 * D;
    thread_local std::vector<double> padbuf;
    padbuf.assign(Ci * Hp * Wp, 0.0);
    double* pads = padbuf.data();
    for (int64_t n = 0; n < N; ++n) {
      conv_pad_copy(pads, xp + n * Ci * H * W, Ci, H, W, D);
      for (int64_t co = 0; co < Co; ++co) {
        double* op = yp + (n * Co + co) * Ho * Wo;
        std::memset(op, 0, sizeof(double) * Ho * Wo);
        for (int64_t ci = 0; ci < Ci; ci += 2) {
          const bool pair = ci + 1 < Ci;
          const double* pa = pads + ci * Hp * Wp;
          const double* pb = pair ? pa + Hp * Wp : pa;
          const double* ka = wp + (co * Ci + ci) * 9;
          const double* kb = pair ? ka + 9 : ka;
          const double a00 = ka[0], a01 = ka[1], a02 = ka[2];
          const double a10 = ka[3], a11 = ka[4], a12 = ka[5];
          const double a20 = ka[6], a21 = ka[7], a22 = ka[8];
          const double b00 = pair ? kb[0] : 0, b01 = pair ? kb[1] : 0, b02 = pair ? kb[2] : 0;
          const double b10 = pair ? kb[3] : 0, b11 = pair ? kb[4] : 0, b12 = pair ? kb[5] : 0;
          const double b20 = pair ? kb[6] : 0, b21 = pair ? kb[7] : 0, b22 = pair ? kb[8] : 0;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const double* __restrict p0 = pa + oh * Wp;
            const double* __restrict p1 = p0 + D * Wp;
            const double* __restrict p2 = p0 + D2 * Wp;
            const double* __restrict q0 = pb + oh * Wp;
            const double* __restrict q1 = q0 + D * Wp;
            const double* __restrict q2 = q0 + D2 * Wp;
            double* __restrict orow = op + oh * Wo;
#pragma omp simd
            for (int64_t ow = 0; ow < Wo; ++ow)
              orow[ow] += a00 * p0[ow] + a01 * p0[ow + D] + a02 * p0[ow + D2] +
                          a10 * p1[ow] + a11 * p1[ow + D] + a12 * p1[ow + D2] +
                          a20 * p2[ow] + a21 * p2[ow + D] + a22 * p2[ow + D2] +
                          b00 * q0[ow] + b01 * q0[ow + D] + b02 * q0[ow + D2] +
                          b10 * q1[ow] + b11 * q1[ow + D] + b12 * q1[ow + D2] +
                          b20 * q2[ow] + b21 * q2[ow + D] + b22 * q2[ow + D2];
          }
        }
      }
    }
    return;
  }

  if (Kh == 3 && Kw == 3 && stride == 2 && dil == 1 && pad == 1 && H == 2 * Ho && W == 2 * Wo) {
    // fused 3x3 stride-2 downsampling: padded input rows are pre-split into
    // even/odd column halves so all nine taps read contiguously
    const int64_t Hp = H + 2, Wp = W + 2, We = Wo + 1;
    thread_local std::vector<double> padbuf, eobuf;
    padbuf.assign(Hp * Wp, 0.0);
    eobuf.assign(Ci * Hp * 2 * We, 0.0);
    double* pads = padbuf.data();
    double* eo = eobuf.data();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t ci = 0; ci < Ci; ++ci) {
        conv_pad_copy(pads, xp + (n * Ci + ci) * H * W, 1, H, W, 1);
        for (int64_t r = 0; r < Hp; ++r) {
          const double* __restrict row = pads + r * Wp;
          double* __restrict re = eo + (ci * Hp + r) * 2 * We;
          double* __restrict ro = re + We;
#pragma omp simd
          for (int64_t c = 0; c < We; ++c) {
            re[c] = row[2 * c];
            ro[c] = row[2 * c + 1];
          }
        }
      }
      for (int64_t co = 0; co < Co; ++co) {
        double* op = yp + (n * Co + co) * Ho * Wo;
        std::memset(op, 0, sizeof(double) * Ho * Wo);
        for (int64_t ci = 0; ci < Ci; ci += 2) {
          const bool pair = ci + 1 < Ci;
          const double* pa = eo + ci * Hp * 2 * We;
          const double* pb = pair ? pa + Hp * 2 * We : pa;
          const double* ka = wp + (co * Ci + ci) * 9;
          const double* kb = pair ? ka + 9 : ka;
          const double a00 = ka[0], a01 = ka[1], a02 = ka[2];
          const double a10 = ka[3], a11 = ka[4], a12 = ka[5];
          const double a20 = ka[6], a21 = ka[7], a22 = ka[8];
          const double b00 = pair ? kb[0] : 0, b01 = pair ? kb[1] : 0, b02 = pair ? kb[2] : 0;
          const double b10 = pair ? kb[3] : 0, b11 = pair ? kb[4] : 0, b12 = pair ? kb[5] : 0;
          const double b20 = pair ? kb[6] : 0, b21 = pair ? kb[7] : 0, b22 = pair ? kb[8] : 0;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const double* __restrict e0 = pa + (2 * oh) * 2 * We;
            const double* __restrict o0 = e0 + We;
            const double* __restrict e1 = e0 + 2 * We;
            const double* __restrict o1 = e1 + We;
            const double* __restrict e2 = e0 + 4 * We;
            const double* __restrict o2 = e2 + We;
            const double* __restrict f0 = pb + (2 * oh) * 2 * We;
            const double* __restrict g0 = f0 + We;
            const double* __restrict f1 = f0 + 2 * We;
            const double* __restrict g1 = f1 + We;
            const double* __restrict f2 = f0 + 4 * We;
            const double* __restrict g2 = f2 + We;
            double* __restrict orow = op + oh * Wo;
#pragma omp simd
            for (int64_t ow = 0; ow < Wo; ++ow)
              orow[ow] += a00 * e0[ow] + a01 * o0[ow] + a02 * e0[ow + 1] +
                          a10 * e1[ow] + a11 * o1[ow] + a12 * e1[ow + 1] +
                          a20 * e2[ow] + a21 * o2[ow] + a22 * e2[ow + 1] +
                          b00 * f0[ow] + b01 * g0[ow] + b02 * f0[ow + 1] +
                          b10 * f1[ow] + b11 * g1[ow] + b12 * f1[ow + 1] +
                          b20 * f2[ow] + b21 * g2[ow] + b22 * f2[ow + 1];
          }
        }
      }
    }
    return;
  }

  // generic path; inner loop stays contiguous over output columns for stride 1
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co) {
      double* op = yp + (n * Co + co) * Ho * Wo;
      std::memset(op, 0, sizeof(double) * Ho * Wo);
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const double* ip = xp + (n * Ci + ci) * H * W;
        const double* kwp = wp + (co * Ci + ci) * Kh * Kw;
        for (int64_t kh = 0; kh < Kh; ++kh)
          for (int64_t kw = 0; kw < Kw; ++kw) {
            const double wv = kwp[kh * Kw + kw];
            const int64_t ihoff = kh * dil - pad, iwoff = kw * dil - pad;
            // valid output ranges so that ih=oh*stride+ihoff stays in bounds
            int64_t oh0 = 0, oh1 = Ho;
            while (oh0 < Ho && oh0 * stride + ihoff < 0) ++oh0;
            while (oh1 > oh0 && (oh1 - 1) * stride + ihoff >= H) --oh1;
            int64_t ow0 = 0, ow1 = Wo;
            while (ow0 < Wo && ow0 * stride + iwoff < 0) ++ow0;
            while (ow1 > ow0 && (ow1 - 1) * stride + iwoff >= W) --ow1;
            for (int64_t oh = oh0; oh < oh1; ++oh) {
              const double* irow = ip + (oh * stride + ihoff) * W + iwoff;
              double* orow = op + oh * Wo;
              if (stride == 1) {
                for (int64_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[ow];
              } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[ow * stride];
              }
            }
          }
      }
    }
}

inline void Graph::conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw,
                                   int stride, int pad, int dil) {
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const int64_t Ho = gy.dim(2), Wo = gy.dim(3);
  const double* xp = x.data();
  const double* wp = w.data();
  const double* gyp = gy.data();
  double* gxp = gx.data();
  double* gwp = gw.data();

  if (Kh == 3 && Kw == 3 && stride == 1 && pad == dil) {
    const int64_t D = dil, D2 = 2 * D, Hp = H + 2 * D, Wp = W + 2 * D;
    // x planes carry an extra zeroed margin so the nine shifted dot products
    // below may read past plane bounds; those terms meet zeros in padded gy
    const int64_t P = Hp * Wp, M = D * Wp + D;
    thread_local std::vector<double> gybuf, xbuf;
    gybuf.assign(Co * P, 0.0);
    xbuf.assign(Ci * P + 2 * M, 0.0);
    double* gpad = gybuf.data();
    double* xpad = xbuf.data() + M;
    for (int64_t n = 0; n < N; ++n) {
      conv_pad_copy(gpad, gyp + n * Co * H * W, Co, H, W, D);
      conv_pad_copy(xpad, xp + n * Ci * H * W, Ci, H, W, D);
      // dL/dx is a correlation of padded gy with the 180-degree-flipped
      // kernel, so it reuses the paired nine-tap row structure of the forward
      for (int64_t ci = 0; ci < Ci; ++ci) {
        double* gip = gxp + (n * Ci + ci) * H * W;
        for (int64_t co = 0; co < Co; co += 2) {
          const bool pair = co + 1 < Co;
          const double* pa = gpad + co * Hp * Wp;
          const double* pb = pair ? pa + Hp * Wp : pa;
          const double* ka = wp + (co * Ci + ci) * 9;
          const double* kb = pair ? ka + Ci * 9 : ka;
          const double a00 = ka[8], a01 = ka[7], a02 = ka[6];
          const double a10 = ka[5], a11 = ka[4], a12 = ka[3];
          const double a20 = ka[2], a21 = ka[1], a22 = ka[0];
          const double b00 = pair ? kb[8] : 0, b01 = pair ? kb[7] : 0, b02 = pair ? kb[6] : 0;
          const double b10 = pair ? kb[5] : 0, b11 = pair ? kb[4] : 0, b12 = pair ? kb[3] : 0;
          const double b20 = pair ? kb[2] : 0, b21 = pair ? kb[1] : 0, b22 = pair ? kb[0] : 0;
          for (int64_t ih = 0; ih < H; ++ih) {
            const double* __restrict p0 = pa + ih * Wp;
            const double* __restrict p1 = p0 + D * Wp;
            const double* __restrict p2 = p0 + D2 * Wp;
            const double* __restrict q0 = pb + ih * Wp;
            const double* __restrict q1 = q0 + D * Wp;
            const double* __restrict q2 = q0 + D2 * Wp;
            double* __restrict grow = gip + ih * W;
#pragma omp simd
            for (int64_t iw = 0; iw < W; ++iw)
              grow[iw] += a00 * p0[iw] + a01 * p0[iw + D] + a02 * p0[iw + D2] +
                          a10 * p1[iw] + a11 * p1[iw + D] + a12 * p1[iw + D2] +
                          a20 * p2[iw] + a21 * p2[iw + D] + a22 * p2[iw + D2] +
                          b00 * q0[iw] + b01 * q0[iw + D] + b02 * q0[iw + D2] +
                          b10 * q1[iw] + b11 * q1[iw + D] + b12 * q1[iw + D2] +
                          b20 * q2[iw] + b21 * q2[iw + D] + b22 * q2[iw + D2];
          }
        }
      }
      // dL/dw: each tap is one flat dot between the padded gy plane and the
      // correspondingly shifted padded input plane, all nine in a single sweep
      const int64_t rD = D * Wp;
      for (int64_t co = 0; co < Co; ++co) {
        const double* gq = gpad + co * P;
        for (int64_t ci = 0; ci < Ci; ++ci)
          conv_gw_flat(gq, xpad + ci * P - rD - D, P, D, rD, gwp + (co * Ci + ci) * 9);
      }
    }
    return;
  }

  if (Kh == 3 && Kw == 3 && stride == 2 && dil == 1 && pad == 1 && H == 2 * Ho && W == 2 * Wo) {
    const int64_t Hp = H + 2, Wp = W + 2;
    // dL/dx: input pixels split into four parity classes, each fed by a fixed
    // subset of taps; quarters are accumulated densely over a bottom/right
    // zero-padded gy and interleaved into gx once per plane
    const int64_t Hg = Ho + 1, Wg = Wo + 1, Q = Ho * Wo;
    const int64_t P = Hp * Wp, M = Wp + 1;
    thread_local std::vector<double> gbuf, qbuf, ubuf, xbuf;
    gbuf.assign(Co * Hg * Wg, 0.0);
    qbuf.resize(4 * Q);
    ubuf.assign(Co * P, 0.0);
    xbuf.assign(Ci * P + 2 * M, 0.0);
    double* gpad = gbuf.data();
    double* upad = ubuf.data();
    double* xpad = xbuf.data() + M;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh)
          std::memcpy(gpad + (co * Hg + oh) * Wg, gyp + ((n * Co + co) * Ho + oh) * Wo,
                      sizeof(double) * Wo);
      for (int64_t ci = 0; ci < Ci; ++ci) {
        std::memset(qbuf.data(), 0, sizeof(double) * 4 * Q);
        double* qee = qbuf.data();
        double* qeo = qee + Q;
        double* qoe = qee + 2 * Q;
        double* qoo = qee + 3 * Q;
        for (int64_t co = 0; co < Co; co += 2) {
          const bool pair = co + 1 < Co;
          const double* pa = gpad + co * Hg * Wg;
          const double* pb = pair ? pa + Hg * Wg : pa;
          const double* ka = wp + (co * Ci + ci) * 9;
          const double* kb = pair ? ka + Ci * 9 : ka;
          const double a00 = ka[0], a01 = ka[1], a02 = ka[2];
          const double a10 = ka[3], a11 = ka[4], a12 = ka[5];
          const double a20 = ka[6], a21 = ka[7], a22 = ka[8];
          const double b00 = pair ? kb[0] : 0, b01 = pair ? kb[1] : 0, b02 = pair ? kb[2] : 0;
          const double b10 = pair ? kb[3] : 0, b11 = pair ? kb[4] : 0, b12 = pair ? kb[5] : 0;
          const double b20 = pair ? kb[6] : 0, b21 = pair ? kb[7] : 0, b22 = pair ? kb[8] : 0;
          for (int64_t r = 0; r < Ho; ++r) {
            const double* __restrict g0 = pa + r * Wg;
            const double* __restrict g1 = g0 + Wg;
            const double* __restrict h0 = pb + r * Wg;
            const double* __restrict h1 = h0 + Wg;
            double* __restrict ee = qee + r * Wo;
            double* __restrict eo = qeo + r * Wo;
            double* __restrict oe = qoe + r * Wo;
            double* __restrict oo = qoo + r * Wo;
#pragma omp simd
            for (int64_t c = 0; c < Wo; ++c) {
              ee[c] += a11 * g0[c] + b11 * h0[c];
              eo[c] += a10 * g0[c + 1] + a12 * g0[c] + b10 * h0[c + 1] + b12 * h0[c];
              oe[c] += a01 * g1[c] + a21 * g0[c] + b01 * h1[c] + b21 * h0[c];
              oo[c] += a00 * g1[c + 1] + a02 * g1[c] + a20 * g0[c + 1] + a22 * g0[c] +
                       b00 * h1[c + 1] + b02 * h1[c] + b20 * h0[c + 1] + b22 * h0[c];
            }
          }
        }
        double* gip = gxp + (n * Ci + ci) * H * W;
        for (int64_t r = 0; r < Ho; ++r) {
          double* __restrict grow0 = gip + (2 * r) * W;
          double* __restrict grow1 = grow0 + W;
          const double* __restrict ee = qee + r * Wo;
          const double* __restrict eo = qeo + r * Wo;
          const double* __restrict oe = qoe + r * Wo;
          const double* __restrict oo = qoo + r * Wo;
#pragma omp simd
          for (int64_t c = 0; c < Wo; ++c) {
            grow0[2 * c] += ee[c];
            grow0[2 * c + 1] += eo[c];
          }
#pragma omp simd
          for (int64_t c = 0; c < Wo; ++c) {
            grow1[2 * c] += oe[c];
            grow1[2 * c + 1] += oo[c];
          }
        }
      }
      // dL/dw: gy scattered onto a zero-upsampled padded canvas turns each tap
      // into a flat dot against the padded input (structural zeros absorb the
      // off-stride terms), nine taps per sweep
      conv_pad_copy(xpad, xp + n * Ci * H * W, Ci, H, W, 1);
      for (int64_t co = 0; co < Co; ++co) {
        double* up = upad + co * P;
        const double* gop = gyp + (n * Co + co) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          double* ur = up + (2 * oh + 1) * Wp + 1;
          const double* gr = gop + oh * Wo;
          for (int64_t ow = 0; ow < Wo; ++ow) ur[2 * ow] = gr[ow];
        }
      }
      for (int64_t co = 0; co < Co; ++co) {
        const double* uq = upad + co * P;
        for (int64_t ci = 0; ci < Ci; ++ci)
          conv_gw_flat(uq, xpad + ci * P - Wp - 1, P, 1, Wp, gwp + (co * Ci + ci) * 9);
      }
    }
    return;
  }

  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co) {
      const double* gop = gyp + (n * Co + co) * Ho * Wo;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const double* ip = xp + (n * Ci + ci) * H * W;
        double* gip = gxp + (n * Ci + ci) * H * W;
        const double* kwp = wp + (co * Ci + ci) * Kh * Kw;
        double* gkwp = gwp + (co * Ci + ci) * Kh * Kw;
        for (int64_t kh = 0; kh < Kh; ++kh)
          for (int64_t kw = 0; kw < Kw; ++kw) {
            const double wv = kwp[kh * Kw + kw];
            const int64_t ihoff = kh * dil - pad, iwoff = kw * dil - pad;
            int64_t oh0 = 0, oh1 = Ho;
            while (oh0 < Ho && oh0 * stride + ihoff < 0) ++oh0;
            while (oh1 > oh0 && (oh1 - 1) * stride + ihoff >= H) --oh1;
            int64_t ow0 = 0, ow1 = Wo;
            while (ow0 < Wo && ow0 * stride + iwoff < 0) ++ow0;
            while (ow1 > ow0 && (ow1 - 1) * stride + iwoff >= W) --ow1;
            double wacc = 0;
            for (int64_t oh = oh0; oh < oh1; ++oh) {
              const double* irow = ip + (oh * stride + ihoff) * W + iwoff;
              double* girow = gip + (oh * stride + ihoff) * W + iwoff;
              const double* gorow = gop + oh * Wo;
              if (stride == 1) {
                for (int64_t ow = ow0; ow < ow1; ++ow) {
                  wacc += irow[ow] * gorow[ow];
                  girow[ow] += wv * gorow[ow];
                }
              } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) {
                  wacc += irow[ow * stride] * gorow[ow];
                  girow[ow * stride] += wv * gorow[ow];
                }
              }
            }
            gkwp[kh * Kw + kw] += wacc;
          }
      }
    }
}

inline void Graph::eval_node(int id, const Bindings& bindings, std::vector<Tensor>& v) const {
  const Node& n = nodes_[id];
  switch (n.op) {
    case Op::kLeaf: {
      auto it = bindings.find(id);
      if (it == bindings.end() || it->second == nullptr)
        throw std::runtime_error("forward: unbound " + describe(id));
      if (it->second->shape() != n.shape)
        throw std::runtime_error("forward: " + describe(id) + " bound with shape " +
                                 shape_str(it->second->shape()) + ", declared " + shape_str(n.shape));
      v[id] = *it->second;
      return;
    }
    case Op::kConst:
      v[id] = n.cval;
      return;
    default:
      break;
  }

  const Tensor& a = v[n.in[0]];
  // reuse the buffer left from a previous forward pass when the shape matches;
  // ops below either overwrite every element or zero explicitly
  Tensor out;
  const Shape& want = n.shape;
  if (v[id].numel() > 0 && v[id].shape() == want) out = std::move(v[id]);
  else out = Tensor(want.empty() ? Shape{} : want);
  switch (n.op) {
    case Op::kAdd: {
      const Tensor& b = v[n.in[1]];
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::kSub: {
      const Tensor& b = v[n.in[1]];
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
      break;
    }
    case Op::kMul: {
      const Tensor& b = v[n.in[1]];
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::kDiv: {
      const Tensor& b = v[n.in[1]];
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] / b[i];
      break;
    }
    case Op::kAddScalar:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] + n.a;
      break;
    case Op::kMulScalar:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] * n.a;
      break;
    case Op::kMatmul: {
      const Tensor& b = v[n.in[1]];
      const int64_t I = a.dim(0), K = a.dim(1), J = b.dim(1);
      std::memset(out.data(), 0, sizeof(double) * out.numel());
      for (int64_t i = 0; i < I; ++i)
        for (int64_t k = 0; k < K; ++k) {
          const double av = a[i * K + k];
          const double* brow = b.data() + k * J;
          double* orow = out.data() + i * J;
          for (int64_t j = 0; j < J; ++j) orow[j] += av * brow[j];
        }
      break;
    }
    case Op::kAddBiasChan: {
      const Tensor& b = v[n.in[1]];
      const int64_t N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
      for (int64_t nn = 0; nn < N; ++nn)
        for (int64_t c = 0; c < C; ++c) {
          const double bv = b[c];
          const double* ap = a.data() + (nn * C + c) * HW;
          double* op = out.data() + (nn * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) op[i] = ap[i] + bv;
        }
      break;
    }
    case Op::kAddBiasRows: {
      const Tensor& b = v[n.in[1]];
      const int64_t N = a.dim(0), K = a.dim(1);
      for (int64_t nn = 0; nn < N; ++nn)
        for (int64_t k = 0; k < K; ++k) out[nn * K + k] = a[nn * K + k] + b[k];
      break;
    }
    case Op::kConv2d:
      conv2d_forward(a, v[n.in[1]], out, n.stride, n.pad, n.dilation);
      break;
    case Op::kRelu:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] > 0 ? a[i] : 0.0;
      break;
    case Op::kSigmoid:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = sigmoid_scalar(a[i]);
      break;
    case Op::kSoftplus:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = stable_softplus(a[i]);
      break;
    case Op::kLog:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a[i]);
      break;
    case Op::kExp:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a[i]);
      break;
    case Op::kClamp:
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(a[i], n.a), n.b);
      break;
    case Op::kUpsample2x: {
      const int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* ip = a.data() + nc * H * W;
        double* op = out.data() + nc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            const double x = ip[h * W + w];
            double* o0 = op + (2 * h) * 2 * W + 2 * w;
            double* o1 = op + (2 * h + 1) * 2 * W + 2 * w;
            o0[0] = x;
            o0[1] = x;
            o1[0] = x;
            o1[1] = x;
          }
      }
      break;
    }
    case Op::kReduceMean: {
      if (n.axes.empty()) {
        double s = 0;
        for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
        out[0] = s / static_cast<double>(a.numel());
      } else {
        reduce_mean_fwd(a, n.axes, out);
      }
      break;
    }
    case Op::kReduceSum: {
      double s = 0;
      for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
      out[0] = s;
      break;
    }
    case Op::kConcatChan: {
      const int64_t N = n.shape[0], HW = n.shape[2] * n.shape[3], Cout = n.shape[1];
      int64_t coff = 0;
      for (int src : n.in) {
        const Tensor& t = v[src];
        const int64_t C = t.dim(1);
        for (int64_t nn = 0; nn < N; ++nn)
          std::memcpy(out.data() + (nn * Cout + coff) * HW, t.data() + nn * C * HW,
                      sizeof(double) * C * HW);
        coff += C;
      }
      break;
    }
    case Op::kReshape:
      std::memcpy(out.data(), a.data(), sizeof(double) * a.numel());
      break;
    case Op::kHwcToChw: {
      const int64_t H = a.dim(0), W = a.dim(1), C = a.dim(2);
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c) out[(c * H + h) * W + w] = a[(h * W + w) * C + c];
      break;
    }
    case Op::kCrossEntropyLogits: {
      const int64_t N = a.dim(0), K = a.dim(1);
      double total = 0;
      for (int64_t i = 0; i < N; ++i) {
        const double* row = a.data() + i * K;
        double m = row[0];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double lse = 0;
        for (int64_t k = 0; k < K; ++k) lse += std::exp(row[k] - m);
        total += m + std::log(lse) - row[n.labels[i]];
      }
      out[0] = total / static_cast<double>(N);
      break;
    }
    case Op::kBceWithLogits: {
      const Tensor& t = v[n.in[1]];
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) total += stable_softplus(a[i]) - a[i] * t[i];
      out[0] = total / static_cast<double>(a.numel());
      break;
    }
    case Op::kGaussianLogQ: {
      const Tensor& rho = v[n.in[1]];
      const Tensor& phi = v[n.in[2]];
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) {
        const double sig = stable_softplus(rho[i]);
        const double z = (phi[i] - a[i]) / sig;
        total += -std::log(sig) - 0.5 * z * z;
      }
      out[0] = total - 0.5 * std::log(2.0 * M_PI) * static_cast<double>(a.numel());
      break;
    }
    case Op::kLogPriorIso: {
      const double sp = n.a;
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) total += a[i] * a[i];
      out[0] = -total / (2.0 * sp * sp) -
               (std::log(sp) + 0.5 * std::log(2.0 * M_PI)) * static_cast<double>(a.numel());
      break;
    }
    case Op::kLogPriorCauchy: {
      const double k = n.a;
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) total += std::log1p((a[i] / k) * (a[i] / k));
      out[0] = -total - std::log(M_PI * k) * static_cast<double>(a.numel());
      break;
    }
    case Op::kLogPriorMixture: {
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) total += log_mixture_density(a[i], n.a, n.b, n.c);
      out[0] = total;
      break;
    }
    case Op::kKlIsoClosed: {
      const Tensor& rho = v[n.in[1]];
      const double sp = n.a;
      double total = 0;
      for (int64_t i = 0; i < a.numel(); ++i) {
        const double sig = stable_softplus(rho[i]);
        total += std::log(sp / sig) + (sig * sig + a[i] * a[i]) / (2.0 * sp * sp) - 0.5;
      }
      out[0] = total;
      break;
    }
    default:
      throw std::runtime_error("forward: unhandled op in " + describe(id));
  }
  v[id] = std::move(out);
}

// log( beta * N(x|0,s0^2) + (1-beta) * N(x|0,s1^2) ), log-sum-exp form.
// beta of exactly 0 or 1 collapses to the surviving component with no
// floating-point residue from the dead branch.
inline double log_mixture_density(double x, double s0, double s1, double beta) {
  const double lg0 = -0.5 * (x / s0) * (x / s0) - std::log(s0) - 0.5 * std::log(2.0 * M_PI);
  const double lg1 = -0.5 * (x / s1) * (x / s1) - std::log(s1) - 0.5 * std::log(2.0 * M_PI);
  if (beta >= 1.0) return lg0;
  if (beta <= 0.0) return lg1;
  const double l0 = std::log(beta) + lg0;
  const double l1 = std::log1p(-beta) + lg1;
  const double m = std::max(l0, l1);
  return m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
}

inline void reduce_mean_fwd(const Tensor& a, const std::vector<int>& axes, Tensor& out) {
  const Shape& s = a.shape();
  std::memset(out.data(), 0, sizeof(double) * out.numel());
  std::vector<bool> reduced(s.size(), false);
  int64_t count = 1;
  for (int ax : axes) {
    reduced[ax] = true;
    count *= s[ax];
  }
  // iterate all elements, map to output index by dropping reduced axes
  std::vector<int64_t> idx(s.size(), 0);
  for (int64_t flat = 0; flat < a.numel(); ++flat) {
    int64_t oflat = 0;
    for (size_t d = 0; d < s.size(); ++d)
      if (!reduced[d]) oflat = oflat * s[d] + idx[d];
    out[oflat] += a[flat];
    for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
      if (++idx[d] < s[d]) break;
      idx[d] = 0;
    }
  }
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<double>(count);
}

inline void Graph::backprop_node(int id, const std::vector<Tensor>& v, std::vector<Tensor>& g,
                                 std::vector<char>& reached) const {
  const Node& n = nodes_[id];
  if (n.op == Op::kLeaf || n.op == Op::kConst) return;
  const Tensor& go = g[id];
  // first touch in this pass allocates or zeroes the buffer; later touches
  // accumulate
  auto grad_of = [&](int src) -> Tensor& {
    Tensor& t = g[src];
    const Shape& want = nodes_[src].shape;
    if (t.numel() == 0 || t.shape() != want)
      t = Tensor(want.empty() ? Shape{} : want);
    else if (!reached[src])
      std::memset(t.data(), 0, sizeof(double) * t.numel());
    reached[src] = 1;
    return t;
  };

  switch (n.op) {
    case Op::kAdd: {
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      for (int64_t i = 0; i < go.numel(); ++i) {
        ga[i] += go[i];
        gb[i] += go[i];
      }
      break;
    }
    case Op::kSub: {
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      for (int64_t i = 0; i < go.numel(); ++i) {
        ga[i] += go[i];
        gb[i] -= go[i];
      }
      break;
    }
    case Op::kMul: {
      const Tensor& a = v[n.in[0]];
      const Tensor& b = v[n.in[1]];
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      for (int64_t i = 0; i < go.numel(); ++i) {
        ga[i] += go[i] * b[i];
        gb[i] += go[i] * a[i];
      }
      break;
    }
    case Op::kDiv: {
      const Tensor& a = v[n.in[0]];
      const Tensor& b = v[n.in[1]];
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      for (int64_t i = 0; i < go.numel(); ++i) {
        ga[i] += go[i] / b[i];
        gb[i] -= go[i] * a[i] / (b[i] * b[i]);
      }
      break;
    }
    case Op::kAddScalar: {
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      break;
    }
    case Op::kMulScalar: {
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * n.a;
      break;
    }
    case Op::kMatmul: {
      const Tensor& a = v[n.in[0]];
      const Tensor& b = v[n.in[1]];
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      const int64_t I = a.dim(0), K = a.dim(1), J = b.dim(1);
      for (int64_t i = 0; i < I; ++i)
        for (int64_t k = 0; k < K; ++k) {
          const double* brow = b.data() + k * J;
          const double* gorow = go.data() + i * J;
          double acc = 0;
          for (int64_t j = 0; j < J; ++j) acc += gorow[j] * brow[j];
          ga[i * K + k] += acc;
        }
      for (int64_t k = 0; k < K; ++k)
        for (int64_t i = 0; i < I; ++i) {
          const double av = a[i * K + k];
          const double* gorow = go.data() + i * J;
          double* gbrow = gb.data() + k * J;
          for (int64_t j = 0; j < J; ++j) gbrow[j] += av * gorow[j];
        }
      break;
    }
    case Op::kAddBiasChan: {
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      const int64_t N = n.shape[0], C = n.shape[1], HW = n.shape[2] * n.shape[3];
      for (int64_t nn = 0; nn < N; ++nn)
        for (int64_t c = 0; c < C; ++c) {
          const double* gop = go.data() + (nn * C + c) * HW;
          double* gap = ga.data() + (nn * C + c) * HW;
          double acc = 0;
          for (int64_t i = 0; i < HW; ++i) {
            gap[i] += gop[i];
            acc += gop[i];
          }
          gb[c] += acc;
        }
      break;
    }
    case Op::kAddBiasRows: {
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gb = grad_of(n.in[1]);
      const int64_t N = n.shape[0], K = n.shape[1];
      for (int64_t nn = 0; nn < N; ++nn)
        for (int64_t k = 0; k < K; ++k) {
          ga[nn * K + k] += go[nn * K + k];
          gb[k] += go[nn * K + k];
        }
      break;
    }
    case Op::kConv2d: {
      Tensor& gx = grad_of(n.in[0]);
      Tensor& gw = grad_of(n.in[1]);
      conv2d_backward(v[n.in[0]], v[n.in[1]], go, gx, gw, n.stride, n.pad, n.dilation);
      break;
    }
    case Op::kRelu: {
      const Tensor& a = v[n.in[0]];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (a[i] > 0) ga[i] += go[i];
      break;
    }
    case Op::kSigmoid: {
      const Tensor& y = v[id];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kSoftplus: {
      const Tensor& a = v[n.in[0]];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * sigmoid_scalar(a[i]);
      break;
    }
    case Op::kLog: {
      const Tensor& a = v[n.in[0]];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / a[i];
      break;
    }
    case Op::kExp: {
      const Tensor& y = v[id];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i];
      break;
    }
    case Op::kClamp: {
      const Tensor& a = v[n.in[0]];
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (a[i] >= n.a && a[i] <= n.b) ga[i] += go[i];
      break;
    }
    case Op::kUpsample2x: {
      Tensor& ga = grad_of(n.in[0]);
      const Shape& is = nodes_[n.in[0]].shape;
      const int64_t NC = is[0] * is[1], H = is[2], W = is[3];
      for (int64_t nc = 0; nc < NC; ++nc) {
        double* gip = ga.data() + nc * H * W;
        const double* gop = go.data() + nc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w)
            gip[h * W + w] += gop[(2 * h) * 2 * W + 2 * w] + gop[(2 * h) * 2 * W + 2 * w + 1] +
                              gop[(2 * h + 1) * 2 * W + 2 * w] + gop[(2 * h + 1) * 2 * W + 2 * w + 1];
      }
      break;
    }
    case Op::kReduceMean: {
      Tensor& ga = grad_of(n.in[0]);
      const Shape& s = nodes_[n.in[0]].shape;
      if (n.axes.empty()) {
        const double gv = go[0] / static_cast<double>(ga.numel());
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
      } else {
        std::vector<bool> reduced(s.size(), false);
        int64_t count = 1;
        for (int ax : n.axes) {
          reduced[ax] = true;
          count *= s[ax];
        }
        std::vector<int64_t> idx(s.size(), 0);
        for (int64_t flat = 0; flat < ga.numel(); ++flat) {
          int64_t oflat = 0;
          for (size_t d = 0; d < s.size(); ++d)
            if (!reduced[d]) oflat = oflat * s[d] + idx[d];
          ga[flat] += go[oflat] / static_cast<double>(count);
          for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
            if (++idx[d] < s[d]) break;
            idx[d] = 0;
          }
        }
      }
      break;
    }
    case Op::kReduceSum: {
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[0];
      break;
    }
    case Op::kConcatChan: {
      const int64_t N = n.shape[0], HW = n.shape[2] * n.shape[3], Cout = n.shape[1];
      int64_t coff = 0;
      for (int src : n.in) {
        Tensor& gs = grad_of(src);
        const int64_t C = nodes_[src].shape[1];
        for (int64_t nn = 0; nn < N; ++nn) {
          const double* gop = go.data() + (nn * Cout + coff) * HW;
          double* gsp = gs.data() + nn * C * HW;
          for (int64_t i = 0; i < C * HW; ++i) gsp[i] += gop[i];
        }
        coff += C;
      }
      break;
    }
    case Op::kReshape: {
      Tensor& ga = grad_of(n.in[0]);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      break;
    }
    case Op::kHwcToChw: {
      Tensor& ga = grad_of(n.in[0]);
      const Shape& is = nodes_[n.in[0]].shape;
      const int64_t H = is[0], W = is[1], C = is[2];
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c) ga[(h * W + w) * C + c] += go[(c * H + h) * W + w];
      break;
    }
    case Op::kCrossEntropyLogits: {
      const Tensor& a = v[n.in[0]];
      Tensor& ga = grad_of(n.in[0]);
      const int64_t N = a.dim(0), K = a.dim(1);
      const double gv = go[0] / static_cast<double>(N);
      for (int64_t i = 0; i < N; ++i) {
        const double* row = a.data() + i * K;
        double m = row[0];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double lse = 0;
        for (int64_t k = 0; k < K; ++k) lse += std::exp(row[k] - m);
        double* grow = ga.data() + i * K;
        for (int64_t k = 0; k < K; ++k) {
          const double p = std::exp(row[k] - m) / lse;
          grow[k] += gv * (p - (k == n.labels[i] ? 1.0 : 0.0));
        }
      }
      break;
    }
    case Op::kBceWithLogits: {
      const Tensor& a = v[n.in[0]];
      const Tensor& t = v[n.in[1]];
      Tensor& ga = grad_of(n.in[0]);
      Tensor& gt = grad_of(n.in[1]);
      const double gv = go[0] / static_cast<double>(a.numel());
      for (int64_t i = 0; i < a.numel(); ++i) {
        ga[i] += gv * (sigmoid_scalar(a[i]) - t[i]);
        gt[i] += gv * (-a[i]);
      }
      break;
    }
    case Op::kGaussianLogQ: {
      const Tensor& mu = v[n.in[0]];
      const Tensor& rho = v[n.in[1]];
      const Tensor& phi = v[n.in[2]];
      Tensor& gmu = grad_of(n.in[0]);
      Tensor& grho = grad_of(n.in[1]);
      Tensor& gphi = grad_of(n.in[2]);
      const double gv = go[0];
      for (int64_t i = 0; i < mu.numel(); ++i) {
        const double sig = stable_softplus(rho[i]);
        const double d = phi[i] - mu[i];
        gphi[i] += gv * (-d / (sig * sig));
        gmu[i] += gv * (d / (sig * sig));
        grho[i] += gv * (-1.0 / sig + d * d / (sig * sig * sig)) * sigmoid_scalar(rho[i]);
      }
      break;
    }
    case Op::kLogPriorIso: {
      const Tensor& phi = v[n.in[0]];
      Tensor& gphi = grad_of(n.in[0]);
      const double gv = go[0], sp2 = n.a * n.a;
      for (int64_t i = 0; i < phi.numel(); ++i) gphi[i] += gv * (-phi[i] / sp2);
      break;
    }
    case Op::kLogPriorCauchy: {
      const Tensor& phi = v[n.in[0]];
      Tensor& gphi = grad_of(n.in[0]);
      const double gv = go[0], k2 = n.a * n.a;
      for (int64_t i = 0; i < phi.numel(); ++i)
        gphi[i] += gv * (-2.0 * phi[i] / (k2 + phi[i] * phi[i]));
      break;
    }
    case Op::kLogPriorMixture: {
      const Tensor& phi = v[n.in[0]];
      Tensor& gphi = grad_of(n.in[0]);
      const double gv = go[0], s0 = n.a, s1 = n.b, beta = n.c;
      for (int64_t i = 0; i < phi.numel(); ++i) {
        const double x = phi[i];
        const double lp = log_mixture_density(x, s0, s1, beta);
        double d = 0;
        if (beta > 0.0) {
          const double lg0 = -0.5 * (x / s0) * (x / s0) - std::log(s0) - 0.5 * std::log(2.0 * M_PI);
          const double r0 = std::exp((beta >= 1.0 ? lg0 : std::log(beta) + lg0) - lp);
          d += r0 * (-x / (s0 * s0));
        }
        if (beta < 1.0) {
          const double lg1 = -0.5 * (x / s1) * (x / s1) - std::log(s1) - 0.5 * std::log(2.0 * M_PI);
          const double r1 = std::exp((beta <= 0.0 ? lg1 : std::log1p(-beta) + lg1) - lp);
          d += r1 * (-x / (s1 * s1));
        }
        gphi[i] += gv * d;
      }
      break;
    }
    case Op::kKlIsoClosed: {
      const Tensor& mu = v[n.in[0]];
      const Tensor& rho = v[n.in[1]];
      Tensor& gmu = grad_of(n.in[0]);
      Tensor& grho = grad_of(n.in[1]);
      const double gv = go[0], sp2 = n.a * n.a;
      for (int64_t i = 0; i < mu.numel(); ++i) {
        const double sig = stable_softplus(rho[i]);
        gmu[i] += gv * (mu[i] / sp2);
        grho[i] += gv * (-1.0 / sig + sig / sp2) * sigmoid_scalar(rho[i]);
      }
      break;
    }
    default:
      throw std::runtime_error("backward: unhandled op in " + describe(id));
  }
}

}  // namespace duet
