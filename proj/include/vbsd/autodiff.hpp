#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vbsd/error.hpp"
#include "vbsd/tensor.hpp"

// Reverse-mode autodiff over dense f64 tensors. Eager evaluation: building a
// node computes its value immediately; backward() replays the tape in reverse
// creation order with a fixed accumulation order, so gradients are
// bit-reproducible and a second backward() on the same tape yields identical
// bytes. Every learned quantity in the repo flows through this tape.
namespace vbsd::ad {

enum class Op : std::uint8_t {
  Leaf,
  Const,
  StopGrad,
  Add,
  Sub,
  Mul,
  MatMul,
  MatVec,
  Exp,
  Log,
  Tanh,
  Neg,
  Square,
  Sigmoid,
  Softplus,
  LeakyRelu,
  Scale,
  AddScalar,
  Clamp,
  SoftmaxLast,
  LogSoftmaxLast,
  LayerNorm,
  SumAll,
  MeanAll,
  Concat,
  SliceLast,
  Reshape,
  GaussianLogProb,
  BernoulliLogProb,
  Conv2d,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::StopGrad: return "stop_grad";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::MatVec: return "matvec";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Neg: return "neg";
    case Op::Square: return "square";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Clamp: return "clamp";
    case Op::SoftmaxLast: return "softmax";
    case Op::LogSoftmaxLast: return "log_softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::Concat: return "concat";
    case Op::SliceLast: return "slice";
    case Op::Reshape: return "reshape";
    case Op::GaussianLogProb: return "gaussian_log_prob";
    case Op::BernoulliLogProb: return "bernoulli_log_prob";
    case Op::Conv2d: return "conv2d";
  }
  return "?";
}

class Tape;

struct Value {
  Tape* tape = nullptr;
  int node = -1;
  bool valid() const { return tape != nullptr && node >= 0; }
};

class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    int p0 = -1, p1 = -1, p2 = -1;
    int extra_begin = 0, extra_count = 0;  // Concat parents beyond p0..p2
    double a0 = 0, a1 = 0;                 // op immediates (scale, clamp bounds, eps, ...)
    Tensor val;                            // owned value; unused when ext != nullptr
    const Tensor* ext = nullptr;           // external leaf storage (parameters)
  };

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  // Leaf referencing external storage (no copy). Caller keeps `t` alive and
  // unmodified until the tape is cleared; gradients are harvested via grad().
  // Repeated binds of the same tensor alias to one node, so a parameter used
  // at several graph sites accumulates its whole gradient in one place.
  Value leaf(const Tensor& t) {
    auto it = leaf_cache_.find(&t);
    if (it != leaf_cache_.end()) return Value{this, it->second};
    Node n;
    n.op = Op::Leaf;
    n.ext = &t;
    Value v = push(std::move(n));
    leaf_cache_[&t] = v.node;
    return v;
  }

  // Whether `t` has been bound as a leaf on this tape (then leaf(t) returns
  // the existing node and is safe to call even after backward()).
  bool has_leaf(const Tensor& t) const { return leaf_cache_.contains(&t); }

  Value input(Tensor t) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(t);
    return push(std::move(n));
  }

  Value constant(Tensor t) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(t);
    return push(std::move(n));
  }

  const Tensor& value(Value v) const {
    const Node& n = nodes_[check(v)];
    return n.ext ? *n.ext : n.val;
  }

  // Gradient of the last backward() seed w.r.t. node v (zeros if unreached).
  const Tensor& grad(Value v) const {
    require(!grads_.empty(), "Tape::grad: backward() has not run");
    int i = check(v);
    require(i < int(grads_.size()), "Tape::grad: node was created after backward()");
    return grads_[i];
  }

  std::size_t size() const { return nodes_.size(); }
  bool check_finite() const { return check_finite_; }

  // Drops all nodes but keeps buffer capacity; external leaf pointers from
  // previous use are forgotten. Used to recycle tapes in hot loops.
  void clear() {
    nodes_.clear();
    extra_parents_.clear();
    grads_.clear();
    leaf_cache_.clear();
  }

  // Reverse sweep from a scalar seed node; d(seed)/d(seed) = 1. Resets all
  // gradient buffers first, so calling twice gives bit-identical results.
  void backward(Value seed) {
    int s = check(seed);
    require(value(seed).size() == 1, "backward: seed node " + std::to_string(s) + " is not scalar");
    grads_.assign(nodes_.size(), Tensor());
    for (std::size_t i = 0; i < nodes_.size(); ++i) grads_[i] = Tensor(shape_of(int(i)));
    grads_[s][0] = 1.0;
    for (int i = s; i >= 0; --i) backprop_node(i);
  }

  // --- graph construction -------------------------------------------------

  Value add(Value a, Value b) { return binary_same_shape(Op::Add, a, b); }
  Value sub(Value a, Value b) { return binary_same_shape(Op::Sub, a, b); }
  Value mul(Value a, Value b) { return binary_same_shape(Op::Mul, a, b); }

  Value matmul(Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() == 2 && tb.rank() == 1) return matvec(a, b);
    require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0),
            shape_err("matmul", a, b));
    Tensor out({ta.dim(0), tb.dim(1)});
    for (std::size_t i = 0; i < ta.dim(0); ++i)
      for (std::size_t k = 0; k < ta.dim(1); ++k) {
        double av = ta.at(i, k);
        for (std::size_t j = 0; j < tb.dim(1); ++j) out.at(i, j) += av * tb.at(k, j);
      }
    return push_op(Op::MatMul, std::move(out), a, b);
  }

  Value matvec(Value a, Value x) {
    const Tensor& ta = value(a);
    const Tensor& tx = value(x);
    require(ta.rank() == 2 && tx.rank() == 1 && ta.dim(1) == tx.dim(0),
            shape_err("matvec", a, x));
    Tensor out({ta.dim(0)});
    for (std::size_t i = 0; i < ta.dim(0); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < ta.dim(1); ++k) s += ta.at(i, k) * tx[k];
      out[i] = s;
    }
    return push_op(Op::MatVec, std::move(out), a, x);
  }

  Value exp(Value a) { return map(Op::Exp, a, [](double x) { return std::exp(x); }); }
  Value log(Value a) { return map(Op::Log, a, [](double x) { return std::log(x); }); }
  Value tanh(Value a) { return map(Op::Tanh, a, [](double x) { return std::tanh(x); }); }
  Value neg(Value a) { return map(Op::Neg, a, [](double x) { return -x; }); }
  Value square(Value a) { return map(Op::Square, a, [](double x) { return x * x; }); }

  Value sigmoid(Value a) {
    return map(Op::Sigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  }

  Value softplus(Value a) {
    return map(Op::Softplus, a, [](double x) {
      return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    });
  }

  Value leaky_relu(Value a, double alpha = 0.01) {
    Value v = map(Op::LeakyRelu, a, [alpha](double x) { return x > 0 ? x : alpha * x; });
    nodes_[v.node].a0 = alpha;
    return v;
  }

  Value scale(Value a, double c) {
    Value v = map(Op::Scale, a, [c](double x) { return c * x; });
    nodes_[v.node].a0 = c;
    return v;
  }

  Value add_scalar(Value a, double c) {
    Value v = map(Op::AddScalar, a, [c](double x) { return x + c; });
    nodes_[v.node].a0 = c;
    return v;
  }

  // Gradient is passed only strictly inside (lo, hi); clamped entries get 0.
  Value clamp(Value a, double lo, double hi) {
    require(lo < hi, "clamp: lo must be < hi");
    Value v = map(Op::Clamp, a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); });
    nodes_[v.node].a0 = lo;
    nodes_[v.node].a1 = hi;
    return v;
  }

  Value stop_grad(Value a) {
    Tensor out = value(a);
    return push_op(Op::StopGrad, std::move(out), a);
  }

  // Softmax over the last axis (rank 1, or rank 2 row-wise), with
  // max-subtraction for stability.
  Value softmax(Value a) { return softmax_impl(a, false); }
  Value log_softmax(Value a) { return softmax_impl(a, true); }

  // Pre-affine normalization: (x - mean) / sqrt(var + eps) over a rank-1 input.
  Value layer_norm(Value a, double eps = 1e-5) {
    const Tensor& ta = value(a);
    require(ta.rank() == 1, "layer_norm: rank-1 input required, got " +
                                Tensor::shape_str(ta.shape()));
    std::size_t n = ta.size();
    double m = 0;
    for (double x : ta.data()) m += x;
    m /= double(n);
    double var = 0;
    for (double x : ta.data()) var += (x - m) * (x - m);
    var /= double(n);
    double inv = 1.0 / std::sqrt(var + eps);
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out[i] = (ta[i] - m) * inv;
    Value v = push_op(Op::LayerNorm, std::move(out), a);
    nodes_[v.node].a0 = eps;
    nodes_[v.node].a1 = inv;  // cached for backward
    return v;
  }

  Value sum(Value a) {
    double s = 0;
    for (double x : value(a).data()) s += x;
    return push_op(Op::SumAll, Tensor::scalar(s), a);
  }

  Value mean(Value a) {
    require(value(a).size() > 0, "mean: empty tensor");
    double s = 0;
    for (double x : value(a).data()) s += x;
    return push_op(Op::MeanAll, Tensor::scalar(s / double(value(a).size())), a);
  }

  Value concat(std::span<const Value> parts) {
    require(!parts.empty(), "concat: no inputs");
    std::size_t n = 0;
    for (Value p : parts) {
      require(value(p).rank() == 1, "concat: rank-1 inputs required");
      n += value(p).size();
    }
    Tensor out({n});
    std::size_t k = 0;
    for (Value p : parts)
      for (double x : value(p).data()) out[k++] = x;
    Node node;
    node.op = Op::Concat;
    node.val = std::move(out);
    node.extra_begin = int(extra_parents_.size());
    node.extra_count = int(parts.size());
    for (Value p : parts) extra_parents_.push_back(check(p));
    return push(std::move(node));
  }

  Value concat(std::initializer_list<Value> parts) {
    return concat(std::span<const Value>(parts.begin(), parts.size()));
  }

  // Elements [lo, hi) of a rank-1 tensor.
  Value slice(Value a, std::size_t lo, std::size_t hi) {
    const Tensor& ta = value(a);
    require(ta.rank() == 1, "slice: rank-1 input required");
    require(lo < hi && hi <= ta.size(),
            "slice: bounds [" + std::to_string(lo) + "," + std::to_string(hi) +
                ") out of range for " + Tensor::shape_str(ta.shape()));
    Tensor out({hi - lo});
    for (std::size_t i = lo; i < hi; ++i) out[i - lo] = ta[i];
    Value v = push_op(Op::SliceLast, std::move(out), a);
    nodes_[v.node].a0 = double(lo);
    nodes_[v.node].a1 = double(hi);
    return v;
  }

  Value reshape(Value a, std::vector<std::size_t> shape) {
    const Tensor& ta = value(a);
    require(Tensor::count(shape) == ta.size(),
            "reshape: element count mismatch " + Tensor::shape_str(ta.shape()) + " -> " +
                Tensor::shape_str(shape));
    Tensor out(std::move(shape), std::vector<double>(ta.data().begin(), ta.data().end()));
    return push_op(Op::Reshape, std::move(out), a);
  }

  // Sum over components of ln N(x_i; mu_i, exp(log_std_i)^2); scalar output.
  Value gaussian_log_prob(Value x, Value mu, Value log_std) {
    const Tensor& tx = value(x);
    require(tx.same_shape(value(mu)) && tx.same_shape(value(log_std)),
            "gaussian_log_prob: x/mu/log_std shapes differ");
    double s = 0;
    const Tensor& tm = value(mu);
    const Tensor& tl = value(log_std);
    constexpr double half_ln_2pi = 0.9189385332046727;
    for (std::size_t i = 0; i < tx.size(); ++i) {
      double z = (tx[i] - tm[i]) * std::exp(-tl[i]);
      s += -half_ln_2pi - tl[i] - 0.5 * z * z;
    }
    return push_op(Op::GaussianLogProb, Tensor::scalar(s), x, mu, log_std);
  }

  // Sum over components of y_i ln p_i + (1-y_i) ln(1-p_i). Terms with a zero
  // coefficient contribute exactly 0, so degenerate p in {0,1} with a
  // matching target is well-defined (log-likelihood 0), not NaN.
  Value bernoulli_log_prob(Value p, Value y) {
    const Tensor& tp = value(p);
    const Tensor& ty = value(y);
    require(tp.same_shape(ty), "bernoulli_log_prob: p/y shapes differ");
    double s = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      if (ty[i] != 0.0) s += ty[i] * std::log(tp[i]);
      if (ty[i] != 1.0) s += (1.0 - ty[i]) * std::log(1.0 - tp[i]);
    }
    return push_op(Op::BernoulliLogProb, Tensor::scalar(s), p, y);
  }

  // x: [C,H,W], w: [O,C,KH,KW], b: [O]; zero padding `pad`, square stride.
  Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    require(tx.rank() == 3 && tw.rank() == 4 && tb.rank() == 1, "conv2d: bad ranks");
    require(tw.dim(1) == tx.dim(0) && tb.dim(0) == tw.dim(0),
            "conv2d: channel mismatch " + Tensor::shape_str(tx.shape()) + " vs " +
                Tensor::shape_str(tw.shape()));
    std::size_t C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    std::size_t O = tw.dim(0), KH = tw.dim(2), KW = tw.dim(3);
    require(H + 2 * pad >= KH && W + 2 * pad >= KW, "conv2d: kernel larger than padded input");
    std::size_t OH = (H + 2 * pad - KH) / stride + 1;
    std::size_t OW = (W + 2 * pad - KW) / stride + 1;
    Tensor out({O, OH, OW});
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double s = tb[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kh = 0; kh < KH; ++kh)
              for (std::size_t kw = 0; kw < KW; ++kw) {
                std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
                std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
                if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                  continue;
                s += tx[(c * H + std::size_t(ih)) * W + std::size_t(iw)] *
                     tw[((o * C + c) * KH + kh) * KW + kw];
              }
          out[(o * OH + oh) * OW + ow] = s;
        }
    Value v = push_op(Op::Conv2d, std::move(out), x, w, b);
    nodes_[v.node].a0 = double(stride);
    nodes_[v.node].a1 = double(pad);
    return v;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> extra_parents_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Tensor*, int> leaf_cache_;
  bool check_finite_;

  int check(Value v) const {
    require(v.tape == this, "Value belongs to a different tape");
    require(v.node >= 0 && v.node < int(nodes_.size()), "Value node out of range");
    return v.node;
  }

  std::vector<std::size_t> shape_of(int i) const {
    const Node& n = nodes_[i];
    return (n.ext ? *n.ext : n.val).shape();
  }

  std::string shape_err(const char* op, Value a, Value b) const {
    return std::string(op) + ": shape mismatch between node " + std::to_string(a.node) + " " +
           Tensor::shape_str(value(a).shape()) + " and node " + std::to_string(b.node) + " " +
           Tensor::shape_str(value(b).shape());
  }

  Value push(Node n) {
    if (check_finite_) {
      const Tensor& t = n.ext ? *n.ext : n.val;
      if (!t.all_finite())
        fail(std::string("non-finite value in ") + op_name(n.op) + " (node " +
             std::to_string(nodes_.size()) + ")");
    }
    nodes_.push_back(std::move(n));
    return Value{this, int(nodes_.size()) - 1};
  }

  Value push_op(Op op, Tensor out, Value a, Value b = {}, Value c = {}) {
    Node n;
    n.op = op;
    n.p0 = check(a);
    n.p1 = b.valid() ? check(b) : -1;
    n.p2 = c.valid() ? check(c) : -1;
    n.val = std::move(out);
    return push(std::move(n));
  }

  Value binary_same_shape(Op op, Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), shape_err(op_name(op), a, b));
    Tensor out(ta.shape());
    const auto da = ta.data();
    const auto db = tb.data();
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = op == Op::Add ? da[i] + db[i] : op == Op::Sub ? da[i] - db[i] : da[i] * db[i];
    return push_op(op, std::move(out), a, b);
  }

  template <class F>
  Value map(Op op, Value a, F f) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = f(ta[i]);
    return push_op(op, std::move(out), a);
  }

  Value softmax_impl(Value a, bool log_form) {
    const Tensor& ta = value(a);
    require(ta.rank() == 1 || ta.rank() == 2,
            "softmax: rank-1/2 input required, got " + Tensor::shape_str(ta.shape()));
    std::size_t rows = ta.rank() == 2 ? ta.dim(0) : 1;
    std::size_t cols = ta.rank() == 2 ? ta.dim(1) : ta.dim(0);
    require(cols > 0, "softmax: empty axis");
    Tensor out(ta.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = ta.data().data() + r * cols;
      double* y = out.data().data() + r * cols;
      double mx = x[0];
      for (std::size_t i = 1; i < cols; ++i) mx = std::max(mx, x[i]);
      double z = 0;
      for (std::size_t i = 0; i < cols; ++i) z += std::exp(x[i] - mx);
      double lz = std::log(z);
      for (std::size_t i = 0; i < cols; ++i)
        y[i] = log_form ? x[i] - mx - lz : std::exp(x[i] - mx) / z;
    }
    return push_op(log_form ? Op::LogSoftmaxLast : Op::SoftmaxLast, std::move(out), a);
  }

  // --- backward ------------------------------------------------------------

  void acc(int parent, std::size_t i, double g) { grads_[parent][i] += g; }

  void backprop_node(int i) {
    const Node& n = nodes_[i];
    const Tensor& g = grads_[i];
    const Tensor& out = n.ext ? *n.ext : n.val;
    bool any = false;
    for (double x : g.data())
      if (x != 0.0) {
        any = true;
        break;
      }
    if (!any) return;
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
      case Op::StopGrad:
        break;  // StopGrad: gradient stops here by design
      case Op::Add:
        for (std::size_t k = 0; k < g.size(); ++k) {
          acc(n.p0, k, g[k]);
          acc(n.p1, k, g[k]);
        }
        break;
      case Op::Sub:
        for (std::size_t k = 0; k < g.size(); ++k) {
          acc(n.p0, k, g[k]);
          acc(n.p1, k, -g[k]);
        }
        break;
      case Op::Mul: {
        const Tensor& a = pval(n.p0);
        const Tensor& b = pval(n.p1);
        for (std::size_t k = 0; k < g.size(); ++k) {
          acc(n.p0, k, g[k] * b[k]);
          acc(n.p1, k, g[k] * a[k]);
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& a = pval(n.p0);
        const Tensor& b = pval(n.p1);
        std::size_t m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < kk; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < nn; ++j) s += g[r * nn + j] * b.at(c, j);
            grads_[n.p0][r * kk + c] += s;
          }
        for (std::size_t r = 0; r < kk; ++r)
          for (std::size_t c = 0; c < nn; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) s += a.at(j, r) * g[j * nn + c];
            grads_[n.p1][r * nn + c] += s;
          }
        break;
      }
      case Op::MatVec: {
        const Tensor& a = pval(n.p0);
        const Tensor& x = pval(n.p1);
        std::size_t m = a.dim(0), kk = a.dim(1);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < kk; ++c) grads_[n.p0][r * kk + c] += g[r] * x[c];
        for (std::size_t c = 0; c < kk; ++c) {
          double s = 0;
          for (std::size_t r = 0; r < m; ++r) s += a.at(r, c) * g[r];
          grads_[n.p1][c] += s;
        }
        break;
      }
      case Op::Exp:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k] * out[k]);
        break;
      case Op::Log: {
        const Tensor& a = pval(n.p0);
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k] / a[k]);
        break;
      }
      case Op::Tanh:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k] * (1.0 - out[k] * out[k]));
        break;
      case Op::Neg:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, -g[k]);
        break;
      case Op::Square: {
        const Tensor& a = pval(n.p0);
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k] * 2.0 * a[k]);
        break;
      }
      case Op::Sigmoid:
        for (std::size_t k = 0; k < g.size(); ++k)
          acc(n.p0, k, g[k] * out[k] * (1.0 - out[k]));
        break;
      case Op::Softplus: {
        const Tensor& a = pval(n.p0);
        for (std::size_t k = 0; k < g.size(); ++k)
          acc(n.p0, k, g[k] / (1.0 + std::exp(-a[k])));
        break;
      }
      case Op::LeakyRelu: {
        const Tensor& a = pval(n.p0);
        for (std::size_t k = 0; k < g.size(); ++k)
          acc(n.p0, k, g[k] * (a[k] > 0 ? 1.0 : n.a0));
        break;
      }
      case Op::Scale:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k] * n.a0);
        break;
      case Op::AddScalar:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k]);
        break;
      case Op::Clamp: {
        const Tensor& a = pval(n.p0);
        for (std::size_t k = 0; k < g.size(); ++k)
          if (a[k] > n.a0 && a[k] < n.a1) acc(n.p0, k, g[k]);
        break;
      }
      case Op::SoftmaxLast: {
        std::size_t rows = out.rank() == 2 ? out.dim(0) : 1;
        std::size_t cols = out.rank() == 2 ? out.dim(1) : out.dim(0);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * out[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            grads_[n.p0][r * cols + c] += out[r * cols + c] * (g[r * cols + c] - dot);
        }
        break;
      }
      case Op::LogSoftmaxLast: {
        std::size_t rows = out.rank() == 2 ? out.dim(0) : 1;
        std::size_t cols = out.rank() == 2 ? out.dim(1) : out.dim(0);
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0;
          for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            grads_[n.p0][r * cols + c] += g[r * cols + c] - std::exp(out[r * cols + c]) * gs;
        }
        break;
      }
      case Op::LayerNorm: {
        std::size_t nn = out.size();
        double inv = n.a1;
        double gm = 0, gym = 0;
        for (std::size_t k = 0; k < nn; ++k) {
          gm += g[k];
          gym += g[k] * out[k];
        }
        gm /= double(nn);
        gym /= double(nn);
        for (std::size_t k = 0; k < nn; ++k)
          acc(n.p0, k, inv * (g[k] - gm - out[k] * gym));
        break;
      }
      case Op::SumAll:
        for (std::size_t k = 0; k < grads_[n.p0].size(); ++k) acc(n.p0, k, g[0]);
        break;
      case Op::MeanAll: {
        double s = g[0] / double(grads_[n.p0].size());
        for (std::size_t k = 0; k < grads_[n.p0].size(); ++k) acc(n.p0, k, s);
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (int e = 0; e < n.extra_count; ++e) {
          int p = extra_parents_[std::size_t(n.extra_begin) + std::size_t(e)];
          for (std::size_t k = 0; k < grads_[p].size(); ++k) grads_[p][k] += g[off + k];
          off += grads_[p].size();
        }
        break;
      }
      case Op::SliceLast: {
        auto lo = std::size_t(n.a0);
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, lo + k, g[k]);
        break;
      }
      case Op::Reshape:
        for (std::size_t k = 0; k < g.size(); ++k) acc(n.p0, k, g[k]);
        break;
      case Op::GaussianLogProb: {
        const Tensor& x = pval(n.p0);
        const Tensor& mu = pval(n.p1);
        const Tensor& ls = pval(n.p2);
        for (std::size_t k = 0; k < x.size(); ++k) {
          double e = std::exp(-ls[k]);
          double z = (x[k] - mu[k]) * e;
          grads_[n.p0][k] += g[0] * (-z * e);
          grads_[n.p1][k] += g[0] * (z * e);
          grads_[n.p2][k] += g[0] * (z * z - 1.0);
        }
        break;
      }
      case Op::BernoulliLogProb: {
        const Tensor& p = pval(n.p0);
        const Tensor& y = pval(n.p1);
        for (std::size_t k = 0; k < p.size(); ++k) {
          double d = 0;
          if (y[k] != 0.0) d += y[k] / p[k];
          if (y[k] != 1.0) d -= (1.0 - y[k]) / (1.0 - p[k]);
          grads_[n.p0][k] += g[0] * d;
          // y is a target; gradient w.r.t. it is not needed and not defined
          // at the degenerate points, so it is left at zero.
        }
        break;
      }
      case Op::Conv2d: {
        const Tensor& x = pval(n.p0);
        const Tensor& w = pval(n.p1);
        auto stride = std::size_t(n.a0);
        auto pad = std::size_t(n.a1);
        std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
        std::size_t OH = out.dim(1), OW = out.dim(2);
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
              double gv = g[(o * OH + oh) * OW + ow];
              if (gv == 0.0) continue;
              grads_[n.p2][o] += gv;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t kh = 0; kh < KH; ++kh)
                  for (std::size_t kw = 0; kw < KW; ++kw) {
                    std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
                    std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
                    if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                      continue;
                    std::size_t xi = (c * H + std::size_t(ih)) * W + std::size_t(iw);
                    std::size_t wi = ((o * C + c) * KH + kh) * KW + kw;
                    grads_[n.p0][xi] += gv * w[wi];
                    grads_[n.p1][wi] += gv * x[xi];
                  }
            }
        break;
      }
    }
  }

  const Tensor& pval(int i) const {
    const Node& n = nodes_[i];
    return n.ext ? *n.ext : n.val;
  }
};

// Max over elements of |analytic - numeric| / max(1, |numeric|).
inline double fd_max_rel_err(const Tensor& analytic, const Tensor& numeric) {
  require(analytic.same_shape(numeric), "fd_max_rel_err: shape mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    double a = analytic[i], n = numeric[i];
    if (std::isnan(a) || std::isnan(n))
      fail("fd_max_rel_err: NaN at element " + std::to_string(i));
    worst = std::max(worst, std::abs(a - n) / std::max(1.0, std::abs(n)));
  }
  return worst;
}

// Builds `fn`'s scalar graph at `point`, takes the tape gradient, and compares
// it against central differences with the given step. Returns the max
// relative error; throws on NaN in either side (with the offending index).
using ScalarFn = std::function<Value(Tape&, Value)>;

inline double finite_difference_check(const ScalarFn& fn, const Tensor& point, double step) {
  require(step > 0, "finite_difference_check: step must be positive");
  Tape tape;
  Value x = tape.input(point);
  Value y = fn(tape, x);
  require(tape.value(y).size() == 1, "finite_difference_check: fn must return a scalar");
  tape.backward(y);
  Tensor analytic = tape.grad(x);

  Tensor numeric(point.shape());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    Tape tp;
    double up = tp.value(fn(tp, tp.input(probe))).scalar_value();
    probe[i] = point[i] - step;
    Tape tm;
    double dn = tm.value(fn(tm, tm.input(probe))).scalar_value();
    probe[i] = point[i];
    numeric[i] = (up - dn) / (2.0 * step);
    if (std::isnan(numeric[i]))
      fail("finite_difference_check: NaN in numeric gradient at element " + std::to_string(i));
    if (std::isnan(analytic[i]))
      fail("finite_difference_check: NaN in analytic gradient at element " + std::to_string(i));
  }
  return fd_max_rel_err(analytic, numeric);
}

}  // namespace vbsd::ad
