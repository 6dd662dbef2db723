#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sonoseg/common.hpp"
#include "sonoseg/rng.hpp"

namespace sonoseg {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

inline NodePtr new_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

}  // namespace detail

// Thread-local tape switch. Ops run under a disabled tape produce constants,
// which is how teacher forward passes stay off the gradient graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    static thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Value-like handle to a graph node. Row-major float64 storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = detail::new_node(std::move(shape), std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(numel_of(shape)), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    std::vector<double> d(static_cast<size_t>(numel_of(shape)), v);
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }

  const std::vector<double>& data() const { return node_->value; }
  // In-place mutation is only safe on leaves between graph builds
  // (optimizer updates, weight init, checkpoint load).
  std::vector<double>& raw_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
  void clear_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return node_->value[static_cast<size_t>(flat)];
  }

  // Constant copy detached from the graph.
  Tensor detach() const { return from_data(shape(), data(), false); }

  void backward() {
    if (numel() != 1)
      throw ContractViolation("backward() without seed requires a scalar, got " + shape_str(shape()));
    backward(std::vector<double>{1.0});
  }

  void backward(const std::vector<double>& seed) {
    if (!node_->requires_grad)
      throw ContractViolation("backward() on a tensor that does not require grad");
    if (static_cast<int64_t>(seed.size()) != numel())
      throw ShapeError("backward seed size mismatch");

    // Reverse-postorder over the requires-grad subgraph: every node is
    // processed after all of its consumers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
      detail::Node* n;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        detail::Node* p = f.n->parents[f.next_parent++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }

    for (detail::Node* n : order) n->ensure_grad();
    for (size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop();
    }
  }

  detail::NodePtr impl() const { return node_; }

 private:
  detail::NodePtr node_;
};

namespace detail {

inline bool tape_on(std::initializer_list<const Tensor*> ins) {
  if (!GradMode::enabled()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor finish(NodePtr out, std::initializer_list<const Tensor*> ins,
                     std::function<void()> backprop) {
  if (tape_on(ins)) {
    out->requires_grad = true;
    out->parents.reserve(ins.size());
    for (const Tensor* t : ins) out->parents.push_back(t->impl());
    out->backprop = std::move(backprop);
  }
  return Tensor(out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "add shape mismatch", a.shape(), b.shape());
  auto out = detail::new_node(a.shape(), a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] += bd[i];
  detail::Node* o = out.get();
  return detail::finish(out, {&a, &b}, [o]() {
    auto& pa = o->parents[0];
    auto& pb = o->parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "sub shape mismatch", a.shape(), b.shape());
  auto out = detail::new_node(a.shape(), a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] -= bd[i];
  detail::Node* o = out.get();
  return detail::finish(out, {&a, &b}, [o]() {
    auto& pa = o->parents[0];
    auto& pb = o->parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] -= o->grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "mul shape mismatch", a.shape(), b.shape());
  auto out = detail::new_node(a.shape(), a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] *= bd[i];
  detail::Node* o = out.get();
  return detail::finish(out, {&a, &b}, [o]() {
    auto& pa = o->parents[0];
    auto& pb = o->parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i] * pa->value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "div shape mismatch", a.shape(), b.shape());
  auto out = detail::new_node(a.shape(), a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] /= bd[i];
  detail::Node* o = out.get();
  return detail::finish(out, {&a, &b}, [o]() {
    auto& pa = o->parents[0];
    auto& pb = o->parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) {
        double bv = pb->value[i];
        pb->grad[i] -= o->grad[i] * pa->value[i] / (bv * bv);
      }
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) v *= c;
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, c]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += c * o->grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor add_scalar(const Tensor& a, double c) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) v += c;
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
  });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid_stable(double x) {
  // -softplus(-x), with softplus(t) = log1p(exp(-|t|)) + max(t, 0)
  return -(std::log1p(std::exp(-std::abs(x))) + std::max(-x, 0.0));
}
}  // namespace detail

// tanh-approximation GELU
inline Tensor gelu(const Tensor& a) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) {
    double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) {
      double x = pa->value[i];
      double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
      double t = std::tanh(u);
      double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
      double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      pa->grad[i] += o->grad[i] * d;
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) v = detail::sigmoid_stable(v);
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) {
      double y = o->value[i];
      pa->grad[i] += o->grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor log_sigmoid(const Tensor& a) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) v = detail::log_sigmoid_stable(v);
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) {
      // d/dx log(sigmoid(x)) = sigmoid(-x)
      pa->grad[i] += o->grad[i] * detail::sigmoid_stable(-pa->value[i]);
    }
  });
}

inline Tensor exp(const Tensor& a) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) v = std::exp(v);
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] * o->value[i];
  });
}

inline Tensor log(const Tensor& a) {
  auto out = detail::new_node(a.shape(), a.data());
  for (double& v : out->value) {
    if (v <= 0.0) throw std::domain_error("log() of non-positive value");
    v = std::log(v);
  }
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] / pa->value[i];
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto out = detail::new_node({1}, {s});
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    double g = o->grad[0];
    for (double& gv : pa->grad) gv += g;
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// mean of squared elementwise differences
inline Tensor mse(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "mse shape mismatch", a.shape(), b.shape());
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// 2-D [M,K]x[K,N] or batched 3-D [B,M,K]x[B,K,N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3)))
    throw ShapeError("matmul expects 2-D or 3-D pairs, got " + shape_str(sa) + " and " +
                     shape_str(sb));
  int64_t B = sa.size() == 3 ? sa[0] : 1;
  int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  int64_t K2 = sb[sb.size() - 2], N = sb[sb.size() - 1];
  if (K != K2 || (sb.size() == 3 && sb[0] != B))
    throw ShapeError("matmul inner dims disagree: " + shape_str(sa) + " vs " + shape_str(sb));

  Shape so = sa.size() == 3 ? Shape{B, M, N} : Shape{M, N};
  auto out = detail::new_node(so, std::vector<double>(static_cast<size_t>(B * M * N), 0.0));
  {
    const double* A = a.data().data();
    const double* Bd = b.data().data();
    double* O = out->value.data();
    for (int64_t bi = 0; bi < B; ++bi) {
      const double* Ab = A + bi * M * K;
      const double* Bb = Bd + bi * K * N;
      double* Ob = O + bi * M * N;
      for (int64_t m = 0; m < M; ++m) {
        for (int64_t k = 0; k < K; ++k) {
          double amk = Ab[m * K + k];
          const double* brow = Bb + k * N;
          double* orow = Ob + m * N;
          for (int64_t n = 0; n < N; ++n) orow[n] += amk * brow[n];
        }
      }
    }
  }
  detail::Node* o = out.get();
  return detail::finish(out, {&a, &b}, [o, B, M, K, N]() {
    auto& pa = o->parents[0];
    auto& pb = o->parents[1];
    for (int64_t bi = 0; bi < B; ++bi) {
      const double* G = o->grad.data() + bi * M * N;
      const double* A = pa->value.data() + bi * M * K;
      const double* Bd = pb->value.data() + bi * K * N;
      if (pa->requires_grad) {
        pa->ensure_grad();
        double* dA = pa->grad.data() + bi * M * K;
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            const double* grow = G + m * N;
            const double* brow = Bd + k * N;
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) acc += grow[n] * brow[n];
            dA[m * K + k] += acc;
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        double* dB = pb->grad.data() + bi * K * N;
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            double amk = A[m * K + k];
            const double* grow = G + m * N;
            double* drow = dB + k * N;
            for (int64_t n = 0; n < N; ++n) drow[n] += amk * grow[n];
          }
      }
    }
  });
}

// y = x.w + b over the last dimension; leading dims are batch.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sw.size() != 2)
    throw ShapeError("linear weight must be 2-D, got " + shape_str(sw));
  int64_t in = sw[0], outd = sw[1];
  if (sx.empty() || sx.back() != in)
    throw ShapeError("linear input " + shape_str(sx) + " incompatible with weight " +
                     shape_str(sw));
  bool has_bias = b.defined();
  if (has_bias && !(b.shape() == Shape{outd}))
    check_shape(false, "linear bias mismatch", b.shape(), {outd});

  int64_t rows = x.numel() / in;
  Shape so = sx;
  so.back() = outd;
  auto out = detail::new_node(so, std::vector<double>(static_cast<size_t>(rows * outd), 0.0));
  {
    const double* X = x.data().data();
    const double* W = w.data().data();
    double* O = out->value.data();
    if (has_bias) {
      const double* Bv = b.data().data();
      for (int64_t r = 0; r < rows; ++r) std::memcpy(O + r * outd, Bv, sizeof(double) * outd);
    }
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = X + r * in;
      double* orow = O + r * outd;
      for (int64_t k = 0; k < in; ++k) {
        double xv = xrow[k];
        const double* wrow = W + k * outd;
        for (int64_t c = 0; c < outd; ++c) orow[c] += xv * wrow[c];
      }
    }
  }
  detail::Node* o = out.get();
  auto bp = [o, rows, in, outd, has_bias]() {
    auto& px = o->parents[0];
    auto& pw = o->parents[1];
    const double* G = o->grad.data();
    if (px->requires_grad) {
      px->ensure_grad();
      const double* W = pw->value.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = G + r * outd;
        double* dxrow = px->grad.data() + r * in;
        for (int64_t k = 0; k < in; ++k) {
          const double* wrow = W + k * outd;
          double acc = 0.0;
          for (int64_t c = 0; c < outd; ++c) acc += grow[c] * wrow[c];
          dxrow[k] += acc;
        }
      }
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      const double* X = px->value.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* xrow = X + r * in;
        const double* grow = G + r * outd;
        for (int64_t k = 0; k < in; ++k) {
          double xv = xrow[k];
          double* dwrow = pw->grad.data() + k * outd;
          for (int64_t c = 0; c < outd; ++c) dwrow[c] += xv * grow[c];
        }
      }
    }
    if (has_bias && o->parents.size() > 2) {
      auto& pb = o->parents[2];
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = G + r * outd;
          for (int64_t c = 0; c < outd; ++c) pb->grad[c] += grow[c];
        }
      }
    }
  };
  if (has_bias) return detail::finish(out, {&x, &w, &b}, bp);
  return detail::finish(out, {&x, &w}, bp);
}

inline Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// Cross-correlation with zero padding.
// x: [Cin,H,W], k: [Cout,Cin/groups,kh,kw], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, int stride, int pad,
                     int groups = 1) {
  const Shape& sx = x.shape();
  const Shape& sk = k.shape();
  if (sx.size() != 3 || sk.size() != 4)
    throw ShapeError("conv2d expects x [C,H,W] and k [Co,Ci,kh,kw], got " + shape_str(sx) +
                     " and " + shape_str(sk));
  int64_t Cin = sx[0], H = sx[1], W = sx[2];
  int64_t Cout = sk[0], Ck = sk[1], kh = sk[2], kw = sk[3];
  if (pad < 0 || stride < 1) throw ShapeError("conv2d needs pad >= 0 and stride >= 1");
  if (groups < 1 || Cin % groups != 0 || Cout % groups != 0 || Ck != Cin / groups)
    throw ShapeError("conv2d group mismatch: x " + shape_str(sx) + " k " + shape_str(sk));
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    throw ShapeError("conv2d output extent non-positive for x " + shape_str(sx) + " k " +
                     shape_str(sk));
  bool has_bias = bias.defined();
  if (has_bias) check_shape(bias.shape() == Shape{Cout}, "conv2d bias mismatch", bias.shape(), {Cout});

  auto out = detail::new_node({Cout, Ho, Wo},
                              std::vector<double>(static_cast<size_t>(Cout * Ho * Wo), 0.0));
  int64_t cin_g = Cin / groups, cout_g = Cout / groups;
  {
    const double* X = x.data().data();
    const double* K = k.data().data();
    double* O = out->value.data();
    for (int64_t oc = 0; oc < Cout; ++oc) {
      int64_t g = oc / cout_g;
      double b0 = has_bias ? bias.data()[oc] : 0.0;
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = b0;
          for (int64_t ic = 0; ic < cin_g; ++ic) {
            const double* xc = X + (g * cin_g + ic) * H * W;
            const double* kc = K + ((oc * cin_g) + ic) * kh * kw;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                acc += xc[iy * W + ix] * kc[ky * kw + kx];
              }
            }
          }
          O[(oc * Ho + oy) * Wo + ox] = acc;
        }
    }
  }
  detail::Node* o = out.get();
  auto bp = [o, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, cin_g, cout_g, has_bias]() {
    auto& px = o->parents[0];
    auto& pk = o->parents[1];
    const double* G = o->grad.data();
    const double* X = px->value.data();
    const double* K = pk->value.data();
    double* dX = nullptr;
    double* dK = nullptr;
    if (px->requires_grad) {
      px->ensure_grad();
      dX = px->grad.data();
    }
    if (pk->requires_grad) {
      pk->ensure_grad();
      dK = pk->grad.data();
    }
    double* dB = nullptr;
    if (has_bias && o->parents.size() > 2 && o->parents[2]->requires_grad) {
      o->parents[2]->ensure_grad();
      dB = o->parents[2]->grad.data();
    }
    for (int64_t oc = 0; oc < Cout; ++oc) {
      int64_t g = oc / cout_g;
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double gv = G[(oc * Ho + oy) * Wo + ox];
          if (gv == 0.0) continue;
          if (dB) dB[oc] += gv;
          for (int64_t ic = 0; ic < cin_g; ++ic) {
            int64_t xoff = (g * cin_g + ic) * H * W;
            int64_t koff = ((oc * cin_g) + ic) * kh * kw;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                if (dX) dX[xoff + iy * W + ix] += gv * K[koff + ky * kw + kx];
                if (dK) dK[koff + ky * kw + kx] += gv * X[xoff + iy * W + ix];
              }
            }
          }
        }
    }
  };
  if (has_bias) return detail::finish(out, {&x, &k, &bias}, bp);
  return detail::finish(out, {&x, &k}, bp);
}

inline Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad, int groups = 1) {
  return conv2d(x, k, Tensor(), stride, pad, groups);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel_of(s) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s) +
                     " changes element count");
  auto out = detail::new_node(std::move(s), a.data());
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
  });
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}
}  // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const Shape& sa = a.shape();
  if (axes.size() != sa.size()) throw ShapeError("permute axes rank mismatch");
  std::vector<bool> seen(sa.size(), false);
  Shape so(sa.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    int ax = axes[i];
    if (ax < 0 || ax >= static_cast<int>(sa.size()) || seen[ax])
      throw ShapeError("permute axes must be a permutation");
    seen[ax] = true;
    so[i] = sa[ax];
  }
  auto in_st = detail::strides_of(sa);
  auto out_st = detail::strides_of(so);
  // source flat index for each destination flat index
  std::vector<int64_t> src(static_cast<size_t>(a.numel()));
  int64_t n = a.numel();
  size_t r = sa.size();
  for (int64_t d = 0; d < n; ++d) {
    int64_t rem = d, s = 0;
    for (size_t i = 0; i < r; ++i) {
      int64_t coord = rem / out_st[i];
      rem %= out_st[i];
      s += coord * in_st[axes[i]];
    }
    src[static_cast<size_t>(d)] = s;
  }
  std::vector<double> vals(static_cast<size_t>(n));
  const auto& ad = a.data();
  for (int64_t d = 0; d < n; ++d) vals[d] = ad[src[d]];
  auto out = detail::new_node(so, std::move(vals));
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, src = std::move(src)]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t d = 0; d < src.size(); ++d) pa->grad[src[d]] += o->grad[d];
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  const Shape& sa = a.shape();
  if (axis < 0 || axis >= static_cast<int>(sa.size())) throw ShapeError("slice axis out of range");
  if (start < 0 || len <= 0 || start + len > sa[axis])
    throw ShapeError("slice bounds [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") invalid for " + shape_str(sa));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sa[i];
  for (size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  Shape so = sa;
  so[axis] = len;
  std::vector<double> vals(static_cast<size_t>(outer * len * inner));
  const auto& ad = a.data();
  int64_t D = sa[axis];
  for (int64_t ou = 0; ou < outer; ++ou)
    std::memcpy(vals.data() + ou * len * inner, ad.data() + (ou * D + start) * inner,
                sizeof(double) * len * inner);
  auto out = detail::new_node(so, std::move(vals));
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, outer, inner, len, D, start]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t ou = 0; ou < outer; ++ou) {
      const double* g = o->grad.data() + ou * len * inner;
      double* dst = pa->grad.data() + (ou * D + start) * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw ShapeError("concat axis out of range");
  int64_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size()) throw ShapeError("concat rank mismatch");
    for (size_t i = 0; i < sp.size(); ++i)
      if (static_cast<int>(i) != axis && sp[i] != s0[i])
        check_shape(false, "concat shape mismatch", sp, s0);
    total += sp[axis];
  }
  Shape so = s0;
  so[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<double> vals(static_cast<size_t>(outer * total * inner));
  std::vector<int64_t> lens;
  {
    int64_t off = 0;
    for (const Tensor& p : parts) {
      int64_t L = p.shape()[axis];
      lens.push_back(L);
      const auto& pd = p.data();
      for (int64_t ou = 0; ou < outer; ++ou)
        std::memcpy(vals.data() + (ou * total + off) * inner, pd.data() + ou * L * inner,
                    sizeof(double) * L * inner);
      off += L;
    }
  }
  auto out = detail::new_node(so, std::move(vals));
  detail::Node* o = out.get();
  bool any_rg = GradMode::enabled();
  if (any_rg) {
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    any_rg = rg;
  }
  if (!any_rg) return Tensor(out);
  out->requires_grad = true;
  for (const Tensor& p : parts) out->parents.push_back(p.impl());
  out->backprop = [o, outer, inner, total, lens]() {
    int64_t off = 0;
    for (size_t pi = 0; pi < o->parents.size(); ++pi) {
      auto& pp = o->parents[pi];
      int64_t L = lens[pi];
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (int64_t ou = 0; ou < outer; ++ou) {
          const double* g = o->grad.data() + (ou * total + off) * inner;
          double* dst = pp->grad.data() + ou * L * inner;
          for (int64_t i = 0; i < L * inner; ++i) dst[i] += g[i];
        }
      }
      off += L;
    }
  };
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// normalization / attention pieces
// ---------------------------------------------------------------------------

// softmax over the last dimension
inline Tensor softmax(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("softmax needs rank >= 1");
  int64_t C = s.back();
  int64_t rows = a.numel() / C;
  auto out = detail::new_node(s, a.data());
  {
    double* O = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
      double* row = O + r * C;
      double mx = row[0];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
      double Z = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        row[c] = std::exp(row[c] - mx);
        Z += row[c];
      }
      for (int64_t c = 0; c < C; ++c) row[c] /= Z;
    }
  }
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, rows, C]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = o->value.data() + r * C;
      const double* g = o->grad.data() + r * C;
      double dot = 0.0;
      for (int64_t c = 0; c < C; ++c) dot += g[c] * y[c];
      double* dx = pa->grad.data() + r * C;
      for (int64_t c = 0; c < C; ++c) dx[c] += y[c] * (g[c] - dot);
    }
  });
}

// layer norm over the last dimension
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm needs rank >= 1");
  int64_t C = s.back();
  check_shape(gamma.shape() == Shape{C}, "layer_norm gamma mismatch", gamma.shape(), {C});
  check_shape(beta.shape() == Shape{C}, "layer_norm beta mismatch", beta.shape(), {C});
  int64_t rows = x.numel() / C;
  auto out = detail::new_node(s, std::vector<double>(x.data().size()));
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  {
    const double* X = x.data().data();
    const double* G = gamma.data().data();
    const double* B = beta.data().data();
    double* O = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = X + r * C;
      double mu = 0.0;
      for (int64_t c = 0; c < C; ++c) mu += xr[c];
      mu /= C;
      double var = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double d = xr[c] - mu;
        var += d * d;
      }
      var /= C;
      double is = 1.0 / std::sqrt(var + eps);
      inv_std[r] = is;
      double* xh = xhat.data() + r * C;
      double* orow = O + r * C;
      for (int64_t c = 0; c < C; ++c) {
        xh[c] = (xr[c] - mu) * is;
        orow[c] = xh[c] * G[c] + B[c];
      }
    }
  }
  detail::Node* o = out.get();
  return detail::finish(out, {&x, &gamma, &beta},
                        [o, rows, C, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
    auto& px = o->parents[0];
    auto& pg = o->parents[1];
    auto& pb = o->parents[2];
    const double* G = pg->value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* g = o->grad.data() + r * C;
      const double* xh = xhat.data() + r * C;
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (int64_t c = 0; c < C; ++c) pg->grad[c] += g[c] * xh[c];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t c = 0; c < C; ++c) pb->grad[c] += g[c];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        double m1 = 0.0, m2 = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          double dxh = g[c] * G[c];
          m1 += dxh;
          m2 += dxh * xh[c];
        }
        m1 /= C;
        m2 /= C;
        double* dx = px->grad.data() + r * C;
        for (int64_t c = 0; c < C; ++c) {
          double dxh = g[c] * G[c];
          dx[c] += inv_std[r] * (dxh - m1 - xh[c] * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// spatial resampling
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest2x(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() != 3) throw ShapeError("upsample_nearest2x expects [C,H,W], got " + shape_str(s));
  int64_t C = s[0], H = s[1], W = s[2];
  std::vector<double> vals(static_cast<size_t>(C * 4 * H * W));
  {
    const double* A = a.data().data();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          double v = A[(c * H + y) * W + x];
          int64_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * x;
          vals[base] = v;
          vals[base + 1] = v;
          vals[base + 2 * W] = v;
          vals[base + 2 * W + 1] = v;
        }
  }
  auto out = detail::new_node({C, 2 * H, 2 * W}, std::move(vals));
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, C, H, W]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          int64_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * x;
          pa->grad[(c * H + y) * W + x] +=
              o->grad[base] + o->grad[base + 1] + o->grad[base + 2 * W] + o->grad[base + 2 * W + 1];
        }
  });
}

inline Tensor maxpool2x(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() != 3) throw ShapeError("maxpool2x expects [C,H,W], got " + shape_str(s));
  int64_t C = s[0], H = s[1], W = s[2];
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2x needs even spatial extents, got " + shape_str(s));
  int64_t Ho = H / 2, Wo = W / 2;
  std::vector<double> vals(static_cast<size_t>(C * Ho * Wo));
  std::vector<int64_t> arg(vals.size());
  {
    const double* A = a.data().data();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x = 0; x < Wo; ++x) {
          int64_t i00 = (c * H + 2 * y) * W + 2 * x;
          int64_t best = i00;
          for (int64_t cand : {i00 + 1, i00 + W, i00 + W + 1})
            if (A[cand] > A[best]) best = cand;
          int64_t oi = (c * Ho + y) * Wo + x;
          vals[oi] = A[best];
          arg[oi] = best;
        }
  }
  auto out = detail::new_node({C, Ho, Wo}, std::move(vals));
  detail::Node* o = out.get();
  return detail::finish(out, {&a}, [o, arg = std::move(arg)]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < arg.size(); ++i) pa->grad[arg[i]] += o->grad[i];
  });
}

// Bilinear resize, half-pixel-center convention.
inline Tensor upsample_bilinear(const Tensor& a, int64_t oh, int64_t ow) {
  const Shape& s = a.shape();
  if (s.size() != 3) throw ShapeError("upsample_bilinear expects [C,H,W], got " + shape_str(s));
  if (oh < 1 || ow < 1) throw ShapeError("upsample_bilinear target must be positive");
  int64_t C = s[0], H = s[1], W = s[2];
  struct Tap {
    int64_t lo, hi;
    double f;
  };
  auto taps_for = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t oi = 0; oi < out; ++oi) {
      double src = (oi + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      int64_t lo = static_cast<int64_t>(std::floor(src));
      int64_t hi = std::min(lo + 1, in - 1);
      taps[oi] = {lo, hi, src - static_cast<double>(lo)};
    }
    return taps;
  };
  auto ty = taps_for(H, oh);
  auto tx = taps_for(W, ow);
  std::vector<double> vals(static_cast<size_t>(C * oh * ow));
  {
    const double* A = a.data().data();
    for (int64_t c = 0; c < C; ++c) {
      const double* ac = A + c * H * W;
      double* oc = vals.data() + c * oh * ow;
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
          const Tap &py = ty[y], &px = tx[x];
          double v00 = ac[py.lo * W + px.lo], v01 = ac[py.lo * W + px.hi];
          double v10 = ac[py.hi * W + px.lo], v11 = ac[py.hi * W + px.hi];
          double top = v00 + (v01 - v00) * px.f;
          double bot = v10 + (v11 - v10) * px.f;
          oc[y * ow + x] = top + (bot - top) * py.f;
        }
    }
  }
  auto out = detail::new_node({C, oh, ow}, std::move(vals));
  detail::Node* o = out.get();
  return detail::finish(out, {&a},
                        [o, C, H, W, oh, ow, ty = std::move(ty), tx = std::move(tx)]() {
    auto& pa = o->parents[0];
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t c = 0; c < C; ++c) {
      double* dc = pa->grad.data() + c * H * W;
      const double* g = o->grad.data() + c * oh * ow;
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
          const auto &py = ty[y], &px = tx[x];
          double gv = g[y * ow + x];
          double wy1 = py.f, wy0 = 1.0 - py.f;
          double wx1 = px.f, wx0 = 1.0 - px.f;
          dc[py.lo * W + px.lo] += gv * wy0 * wx0;
          dc[py.lo * W + px.hi] += gv * wy0 * wx1;
          dc[py.hi * W + px.lo] += gv * wy1 * wx0;
          dc[py.hi * W + px.hi] += gv * wy1 * wx1;
        }
    }
  });
}

// [C,H,W] grid <-> [H*W,C] token matrix (row-major scan order)
inline Tensor chw_to_tokens(const Tensor& g) {
  if (g.rank() != 3) throw ShapeError("chw_to_tokens expects [C,H,W], got " + shape_str(g.shape()));
  return reshape(permute(g, {1, 2, 0}), {g.dim(1) * g.dim(2), g.dim(0)});
}

inline Tensor tokens_to_chw(const Tensor& t, int64_t h, int64_t w) {
  if (t.rank() != 2 || t.dim(0) != h * w)
    throw ShapeError("tokens_to_chw expects [" + std::to_string(h * w) + ",C], got " +
                     shape_str(t.shape()));
  return permute(reshape(t, {h, w, t.dim(1)}), {2, 0, 1});
}

// ---------------------------------------------------------------------------
// small conveniences
// ---------------------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<double> d(static_cast<size_t>(numel_of(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

}  // namespace sonoseg
