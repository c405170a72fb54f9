#pragma once
// Reverse-mode automatic differentiation over Tensor.
//
// A Tape owns a topologically ordered list of nodes; Var is a cheap handle.
// Primitives compute their forward value eagerly (with a finiteness check)
// and record a closure that scatters adjoints to their parents. backward()
// walks the tape once in reverse, visiting only nodes whose adjoint was
// populated. Broadcasting is limited to a rank-(r-1) right operand against
// the leading axis of a rank-r left operand.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ikdrive/rng.hpp"
#include "ikdrive/tensor.hpp"

namespace ikdrive {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor v) { return push(std::move(v), true); }
  Var input(Tensor v, bool requires_grad) { return push(std::move(v), requires_grad); }
  Var constant(Tensor v) { return push(std::move(v), false); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }

  void backward(Var loss) {
    size_t li = check(loss);
    if (nodes_[li].value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(nodes_[li].value.shape()));
    adj_ref(loss)[0] = 1.0;
    for (int32_t i = static_cast<int32_t>(li); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.has_adj && n.backward) n.backward();
    }
  }

  // Gradient from the last backward() pass; zeros if the node was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.has_adj) return n.adj;
    return Tensor(n.value.shape());
  }

  size_t size() const { return nodes_.size(); }

  // --- primitive implementation hooks ---
  Var push(Tensor value, bool requires_grad) {
    value.check_finite("tape node");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }
  void set_backward(Var v, std::function<void()> fn) { nodes_[check(v)].backward = std::move(fn); }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  bool has_adj(Var v) const { return nodes_[check(v)].has_adj; }
  // Adjoint accumulator, allocated on first touch.
  Tensor& adj_ref(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.has_adj) {
      n.adj = Tensor(n.value.shape());
      n.has_adj = true;
    }
    return n.adj;
  }

 private:
  struct Node {
    Tensor value;
    Tensor adj;
    bool requires_grad = false;
    bool has_adj = false;
    std::function<void()> backward;
  };

  size_t check(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
      throw ArgumentError("Var does not belong to this tape");
    return static_cast<size_t>(v.id);
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) throw ArgumentError(std::string(op) + ": operands from different tapes");
}

// True when b broadcasts over the leading axis of a.
inline bool leading_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size() + 1 || b.empty()) return false;
  for (size_t i = 0; i < b.size(); ++i)
    if (a[i + 1] != b[i]) return false;
  return true;
}

inline std::pair<int64_t, int64_t> axis_split(const Shape& s, int axis) {
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

inline int check_axis(const Shape& s, int axis, const char* op) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_str(s));
  return axis;
}

}  // namespace detail

// ====== elementwise primitives ======

inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  bool bcast = detail::leading_broadcast(av.shape(), bv.shape());
  if (!bcast) require_same_shape(av, bv, "add");
  Tensor out = av;
  if (bcast) {
    int64_t rows = av.dim(0), cols = bv.numel();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  } else {
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  }
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, b, bcast]() {
      const Tensor& g = tp->adj_ref(o);
      if (tp->requires_grad(a)) {
        Tensor& ga = tp->adj_ref(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp->requires_grad(b)) {
        Tensor& gb = tp->adj_ref(b);
        if (bcast) {
          int64_t cols = gb.numel(), rows = g.numel() / cols;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        } else {
          for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
      }
    });
  }
  return o;
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "mul");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  bool bcast = detail::leading_broadcast(av.shape(), bv.shape());
  if (!bcast) require_same_shape(av, bv, "mul");
  Tensor out = av;
  if (bcast) {
    int64_t rows = av.dim(0), cols = bv.numel();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) out[r * cols + c] *= bv[c];
  } else {
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  }
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, b, bcast]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& av2 = tp->value(a);
      const Tensor& bv2 = tp->value(b);
      if (tp->requires_grad(a)) {
        Tensor& ga = tp->adj_ref(a);
        if (bcast) {
          int64_t cols = bv2.numel(), rows = g.numel() / cols;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r * cols + c] * bv2[c];
        } else {
          for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
        }
      }
      if (tp->requires_grad(b)) {
        Tensor& gb = tp->adj_ref(b);
        if (bcast) {
          int64_t cols = gb.numel(), rows = g.numel() / cols;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c] * av2[r * cols + c];
        } else {
          for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
        }
      }
    });
  }
  return o;
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, c]() {
      const Tensor& g = tp->adj_ref(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
  }
  return o;
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& x = tp->value(a);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
    });
  }
  return o;
}

inline Var gelu(Var a) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    double u = kC * (x[i] + kA * x[i] * x[i] * x[i]);
    out[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
  }
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& x2 = tp->value(a);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t i = 0; i < g.numel(); ++i) {
        double xi = x2[i];
        double u = kC * (xi + kA * xi * xi * xi);
        double th = std::tanh(u);
        double sech2 = 1.0 - th * th;
        double du = kC * (1.0 + 3.0 * kA * xi * xi);
        ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * xi * sech2 * du);
      }
    });
  }
  return o;
}

// ====== reductions ======

inline Var mean(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  double n = static_cast<double>(x.numel());
  bool rg = t.requires_grad(a);
  Var o = t.push(Tensor::scalar(s / n), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, n]() {
      double g = tp->adj_ref(o)[0];
      Tensor& ga = tp->adj_ref(a);
      double w = g / n;
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += w;
    });
  }
  return o;
}

inline Var sum_sq(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i] * x[i];
  bool rg = t.requires_grad(a);
  Var o = t.push(Tensor::scalar(s), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a]() {
      double g = tp->adj_ref(o)[0];
      const Tensor& x2 = tp->value(a);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += 2.0 * x2[i] * g;
    });
  }
  return o;
}

// Mean squared difference over all elements.
inline Var mse(Var a, Var b) {
  Var d = sub(a, b);
  double n = static_cast<double>(a.tape->value(a).numel());
  return scale(sum_sq(d), 1.0 / n);
}

// ====== linear algebra ======

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  {
    const double* A = av.data();
    const double* B = bv.data();
    double* C = out.data();
    for (int64_t i = 0; i < m; ++i) {
      const double* Ai = A + i * k;
      double* Ci = C + i * n;
      for (int64_t p = 0; p < k; ++p) {
        double aip = Ai[p];
        const double* Bp = B + p * n;
        for (int64_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
      }
    }
  }
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, b, m, k, n]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& av2 = tp->value(a);
      const Tensor& bv2 = tp->value(b);
      if (tp->requires_grad(a)) {
        // dA = G * B^T
        Tensor& ga = tp->adj_ref(a);
        const double* G = g.data();
        const double* B = bv2.data();
        double* GA = ga.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* Gi = G + i * n;
            const double* Bp = B + p * n;
            for (int64_t j = 0; j < n; ++j) s += Gi[j] * Bp[j];
            GA[i * k + p] += s;
          }
      }
      if (tp->requires_grad(b)) {
        // dB = A^T * G
        Tensor& gb = tp->adj_ref(b);
        const double* G = g.data();
        const double* A = av2.data();
        double* GB = gb.data();
        for (int64_t p = 0; p < k; ++p) {
          double* GBp = GB + p * n;
          for (int64_t i = 0; i < m; ++i) {
            double aip = A[i * k + p];
            const double* Gi = G + i * n;
            for (int64_t j = 0; j < n; ++j) GBp[j] += aip * Gi[j];
          }
        }
      }
    });
  }
  return o;
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(av.shape()));
  int64_t m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, m, n]() {
      const Tensor& g = tp->adj_ref(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
    });
  }
  return o;
}

inline Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (shape_numel(shape) != av.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(av.shape()) + " vs " + shape_str(shape));
  Tensor out(shape, av.vec());
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a]() {
      const Tensor& g = tp->adj_ref(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }
  return o;
}

// ====== normalization and attention scaffolding ======

inline Var softmax(Var a, int axis = -1) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  int ax = detail::check_axis(x.shape(), axis, "softmax");
  if (ax != x.rank() - 1) throw ShapeError("softmax: only the last axis is supported");
  int64_t cols = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / cols;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    double mx = xr[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (int64_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, rows, cols]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& y = tp->value(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cols;
        const double* yr = y.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
        double* gar = ga.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) gar[c] += yr[c] * (gr[c] - dot);
      }
    });
  }
  return o;
}

inline Var layer_norm(Var a, int axis = -1, double eps = 1e-5) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  int ax = detail::check_axis(x.shape(), axis, "layer_norm");
  if (ax != x.rank() - 1) throw ShapeError("layer_norm: only the last axis is supported");
  int64_t cols = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / cols;
  Tensor out(x.shape());
  std::vector<double> inv_sd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mu = 0.0;
    for (int64_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sd[static_cast<size_t>(r)] = is;
    double* yr = out.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * is;
  }
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, rows, cols, inv_sd = std::move(inv_sd)]() {
      const Tensor& g = tp->adj_ref(o);
      const Tensor& y = tp->value(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cols;
        const double* yr = y.data() + r * cols;
        double gm = 0.0, gym = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
          gm += gr[c];
          gym += gr[c] * yr[c];
        }
        gm /= static_cast<double>(cols);
        gym /= static_cast<double>(cols);
        double is = inv_sd[static_cast<size_t>(r)];
        double* gar = ga.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) gar[c] += is * (gr[c] - gm - yr[c] * gym);
      }
    });
  }
  return o;
}

// ====== shape surgery ======

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  Tape& t = *parts[0].tape;
  const Tensor& first = t.value(parts[0]);
  int ax = detail::check_axis(first.shape(), axis, "concat");
  Shape out_shape = first.shape();
  int64_t total_axis = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::same_tape(parts[0], p, "concat");
    const Tensor& pv = t.value(p);
    if (pv.rank() != first.rank()) throw ShapeError("concat: rank mismatch " + shape_str(first.shape()) + " vs " + shape_str(pv.shape()));
    for (int d = 0; d < first.rank(); ++d)
      if (d != ax && pv.dim(d) != first.dim(d))
        throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) + " vs " + shape_str(pv.shape()));
    total_axis += pv.dim(ax);
    rg = rg || t.requires_grad(p);
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;
  Tensor out(out_shape);
  auto [outer, inner] = detail::axis_split(out_shape, ax);
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    int64_t w = pv.dim(ax) * inner;
    for (int64_t r = 0; r < outer; ++r)
      for (int64_t c = 0; c < w; ++c) out[r * total_axis * inner + off + c] = pv[r * w + c];
    off += w;
  }
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    std::vector<Var> ps = parts;
    int64_t row_w = total_axis * inner;
    t.set_backward(o, [tp, o, ps, outer, inner, row_w]() {
      const Tensor& g = tp->adj_ref(o);
      int64_t off2 = 0;
      for (Var p : ps) {
        const Tensor& pv = tp->value(p);
        int ax_w = 1;
        (void)ax_w;
        int64_t w = pv.numel() / outer;
        if (tp->requires_grad(p)) {
          Tensor& gp = tp->adj_ref(p);
          for (int64_t r = 0; r < outer; ++r)
            for (int64_t c = 0; c < w; ++c) gp[r * w + c] += g[r * row_w + off2 + c];
        }
        off2 += w;
      }
    });
  }
  return o;
}

inline Var slice(Var a, int axis, int64_t start, int64_t len) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  int ax = detail::check_axis(x.shape(), axis, "slice");
  if (start < 0 || len <= 0 || start + len > x.dim(ax))
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of shape " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = len;
  auto [outer, inner] = detail::axis_split(x.shape(), ax);
  int64_t in_w = x.dim(ax) * inner;
  int64_t out_w = len * inner;
  Tensor out(out_shape);
  for (int64_t r = 0; r < outer; ++r)
    for (int64_t c = 0; c < out_w; ++c) out[r * out_w + c] = x[r * in_w + start * inner + c];
  bool rg = t.requires_grad(a);
  Var o = t.push(std::move(out), rg);
  if (rg) {
    Tape* tp = &t;
    t.set_backward(o, [tp, o, a, outer, inner, in_w, out_w, start]() {
      const Tensor& g = tp->adj_ref(o);
      Tensor& ga = tp->adj_ref(a);
      for (int64_t r = 0; r < outer; ++r)
        for (int64_t c = 0; c < out_w; ++c) ga[r * in_w + start * inner + c] += g[r * out_w + c];
    });
  }
  return o;
}

// Sinusoidal embedding of an integer step, as a constant row vector [1, dim].
inline Var sinusoid_embed(Tape& t, int64_t step, int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) throw ArgumentError("sinusoid_embed: dim must be positive and even");
  Tensor out({1, dim});
  for (int64_t i = 0; i < dim / 2; ++i) {
    double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = std::sin(static_cast<double>(step) * freq);
    out[2 * i + 1] = std::cos(static_cast<double>(step) * freq);
  }
  return t.constant(std::move(out));
}

// ====== functional gradient helpers ======

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline std::vector<Tensor> gradients(const LossFn& fn, const std::vector<Tensor>& params) {
  Tape t;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(t.input(p));
  Var loss = fn(t, vars);
  t.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Var v : vars) out.push_back(t.grad(v));
  return out;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int64_t coords = 0;
};

// Central-difference check of reverse-mode gradients on a random coordinate
// subset. Coordinates where both gradients are below zero_tol are compared
// absolutely instead of relatively.
inline GradCheckReport grad_check(const LossFn& fn, const std::vector<Tensor>& params, Rng& rng,
                                  double h = 1e-5, int64_t max_coords_per_tensor = 4, double zero_tol = 1e-8) {
  std::vector<Tensor> analytic = gradients(fn, params);
  auto eval = [&fn](const std::vector<Tensor>& ps) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const Tensor& p : ps) vars.push_back(t.constant(p));
    Var loss = fn(t, vars);
    const Tensor& v = t.value(loss);
    if (v.numel() != 1) throw ShapeError("grad_check: loss must be scalar");
    return v[0];
  };
  GradCheckReport rep;
  std::vector<Tensor> work = params;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    int64_t n = params[pi].numel();
    std::vector<int64_t> coords;
    if (n <= max_coords_per_tensor) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int64_t i = 0; i < max_coords_per_tensor; ++i) coords.push_back(rng.next_below(n));
    }
    for (int64_t ci : coords) {
      double orig = work[pi][ci];
      double ad = analytic[pi][ci];
      // Fourth-order five-point stencil, evaluated at three step sizes. The
      // best-conditioned step wins per coordinate: noise-limited coordinates
      // need a large step, truncation-limited ones a small step, and a wrong
      // adjoint disagrees at every step.
      double best_diff = std::numeric_limits<double>::infinity();
      double best_fd = 0.0;
      for (double step : {h / 3.0, h, 3.0 * h}) {
        work[pi][ci] = orig + 2.0 * step;
        double lp2 = eval(work);
        work[pi][ci] = orig + step;
        double lp1 = eval(work);
        work[pi][ci] = orig - step;
        double lm1 = eval(work);
        work[pi][ci] = orig - 2.0 * step;
        double lm2 = eval(work);
        work[pi][ci] = orig;
        double fd = (-lp2 + 8.0 * lp1 - 8.0 * lm1 + lm2) / (12.0 * step);
        if (std::abs(fd - ad) < best_diff) {
          best_diff = std::abs(fd - ad);
          best_fd = fd;
        }
      }
      rep.max_abs_err = std::max(rep.max_abs_err, best_diff);
      if (std::abs(best_fd) > zero_tol || std::abs(ad) > zero_tol)
        rep.max_rel_err = std::max(rep.max_rel_err, best_diff / std::max(std::abs(best_fd), std::abs(ad)));
      ++rep.coords;
    }
  }
  return rep;
}

}  // namespace ikdrive
