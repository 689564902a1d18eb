#include "rewardlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace rewardlab {

namespace {

void check_finite(std::span<const double> data, const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
}

// Resolves the tape for an op over up to two operands; both tracked operands
// must live on the same tape.
Tape* tape_of(const Tensor& a, const Tensor& b) {
  if (a.tracked() && b.tracked() && a.tape != b.tape) {
    throw ContractError("operands tracked on different tapes");
  }
  if (a.tracked()) return a.tape;
  if (b.tracked()) return b.tape;
  return nullptr;
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op) {
  check_finite(data, op);
  return Tensor(std::move(shape), std::move(data));
}

void attach(Tensor& out, Tape* tape, Tape::BackwardFn fn) {
  if (tape == nullptr) return;
  out.tape = tape;
  out.node = tape->add_node(out.shape, std::move(fn));
}

// Broadcasting layout between two shapes: `outer` repeats of the smaller
// operand's `inner` elements. none => identical shapes.
struct Broadcast {
  enum Kind { none, a_small, b_small } kind = none;
  std::size_t outer = 1;
  std::size_t inner = 0;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast analyze_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (a.shape == b.shape) {
    bc.kind = Broadcast::none;
    bc.inner = a.numel();
    return bc;
  }
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  if (b_scalar || (!a_scalar && is_suffix(b.shape, a.shape))) {
    bc.kind = Broadcast::b_small;
    bc.inner = b.numel();
    bc.outer = a.numel() / std::max<std::size_t>(bc.inner, 1);
    return bc;
  }
  if (a_scalar || is_suffix(a.shape, b.shape)) {
    bc.kind = Broadcast::a_small;
    bc.inner = a.numel();
    bc.outer = b.numel() / std::max<std::size_t>(bc.inner, 1);
    return bc;
  }
  throw DimensionError(std::string(op) + ": shapes not broadcastable: " +
                       shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Sums `grad` (shaped like the broadcast result) down to the smaller
// operand's shape.
std::vector<double> reduce_to_small(std::span<const double> grad,
                                    std::size_t outer, std::size_t inner) {
  std::vector<double> out(inner, 0.0);
  for (std::size_t blk = 0; blk < outer; ++blk) {
    const double* g = grad.data() + blk * inner;
    for (std::size_t j = 0; j < inner; ++j) out[j] += g[j];
  }
  return out;
}

// Shared machinery for add/sub/mul: forward combine plus per-side gradient
// factories that honor the broadcast layout.
template <typename Fwd, typename DA, typename DB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op,
                          Fwd&& fwd, DA&& grad_a, DB&& grad_b) {
  const Broadcast bc = analyze_broadcast(a, b, op);
  const Shape& out_shape = (bc.kind == Broadcast::a_small) ? b.shape : a.shape;
  const std::size_t n = shape_numel(out_shape);

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double av = (bc.kind == Broadcast::a_small) ? a.data[i % bc.inner] : a.data[i];
    const double bv = (bc.kind == Broadcast::b_small) ? b.data[i % bc.inner] : b.data[i];
    out[i] = fwd(av, bv);
  }
  Tensor result = make_result(out_shape, std::move(out), op);

  Tape* tape = tape_of(a, b);
  if (tape != nullptr) {
    const int na = a.node;
    const int nb = b.node;
    std::vector<double> av = a.data;
    std::vector<double> bv = b.data;
    attach(result, tape,
           [na, nb, bc, av = std::move(av), bv = std::move(bv), grad_a,
            grad_b](Tape& t, const Tensor& up) {
             const std::size_t n = up.numel();
             if (na >= 0) {
               std::vector<double> g(n);
               for (std::size_t i = 0; i < n; ++i) {
                 const double x = (bc.kind == Broadcast::a_small) ? av[i % bc.inner] : av[i];
                 const double y = (bc.kind == Broadcast::b_small) ? bv[i % bc.inner] : bv[i];
                 g[i] = up.data[i] * grad_a(x, y);
               }
               if (bc.kind == Broadcast::a_small) {
                 t.accumulate(na, reduce_to_small(g, bc.outer, bc.inner));
               } else {
                 t.accumulate(na, g);
               }
             }
             if (nb >= 0) {
               std::vector<double> g(n);
               for (std::size_t i = 0; i < n; ++i) {
                 const double x = (bc.kind == Broadcast::a_small) ? av[i % bc.inner] : av[i];
                 const double y = (bc.kind == Broadcast::b_small) ? bv[i % bc.inner] : bv[i];
                 g[i] = up.data[i] * grad_b(x, y);
               }
               if (bc.kind == Broadcast::b_small) {
                 t.accumulate(nb, reduce_to_small(g, bc.outer, bc.inner));
               } else {
                 t.accumulate(nb, g);
               }
             }
           });
  }
  return result;
}

// Unary elementwise op where the local derivative is a function of the
// forward output (dy) or the input (dx); pick via flag.
template <typename Fwd, typename Dv>
Tensor unary_elementwise(const Tensor& a, const char* op, Fwd&& fwd, Dv&& dv,
                         bool deriv_from_output) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = fwd(a.data[i]);
  Tensor result = make_result(a.shape, std::move(out), op);

  if (a.tracked()) {
    const int na = a.node;
    std::vector<double> saved = deriv_from_output ? result.data : a.data;
    attach(result, a.tape,
           [na, saved = std::move(saved), dv](Tape& t, const Tensor& up) {
             std::vector<double> g(up.numel());
             for (std::size_t i = 0; i < g.size(); ++i) {
               g[i] = up.data[i] * dv(saved[i]);
             }
             t.accumulate(na, g);
           });
  }
  return result;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

void require_rank12(const Tensor& a, std::size_t axis, const char* op) {
  if (a.rank() == 0 || a.rank() > 2) {
    throw DimensionError(std::string(op) + ": expects rank 1 or 2, got shape " +
                         shape_str(a.shape));
  }
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis out of range for shape " +
                         shape_str(a.shape));
  }
}

// Views a rank-1/2 tensor as `groups` independent lanes of `extent` strided
// elements, where the reduction runs over the axis.
struct AxisView {
  std::size_t groups;  // number of output elements
  std::size_t extent;  // elements reduced per group
  std::size_t group_stride;
  std::size_t elem_stride;
  Shape out_shape;
};

AxisView axis_view(const Tensor& a, std::size_t axis, const char* op) {
  require_rank12(a, axis, op);
  AxisView v;
  if (a.rank() == 1) {
    v.groups = 1;
    v.extent = a.shape[0];
    v.group_stride = 0;
    v.elem_stride = 1;
    v.out_shape = {1};
    return v;
  }
  const std::size_t rows = a.shape[0];
  const std::size_t cols = a.shape[1];
  if (axis == 1) {
    v.groups = rows;
    v.extent = cols;
    v.group_stride = cols;
    v.elem_stride = 1;
    v.out_shape = {rows};
  } else {
    v.groups = cols;
    v.extent = rows;
    v.group_stride = 1;
    v.elem_stride = cols;
    v.out_shape = {cols};
  }
  return v;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) os << ",";
    os << s[i];
  }
  os << "}";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  for (std::size_t dim : shape) {
    if (dim == 0) throw DimensionError("tensor dimensions must be positive");
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  check_finite(data, "tensor");
}

Tensor Tensor::zeros(Shape s) {
  std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape s, double v) {
  std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::from_vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

double Tensor::item() const {
  if (!is_scalar()) {
    throw ContractError("item() requires a one-element tensor, got shape " +
                        shape_str(shape));
  }
  return data[0];
}

// ---- Tape ----

Tensor Tape::leaf(const Tensor& value) {
  Tensor out = value;
  out.tape = this;
  out.node = add_node(out.shape, nullptr);
  return out;
}

int Tape::add_node(Shape out_shape, BackwardFn fn) {
  nodes_.push_back(NodeRec{std::move(out_shape), std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

const Shape& Tape::node_shape(int node) const {
  return nodes_[static_cast<std::size_t>(node)].shape;
}

void Tape::accumulate(int node, std::span<const double> grad) {
  if (node < 0) return;  // untracked operand: a constant for this tape
  auto& slot = grads_[static_cast<std::size_t>(node)];
  if (slot.data.size() != grad.size()) {
    throw ContractError("gradient accumulation shape mismatch");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) slot.data[i] += grad[i];
  reached_[static_cast<std::size_t>(node)] = 1;
}

std::vector<Tensor> Tape::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.tape != this) {
    throw ContractError("backward: loss is not tracked on this tape");
  }
  if (!loss.is_scalar()) {
    throw ContractError("backward: loss must be scalar-shaped, got " +
                        shape_str(loss.shape));
  }
  grads_.clear();
  grads_.reserve(nodes_.size());
  for (const NodeRec& n : nodes_) grads_.push_back(Tensor::zeros(n.shape));
  reached_.assign(nodes_.size(), 0);

  const int loss_node = loss.node;
  grads_[static_cast<std::size_t>(loss_node)].data[0] = 1.0;
  reached_[static_cast<std::size_t>(loss_node)] = 1;

  for (int i = loss_node; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    if (!reached_[idx] || !nodes_[idx].fn) continue;
    nodes_[idx].fn(*this, grads_[idx]);
  }
  reached_.clear();
  return std::move(grads_);
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape) +
                         " x " + shape_str(b.shape));
  }
  const std::size_t m = a.shape[0];
  const std::size_t k = a.shape[1];
  const std::size_t n = b.shape[1];

  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* crow = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b.data.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  Tensor result = make_result({m, n}, std::move(out), "matmul");

  Tape* tape = tape_of(a, b);
  if (tape != nullptr) {
    const int na = a.node;
    const int nb = b.node;
    std::vector<double> av = a.data;
    std::vector<double> bv = b.data;
    attach(result, tape,
           [na, nb, m, k, n, av = std::move(av),
            bv = std::move(bv)](Tape& t, const Tensor& up) {
             if (na >= 0) {
               // dA = up . B^T
               std::vector<double> g(m * k, 0.0);
               for (std::size_t i = 0; i < m; ++i) {
                 const double* urow = up.data.data() + i * n;
                 double* grow = g.data() + i * k;
                 for (std::size_t kk = 0; kk < k; ++kk) {
                   const double* brow = bv.data() + kk * n;
                   double acc = 0.0;
                   for (std::size_t j = 0; j < n; ++j) acc += urow[j] * brow[j];
                   grow[kk] = acc;
                 }
               }
               t.accumulate(na, g);
             }
             if (nb >= 0) {
               // dB = A^T . up
               std::vector<double> g(k * n, 0.0);
               for (std::size_t i = 0; i < m; ++i) {
                 const double* arow = av.data() + i * k;
                 const double* urow = up.data.data() + i * n;
                 for (std::size_t kk = 0; kk < k; ++kk) {
                   const double aval = arow[kk];
                   double* grow = g.data() + kk * n;
                   for (std::size_t j = 0; j < n; ++j) grow[j] += aval * urow[j];
                 }
               }
               t.accumulate(nb, g);
             }
           });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor add(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

Tensor neg(const Tensor& a) {
  return unary_elementwise(
      a, "neg", [](double x) { return -x; }, [](double) { return -1.0; },
      false);
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double y) { return 1.0 - y * y; }, true);
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, "sigmoid", [](double x) { return stable_sigmoid(x); },
      [](double y) { return y * (1.0 - y); }, true);
}

Tensor log(const Tensor& a) {
  for (double v : a.data) {
    if (!(v > 0.0)) throw NumericError("log: input must be strictly positive");
  }
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; }, false);
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](double x) { return std::exp(x); },
      [](double y) { return y; }, true);
}

Tensor softplus(const Tensor& a) {
  return unary_elementwise(
      a, "softplus", [](double x) { return stable_softplus(x); },
      [](double x) { return stable_sigmoid(x); }, false);
}

Tensor logsumexp(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a, axis, "logsumexp");
  std::vector<double> out(v.groups);
  for (std::size_t g = 0; g < v.groups; ++g) {
    const double* base = a.data.data() + g * v.group_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < v.extent; ++e) {
      mx = std::max(mx, base[e * v.elem_stride]);
    }
    double s = 0.0;
    for (std::size_t e = 0; e < v.extent; ++e) {
      s += std::exp(base[e * v.elem_stride] - mx);
    }
    out[g] = mx + std::log(s);
  }
  Tensor result = make_result(v.out_shape, std::move(out), "logsumexp");

  if (a.tracked()) {
    const int na = a.node;
    std::vector<double> xv = a.data;
    std::vector<double> lse = result.data;
    attach(result, a.tape,
           [na, v, xv = std::move(xv), lse = std::move(lse)](Tape& t,
                                                             const Tensor& up) {
             std::vector<double> g(xv.size(), 0.0);
             for (std::size_t grp = 0; grp < v.groups; ++grp) {
               const double u = up.data[grp];
               for (std::size_t e = 0; e < v.extent; ++e) {
                 const std::size_t i = grp * v.group_stride + e * v.elem_stride;
                 g[i] = u * std::exp(xv[i] - lse[grp]);
               }
             }
             t.accumulate(na, g);
           });
  }
  return result;
}

namespace {

Tensor reduce_axis(const Tensor& a, std::size_t axis, const char* op,
                   double scale) {
  const AxisView v = axis_view(a, axis, op);
  std::vector<double> out(v.groups, 0.0);
  for (std::size_t g = 0; g < v.groups; ++g) {
    const double* base = a.data.data() + g * v.group_stride;
    double s = 0.0;
    for (std::size_t e = 0; e < v.extent; ++e) s += base[e * v.elem_stride];
    out[g] = s * scale;
  }
  Tensor result = make_result(v.out_shape, std::move(out), op);
  if (a.tracked()) {
    const int na = a.node;
    const std::size_t total = a.numel();
    attach(result, a.tape,
           [na, v, scale, total](Tape& t, const Tensor& up) {
             std::vector<double> g(total, 0.0);
             for (std::size_t grp = 0; grp < v.groups; ++grp) {
               const double u = up.data[grp] * scale;
               for (std::size_t e = 0; e < v.extent; ++e) {
                 g[grp * v.group_stride + e * v.elem_stride] = u;
               }
             }
             t.accumulate(na, g);
           });
  }
  return result;
}

Tensor reduce_all(const Tensor& a, const char* op, double scale) {
  double s = 0.0;
  for (double x : a.data) s += x;
  Tensor result = make_result({1}, {s * scale}, op);
  if (a.tracked()) {
    const int na = a.node;
    const std::size_t total = a.numel();
    attach(result, a.tape, [na, scale, total](Tape& t, const Tensor& up) {
      std::vector<double> g(total, up.data[0] * scale);
      t.accumulate(na, g);
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_all(a, "sum", 1.0); }

Tensor sum(const Tensor& a, std::size_t axis) {
  return reduce_axis(a, axis, "sum", 1.0);
}

Tensor mean(const Tensor& a) {
  return reduce_all(a, "mean", 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a, axis, "mean");
  return reduce_axis(a, axis, "mean", 1.0 / static_cast<double>(v.extent));
}

MinResult min_over_axis(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a, axis, "min_over_axis");
  std::vector<double> out(v.groups);
  std::vector<std::size_t> argmin(v.groups, 0);
  for (std::size_t g = 0; g < v.groups; ++g) {
    const double* base = a.data.data() + g * v.group_stride;
    double best = base[0];
    std::size_t best_e = 0;
    for (std::size_t e = 1; e < v.extent; ++e) {
      const double x = base[e * v.elem_stride];
      if (x < best) {  // strict: ties stay at the lowest index
        best = x;
        best_e = e;
      }
    }
    out[g] = best;
    argmin[g] = best_e;
  }
  MinResult res;
  res.values = make_result(v.out_shape, std::move(out), "min_over_axis");
  res.indices = std::move(argmin);

  if (a.tracked()) {
    const int na = a.node;
    const std::size_t total = a.numel();
    std::vector<std::size_t> idx = res.indices;
    attach(res.values, a.tape,
           [na, v, total, idx = std::move(idx)](Tape& t, const Tensor& up) {
             // Subgradient: route everything to the argmin element.
             std::vector<double> g(total, 0.0);
             for (std::size_t grp = 0; grp < v.groups; ++grp) {
               g[grp * v.group_stride + idx[grp] * v.elem_stride] = up.data[grp];
             }
             t.accumulate(na, g);
           });
  }
  return res;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError("minimum: shapes differ: " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
  }
  return binary_elementwise(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw InputError("clamp: lo must be <= hi");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = std::min(std::max(a.data[i], lo), hi);
  }
  Tensor result = make_result(a.shape, std::move(out), "clamp");
  if (a.tracked()) {
    const int na = a.node;
    std::vector<double> xv = a.data;
    attach(result, a.tape,
           [na, lo, hi, xv = std::move(xv)](Tape& t, const Tensor& up) {
             std::vector<double> g(xv.size());
             for (std::size_t i = 0; i < g.size(); ++i) {
               g[i] = (xv[i] >= lo && xv[i] <= hi) ? up.data[i] : 0.0;
             }
             t.accumulate(na, g);
           });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape) +
                         " as " + shape_str(s));
  }
  Tensor result = Tensor(std::move(s), a.data);
  if (a.tracked()) {
    const int na = a.node;
    attach(result, a.tape, [na](Tape& t, const Tensor& up) {
      t.accumulate(na, up.data);  // row-major view: gradient passes through
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0) throw DimensionError("slice_rows: rank-0 tensor");
  const std::size_t rows = a.shape[0];
  if (begin >= end || end > rows) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for shape " +
                         shape_str(a.shape));
  }
  const std::size_t row_size = a.numel() / rows;
  Shape out_shape = a.shape;
  out_shape[0] = end - begin;
  std::vector<double> out(a.data.begin() + static_cast<std::ptrdiff_t>(begin * row_size),
                          a.data.begin() + static_cast<std::ptrdiff_t>(end * row_size));
  Tensor result = make_result(std::move(out_shape), std::move(out), "slice_rows");
  if (a.tracked()) {
    const int na = a.node;
    const std::size_t total = a.numel();
    attach(result, a.tape,
           [na, begin, row_size, total](Tape& t, const Tensor& up) {
             std::vector<double> g(total, 0.0);
             std::copy(up.data.begin(), up.data.end(),
                       g.begin() + static_cast<std::ptrdiff_t>(begin * row_size));
             t.accumulate(na, g);
           });
  }
  return result;
}

Tensor take_per_row(const Tensor& a, std::span<const std::size_t> cols) {
  if (a.rank() != 2) {
    throw DimensionError("take_per_row: expects rank 2, got " +
                         shape_str(a.shape));
  }
  const std::size_t rows = a.shape[0];
  const std::size_t width = a.shape[1];
  if (cols.size() != rows) {
    throw DimensionError("take_per_row: need one column index per row");
  }
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (cols[i] >= width) {
      throw InputError("take_per_row: column index out of range");
    }
    out[i] = a.data[i * width + cols[i]];
  }
  Tensor result = make_result({rows}, std::move(out), "take_per_row");
  if (a.tracked()) {
    const int na = a.node;
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    attach(result, a.tape,
           [na, rows, width, idx = std::move(idx)](Tape& t, const Tensor& up) {
             std::vector<double> g(rows * width, 0.0);
             for (std::size_t i = 0; i < rows; ++i) {
               g[i * width + idx[i]] = up.data[i];
             }
             t.accumulate(na, g);
           });
  }
  return result;
}

namespace {

void check_tokens(TokenView tokens, std::size_t vocab, const char* op) {
  if (tokens.empty()) {
    throw InputError(std::string(op) + ": empty token sequence");
  }
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw InputError(std::string(op) + ": token " + std::to_string(tok) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

}  // namespace

Tensor embedding_mean(const Tensor& table, std::span<const TokenView> rows) {
  if (table.rank() != 2) {
    throw DimensionError("embedding_mean: table must be rank 2");
  }
  const std::size_t vocab = table.shape[0];
  const std::size_t dim = table.shape[1];
  if (rows.empty()) throw InputError("embedding_mean: no rows");

  std::vector<double> out(rows.size() * dim, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check_tokens(rows[r], vocab, "embedding_mean");
    double* orow = out.data() + r * dim;
    for (int tok : rows[r]) {
      const double* trow = table.data.data() + static_cast<std::size_t>(tok) * dim;
      for (std::size_t j = 0; j < dim; ++j) orow[j] += trow[j];
    }
    const double inv = 1.0 / static_cast<double>(rows[r].size());
    for (std::size_t j = 0; j < dim; ++j) orow[j] *= inv;
  }
  Tensor result = make_result({rows.size(), dim}, std::move(out), "embedding_mean");

  if (table.tracked()) {
    const int nt = table.node;
    std::vector<std::vector<int>> toks;
    toks.reserve(rows.size());
    for (const TokenView& r : rows) toks.emplace_back(r.begin(), r.end());
    const std::size_t total = table.numel();
    attach(result, table.tape,
           [nt, dim, total, toks = std::move(toks)](Tape& t, const Tensor& up) {
             std::vector<double> g(total, 0.0);
             for (std::size_t r = 0; r < toks.size(); ++r) {
               const double inv = 1.0 / static_cast<double>(toks[r].size());
               const double* urow = up.data.data() + r * dim;
               for (int tok : toks[r]) {
                 double* grow = g.data() + static_cast<std::size_t>(tok) * dim;
                 for (std::size_t j = 0; j < dim; ++j) grow[j] += urow[j] * inv;
               }
             }
             t.accumulate(nt, g);
           });
  }
  return result;
}

Tensor prefix_mean_embeddings(const Tensor& table,
                              std::span<const TokenView> rows,
                              std::size_t prefix_start) {
  if (table.rank() != 2) {
    throw DimensionError("prefix_mean_embeddings: table must be rank 2");
  }
  if (prefix_start == 0) {
    throw InputError("prefix_mean_embeddings: prefix_start must be >= 1");
  }
  const std::size_t vocab = table.shape[0];
  const std::size_t dim = table.shape[1];

  std::size_t out_rows = 0;
  for (const TokenView& r : rows) {
    check_tokens(r, vocab, "prefix_mean_embeddings");
    if (r.size() < prefix_start) {
      throw InputError("prefix_mean_embeddings: row shorter than prefix_start");
    }
    out_rows += r.size() - prefix_start;
  }
  if (out_rows == 0) {
    throw InputError("prefix_mean_embeddings: no positions to featurize");
  }

  std::vector<double> out(out_rows * dim, 0.0);
  std::size_t cursor = 0;
  std::vector<double> acc(dim);
  for (const TokenView& r : rows) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < r.size(); ++t) {
      const double* trow =
          table.data.data() + static_cast<std::size_t>(r[t]) * dim;
      if (t >= prefix_start) {
        const double inv = 1.0 / static_cast<double>(t);
        double* orow = out.data() + cursor * dim;
        for (std::size_t j = 0; j < dim; ++j) orow[j] = acc[j] * inv;
        ++cursor;
      }
      for (std::size_t j = 0; j < dim; ++j) acc[j] += trow[j];
    }
  }
  Tensor result =
      make_result({out_rows, dim}, std::move(out), "prefix_mean_embeddings");

  if (table.tracked()) {
    const int nt = table.node;
    std::vector<std::vector<int>> toks;
    toks.reserve(rows.size());
    for (const TokenView& r : rows) toks.emplace_back(r.begin(), r.end());
    const std::size_t total = table.numel();
    attach(result, table.tape,
           [nt, dim, total, prefix_start, toks = std::move(toks)](
               Tape& t, const Tensor& up) {
             std::vector<double> g(total, 0.0);
             std::size_t cursor = 0;
             for (const auto& r : toks) {
               for (std::size_t pos = prefix_start; pos < r.size(); ++pos) {
                 const double inv = 1.0 / static_cast<double>(pos);
                 const double* urow = up.data.data() + cursor * dim;
                 for (std::size_t p = 0; p < pos; ++p) {
                   double* grow =
                       g.data() + static_cast<std::size_t>(r[p]) * dim;
                   for (std::size_t j = 0; j < dim; ++j) {
                     grow[j] += urow[j] * inv;
                   }
                 }
                 ++cursor;
               }
             }
             t.accumulate(nt, g);
           });
  }
  return result;
}

}  // namespace rewardlab
