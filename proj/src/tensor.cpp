#include "pairdiff/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace pairdiff {

using detail::NodePtr;
using detail::TensorNode;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

void check_shape(const Shape& s, const char* who) {
  for (int d : s) {
    if (d <= 0)
      throw std::runtime_error(std::string(who) + ": nonpositive extent in shape " + shape_str(s));
  }
}

NodePtr make_leaf(Shape s, std::vector<double> v) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(s);
  n->value = std::move(v);
  return n;
}

}  // namespace

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = false;
  for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(NodePtr(in.n_));
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(const Shape& s) {
  check_shape(s, "zeros");
  return Tensor(make_leaf(s, std::vector<double>(shape_numel(s), 0.0)));
}

Tensor Tensor::full(const Shape& s, double v) {
  check_shape(s, "full");
  if (!std::isfinite(v)) throw std::runtime_error("full: non-finite fill value");
  return Tensor(make_leaf(s, std::vector<double>(shape_numel(s), v)));
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data) {
  check_shape(s, "from_data");
  if (shape_numel(s) != data.size())
    throw std::runtime_error("from_data: shape " + shape_str(s) + " wants " +
                             std::to_string(shape_numel(s)) + " values, got " +
                             std::to_string(data.size()));
  for (double v : data)
    if (!std::isfinite(v)) throw std::runtime_error("from_data: non-finite entry rejected");
  return Tensor(make_leaf(s, std::move(data)));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(const Shape& s, Rng& rng) {
  check_shape(s, "randn");
  std::vector<double> v(shape_numel(s));
  rng.fill_gauss(v);
  return Tensor(make_leaf(s, std::move(v)));
}

static TensorNode& deref(const detail::NodePtr& p, const char* who) {
  if (!p) throw std::runtime_error(std::string(who) + " on undefined tensor");
  return *p;
}

const Shape& Tensor::shape() const { return deref(n_, "shape").shape; }
int Tensor::dim(int i) const { return deref(n_, "dim").shape.at(static_cast<std::size_t>(i)); }
int Tensor::ndim() const { return static_cast<int>(deref(n_, "ndim").shape.size()); }
std::size_t Tensor::size() const { return deref(n_, "size").value.size(); }
const std::vector<double>& Tensor::data() const { return deref(n_, "data").value; }
std::vector<double>& Tensor::mutable_data() { return deref(n_, "mutable_data").value; }

double Tensor::item() const {
  const auto& n = deref(n_, "item");
  if (n.value.size() != 1)
    throw std::runtime_error("item: tensor of shape " + shape_str(n.shape) + " is not scalar");
  return n.value[0];
}

Tensor& Tensor::set_requires_grad(bool b) {
  auto& n = deref(n_, "set_requires_grad");
  if (n.interior())
    throw std::runtime_error("set_requires_grad: only leaf tensors may be toggled");
  n.requires_grad = b;
  return *this;
}

bool Tensor::requires_grad() const { return deref(n_, "requires_grad").requires_grad; }
bool Tensor::has_grad() const { return !deref(n_, "has_grad").grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  auto& n = deref(n_, "grad");
  n.ensure_grad();
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = deref(n_, "zero_grad");
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = deref(n_, "detach");
  return Tensor(make_leaf(n.shape, n.value));
}

// ---------------------------------------------------------------------------
// Graph

ComputationGraph::ComputationGraph(const Tensor& root) : root_(root) {
  if (!root.defined()) throw std::runtime_error("ComputationGraph: undefined root");
  // Iterative post-order DFS; parents visited in creation order so the
  // resulting topological order (and therefore grad accumulation order) is
  // deterministic.
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  TensorNode* r = root.node();
  seen.insert(r);
  stack.push_back({r});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p});
    } else {
      order_.push_back(f.n);
      if (!f.n->interior()) ++leaves_;
      stack.pop_back();
    }
  }
}

void ComputationGraph::backward() {
  if (order_.empty()) throw std::runtime_error("backward: graph already consumed");
  TensorNode* root = order_.back();
  if (root->value.size() != 1)
    throw std::runtime_error("backward: loss of shape " + shape_str(root->shape) +
                             " is not scalar");
  if (!root->requires_grad)
    throw std::runtime_error("backward: loss does not depend on any tracked tensor");
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorNode* n = *it;
    if (n->interior()) n->backprop(*n);
  }
  // free the interior of the graph; leaf grads stay put
  for (TensorNode* n : order_) {
    if (n->interior()) {
      n->parents.clear();
      n->backprop = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  order_.clear();
}

void backward(const Tensor& loss) {
  ComputationGraph g(loss);
  g.backward();
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

struct Bcast {
  Shape out;
  // per-output-dim element strides into a and b; 0 where the input broadcasts
  std::vector<std::size_t> sa, sb;
};

Bcast broadcast(const Shape& a, const Shape& b, const char* who) {
  const std::size_t nd = std::max(a.size(), b.size());
  Bcast r;
  r.out.resize(nd);
  r.sa.assign(nd, 0);
  r.sb.assign(nd, 0);
  // trailing alignment
  std::vector<std::size_t> stA(a.size()), stB(b.size());
  std::size_t acc = 1;
  for (std::size_t i = a.size(); i-- > 0;) {
    stA[i] = acc;
    acc *= static_cast<std::size_t>(a[i]);
  }
  acc = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    stB[i] = acc;
    acc *= static_cast<std::size_t>(b[i]);
  }
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ia = a.size() + i, ib = b.size() + i;  // +i-nd below
    int da = ia >= nd ? a[ia - nd] : 1;
    int db = ib >= nd ? b[ib - nd] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::runtime_error(std::string(who) + ": shapes " + shape_str(a) + " and " +
                               shape_str(b) + " are not broadcast-compatible");
    r.out[i] = std::max(da, db);
    if (ia >= nd && da != 1) r.sa[i] = stA[ia - nd];
    if (ib >= nd && db != 1) r.sb[i] = stB[ib - nd];
  }
  return r;
}

// Walk the broadcast output space in row-major order, handing the callback
// (out_index, a_offset, b_offset). Odometer-style, no div/mod per element.
template <typename F>
void for_each_bcast(const Bcast& bc, F&& f) {
  const std::size_t nd = bc.out.size();
  const std::size_t total = shape_numel(bc.out);
  std::vector<int> coord(nd, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (std::size_t d = nd; d-- > 0;) {
      if (++coord[d] < bc.out[d]) {
        oa += bc.sa[d];
        ob += bc.sb[d];
        break;
      }
      coord[d] = 0;
      oa -= bc.sa[d] * static_cast<std::size_t>(bc.out[d] - 1);
      ob -= bc.sb[d] * static_cast<std::size_t>(bc.out[d] - 1);
    }
  }
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

void accum(TensorNode& n, std::size_t idx, double v) { n.grad[idx] += v; }

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class BinKind { add, sub, mul };

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b, const char* who) {
  const auto& va = a.data();
  const auto& vb = b.data();
  if (same_shape(a.shape(), b.shape())) {
    std::vector<double> out(va.size());
    switch (kind) {
      case BinKind::add:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
        break;
      case BinKind::sub:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
        break;
      case BinKind::mul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
        break;
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [kind, an, bn](TensorNode& self) {
      const auto& g = self.grad;
      if (an->requires_grad) {
        an->ensure_grad();
        if (kind == BinKind::mul)
          for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
        else
          for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        switch (kind) {
          case BinKind::add:
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
            break;
          case BinKind::sub:
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
            break;
          case BinKind::mul:
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
            break;
        }
      }
    });
  }

  Bcast bc = broadcast(a.shape(), b.shape(), who);
  std::vector<double> out(shape_numel(bc.out));
  switch (kind) {
    case BinKind::add:
      for_each_bcast(bc, [&](std::size_t i, std::size_t oa, std::size_t ob) {
        out[i] = va[oa] + vb[ob];
      });
      break;
    case BinKind::sub:
      for_each_bcast(bc, [&](std::size_t i, std::size_t oa, std::size_t ob) {
        out[i] = va[oa] - vb[ob];
      });
      break;
    case BinKind::mul:
      for_each_bcast(bc, [&](std::size_t i, std::size_t oa, std::size_t ob) {
        out[i] = va[oa] * vb[ob];
      });
      break;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op(bc.out, std::move(out), {a, b}, [kind, bc, an, bn](TensorNode& self) {
    const auto& g = self.grad;
    const bool ga = an->requires_grad, gb = bn->requires_grad;
    if (ga) an->ensure_grad();
    if (gb) bn->ensure_grad();
    for_each_bcast(bc, [&](std::size_t i, std::size_t oa, std::size_t ob) {
      switch (kind) {
        case BinKind::add:
          if (ga) accum(*an, oa, g[i]);
          if (gb) accum(*bn, ob, g[i]);
          break;
        case BinKind::sub:
          if (ga) accum(*an, oa, g[i]);
          if (gb) accum(*bn, ob, -g[i]);
          break;
        case BinKind::mul:
          if (ga) accum(*an, oa, g[i] * bn->value[ob]);
          if (gb) accum(*bn, ob, g[i] * an->value[oa]);
          break;
      }
    });
  });
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfn) {
  const auto& va = a.data();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i]);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, dfn](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * dfn(an->value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::mul, a, b, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * sigmoid(x); },
      [](double x) {
        double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b) {
  auto need_b = [&](const char* who) {
    if (b == nullptr || !b->defined())
      throw std::runtime_error(std::string(who) + ": missing second operand");
  };
  switch (op) {
    case EwOp::add:
      need_b("add");
      return add(a, *b);
    case EwOp::sub:
      need_b("sub");
      return sub(a, *b);
    case EwOp::mul:
      need_b("mul");
      return mul(a, *b);
    case EwOp::scale:
      need_b("scale");
      if (b->size() != 1)
        throw std::runtime_error("scale: second operand of shape " + shape_str(b->shape()) +
                                 " is not a single value");
      return mul(a, *b);
    case EwOp::neg:
      return neg(a);
    case EwOp::relu:
      return relu(a);
    case EwOp::silu:
      return silu(a);
    case EwOp::square:
      return square(a);
    case EwOp::abs:
      return abs(a);
  }
  throw std::runtime_error("elementwise: unknown op kind");
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::runtime_error("matmul: expects 2-d operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::runtime_error("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    MapConst A(a.data().data(), m, k);
    MapConst B(b.data().data(), k, n);
    MapMat C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
    MapConst G(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MapConst B(bn->value.data(), k, n);
      MapMat GA(an->grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MapConst A(an->value.data(), m, k);
      MapMat GB(bn->grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM, reflect-101 border)

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct ConvDims {
  int C, H, W, O, K, P, Ho, Wo;
};

// column matrix [C*K*K, Ho*Wo], row-major
void im2col(const std::vector<double>& in, const ConvDims& d, std::vector<double>& cols) {
  const std::size_t ncol = static_cast<std::size_t>(d.Ho) * d.Wo;
  cols.resize(static_cast<std::size_t>(d.C) * d.K * d.K * ncol);
  std::vector<int> ry(static_cast<std::size_t>(d.Ho) * d.K), rx(static_cast<std::size_t>(d.Wo) * d.K);
  for (int o = 0; o < d.Ho; ++o)
    for (int k = 0; k < d.K; ++k) ry[static_cast<std::size_t>(o) * d.K + k] = reflect101(o - d.P + k, d.H);
  for (int o = 0; o < d.Wo; ++o)
    for (int k = 0; k < d.K; ++k) rx[static_cast<std::size_t>(o) * d.K + k] = reflect101(o - d.P + k, d.W);
  for (int c = 0; c < d.C; ++c) {
    const double* plane = in.data() + static_cast<std::size_t>(c) * d.H * d.W;
    for (int ky = 0; ky < d.K; ++ky) {
      for (int kx = 0; kx < d.K; ++kx) {
        double* row =
            cols.data() + (static_cast<std::size_t>(c) * d.K * d.K + static_cast<std::size_t>(ky) * d.K + kx) * ncol;
        for (int oy = 0; oy < d.Ho; ++oy) {
          const double* src = plane + static_cast<std::size_t>(ry[static_cast<std::size_t>(oy) * d.K + ky]) * d.W;
          double* dst = row + static_cast<std::size_t>(oy) * d.Wo;
          for (int ox = 0; ox < d.Wo; ++ox) dst[ox] = src[rx[static_cast<std::size_t>(ox) * d.K + kx]];
        }
      }
    }
  }
}

// scatter-add of the column-space gradient back onto the input grid
void col2im_acc(const std::vector<double>& gcols, const ConvDims& d, std::vector<double>& gin) {
  const std::size_t ncol = static_cast<std::size_t>(d.Ho) * d.Wo;
  std::vector<int> ry(static_cast<std::size_t>(d.Ho) * d.K), rx(static_cast<std::size_t>(d.Wo) * d.K);
  for (int o = 0; o < d.Ho; ++o)
    for (int k = 0; k < d.K; ++k) ry[static_cast<std::size_t>(o) * d.K + k] = reflect101(o - d.P + k, d.H);
  for (int o = 0; o < d.Wo; ++o)
    for (int k = 0; k < d.K; ++k) rx[static_cast<std::size_t>(o) * d.K + k] = reflect101(o - d.P + k, d.W);
  for (int c = 0; c < d.C; ++c) {
    double* plane = gin.data() + static_cast<std::size_t>(c) * d.H * d.W;
    for (int ky = 0; ky < d.K; ++ky) {
      for (int kx = 0; kx < d.K; ++kx) {
        const double* row =
            gcols.data() + (static_cast<std::size_t>(c) * d.K * d.K + static_cast<std::size_t>(ky) * d.K + kx) * ncol;
        for (int oy = 0; oy < d.Ho; ++oy) {
          double* dst = plane + static_cast<std::size_t>(ry[static_cast<std::size_t>(oy) * d.K + ky]) * d.W;
          const double* src = row + static_cast<std::size_t>(oy) * d.Wo;
          for (int ox = 0; ox < d.Wo; ++ox) dst[rx[static_cast<std::size_t>(ox) * d.K + kx]] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int padding) {
  if (input.ndim() != 3)
    throw std::runtime_error("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (kernels.ndim() != 4)
    throw std::runtime_error("conv2d: kernels must be [O,C,k,k], got " +
                             shape_str(kernels.shape()));
  ConvDims d;
  d.C = input.dim(0);
  d.H = input.dim(1);
  d.W = input.dim(2);
  d.O = kernels.dim(0);
  d.K = kernels.dim(2);
  d.P = padding;
  if (kernels.dim(1) != d.C)
    throw std::runtime_error("conv2d: kernel channel count " + shape_str(kernels.shape()) +
                             " does not match input " + shape_str(input.shape()));
  if (kernels.dim(3) != d.K || d.K % 2 == 0)
    throw std::runtime_error("conv2d: kernels must be square with odd k, got " +
                             shape_str(kernels.shape()));
  if (padding < 0) throw std::runtime_error("conv2d: negative padding");
  d.Ho = d.H + 2 * d.P - d.K + 1;
  d.Wo = d.W + 2 * d.P - d.K + 1;
  if (d.Ho <= 0 || d.Wo <= 0)
    throw std::runtime_error("conv2d: kernel larger than padded input (" +
                             shape_str(input.shape()) + " with k=" + std::to_string(d.K) +
                             ", padding=" + std::to_string(d.P) + ")");
  if (d.P >= d.H || d.P >= d.W)
    throw std::runtime_error("conv2d: reflect padding must be smaller than the input extent");

  const std::size_t ncol = static_cast<std::size_t>(d.Ho) * d.Wo;
  const int kk = d.C * d.K * d.K;
  std::vector<double> cols;
  im2col(input.data(), d, cols);
  std::vector<double> out(static_cast<std::size_t>(d.O) * ncol);
  {
    MapConst Km(kernels.data().data(), d.O, kk);
    MapConst Cm(cols.data(), kk, static_cast<int>(ncol));
    MapMat Om(out.data(), d.O, static_cast<int>(ncol));
    Om.noalias() = Km * Cm;
  }
  auto in_n = input.node();
  auto k_n = kernels.node();
  // cols are recomputed in the backward pass instead of being captured: the
  // column matrix is k*k times the input size and guidance builds many graphs.
  return make_op({d.O, d.Ho, d.Wo}, std::move(out), {input, kernels},
                 [in_n, k_n, d, kk, ncol](TensorNode& self) {
                   MapConst G(self.grad.data(), d.O, static_cast<int>(ncol));
                   if (k_n->requires_grad) {
                     k_n->ensure_grad();
                     std::vector<double> cols2;
                     im2col(in_n->value, d, cols2);
                     MapConst Cm(cols2.data(), kk, static_cast<int>(ncol));
                     MapMat GK(k_n->grad.data(), d.O, kk);
                     GK.noalias() += G * Cm.transpose();
                   }
                   if (in_n->requires_grad) {
                     in_n->ensure_grad();
                     std::vector<double> gcols(static_cast<std::size_t>(kk) * ncol);
                     MapConst Km(k_n->value.data(), d.O, kk);
                     MapMat GC(gcols.data(), kk, static_cast<int>(ncol));
                     GC.noalias() = Km.transpose() * G;
                     col2im_acc(gcols, d, in_n->grad);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Tensor sum(const Tensor& a) {
  const auto& va = a.data();
  double acc = 0.0;
  for (double v : va) acc += v;
  auto an = a.node();
  return make_op({1}, {acc}, {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0];
    for (double& gi : an->grad) gi += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto& va = a.data();
  double acc = 0.0;
  for (double v : va) acc += v;
  const double inv = 1.0 / static_cast<double>(va.size());
  auto an = a.node();
  return make_op({1}, {acc * inv}, {a}, [an, inv](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0] * inv;
    for (double& gi : an->grad) gi += g;
  });
}

Tensor reshape(const Tensor& a, const Shape& s) {
  check_shape(s, "reshape");
  if (shape_numel(s) != a.size())
    throw std::runtime_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(s));
  auto an = a.node();
  std::vector<double> out = a.data();  // copies by design: no view aliasing
  return make_op(s, std::move(out), {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

static void check_chw(const Tensor& t, const char* who) {
  if (t.ndim() != 3)
    throw std::runtime_error(std::string(who) + ": expects [C,H,W], got " +
                             shape_str(t.shape()));
}

Tensor slice_channels(const Tensor& a, int c0, int c1) {
  check_chw(a, "slice_channels");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::runtime_error("slice_channels: range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") invalid for " + shape_str(a.shape()));
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(c1 - c0) * plane);
  std::copy(a.data().begin() + c0 * plane, a.data().begin() + c1 * plane, out.begin());
  auto an = a.node();
  return make_op({c1 - c0, H, W}, std::move(out), {a}, [an, c0, plane](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    double* dst = an->grad.data() + static_cast<std::size_t>(c0) * plane;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_chw(a, "concat_channels");
  check_chw(b, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::runtime_error("concat_channels: grid mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
  const int Ca = a.dim(0), Cb = b.dim(0), H = a.dim(1), W = a.dim(2);
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node();
  auto bn = b.node();
  const std::size_t na = a.size();
  return make_op({Ca + Cb, H, W}, std::move(out), {a, b}, [an, bn, na](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = na; i < self.grad.size(); ++i) bn->grad[i - na] += self.grad[i];
    }
  });
}

Tensor avg_pool2d(const Tensor& a, int f) {
  check_chw(a, "avg_pool2d");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (f < 1 || H % f != 0 || W % f != 0)
    throw std::runtime_error("avg_pool2d: factor " + std::to_string(f) +
                             " does not divide " + shape_str(a.shape()));
  const int Ho = H / f, Wo = W / f;
  const double inv = 1.0 / (static_cast<double>(f) * f);
  std::vector<double> out(static_cast<std::size_t>(C) * Ho * Wo, 0.0);
  const auto& va = a.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out[(static_cast<std::size_t>(c) * Ho + y / f) * Wo + x / f] +=
            va[(static_cast<std::size_t>(c) * H + y) * W + x] * inv;
  auto an = a.node();
  return make_op({C, Ho, Wo}, std::move(out), {a}, [an, C, H, W, f, Ho, Wo, inv](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          an->grad[(static_cast<std::size_t>(c) * H + y) * W + x] +=
              self.grad[(static_cast<std::size_t>(c) * Ho + y / f) * Wo + x / f] * inv;
  });
}

Tensor upsample_nearest(const Tensor& a, int f) {
  check_chw(a, "upsample_nearest");
  if (f < 1) throw std::runtime_error("upsample_nearest: factor must be >= 1");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const int Ho = H * f, Wo = W * f;
  std::vector<double> out(static_cast<std::size_t>(C) * Ho * Wo);
  const auto& va = a.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int x = 0; x < Wo; ++x)
        out[(static_cast<std::size_t>(c) * Ho + y) * Wo + x] =
            va[(static_cast<std::size_t>(c) * H + y / f) * W + x / f];
  auto an = a.node();
  return make_op({C, Ho, Wo}, std::move(out), {a}, [an, C, H, W, f, Ho, Wo](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x)
          an->grad[(static_cast<std::size_t>(c) * H + y / f) * W + x / f] +=
              self.grad[(static_cast<std::size_t>(c) * Ho + y) * Wo + x];
  });
}

}  // namespace pairdiff
