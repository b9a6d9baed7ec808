#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pairdiff/rng.hpp"

namespace pairdiff {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One value in the dynamic graph. Interior nodes carry their parent edges and
// a backprop closure until ComputationGraph::backward() releases them; leaves
// keep accumulating into grad until zero_grad().
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first needed

  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  bool interior() const { return static_cast<bool>(backprop); }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);
  // validates that every entry is finite; this is the leaf-construction gate
  static Tensor from_data(const Shape& s, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor randn(const Shape& s, Rng& rng);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const;
  std::size_t size() const;

  const std::vector<double>& data() const;
  // In-place access for optimizers and buffer setup. Only safe between graph
  // passes: mutating a tensor that sits inside a live graph is undefined.
  std::vector<double>& mutable_data();
  double item() const;  // scalar tensors only

  Tensor& set_requires_grad(bool b);
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();
  // value copy with no graph edges and no grad tracking
  Tensor detach() const;

  detail::TensorNode* node() const { return n_.get(); }

 private:
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
  detail::NodePtr n_;

  friend Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> inputs,
                        std::function<void(detail::TensorNode&)> backprop);
};

// Topologically ordered view of everything reachable from a root, split into
// operation records and leaves. backward() seeds d(root)/d(root)=1, sweeps the
// order in reverse, then drops the interior edges so intermediate buffers can
// be reclaimed.
class ComputationGraph {
 public:
  explicit ComputationGraph(const Tensor& root);
  void backward();
  std::size_t node_count() const { return order_.size(); }
  std::size_t leaf_count() const { return leaves_; }

 private:
  Tensor root_;  // keeps the graph alive until backward() releases it
  std::vector<detail::TensorNode*> order_;
  std::size_t leaves_ = 0;
};

// scalar loss -> populates grads of all reachable requires_grad leaves
void backward(const Tensor& loss);

enum class EwOp { add, sub, mul, scale, neg, relu, silu, square, abs };

// Dispatcher form; binary ops broadcast under trailing-dimension rules.
// `scale` expects b to be a single-element tensor.
Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

// input [C_in,H,W] * kernels [C_out,C_in,k,k] -> [C_out,H',W'], k odd.
// Border handling is reflect-101 (edge cell not duplicated), so a constant
// field stays constant under an averaging kernel at padding (k-1)/2.
Tensor conv2d(const Tensor& input, const Tensor& kernels, int padding);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
Tensor reshape(const Tensor& a, const Shape& s);  // copies, per layout contract
Tensor slice_channels(const Tensor& a, int c0, int c1);  // [C,H,W] rows c0..c1-1
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor avg_pool2d(const Tensor& a, int f);
Tensor upsample_nearest(const Tensor& a, int f);

}  // namespace pairdiff
