#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rewardlab/errors.hpp"

namespace rewardlab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

// Dense row-major tensor of 64-bit floats. A tensor is a plain value unless
// it was produced through a Tape, in which case `tape`/`node` identify the
// operation record used by reverse-mode differentiation. All public
// constructors and operations reject non-finite entries.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);
  static Tensor from_vector(std::vector<double> v);  // 1-D

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool tracked() const { return node >= 0; }
  bool is_scalar() const { return numel() == 1; }

  // Value of a one-element tensor.
  double item() const;

  bool same_values(const Tensor& other) const {
    return shape == other.shape && data == other.data;
  }
};

// Append-only record of differentiable operations. Nodes are created in
// topological order (an op always runs after its inputs exist), so backward
// is a single reverse sweep. One tape per training step; a tape and the
// tensors tracked on it must be used from a single thread.
class Tape {
 public:
  // Called with the gradient of the loss w.r.t. this node's output; must
  // accumulate into the node's inputs via Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  // Registers `value` as a differentiable leaf and returns the tracked copy.
  Tensor leaf(const Tensor& value);

  int add_node(Shape out_shape, BackwardFn fn);
  std::size_t node_count() const { return nodes_.size(); }
  const Shape& node_shape(int node) const;

  // Gradient of a scalar-shaped loss w.r.t. every node on the tape, indexed
  // by node id. Nodes that do not influence the loss get zero gradients.
  std::vector<Tensor> backward(const Tensor& loss);

  // For use inside BackwardFn implementations.
  void accumulate(int node, std::span<const double> grad);

 private:
  struct NodeRec {
    Shape shape;
    BackwardFn fn;
  };
  std::vector<NodeRec> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> reached_;
};

// ---- forward ops (tape-aware when any input is tracked) ----

Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with broadcasting: shapes equal, either side scalar, or the
// smaller shape a suffix of the larger (broadcast over leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);   // entries must be strictly positive
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1 + exp(x)), overflow-safe

// Reductions. Rank 1 with axis 0 gives a scalar; rank 2 removes the axis.
Tensor logsumexp(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

struct MinResult {
  Tensor values;
  std::vector<std::size_t> indices;  // argmin along the axis, ties to lowest
};
MinResult min_over_axis(const Tensor& a, std::size_t axis);

// Elementwise min of two same-shape tensors; gradient follows the smaller
// side, ties to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);
// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor reshape(const Tensor& a, Shape s);
// Rows [begin, end) along axis 0.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
// x: {B, C}, cols: B column indices -> {B}.
Tensor take_per_row(const Tensor& a, std::span<const std::size_t> cols);

using TokenView = std::span<const int>;

// Mean of embedding-table rows for each token row: {B, embed_dim}.
Tensor embedding_mean(const Tensor& table, std::span<const TokenView> rows);

// For each row and each position t in [prefix_start, row length), the mean
// embedding of tokens[0..t). Output rows are stacked row-major by (row, t):
// {sum_i (len_i - prefix_start), embed_dim}. This is the autoregressive
// context featurizer: position t's output summarizes everything before the
// token at t.
Tensor prefix_mean_embeddings(const Tensor& table,
                              std::span<const TokenView> rows,
                              std::size_t prefix_start);

}  // namespace rewardlab
