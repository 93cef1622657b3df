#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace equiada {

using Mat = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
struct Value {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
};

/// Records a forward computation over dense double matrices and replays it in
/// reverse to accumulate gradients. A tape is built per forward pass and
/// discarded afterwards; there is no graph reuse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient (inputs, frozen parameters).
  Value constant(Mat v);
  /// Leaf that accumulates a gradient during backward().
  Value param(Mat v);

  const Mat& value(Value v) const;

  /// Gradient of the last backward() root with respect to v. Returns a zero
  /// matrix of v's shape when the root does not depend on v.
  Mat gradient(Value v) const;

  /// Reverse pass seeded at a 1x1 node. Throws std::invalid_argument when the
  /// root is not scalar.
  void backward(Value root);

  int size() const { return static_cast<int>(nodes_.size()); }

  // Building blocks for operations; not part of the modeling surface.
  Value emit(Mat v, bool requires_grad, std::function<void(Tape&)> pull);
  void accumulate(int idx, const Mat& g);
  bool requires_grad(int idx) const { return nodes_[idx].requires_grad; }
  const Mat& val(int idx) const { return nodes_[idx].value; }
  const Mat& grad_of(int idx) const { return nodes_[idx].grad; }

 private:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched by backward()
    bool requires_grad = false;
    std::function<void(Tape&)> pull;
  };

  std::vector<Node> nodes_;
};

// Arithmetic. operator* is the matrix product.
Value operator+(Value a, Value b);
Value operator-(Value a, Value b);
Value operator-(Value a);
Value operator*(Value a, Value b);
Value operator*(double s, Value a);
Value scale(Value a, double s);

/// Product of a 1x1 node with a matrix node.
Value smul(Value scalar, Value a);
/// Elementwise product, equal shapes.
Value cmul(Value a, Value b);
/// Elementwise product of an n x c matrix with an n x 1 column, broadcast.
Value cmul_col(Value a, Value col);
/// Adds a 1 x c row vector to every row of an n x c matrix.
Value add_rowvec(Value a, Value row);
/// Stacks a 1 x c row vector n times.
Value repeat_row(Value row, int n);

Value silu(Value a);
Value sigmoid(Value a);

/// Row gather; indices may repeat.
Value gather_rows(Value a, std::vector<int> idx);
/// Row scatter-add into an out_rows x c zero matrix: out[idx[k]] += a[k].
Value scatter_rows(Value a, std::vector<int> idx, int out_rows);
Value concat_rows(Value a, Value b);
Value concat_cols(const std::vector<Value>& parts);
/// Scales row r by the constant s[r].
Value row_scale(Value a, Eigen::VectorXd s);

/// Per-row squared norm, n x 1.
Value row_sum_sq(Value a);
/// Sum of squares of all entries, 1x1.
Value sum_sq(Value a);
Value sum_all(Value a);
/// Column means, 1 x c.
Value mean_rows(Value a);
/// Subtracts the column mean from every row (projection onto mean-free rows).
Value center_rows(Value a);
Value softmax_rows(Value a);
/// Row-major reshape preserving element order.
Value reshape_rowmajor(Value a, int rows, int cols);
/// Applies the block x block matrix A to each consecutive block of rows of x.
Value block_matmul(Value a, Value x, int block);
/// Single entry as a 1x1 node.
Value cell(Value a, int r, int c);

}  // namespace equiada
