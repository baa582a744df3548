#pragma once

// Reverse-mode automatic differentiation over a single-step tape.
//
// Tensors are dense row-major-semantics matrices (rows = batch, cols =
// features); a scalar is a 1x1 matrix. Every forward op appends a node to
// the tape, so node ids are topologically ordered by construction.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace copycat::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class OpKind {
  leaf,
  add,
  sub,
  mul_elementwise,
  matmul,
  relu,
  tanh,
  concat_lastdim,
  slice_lastdim,
  scale,
  mean,
  l1_loss,
  l2_loss,
  dropout_apply,
  stop_gradient,
  grad_reverse,
};

const char* op_name(OpKind kind);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Records an input or parameter. Gradients are collected for every leaf.
  Var leaf(Matrix value);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() loss; zeros when unreachable.
  const Matrix& grad(Var v) const;

  /// Accumulates d(loss)/d(node) for every node. loss must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool has_gradients() const { return !grads_.empty(); }

  // Internal: op constructors append through this.
  Var record(OpKind kind, Matrix value, std::vector<std::size_t> inputs,
             double scalar = 0.0, Eigen::Index offset = 0, Matrix aux = {});

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Matrix value;
    double scalar = 0.0;       // scale factor, reversal lambda
    Eigen::Index offset = 0;   // slice start column
    Matrix aux;                // dropout mask, loss weights
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
};

// Binary ops. add() also accepts a 1xN right operand as a bias row broadcast
// over the rows of the left operand.
Var add(Tape& tape, Var a, Var b);
Var sub(Tape& tape, Var a, Var b);
Var mul_elementwise(Tape& tape, Var a, Var b);
Var matmul(Tape& tape, Var a, Var b);

Var relu(Tape& tape, Var x);
Var tanh(Tape& tape, Var x);
Var scale(Tape& tape, Var x, double factor);

Var concat_lastdim(Tape& tape, Var a, Var b);
Var slice_lastdim(Tape& tape, Var x, Eigen::Index start, Eigen::Index count);

/// Mean over every element, shape 1x1.
Var mean(Tape& tape, Var x);

/// Mean absolute / squared error over all elements. With `row_weights` (a
/// column of per-row weights) each row's error sum is scaled before
/// averaging; unit weights reproduce the unweighted value bit-exactly.
Var l1_loss(Tape& tape, Var pred, Var target, const Vector* row_weights = nullptr);
Var l2_loss(Tape& tape, Var pred, Var target, const Vector* row_weights = nullptr);

/// Elementwise multiply by a caller-supplied mask. No rescaling.
Var dropout_apply(Tape& tape, Var x, const Matrix& mask);

Var stop_gradient(Tape& tape, Var x);
/// Identity forward; backward multiplies the incoming gradient by -lambda.
Var grad_reverse(Tape& tape, Var x, double lambda);

/// Generic dispatch by kind. Ops with extra arguments (slice, scale,
/// dropout, grad_reverse) must go through their typed functions.
Var forward_op(Tape& tape, OpKind kind, const std::vector<Var>& inputs);

/// A scalar-valued function of one tensor, built on a fresh tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - central difference| /
/// max(1, |central difference|). Throws on non-finite evaluations.
double finite_diff_check(const ScalarFn& f, const Matrix& point, double h = 1e-6);

/// Central-difference gradient alone (test oracle).
Matrix numeric_gradient(const ScalarFn& f, const Matrix& point, double h = 1e-6);

}  // namespace copycat::ad
