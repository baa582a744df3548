#include "copycat/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace copycat::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << ", " << m.cols() << "]";
  return os.str();
}

[[noreturn]] void shape_mismatch(OpKind kind, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) +
                   " vs " + shape_str(b));
}

double sign_or_zero(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Row-wise partial sums first, so that unit weights reproduce the
// unweighted value bit for bit.
template <typename ElemFn>
double weighted_row_mean(const Matrix& diff, const Vector* w, ElemFn elem) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < diff.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < diff.cols(); ++j) row += elem(diff(i, j));
    total += w ? (*w)(i)*row : row;
  }
  return total / static_cast<double>(diff.size());
}

Var loss_op(Tape& tape, OpKind kind, Var pred, Var target, const Vector* w) {
  const Matrix& p = tape.value(pred);
  const Matrix& t = tape.value(target);
  if (p.rows() != t.rows() || p.cols() != t.cols()) shape_mismatch(kind, p, t);
  if (w && w->size() != p.rows()) {
    throw ShapeError(std::string(op_name(kind)) + ": weight length " +
                     std::to_string(w->size()) + " vs rows " + std::to_string(p.rows()));
  }
  Matrix diff = p - t;
  double value = kind == OpKind::l1_loss
                     ? weighted_row_mean(diff, w, [](double d) { return std::abs(d); })
                     : weighted_row_mean(diff, w, [](double d) { return d * d; });
  Matrix out(1, 1);
  out(0, 0) = value;
  Matrix aux = w ? Matrix(*w) : Matrix();
  return tape.record(kind, std::move(out), {pred.id, target.id}, 0.0, 0, std::move(aux));
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul_elementwise: return "mul_elementwise";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::concat_lastdim: return "concat_lastdim";
    case OpKind::slice_lastdim: return "slice_lastdim";
    case OpKind::scale: return "scale";
    case OpKind::mean: return "mean";
    case OpKind::l1_loss: return "l1_loss";
    case OpKind::l2_loss: return "l2_loss";
    case OpKind::dropout_apply: return "dropout_apply";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::grad_reverse: return "grad_reverse";
  }
  return "unknown";
}

Var Tape::leaf(Matrix value) { return record(OpKind::leaf, std::move(value), {}); }

Var Tape::record(OpKind kind, Matrix value, std::vector<std::size_t> inputs, double scalar,
                 Eigen::Index offset, Matrix aux) {
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw std::out_of_range("tape: input id from another tape");
  }
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), scalar, offset, std::move(aux)});
  grads_.clear();
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::grad(Var v) const {
  if (grads_.empty()) throw std::logic_error("tape: grad() before backward()");
  return grads_.at(v.id);
}

void Tape::backward(Var loss) {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(lv));
  }
  grads_.clear();
  grads_.reserve(nodes_.size());
  for (const auto& n : nodes_) grads_.push_back(Matrix::Zero(n.value.rows(), n.value.cols()));
  grads_[loss.id](0, 0) = 1.0;

  for (std::size_t k = loss.id + 1; k-- > 0;) {
    const Node& n = nodes_[k];
    const Matrix& g = grads_[k];
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::stop_gradient:
        break;
      case OpKind::add: {
        grads_[n.inputs[0]] += g;
        Matrix& gb = grads_[n.inputs[1]];
        if (gb.rows() == g.rows()) {
          gb += g;
        } else {
          gb += g.colwise().sum();
        }
        break;
      }
      case OpKind::sub:
        grads_[n.inputs[0]] += g;
        grads_[n.inputs[1]] -= g;
        break;
      case OpKind::mul_elementwise: {
        const Matrix& a = nodes_[n.inputs[0]].value;
        const Matrix& b = nodes_[n.inputs[1]].value;
        grads_[n.inputs[0]] += g.cwiseProduct(b);
        grads_[n.inputs[1]] += g.cwiseProduct(a);
        break;
      }
      case OpKind::matmul: {
        const Matrix& a = nodes_[n.inputs[0]].value;
        const Matrix& b = nodes_[n.inputs[1]].value;
        grads_[n.inputs[0]].noalias() += g * b.transpose();
        grads_[n.inputs[1]].noalias() += a.transpose() * g;
        break;
      }
      case OpKind::relu: {
        const Matrix& x = nodes_[n.inputs[0]].value;
        grads_[n.inputs[0]] += (x.array() > 0.0).select(g, 0.0);
        break;
      }
      case OpKind::tanh:
        grads_[n.inputs[0]].array() += g.array() * (1.0 - n.value.array().square());
        break;
      case OpKind::concat_lastdim: {
        auto left = nodes_[n.inputs[0]].value.cols();
        auto right = nodes_[n.inputs[1]].value.cols();
        grads_[n.inputs[0]] += g.leftCols(left);
        grads_[n.inputs[1]] += g.rightCols(right);
        break;
      }
      case OpKind::slice_lastdim:
        grads_[n.inputs[0]].middleCols(n.offset, n.value.cols()) += g;
        break;
      case OpKind::scale:
        grads_[n.inputs[0]] += n.scalar * g;
        break;
      case OpKind::mean: {
        const Matrix& x = nodes_[n.inputs[0]].value;
        grads_[n.inputs[0]].array() += g(0, 0) / static_cast<double>(x.size());
        break;
      }
      case OpKind::l1_loss:
      case OpKind::l2_loss: {
        const Matrix& p = nodes_[n.inputs[0]].value;
        const Matrix& t = nodes_[n.inputs[1]].value;
        const double inv_n = g(0, 0) / static_cast<double>(p.size());
        Matrix d(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
          const double w = n.aux.size() ? n.aux(i, 0) : 1.0;
          for (Eigen::Index j = 0; j < p.cols(); ++j) {
            const double r = p(i, j) - t(i, j);
            d(i, j) = w * inv_n * (n.kind == OpKind::l1_loss ? sign_or_zero(r) : 2.0 * r);
          }
        }
        grads_[n.inputs[0]] += d;
        grads_[n.inputs[1]] -= d;
        break;
      }
      case OpKind::dropout_apply:
        grads_[n.inputs[0]] += g.cwiseProduct(n.aux);
        break;
      case OpKind::grad_reverse:
        grads_[n.inputs[0]] += (-n.scalar) * g;
        break;
    }
  }
}

Var add(Tape& tape, Var a, Var b) {
  const Matrix& x = tape.value(a);
  const Matrix& y = tape.value(b);
  if (x.cols() != y.cols() || (x.rows() != y.rows() && y.rows() != 1)) {
    shape_mismatch(OpKind::add, x, y);
  }
  Matrix out = x.rows() == y.rows() ? Matrix(x + y) : Matrix(x.rowwise() + y.row(0));
  return tape.record(OpKind::add, std::move(out), {a.id, b.id});
}

Var sub(Tape& tape, Var a, Var b) {
  const Matrix& x = tape.value(a);
  const Matrix& y = tape.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) shape_mismatch(OpKind::sub, x, y);
  return tape.record(OpKind::sub, x - y, {a.id, b.id});
}

Var mul_elementwise(Tape& tape, Var a, Var b) {
  const Matrix& x = tape.value(a);
  const Matrix& y = tape.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    shape_mismatch(OpKind::mul_elementwise, x, y);
  }
  return tape.record(OpKind::mul_elementwise, x.cwiseProduct(y), {a.id, b.id});
}

Var matmul(Tape& tape, Var a, Var b) {
  const Matrix& x = tape.value(a);
  const Matrix& y = tape.value(b);
  if (x.cols() != y.rows()) shape_mismatch(OpKind::matmul, x, y);
  Matrix out = x * y;
  return tape.record(OpKind::matmul, std::move(out), {a.id, b.id});
}

Var relu(Tape& tape, Var x) {
  return tape.record(OpKind::relu, tape.value(x).cwiseMax(0.0), {x.id});
}

Var tanh(Tape& tape, Var x) {
  return tape.record(OpKind::tanh, tape.value(x).array().tanh().matrix(), {x.id});
}

Var scale(Tape& tape, Var x, double factor) {
  return tape.record(OpKind::scale, factor * tape.value(x), {x.id}, factor);
}

Var concat_lastdim(Tape& tape, Var a, Var b) {
  const Matrix& x = tape.value(a);
  const Matrix& y = tape.value(b);
  if (x.rows() != y.rows()) shape_mismatch(OpKind::concat_lastdim, x, y);
  Matrix out(x.rows(), x.cols() + y.cols());
  out << x, y;
  return tape.record(OpKind::concat_lastdim, std::move(out), {a.id, b.id});
}

Var slice_lastdim(Tape& tape, Var x, Eigen::Index start, Eigen::Index count) {
  const Matrix& v = tape.value(x);
  if (start < 0 || count <= 0 || start + count > v.cols()) {
    throw ShapeError("slice_lastdim: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(v));
  }
  return tape.record(OpKind::slice_lastdim, v.middleCols(start, count), {x.id}, 0.0, start);
}

Var mean(Tape& tape, Var x) {
  const Matrix& v = tape.value(x);
  Matrix out(1, 1);
  out(0, 0) = v.sum() / static_cast<double>(v.size());
  return tape.record(OpKind::mean, std::move(out), {x.id});
}

Var l1_loss(Tape& tape, Var pred, Var target, const Vector* row_weights) {
  return loss_op(tape, OpKind::l1_loss, pred, target, row_weights);
}

Var l2_loss(Tape& tape, Var pred, Var target, const Vector* row_weights) {
  return loss_op(tape, OpKind::l2_loss, pred, target, row_weights);
}

Var dropout_apply(Tape& tape, Var x, const Matrix& mask) {
  const Matrix& v = tape.value(x);
  if (v.rows() != mask.rows() || v.cols() != mask.cols()) {
    shape_mismatch(OpKind::dropout_apply, v, mask);
  }
  return tape.record(OpKind::dropout_apply, v.cwiseProduct(mask), {x.id}, 0.0, 0, mask);
}

Var stop_gradient(Tape& tape, Var x) {
  return tape.record(OpKind::stop_gradient, tape.value(x), {x.id});
}

Var grad_reverse(Tape& tape, Var x, double lambda) {
  return tape.record(OpKind::grad_reverse, tape.value(x), {x.id}, lambda);
}

Var forward_op(Tape& tape, OpKind kind, const std::vector<Var>& in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(tape, in[0], in[1]);
    case OpKind::sub: need(2); return sub(tape, in[0], in[1]);
    case OpKind::mul_elementwise: need(2); return mul_elementwise(tape, in[0], in[1]);
    case OpKind::matmul: need(2); return matmul(tape, in[0], in[1]);
    case OpKind::relu: need(1); return relu(tape, in[0]);
    case OpKind::tanh: need(1); return tanh(tape, in[0]);
    case OpKind::concat_lastdim: need(2); return concat_lastdim(tape, in[0], in[1]);
    case OpKind::mean: need(1); return mean(tape, in[0]);
    case OpKind::l1_loss: need(2); return l1_loss(tape, in[0], in[1]);
    case OpKind::l2_loss: need(2); return l2_loss(tape, in[0], in[1]);
    case OpKind::stop_gradient: need(1); return stop_gradient(tape, in[0]);
    default:
      throw std::invalid_argument(std::string("forward_op: kind '") + op_name(kind) +
                                  "' needs its typed constructor");
  }
}

namespace {

double eval_scalar(const ScalarFn& f, const Matrix& x) {
  Tape tape;
  Var out = f(tape, tape.leaf(x));
  const Matrix& v = tape.value(out);
  if (v.size() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
  if (!std::isfinite(v(0, 0))) throw std::domain_error("finite_diff_check: non-finite value");
  return v(0, 0);
}

}  // namespace

Matrix numeric_gradient(const ScalarFn& f, const Matrix& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  Matrix g(point.rows(), point.cols());
  Matrix x = point;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double fp = eval_scalar(f, x);
    x.data()[i] = orig - h;
    const double fm = eval_scalar(f, x);
    x.data()[i] = orig;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double finite_diff_check(const ScalarFn& f, const Matrix& point, double h) {
  Tape tape;
  Var x = tape.leaf(point);
  Var out = f(tape, x);
  if (!std::isfinite(tape.value(out)(0, 0))) {
    throw std::domain_error("finite_diff_check: non-finite value");
  }
  tape.backward(out);
  const Matrix analytic = tape.grad(x);
  const Matrix numeric = numeric_gradient(f, point, h);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double fd = numeric.data()[i];
    const double err = std::abs(analytic.data()[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace copycat::ad
