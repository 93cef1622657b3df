#include "equiada/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace equiada {

namespace {

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and "
     << b.rows() << "x" << b.cols();
  throw std::invalid_argument(os.str());
}

Tape* same_tape(Value a, Value b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument("op: values must live on the same tape");
  }
  return a.tape;
}

}  // namespace

Value Tape::emit(Mat v, bool requires_grad, std::function<void(Tape&)> pull) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::constant(Mat v) { return emit(std::move(v), false, nullptr); }

Value Tape::param(Mat v) { return emit(std::move(v), true, nullptr); }

const Mat& Tape::value(Value v) const {
  if (v.tape != this) throw std::invalid_argument("value: foreign tape handle");
  return nodes_.at(v.idx).value;
}

Mat Tape::gradient(Value v) const {
  if (v.tape != this) throw std::invalid_argument("gradient: foreign tape handle");
  const Node& n = nodes_.at(v.idx);
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int idx, const Mat& g) {
  Node& n = nodes_[idx];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Value root) {
  if (root.tape != this) throw std::invalid_argument("backward: foreign tape handle");
  const Mat& r = nodes_.at(root.idx).value;
  if (r.rows() != 1 || r.cols() != 1) {
    std::ostringstream os;
    os << "backward: root must be a 1x1 scalar, got " << r.rows() << "x" << r.cols();
    throw std::invalid_argument(os.str());
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.idx].grad = Mat::Ones(1, 1);
  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.pull) continue;
    n.pull(*this);
  }
}

Value operator+(Value a, Value b) {
  Tape* t = same_tape(a, b);
  const Mat& va = t->val(a.idx);
  const Mat& vb = t->val(b.idx);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("add", va, vb);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(b.idx);
  int out = t->size(), ai = a.idx, bi = b.idx;
  return t->emit(va + vb, rg, rg ? std::function<void(Tape&)>([out, ai, bi](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  }) : nullptr);
}

Value operator-(Value a, Value b) {
  Tape* t = same_tape(a, b);
  const Mat& va = t->val(a.idx);
  const Mat& vb = t->val(b.idx);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("sub", va, vb);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(b.idx);
  int out = t->size(), ai = a.idx, bi = b.idx;
  return t->emit(va - vb, rg, rg ? std::function<void(Tape&)>([out, ai, bi](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    tp.accumulate(ai, g);
    tp.accumulate(bi, Mat(-g));
  }) : nullptr);
}

Value operator-(Value a) { return scale(a, -1.0); }

Value operator*(Value a, Value b) {
  Tape* t = same_tape(a, b);
  const Mat& va = t->val(a.idx);
  const Mat& vb = t->val(b.idx);
  if (va.cols() != vb.rows()) shape_error("matmul", va, vb);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(b.idx);
  int out = t->size(), ai = a.idx, bi = b.idx;
  return t->emit(va * vb, rg, rg ? std::function<void(Tape&)>([out, ai, bi](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    tp.accumulate(ai, g * tp.val(bi).transpose());
    tp.accumulate(bi, tp.val(ai).transpose() * g);
  }) : nullptr);
}

Value scale(Value a, double s) {
  Tape* t = a.tape;
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(t->val(a.idx) * s, rg, rg ? std::function<void(Tape&)>([out, ai, s](Tape& tp) {
    tp.accumulate(ai, Mat(tp.grad_of(out) * s));
  }) : nullptr);
}

Value operator*(double s, Value a) { return scale(a, s); }

Value smul(Value scalar, Value a) {
  Tape* t = same_tape(scalar, a);
  const Mat& vs = t->val(scalar.idx);
  if (vs.rows() != 1 || vs.cols() != 1) {
    throw std::invalid_argument("smul: first argument must be 1x1");
  }
  bool rg = t->requires_grad(scalar.idx) || t->requires_grad(a.idx);
  int out = t->size(), si = scalar.idx, ai = a.idx;
  return t->emit(t->val(a.idx) * vs(0, 0), rg,
                 rg ? std::function<void(Tape&)>([out, si, ai](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   Mat gs(1, 1);
                   gs(0, 0) = (g.array() * tp.val(ai).array()).sum();
                   tp.accumulate(si, gs);
                   tp.accumulate(ai, Mat(g * tp.val(si)(0, 0)));
                 })
                    : nullptr);
}

Value cmul(Value a, Value b) {
  Tape* t = same_tape(a, b);
  const Mat& va = t->val(a.idx);
  const Mat& vb = t->val(b.idx);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("cmul", va, vb);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(b.idx);
  int out = t->size(), ai = a.idx, bi = b.idx;
  return t->emit(va.cwiseProduct(vb), rg,
                 rg ? std::function<void(Tape&)>([out, ai, bi](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   tp.accumulate(ai, g.cwiseProduct(tp.val(bi)));
                   tp.accumulate(bi, g.cwiseProduct(tp.val(ai)));
                 })
                    : nullptr);
}

Value cmul_col(Value a, Value col) {
  Tape* t = same_tape(a, col);
  const Mat& va = t->val(a.idx);
  const Mat& vc = t->val(col.idx);
  if (vc.cols() != 1 || vc.rows() != va.rows()) shape_error("cmul_col", va, vc);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(col.idx);
  int out = t->size(), ai = a.idx, ci = col.idx;
  Mat v = va.array().colwise() * vc.col(0).array();
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, ci](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   const Mat& va2 = tp.val(ai);
                   const Mat& vc2 = tp.val(ci);
                   tp.accumulate(ai, Mat(g.array().colwise() * vc2.col(0).array()));
                   tp.accumulate(ci, Mat(g.cwiseProduct(va2).rowwise().sum()));
                 })
                    : nullptr);
}

Value add_rowvec(Value a, Value row) {
  Tape* t = same_tape(a, row);
  const Mat& va = t->val(a.idx);
  const Mat& vr = t->val(row.idx);
  if (vr.rows() != 1 || vr.cols() != va.cols()) shape_error("add_rowvec", va, vr);
  bool rg = t->requires_grad(a.idx) || t->requires_grad(row.idx);
  int out = t->size(), ai = a.idx, ri = row.idx;
  Mat v = va.array().rowwise() + vr.row(0).array();
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, ri](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   tp.accumulate(ai, g);
                   tp.accumulate(ri, Mat(g.colwise().sum()));
                 })
                    : nullptr);
}

Value repeat_row(Value row, int n) {
  Tape* t = row.tape;
  const Mat& vr = t->val(row.idx);
  if (vr.rows() != 1) throw std::invalid_argument("repeat_row: input must be 1 x c");
  if (n < 0) throw std::invalid_argument("repeat_row: negative row count");
  bool rg = t->requires_grad(row.idx);
  int out = t->size(), ri = row.idx;
  Mat v = vr.replicate(n, 1);
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ri](Tape& tp) {
    tp.accumulate(ri, Mat(tp.grad_of(out).colwise().sum()));
  }) : nullptr);
}

Value silu(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat sig = (1.0 / (1.0 + (-va.array()).exp())).matrix();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(va.cwiseProduct(sig), rg,
                 rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   const Mat& x = tp.val(ai);
                   Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
                   Eigen::ArrayXXd d = s * (1.0 + x.array() * (1.0 - s));
                   tp.accumulate(ai, Mat((g.array() * d).matrix()));
                 })
                    : nullptr);
}

Value sigmoid(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat sig = (1.0 / (1.0 + (-va.array()).exp())).matrix();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(sig), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    const Mat& y = tp.val(out);
    tp.accumulate(ai, Mat((g.array() * y.array() * (1.0 - y.array())).matrix()));
  }) : nullptr);
}

Value gather_rows(Value a, std::vector<int> idx) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  const int rows = static_cast<int>(idx.size());
  Mat v(rows, va.cols());
  for (int k = 0; k < rows; ++k) {
    if (idx[k] < 0 || idx[k] >= va.rows()) {
      throw std::invalid_argument("gather_rows: index out of range");
    }
    v.row(k) = va.row(idx[k]);
  }
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, idx = std::move(idx)](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   Mat ga = Mat::Zero(tp.val(ai).rows(), tp.val(ai).cols());
                   for (int k = 0; k < static_cast<int>(idx.size()); ++k) {
                     ga.row(idx[k]) += g.row(k);
                   }
                   tp.accumulate(ai, ga);
                 })
                    : nullptr);
}

Value scatter_rows(Value a, std::vector<int> idx, int out_rows) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  if (static_cast<int>(idx.size()) != va.rows()) {
    throw std::invalid_argument("scatter_rows: index count must match input rows");
  }
  Mat v = Mat::Zero(out_rows, va.cols());
  for (int k = 0; k < va.rows(); ++k) {
    if (idx[k] < 0 || idx[k] >= out_rows) {
      throw std::invalid_argument("scatter_rows: index out of range");
    }
    v.row(idx[k]) += va.row(k);
  }
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, idx = std::move(idx)](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   Mat ga(static_cast<int>(idx.size()), g.cols());
                   for (int k = 0; k < ga.rows(); ++k) ga.row(k) = g.row(idx[k]);
                   tp.accumulate(ai, ga);
                 })
                    : nullptr);
}

Value concat_rows(Value a, Value b) {
  Tape* t = same_tape(a, b);
  const Mat& va = t->val(a.idx);
  const Mat& vb = t->val(b.idx);
  if (va.cols() != vb.cols()) shape_error("concat_rows", va, vb);
  Mat v(va.rows() + vb.rows(), va.cols());
  v << va, vb;
  bool rg = t->requires_grad(a.idx) || t->requires_grad(b.idx);
  int out = t->size(), ai = a.idx, bi = b.idx;
  const int ra = static_cast<int>(va.rows());
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, bi, ra](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   tp.accumulate(ai, Mat(g.topRows(ra)));
                   tp.accumulate(bi, Mat(g.bottomRows(g.rows() - ra)));
                 })
                    : nullptr);
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  Tape* t = parts.front().tape;
  int rows = static_cast<int>(t->val(parts.front().idx).rows());
  int cols = 0;
  bool rg = false;
  for (Value p : parts) {
    same_tape(parts.front(), p);
    const Mat& vp = t->val(p.idx);
    if (vp.rows() != rows) shape_error("concat_cols", t->val(parts.front().idx), vp);
    cols += static_cast<int>(vp.cols());
    rg = rg || t->requires_grad(p.idx);
  }
  Mat v(rows, cols);
  std::vector<int> offs, ids;
  int off = 0;
  for (Value p : parts) {
    const Mat& vp = t->val(p.idx);
    v.middleCols(off, vp.cols()) = vp;
    offs.push_back(off);
    ids.push_back(p.idx);
    off += static_cast<int>(vp.cols());
  }
  int out = t->size();
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>(
                          [out, offs = std::move(offs), ids = std::move(ids)](Tape& tp) {
                            const Mat& g = tp.grad_of(out);
                            for (size_t i = 0; i < ids.size(); ++i) {
                              const int w = static_cast<int>(tp.val(ids[i]).cols());
                              tp.accumulate(ids[i], Mat(g.middleCols(offs[i], w)));
                            }
                          })
                    : nullptr);
}

Value row_scale(Value a, Eigen::VectorXd s) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  if (s.size() != va.rows()) {
    throw std::invalid_argument("row_scale: scale length must match rows");
  }
  Mat v = va.array().colwise() * s.array();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, s = std::move(s)](Tape& tp) {
                   tp.accumulate(ai, Mat(tp.grad_of(out).array().colwise() * s.array()));
                 })
                    : nullptr);
}

Value row_sum_sq(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat v = va.rowwise().squaredNorm();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    tp.accumulate(ai, Mat(2.0 * (tp.val(ai).array().colwise() * g.col(0).array())));
  }) : nullptr);
}

Value sum_sq(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat v(1, 1);
  v(0, 0) = va.squaredNorm();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const double g = tp.grad_of(out)(0, 0);
    tp.accumulate(ai, Mat(2.0 * g * tp.val(ai)));
  }) : nullptr);
}

Value sum_all(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat v(1, 1);
  v(0, 0) = va.sum();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const double g = tp.grad_of(out)(0, 0);
    tp.accumulate(ai, Mat(Mat::Constant(tp.val(ai).rows(), tp.val(ai).cols(), g)));
  }) : nullptr);
}

Value mean_rows(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  if (va.rows() == 0) throw std::invalid_argument("mean_rows: empty matrix");
  Mat v = va.colwise().mean();
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    const double inv = 1.0 / static_cast<double>(tp.val(ai).rows());
    tp.accumulate(ai, Mat((g * inv).replicate(tp.val(ai).rows(), 1)));
  }) : nullptr);
}

Value center_rows(Value a) {
  Value m = mean_rows(a);
  return a - repeat_row(m, static_cast<int>(a.tape->val(a.idx).rows()));
}

Value softmax_rows(Value a) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  Mat v(va.rows(), va.cols());
  for (int r = 0; r < va.rows(); ++r) {
    Eigen::ArrayXd row = va.row(r).array();
    row -= row.maxCoeff();
    Eigen::ArrayXd e = row.exp();
    v.row(r) = (e / e.sum()).matrix().transpose();
  }
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    const Mat& p = tp.val(out);
    Mat gp = g.cwiseProduct(p);
    Eigen::VectorXd rs = gp.rowwise().sum();
    Mat ga = gp - (p.array().colwise() * rs.array()).matrix();
    tp.accumulate(ai, ga);
  }) : nullptr);
}

Value reshape_rowmajor(Value a, int rows, int cols) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  if (static_cast<long>(rows) * cols != va.size()) {
    throw std::invalid_argument("reshape_rowmajor: element count mismatch");
  }
  Mat v(rows, cols);
  const int ac = static_cast<int>(va.cols());
  for (int k = 0; k < va.size(); ++k) {
    v(k / cols, k % cols) = va(k / ac, k % ac);
  }
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai, cols](Tape& tp) {
    const Mat& g = tp.grad_of(out);
    const Mat& va2 = tp.val(ai);
    Mat ga(va2.rows(), va2.cols());
    const int ac2 = static_cast<int>(va2.cols());
    for (int k = 0; k < g.size(); ++k) {
      ga(k / ac2, k % ac2) = g(k / cols, k % cols);
    }
    tp.accumulate(ai, ga);
  }) : nullptr);
}

Value block_matmul(Value a, Value x, int block) {
  Tape* t = same_tape(a, x);
  const Mat& va = t->val(a.idx);
  const Mat& vx = t->val(x.idx);
  if (va.rows() != block || va.cols() != block) {
    throw std::invalid_argument("block_matmul: A must be block x block");
  }
  if (vx.rows() % block != 0) {
    throw std::invalid_argument("block_matmul: rows of x must be a multiple of block");
  }
  const int nblocks = static_cast<int>(vx.rows()) / block;
  Mat v(vx.rows(), vx.cols());
  for (int n = 0; n < nblocks; ++n) {
    v.middleRows(n * block, block) = va * vx.middleRows(n * block, block);
  }
  bool rg = t->requires_grad(a.idx) || t->requires_grad(x.idx);
  int out = t->size(), ai = a.idx, xi = x.idx;
  return t->emit(std::move(v), rg,
                 rg ? std::function<void(Tape&)>([out, ai, xi, block, nblocks](Tape& tp) {
                   const Mat& g = tp.grad_of(out);
                   const Mat& va2 = tp.val(ai);
                   const Mat& vx2 = tp.val(xi);
                   Mat ga = Mat::Zero(block, block);
                   Mat gx(vx2.rows(), vx2.cols());
                   for (int n = 0; n < nblocks; ++n) {
                     ga += g.middleRows(n * block, block) *
                           vx2.middleRows(n * block, block).transpose();
                     gx.middleRows(n * block, block) =
                         va2.transpose() * g.middleRows(n * block, block);
                   }
                   tp.accumulate(ai, ga);
                   tp.accumulate(xi, gx);
                 })
                    : nullptr);
}

Value cell(Value a, int r, int c) {
  Tape* t = a.tape;
  const Mat& va = t->val(a.idx);
  if (r < 0 || r >= va.rows() || c < 0 || c >= va.cols()) {
    throw std::invalid_argument("cell: index out of range");
  }
  Mat v(1, 1);
  v(0, 0) = va(r, c);
  bool rg = t->requires_grad(a.idx);
  int out = t->size(), ai = a.idx;
  return t->emit(std::move(v), rg, rg ? std::function<void(Tape&)>([out, ai, r, c](Tape& tp) {
    Mat ga = Mat::Zero(tp.val(ai).rows(), tp.val(ai).cols());
    ga(r, c) = tp.grad_of(out)(0, 0);
    tp.accumulate(ai, ga);
  }) : nullptr);
}

}  // namespace equiada
