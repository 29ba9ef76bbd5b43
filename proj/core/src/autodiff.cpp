#include "gridlearn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace gridlearn::ad {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulRow: return "mul_row";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Relu: return "relu";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Sum: return "sum";
    case OpKind::RowSum: return "row_sum";
    case OpKind::ColSum: return "col_sum";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::ScatterAddRows: return "scatter_add_rows";
    case OpKind::SegmentSoftmax: return "segment_softmax";
    case OpKind::LayerNormRows: return "layer_norm_rows";
    case OpKind::BlockAttention: return "block_attention";
    case OpKind::Reshape: return "reshape";
  }
  return "unknown";
}

IndexList make_index(std::vector<std::size_t> indices) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(indices));
}

const Tensor& Var::value() const {
  if (!valid()) throw TapeError("value() on an unbound Var");
  return tape_->value(*this);
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::vector<const Tensor*>& in, const std::string& why) {
  std::ostringstream os;
  os << op_name(kind) << ": " << why << " (operand shapes";
  for (const auto* t : in) os << ' ' << shape_str(t->shape());
  os << ')';
  throw ShapeError(os.str());
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Broadcast-aware accessor for binary elementwise ops.
inline double bval(const Tensor& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; }

void accumulate_reduced(std::vector<double>& dst, const std::vector<double>& contrib) {
  if (dst.size() == contrib.size()) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contrib[i];
  } else {
    // dst is a broadcast scalar
    double s = 0.0;
    for (double c : contrib) s += c;
    dst[0] += s;
  }
}

// c[r x m] += a[r x k] * b[k x m]
void gemm_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < r; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[r x m] += a[r x k] * b^T where b is [m x k]
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] += s;
    }
  }
}

// c[k x m] += a^T * g where a is [r x k], g is [r x m]
void gemm_tn_acc(const double* a, const double* g, double* c, std::size_t r, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::input(std::string name, Tensor value) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  if (input_ids_.count(name) != 0) throw TapeError("duplicate input name '" + name + "'");
  Node n{OpKind::Input, {}, {}, std::move(value), {}, true};
  auto v = push(std::move(n));
  input_ids_.emplace(name, v.id());
  input_names_.push_back(std::move(name));
  return v;
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  Node n{OpKind::Constant, {}, {}, std::move(value), {}, false};
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw TapeError("Var does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id())].value;
}

Var Tape::record(OpKind kind, std::vector<int> parents, Attr attr) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  Node n{kind, std::move(parents), std::move(attr), Tensor(), {}, false};
  for (int p : n.parents) {
    if (p < 0 || static_cast<std::size_t>(p) >= nodes_.size()) throw TapeError("invalid parent index");
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p)].needs_grad;
  }
  n.value = compute(n, &n.aux);
  n.value.check_finite(op_name(kind));
  return push(std::move(n));
}

Tensor Tape::compute(const Node& node, std::vector<double>* aux) const {
  std::vector<const Tensor*> in;
  in.reserve(node.parents.size());
  for (int p : node.parents) in.push_back(&nodes_[static_cast<std::size_t>(p)].value);
  const auto kind = node.kind;
  const auto& at = node.attr;

  auto binary = [&](auto fn) {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    Shape shape;
    if (a.shape() == b.shape()) {
      shape = a.shape();
    } else if (b.size() == 1) {
      shape = a.shape();
    } else if (a.size() == 1) {
      shape = b.shape();
    } else {
      shape_fail(kind, in, "operands must share a shape or one must be a scalar");
    }
    std::size_t n = std::max(a.size(), b.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(bval(a, i), bval(b, i));
    return Tensor(std::move(shape), std::move(out));
  };
  auto unary = [&](auto fn) {
    const Tensor& a = *in[0];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
    return Tensor(a.shape(), std::move(out));
  };

  switch (kind) {
    case OpKind::Input:
    case OpKind::Constant:
      return node.value;
    case OpKind::Add: return binary([](double x, double y) { return x + y; });
    case OpKind::Sub: return binary([](double x, double y) { return x - y; });
    case OpKind::Mul: return binary([](double x, double y) { return x * y; });
    case OpKind::Div: return binary([](double x, double y) { return x / y; });
    case OpKind::Neg: return unary([](double x) { return -x; });
    case OpKind::Scale: {
      const double k = at.scalar;
      return unary([k](double x) { return k * x; });
    }
    case OpKind::AddScalar: {
      const double k = at.scalar;
      return unary([k](double x) { return x + k; });
    }
    case OpKind::AddRow:
    case OpKind::MulRow: {
      const Tensor& x = *in[0];
      const Tensor& b = *in[1];
      const std::size_t r = x.rows(), c = x.cols();
      if (b.size() != c) shape_fail(kind, in, "row operand must have one entry per column");
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          out[i * c + j] = kind == OpKind::AddRow ? x[i * c + j] + b[j] : x[i * c + j] * b[j];
        }
      }
      return Tensor(x.shape(), std::move(out));
    }
    case OpKind::MatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.cols() != b.rows()) shape_fail(kind, in, "inner dimensions differ");
      const std::size_t r = a.rows(), k = a.cols(), m = b.cols();
      std::vector<double> out(r * m, 0.0);
      gemm_acc(a.data().data(), b.data().data(), out.data(), r, k, m);
      return Tensor({r, m}, std::move(out));
    }
    case OpKind::Transpose: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
      return Tensor({c, r}, std::move(out));
    }
    case OpKind::Relu: return unary([](double x) { return x > 0.0 ? x : 0.0; });
    case OpKind::Sin: return unary([](double x) { return std::sin(x); });
    case OpKind::Cos: return unary([](double x) { return std::cos(x); });
    case OpKind::Sigmoid: return unary([](double x) { return sigmoid_scalar(x); });
    case OpKind::Exp: return unary([](double x) { return std::exp(x); });
    case OpKind::Log: return unary([](double x) { return std::log(x); });
    case OpKind::Square: return unary([](double x) { return x * x; });
    case OpKind::Sqrt: return unary([](double x) { return std::sqrt(x); });
    case OpKind::SoftmaxRows: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < r; ++i) {
        const double* row = a.data().data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          out[i * c + j] = std::exp(row[j] - mx);
          s += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
      }
      return Tensor(a.shape(), std::move(out));
    }
    case OpKind::Sum: {
      double s = 0.0;
      for (double x : in[0]->data()) s += x;
      return Tensor::scalar(s);
    }
    case OpKind::RowSum: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      std::vector<double> out(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += a[i * c + j];
        out[i] = s;
      }
      return Tensor({r, 1}, std::move(out));
    }
    case OpKind::ColSum: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      std::vector<double> out(c, 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
      return Tensor({1, c}, std::move(out));
    }
    case OpKind::ConcatRows: {
      const std::size_t c = in[0]->cols();
      std::size_t r = 0;
      for (const auto* t : in) {
        if (t->cols() != c) shape_fail(kind, in, "column counts differ");
        r += t->rows();
      }
      std::vector<double> out;
      out.reserve(r * c);
      for (const auto* t : in) out.insert(out.end(), t->data().begin(), t->data().end());
      return Tensor({r, c}, std::move(out));
    }
    case OpKind::ConcatCols: {
      const std::size_t r = in[0]->rows();
      std::size_t c = 0;
      for (const auto* t : in) {
        if (t->rows() != r) shape_fail(kind, in, "row counts differ");
        c += t->cols();
      }
      std::vector<double> out(r * c);
      std::size_t off = 0;
      for (const auto* t : in) {
        const std::size_t tc = t->cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < tc; ++j) out[i * c + off + j] = (*t)[i * tc + j];
        off += tc;
      }
      return Tensor({r, c}, std::move(out));
    }
    case OpKind::SliceRows: {
      const Tensor& a = *in[0];
      const std::size_t c = a.cols();
      if (at.b == 0 || at.a + at.b > a.rows()) shape_fail(kind, in, "row range out of bounds");
      std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(at.a * c),
                              a.data().begin() + static_cast<std::ptrdiff_t>((at.a + at.b) * c));
      return Tensor({at.b, c}, std::move(out));
    }
    case OpKind::SliceCols: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      if (at.b == 0 || at.a + at.b > c) shape_fail(kind, in, "column range out of bounds");
      std::vector<double> out(r * at.b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < at.b; ++j) out[i * at.b + j] = a[i * c + at.a + j];
      return Tensor({r, at.b}, std::move(out));
    }
    case OpKind::GatherRows: {
      const Tensor& a = *in[0];
      const std::size_t c = a.cols();
      const auto& idx = *at.index;
      if (idx.empty()) shape_fail(kind, in, "empty index list");
      std::vector<double> out(idx.size() * c);
      for (std::size_t e = 0; e < idx.size(); ++e) {
        if (idx[e] >= a.rows()) shape_fail(kind, in, "row index out of range");
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[e] * c), c,
                    out.begin() + static_cast<std::ptrdiff_t>(e * c));
      }
      return Tensor({idx.size(), c}, std::move(out));
    }
    case OpKind::ScatterAddRows: {
      const Tensor& a = *in[0];
      const std::size_t c = a.cols();
      const auto& idx = *at.index;
      if (idx.size() != a.rows()) shape_fail(kind, in, "index count must equal row count");
      std::vector<double> out(at.a * c, 0.0);
      for (std::size_t e = 0; e < idx.size(); ++e) {
        if (idx[e] >= at.a) shape_fail(kind, in, "target row out of range");
        for (std::size_t j = 0; j < c; ++j) out[idx[e] * c + j] += a[e * c + j];
      }
      return Tensor({at.a, c}, std::move(out));
    }
    case OpKind::SegmentSoftmax: {
      const Tensor& a = *in[0];
      const std::size_t e_rows = a.rows(), c = a.cols();
      const auto& seg = *at.index;
      if (seg.size() != e_rows) shape_fail(kind, in, "segment count must equal row count");
      std::vector<double> mx(at.a * c, -HUGE_VAL), den(at.a * c, 0.0), out(a.size());
      for (std::size_t e = 0; e < e_rows; ++e) {
        if (seg[e] >= at.a) shape_fail(kind, in, "segment id out of range");
        for (std::size_t j = 0; j < c; ++j) mx[seg[e] * c + j] = std::max(mx[seg[e] * c + j], a[e * c + j]);
      }
      for (std::size_t e = 0; e < e_rows; ++e)
        for (std::size_t j = 0; j < c; ++j) {
          out[e * c + j] = std::exp(a[e * c + j] - mx[seg[e] * c + j]);
          den[seg[e] * c + j] += out[e * c + j];
        }
      for (std::size_t e = 0; e < e_rows; ++e)
        for (std::size_t j = 0; j < c; ++j) out[e * c + j] /= den[seg[e] * c + j];
      return Tensor(a.shape(), std::move(out));
    }
    case OpKind::LayerNormRows: {
      const Tensor& a = *in[0];
      const std::size_t r = a.rows(), c = a.cols();
      std::vector<double> out(a.size());
      if (aux != nullptr) aux->assign(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        const double* row = a.data().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + at.scalar);
        if (aux != nullptr) (*aux)[i] = inv;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * inv;
      }
      return Tensor(a.shape(), std::move(out));
    }
    case OpKind::BlockAttention: {
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      const Tensor& v = *in[2];
      if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2)
        shape_fail(kind, in, "query, key and value must be matrices of one shape");
      const std::size_t rows = q.rows(), d = q.cols(), g = at.a, h = at.b;
      if (g == 0 || rows % g != 0) shape_fail(kind, in, "row count not divisible by group size");
      if (h == 0 || d % h != 0) shape_fail(kind, in, "width not divisible by head count");
      const std::size_t dh = d / h;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
      const std::size_t groups = rows / g;
      std::vector<double> out(rows * d, 0.0);
      std::vector<double> probs(groups * h * g * g);
      std::vector<double> srow(g);
      for (std::size_t blk = 0; blk < groups; ++blk) {
        for (std::size_t hd = 0; hd < h; ++hd) {
          double* pb = probs.data() + (blk * h + hd) * g * g;
          for (std::size_t i = 0; i < g; ++i) {
            const double* qi = q.data().data() + (blk * g + i) * d + hd * dh;
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < g; ++j) {
              const double* kj = k.data().data() + (blk * g + j) * d + hd * dh;
              double s = 0.0;
              for (std::size_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
              srow[j] = s * inv_sqrt;
              mx = std::max(mx, srow[j]);
            }
            double den = 0.0;
            for (std::size_t j = 0; j < g; ++j) {
              srow[j] = std::exp(srow[j] - mx);
              den += srow[j];
            }
            double* oi = out.data() + (blk * g + i) * d + hd * dh;
            for (std::size_t j = 0; j < g; ++j) {
              const double pij = srow[j] / den;
              pb[i * g + j] = pij;
              const double* vj = v.data().data() + (blk * g + j) * d + hd * dh;
              for (std::size_t p = 0; p < dh; ++p) oi[p] += pij * vj[p];
            }
          }
        }
      }
      if (aux != nullptr) *aux = std::move(probs);
      return Tensor(q.shape(), std::move(out));
    }
    case OpKind::Reshape: {
      const Tensor& a = *in[0];
      std::size_t n = 1;
      for (auto dd : at.shape) n *= dd;
      if (n != a.size()) shape_fail(kind, in, "reshape to " + shape_str(at.shape) + " changes element count");
      return Tensor(at.shape, a.values());
    }
  }
  throw TapeError("unknown op");
}

void Tape::propagate(const Node& node, const std::vector<double>& g,
                     std::vector<std::vector<double>>& grads) const {
  auto parent = [&](std::size_t i) -> const Node& { return nodes_[static_cast<std::size_t>(node.parents[i])]; };
  auto acc = [&](std::size_t i) -> std::vector<double>* {
    const auto pid = static_cast<std::size_t>(node.parents[i]);
    if (!nodes_[pid].needs_grad) return nullptr;
    auto& slot = grads[pid];
    if (slot.empty()) slot.assign(nodes_[pid].value.size(), 0.0);
    return &slot;
  };
  const auto& y = node.value;
  const auto& at = node.attr;

  switch (node.kind) {
    case OpKind::Input:
    case OpKind::Constant:
      return;
    case OpKind::Add:
    case OpKind::Sub: {
      const double sign = node.kind == OpKind::Add ? 1.0 : -1.0;
      if (auto* ga = acc(0)) accumulate_reduced(*ga, g);
      if (auto* gb = acc(1)) {
        std::vector<double> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) c[i] = sign * g[i];
        accumulate_reduced(*gb, c);
      }
      return;
    }
    case OpKind::Mul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (auto* ga = acc(0)) {
        std::vector<double> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) c[i] = g[i] * bval(b, i);
        accumulate_reduced(*ga, c);
      }
      if (auto* gb = acc(1)) {
        std::vector<double> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) c[i] = g[i] * bval(a, i);
        accumulate_reduced(*gb, c);
      }
      return;
    }
    case OpKind::Div: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (auto* ga = acc(0)) {
        std::vector<double> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) c[i] = g[i] / bval(b, i);
        accumulate_reduced(*ga, c);
      }
      if (auto* gb = acc(1)) {
        std::vector<double> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bv = bval(b, i);
          c[i] = -g[i] * bval(a, i) / (bv * bv);
        }
        accumulate_reduced(*gb, c);
      }
      return;
    }
    case OpKind::Neg:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i];
      return;
    case OpKind::Scale:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += at.scalar * g[i];
      return;
    case OpKind::AddScalar:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      return;
    case OpKind::AddRow:
    case OpKind::MulRow: {
      const Tensor& x = parent(0).value;
      const Tensor& b = parent(1).value;
      const std::size_t r = x.rows(), c = x.cols();
      const bool is_mul = node.kind == OpKind::MulRow;
      if (auto* gx = acc(0)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += is_mul ? g[i * c + j] * b[j] : g[i * c + j];
      }
      if (auto* gb = acc(1)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*gb)[j] += is_mul ? g[i * c + j] * x[i * c + j] : g[i * c + j];
      }
      return;
    }
    case OpKind::MatMul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      const std::size_t r = a.rows(), k = a.cols(), m = b.cols();
      if (auto* ga = acc(0)) gemm_nt_acc(g.data(), b.data().data(), ga->data(), r, m, k);
      if (auto* gb = acc(1)) gemm_tn_acc(a.data().data(), g.data(), gb->data(), r, k, m);
      return;
    }
    case OpKind::Transpose: {
      const Tensor& a = parent(0).value;
      const std::size_t r = a.rows(), c = a.cols();
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
      return;
    }
    case OpKind::Relu: {
      const Tensor& x = parent(0).value;
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) (*ga)[i] += g[i];
      return;
    }
    case OpKind::Sin: {
      const Tensor& x = parent(0).value;
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * std::cos(x[i]);
      return;
    }
    case OpKind::Cos: {
      const Tensor& x = parent(0).value;
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i] * std::sin(x[i]);
      return;
    }
    case OpKind::Sigmoid:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
      return;
    case OpKind::Exp:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
      return;
    case OpKind::Log: {
      const Tensor& x = parent(0).value;
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
      return;
    }
    case OpKind::Square: {
      const Tensor& x = parent(0).value;
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * x[i] * g[i];
      return;
    }
    case OpKind::Sqrt:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (y[i] > 0.0 && g[i] != 0.0) (*ga)[i] += g[i] / (2.0 * y[i]);
      return;
    case OpKind::SoftmaxRows: {
      const std::size_t r = y.rows(), c = y.cols();
      if (auto* ga = acc(0)) {
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
      }
      return;
    }
    case OpKind::Sum:
      if (auto* ga = acc(0))
        for (auto& v : *ga) v += g[0];
      return;
    case OpKind::RowSum: {
      const Tensor& a = parent(0).value;
      const std::size_t r = a.rows(), c = a.cols();
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i];
      return;
    }
    case OpKind::ColSum: {
      const Tensor& a = parent(0).value;
      const std::size_t r = a.rows(), c = a.cols();
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j];
      return;
    }
    case OpKind::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t p = 0; p < node.parents.size(); ++p) {
        const std::size_t n = parent(p).value.size();
        if (auto* gp = acc(p))
          for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[off + i];
        off += n;
      }
      return;
    }
    case OpKind::ConcatCols: {
      const std::size_t r = y.rows(), c = y.cols();
      std::size_t off = 0;
      for (std::size_t p = 0; p < node.parents.size(); ++p) {
        const std::size_t tc = parent(p).value.cols();
        if (auto* gp = acc(p))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < tc; ++j) (*gp)[i * tc + j] += g[i * c + off + j];
        off += tc;
      }
      return;
    }
    case OpKind::SliceRows: {
      const std::size_t c = parent(0).value.cols();
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < at.b * c; ++i) (*ga)[at.a * c + i] += g[i];
      return;
    }
    case OpKind::SliceCols: {
      const Tensor& a = parent(0).value;
      const std::size_t r = a.rows(), c = a.cols();
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < at.b; ++j) (*ga)[i * c + at.a + j] += g[i * at.b + j];
      return;
    }
    case OpKind::GatherRows: {
      const std::size_t c = parent(0).value.cols();
      const auto& idx = *at.index;
      if (auto* ga = acc(0))
        for (std::size_t e = 0; e < idx.size(); ++e)
          for (std::size_t j = 0; j < c; ++j) (*ga)[idx[e] * c + j] += g[e * c + j];
      return;
    }
    case OpKind::ScatterAddRows: {
      const std::size_t c = parent(0).value.cols();
      const auto& idx = *at.index;
      if (auto* ga = acc(0))
        for (std::size_t e = 0; e < idx.size(); ++e)
          for (std::size_t j = 0; j < c; ++j) (*ga)[e * c + j] += g[idx[e] * c + j];
      return;
    }
    case OpKind::SegmentSoftmax: {
      const std::size_t e_rows = y.rows(), c = y.cols();
      const auto& seg = *at.index;
      if (auto* ga = acc(0)) {
        std::vector<double> dot(at.a * c, 0.0);
        for (std::size_t e = 0; e < e_rows; ++e)
          for (std::size_t j = 0; j < c; ++j) dot[seg[e] * c + j] += g[e * c + j] * y[e * c + j];
        for (std::size_t e = 0; e < e_rows; ++e)
          for (std::size_t j = 0; j < c; ++j)
            (*ga)[e * c + j] += y[e * c + j] * (g[e * c + j] - dot[seg[e] * c + j]);
      }
      return;
    }
    case OpKind::LayerNormRows: {
      const std::size_t r = y.rows(), c = y.cols();
      if (auto* ga = acc(0)) {
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mg = 0.0, mgy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            mg += g[i * c + j];
            mgy += g[i * c + j] * y[i * c + j];
          }
          mg *= inv_c;
          mgy *= inv_c;
          const double inv = node.aux[i];
          for (std::size_t j = 0; j < c; ++j)
            (*ga)[i * c + j] += inv * (g[i * c + j] - mg - y[i * c + j] * mgy);
        }
      }
      return;
    }
    case OpKind::BlockAttention: {
      const Tensor& q = parent(0).value;
      const Tensor& k = parent(1).value;
      const Tensor& v = parent(2).value;
      const std::size_t rows = q.rows(), d = q.cols(), gs = at.a, h = at.b;
      const std::size_t dh = d / h;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
      const std::size_t groups = rows / gs;
      auto* gq = acc(0);
      auto* gk = acc(1);
      auto* gv = acc(2);
      std::vector<double> dp(gs), ds(gs);
      for (std::size_t blk = 0; blk < groups; ++blk) {
        for (std::size_t hd = 0; hd < h; ++hd) {
          const double* pb = node.aux.data() + (blk * h + hd) * gs * gs;
          for (std::size_t i = 0; i < gs; ++i) {
            const double* gi = g.data() + (blk * gs + i) * d + hd * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < gs; ++j) {
              const double* vj = v.data().data() + (blk * gs + j) * d + hd * dh;
              double s = 0.0;
              for (std::size_t p = 0; p < dh; ++p) s += gi[p] * vj[p];
              dp[j] = s;
              dot += s * pb[i * gs + j];
              if (gv != nullptr) {
                double* gvj = gv->data() + (blk * gs + j) * d + hd * dh;
                for (std::size_t p = 0; p < dh; ++p) gvj[p] += pb[i * gs + j] * gi[p];
              }
            }
            for (std::size_t j = 0; j < gs; ++j) ds[j] = pb[i * gs + j] * (dp[j] - dot) * inv_sqrt;
            const double* qi = q.data().data() + (blk * gs + i) * d + hd * dh;
            for (std::size_t j = 0; j < gs; ++j) {
              if (ds[j] == 0.0) continue;
              const double* kj = k.data().data() + (blk * gs + j) * d + hd * dh;
              if (gq != nullptr) {
                double* gqi = gq->data() + (blk * gs + i) * d + hd * dh;
                for (std::size_t p = 0; p < dh; ++p) gqi[p] += ds[j] * kj[p];
              }
              if (gk != nullptr) {
                double* gkj = gk->data() + (blk * gs + j) * d + hd * dh;
                for (std::size_t p = 0; p < dh; ++p) gkj[p] += ds[j] * qi[p];
              }
            }
          }
        }
      }
      return;
    }
    case OpKind::Reshape:
      if (auto* ga = acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      return;
  }
}

Gradients Tape::backward(Var output) { return backward(output, Tensor(value(output).shape(), 1.0)); }

Gradients Tape::backward(Var output, const Tensor& seed) {
  const Seed s{output, seed};
  return backward(std::span<const Seed>(&s, 1));
}

Gradients Tape::backward(std::span<const Seed> seeds) {
  if (consumed_) throw TapeError("tape already consumed by a previous backward pass");
  consumed_ = true;
  std::vector<std::vector<double>> grads(nodes_.size());
  int last = -1;
  for (const auto& s : seeds) {
    const Tensor& v = value(s.node);
    if (v.shape() != s.gradient.shape()) {
      throw ShapeError("backward: seed shape " + shape_str(s.gradient.shape()) + " does not match output shape " +
                       shape_str(v.shape()));
    }
    auto& slot = grads[static_cast<std::size_t>(s.node.id())];
    if (slot.empty()) slot.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) slot[i] += s.gradient[i];
    last = std::max(last, s.node.id());
  }
  for (int id = last; id >= 0; --id) {
    const auto uid = static_cast<std::size_t>(id);
    if (grads[uid].empty() || !nodes_[uid].needs_grad) continue;
    propagate(nodes_[uid], grads[uid], grads);
    if (nodes_[uid].kind != OpKind::Input) std::vector<double>().swap(grads[uid]);
  }
  Gradients out;
  for (const auto& [name, id] : input_ids_) {
    const auto uid = static_cast<std::size_t>(id);
    const auto& shape = nodes_[uid].value.shape();
    if (grads[uid].empty()) {
      out.emplace(name, Tensor(shape, 0.0));
    } else {
      out.emplace(name, Tensor(shape, std::move(grads[uid])));
    }
  }
  return out;
}

bool Tape::replay_matches() const {
  std::vector<Tensor> replayed;
  replayed.reserve(nodes_.size());
  // compute() reads parent values from nodes_, so replay node-by-node against
  // the recorded parents; a mismatch anywhere propagates to the comparison.
  for (const auto& node : nodes_) {
    std::vector<double> aux;
    Tensor t = compute(node, &aux);
    if (!bit_identical(t, node.value)) return false;
  }
  return true;
}

std::vector<std::int8_t> Tape::kink_signature() const {
  std::vector<std::int8_t> sig;
  for (const auto& node : nodes_) {
    if (node.kind != OpKind::Relu) continue;
    const auto& x = nodes_[static_cast<std::size_t>(node.parents[0])].value;
    for (double v : x.data()) sig.push_back(static_cast<std::int8_t>((v > 0.0) - (v < 0.0)));
  }
  return sig;
}

namespace {

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw TapeError("operation on an unbound Var");
    if (t == nullptr) t = v.tape();
    if (v.tape() != t) throw TapeError("operands recorded on different tapes");
  }
  return *t;
}

Var unary_op(OpKind kind, Var a, Tape::Attr attr = {}) {
  return tape_of({a}).record(kind, {a.id()}, std::move(attr));
}

Var binary_op(OpKind kind, Var a, Var b) { return tape_of({a, b}).record(kind, {a.id(), b.id()}); }

Var list_op(OpKind kind, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError(std::string(op_name(kind)) + ": no operands");
  Tape* t = parts[0].tape();
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) {
    if (!p.valid() || p.tape() != t) throw TapeError(std::string(op_name(kind)) + ": operands on different tapes");
    ids.push_back(p.id());
  }
  if (parts.size() == 1) return parts[0];
  return t->record(kind, std::move(ids));
}

}  // namespace

Var add(Var a, Var b) { return binary_op(OpKind::Add, a, b); }
Var sub(Var a, Var b) { return binary_op(OpKind::Sub, a, b); }
Var mul(Var a, Var b) { return binary_op(OpKind::Mul, a, b); }
Var div(Var a, Var b) { return binary_op(OpKind::Div, a, b); }
Var neg(Var a) { return unary_op(OpKind::Neg, a); }
Var scale(Var a, double k) { return unary_op(OpKind::Scale, a, {.scalar = k}); }
Var add_scalar(Var a, double k) { return unary_op(OpKind::AddScalar, a, {.scalar = k}); }
Var add_row(Var x, Var b) { return binary_op(OpKind::AddRow, x, b); }
Var mul_row(Var x, Var g) { return binary_op(OpKind::MulRow, x, g); }
Var matmul(Var a, Var b) { return binary_op(OpKind::MatMul, a, b); }
Var transpose(Var a) { return unary_op(OpKind::Transpose, a); }
Var relu(Var a) { return unary_op(OpKind::Relu, a); }
Var sin(Var a) { return unary_op(OpKind::Sin, a); }
Var cos(Var a) { return unary_op(OpKind::Cos, a); }
Var sigmoid(Var a) { return unary_op(OpKind::Sigmoid, a); }
Var exp(Var a) { return unary_op(OpKind::Exp, a); }
Var log(Var a) { return unary_op(OpKind::Log, a); }
Var square(Var a) { return unary_op(OpKind::Square, a); }
Var sqrt(Var a) { return unary_op(OpKind::Sqrt, a); }
Var softmax_rows(Var a) { return unary_op(OpKind::SoftmaxRows, a); }
Var sum(Var a) { return unary_op(OpKind::Sum, a); }
Var row_sum(Var a) { return unary_op(OpKind::RowSum, a); }
Var col_sum(Var a) { return unary_op(OpKind::ColSum, a); }
Var concat_rows(std::span<const Var> parts) { return list_op(OpKind::ConcatRows, parts); }
Var concat_cols(std::span<const Var> parts) { return list_op(OpKind::ConcatCols, parts); }

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  return unary_op(OpKind::SliceRows, a, {.a = begin, .b = count});
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  return unary_op(OpKind::SliceCols, a, {.a = begin, .b = count});
}

Var gather_rows(Var a, IndexList rows) { return unary_op(OpKind::GatherRows, a, {.index = std::move(rows)}); }

Var scatter_add_rows(Var a, IndexList rows, std::size_t out_rows) {
  return unary_op(OpKind::ScatterAddRows, a, {.a = out_rows, .index = std::move(rows)});
}

Var segment_softmax(Var a, IndexList segments, std::size_t n_segments) {
  return unary_op(OpKind::SegmentSoftmax, a, {.a = n_segments, .index = std::move(segments)});
}

Var layer_norm_rows(Var a, double eps) { return unary_op(OpKind::LayerNormRows, a, {.scalar = eps}); }

Var block_attention(Var q, Var k, Var v, std::size_t group_size, std::size_t heads) {
  return tape_of({q, k, v}).record(OpKind::BlockAttention, {q.id(), k.id(), v.id()},
                                   {.a = group_size, .b = heads});
}

Var reshape(Var a, Shape shape) { return unary_op(OpKind::Reshape, a, {.shape = std::move(shape)}); }

Var abs_hinge(Var a) { return relu(a) + relu(-a); }

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

ForwardResult forward(const std::function<Var(Tape&)>& build) {
  ForwardResult r;
  r.tape = std::make_unique<Tape>();
  r.output = build(*r.tape);
  r.value = r.tape->value(r.output);
  return r;
}

Gradients backward(ForwardResult& result, const Tensor& seed) {
  if (!result.tape) throw TapeError("backward on an empty ForwardResult");
  return result.tape->backward(result.output, seed);
}

FdReport finite_diff_check(const ScalarLoss& loss, const Tensor& point, double step, double tol) {
  return finite_diff_check(loss, point, FdOptions{.step = step, .tol = tol});
}

FdReport finite_diff_check(const ScalarLoss& loss, const Tensor& point, const FdOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  const std::string name = "x";

  Tensor analytic;
  std::vector<std::int8_t> base_sig;
  {
    Tape tape;
    Var x = tape.input(name, point);
    Var out = loss(tape, x);
    if (out.value().size() != 1) {
      throw ShapeError("finite_diff_check: loss returned non-scalar of shape " + shape_str(out.shape()));
    }
    base_sig = tape.kink_signature();
    analytic = tape.backward(out).at(name);
  }

  auto eval = [&](const Tensor& at, std::vector<std::int8_t>* sig) {
    Tape tape;
    Var x = tape.constant(at);
    Var out = loss(tape, x);
    if (sig != nullptr) *sig = tape.kink_signature();
    return out.value().item();
  };

  std::vector<std::size_t> components(point.size());
  std::iota(components.begin(), components.end(), std::size_t{0});
  if (options.max_components != 0 && options.max_components < components.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(components.begin(), components.end(), rng);
    components.resize(options.max_components);
    std::sort(components.begin(), components.end());
  }

  FdReport report;
  const double h = options.step;
  std::vector<std::int8_t> sig;
  for (std::size_t i : components) {
    bool kink = false;
    for (double off : {-2.0 * h, 2.0 * h}) {
      Tensor probe = point;
      probe[i] += off;
      eval(probe, &sig);
      if (sig != base_sig) kink = true;
    }
    if (kink) {
      report.skipped.push_back(i);
      continue;
    }
    Tensor plus = point, minus = point;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (eval(plus, nullptr) - eval(minus, nullptr)) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
    ++report.checked;
    if (report.checked == 1 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < options.tol;
  if (!report.passed) report.failing_index = report.worst_index;
  return report;
}

}  // namespace gridlearn::ad
