#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gridlearn/tensor.hpp"

namespace gridlearn::ad {

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  AddRow,
  MulRow,
  MatMul,
  Transpose,
  Relu,
  Sin,
  Cos,
  Sigmoid,
  Exp,
  Log,
  Square,
  Sqrt,
  SoftmaxRows,
  Sum,
  RowSum,
  ColSum,
  ConcatRows,
  ConcatCols,
  SliceRows,
  SliceCols,
  GatherRows,
  ScatterAddRows,
  SegmentSoftmax,
  LayerNormRows,
  BlockAttention,
  Reshape,
};

const char* op_name(OpKind kind);

using Gradients = std::map<std::string, Tensor>;
using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

IndexList make_index(std::vector<std::size_t> indices);

/// Non-tensor arguments of a recorded operation.
struct OpAttr {
  double scalar = 0.0;
  std::size_t a = 0;
  std::size_t b = 0;
  IndexList index;
  Shape shape;
};

struct Seed {
  Var node;
  Tensor gradient;
};

/// Single-use record of primitive operations.
///
/// Nodes are appended in topological order. backward() visits them in
/// reverse exactly once and marks the tape consumed; a second call throws.
/// Subgradient convention: max(0, x) has derivative 0 at x == 0.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Differentiable leaf. Names must be unique per tape.
  Var input(std::string name, Tensor value);
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  const std::vector<std::string>& input_names() const noexcept { return input_names_; }

  Gradients backward(Var output);
  Gradients backward(Var output, const Tensor& seed);
  Gradients backward(std::span<const Seed> seeds);

  /// Recomputes every operation from the recorded leaves and reports
  /// whether all outputs match the recorded values bit-for-bit.
  bool replay_matches() const;

  /// Sign (-1, 0, +1) of every max(0, .) argument on the tape, in order.
  std::vector<std::int8_t> kink_signature() const;

  using Attr = OpAttr;

  Var record(OpKind kind, std::vector<int> parents, Attr attr = Attr());

 private:
  struct Node {
    OpKind kind;
    std::vector<int> parents;
    Attr attr;
    Tensor value;
    std::vector<double> aux;
    bool needs_grad = false;
  };

  Tensor compute(const Node& node, std::vector<double>* aux) const;
  void propagate(const Node& node, const std::vector<double>& grad,
                 std::vector<std::vector<double>>& grads) const;
  Var push(Node node);

  std::vector<Node> nodes_;
  std::vector<std::string> input_names_;
  std::map<std::string, int> input_ids_;
  bool consumed_ = false;
};

// Elementwise arithmetic. Operands must share a shape, or one operand must
// have exactly one element (broadcast).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double k);
Var add_scalar(Var a, double k);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double k, Var a) { return scale(a, k); }
inline Var operator*(Var a, double k) { return scale(a, k); }
inline Var operator+(Var a, double k) { return add_scalar(a, k); }
inline Var operator-(Var a, double k) { return add_scalar(a, -k); }

/// x (r x c) plus a row vector b (c entries) added to every row.
Var add_row(Var x, Var b);
/// x (r x c) times a row vector g (c entries), elementwise per row.
Var mul_row(Var x, Var g);
Var matmul(Var a, Var b);
Var transpose(Var a);

Var relu(Var a);
Var sin(Var a);
Var cos(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sqrt(Var a);
Var softmax_rows(Var a);

Var sum(Var a);
Var row_sum(Var a);
Var col_sum(Var a);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var a, IndexList rows);
Var scatter_add_rows(Var a, IndexList rows, std::size_t out_rows);
/// Softmax over the rows sharing a segment id, independently per column.
Var segment_softmax(Var a, IndexList segments, std::size_t n_segments);
/// Per-row standardization to zero mean and unit variance (no affine part).
Var layer_norm_rows(Var a, double eps = 1e-5);
/// Multi-head scaled dot-product attention within contiguous row groups.
Var block_attention(Var q, Var k, Var v, std::size_t group_size, std::size_t heads);
Var reshape(Var a, Shape shape);

/// max(0, x) + max(0, -x): absolute value with subgradient 0 at the kink.
Var abs_hinge(Var a);
Var mean(Var a);

struct ForwardResult {
  Tensor value;
  std::unique_ptr<Tape> tape;
  Var output;
};

/// Records `build` on a fresh tape and returns the output value with the tape.
ForwardResult forward(const std::function<Var(Tape&)>& build);

/// Consumes the tape of a ForwardResult.
Gradients backward(ForwardResult& result, const Tensor& seed);

struct FdReport {
  double max_rel_error = 0.0;
  std::optional<std::size_t> failing_index;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::vector<std::size_t> skipped;
  bool passed = true;
};

using ScalarLoss = std::function<Var(Tape&, Var)>;

struct FdOptions {
  double step = 1e-6;
  double tol = 1e-5;
  /// When nonzero, only this many components (sampled with `seed`) are checked.
  std::size_t max_components = 0;
  std::uint64_t seed = 0;
};

/// Compares the reverse-mode gradient of `loss` at `point` with central
/// differences. Relative error is |a - n| / max(|a|, |n|, 1). Components for
/// which any max(0, .) argument changes sign within 2*step are skipped.
FdReport finite_diff_check(const ScalarLoss& loss, const Tensor& point, const FdOptions& options);

FdReport finite_diff_check(const ScalarLoss& loss, const Tensor& point, double step, double tol);

}  // namespace gridlearn::ad
