#pragma once

// Minimal reverse-mode differentiation over 2-D tensors. Every op appends a
// node to a Tape; backward() walks the tape once in reverse recording order.
// The scalar type is a template parameter: float for training, double for
// gradient checks.
//
// Each op also adds its multiply-add count to Tape::mul_adds():
//   matmul (m x k)(k x n)                    m*k*n
//   add, sub, mul, add_bias, scale_rows,
//   square, scalar_mul, add_scalar           one per output element
//   sum, mean, sum_cols, mean_rows,
//   frobenius_norm_sq                        one per input element
//   everything else (nonlinearities, clamp,
//   minimum, reshaping ops)                  zero

#include <abd/errors.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace abd::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
};

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0)) : shape{rows, cols}, data(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values) : shape{rows, cols}, data(std::move(values)) {
    if (data.size() != shape.size()) throw ShapeError("tensor data length does not match shape " + shape.str());
  }

  std::size_t rows() const { return shape.rows; }
  std::size_t cols() const { return shape.cols; }
  std::size_t size() const { return data.size(); }
  T& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }
  T scalar() const { return data.at(0); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape.rows, shape.cols);
    for (std::size_t k = 0; k < data.size(); ++k) out.data[k] = static_cast<U>(data[k]);
    return out;
  }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Op {
  kLeaf, kMatmul, kTranspose, kAdd, kSub, kMul, kAddBias, kBroadcastRows, kScaleRows,
  kSoftplus, kTanh, kExp, kLog, kSquare, kClamp, kMinimum, kScalarMul, kAddScalar,
  kSum, kMean, kSumCols, kMeanRows, kFrobeniusNormSq, kConcatCols, kSliceCols, kSliceRows,
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Shape& shape() const { return tape->node(id).shape; }
  std::span<const T> value() const { return tape->node(id).value; }
  Tensor<T> tensor() const { return tape->tensor(id); }
  T scalar() const { return tape->node(id).value.at(0); }
};

template <class T>
class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<int> inputs;
    T s0 = T(0), s1 = T(0);
    std::size_t i0 = 0, i1 = 0;
    bool requires_grad = false;
    std::string tag;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(const Tensor<T>& t, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.shape = t.shape;
    n.value = t.data;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var<T> constant(const Tensor<T>& t) { return leaf(t, false); }
  Var<T> zeros(std::size_t rows, std::size_t cols) { return leaf(Tensor<T>(rows, cols), false); }

  const Node& node(int id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  Tensor<T> tensor(int id) const { return Tensor<T>(nodes_[id].shape.rows, nodes_[id].shape.cols, nodes_[id].value); }

  /// Gradient of the last backward() target with respect to `v` (zeros if unreached).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.shape.rows, n.shape.cols);
    return Tensor<T>(n.shape.rows, n.shape.cols, n.grad);
  }

  std::uint64_t mul_adds() const { return mul_adds_; }
  /// Mul-adds recorded while the current tag started with `prefix`.
  std::uint64_t mul_adds(const std::string& prefix) const {
    std::uint64_t n = 0;
    for (const auto& [tag, c] : tag_mul_adds_)
      if (tag.compare(0, prefix.size(), prefix) == 0) n += c;
    return n;
  }
  void reset_mul_adds() {
    mul_adds_ = 0;
    tag_mul_adds_.clear();
  }

  /// Label attached to nodes created from now on (used for op accounting).
  void set_tag(std::string tag) { tag_ = std::move(tag); }
  /// Nodes with `tag` whose backward rule ran during the last backward().
  int backward_visits(const std::string& tag) const {
    auto it = visits_.find(tag);
    return it == visits_.end() ? 0 : it->second;
  }

  void backward(Var<T> loss);

  // Internal: used by the op functions below.
  Var<T> push(Node n) {
    n.tag = tag_;
    if (n.op != Op::kLeaf)
      for (int in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }
  Node& mutable_node(int id) { return nodes_[id]; }
  void count(std::uint64_t n) {
    mul_adds_ += n;
    if (n) tag_mul_adds_[tag_] += n;
  }
  const std::string& tag() const { return tag_; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t mul_adds_ = 0;
  std::string tag_;
  std::map<std::string, std::uint64_t> tag_mul_adds_;
  std::map<std::string, int> visits_;
};

namespace detail {

template <class T>
typename Tape<T>::Node make(Op op, Shape shape, std::initializer_list<int> inputs) {
  typename Tape<T>::Node n;
  n.op = op;
  n.shape = shape;
  n.value.resize(shape.size());
  n.inputs = inputs;
  return n;
}

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <class T>
Eigen::Map<const RowMat<T>> cmap(const std::vector<T>& v, const Shape& s) {
  return {v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}
template <class T>
Eigen::Map<RowMat<T>> mmap(std::vector<T>& v, const Shape& s) {
  return {v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}

template <class T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class T, class F>
Var<T> unary(Var<T> a, Op op, F f, std::uint64_t cost_per_elem = 0) {
  Tape<T>& tape = *a.tape;
  auto n = make<T>(op, a.shape(), {a.id});
  const auto& x = tape.node(a.id).value;
  for (std::size_t k = 0; k < x.size(); ++k) n.value[k] = f(x[k]);
  tape.count(cost_per_elem * x.size());
  return tape.push(std::move(n));
}

template <class T, class F>
Var<T> binary(Var<T> a, Var<T> b, Op op, const char* name, F f) {
  same_shape(a.shape(), b.shape(), name);
  Tape<T>& tape = *a.tape;
  auto n = make<T>(op, a.shape(), {a.id, b.id});
  const auto& x = tape.node(a.id).value;
  const auto& y = tape.node(b.id).value;
  for (std::size_t k = 0; k < x.size(); ++k) n.value[k] = f(x[k], y[k]);
  tape.count(x.size());
  return tape.push(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core ops.

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.cols != sb.rows) throw ShapeError("matmul: shape mismatch " + sa.str() + " vs " + sb.str());
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kMatmul, {sa.rows, sb.cols}, {a.id, b.id});
  detail::mmap(n.value, n.shape).noalias() =
      detail::cmap(tape.node(a.id).value, sa) * detail::cmap(tape.node(b.id).value, sb);
  tape.count(static_cast<std::uint64_t>(sa.rows) * sa.cols * sb.cols);
  return tape.push(std::move(n));
}

/// A [m x n] times column vector x [n x 1].
template <class T>
Var<T> matvec(Var<T> A, Var<T> x) {
  if (x.shape().cols != 1) throw ShapeError("matvec: expected a column vector, got " + x.shape().str());
  return matmul(A, x);
}

template <class T>
Var<T> transpose(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const Shape s = a.shape();
  auto n = detail::make<T>(Op::kTranspose, {s.cols, s.rows}, {a.id});
  detail::mmap(n.value, n.shape) = detail::cmap(tape.node(a.id).value, s).transpose();
  return tape.push(std::move(n));
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(a, b, Op::kAdd, "add", [](T x, T y) { return x + y; });
}
template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(a, b, Op::kSub, "sub", [](T x, T y) { return x - y; });
}
/// Element-wise (Hadamard) product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(a, b, Op::kMul, "mul", [](T x, T y) { return x * y; });
}
template <class T>
Var<T> minimum(Var<T> a, Var<T> b) {
  detail::same_shape(a.shape(), b.shape(), "minimum");
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kMinimum, a.shape(), {a.id, b.id});
  const auto& x = tape.node(a.id).value;
  const auto& y = tape.node(b.id).value;
  for (std::size_t k = 0; k < x.size(); ++k) n.value[k] = std::min(x[k], y[k]);
  return tape.push(std::move(n));
}

/// X [B x n] + b [1 x n], the one broadcasting op.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const Shape sx = x.shape(), sb = b.shape();
  if (sb.rows != 1 || sb.cols != sx.cols) throw ShapeError("add_bias: shape mismatch " + sx.str() + " vs " + sb.str());
  Tape<T>& tape = *x.tape;
  auto n = detail::make<T>(Op::kAddBias, sx, {x.id, b.id});
  detail::mmap(n.value, sx) = detail::cmap(tape.node(x.id).value, sx).rowwise() +
                              detail::cmap(tape.node(b.id).value, sb).row(0);
  tape.count(sx.size());
  return tape.push(std::move(n));
}

/// Repeats a [1 x n] row `rows` times.
template <class T>
Var<T> broadcast_rows(Var<T> x, std::size_t rows) {
  const Shape s = x.shape();
  if (s.rows != 1) throw ShapeError("broadcast_rows: expected one row, got " + s.str());
  Tape<T>& tape = *x.tape;
  auto n = detail::make<T>(Op::kBroadcastRows, {rows, s.cols}, {x.id});
  detail::mmap(n.value, n.shape).rowwise() = detail::cmap(tape.node(x.id).value, s).row(0);
  return tape.push(std::move(n));
}

/// diag(v) * W for W [r x c] and v holding r entries (either orientation).
template <class T>
Var<T> scale_rows(Var<T> W, Var<T> v) {
  const Shape sw = W.shape(), sv = v.shape();
  if (sv.size() != sw.rows || (sv.rows != 1 && sv.cols != 1))
    throw ShapeError("scale_rows: shape mismatch " + sw.str() + " vs " + sv.str());
  Tape<T>& tape = *W.tape;
  auto n = detail::make<T>(Op::kScaleRows, sw, {W.id, v.id});
  const auto& w = tape.node(W.id).value;
  const auto& d = tape.node(v.id).value;
  for (std::size_t r = 0; r < sw.rows; ++r)
    for (std::size_t c = 0; c < sw.cols; ++c) n.value[r * sw.cols + c] = d[r] * w[r * sw.cols + c];
  tape.count(sw.size());
  return tape.push(std::move(n));
}

template <class T>
Var<T> softplus(Var<T> a) {
  return detail::unary(a, Op::kSoftplus, [](T x) { return detail::softplus(x); });
}
template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(a, Op::kTanh, [](T x) { return std::tanh(x); });
}
template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary(a, Op::kExp, [](T x) { return std::exp(x); });
}
template <class T>
Var<T> log(Var<T> a) {
  return detail::unary(a, Op::kLog, [](T x) { return std::log(x); });
}
template <class T>
Var<T> square(Var<T> a) {
  return detail::unary(a, Op::kSquare, [](T x) { return x * x; }, 1);
}
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Var<T> out = detail::unary(a, Op::kClamp, [lo, hi](T x) { return std::clamp(x, lo, hi); });
  auto& n = a.tape->mutable_node(out.id);
  n.s0 = lo;
  n.s1 = hi;
  return out;
}
template <class T>
Var<T> scalar_mul(Var<T> a, T s) {
  Var<T> out = detail::unary(a, Op::kScalarMul, [s](T x) { return s * x; }, 1);
  a.tape->mutable_node(out.id).s0 = s;
  return out;
}
template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  return detail::unary(a, Op::kAddScalar, [s](T x) { return x + s; }, 1);
}

template <class T>
Var<T> sum(Var<T> a) {
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kSum, {1, 1}, {a.id});
  T acc = T(0);
  for (T x : tape.node(a.id).value) acc += x;
  n.value[0] = acc;
  tape.count(a.shape().size());
  return tape.push(std::move(n));
}
template <class T>
Var<T> mean(Var<T> a) {
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kMean, {1, 1}, {a.id});
  T acc = T(0);
  for (T x : tape.node(a.id).value) acc += x;
  n.value[0] = acc / static_cast<T>(a.shape().size());
  tape.count(a.shape().size());
  return tape.push(std::move(n));
}
/// Row sums: [B x n] -> [B x 1].
template <class T>
Var<T> sum_cols(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const Shape s = a.shape();
  auto n = detail::make<T>(Op::kSumCols, {s.rows, 1}, {a.id});
  detail::mmap(n.value, n.shape) = detail::cmap(tape.node(a.id).value, s).rowwise().sum();
  tape.count(s.size());
  return tape.push(std::move(n));
}
/// Column means: [B x n] -> [1 x n].
template <class T>
Var<T> mean_rows(Var<T> a) {
  Tape<T>& tape = *a.tape;
  const Shape s = a.shape();
  auto n = detail::make<T>(Op::kMeanRows, {1, s.cols}, {a.id});
  detail::mmap(n.value, n.shape) = detail::cmap(tape.node(a.id).value, s).colwise().mean();
  tape.count(s.size());
  return tape.push(std::move(n));
}
template <class T>
Var<T> frobenius_norm_sq(Var<T> a) {
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kFrobeniusNormSq, {1, 1}, {a.id});
  T acc = T(0);
  for (T x : tape.node(a.id).value) acc += x * x;
  n.value[0] = acc;
  tape.count(a.shape().size());
  return tape.push(std::move(n));
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape<T>& tape = *parts[0].tape;
  const std::size_t rows = parts[0].shape().rows;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.shape().rows != rows)
      throw ShapeError("concat_cols: row mismatch " + parts[0].shape().str() + " vs " + p.shape().str());
    cols += p.shape().cols;
  }
  auto n = detail::make<T>(Op::kConcatCols, {rows, cols}, {});
  std::size_t off = 0;
  for (const auto& p : parts) {
    n.inputs.push_back(p.id);
    const Shape s = p.shape();
    detail::mmap(n.value, n.shape).middleCols(off, s.cols) = detail::cmap(tape.node(p.id).value, s);
    off += s.cols;
  }
  return tape.push(std::move(n));
}

/// Columns [begin, end).
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const Shape s = a.shape();
  if (begin > end || end > s.cols) throw ShapeError("slice_cols: range out of bounds for " + s.str());
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kSliceCols, {s.rows, end - begin}, {a.id});
  n.i0 = begin;
  n.i1 = end;
  detail::mmap(n.value, n.shape) = detail::cmap(tape.node(a.id).value, s).middleCols(begin, end - begin);
  return tape.push(std::move(n));
}

/// Rows [begin, end).
template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const Shape s = a.shape();
  if (begin > end || end > s.rows) throw ShapeError("slice_rows: range out of bounds for " + s.str());
  Tape<T>& tape = *a.tape;
  auto n = detail::make<T>(Op::kSliceRows, {end - begin, s.cols}, {a.id});
  n.i0 = begin;
  n.i1 = end;
  const auto& x = tape.node(a.id).value;
  std::copy(x.begin() + begin * s.cols, x.begin() + end * s.cols, n.value.begin());
  return tape.push(std::move(n));
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }

// ---------------------------------------------------------------------------
// Backward pass.

template <class T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ShapeError("backward: loss belongs to another tape");
  if (!(nodes_.at(loss.id).shape == Shape{1, 1}))
    throw NotScalarError("backward: loss must be scalar, got " + nodes_[loss.id].shape.str());
  visits_.clear();
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
    else n.grad.clear();
  }
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad[0] = T(1);

  using detail::cmap;
  using detail::mmap;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.op == Op::kLeaf) continue;
    if (!n.tag.empty()) ++visits_[n.tag];
    const std::vector<T>& g = n.grad;
    auto in = [&](int k) -> Node& { return nodes_[n.inputs[k]]; };
    auto wants = [&](int k) { return in(k).requires_grad; };
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        Node& A = in(0);
        Node& B = in(1);
        auto G = cmap(g, n.shape);
        if (A.requires_grad) mmap(A.grad, A.shape).noalias() += G * cmap(B.value, B.shape).transpose();
        if (B.requires_grad) mmap(B.grad, B.shape).noalias() += cmap(A.value, A.shape).transpose() * G;
        break;
      }
      case Op::kTranspose:
        if (wants(0)) mmap(in(0).grad, in(0).shape) += cmap(g, n.shape).transpose();
        break;
      case Op::kAdd:
        for (int k = 0; k < 2; ++k)
          if (wants(k))
            for (std::size_t e = 0; e < g.size(); ++e) in(k).grad[e] += g[e];
        break;
      case Op::kSub:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e];
        if (wants(1))
          for (std::size_t e = 0; e < g.size(); ++e) in(1).grad[e] -= g[e];
        break;
      case Op::kMul: {
        Node& A = in(0);
        Node& B = in(1);
        if (A.requires_grad)
          for (std::size_t e = 0; e < g.size(); ++e) A.grad[e] += g[e] * B.value[e];
        if (B.requires_grad)
          for (std::size_t e = 0; e < g.size(); ++e) B.grad[e] += g[e] * A.value[e];
        break;
      }
      case Op::kMinimum: {
        Node& A = in(0);
        Node& B = in(1);
        for (std::size_t e = 0; e < g.size(); ++e) {
          bool first = A.value[e] <= B.value[e];
          if (first && A.requires_grad) A.grad[e] += g[e];
          if (!first && B.requires_grad) B.grad[e] += g[e];
        }
        break;
      }
      case Op::kAddBias:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e];
        if (wants(1)) mmap(in(1).grad, in(1).shape).row(0) += cmap(g, n.shape).colwise().sum();
        break;
      case Op::kBroadcastRows:
        if (wants(0)) mmap(in(0).grad, in(0).shape).row(0) += cmap(g, n.shape).colwise().sum();
        break;
      case Op::kScaleRows: {
        Node& W = in(0);
        Node& v = in(1);
        const std::size_t R = n.shape.rows, C = n.shape.cols;
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t e = r * C + c;
            if (W.requires_grad) W.grad[e] += g[e] * v.value[r];
            if (v.requires_grad) v.grad[r] += g[e] * W.value[e];
          }
        break;
      }
      case Op::kSoftplus:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) {
            T x = in(0).value[e];
            T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            in(0).grad[e] += g[e] * sig;
          }
        break;
      case Op::kTanh:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e] * (T(1) - n.value[e] * n.value[e]);
        break;
      case Op::kExp:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e] * n.value[e];
        break;
      case Op::kLog:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e] / in(0).value[e];
        break;
      case Op::kSquare:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e] * T(2) * in(0).value[e];
        break;
      case Op::kClamp:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) {
            T x = in(0).value[e];
            if (x >= n.s0 && x <= n.s1) in(0).grad[e] += g[e];
          }
        break;
      case Op::kScalarMul:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e] * n.s0;
        break;
      case Op::kAddScalar:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[e] += g[e];
        break;
      case Op::kSum:
        if (wants(0))
          for (auto& x : in(0).grad) x += g[0];
        break;
      case Op::kMean:
        if (wants(0)) {
          T s = g[0] / static_cast<T>(in(0).value.size());
          for (auto& x : in(0).grad) x += s;
        }
        break;
      case Op::kSumCols:
        if (wants(0)) mmap(in(0).grad, in(0).shape).colwise() += cmap(g, n.shape).col(0);
        break;
      case Op::kMeanRows:
        if (wants(0))
          mmap(in(0).grad, in(0).shape).rowwise() += cmap(g, n.shape).row(0) / static_cast<T>(in(0).shape.rows);
        break;
      case Op::kFrobeniusNormSq:
        if (wants(0))
          for (std::size_t e = 0; e < in(0).value.size(); ++e) in(0).grad[e] += g[0] * T(2) * in(0).value[e];
        break;
      case Op::kConcatCols: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Node& p = nodes_[n.inputs[k]];
          if (p.requires_grad) mmap(p.grad, p.shape) += cmap(g, n.shape).middleCols(off, p.shape.cols);
          off += p.shape.cols;
        }
        break;
      }
      case Op::kSliceCols:
        if (wants(0)) mmap(in(0).grad, in(0).shape).middleCols(n.i0, n.i1 - n.i0) += cmap(g, n.shape);
        break;
      case Op::kSliceRows:
        if (wants(0))
          for (std::size_t e = 0; e < g.size(); ++e) in(0).grad[n.i0 * n.shape.cols + e] += g[e];
        break;
    }
  }
}

template <class T>
Tensor<T> backward_grad(Tape<T>& tape, Var<T> loss, Var<T> wrt) {
  tape.backward(loss);
  return tape.grad(wrt);
}

// ---------------------------------------------------------------------------
// Named parameter storage and Adam.

template <class T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) { return tensors_[index(name)]; }
  const Tensor<T>& get(const std::string& name) const { return tensors_[index(name)]; }
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t k) const { return names_[k]; }
  Tensor<T>& tensor(std::size_t k) { return tensors_[k]; }
  const Tensor<T>& tensor(std::size_t k) const { return tensors_[k]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t k = 0; k < size(); ++k) out.add(names_[k], tensors_[k].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape as gradient-tracking leaves.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const ParamSet<T>& params) : params_(&params) {
    vars_.reserve(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) vars_.push_back(tape.leaf(params.tensor(k), true));
  }
  Bound(Tape<T>&, ParamSet<T>&&) = delete;  // would dangle
  Var<T> operator[](const std::string& name) const { return vars_[params_->index(name)]; }
  bool contains(const std::string& name) const { return params_->contains(name); }
  const std::vector<Var<T>>& vars() const { return vars_; }

  std::vector<Tensor<T>> grads() const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(v.tape->grad(v));
    return out;
  }

 private:
  const ParamSet<T>* params_;
  std::vector<Var<T>> vars_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long step = 0;
};

/// One bias-corrected Adam update in place.
template <class T>
void adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient count does not match parameter count");
  if (state.m.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.m.emplace_back(params.tensor(k).rows(), params.tensor(k).cols());
      state.v.emplace_back(params.tensor(k).rows(), params.tensor(k).cols());
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = params.tensor(k);
    if (!(grads[k].shape == p.shape) || !(state.m[k].shape == p.shape))
      throw ShapeError("adam_step: '" + params.name(k) + "' shape " + p.shape.str() + " vs gradient " +
                       grads[k].shape.str());
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double g = grads[k].data[e];
      double m = cfg.beta1 * state.m[k].data[e] + (1.0 - cfg.beta1) * g;
      double v = cfg.beta2 * state.v[k].data[e] + (1.0 - cfg.beta2) * g * g;
      state.m[k].data[e] = static_cast<T>(m);
      state.v[k].data[e] = static_cast<T>(v);
      p.data[e] -= static_cast<T>(cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
    }
  }
}

/// Global L2 norm clipping; returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g.data) sq += static_cast<double>(x) * x;
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& g : grads)
      for (T& x : g.data) x *= s;
  }
  return norm;
}

}  // namespace abd::ad
