#include "transmpc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "transmpc/kernels.hpp"
#include "transmpc/rng.hpp"

namespace transmpc::ad {

namespace {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

void check_finite(const std::vector<double>& v, Op op) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericalError(std::string("non-finite result in op ") +
                           op_name(op));
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "subtract";
    case Op::kMul: return "elementwise-multiply";
    case Op::kDiv: return "divide";
    case Op::kScale: return "scalar-scale";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSquare: return "square";
    case Op::kSqrt: return "sqrt";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kAtan2: return "atan2";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer-normalization";
    case Op::kRowAdd: return "broadcast-add";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

Tensor::Tensor(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor: product(shape) != data length");
}

Tensor Tensor::zeros(Shape s) {
  std::vector<double> d(shape_numel(s), 0.0);
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::full(Shape s, double v) {
  std::vector<double> d(shape_numel(s), v);
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor({r, c}, std::move(v));
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() == 1) return 1;
  throw ShapeError("rows(): tensor is not 1-D or 2-D");
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  throw ShapeError("cols(): tensor is not 1-D or 2-D");
}

double Tensor::item() const {
  if (!is_scalar()) throw ShapeError("item(): tensor is not scalar");
  return data[0];
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(const Tensor& value) {
  check_finite(value.data, Op::kLeaf);
  Node n;
  n.op = Op::kLeaf;
  n.shape = value.shape;
  n.value = value.data;
  n.requires_grad = true;
  return emit(std::move(n));
}

int Tape::ensure_on_tape(const Tensor& t) {
  if (t.on_tape()) {
    if (t.tape != this)
      throw ShapeError("op mixes tensors from different tapes");
    return t.node;
  }
  Node n;
  n.op = Op::kConstant;
  n.shape = t.shape;
  n.value = t.data;
  n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::emit(Node n) {
  Tensor out(n.shape, n.value);
  nodes_.push_back(std::move(n));
  out.tape = this;
  out.node = static_cast<int>(nodes_.size()) - 1;
  return out;
}

// ---------------------------------------------------------------------------
// Op plumbing

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (t->tape == nullptr) continue;
    if (tape == nullptr) tape = t->tape;
    else if (tape != t->tape)
      throw ShapeError("op mixes tensors from different tapes");
  }
  return tape;
}

bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> ts) {
  if (tape == nullptr) return false;
  for (const Tensor* t : ts)
    if (t->on_tape() && tape->node(t->node).requires_grad) return true;
  return false;
}

// Finalizes an op: finite check, then either a constant fold (no tape or no
// gradient demand downstream) or a recorded node.
Tensor finish(Op op, std::initializer_list<const Tensor*> inputs, Shape shape,
              std::vector<double> value, double scalar = 0.0, int axis = 0,
              std::size_t r0 = 0, std::size_t r1 = 0, std::size_t c0 = 0,
              std::size_t c1 = 0) {
  check_finite(value, op);
  Tape* tape = common_tape(inputs);
  if (!wants_grad(tape, inputs))
    return Tensor(std::move(shape), std::move(value));
  Node n;
  n.op = op;
  for (const Tensor* t : inputs) n.inputs.push_back(tape->ensure_on_tape(*t));
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = true;
  n.scalar = scalar;
  n.axis = axis;
  n.r0 = r0;
  n.r1 = r1;
  n.c0 = c0;
  n.c1 = c1;
  return tape->emit(std::move(n));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(who) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename F>
Tensor map1(Op op, const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data[i]);
  return finish(op, {&a}, a.shape, std::move(out));
}

template <typename F>
Tensor zip2(Op op, const Tensor& a, const Tensor& b, F f) {
  require_same_shape(a, b, op_name(op));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f(a.data[i], b.data[i]);
  return finish(op, {&a, &b}, a.shape, std::move(out));
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

Tensor add(const Tensor& a, const Tensor& b) {
  return zip2(Op::kAdd, a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip2(Op::kSub, a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return zip2(Op::kMul, a, b, [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return zip2(Op::kDiv, a, b, [](double x, double y) { return x / y; });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data[i];
  return finish(Op::kScale, {&a}, a.shape, std::move(out), c);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: operands must be 2-D");
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner dimensions differ " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> out(m * n);
  kernels::matmul(a.data.data(), b.data.data(), out.data(), m, k, n);
  return finish(Op::kMatMul, {&a, &b}, {m, n}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: operand must be 2-D");
  const std::size_t r = a.shape[0], c = a.shape[1];
  std::vector<double> out(r * c);
  kernels::transpose(a.data.data(), out.data(), r, c);
  return finish(Op::kTranspose, {&a}, {c, r}, std::move(out));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts.front().rank();
  if (rank != 1 && rank != 2) throw ShapeError("concat: operands must be 1-D or 2-D");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  if (rank == 1 && axis != 0) throw ShapeError("concat: axis 1 needs 2-D operands");
  for (const Tensor& t : parts)
    if (t.rank() != rank) throw ShapeError("concat: mixed ranks");

  Shape shape;
  std::vector<double> out;
  if (axis == 0) {
    std::size_t total = 0;
    const std::size_t cols = rank == 2 ? parts.front().shape[1] : 0;
    for (const Tensor& t : parts) {
      if (rank == 2 && t.shape[1] != cols)
        throw ShapeError("concat axis 0: column counts differ");
      total += t.shape[0];
    }
    shape = rank == 2 ? Shape{total, cols} : Shape{total};
    out.reserve(shape_numel(shape));
    for (const Tensor& t : parts)
      out.insert(out.end(), t.data.begin(), t.data.end());
  } else {
    const std::size_t rows = parts.front().shape[0];
    std::size_t total = 0;
    for (const Tensor& t : parts) {
      if (t.shape[0] != rows) throw ShapeError("concat axis 1: row counts differ");
      total += t.shape[1];
    }
    shape = Shape{rows, total};
    out.assign(rows * total, 0.0);
    std::size_t off = 0;
    for (const Tensor& t : parts) {
      const std::size_t c = t.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(t.data.begin() + i * c, t.data.begin() + (i + 1) * c,
                  out.begin() + i * total + off);
      off += c;
    }
  }

  // finish() takes an initializer_list; route variadic inputs manually.
  check_finite(out, Op::kConcat);
  Tape* tape = nullptr;
  for (const Tensor& t : parts) {
    if (t.tape == nullptr) continue;
    if (tape == nullptr) tape = t.tape;
    else if (tape != t.tape)
      throw ShapeError("op mixes tensors from different tapes");
  }
  bool rg = false;
  if (tape)
    for (const Tensor& t : parts)
      if (t.on_tape() && tape->node(t.node).requires_grad) rg = true;
  if (!rg) return Tensor(std::move(shape), std::move(out));
  Node n;
  n.op = Op::kConcat;
  for (const Tensor& t : parts) n.inputs.push_back(tape->ensure_on_tape(t));
  n.shape = std::move(shape);
  n.value = std::move(out);
  n.requires_grad = true;
  n.axis = axis;
  return tape->emit(std::move(n));
}

Tensor slice(const Tensor& a, std::size_t i0, std::size_t i1) {
  // Flat range over the row-major data; the result is 1-D. Extracting row r
  // of an (n x m) matrix is slice(a, r*m, (r+1)*m).
  if (i0 >= i1 || i1 > a.numel()) throw ShapeError("slice: bad flat range");
  std::vector<double> out(a.data.begin() + i0, a.data.begin() + i1);
  return finish(Op::kSlice, {&a}, {i1 - i0}, std::move(out), 0.0, 0, i0, i1,
                0, 0);
}

Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0,
             std::size_t c1) {
  if (a.rank() != 2) throw ShapeError("slice(r0,r1,c0,c1): operand must be 2-D");
  if (r0 >= r1 || r1 > a.shape[0] || c0 >= c1 || c1 > a.shape[1])
    throw ShapeError("slice: bad 2-D block");
  const std::size_t w = c1 - c0, cols = a.shape[1];
  std::vector<double> out;
  out.reserve((r1 - r0) * w);
  for (std::size_t i = r0; i < r1; ++i)
    out.insert(out.end(), a.data.begin() + i * cols + c0,
               a.data.begin() + i * cols + c1);
  return finish(Op::kSlice, {&a}, {r1 - r0, w}, std::move(out), 0.0, 1, r0,
                r1, c0, c1);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data) s += x;
  return finish(Op::kSum, {&a}, {1}, {s});
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double x : a.data) s += x;
  return finish(Op::kMean, {&a}, {1}, {s / static_cast<double>(a.numel())});
}

Tensor square(const Tensor& a) {
  return map1(Op::kSquare, a, [](double x) { return x * x; });
}

Tensor sqrt(const Tensor& a) {
  return map1(Op::kSqrt, a, [](double x) { return std::sqrt(x); });
}

Tensor tanh(const Tensor& a) {
  return map1(Op::kTanh, a, [](double x) { return std::tanh(x); });
}

Tensor relu(const Tensor& a) {
  return map1(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor sin(const Tensor& a) {
  return map1(Op::kSin, a, [](double x) { return std::sin(x); });
}

Tensor cos(const Tensor& a) {
  return map1(Op::kCos, a, [](double x) { return std::cos(x); });
}

Tensor atan2(const Tensor& y, const Tensor& x) {
  return zip2(Op::kAtan2, y, x,
              [](double a, double b) { return std::atan2(a, b); });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() != 1 && a.rank() != 2)
    throw ShapeError("softmax: operand must be 1-D or 2-D");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (cols == 0) throw ShapeError("softmax: empty rows");
  std::vector<double> out(a.numel());
  kernels::softmax_rows(a.data.data(), out.data(), rows, cols);
  return finish(Op::kSoftmax, {&a}, a.shape, std::move(out));
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (a.rank() != 1 && a.rank() != 2)
    throw ShapeError("layer_norm: operand must be 1-D or 2-D");
  const std::size_t rows = a.rows(), cols = a.cols();
  if (gain.numel() != cols || bias.numel() != cols)
    throw ShapeError("layer_norm: gain/bias width mismatch");
  std::vector<double> out(a.numel());
  kernels::layer_norm_rows(a.data.data(), gain.data.data(), bias.data.data(),
                           out.data(), rows, cols, eps);
  return finish(Op::kLayerNorm, {&a, &gain, &bias}, a.shape, std::move(out),
                eps);
}

Tensor row_add(const Tensor& m, const Tensor& r) {
  if (m.rank() != 2) throw ShapeError("row_add: left operand must be 2-D");
  if (r.rank() != 1 || r.shape[0] != m.shape[1])
    throw ShapeError("row_add: row vector width mismatch");
  const std::size_t rows = m.shape[0], cols = m.shape[1];
  std::vector<double> out(m.numel());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = m.data[i * cols + j] + r.data[j];
  return finish(Op::kRowAdd, {&m, &r}, m.shape, std::move(out));
}

Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: element count mismatch");
  std::vector<double> out = a.data;
  return finish(Op::kReshape, {&a}, std::move(s), std::move(out));
}

Tensor record(const std::string& op_kind, const std::vector<Tensor>& inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw ShapeError("record(" + op_kind + "): expected " +
                       std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
  };
  if (op_kind == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_kind == "subtract") { need(2); return sub(inputs[0], inputs[1]); }
  if (op_kind == "elementwise-multiply") { need(2); return mul(inputs[0], inputs[1]); }
  if (op_kind == "divide") { need(2); return div(inputs[0], inputs[1]); }
  if (op_kind == "scalar-scale") { need(2); return scale(inputs[0], inputs[1].item()); }
  if (op_kind == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_kind == "transpose") { need(1); return transpose(inputs[0]); }
  if (op_kind == "concat") { return concat(inputs, 0); }
  if (op_kind == "slice") {
    need(2);
    const Tensor& ix = inputs[1];
    if (ix.numel() == 2)
      return slice(inputs[0], static_cast<std::size_t>(ix.at(0)),
                   static_cast<std::size_t>(ix.at(1)));
    if (ix.numel() == 4)
      return slice(inputs[0], static_cast<std::size_t>(ix.at(0)),
                   static_cast<std::size_t>(ix.at(1)),
                   static_cast<std::size_t>(ix.at(2)),
                   static_cast<std::size_t>(ix.at(3)));
    throw ShapeError("record(slice): bounds tensor must have 2 or 4 entries");
  }
  if (op_kind == "sum") { need(1); return sum(inputs[0]); }
  if (op_kind == "mean") { need(1); return mean(inputs[0]); }
  if (op_kind == "square") { need(1); return square(inputs[0]); }
  if (op_kind == "sqrt") { need(1); return sqrt(inputs[0]); }
  if (op_kind == "tanh") { need(1); return tanh(inputs[0]); }
  if (op_kind == "relu") { need(1); return relu(inputs[0]); }
  if (op_kind == "sin") { need(1); return sin(inputs[0]); }
  if (op_kind == "cos") { need(1); return cos(inputs[0]); }
  if (op_kind == "atan2") { need(2); return atan2(inputs[0], inputs[1]); }
  if (op_kind == "softmax") { need(1); return softmax(inputs[0]); }
  if (op_kind == "layer-normalization") {
    need(3);
    return layer_norm(inputs[0], inputs[1], inputs[2]);
  }
  if (op_kind == "broadcast-add") { need(2); return row_add(inputs[0], inputs[1]); }
  throw ShapeError("record: unsupported op kind '" + op_kind + "'");
}

// ---------------------------------------------------------------------------
// Backward

Tensor GradMap::grad(const Tensor& t) const {
  Tensor out = Tensor::zeros(t.shape);
  if (!t.on_tape() || t.tape != tape_) return out;
  const auto& g = grads_[static_cast<std::size_t>(t.node)];
  if (!g.empty()) out.data = g;
  return out;
}

bool GradMap::reached(const Tensor& t) const {
  return t.on_tape() && t.tape == tape_ &&
         !grads_[static_cast<std::size_t>(t.node)].empty();
}

GradMap Tape::backward(const Tensor& loss) const {
  if (!loss.is_scalar()) throw ShapeError("backward: loss must be scalar");
  if (loss.tape != nullptr && loss.tape != this)
    throw ShapeError("backward: loss is not on this tape");

  GradMap gm;
  gm.tape_ = this;
  gm.grads_.assign(nodes_.size(), {});
  if (!loss.on_tape()) return gm;  // constant loss: every gradient is zero
  gm.grads_[static_cast<std::size_t>(loss.node)] = {1.0};

  for (int id = loss.node; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const std::vector<double>& g = gm.grads_[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;

    auto acc = [&](int which) -> std::vector<double>* {
      const int in_id = n.inputs[static_cast<std::size_t>(which)];
      const Node& in = nodes_[static_cast<std::size_t>(in_id)];
      if (!in.requires_grad) return nullptr;
      auto& buf = gm.grads_[static_cast<std::size_t>(in_id)];
      if (buf.empty()) buf.assign(in.value.size(), 0.0);
      return &buf;
    };
    auto in_val = [&](int which) -> const std::vector<double>& {
      return nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(which)])].value;
    };
    auto in_shape = [&](int which) -> const Shape& {
      return nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(which)])].shape;
    };

    switch (n.op) {
      case Op::kAdd: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pa)[i] += g[i];
        if (auto* pb = acc(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*pb)[i] += g[i];
        break;
      }
      case Op::kSub: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pa)[i] += g[i];
        if (auto* pb = acc(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*pb)[i] -= g[i];
        break;
      }
      case Op::kMul: {
        const auto& a = in_val(0);
        const auto& b = in_val(1);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pa)[i] += g[i] * b[i];
        if (auto* pb = acc(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*pb)[i] += g[i] * a[i];
        break;
      }
      case Op::kDiv: {
        const auto& b = in_val(1);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pa)[i] += g[i] / b[i];
        if (auto* pb = acc(1))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pb)[i] -= g[i] * n.value[i] / b[i];
        break;
      }
      case Op::kScale: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] += n.scalar * g[i];
        break;
      }
      case Op::kMatMul: {
        const Shape& sa = in_shape(0);
        const Shape& sb = in_shape(1);
        const std::size_t m = sa[0], k = sa[1], nn = sb[1];
        if (auto* pa = acc(0)) {
          std::vector<double> tmp(m * k);
          kernels::matmul_nt(g.data(), in_val(1).data(), tmp.data(), m, nn, k);
          for (std::size_t i = 0; i < tmp.size(); ++i) (*pa)[i] += tmp[i];
        }
        if (auto* pb = acc(1)) {
          std::vector<double> tmp(k * nn);
          kernels::matmul_tn(in_val(0).data(), g.data(), tmp.data(), k, m, nn);
          for (std::size_t i = 0; i < tmp.size(); ++i) (*pb)[i] += tmp[i];
        }
        break;
      }
      case Op::kTranspose: {
        const Shape& sa = in_shape(0);
        const std::size_t r = sa[0], c = sa[1];
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              (*pa)[i * c + j] += g[j * r + i];
        break;
      }
      case Op::kConcat: {
        if (n.axis == 0) {
          std::size_t off = 0;
          for (std::size_t w = 0; w < n.inputs.size(); ++w) {
            const std::size_t sz = in_val(static_cast<int>(w)).size();
            if (auto* p = acc(static_cast<int>(w)))
              for (std::size_t i = 0; i < sz; ++i) (*p)[i] += g[off + i];
            off += sz;
          }
        } else {
          const std::size_t rows = n.shape[0], total = n.shape[1];
          std::size_t off = 0;
          for (std::size_t w = 0; w < n.inputs.size(); ++w) {
            const std::size_t c = in_shape(static_cast<int>(w))[1];
            if (auto* p = acc(static_cast<int>(w)))
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < c; ++j)
                  (*p)[i * c + j] += g[i * total + off + j];
            off += c;
          }
        }
        break;
      }
      case Op::kSlice: {
        if (auto* pa = acc(0)) {
          if (n.axis == 0) {  // 1-D
            for (std::size_t i = 0; i < g.size(); ++i) (*pa)[n.r0 + i] += g[i];
          } else {  // 2-D block
            const std::size_t cols = in_shape(0)[1], w = n.c1 - n.c0;
            for (std::size_t i = 0; i < n.r1 - n.r0; ++i)
              for (std::size_t j = 0; j < w; ++j)
                (*pa)[(n.r0 + i) * cols + n.c0 + j] += g[i * w + j];
          }
        }
        break;
      }
      case Op::kSum: {
        if (auto* pa = acc(0))
          for (double& x : *pa) x += g[0];
        break;
      }
      case Op::kMean: {
        if (auto* pa = acc(0)) {
          const double inv = 1.0 / static_cast<double>(pa->size());
          for (double& x : *pa) x += g[0] * inv;
        }
        break;
      }
      case Op::kSquare: {
        const auto& a = in_val(0);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] += 2.0 * a[i] * g[i];
        break;
      }
      case Op::kSqrt: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] += 0.5 * g[i] / n.value[i];
        break;
      }
      case Op::kTanh: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kRelu: {
        const auto& a = in_val(0);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (a[i] > 0.0) (*pa)[i] += g[i];
        break;
      }
      case Op::kSin: {
        const auto& a = in_val(0);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] += g[i] * std::cos(a[i]);
        break;
      }
      case Op::kCos: {
        const auto& a = in_val(0);
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pa)[i] -= g[i] * std::sin(a[i]);
        break;
      }
      case Op::kAtan2: {
        const auto& y = in_val(0);
        const auto& x = in_val(1);
        auto* py = acc(0);
        auto* px = acc(1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = x[i] * x[i] + y[i] * y[i];
          if (py) (*py)[i] += g[i] * x[i] / d;
          if (px) (*px)[i] -= g[i] * y[i] / d;
        }
        break;
      }
      case Op::kSoftmax: {
        //  Jacobian-vector form: ds_j = s_j * (g_j - sum_k g_k s_k)
        if (auto* pa = acc(0)) {
          const std::size_t cols =
              n.shape.size() == 2 ? n.shape[1] : n.shape[0];
          const std::size_t rows = n.value.size() / cols;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* s = n.value.data() + r * cols;
            const double* gr = g.data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * s[j];
            double* pr = pa->data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j)
              pr[j] += s[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::kLayerNorm: {
        const auto& x = in_val(0);
        const auto& gain = in_val(1);
        const std::size_t cols = n.shape.size() == 2 ? n.shape[1] : n.shape[0];
        const std::size_t rows = x.size() / cols;
        const double eps = n.scalar;
        auto* px = acc(0);
        auto* pg = acc(1);
        auto* pb = acc(2);
        std::vector<double> xhat(cols), gy(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = x.data() + r * cols;
          const double* gr = g.data() + r * cols;
          double m = 0.0;
          for (std::size_t j = 0; j < cols; ++j) m += xr[j];
          m /= static_cast<double>(cols);
          double var = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double d = xr[j] - m;
            var += d * d;
          }
          var /= static_cast<double>(cols);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::size_t j = 0; j < cols; ++j)
            xhat[j] = (xr[j] - m) * inv;
          if (pb)
            for (std::size_t j = 0; j < cols; ++j) (*pb)[j] += gr[j];
          if (pg)
            for (std::size_t j = 0; j < cols; ++j)
              (*pg)[j] += gr[j] * xhat[j];
          if (px) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              gy[j] = gr[j] * gain[j];
              m1 += gy[j];
              m2 += gy[j] * xhat[j];
            }
            m1 /= static_cast<double>(cols);
            m2 /= static_cast<double>(cols);
            double* pr = px->data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j)
              pr[j] += inv * (gy[j] - m1 - xhat[j] * m2);
          }
        }
        break;
      }
      case Op::kReshape: {
        if (auto* pa = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pa)[i] += g[i];
        break;
      }
      case Op::kRowAdd: {
        const std::size_t cols = n.shape[1];
        const std::size_t rows = n.shape[0];
        if (auto* pm = acc(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*pm)[i] += g[i];
        if (auto* pr = acc(1))
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              (*pr)[j] += g[i * cols + j];
        break;
      }
      case Op::kLeaf:
      case Op::kConstant:
        break;
    }
  }
  return gm;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

GradCheckReport grad_check(
    const LossFn& fn,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol, int coords_per_param, std::uint64_t coord_seed) {
  if (h <= 0.0) throw ShapeError("grad_check: h must be positive");

  auto eval = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Tensor> staged;
    staged.reserve(values.size());
    for (const Tensor& v : values) staged.push_back(tape.leaf(v));
    Tensor loss = fn(tape, staged);
    if (!loss.is_scalar()) throw ShapeError("grad_check: fn must be scalar");
    return loss.item();
  };

  // Tape gradients at the base point.
  Tape tape;
  std::vector<Tensor> staged;
  std::vector<Tensor> base;
  for (const auto& [name, value] : params) {
    base.push_back(value);
    staged.push_back(tape.leaf(value));
  }
  Tensor loss = fn(tape, staged);
  if (!loss.is_scalar()) throw ShapeError("grad_check: fn must be scalar");
  GradMap gm = tape.backward(loss);

  GradCheckReport report;
  report.tol = tol;
  Rng pick(coord_seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor g = gm.grad(staged[p]);
    GradCheckEntry entry;
    entry.name = params[p].first;

    std::vector<std::size_t> coords;
    const std::size_t numel = base[p].numel();
    if (coords_per_param < 0 ||
        static_cast<std::size_t>(coords_per_param) >= numel) {
      coords.resize(numel);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::vector<std::size_t> all(numel);
      std::iota(all.begin(), all.end(), 0);
      for (int i = 0; i < coords_per_param; ++i) {
        const std::size_t j = static_cast<std::size_t>(
            pick.uniform_int(i, static_cast<std::int64_t>(numel) - 1));
        std::swap(all[static_cast<std::size_t>(i)], all[j]);
        coords.push_back(all[static_cast<std::size_t>(i)]);
      }
    }

    for (std::size_t i : coords) {
      std::vector<Tensor> values = base;
      values[p].data[i] += h;
      const double f_plus = eval(values);
      values[p].data[i] = base[p].data[i] - h;
      const double f_minus = eval(values);
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double ad = g.data[i];
      const double abs_err = std::fabs(ad - fd);
      const double rel_err =
          abs_err / std::max({std::fabs(ad), std::fabs(fd), 1e-3});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
      ++entry.coords_checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace transmpc::ad
