#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace transmpc::ad {

// Raised when any op produces a NaN/Inf, or when an evaluation leaves the
// model's numeric domain. Divergence must surface immediately, never as a
// silent value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

class Tape;

// Dense row-major tensor of 64-bit floats. A tensor either lives on a tape
// (tape + node set, participates in backward) or is a free constant that
// receives zero gradient.
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
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return numel() == 1; }
  double item() const;
  double at(std::size_t i) const { return data[i]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  bool on_tape() const { return tape != nullptr && node >= 0; }
};

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kMatMul,
  kTranspose,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kSquare,
  kSqrt,
  kTanh,
  kRelu,
  kSin,
  kCos,
  kAtan2,
  kSoftmax,
  kLayerNorm,
  kRowAdd,
  kReshape,
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::vector<int> inputs;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  double scalar = 0.0;                        // kScale factor
  int axis = 0;                               // kConcat axis
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0; // kSlice bounds
};

// Gradients of one backward pass, keyed by node id. Tensors that are not on
// the tape, or not reachable from the loss, read back as zeros.
class GradMap {
 public:
  Tensor grad(const Tensor& t) const;
  bool reached(const Tensor& t) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

// Append-only reverse-mode tape. Node ids are topologically ordered (every
// input id is smaller than its consumer), so backward is a single reverse
// sweep that visits each node once and sums contributions from all consumers.
// A tape is confined to one thread; distinct tapes may run in parallel.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable leaf (parameter / decision variable).
  Tensor leaf(const Tensor& value);

  GradMap backward(const Tensor& loss) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  void clear() { nodes_.clear(); }

  // Used by the op implementations.
  int ensure_on_tape(const Tensor& t);
  Tensor emit(Node n);

 private:
  std::vector<Node> nodes_;
};

// Elementwise / structural ops. Each validates shapes, evaluates the forward
// rule, rejects non-finite results, and records itself when any input
// requires gradients.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, std::size_t i0, std::size_t i1);  // 1-D
Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0,
             std::size_t c1);  // 2-D block
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor atan2(const Tensor& y, const Tensor& x);
Tensor softmax(const Tensor& a);  // last axis
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor row_add(const Tensor& m, const Tensor& r);  // broadcast row-vector add
Tensor reshape(const Tensor& a, Shape s);          // same numel, new extents

// String-keyed dispatcher over the op set above; throws ShapeError on an
// unsupported kind. Kinds taking extra arguments (scale, slice, concat axis)
// are reachable only through their typed entry points.
Tensor record(const std::string& op_kind, const std::vector<Tensor>& inputs);

// Central finite-difference gradient verification.
struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

using LossFn =
    std::function<Tensor(Tape&, std::vector<Tensor>&)>;  // staged leaves

// Compares tape gradients of fn against central differences with step h.
// coords_per_param < 0 checks every coordinate; otherwise that many
// coordinates are sampled per parameter (deterministically from coord_seed).
// Relative error uses denominator max(|ad|, |fd|, 1e-3).
GradCheckReport grad_check(
    const LossFn& fn, const std::vector<std::pair<std::string, Tensor>>& params,
    double h, double tol, int coords_per_param = -1,
    std::uint64_t coord_seed = 0);

}  // namespace transmpc::ad
