#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace sgt {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major f64 tensor. Copies are shallow views of the same buffer;
// ops never mutate their inputs. A tensor is either a free value (no tape)
// or a node on exactly one tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int axis) const;  // negative axis counts from the back
  int64_t size() const;
  bool defined() const { return data_ != nullptr; }
  bool is_scalar() const;

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::vector<double>& vec() { return *data_; }
  const std::vector<double>& vec() const { return *data_; }

  double item() const;  // ContractError unless scalar
  double at(std::initializer_list<int> idx) const;

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int tape_id() const { return tape_id_; }
  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool rg) {
    requires_grad_ = rg;
    return *this;
  }

  // Deep copy of the buffer, detached from any tape.
  Tensor clone() const;
  // Shallow alias detached from any tape (shares the buffer).
  Tensor detached() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int tape_id_ = -1;
  bool requires_grad_ = false;
};

// Build-then-consume reverse-mode tape. One forward pass records nodes in
// topological order; backward(root) consumes them once. Confine a tape and
// everything registered on it to a single thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& gout)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf sharing `value`'s buffer.
  Tensor leaf(const Tensor& value, bool requires_grad = true);

  // root must be a scalar recorded on this tape.
  void backward(const Tensor& root);

  bool has_grad(const Tensor& t) const;
  // Gradient of the last backward() wrt t; zeros if t was unreachable.
  Tensor grad(const Tensor& t) const;

  void reset();
  size_t node_count() const { return nodes_.size(); }

  // -- recording interface (used by the op layer) --
  void record(Tensor& out, std::vector<int> parents, BackwardFn back);
  std::vector<double>& grad_buf(int id);

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn back;
    int64_t size = 0;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Debug-mode NaN/Inf screening of every op result.
void set_debug_checks(bool on);
bool debug_checks();

// Scoped label included in NumericFault messages, e.g. "gel.attention".
class OpContext {
 public:
  explicit OpContext(std::string label);
  ~OpContext();
  OpContext(const OpContext&) = delete;
  OpContext& operator=(const OpContext&) = delete;
};

// ---- ops ----
// Every op is differentiable where noted; results are recorded on the
// (unique) tape of the taped inputs, or are free values if no input is taped.

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor transpose2(const Tensor& a);               // 2-d
Tensor reshape(const Tensor& a, Shape s);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_last(const Tensor& a, int start, int len);
Tensor take_rows(const Tensor& a, const std::vector<int>& rows);    // 2-d
Tensor gather_rows(const Tensor& a, const std::vector<int>& cols);  // [n,C] -> [n]
Tensor expand_front(const Tensor& a, int n);  // [s...] -> [n,s...]
Tensor expand_last(const Tensor& a, int k);   // [s...] -> [s...,k]
Tensor sum_axis(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);   // -> scalar
Tensor mean_all(const Tensor& a);  // -> scalar
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow_const(const Tensor& a, double p);
// Clamp pre-exponent logits to [lo,hi], exponentiate, normalize along axis.
Tensor softmax_clamped(const Tensor& a, int axis, double lo, double hi);
Tensor softmax(const Tensor& a, int axis);  // unclamped, max-subtracted
// Per-last-axis normalization: gain * (x-mean)/sqrt(var+eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor add_bias(const Tensor& x, const Tensor& b);  // [...,d] + [d]

}  // namespace sgt
