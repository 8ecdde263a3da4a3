#include "sgt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

#include "sgt/util.hpp"

namespace sgt {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(data))) {
  if (numel(shape_) != int64_t(data_->size())) {
    throw DimensionError("tensor: shape " + shape_str(shape_) + " needs " +
                         std::to_string(numel(shape_)) + " values, got " +
                         std::to_string(data_->size()));
  }
}

Tensor Tensor::zeros(Shape s) {
  int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(size_t(n), 0.0));
}

Tensor Tensor::full(Shape s, double v) {
  int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(size_t(n), v));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

int Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape_));
  }
  return shape_[size_t(axis)];
}

int64_t Tensor::size() const { return data_ ? int64_t(data_->size()) : 0; }

bool Tensor::is_scalar() const {
  return defined() && (shape_.empty() || (shape_.size() == 1 && shape_[0] == 1));
}

double Tensor::item() const {
  if (!is_scalar()) {
    throw ContractError("item(): tensor of shape " + shape_str(shape_) +
                        " is not a scalar");
  }
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (int(idx.size()) != rank()) {
    throw DimensionError("at(): " + std::to_string(idx.size()) +
                         " indices for shape " + shape_str(shape_));
  }
  int64_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    flat = flat * shape_[k] + i;
    ++k;
  }
  return (*data_)[size_t(flat)];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  t.requires_grad_ = requires_grad_;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---- Tape ----

void Tape::record(Tensor& out, std::vector<int> parents, BackwardFn back) {
  Node n;
  n.parents = std::move(parents);
  n.back = std::move(back);
  n.size = out.size();
  nodes_.push_back(std::move(n));
  out.tape_ = this;
  out.tape_id_ = int(nodes_.size()) - 1;
}

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
  if (!value.defined()) throw ContractError("leaf(): undefined tensor");
  Tensor t = value.detached();
  t.requires_grad_ = requires_grad;
  record(t, {}, nullptr);
  return t;
}

std::vector<double>& Tape::grad_buf(int id) {
  if (grads_[size_t(id)].empty() && nodes_[size_t(id)].size > 0) {
    grads_[size_t(id)].assign(size_t(nodes_[size_t(id)].size), 0.0);
  }
  return grads_[size_t(id)];
}

void Tape::backward(const Tensor& root) {
  if (root.tape_ != this) {
    throw ContractError("backward: root is not on this tape");
  }
  if (!root.is_scalar()) {
    throw ContractError("backward: root of shape " + shape_str(root.shape()) +
                        " is not a scalar");
  }
  grads_.assign(nodes_.size(), {});
  grad_buf(root.tape_id_)[0] = 1.0;
  // Node ids are topological by construction; one reverse sweep suffices.
  for (int i = root.tape_id_; i >= 0; --i) {
    if (grads_[size_t(i)].empty()) continue;
    if (nodes_[size_t(i)].back) nodes_[size_t(i)].back(*this, grads_[size_t(i)]);
  }
}

bool Tape::has_grad(const Tensor& t) const {
  return t.tape_ == this && t.tape_id_ >= 0 &&
         size_t(t.tape_id_) < grads_.size() &&
         !grads_[size_t(t.tape_id_)].empty();
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape_ != this) throw ContractError("grad: tensor is not on this tape");
  if (has_grad(t)) return Tensor(t.shape(), grads_[size_t(t.tape_id_)]);
  return Tensor::zeros(t.shape());
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
}

// ---- debug checks ----

namespace {
std::atomic<bool> g_debug_checks{false};
thread_local std::vector<std::string> g_op_context;

std::string context_str() {
  std::string s;
  for (const auto& c : g_op_context) {
    if (!s.empty()) s += ".";
    s += c;
  }
  return s;
}
}  // namespace

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

OpContext::OpContext(std::string label) {
  g_op_context.push_back(std::move(label));
}
OpContext::~OpContext() { g_op_context.pop_back(); }

// ---- op helpers ----

namespace {

void check_finite(const Tensor& t, const char* op) {
  if (!g_debug_checks.load()) return;
  for (double v : t.vec()) {
    if (!std::isfinite(v)) {
      std::string where = context_str();
      throw NumericFault(std::string("non-finite value produced by op '") +
                         op + "'" + (where.empty() ? "" : " in " + where));
    }
  }
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->on_tape()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw ContractError("op mixes tensors from two different tapes");
    }
  }
  return tape;
}

int parent_id(const Tensor& t) { return t.on_tape() ? t.tape_id() : -1; }

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return axis;
}

struct AxisSplit {
  int64_t outer;
  int64_t m;      // extent of the chosen axis
  int64_t inner;
};

AxisSplit axis_split(const Shape& s, int axis) {
  AxisSplit a{1, s[size_t(axis)], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tape* tape = common_tape({&a, &b});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (tape) {
    int ia = parent_id(a), ib = parent_id(b);
    tape->record(out, {ia, ib},
                 [ia, ib, n](Tape& t, const std::vector<double>& g) {
                   if (ia >= 0) {
                     auto& ga = t.grad_buf(ia);
                     for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
                   }
                   if (ib >= 0) {
                     auto& gb = t.grad_buf(ib);
                     for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += g[size_t(i)];
                   }
                 });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tape* tape = common_tape({&a, &b});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  if (tape) {
    int ia = parent_id(a), ib = parent_id(b);
    tape->record(out, {ia, ib},
                 [ia, ib, n](Tape& t, const std::vector<double>& g) {
                   if (ia >= 0) {
                     auto& ga = t.grad_buf(ia);
                     for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
                   }
                   if (ib >= 0) {
                     auto& gb = t.grad_buf(ib);
                     for (int64_t i = 0; i < n; ++i) gb[size_t(i)] -= g[size_t(i)];
                   }
                 });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tape* tape = common_tape({&a, &b});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  if (tape) {
    int ia = parent_id(a), ib = parent_id(b);
    Tensor av = a.detached(), bv = b.detached();
    tape->record(out, {ia, ib},
                 [ia, ib, n, av, bv](Tape& t, const std::vector<double>& g) {
                   if (ia >= 0) {
                     auto& ga = t.grad_buf(ia);
                     const double* pb2 = bv.data();
                     for (int64_t i = 0; i < n; ++i)
                       ga[size_t(i)] += g[size_t(i)] * pb2[i];
                   }
                   if (ib >= 0) {
                     auto& gb = t.grad_buf(ib);
                     const double* pa2 = av.data();
                     for (int64_t i = 0; i < n; ++i)
                       gb[size_t(i)] += g[size_t(i)] * pa2[i];
                   }
                 });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  check_finite(out, "scale");
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia}, [ia, c, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * c;
    });
  }
  return out;
}

// ---- matmul / transpose / reshape ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: expects 2-d operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tape* tape = common_tape({&a, &b});
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + int64_t(kk) * n;
      double* orow = po + int64_t(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(out, "matmul");
  if (tape) {
    int ia = parent_id(a), ib = parent_id(b);
    Tensor av = a.detached(), bv = b.detached();
    tape->record(
        out, {ia, ib},
        [ia, ib, av, bv, m, k, n](Tape& t, const std::vector<double>& g) {
          if (ia >= 0) {
            auto& ga = t.grad_buf(ia);  // [m,k] += g [m,n] * b^T [n,k]
            const double* pb2 = bv.data();
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                double gv = g[size_t(i * n + j)];
                if (gv == 0.0) continue;
                for (int kk = 0; kk < k; ++kk)
                  ga[size_t(i * k + kk)] += gv * pb2[kk * n + j];
              }
          }
          if (ib >= 0) {
            auto& gb = t.grad_buf(ib);  // [k,n] += a^T [k,m] * g [m,n]
            const double* pa2 = av.data();
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                double av2 = pa2[i * k + kk];
                if (av2 == 0.0) continue;
                for (int j = 0; j < n; ++j)
                  gb[size_t(kk * n + j)] += av2 * g[size_t(i * n + j)];
              }
          }
        });
  }
  return out;
}

Tensor transpose2(const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError("transpose2: expects 2-d, got " + shape_str(a.shape()));
  }
  int m = a.shape()[0], n = a.shape()[1];
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros({n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia}, [ia, m, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[size_t(i * n + j)] += g[size_t(j * m + i)];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape s) {
  if (numel(s) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                         " as " + shape_str(s));
  }
  Tape* tape = common_tape({&a});
  Tensor out(std::move(s), a.vec());
  if (tape) {
    int ia = a.tape_id();
    int64_t n = a.size();
    tape->record(out, {ia}, [ia, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
    });
  }
  return out;
}

// ---- concat / slicing / gathers ----

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  int rank = parts[0].rank();
  axis = norm_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) {
      throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) +
                           " vs " + shape_str(parts[0].shape()));
    }
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[size_t(i)] != out_shape[size_t(i)]) {
        throw DimensionError("concat: extent mismatch off axis, " +
                             shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
      }
    }
    total += p.shape()[size_t(axis)];
  }
  out_shape[size_t(axis)] = total;

  std::initializer_list<const Tensor*> dummy{};
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (p.on_tape()) {
      if (tape && tape != p.tape())
        throw ContractError("concat mixes tensors from two different tapes");
      tape = p.tape();
    }
  }
  (void)dummy;

  Tensor out = Tensor::zeros(out_shape);
  AxisSplit sp = axis_split(out_shape, axis);
  double* po = out.data();
  int64_t off_m = 0;
  struct PartInfo {
    int id;
    int64_t m;
  };
  std::vector<PartInfo> infos;
  infos.reserve(parts.size());
  for (const Tensor& p : parts) {
    int64_t pm = p.shape()[size_t(axis)];
    const double* pp = p.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* src = pp + o * pm * sp.inner;
      double* dst = po + (o * sp.m + off_m) * sp.inner;
      std::copy(src, src + pm * sp.inner, dst);
    }
    infos.push_back({parent_id(p), pm});
    off_m += pm;
  }
  check_finite(out, "concat");
  if (tape) {
    std::vector<int> parents;
    parents.reserve(infos.size());
    for (const auto& pi : infos) parents.push_back(pi.id);
    tape->record(out, parents,
                 [infos, sp](Tape& t, const std::vector<double>& g) {
                   int64_t off = 0;
                   for (const auto& pi : infos) {
                     if (pi.id >= 0) {
                       auto& gp = t.grad_buf(pi.id);
                       for (int64_t o = 0; o < sp.outer; ++o) {
                         const double* src = g.data() + (o * sp.m + off) * sp.inner;
                         double* dst = gp.data() + o * pi.m * sp.inner;
                         for (int64_t i = 0; i < pi.m * sp.inner; ++i)
                           dst[i] += src[i];
                       }
                     }
                     off += pi.m;
                   }
                 });
  }
  return out;
}

Tensor slice_last(const Tensor& a, int start, int len) {
  int d = a.dim(-1);
  if (start < 0 || len <= 0 || start + len > d) {
    throw DimensionError("slice_last: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of extent " +
                         std::to_string(d));
  }
  Shape out_shape = a.shape();
  out_shape.back() = len;
  int64_t rows = a.size() / d;
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(out_shape);
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(pa + r * d + start, pa + r * d + start + len, po + r * len);
  }
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia},
                 [ia, rows, d, start, len](Tape& t, const std::vector<double>& g) {
                   auto& ga = t.grad_buf(ia);
                   for (int64_t r = 0; r < rows; ++r)
                     for (int i = 0; i < len; ++i)
                       ga[size_t(r * d + start + i)] += g[size_t(r * len + i)];
                 });
  }
  return out;
}

Tensor take_rows(const Tensor& a, const std::vector<int>& rows) {
  if (a.rank() != 2) {
    throw DimensionError("take_rows: expects 2-d, got " + shape_str(a.shape()));
  }
  int n = a.shape()[0], c = a.shape()[1];
  for (int r : rows) {
    if (r < 0 || r >= n)
      throw ContractError("take_rows: row " + std::to_string(r) +
                          " out of range [0," + std::to_string(n) + ")");
  }
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros({int(rows.size()), c});
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(pa + int64_t(rows[i]) * c, pa + int64_t(rows[i]) * c + c,
              po + int64_t(i) * c);
  }
  if (tape) {
    int ia = a.tape_id();
    std::vector<int> idx = rows;
    tape->record(out, {ia}, [ia, idx, c](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < c; ++j)
          ga[size_t(int64_t(idx[i]) * c + j)] += g[i * size_t(c) + size_t(j)];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& cols) {
  if (a.rank() != 2) {
    throw DimensionError("gather_rows: expects 2-d, got " + shape_str(a.shape()));
  }
  int n = a.shape()[0], c = a.shape()[1];
  if (int(cols.size()) != n) {
    throw DimensionError("gather_rows: " + std::to_string(cols.size()) +
                         " indices for " + std::to_string(n) + " rows");
  }
  for (int j : cols) {
    if (j < 0 || j >= c)
      throw ContractError("gather_rows: column " + std::to_string(j) +
                          " out of range [0," + std::to_string(c) + ")");
  }
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros({n});
  const double* pa = a.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[int64_t(i) * c + cols[size_t(i)]];
  if (tape) {
    int ia = a.tape_id();
    std::vector<int> idx = cols;
    tape->record(out, {ia}, [ia, idx, c](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < idx.size(); ++i)
        ga[i * size_t(c) + size_t(idx[i])] += g[i];
    });
  }
  return out;
}

// ---- broadcasts / reductions ----

Tensor expand_front(const Tensor& a, int n) {
  if (n <= 0) throw ContractError("expand_front: n must be positive");
  Shape out_shape;
  out_shape.push_back(n);
  for (int d : a.shape()) out_shape.push_back(d);
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(out_shape);
  int64_t block = a.size();
  const double* pa = a.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i) std::copy(pa, pa + block, po + int64_t(i) * block);
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia},
                 [ia, n, block](Tape& t, const std::vector<double>& g) {
                   auto& ga = t.grad_buf(ia);
                   for (int i = 0; i < n; ++i)
                     for (int64_t j = 0; j < block; ++j)
                       ga[size_t(j)] += g[size_t(int64_t(i) * block + j)];
                 });
  }
  return out;
}

Tensor expand_last(const Tensor& a, int k) {
  if (k <= 0) throw ContractError("expand_last: k must be positive");
  Shape out_shape = a.shape();
  out_shape.push_back(k);
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(out_shape);
  int64_t n = a.size();
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    std::fill(po + i * k, po + (i + 1) * k, pa[i]);
  }
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia}, [ia, n, k](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < k; ++j) s += g[size_t(i * k + j)];
        ga[size_t(i)] += s;
      }
    });
  }
  return out;
}

Tensor sum_axis(const Tensor& a, int axis) {
  axis = norm_axis(axis, a.rank());
  AxisSplit sp = axis_split(a.shape(), axis);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.shape()[size_t(i)]);
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(out_shape);
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t m = 0; m < sp.m; ++m)
      for (int64_t i = 0; i < sp.inner; ++i)
        po[o * sp.inner + i] += pa[(o * sp.m + m) * sp.inner + i];
  check_finite(out, "sum_axis");
  if (tape) {
    int ia = a.tape_id();
    tape->record(out, {ia}, [ia, sp](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t m = 0; m < sp.m; ++m)
          for (int64_t i = 0; i < sp.inner; ++i)
            ga[size_t((o * sp.m + m) * sp.inner + i)] += g[size_t(o * sp.inner + i)];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tape* tape = common_tape({&a});
  double s = 0;
  for (double v : a.vec()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum_all");
  if (tape) {
    int ia = a.tape_id();
    int64_t n = a.size();
    tape->record(out, {ia}, [ia, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[0];
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / double(a.size()));
}

// ---- nonlinearities ----

Tensor relu(const Tensor& a) {
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0 ? pa[i] : 0.0;
  if (tape) {
    int ia = a.tape_id();
    Tensor av = a.detached();
    tape->record(out, {ia}, [ia, av, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      const double* pa2 = av.data();
      for (int64_t i = 0; i < n; ++i)
        if (pa2[i] > 0) ga[size_t(i)] += g[size_t(i)];
    });
  }
  return out;
}

Tensor exp(const Tensor& a) {
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  check_finite(out, "exp");
  if (tape) {
    int ia = a.tape_id();
    Tensor ov = out.detached();
    tape->record(out, {ia}, [ia, ov, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      const double* po2 = ov.data();
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * po2[i];
    });
  }
  return out;
}

Tensor log(const Tensor& a) {
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  check_finite(out, "log");
  if (tape) {
    int ia = a.tape_id();
    Tensor av = a.detached();
    tape->record(out, {ia}, [ia, av, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(ia);
      const double* pa2 = av.data();
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] / pa2[i];
    });
  }
  return out;
}

Tensor pow_const(const Tensor& a, double p) {
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::pow(pa[i], p);
  check_finite(out, "pow_const");
  if (tape) {
    int ia = a.tape_id();
    Tensor av = a.detached();
    tape->record(out, {ia},
                 [ia, av, p, n](Tape& t, const std::vector<double>& g) {
                   if (p == 0.0) return;  // constant 1
                   auto& ga = t.grad_buf(ia);
                   const double* pa2 = av.data();
                   for (int64_t i = 0; i < n; ++i)
                     ga[size_t(i)] += g[size_t(i)] * p * std::pow(pa2[i], p - 1.0);
                 });
  }
  return out;
}

// ---- softmax / layer norm / bias ----

namespace {

Tensor softmax_impl(const Tensor& a, int axis, double lo, double hi,
                    bool clamped) {
  axis = norm_axis(axis, a.rank());
  if (a.shape()[size_t(axis)] < 1) {
    throw ContractError("softmax: empty axis");
  }
  AxisSplit sp = axis_split(a.shape(), axis);
  Tape* tape = common_tape({&a});
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      // lane (o, :, i)
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t m = 0; m < sp.m; ++m) {
        double z = pa[(o * sp.m + m) * sp.inner + i];
        if (clamped) z = std::min(hi, std::max(lo, z));
        mx = std::max(mx, z);
      }
      double denom = 0;
      for (int64_t m = 0; m < sp.m; ++m) {
        double z = pa[(o * sp.m + m) * sp.inner + i];
        if (clamped) z = std::min(hi, std::max(lo, z));
        double e = std::exp(z - mx);
        po[(o * sp.m + m) * sp.inner + i] = e;
        denom += e;
      }
      for (int64_t m = 0; m < sp.m; ++m) po[(o * sp.m + m) * sp.inner + i] /= denom;
    }
  }
  check_finite(out, clamped ? "softmax_clamped" : "softmax");
  if (tape) {
    int ia = a.tape_id();
    Tensor av = a.detached(), ov = out.detached();
    tape->record(
        out, {ia},
        [ia, av, ov, sp, lo, hi, clamped](Tape& t, const std::vector<double>& g) {
          auto& ga = t.grad_buf(ia);
          const double* pa2 = av.data();
          const double* y = ov.data();
          for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
              double dot = 0;
              for (int64_t m = 0; m < sp.m; ++m) {
                int64_t k = (o * sp.m + m) * sp.inner + i;
                dot += g[size_t(k)] * y[k];
              }
              for (int64_t m = 0; m < sp.m; ++m) {
                int64_t k = (o * sp.m + m) * sp.inner + i;
                double dz = y[k] * (g[size_t(k)] - dot);
                if (clamped && (pa2[k] < lo || pa2[k] > hi)) dz = 0.0;
                ga[size_t(k)] += dz;
              }
            }
          }
        });
  }
  return out;
}

}  // namespace

Tensor softmax_clamped(const Tensor& a, int axis, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("softmax_clamped: requires lo < hi");
  return softmax_impl(a, axis, lo, hi, true);
}

Tensor softmax(const Tensor& a, int axis) {
  return softmax_impl(a, axis, 0, 0, false);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  int d = x.dim(-1);
  if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 ||
      bias.shape()[0] != d) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) +
                         "], got " + shape_str(gain.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  int64_t rows = x.size() / d;
  Tape* tape = common_tape({&x, &gain, &bias});
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<size_t>(x.size()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0;
    for (int i = 0; i < d; ++i) mu += row[i];
    mu /= d;
    double var = 0;
    for (int i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[size_t(r)] = inv;
    for (int i = 0; i < d; ++i) {
      double xh = (row[i] - mu) * inv;
      xhat[size_t(r * d + i)] = xh;
      po[r * d + i] = pg[i] * xh + pb[i];
    }
  }
  check_finite(out, "layer_norm");
  if (tape) {
    int ix = parent_id(x), ig = parent_id(gain), ib = parent_id(bias);
    Tensor gv = gain.detached();
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    tape->record(
        out, {ix, ig, ib},
        [ix, ig, ib, gv, xh, is, rows, d](Tape& t, const std::vector<double>& g) {
          const double* pg2 = gv.data();
          if (ig >= 0) {
            auto& gg = t.grad_buf(ig);
            for (int64_t r = 0; r < rows; ++r)
              for (int i = 0; i < d; ++i)
                gg[size_t(i)] += g[size_t(r * d + i)] * (*xh)[size_t(r * d + i)];
          }
          if (ib >= 0) {
            auto& gb = t.grad_buf(ib);
            for (int64_t r = 0; r < rows; ++r)
              for (int i = 0; i < d; ++i) gb[size_t(i)] += g[size_t(r * d + i)];
          }
          if (ix >= 0) {
            auto& gx = t.grad_buf(ix);
            for (int64_t r = 0; r < rows; ++r) {
              double mean_gy = 0, mean_gyxh = 0;
              for (int i = 0; i < d; ++i) {
                double gy = g[size_t(r * d + i)] * pg2[i];
                mean_gy += gy;
                mean_gyxh += gy * (*xh)[size_t(r * d + i)];
              }
              mean_gy /= d;
              mean_gyxh /= d;
              double inv = (*is)[size_t(r)];
              for (int i = 0; i < d; ++i) {
                double gy = g[size_t(r * d + i)] * pg2[i];
                gx[size_t(r * d + i)] +=
                    inv * (gy - mean_gy - (*xh)[size_t(r * d + i)] * mean_gyxh);
              }
            }
          }
        });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  int d = x.dim(-1);
  if (b.rank() != 1 || b.shape()[0] != d) {
    throw DimensionError("add_bias: bias must be [" + std::to_string(d) +
                         "], got " + shape_str(b.shape()));
  }
  int64_t rows = x.size() / d;
  Tape* tape = common_tape({&x, &b});
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int i = 0; i < d; ++i) po[r * d + i] = px[r * d + i] + pb[i];
  check_finite(out, "add_bias");
  if (tape) {
    int ix = parent_id(x), ib = parent_id(b);
    tape->record(out, {ix, ib},
                 [ix, ib, rows, d](Tape& t, const std::vector<double>& g) {
                   if (ix >= 0) {
                     auto& gx = t.grad_buf(ix);
                     for (size_t i = 0; i < size_t(rows * d); ++i) gx[i] += g[i];
                   }
                   if (ib >= 0) {
                     auto& gb = t.grad_buf(ib);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int i = 0; i < d; ++i)
                         gb[size_t(i)] += g[size_t(r * d + i)];
                   }
                 });
  }
  return out;
}

}  // namespace sgt
