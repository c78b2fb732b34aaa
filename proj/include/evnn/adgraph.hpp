#pragma once

// Reverse-mode automatic differentiation over dense f64 arrays.
//
// A Tape records every operation in append order. Values live in one
// contiguous arena and nodes refer to them by offset, so recording never
// allocates per node once the arena has warmed up. A Var is a (tape, node)
// handle; scalars are arrays of length one and broadcast against vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evnn::ad {

class Tape;

inline constexpr std::uint32_t kNoNode = std::numeric_limits<std::uint32_t>::max();

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ != kNoNode; }
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }

  std::size_t size() const;
  // Scalar value; throws if size() != 1.
  double value() const;
  double operator[](std::size_t i) const;
  std::span<const double> values() const;

  // Adjoints, valid after Tape::backward.
  double grad() const;
  std::span<const double> grads() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = kNoNode;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kCos,
  kSin,
  kTanh,
  kSigmoid,
  kScale,      // a * k
  kShift,      // a + k
  kAxpyConst,  // a + k * b
  kAxpy,       // a + s * b, s scalar Var
  kMaxReduce,
  kMaximum,
  kWhere,
  kSum,
  kDot,
  kMatVec,
  kIndex,
  kColumn,
  kRepeat,
  kGroupSum,
  kTile,
  kFoldSum,
  kAddAt,
  kConcat,
  kSlice,
  kCustom,
  kCustomOut,
};

struct AdjointArgs {
  std::vector<std::span<const double>> inputs;
  std::vector<std::span<const double>> outputs;
  std::vector<std::span<const double>> cotangents;
};

using ForwardFn =
    std::function<std::vector<std::vector<double>>(const std::vector<std::span<const double>>&)>;
// Must return exactly one cotangent array per input, each sized like that input.
using AdjointFn = std::function<std::vector<std::vector<double>>(const AdjointArgs&)>;

struct Seed {
  Var var;
  std::vector<double> cotangent;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes this tape the target of the free function leaf() on this thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_slot()) { active_slot() = &tape; }
    ~Scope() { active_slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() { return active_slot(); }

  Var leaf(double v) { return leaf(std::span<const double>(&v, 1)); }
  Var leaf(std::span<const double> v) { return source(Op::kLeaf, v); }
  Var constant(double v) { return constant(std::span<const double>(&v, 1)); }
  Var constant(std::span<const double> v) { return source(Op::kConst, v); }
  Var constant_fill(std::size_t n, double v) {
    const auto id = push(Op::kConst, n);
    std::fill_n(mutable_values(id), n, v);
    return {this, id};
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t value_count() const { return used_; }

  // Positions for speculative evaluation: everything recorded after mark()
  // is discarded by rewind(). Vars created after the mark become dangling.
  std::size_t mark() const { return nodes_.size(); }
  void rewind(std::size_t mark) {
    if (mark >= nodes_.size()) return;
    used_ = nodes_[mark].offset;
    nodes_.resize(mark);
    while (!customs_.empty() && customs_.back().node >= mark) customs_.pop_back();
    while (!lists_.empty() && lists_owner_.back() >= mark) {
      lists_.resize(lists_.size() - lists_len_.back());
      lists_owner_.pop_back();
      lists_len_.pop_back();
    }
    while (!masks_owner_.empty() && masks_owner_.back() >= mark) {
      masks_.resize(masks_.size() - masks_len_.back());
      masks_owner_.pop_back();
      masks_len_.pop_back();
    }
    if (adj_.size() > used_) adj_.resize(used_);
  }
  void clear() { rewind(0); }

  std::span<const double> values(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return {data_.get() + n.offset, n.size};
  }
  std::span<const double> grads(std::uint32_t id) const {
    const Node& n = nodes_[id];
    if (adj_.size() < n.offset + n.size) return {};
    return {adj_.data() + n.offset, n.size};
  }
  std::size_t size(std::uint32_t id) const { return nodes_[id].size; }

  // Reverse sweep from a scalar output. Seeds d(out)/d(out) = 1.
  void backward(Var out) {
    check_own(out);
    if (out.size() != 1) throw std::invalid_argument("backward: output must be scalar");
    std::vector<Seed> seeds(1);
    seeds[0].var = out;
    seeds[0].cotangent = {1.0};
    backward(seeds);
  }

  // Reverse sweep seeded with arbitrary cotangents. Only nodes with index
  // >= stop are visited and cleared; adjoint flowing into earlier nodes is
  // dropped, so callers must create private leaves above `stop`.
  void backward(const std::vector<Seed>& seeds, std::size_t stop = 0) {
    if (nodes_.empty()) return;
    const std::size_t begin_off = stop < nodes_.size() ? nodes_[stop].offset : used_;
    if (adj_.size() < used_) adj_.resize(used_);
    std::fill(adj_.begin() + static_cast<std::ptrdiff_t>(begin_off), adj_.begin() + static_cast<std::ptrdiff_t>(used_),
              0.0);
    std::uint32_t top = 0;
    for (const auto& s : seeds) {
      check_own(s.var);
      const Node& n = nodes_[s.var.id()];
      if (s.cotangent.size() != n.size) throw std::invalid_argument("backward: seed size mismatch");
      for (std::size_t i = 0; i < n.size; ++i) adj_[n.offset + i] += s.cotangent[i];
      top = std::max(top, s.var.id());
    }
    for (std::int64_t id = top; id >= static_cast<std::int64_t>(stop); --id) {
      propagate(static_cast<std::uint32_t>(id), stop);
    }
  }

  // ---- recording primitives (used by the free-function operators) ----

  Var binary(Op op, Var a, Var b) {
    check_pair(a, b);
    const std::size_t na = size(a.id()), nb = size(b.id());
    if (na != nb && na != 1 && nb != 1) throw shape_error("binary", na, nb);
    const std::size_t n = std::max(na, nb);
    const auto id = push(op, n, a.id(), b.id());
    const double* pa = cvalues(a.id());
    const double* pb = cvalues(b.id());
    double* out = mutable_values(id);
    const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i * sa] + pb[i * sb];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i * sa] - pb[i * sb];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i * sa] * pb[i * sb];
        break;
      case Op::kDiv:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i * sa] / pb[i * sb];
        break;
      case Op::kMaximum:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i * sa] >= pb[i * sb] ? pa[i * sa] : pb[i * sb];
        break;
      default:
        throw std::logic_error("binary: not a binary op");
    }
    return {this, id};
  }

  Var unary(Op op, Var a, double k = 0.0) {
    check_own(a);
    const std::size_t n = size(a.id());
    const double* pa = cvalues(a.id());
    if (op == Op::kLog) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!(pa[i] > 0.0)) throw std::domain_error("log of non-positive value " + std::to_string(pa[i]));
      }
    }
    const auto id = push(op, n, a.id());
    nodes_[id].k = k;
    pa = cvalues(a.id());
    double* out = mutable_values(id);
    switch (op) {
      case Op::kNeg:
        for (std::size_t i = 0; i < n; ++i) out[i] = -pa[i];
        break;
      case Op::kExp:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(pa[i]);
        break;
      case Op::kLog:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::log(pa[i]);
        break;
      case Op::kCos:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::cos(pa[i]);
        break;
      case Op::kSin:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::sin(pa[i]);
        break;
      case Op::kTanh:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(pa[i]);
        break;
      case Op::kSigmoid:
        for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_value(pa[i]);
        break;
      case Op::kScale:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * k;
        break;
      case Op::kShift:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + k;
        break;
      default:
        throw std::logic_error("unary: not a unary op");
    }
    return {this, id};
  }

  Var axpy(Var a, double k, Var b) {
    check_pair(a, b);
    const std::size_t n = size(a.id());
    if (size(b.id()) != n) throw shape_error("axpy", n, size(b.id()));
    const auto id = push(Op::kAxpyConst, n, a.id(), b.id());
    nodes_[id].k = k;
    const double* pa = cvalues(a.id());
    const double* pb = cvalues(b.id());
    double* out = mutable_values(id);
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + k * pb[i];
    return {this, id};
  }

  Var axpy(Var a, Var s, Var b) {
    check_pair(a, b);
    check_pair(a, s);
    const std::size_t n = size(a.id());
    if (size(b.id()) != n) throw shape_error("axpy", n, size(b.id()));
    if (size(s.id()) != 1) throw shape_error("axpy step", 1, size(s.id()));
    const auto id = push(Op::kAxpy, n, a.id(), b.id(), s.id());
    const double* pa = cvalues(a.id());
    const double* pb = cvalues(b.id());
    const double k = cvalues(s.id())[0];
    double* out = mutable_values(id);
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + k * pb[i];
    return {this, id};
  }

  Var max_reduce(Var a) {
    check_own(a);
    const std::size_t n = size(a.id());
    if (n == 0) throw std::invalid_argument("max of empty array");
    const double* pa = cvalues(a.id());
    std::uint32_t best = 0;
    for (std::uint32_t i = 1; i < n; ++i) {
      if (pa[i] > pa[best]) best = i;
    }
    const auto id = push(Op::kMaxReduce, 1, a.id());
    nodes_[id].aux = best;
    mutable_values(id)[0] = cvalues(a.id())[best];
    return {this, id};
  }

  Var where(std::span<const std::uint8_t> mask, Var a, Var b) {
    check_pair(a, b);
    const std::size_t na = size(a.id()), nb = size(b.id());
    const std::size_t n = mask.size();
    if ((na != n && na != 1) || (nb != n && nb != 1)) throw shape_error("where", n, na != n ? na : nb);
    const auto id = push(Op::kWhere, n, a.id(), b.id());
    nodes_[id].aux = static_cast<std::uint32_t>(masks_.size());
    masks_.insert(masks_.end(), mask.begin(), mask.end());
    masks_owner_.push_back(id);
    masks_len_.push_back(n);
    const double* pa = cvalues(a.id());
    const double* pb = cvalues(b.id());
    const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
    double* out = mutable_values(id);
    for (std::size_t i = 0; i < n; ++i) out[i] = mask[i] ? pa[i * sa] : pb[i * sb];
    return {this, id};
  }

  Var sum(Var a) {
    check_own(a);
    const std::size_t n = size(a.id());
    const auto id = push(Op::kSum, 1, a.id());
    const double* pa = cvalues(a.id());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += pa[i];
    mutable_values(id)[0] = s;
    return {this, id};
  }

  Var dot(Var a, Var b) {
    check_pair(a, b);
    const std::size_t n = size(a.id());
    if (size(b.id()) != n) throw shape_error("dot", n, size(b.id()));
    const auto id = push(Op::kDot, 1, a.id(), b.id());
    const double* pa = cvalues(a.id());
    const double* pb = cvalues(b.id());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += pa[i] * pb[i];
    mutable_values(id)[0] = s;
    return {this, id};
  }

  // m is row-major (rows x cols) with cols == x.size().
  Var matvec(Var m, Var x) {
    check_pair(m, x);
    const std::size_t cols = size(x.id());
    if (cols == 0 || size(m.id()) % cols != 0) throw shape_error("matvec", size(m.id()), cols);
    const std::size_t rows = size(m.id()) / cols;
    const auto id = push(Op::kMatVec, rows, m.id(), x.id());
    const double* pm = cvalues(m.id());
    const double* px = cvalues(x.id());
    double* out = mutable_values(id);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += pm[r * cols + c] * px[c];
      out[r] = s;
    }
    return {this, id};
  }

  Var index(Var a, std::size_t i) {
    check_own(a);
    if (i >= size(a.id())) throw std::out_of_range("index " + std::to_string(i));
    const auto id = push(Op::kIndex, 1, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(i);
    mutable_values(id)[0] = cvalues(a.id())[i];
    return {this, id};
  }

  // Column j of a row-major (rows x cols) matrix.
  Var column(Var m, std::size_t rows, std::size_t j) {
    check_own(m);
    if (rows == 0 || size(m.id()) % rows != 0) throw shape_error("column", size(m.id()), rows);
    const std::size_t cols = size(m.id()) / rows;
    if (j >= cols) throw std::out_of_range("column " + std::to_string(j));
    const auto id = push(Op::kColumn, rows, m.id());
    nodes_[id].aux = static_cast<std::uint32_t>(j);
    nodes_[id].aux2 = static_cast<std::uint32_t>(cols);
    const double* pm = cvalues(m.id());
    double* out = mutable_values(id);
    for (std::size_t r = 0; r < rows; ++r) out[r] = pm[r * cols + j];
    return {this, id};
  }

  // out[i*k + r] = a[i]
  Var repeat(Var a, std::size_t k) {
    check_own(a);
    const std::size_t n = size(a.id());
    const auto id = push(Op::kRepeat, n * k, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(k);
    const double* pa = cvalues(a.id());
    double* out = mutable_values(id);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < k; ++r) out[i * k + r] = pa[i];
    return {this, id};
  }

  // out[i] = sum_r a[i*k + r]
  Var group_sum(Var a, std::size_t k) {
    check_own(a);
    const std::size_t n = size(a.id());
    if (k == 0 || n % k != 0) throw shape_error("group_sum", n, k);
    const auto id = push(Op::kGroupSum, n / k, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(k);
    const double* pa = cvalues(a.id());
    double* out = mutable_values(id);
    for (std::size_t i = 0; i < n / k; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r) s += pa[i * k + r];
      out[i] = s;
    }
    return {this, id};
  }

  // out[r*n + i] = a[i], n = a.size()
  Var tile(Var a, std::size_t k) {
    check_own(a);
    const std::size_t n = size(a.id());
    const auto id = push(Op::kTile, n * k, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(k);
    const double* pa = cvalues(a.id());
    double* out = mutable_values(id);
    for (std::size_t r = 0; r < k; ++r) std::memcpy(out + r * n, pa, n * sizeof(double));
    return {this, id};
  }

  // out[i] = sum_r a[r*n + i], n = a.size() / k
  Var fold_sum(Var a, std::size_t k) {
    check_own(a);
    const std::size_t total = size(a.id());
    if (k == 0 || total % k != 0) throw shape_error("fold_sum", total, k);
    const std::size_t n = total / k;
    const auto id = push(Op::kFoldSum, n, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(k);
    const double* pa = cvalues(a.id());
    double* out = mutable_values(id);
    std::memcpy(out, pa, n * sizeof(double));
    for (std::size_t r = 1; r < k; ++r)
      for (std::size_t i = 0; i < n; ++i) out[i] += pa[r * n + i];
    return {this, id};
  }

  // out = a; out[start + m*stride] += w[m]
  Var add_at(Var a, Var w, std::size_t start, std::size_t stride) {
    check_pair(a, w);
    const std::size_t n = size(a.id()), nw = size(w.id());
    if (nw > 0 && start + (nw - 1) * stride >= n) throw shape_error("add_at", n, start + (nw - 1) * stride + 1);
    const auto id = push(Op::kAddAt, n, a.id(), w.id());
    nodes_[id].aux = static_cast<std::uint32_t>(start);
    nodes_[id].aux2 = static_cast<std::uint32_t>(stride);
    const double* pa = cvalues(a.id());
    const double* pw = cvalues(w.id());
    double* out = mutable_values(id);
    std::memcpy(out, pa, n * sizeof(double));
    for (std::size_t m = 0; m < nw; ++m) out[start + m * stride] += pw[m];
    return {this, id};
  }

  Var concat(std::span<const Var> parts) {
    std::size_t n = 0;
    for (const Var& p : parts) {
      check_own(p);
      n += size(p.id());
    }
    const auto id = push(Op::kConcat, n);
    nodes_[id].aux = static_cast<std::uint32_t>(lists_.size());
    nodes_[id].aux2 = static_cast<std::uint32_t>(parts.size());
    for (const Var& p : parts) lists_.push_back(p.id());
    lists_owner_.push_back(id);
    lists_len_.push_back(parts.size());
    double* out = mutable_values(id);
    for (const Var& p : parts) {
      const std::size_t m = size(p.id());
      std::memcpy(out, cvalues(p.id()), m * sizeof(double));
      out += m;
    }
    return {this, id};
  }

  Var slice(Var a, std::size_t begin, std::size_t len) {
    check_own(a);
    if (begin + len > size(a.id())) throw shape_error("slice", size(a.id()), begin + len);
    const auto id = push(Op::kSlice, len, a.id());
    nodes_[id].aux = static_cast<std::uint32_t>(begin);
    std::memcpy(mutable_values(id), cvalues(a.id()) + begin, len * sizeof(double));
    return {this, id};
  }

  std::vector<Var> custom(const ForwardFn& forward, AdjointFn adjoint, std::span<const Var> inputs) {
    std::vector<std::span<const double>> in_values;
    in_values.reserve(inputs.size());
    for (const Var& v : inputs) {
      check_own(v);
      in_values.push_back(values(v.id()));
    }
    std::vector<std::vector<double>> out_values = forward(in_values);
    const auto group = push(Op::kCustom, 0);
    CustomRecord rec;
    rec.node = group;
    rec.adjoint = std::move(adjoint);
    rec.inputs.reserve(inputs.size());
    for (const Var& v : inputs) rec.inputs.push_back(v.id());
    std::vector<Var> outs;
    outs.reserve(out_values.size());
    for (const auto& ov : out_values) {
      const auto id = push(Op::kCustomOut, ov.size(), group);
      std::memcpy(mutable_values(id), ov.data(), ov.size() * sizeof(double));
      rec.outputs.push_back(id);
      outs.emplace_back(this, id);
    }
    nodes_[group].aux = static_cast<std::uint32_t>(customs_.size());
    customs_.push_back(std::move(rec));
    return outs;
  }

  void check_own(const Var& v) const {
    if (v.tape() != this) {
      throw std::invalid_argument(v.valid() ? "variable belongs to a different tape" : "invalid variable");
    }
  }

 private:
  struct Node {
    Op op = Op::kConst;
    std::uint32_t size = 0;
    std::uint32_t a = kNoNode, b = kNoNode, c = kNoNode;
    std::uint32_t aux = 0, aux2 = 0;
    std::size_t offset = 0;
    double k = 0.0;
  };

  struct CustomRecord {
    std::uint32_t node = 0;
    std::vector<std::uint32_t> inputs;
    std::vector<std::uint32_t> outputs;
    AdjointFn adjoint;
  };

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  static double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static std::invalid_argument shape_error(const char* what, std::size_t a, std::size_t b) {
    return std::invalid_argument(std::string(what) + ": shape mismatch (" + std::to_string(a) + " vs " +
                                 std::to_string(b) + ")");
  }

  void check_pair(const Var& a, const Var& b) const {
    check_own(a);
    check_own(b);
  }

  // v may alias the arena (a node's values), so it is located by offset
  // before push can reallocate.
  Var source(Op op, std::span<const double> v) {
    const double* base = data_.get();
    const bool own = !v.empty() && base && v.data() >= base && v.data() < base + used_;
    const std::size_t at = own ? static_cast<std::size_t>(v.data() - base) : 0;
    const auto id = push(op, v.size());
    if (!v.empty()) std::memcpy(mutable_values(id), own ? data_.get() + at : v.data(), v.size() * sizeof(double));
    return {this, id};
  }

  std::uint32_t push(Op op, std::size_t n, std::uint32_t a = kNoNode, std::uint32_t b = kNoNode,
                     std::uint32_t c = kNoNode) {
    if (used_ + n > capacity_) grow(used_ + n);
    Node node;
    node.op = op;
    node.size = static_cast<std::uint32_t>(n);
    node.a = a;
    node.b = b;
    node.c = c;
    node.offset = used_;
    used_ += n;
    nodes_.push_back(node);
    return static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  void grow(std::size_t need) {
    std::size_t cap = std::max<std::size_t>(capacity_ * 2, 1 << 14);
    while (cap < need) cap *= 2;
    auto next = std::make_unique_for_overwrite<double[]>(cap);
    if (used_ > 0) std::memcpy(next.get(), data_.get(), used_ * sizeof(double));
    data_ = std::move(next);
    capacity_ = cap;
  }

  const double* cvalues(std::uint32_t id) const { return data_.get() + nodes_[id].offset; }
  double* mutable_values(std::uint32_t id) { return data_.get() + nodes_[id].offset; }

  void propagate(std::uint32_t id, std::size_t stop) {
    const Node& n = nodes_[id];
    const double* g = adj_.data() + n.offset;
    const double* out = data_.get() + n.offset;
    auto live = [&](std::uint32_t p) { return p != kNoNode && p >= stop; };
    auto ga = [&]() { return adj_.data() + nodes_[n.a].offset; };
    auto gb = [&]() { return adj_.data() + nodes_[n.b].offset; };
    const std::size_t size = n.size;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
      case Op::kCustomOut:
        return;
      default:
        break;
    }
    if (n.op == Op::kCustom) {
      run_custom(customs_[n.aux], stop);
      return;
    }
    bool any = false;
    for (std::size_t i = 0; i < size; ++i) {
      if (g[i] != 0.0) {
        any = true;
        break;
      }
    }
    if (!any) return;
    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv:
      case Op::kMaximum: {
        const std::size_t na = nodes_[n.a].size, nb = nodes_[n.b].size;
        const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
        const double* pa = cvalues(n.a);
        const double* pb = cvalues(n.b);
        const bool la = live(n.a), lb = live(n.b);
        double* da = la ? ga() : nullptr;
        double* db = lb ? gb() : nullptr;
        for (std::size_t i = 0; i < size; ++i) {
          const double gi = g[i];
          double ca = 0.0, cb = 0.0;
          switch (n.op) {
            case Op::kAdd:
              ca = gi;
              cb = gi;
              break;
            case Op::kSub:
              ca = gi;
              cb = -gi;
              break;
            case Op::kMul:
              ca = gi * pb[i * sb];
              cb = gi * pa[i * sa];
              break;
            case Op::kDiv:
              ca = gi / pb[i * sb];
              cb = -gi * out[i] / pb[i * sb];
              break;
            default:  // kMaximum, ties to the first operand
              if (pa[i * sa] >= pb[i * sb]) ca = gi;
              else cb = gi;
              break;
          }
          if (la) da[i * sa] += ca;
          if (lb) db[i * sb] += cb;
        }
        return;
      }
      case Op::kNeg:
      case Op::kExp:
      case Op::kLog:
      case Op::kCos:
      case Op::kSin:
      case Op::kTanh:
      case Op::kSigmoid:
      case Op::kScale:
      case Op::kShift: {
        if (!live(n.a)) return;
        double* da = ga();
        const double* pa = cvalues(n.a);
        for (std::size_t i = 0; i < size; ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::kNeg: d = -1.0; break;
            case Op::kExp: d = out[i]; break;
            case Op::kLog: d = 1.0 / pa[i]; break;
            case Op::kCos: d = -std::sin(pa[i]); break;
            case Op::kSin: d = std::cos(pa[i]); break;
            case Op::kTanh: d = 1.0 - out[i] * out[i]; break;
            case Op::kSigmoid: d = out[i] * (1.0 - out[i]); break;
            case Op::kScale: d = n.k; break;
            default: d = 1.0; break;
          }
          da[i] += g[i] * d;
        }
        return;
      }
      case Op::kAxpyConst: {
        if (live(n.a)) {
          double* da = ga();
          for (std::size_t i = 0; i < size; ++i) da[i] += g[i];
        }
        if (live(n.b)) {
          double* db = gb();
          for (std::size_t i = 0; i < size; ++i) db[i] += n.k * g[i];
        }
        return;
      }
      case Op::kAxpy: {
        const double s = cvalues(n.c)[0];
        if (live(n.a)) {
          double* da = ga();
          for (std::size_t i = 0; i < size; ++i) da[i] += g[i];
        }
        if (live(n.b)) {
          double* db = gb();
          for (std::size_t i = 0; i < size; ++i) db[i] += s * g[i];
        }
        if (live(n.c)) {
          const double* pb = cvalues(n.b);
          double acc = 0.0;
          for (std::size_t i = 0; i < size; ++i) acc += g[i] * pb[i];
          adj_[nodes_[n.c].offset] += acc;
        }
        return;
      }
      case Op::kMaxReduce:
        if (live(n.a)) ga()[n.aux] += g[0];
        return;
      case Op::kWhere: {
        const std::uint8_t* mask = masks_.data() + n.aux;
        const std::size_t na = nodes_[n.a].size, nb = nodes_[n.b].size;
        const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
        const bool la = live(n.a), lb = live(n.b);
        double* da = la ? ga() : nullptr;
        double* db = lb ? gb() : nullptr;
        for (std::size_t i = 0; i < size; ++i) {
          if (mask[i]) {
            if (la) da[i * sa] += g[i];
          } else if (lb) {
            db[i * sb] += g[i];
          }
        }
        return;
      }
      case Op::kSum: {
        if (!live(n.a)) return;
        double* da = ga();
        const std::size_t na = nodes_[n.a].size;
        for (std::size_t i = 0; i < na; ++i) da[i] += g[0];
        return;
      }
      case Op::kDot: {
        const std::size_t na = nodes_[n.a].size;
        const double* pa = cvalues(n.a);
        const double* pb = cvalues(n.b);
        if (live(n.a)) {
          double* da = ga();
          for (std::size_t i = 0; i < na; ++i) da[i] += g[0] * pb[i];
        }
        if (live(n.b)) {
          double* db = gb();
          for (std::size_t i = 0; i < na; ++i) db[i] += g[0] * pa[i];
        }
        return;
      }
      case Op::kMatVec: {
        const std::size_t rows = size, cols = nodes_[n.b].size;
        const double* pm = cvalues(n.a);
        const double* px = cvalues(n.b);
        if (live(n.a)) {
          double* dm = ga();
          for (std::size_t r = 0; r < rows; ++r) {
            if (g[r] == 0.0) continue;
            for (std::size_t c = 0; c < cols; ++c) dm[r * cols + c] += g[r] * px[c];
          }
        }
        if (live(n.b)) {
          double* dx = gb();
          for (std::size_t r = 0; r < rows; ++r) {
            if (g[r] == 0.0) continue;
            for (std::size_t c = 0; c < cols; ++c) dx[c] += pm[r * cols + c] * g[r];
          }
        }
        return;
      }
      case Op::kIndex:
        if (live(n.a)) ga()[n.aux] += g[0];
        return;
      case Op::kColumn: {
        if (!live(n.a)) return;
        double* dm = ga();
        for (std::size_t r = 0; r < size; ++r) dm[r * n.aux2 + n.aux] += g[r];
        return;
      }
      case Op::kRepeat: {
        if (!live(n.a)) return;
        double* da = ga();
        const std::size_t k = n.aux;
        for (std::size_t i = 0; i < size / k; ++i)
          for (std::size_t r = 0; r < k; ++r) da[i] += g[i * k + r];
        return;
      }
      case Op::kGroupSum: {
        if (!live(n.a)) return;
        double* da = ga();
        const std::size_t k = n.aux;
        for (std::size_t i = 0; i < size; ++i)
          for (std::size_t r = 0; r < k; ++r) da[i * k + r] += g[i];
        return;
      }
      case Op::kTile: {
        if (!live(n.a)) return;
        double* da = ga();
        const std::size_t k = n.aux, m = size / k;
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t i = 0; i < m; ++i) da[i] += g[r * m + i];
        return;
      }
      case Op::kFoldSum: {
        if (!live(n.a)) return;
        double* da = ga();
        for (std::size_t r = 0; r < n.aux; ++r)
          for (std::size_t i = 0; i < size; ++i) da[r * size + i] += g[i];
        return;
      }
      case Op::kAddAt: {
        if (live(n.a)) {
          double* da = ga();
          for (std::size_t i = 0; i < size; ++i) da[i] += g[i];
        }
        if (live(n.b)) {
          double* dw = gb();
          const std::size_t nw = nodes_[n.b].size;
          for (std::size_t m = 0; m < nw; ++m) dw[m] += g[n.aux + m * n.aux2];
        }
        return;
      }
      case Op::kConcat: {
        std::size_t pos = 0;
        for (std::uint32_t p = 0; p < n.aux2; ++p) {
          const std::uint32_t src = lists_[n.aux + p];
          const std::size_t m = nodes_[src].size;
          if (live(src)) {
            double* dp = adj_.data() + nodes_[src].offset;
            for (std::size_t i = 0; i < m; ++i) dp[i] += g[pos + i];
          }
          pos += m;
        }
        return;
      }
      case Op::kSlice: {
        if (!live(n.a)) return;
        double* da = ga();
        for (std::size_t i = 0; i < size; ++i) da[n.aux + i] += g[i];
        return;
      }
      default:
        throw std::logic_error("backward: unhandled op");
    }
  }

  void run_custom(const CustomRecord& rec, std::size_t stop) {
    AdjointArgs args;
    bool any = false;
    for (std::uint32_t o : rec.outputs) {
      args.outputs.push_back(values(o));
      auto cot = grads(o);
      for (double c : cot) any = any || c != 0.0;
      args.cotangents.push_back(cot);
    }
    if (!any) return;
    for (std::uint32_t in : rec.inputs) args.inputs.push_back(values(in));
    const auto cots = rec.adjoint(args);
    if (cots.size() != rec.inputs.size()) {
      throw std::logic_error("custom adjoint returned " + std::to_string(cots.size()) + " cotangents for " +
                             std::to_string(rec.inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
      const std::uint32_t in = rec.inputs[i];
      const Node& node = nodes_[in];
      if (cots[i].size() != node.size) throw std::logic_error("custom adjoint cotangent size mismatch");
      if (in < stop) continue;
      double* d = adj_.data() + node.offset;
      for (std::size_t j = 0; j < node.size; ++j) d[j] += cots[i][j];
    }
  }

  std::vector<Node> nodes_;
  std::unique_ptr<double[]> data_;
  std::size_t used_ = 0;
  std::size_t capacity_ = 0;
  std::vector<double> adj_;
  std::vector<std::uint8_t> masks_;
  std::vector<std::uint32_t> masks_owner_;
  std::vector<std::size_t> masks_len_;
  std::vector<std::uint32_t> lists_;
  std::vector<std::uint32_t> lists_owner_;
  std::vector<std::size_t> lists_len_;
  std::vector<CustomRecord> customs_;
};

// ---- Var accessors ----

inline std::size_t Var::size() const { return tape_->size(id_); }
inline double Var::value() const {
  const auto v = tape_->values(id_);
  if (v.size() != 1) throw std::invalid_argument("value(): variable is not a scalar");
  return v[0];
}
inline double Var::operator[](std::size_t i) const { return tape_->values(id_)[i]; }
inline std::span<const double> Var::values() const { return tape_->values(id_); }
inline double Var::grad() const {
  const auto g = tape_->grads(id_);
  return g.empty() ? 0.0 : g[0];
}
inline std::span<const double> Var::grads() const { return tape_->grads(id_); }

// ---- free functions ----

inline Var leaf(double v) {
  Tape* t = Tape::active();
  if (t == nullptr) throw std::logic_error("leaf: no active tape");
  return t->leaf(v);
}
inline Var leaf(std::span<const double> v) {
  Tape* t = Tape::active();
  if (t == nullptr) throw std::logic_error("leaf: no active tape");
  return t->leaf(v);
}

inline Var operator+(Var a, Var b) { return a.tape()->binary(Op::kAdd, a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->binary(Op::kSub, a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->binary(Op::kMul, a, b); }
inline Var operator/(Var a, Var b) { return a.tape()->binary(Op::kDiv, a, b); }
inline Var operator-(Var a) { return a.tape()->unary(Op::kNeg, a); }
inline Var operator+(Var a, double k) { return a.tape()->unary(Op::kShift, a, k); }
inline Var operator+(double k, Var a) { return a.tape()->unary(Op::kShift, a, k); }
inline Var operator-(Var a, double k) { return a.tape()->unary(Op::kShift, a, -k); }
inline Var operator-(double k, Var a) { return a.tape()->unary(Op::kShift, a.tape()->unary(Op::kNeg, a), k); }
inline Var operator*(Var a, double k) { return a.tape()->unary(Op::kScale, a, k); }
inline Var operator*(double k, Var a) { return a.tape()->unary(Op::kScale, a, k); }
inline Var operator/(Var a, double k) { return a.tape()->unary(Op::kScale, a, 1.0 / k); }
inline Var operator/(double k, Var a) { return a.tape()->binary(Op::kDiv, a.tape()->constant(k), a); }

inline Var exp(Var a) { return a.tape()->unary(Op::kExp, a); }
inline Var log(Var a) { return a.tape()->unary(Op::kLog, a); }
inline Var cos(Var a) { return a.tape()->unary(Op::kCos, a); }
inline Var sin(Var a) { return a.tape()->unary(Op::kSin, a); }
inline Var tanh(Var a) { return a.tape()->unary(Op::kTanh, a); }
inline Var sigmoid(Var a) { return a.tape()->unary(Op::kSigmoid, a); }
inline Var square(Var a) { return a.tape()->binary(Op::kMul, a, a); }

// Reduction max; ties go to the lowest index.
inline Var max(Var a) { return a.tape()->max_reduce(a); }
// Elementwise maximum; ties go to `a`.
inline Var maximum(Var a, Var b) { return a.tape()->binary(Op::kMaximum, a, b); }
inline Var where(std::span<const std::uint8_t> mask, Var a, Var b) { return a.tape()->where(mask, a, b); }
inline Var sum(Var a) { return a.tape()->sum(a); }
inline Var dot(Var a, Var b) { return a.tape()->dot(a, b); }
inline Var matvec(Var m, Var x) { return m.tape()->matvec(m, x); }
inline Var index(Var a, std::size_t i) { return a.tape()->index(a, i); }
inline Var column(Var m, std::size_t rows, std::size_t j) { return m.tape()->column(m, rows, j); }
inline Var repeat(Var a, std::size_t k) { return a.tape()->repeat(a, k); }
inline Var group_sum(Var a, std::size_t k) { return a.tape()->group_sum(a, k); }
inline Var tile(Var a, std::size_t k) { return a.tape()->tile(a, k); }
inline Var fold_sum(Var a, std::size_t k) { return a.tape()->fold_sum(a, k); }
inline Var add_at(Var a, Var w, std::size_t start, std::size_t stride) {
  return a.tape()->add_at(a, w, start, stride);
}
inline Var axpy(Var a, double k, Var b) { return a.tape()->axpy(a, k, b); }
inline Var axpy(Var a, Var s, Var b) { return a.tape()->axpy(a, s, b); }
inline Var slice(Var a, std::size_t begin, std::size_t len) { return a.tape()->slice(a, begin, len); }
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  return parts.front().tape()->concat(parts);
}

// Numerically stable log(sum(exp(a))).
inline Var logsumexp(Var a) {
  const double m = *std::max_element(a.values().begin(), a.values().end());
  return log(sum(exp(a - m))) + m;
}

// Records an operation whose backward pass is the supplied adjoint instead of
// a trace of `forward`. Outputs are returned in the order `forward` produced.
inline std::vector<Var> custom_adjoint(const ForwardFn& forward, AdjointFn adjoint, std::span<const Var> inputs) {
  if (inputs.empty()) throw std::invalid_argument("custom_adjoint needs at least one input");
  return inputs.front().tape()->custom(forward, std::move(adjoint), inputs);
}

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace evnn::ad
