#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Scalar type is a template parameter: float for training, double for
// gradcheck-grade tests. Kernels are backed by Eigen.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace elm {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::runtime_error("shape mismatch in " + op + ": " + shape_str(a) +
                           " vs " + shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& detail)
      : std::runtime_error("shape error in " + op + ": " + detail) {}
};

class GraphError : public std::runtime_error {
 public:
  explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

// Deterministic RNG: std::mt19937_64 engine with hand-rolled distributions
// so the draw sequence is identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
    return int64_t(next_u64() % uint64_t(n));
  }

  // Standard normal via Box-Muller; one draw per call, no caching, so the
  // stream position is a pure function of the call count.
  double normal() {
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Derived generator for an independent, reproducible substream.
  Rng fork(uint64_t stream) const {
    uint64_t h = seed_ ^ (0x9E3779B97F4A7C15ull + stream);
    h ^= h >> 30; h *= 0xBF58476D1CE4E5B9ull;
    h ^= h >> 27; h *= 0x94D049BB133111EBull;
    h ^= h >> 31;
    return Rng(h);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

// Tensor buffers are 64-byte aligned so Eigen's vectorized kernels peel and
// split identically for every allocation; reductions are then bit-stable
// across runs regardless of heap layout.
template <typename T, size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
bool operator==(const Buffer<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
template <typename T>
bool operator==(const std::vector<T>& a, const Buffer<T>& b) {
  return b == a;
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EVecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ECVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
class TensorT {
  struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
      if (grad.empty()) grad.assign(value.size(), T(0));
    }
  };

 public:
  TensorT() = default;

  static TensorT from(Shape shape, Buffer<T> data) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("from", "data length " + std::to_string(data.size()) +
                                   " does not match shape " + shape_str(shape));
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static TensorT from(Shape shape, const std::vector<T>& data) {
    return from(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }

  static TensorT from(Shape shape, std::initializer_list<T> data) {
    return from(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }

  static TensorT zeros(Shape shape) {
    return full(std::move(shape), T(0));
  }

  static TensorT full(Shape shape, T v) {
    int64_t n = shape_numel(shape);
    return from(std::move(shape), Buffer<T>(size_t(n), v));
  }

  static TensorT scalar(T v) { return from({1}, {v}); }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1)) {
    int64_t n = shape_numel(shape);
    Buffer<T> d(static_cast<size_t>(n));
    for (auto& x : d) x = T(rng.normal()) * stddev;
    return from(std::move(shape), std::move(d));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return int(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t numel() const { return node_->numel(); }
  const char* op() const { return node_->op; }

  Buffer<T>& data() { return node_->value; }
  const Buffer<T>& data() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  Buffer<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const Buffer<T>& grad() const {
    const_cast<Node*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item", "tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  // Value-equal tensor cut out of the computation graph.
  TensorT detach() const {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->op = "detach";
    return t;
  }

  // True when the two tensors share one buffer (same graph node).
  bool same_node(const TensorT& other) const { return node_ == other.node_; }

  // Reverse pass from a scalar. Accumulates gradients into every reachable
  // requires_grad leaf, then releases the graph edges.
  void backward() {
    if (!defined()) throw GraphError("backward: undefined tensor");
    if (numel() != 1) throw GraphError("backward: loss must be a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad)
      throw GraphError("backward: tensor is detached from the graph (requires_grad is false)");

    std::vector<Node*> order;
    topo_sort(node_.get(), order);

    node_->ensure_grad();
    node_->grad[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
    // Release: drop edges and closures, keep leaf grads.
    for (Node* n : order) {
      n->backprop = nullptr;
      n->parents.clear();
    }
  }

  // --- internals shared by the op implementations ---

  using NodePtr = std::shared_ptr<Node>;
  NodePtr node() const { return node_; }

  static TensorT make_op(Shape shape, Buffer<T> value, const char* op,
                         std::vector<TensorT> inputs,
                         std::function<void(Node&)> backprop) {
    TensorT t = from(std::move(shape), std::move(value));
    t.node_->op = op;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
      t.node_->requires_grad = true;
      for (const auto& in : inputs) t.node_->parents.push_back(in.node_);
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

  static Node& parent(Node& n, size_t i) { return *n.parents[i]; }

 private:
  static void topo_sort(Node* root, std::vector<Node*>& order) {
    // Iterative DFS; graphs can be thousands of nodes deep.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].get();
        if (!visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  NodePtr node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename T>
inline void accum(Buffer<T>& dst, const T* src, size_t n) {
  EVecMap<T>(dst.data(), Eigen::Index(n)) += ECVecMap<T>(src, Eigen::Index(n));
}

template <typename T>
inline void accum(Buffer<T>& dst, const T* src, size_t n, size_t dst_off) {
  EVecMap<T>(dst.data() + dst_off, Eigen::Index(n)) += ECVecMap<T>(src, Eigen::Index(n));
}

// Rows/cols view of a tensor treated as a 2D matrix with `cols` = last dim.
template <typename T>
inline std::pair<int64_t, int64_t> as_2d(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(op, "rank-0 tensor");
  int64_t cols = s.back();
  int64_t rows = shape_numel(s) / cols;
  return {rows, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  Buffer<T> out(a.data());
  detail::accum(out, b.data().data(), out.size());
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "add", {a, b}, [](auto& n) {
        auto& g = n.grad;
        for (size_t i = 0; i < 2; ++i) {
          auto& p = TensorT<T>::parent(n, i);
          if (!p.requires_grad) continue;
          p.ensure_grad();
          detail::accum(p.grad, g.data(), g.size());
        }
      });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub", a.shape(), b.shape());
  Buffer<T> out(a.data());
  EVecMap<T>(out.data(), Eigen::Index(out.size())) -=
      ECVecMap<T>(b.data().data(), Eigen::Index(out.size()));
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "sub", {a, b}, [](auto& n) {
        auto& g = n.grad;
        auto& pa = TensorT<T>::parent(n, 0);
        if (pa.requires_grad) {
          pa.ensure_grad();
          detail::accum(pa.grad, g.data(), g.size());
        }
        auto& pb = TensorT<T>::parent(n, 1);
        if (pb.requires_grad) {
          pb.ensure_grad();
          EVecMap<T>(pb.grad.data(), Eigen::Index(g.size())) -=
              ECVecMap<T>(g.data(), Eigen::Index(g.size()));
        }
      });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
  Buffer<T> out(size_t(a.numel()));
  EVecMap<T>(out.data(), a.numel()) =
      ECVecMap<T>(a.data().data(), a.numel()) * ECVecMap<T>(b.data().data(), b.numel());
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "mul", {a, b}, [](auto& n) {
        auto& g = n.grad;
        auto& pa = TensorT<T>::parent(n, 0);
        auto& pb = TensorT<T>::parent(n, 1);
        Eigen::Index m = Eigen::Index(g.size());
        if (pa.requires_grad) {
          pa.ensure_grad();
          EVecMap<T>(pa.grad.data(), m) +=
              ECVecMap<T>(g.data(), m) * ECVecMap<T>(pb.value.data(), m);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          EVecMap<T>(pb.grad.data(), m) +=
              ECVecMap<T>(g.data(), m) * ECVecMap<T>(pa.value.data(), m);
        }
      });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  Buffer<T> out(size_t(a.numel()));
  EVecMap<T>(out.data(), a.numel()) = -ECVecMap<T>(a.data().data(), a.numel());
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "neg", {a}, [](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        EVecMap<T>(p.grad.data(), Eigen::Index(n.grad.size())) -=
            ECVecMap<T>(n.grad.data(), Eigen::Index(n.grad.size()));
      });
}

// out = a * c for a compile-time-constant scalar c (no grad through c).
template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  Buffer<T> out(size_t(a.numel()));
  EVecMap<T>(out.data(), a.numel()) = ECVecMap<T>(a.data().data(), a.numel()) * c;
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "scale", {a}, [c](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        EVecMap<T>(p.grad.data(), Eigen::Index(n.grad.size())) +=
            ECVecMap<T>(n.grad.data(), Eigen::Index(n.grad.size())) * c;
      });
}

// out = a * s where s is a scalar tensor participating in the graph.
template <typename T>
TensorT<T> scale_by(const TensorT<T>& a, const TensorT<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by", "scale must be a scalar, got " + shape_str(s.shape()));
  T c = s.data()[0];
  Buffer<T> out(size_t(a.numel()));
  EVecMap<T>(out.data(), a.numel()) = ECVecMap<T>(a.data().data(), a.numel()) * c;
  return TensorT<T>::make_op(
      a.shape(), std::move(out), "scale_by", {a, s}, [](auto& n) {
        auto& pa = TensorT<T>::parent(n, 0);
        auto& ps = TensorT<T>::parent(n, 1);
        Eigen::Index m = Eigen::Index(n.grad.size());
        T c = ps.value[0];
        if (pa.requires_grad) {
          pa.ensure_grad();
          EVecMap<T>(pa.grad.data(), m) += ECVecMap<T>(n.grad.data(), m) * c;
        }
        if (ps.requires_grad) {
          ps.ensure_grad();
          ps.grad[0] += (ECVecMap<T>(n.grad.data(), m) * ECVecMap<T>(pa.value.data(), m)).sum();
        }
      });
}

// Rowwise bias add: [R,C] + [C].
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b) {
  auto [rows, cols] = detail::as_2d<T>(x.shape(), "add_bias");
  if (b.numel() != cols) throw ShapeError("add_bias", x.shape(), b.shape());
  Buffer<T> out(x.data());
  EMap<T> o(out.data(), rows, cols);
  o.rowwise() += ECMap<T>(b.data().data(), 1, cols).row(0);
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "add_bias", {x, b}, [rows = rows, cols = cols](auto& n) {
        auto& px = TensorT<T>::parent(n, 0);
        auto& pb = TensorT<T>::parent(n, 1);
        ECMap<T> g(n.grad.data(), rows, cols);
        if (px.requires_grad) {
          px.ensure_grad();
          detail::accum(px.grad, n.grad.data(), n.grad.size());
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          EMap<T>(pb.grad.data(), 1, cols) += g.colwise().sum();
        }
      });
}

// Rowwise vector multiply: [R,C] * [C] (used for channel masks).
template <typename T>
TensorT<T> mul_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  auto [rows, cols] = detail::as_2d<T>(x.shape(), "mul_rowvec");
  if (v.numel() != cols) throw ShapeError("mul_rowvec", x.shape(), v.shape());
  Buffer<T> out(x.data());
  EMap<T> o(out.data(), rows, cols);
  o.array().rowwise() *= ECMap<T>(v.data().data(), 1, cols).row(0).array();
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "mul_rowvec", {x, v}, [rows = rows, cols = cols](auto& n) {
        auto& px = TensorT<T>::parent(n, 0);
        auto& pv = TensorT<T>::parent(n, 1);
        ECMap<T> g(n.grad.data(), rows, cols);
        if (px.requires_grad) {
          px.ensure_grad();
          EMap<T>(px.grad.data(), rows, cols).array() +=
              g.array().rowwise() * ECMap<T>(pv.value.data(), 1, cols).row(0).array();
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          EMap<T>(pv.grad.data(), 1, cols) +=
              (g.array() * ECMap<T>(px.value.data(), rows, cols).array()).colwise().sum().matrix();
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul", a.shape(), b.shape());
  int64_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
  Buffer<T> out(size_t(r * c));
  EMap<T>(out.data(), r, c).noalias() =
      ECMap<T>(a.data().data(), r, k) * ECMap<T>(b.data().data(), k, c);
  return TensorT<T>::make_op(
      {r, c}, std::move(out), "matmul", {a, b}, [r, k, c](auto& n) {
        auto& pa = TensorT<T>::parent(n, 0);
        auto& pb = TensorT<T>::parent(n, 1);
        ECMap<T> g(n.grad.data(), r, c);
        if (pa.requires_grad) {
          pa.ensure_grad();
          EMap<T>(pa.grad.data(), r, k).noalias() +=
              g * ECMap<T>(pb.value.data(), k, c).transpose();
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          EMap<T>(pb.grad.data(), k, c).noalias() +=
              ECMap<T>(pa.value.data(), r, k).transpose() * g;
        }
      });
}

// a @ b^T without materializing the transpose (attention scores).
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt", a.shape(), b.shape());
  int64_t r = a.dim(0), k = a.dim(1), c = b.dim(0);
  Buffer<T> out(size_t(r * c));
  EMap<T>(out.data(), r, c).noalias() =
      ECMap<T>(a.data().data(), r, k) * ECMap<T>(b.data().data(), c, k).transpose();
  return TensorT<T>::make_op(
      {r, c}, std::move(out), "matmul_nt", {a, b}, [r, k, c](auto& n) {
        auto& pa = TensorT<T>::parent(n, 0);
        auto& pb = TensorT<T>::parent(n, 1);
        ECMap<T> g(n.grad.data(), r, c);
        if (pa.requires_grad) {
          pa.ensure_grad();
          EMap<T>(pa.grad.data(), r, k).noalias() += g * ECMap<T>(pb.value.data(), c, k);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          EMap<T>(pb.grad.data(), c, k).noalias() +=
              g.transpose() * ECMap<T>(pa.value.data(), r, k);
        }
      });
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose", "expected rank 2, got " + shape_str(a.shape()));
  int64_t r = a.dim(0), c = a.dim(1);
  Buffer<T> out(size_t(r * c));
  EMap<T>(out.data(), c, r) = ECMap<T>(a.data().data(), r, c).transpose();
  return TensorT<T>::make_op(
      {c, r}, std::move(out), "transpose", {a}, [r, c](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        EMap<T>(p.grad.data(), r, c) += ECMap<T>(n.grad.data(), c, r).transpose();
      });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape", a.shape(), shape);
  Buffer<T> out(a.data());
  return TensorT<T>::make_op(
      std::move(shape), std::move(out), "reshape", {a}, [](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        detail::accum(p.grad, n.grad.data(), n.grad.size());
      });
}

// ---------------------------------------------------------------------------
// Slicing / concatenation (copying; no strided views)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int64_t r0, int64_t r1) {
  auto [rows, cols] = detail::as_2d<T>(a.shape(), "slice_rows");
  if (r0 < 0 || r1 > rows || r0 >= r1)
    throw ShapeError("slice_rows", "range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                       ") out of " + std::to_string(rows) + " rows");
  int64_t nr = r1 - r0;
  Buffer<T> out(a.data().begin() + r0 * cols, a.data().begin() + r1 * cols);
  return TensorT<T>::make_op(
      {nr, cols}, std::move(out), "slice_rows", {a}, [r0 = r0, cols = cols](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        detail::accum(p.grad, n.grad.data(), n.grad.size(),
                      size_t(r0 * cols));
      });
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int64_t c0, int64_t c1) {
  auto [rows, cols] = detail::as_2d<T>(a.shape(), "slice_cols");
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw ShapeError("slice_cols", "range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                       ") out of " + std::to_string(cols) + " cols");
  int64_t nc = c1 - c0;
  Buffer<T> out(size_t(rows * nc));
  EMap<T>(out.data(), rows, nc) = ECMap<T>(a.data().data(), rows, cols).middleCols(c0, nc);
  return TensorT<T>::make_op(
      {rows, nc}, std::move(out), "slice_cols", {a},
      [rows = rows, cols = cols, c0 = c0, nc](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        EMap<T>(p.grad.data(), rows, cols).middleCols(c0, nc) +=
            ECMap<T>(n.grad.data(), rows, nc);
      });
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no inputs");
  int64_t rows = parts[0].ndim() == 2 ? parts[0].dim(0) : -1;
  int64_t cols = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    cols += p.dim(1);
  }
  Buffer<T> out(size_t(rows * cols));
  EMap<T> o(out.data(), rows, cols);
  std::vector<int64_t> offsets;
  int64_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    o.middleCols(at, p.dim(1)) = ECMap<T>(p.data().data(), rows, p.dim(1));
    at += p.dim(1);
  }
  std::vector<int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return TensorT<T>::make_op(
      {rows, cols}, std::move(out), "concat_cols", parts,
      [rows = rows, cols, offsets, widths](auto& n) {
        ECMap<T> g(n.grad.data(), rows, cols);
        for (size_t i = 0; i < offsets.size(); ++i) {
          auto& p = TensorT<T>::parent(n, i);
          if (!p.requires_grad) continue;
          p.ensure_grad();
          EMap<T>(p.grad.data(), rows, widths[i]) += g.middleCols(offsets[i], widths[i]);
        }
      });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  int64_t cols = parts[0].ndim() == 2 ? parts[0].dim(1) : -1;
  int64_t rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != cols) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  Buffer<T> out;
  out.reserve(size_t(rows * cols));
  std::vector<int64_t> offsets, heights;
  int64_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    heights.push_back(p.dim(0));
    out.insert(out.end(), p.data().begin(), p.data().end());
    at += p.dim(0);
  }
  return TensorT<T>::make_op(
      {rows, cols}, std::move(out), "concat_rows", parts,
      [cols, offsets, heights](auto& n) {
        for (size_t i = 0; i < offsets.size(); ++i) {
          auto& p = TensorT<T>::parent(n, i);
          if (!p.requires_grad) continue;
          p.ensure_grad();
          detail::accum(p.grad, n.grad.data() + offsets[i] * cols,
                        size_t(heights[i] * cols));
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  Buffer<T> out(size_t(x.numel()));
  EVecMap<T> o(out.data(), x.numel());
  ECVecMap<T> in(x.data().data(), x.numel());
  o = in / (T(1) + (-in).exp());
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "silu", {x}, [](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        Eigen::Index m = Eigen::Index(n.grad.size());
        ECVecMap<T> in(p.value.data(), m);
        auto sig = (T(1) / (T(1) + (-in).exp())).eval();
        EVecMap<T>(p.grad.data(), m) +=
            ECVecMap<T>(n.grad.data(), m) * sig * (T(1) + in * (T(1) - sig));
      });
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& x) {
  Buffer<T> out(size_t(x.numel()));
  EVecMap<T> o(out.data(), x.numel());
  ECVecMap<T> in(x.data().data(), x.numel());
  o = in.max(T(0)) + (T(1) + (-in.abs()).exp()).log();
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "softplus", {x}, [](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        Eigen::Index m = Eigen::Index(n.grad.size());
        ECVecMap<T> in(p.value.data(), m);
        EVecMap<T>(p.grad.data(), m) +=
            ECVecMap<T>(n.grad.data(), m) / (T(1) + (-in).exp());
      });
}

// Rowwise softmax over the last dimension, max-subtracted for stability.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  auto [rows, cols] = detail::as_2d<T>(x.shape(), "softmax_rows");
  Buffer<T> out(size_t(x.numel()));
  EMap<T> o(out.data(), rows, cols);
  ECMap<T> in(x.data().data(), rows, cols);
  for (int64_t r = 0; r < rows; ++r) {
    auto row = in.row(r).array();
    T mx = row.maxCoeff();
    o.row(r).array() = (row - mx).exp();
    o.row(r) /= o.row(r).sum();
  }
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "softmax_rows", {x},
      [rows = rows, cols = cols](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        ECMap<T> y(n.value.data(), rows, cols);
        ECMap<T> g(n.grad.data(), rows, cols);
        EMap<T> d(p.grad.data(), rows, cols);
        for (int64_t r = 0; r < rows; ++r) {
          T dot = (g.row(r).array() * y.row(r).array()).sum();
          d.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
      });
}

template <typename T>
TensorT<T> log_softmax_rows(const TensorT<T>& x) {
  auto [rows, cols] = detail::as_2d<T>(x.shape(), "log_softmax_rows");
  Buffer<T> out(size_t(x.numel()));
  EMap<T> o(out.data(), rows, cols);
  ECMap<T> in(x.data().data(), rows, cols);
  for (int64_t r = 0; r < rows; ++r) {
    auto row = in.row(r).array();
    T mx = row.maxCoeff();
    T lse = std::log((row - mx).exp().sum()) + mx;
    o.row(r).array() = row - lse;
  }
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "log_softmax_rows", {x},
      [rows = rows, cols = cols](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        ECMap<T> y(n.value.data(), rows, cols);
        ECMap<T> g(n.grad.data(), rows, cols);
        EMap<T> d(p.grad.data(), rows, cols);
        for (int64_t r = 0; r < rows; ++r) {
          T gs = g.row(r).sum();
          d.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gs;
        }
      });
}

// RMS normalization with a learnable per-channel weight, rowwise.
template <typename T>
TensorT<T> rms_norm(const TensorT<T>& x, const TensorT<T>& w, T eps = T(1e-5)) {
  auto [rows, cols] = detail::as_2d<T>(x.shape(), "rms_norm");
  if (w.numel() != cols) throw ShapeError("rms_norm", x.shape(), w.shape());
  Buffer<T> out(size_t(x.numel()));
  EMap<T> o(out.data(), rows, cols);
  ECMap<T> in(x.data().data(), rows, cols);
  ECMap<T> wv(w.data().data(), 1, cols);
  for (int64_t r = 0; r < rows; ++r) {
    T ms = in.row(r).squaredNorm() / T(cols);
    T inv = T(1) / std::sqrt(ms + eps);
    o.row(r).array() = in.row(r).array() * inv * wv.row(0).array();
  }
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "rms_norm", {x, w},
      [rows = rows, cols = cols, eps](auto& n) {
        auto& px = TensorT<T>::parent(n, 0);
        auto& pw = TensorT<T>::parent(n, 1);
        ECMap<T> in(px.value.data(), rows, cols);
        ECMap<T> wv(pw.value.data(), 1, cols);
        ECMap<T> g(n.grad.data(), rows, cols);
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          T ms = in.row(r).squaredNorm() / T(cols);
          T inv = T(1) / std::sqrt(ms + eps);
          if (px.requires_grad) {
            // d/dx of x*inv(x)*w with inv = (mean(x^2)+eps)^-1/2
            T dot = (g.row(r).array() * wv.row(0).array() * in.row(r).array()).sum();
            EMap<T> d(px.grad.data(), rows, cols);
            d.row(r).array() += g.row(r).array() * wv.row(0).array() * inv -
                                in.row(r).array() * (inv * inv * inv * dot / T(cols));
          }
          if (pw.requires_grad) {
            EMap<T> dw(pw.grad.data(), 1, cols);
            dw.row(0).array() += g.row(r).array() * in.row(r).array() * inv;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Lookup / masking / gather
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int32_t>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding", "table must be rank 2, got " + shape_str(table.shape()));
  int64_t vocab = table.dim(0), dim = table.dim(1);
  Buffer<T> out(ids.size() * size_t(dim));
  for (size_t i = 0; i < ids.size(); ++i) {
    int32_t id = ids[i];
    if (id < 0 || id >= vocab)
      throw ShapeError("embedding", "index " + std::to_string(id) + " out of vocab " + std::to_string(vocab));
    std::copy_n(table.data().data() + int64_t(id) * dim, dim, out.data() + int64_t(i) * dim);
  }
  return TensorT<T>::make_op(
      {int64_t(ids.size()), dim}, std::move(out), "embedding", {table},
      [ids, dim](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
          detail::accum(p.grad, n.grad.data() + int64_t(i) * dim, size_t(dim),
                        size_t(int64_t(ids[i]) * dim));
      });
}

// Replaces elements where mask != 0 with `value`; gradient is blocked there.
template <typename T>
TensorT<T> masked_fill(const TensorT<T>& x, const std::vector<uint8_t>& mask, T value) {
  if (int64_t(mask.size()) != x.numel())
    throw ShapeError("masked_fill", "mask length " + std::to_string(mask.size()) +
                                        " vs tensor " + shape_str(x.shape()));
  Buffer<T> out(x.data());
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i] = value;
  return TensorT<T>::make_op(
      x.shape(), std::move(out), "masked_fill", {x}, [mask](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < mask.size(); ++i)
          if (!mask[i]) p.grad[i] += n.grad[i];
      });
}

// Selects elements of a flat tensor: out[i] = x[idx[i]].
template <typename T>
TensorT<T> gather(const TensorT<T>& x, const std::vector<int64_t>& idx) {
  Buffer<T> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.numel())
      throw ShapeError("gather", "index " + std::to_string(idx[i]) + " out of " + std::to_string(x.numel()));
    out[i] = x.data()[size_t(idx[i])];
  }
  return TensorT<T>::make_op(
      {int64_t(idx.size())}, std::move(out), "gather", {x}, [idx](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i) p.grad[size_t(idx[i])] += n.grad[i];
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T s = ECVecMap<T>(x.data().data(), x.numel()).sum();
  return TensorT<T>::make_op(
      {1}, {s}, "sum_all", {x}, [](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = n.grad[0];
        EVecMap<T>(p.grad.data(), Eigen::Index(p.grad.size())) += g;
      });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  T s = ECVecMap<T>(x.data().data(), x.numel()).mean();
  int64_t m = x.numel();
  return TensorT<T>::make_op(
      {1}, {s}, "mean_all", {x}, [m](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = n.grad[0] / T(m);
        EVecMap<T>(p.grad.data(), Eigen::Index(p.grad.size())) += g;
      });
}

// Mean token-level cross-entropy against hard targets.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int32_t>& targets) {
  auto [rows, cols] = detail::as_2d<T>(logits.shape(), "cross_entropy");
  if (int64_t(targets.size()) != rows)
    throw ShapeError("cross_entropy", "targets length " + std::to_string(targets.size()) +
                                          " vs " + std::to_string(rows) + " rows");
  ECMap<T> in(logits.data().data(), rows, cols);
  T loss = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    auto row = in.row(r).array();
    T mx = row.maxCoeff();
    T lse = std::log((row - mx).exp().sum()) + mx;
    loss += lse - in(r, targets[size_t(r)]);
  }
  loss /= T(rows);
  return TensorT<T>::make_op(
      {1}, {loss}, "cross_entropy", {logits}, [rows = rows, cols = cols, targets](auto& n) {
        auto& p = TensorT<T>::parent(n, 0);
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = n.grad[0] / T(rows);
        ECMap<T> in(p.value.data(), rows, cols);
        EMap<T> d(p.grad.data(), rows, cols);
        for (int64_t r = 0; r < rows; ++r) {
          auto row = in.row(r).array();
          T mx = row.maxCoeff();
          auto e = (row - mx).exp().eval();
          d.row(r).array() += e / e.sum() * g;
          d(r, targets[size_t(r)]) -= g;
        }
      });
}

// Mean rowwise cross-entropy of a soft target distribution against logits:
//   mean_r sum_j probs[r,j] * (lse(logits_r) - logits[r,j])
// Gradients flow into both arguments; detach the teacher upstream.
template <typename T>
TensorT<T> soft_cross_entropy(const TensorT<T>& logits, const TensorT<T>& probs) {
  if (logits.shape() != probs.shape())
    throw ShapeError("soft_cross_entropy", logits.shape(), probs.shape());
  auto [rows, cols] = detail::as_2d<T>(logits.shape(), "soft_cross_entropy");
  ECMap<T> z(logits.data().data(), rows, cols);
  ECMap<T> pm(probs.data().data(), rows, cols);
  T loss = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    auto row = z.row(r).array();
    T mx = row.maxCoeff();
    T lse = std::log((row - mx).exp().sum()) + mx;
    loss += (pm.row(r).array() * (lse - row)).sum();
  }
  loss /= T(rows);
  return TensorT<T>::make_op(
      {1}, {loss}, "soft_cross_entropy", {logits, probs},
      [rows = rows, cols = cols](auto& n) {
        auto& pz = TensorT<T>::parent(n, 0);
        auto& pp = TensorT<T>::parent(n, 1);
        T g = n.grad[0] / T(rows);
        ECMap<T> z(pz.value.data(), rows, cols);
        ECMap<T> pm(pp.value.data(), rows, cols);
        if (pz.requires_grad) pz.ensure_grad();
        if (pp.requires_grad) pp.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          auto row = z.row(r).array();
          T mx = row.maxCoeff();
          auto e = (row - mx).exp().eval();
          T lse = std::log(e.sum()) + mx;
          if (pz.requires_grad) {
            T psum = pm.row(r).sum();
            EMap<T> d(pz.grad.data(), rows, cols);
            d.row(r).array() += g * (psum * e / e.sum() - pm.row(r).array());
          }
          if (pp.requires_grad) {
            EMap<T> d(pp.grad.data(), rows, cols);
            d.row(r).array() += g * (lse - row);
          }
        }
      });
}

}  // namespace elm
