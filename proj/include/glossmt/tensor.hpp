#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Operations executed while a Tape is active (see TapeScope) and touching at
// least one tensor that requires gradients are appended to that tape. Calling
// Tape::backward(loss) replays the recorded adjoints in exact reverse order.
// Without an active tape every operation is a plain forward computation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "glossmt/error.hpp"

namespace glossmt {

using Shape = std::vector<std::size_t>;

// Tensor storage. A fixed alignment keeps Eigen on the same vectorised code
// path across runs, which bit-exact reproducibility depends on.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class S>
struct TensorNode {
  Shape shape;
  Buffer<S> value;
  Buffer<S> grad;  // empty until first touched by backward
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class BasicTensor {
 public:
  using Scalar = S;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

  static BasicTensor constant(Shape shape, Buffer<S> values) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_string(shape));
    }
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return BasicTensor(std::move(node));
  }

  static BasicTensor constant(Shape shape, const std::vector<S>& values) {
    return constant(std::move(shape), Buffer<S>(values.begin(), values.end()));
  }
  static BasicTensor constant(Shape shape, std::initializer_list<S> values) {
    return constant(std::move(shape), Buffer<S>(values));
  }

  static BasicTensor zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return constant(std::move(shape), Buffer<S>(n, S(0)));
  }

  static BasicTensor parameter(Shape shape, Buffer<S> values) {
    BasicTensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static BasicTensor parameter(Shape shape, const std::vector<S>& values) {
    return parameter(std::move(shape), Buffer<S>(values.begin(), values.end()));
  }
  static BasicTensor parameter(Shape shape, std::initializer_list<S> values) {
    return parameter(std::move(shape), Buffer<S>(values));
  }

  static BasicTensor scalar(S value) { return constant({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const S> data() const { return node_->value; }
  std::span<S> mutable_data() { return node_->value; }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  S item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

template <class S>
class TapeScope;

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::shared_ptr<TensorNode<S>> output, std::function<void()> adjoint) {
    entries_.push_back({std::move(output), std::move(adjoint)});
  }

  // Populates grad on every requires_grad leaf reachable from `loss`.
  // Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const BasicTensor<S>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar tensor, got " +
                          (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
    }
    for (auto& e : entries_) e.output->grad.assign(e.output->value.size(), S(0));
    loss.node()->ensure_grad();
    loss.node()->grad[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->adjoint();
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  friend class TapeScope<S>;
  struct Entry {
    std::shared_ptr<TensorNode<S>> output;
    std::function<void()> adjoint;
  };
  static inline thread_local Tape* active_ = nullptr;
  std::vector<Entry> entries_;
};

// Makes `tape` the recording target for the current thread.
template <class S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : previous_(Tape<S>::active_) { Tape<S>::active_ = &tape; }
  ~TapeScope() { Tape<S>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* previous_;
};

// Builds the result of an operation and, when gradients are being tracked,
// registers `adjoint` on the active tape. The adjoint receives the output node
// and must accumulate into the grads of inputs that require them.
template <class S, class Adjoint>
BasicTensor<S> record_op(Shape shape, Buffer<S> values,
                         std::initializer_list<BasicTensor<S>> inputs, Adjoint&& adjoint) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  Tape<S>* tape = Tape<S>::active();
  bool track = false;
  if (tape) {
    for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    TensorNode<S>* out = node.get();
    tape->record(node, [out, fn = std::forward<Adjoint>(adjoint)]() { fn(*out); });
  }
  return BasicTensor<S>(std::move(node));
}

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;
template <class S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using ConstStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
ConstMatMap<S> as_matrix(const Buffer<S>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<S>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class S>
MatMap<S> as_matrix(Buffer<S>& v, std::size_t rows, std::size_t cols) {
  return MatMap<S>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class S>
bool wants_grad(const std::shared_ptr<TensorNode<S>>& n) {
  return n && n->requires_grad;
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

}  // namespace detail

template <class S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<S> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.node()->value, m, k) * detail::as_matrix(b.node()->value, k, n);
  auto an = a.node(), bn = b.node();
  return record_op<S>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<S>& c) {
    auto dc = detail::as_matrix(std::as_const(c.grad), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      detail::as_matrix(an->grad, m, k).noalias() +=
          dc * detail::as_matrix(std::as_const(bn->value), k, n).transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::as_matrix(bn->grad, k, n).noalias() +=
          detail::as_matrix(std::as_const(an->value), m, k).transpose() * dc;
    }
  });
}

// x[..., in] * weight[in, out] + bias[out]. `bias` may be undefined.
template <class S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                      const BasicTensor<S>& bias) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1), rows = x.size() / in;
  if (bias.defined() && bias.size() != out_dim) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  Buffer<S> out(rows * out_dim);
  auto y = detail::as_matrix(out, rows, out_dim);
  y.noalias() = detail::as_matrix(x.node()->value, rows, in) *
                detail::as_matrix(weight.node()->value, in, out_dim);
  if (bias.defined()) {
    y.rowwise() += detail::as_matrix(bias.node()->value, 1, out_dim).row(0);
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return record_op<S>(std::move(shape), std::move(out), {x, weight, bias},
                      [xn, wn, bn, rows, in, out_dim](TensorNode<S>& o) {
                        auto dy = detail::as_matrix(std::as_const(o.grad), rows, out_dim);
                        if (xn->requires_grad) {
                          xn->ensure_grad();
                          detail::as_matrix(xn->grad, rows, in).noalias() +=
                              dy * detail::as_matrix(std::as_const(wn->value), in, out_dim).transpose();
                        }
                        if (wn->requires_grad) {
                          wn->ensure_grad();
                          detail::as_matrix(wn->grad, in, out_dim).noalias() +=
                              detail::as_matrix(std::as_const(xn->value), rows, in).transpose() * dy;
                        }
                        if (detail::wants_grad(bn)) {
                          bn->ensure_grad();
                          detail::as_matrix(bn->grad, 1, out_dim) += dy.colwise().sum();
                        }
                      });
}

template <class S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Buffer<S> out(a.size());
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return record_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& o) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      n->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) n->grad[i] += o.grad[i];
    }
  });
}

template <class S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Buffer<S> out(a.size());
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return record_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

template <class S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  Buffer<S> out(a.node()->value);
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return record_op<S>(a.shape(), std::move(out), {a}, [an, factor](TensorNode<S>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += factor * o.grad[i];
  });
}

// x + y where y's shape equals the trailing dimensions of x (bias rows,
// positional tables).
template <class S>
BasicTensor<S> add_broadcast(const BasicTensor<S>& x, const BasicTensor<S>& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - static_cast<std::ptrdiff_t>(ys.size()))) {
    throw DimensionError("add_broadcast: " + shape_string(ys) + " is not a suffix of " +
                         shape_string(xs));
  }
  const std::size_t inner = y.size(), outer = x.size() / inner;
  Buffer<S> out(x.node()->value);
  const auto& yv = y.node()->value;
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] += yv[i];
  }
  auto xn = x.node(), yn = y.node();
  return record_op<S>(xs, std::move(out), {x, y}, [xn, yn, outer, inner](TensorNode<S>& o) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    }
    if (yn->requires_grad) {
      yn->ensure_grad();
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t i = 0; i < inner; ++i) yn->grad[i] += o.grad[r * inner + i];
      }
    }
  });
}

template <class S>
BasicTensor<S> relu(const BasicTensor<S>& x) {
  Buffer<S> out(x.node()->value);
  for (auto& v : out) v = v > S(0) ? v : S(0);
  auto xn = x.node();
  return record_op<S>(x.shape(), std::move(out), {x}, [xn](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (xn->value[i] > S(0)) xn->grad[i] += o.grad[i];
    }
  });
}

template <class S>
BasicTensor<S> sum(const BasicTensor<S>& x) {
  const auto& v = x.node()->value;
  S total = std::accumulate(v.begin(), v.end(), S(0));
  auto xn = x.node();
  return record_op<S>({1}, {total}, {x}, [xn](TensorNode<S>& o) {
    xn->ensure_grad();
    for (auto& g : xn->grad) g += o.grad[0];
  });
}

template <class S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto xn = x.node();
  return record_op<S>(std::move(shape), x.node()->value, {x}, [xn](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
}

// Max-shifted softmax along `axis`.
template <class S>
BasicTensor<S> softmax(const BasicTensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(x.shape()));
  }
  const Shape& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const auto& xv = x.node()->value;
  Buffer<S> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      S z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        S e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  auto xn = x.node();
  return record_op<S>(shape, std::move(out), {x}, [xn, outer, inner, len](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = a * len * inner + i;
        S dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          xn->grad[p] += o.value[p] * (o.grad[p] - dot);
        }
      }
    }
  });
}

// Normalizes over the last axis, then applies gain and bias (both [d]).
template <class S>
BasicTensor<S> layer_norm(const BasicTensor<S>& x, const BasicTensor<S>& gain,
                          const BasicTensor<S>& bias, S eps) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " vs gain " +
                         shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
  }
  if (!(eps > S(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  const auto& xv = x.node()->value;
  const auto& gv = gain.node()->value;
  const auto& bv = bias.node()->value;
  Buffer<S> out(xv.size());
  Buffer<S> normalized(xv.size());
  Buffer<S> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * d;
    S mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<S>(d);
    S var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const S n = (row[i] - mean) * is;
      normalized[r * d + i] = n;
      out[r * d + i] = gv[i] * n + bv[i];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return record_op<S>(x.shape(), std::move(out), {x, gain, bias},
                      [xn, gn, bn, rows, d, normalized = std::move(normalized),
                       inv_std = std::move(inv_std)](TensorNode<S>& o) {
                        if (gn->requires_grad) gn->ensure_grad();
                        if (bn->requires_grad) bn->ensure_grad();
                        if (xn->requires_grad) xn->ensure_grad();
                        Buffer<S> dn(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const S* dy = o.grad.data() + r * d;
                          const S* nh = normalized.data() + r * d;
                          S mean_dn = 0, mean_dn_n = 0;
                          for (std::size_t i = 0; i < d; ++i) {
                            if (gn->requires_grad) gn->grad[i] += dy[i] * nh[i];
                            if (bn->requires_grad) bn->grad[i] += dy[i];
                            dn[i] = dy[i] * gn->value[i];
                            mean_dn += dn[i];
                            mean_dn_n += dn[i] * nh[i];
                          }
                          if (!xn->requires_grad) continue;
                          mean_dn /= static_cast<S>(d);
                          mean_dn_n /= static_cast<S>(d);
                          for (std::size_t i = 0; i < d; ++i) {
                            xn->grad[r * d + i] += inv_std[r] * (dn[i] - mean_dn - nh[i] * mean_dn_n);
                          }
                        }
                      });
}

// Inverted dropout: survivors are scaled by 1/(1-rate) during training, and
// inference is the identity.
template <class S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const S keep_scale = S(1) / static_cast<S>(1.0 - rate);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Buffer<S> mask(x.size());
  Buffer<S> out(x.size());
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform(rng) < rate ? S(0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  auto xn = x.node();
  return record_op<S>(x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * mask[i];
  });
}

// Gathers rows of table[V, d]; result shape is ids_shape + [d].
template <class S>
BasicTensor<S> embedding(const BasicTensor<S>& table, std::span<const std::int32_t> ids,
                         Shape ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_string(table.shape()));
  if (shape_size(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids shape " + shape_string(ids_shape) + " vs " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const auto& tv = table.node()->value;
  Buffer<S> out(ids.size() * d);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw DataError("embedding: token id " + std::to_string(idx[i]) + " outside vocabulary of size " +
                      std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  ids_shape.push_back(d);
  auto tn = table.node();
  return record_op<S>(std::move(ids_shape), std::move(out), {table},
                      [tn, d, idx = std::move(idx)](TensorNode<S>& o) {
                        tn->ensure_grad();
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                          S* g = tn->grad.data() + static_cast<std::size_t>(idx[i]) * d;
                          const S* src = o.grad.data() + i * d;
                          for (std::size_t j = 0; j < d; ++j) g[j] += src[j];
                        }
                      });
}

// Which key positions each query may attend to. Padding is per key position
// (1 = padding); `causal` additionally forbids keys after the query.
struct AttentionMask {
  std::vector<std::uint8_t> key_padding;  // batch x keys, or empty
  bool causal = false;

  bool allowed(std::size_t b, std::size_t query, std::size_t key, std::size_t num_keys) const {
    if (causal && key > query) return false;
    return key_padding.empty() || key_padding[b * num_keys + key] == 0;
  }
};

// Multi-head scaled dot-product attention on already-projected inputs.
// q: [B, Tq, d], k and v: [B, Tk, d]. Head j reads columns [j*d/h, (j+1)*d/h).
// Masked positions get exactly zero weight. A query row with no allowed key
// is a contract violation.
template <class S>
BasicTensor<S> scaled_dot_attention(const BasicTensor<S>& q, const BasicTensor<S>& k,
                                    const BasicTensor<S>& v, std::size_t heads,
                                    const AttentionMask& mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: incompatible q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t batch = q.dim(0), tq = q.dim(1), tk = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!mask.key_padding.empty() && mask.key_padding.size() != batch * tk) {
    throw DimensionError("attention: key padding mask has " + std::to_string(mask.key_padding.size()) +
                         " entries, expected " + std::to_string(batch * tk));
  }
  const std::size_t dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
  const auto Tq = static_cast<Eigen::Index>(tq), Tk = static_cast<Eigen::Index>(tk),
             Dh = static_cast<Eigen::Index>(dh);

  Buffer<S> out(batch * tq * d);
  Buffer<S> probs(batch * heads * tq * tk);
  const S* qp = q.node()->value.data();
  const S* kp = k.node()->value.data();
  const S* vp = v.node()->value.data();
  detail::RowMat<S> scores;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      detail::ConstStridedMap<S> qm(qp + b * tq * d + h * dh, Tq, Dh, stride);
      detail::ConstStridedMap<S> km(kp + b * tk * d + h * dh, Tk, Dh, stride);
      detail::ConstStridedMap<S> vm(vp + b * tk * d + h * dh, Tk, Dh, stride);
      scores.noalias() = qm * km.transpose();
      detail::MatMap<S> pm(probs.data() + (b * heads + h) * tq * tk, Tq, Tk);
      for (std::size_t i = 0; i < tq; ++i) {
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < tk; ++j) {
          if (mask.allowed(b, i, j, tk)) mx = std::max(mx, scores(i, j) * inv_scale);
        }
        if (mx == -std::numeric_limits<S>::infinity()) {
          throw ContractError("attention: query " + std::to_string(i) + " of batch row " +
                              std::to_string(b) + " has every key masked");
        }
        S z = 0;
        for (std::size_t j = 0; j < tk; ++j) {
          const S e = mask.allowed(b, i, j, tk) ? std::exp(scores(i, j) * inv_scale - mx) : S(0);
          pm(i, j) = e;
          z += e;
        }
        pm.row(i) /= z;
      }
      detail::StridedMap<S> om(out.data() + b * tq * d + h * dh, Tq, Dh, stride);
      om.noalias() = pm * vm;
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return record_op<S>({batch, tq, d}, std::move(out), {q, k, v},
                      [qn, kn, vn, probs = std::move(probs), batch, heads, tq, tk, d, dh, inv_scale](
                          TensorNode<S>& o) {
                        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
                        const auto Tq = static_cast<Eigen::Index>(tq), Tk = static_cast<Eigen::Index>(tk),
                                   Dh = static_cast<Eigen::Index>(dh);
                        for (auto* n : {qn.get(), kn.get(), vn.get()}) {
                          if (n->requires_grad) n->ensure_grad();
                        }
                        detail::RowMat<S> dp, ds;
                        for (std::size_t b = 0; b < batch; ++b) {
                          for (std::size_t h = 0; h < heads; ++h) {
                            const std::size_t qoff = b * tq * d + h * dh, koff = b * tk * d + h * dh;
                            detail::ConstMatMap<S> pm(probs.data() + (b * heads + h) * tq * tk, Tq, Tk);
                            detail::ConstStridedMap<S> dom(o.grad.data() + qoff, Tq, Dh, stride);
                            detail::ConstStridedMap<S> qm(qn->value.data() + qoff, Tq, Dh, stride);
                            detail::ConstStridedMap<S> km(kn->value.data() + koff, Tk, Dh, stride);
                            detail::ConstStridedMap<S> vm(vn->value.data() + koff, Tk, Dh, stride);
                            if (vn->requires_grad) {
                              detail::StridedMap<S>(vn->grad.data() + koff, Tk, Dh, stride).noalias() +=
                                  pm.transpose() * dom;
                            }
                            if (!qn->requires_grad && !kn->requires_grad) continue;
                            dp.noalias() = dom * vm.transpose();
                            ds = pm.cwiseProduct(dp);
                            const Eigen::Matrix<S, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
                            ds -= pm.cwiseProduct(row_dot.replicate(1, Tk));
                            ds *= inv_scale;
                            if (qn->requires_grad) {
                              detail::StridedMap<S>(qn->grad.data() + qoff, Tq, Dh, stride).noalias() += ds * km;
                            }
                            if (kn->requires_grad) {
                              detail::StridedMap<S>(kn->grad.data() + koff, Tk, Dh, stride).noalias() +=
                                  ds.transpose() * qm;
                            }
                          }
                        }
                      });
}

}  // namespace glossmt
