#ifndef STIMPUTE_AUTODIFF_HPP
#define STIMPUTE_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stimpute/errors.hpp"
#include "stimpute/random.hpp"
#include "stimpute/tensor.hpp"

namespace stimpute::ad {

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
};

template <typename Scalar>
using Gradients = std::map<std::string, Tensor<Scalar>>;

/**
 * Tape of primitive operations for reverse-mode differentiation.
 *
 * Nodes are appended as operations execute, so node order is always a valid
 * topological order. Nodes that do not depend on any trainable parameter carry
 * no backward rule and are skipped during the reverse sweep.
 */
template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;
  using VarT = Var<Scalar>;
  /// Propagates the gradient of node `self` into its inputs.
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  VarT constant(TensorT value) { return push(std::move(value), {}, nullptr, false); }

  VarT parameter(const std::string& name, TensorT value) {
    for (int id : parameters_) {
      if (nodes_[id].name == name) throw ContractError("parameter '" + name + "' registered twice");
    }
    VarT v = push(std::move(value), {}, nullptr, true);
    nodes_[v.id].name = name;
    parameters_.push_back(v.id);
    return v;
  }

  VarT record(TensorT value, std::initializer_list<VarT> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<VarT>(inputs), std::move(backward));
  }

  VarT record(TensorT value, const std::vector<VarT>& inputs, BackwardFn backward) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool needs_grad = false;
    for (const VarT& in : inputs) {
      if (in.graph != this) throw ContractError("operand belongs to a different graph");
      ids.push_back(in.id);
      needs_grad = needs_grad || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs_grad ? std::move(backward) : nullptr, needs_grad);
  }

  const TensorT& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  /// Gradient accumulator of a node, zero-initialised on first access.
  TensorT& grad(int id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad = TensorT::zeros(node.value.shape());
    return node.grad;
  }

  /// Reverse sweep from a scalar loss; returns d(loss)/d(p) for every parameter.
  Gradients<Scalar> backward(VarT loss) {
    if (loss.graph != this) throw ContractError("loss belongs to a different graph");
    if (value(loss.id).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_string(value(loss.id).shape()));
    }
    for (Node& node : nodes_) node.grad = TensorT();
    grad(loss.id)[0] = Scalar(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& node = nodes_[id];
      if (node.backward && !node.grad.empty()) node.backward(*this, id);
    }
    Gradients<Scalar> out;
    for (int id : parameters_) {
      const Node& node = nodes_[id];
      out.emplace(node.name, node.grad.empty() ? TensorT::zeros(node.value.shape()) : node.grad);
    }
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (int id : parameters_) names.push_back(nodes_[id].name);
    return names;
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    std::vector<int> inputs;
    BackwardFn backward;
    std::string name;
    bool requires_grad = false;
  };

  VarT push(TensorT value, std::vector<int> inputs, BackwardFn backward, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), TensorT(), std::move(inputs), std::move(backward), {}, requires_grad});
    return VarT{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::vector<int> parameters_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Scalar, typename Forward, typename Derivative>
Var<Scalar> unary(Var<Scalar> x, Forward forward, Derivative derivative) {
  Tensor<Scalar> out(x.shape(), x.value().data().unaryExpr(forward));
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in, derivative](Graph<Scalar>& g, int self) {
    if (!g.requires_grad(in)) return;
    const auto& y = g.value(self).data();
    const auto& xv = g.value(in).data();
    auto& gi = g.grad(in).data();
    const auto& go = g.grad(self).data();
    for (Index i = 0; i < gi.size(); ++i) gi[i] += go[i] * derivative(xv[i], y[i]);
  });
}

}  // namespace detail

/// Matrix product of rank-2 tensors [m,k] x [k,n].
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor<Scalar> out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, int self) {
    const auto go = g.grad(self).matrix();
    if (g.requires_grad(ia)) g.grad(ia).matrix().noalias() += go * g.value(ib).matrix().transpose();
    if (g.requires_grad(ib)) g.grad(ib).matrix().noalias() += g.value(ia).matrix().transpose() * go;
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, int self) {
    const auto& go = g.grad(self).data();
    if (g.requires_grad(ia)) g.grad(ia).data() += go;
    if (g.requires_grad(ib)) g.grad(ib).data() += go;
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.value().data() - b.value().data());
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, int self) {
    const auto& go = g.grad(self).data();
    if (g.requires_grad(ia)) g.grad(ia).data() += go;
    if (g.requires_grad(ib)) g.grad(ib).data() -= go;
  });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> multiply(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "multiply");
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, int self) {
    const auto& go = g.grad(self).data();
    if (g.requires_grad(ia)) g.grad(ia).data() += go.cwiseProduct(g.value(ib).data());
    if (g.requires_grad(ib)) g.grad(ib).data() += go.cwiseProduct(g.value(ia).data());
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor) {
  Tensor<Scalar> out(x.shape(), x.value().data() * factor);
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in, factor](Graph<Scalar>& g, int self) {
    if (g.requires_grad(in)) g.grad(in).data() += g.grad(self).data() * factor;
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return multiply(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar factor, Var<Scalar> x) { return scale(x, factor); }

/// Broadcast a bias of length n over the rows of x viewed as [rows, n].
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> bias) {
  const Index n = bias.size();
  if (x.value().rank() < 1 || x.shape().back() != n || bias.value().rank() != 1) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match trailing dimension of " +
                         shape_string(x.shape()));
  }
  const Index rows = x.size() / n;
  Tensor<Scalar> out = x.value();
  Eigen::Map<typename Tensor<Scalar>::RowMatrix>(out.data().data(), rows, n).rowwise() +=
      bias.value().data().transpose();
  const int ix = x.id, ib = bias.id;
  return x.graph->record(std::move(out), {x, bias}, [ix, ib, rows, n](Graph<Scalar>& g, int self) {
    const auto& go = g.grad(self).data();
    if (g.requires_grad(ix)) g.grad(ix).data() += go;
    if (g.requires_grad(ib)) {
      Eigen::Map<const typename Tensor<Scalar>::RowMatrix> gm(go.data(), rows, n);
      g.grad(ib).data() += gm.colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> x, Scalar alpha) {
  return detail::unary(
      x, [alpha](Scalar v) { return v > Scalar(0) ? v : alpha * v; },
      [alpha](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : alpha; });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  return detail::unary(
      x,
      [](Scalar v) {
        // Split by sign so exp never overflows.
        if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> x) {
  return detail::unary(
      x, [](Scalar v) { return std::tanh(v); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> x) {
  return detail::unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  using Vector = typename Tensor<Scalar>::Vector;
  Tensor<Scalar> out(Shape{}, Vector::Constant(1, x.value().data().sum()));
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in](Graph<Scalar>& g, int self) {
    if (g.requires_grad(in)) g.grad(in).data().array() += g.grad(self)[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in](Graph<Scalar>& g, int self) {
    if (g.requires_grad(in)) g.grad(in).data() += g.grad(self).data();
  });
}

/// Concatenate along `axis`; every other dimension must agree.
template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& first = parts.front().shape();
  const Index rank = static_cast<Index>(first.size());
  if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = static_cast<Index>(s.size()) == rank;
    for (Index d = 0; compatible && d < rank; ++d) compatible = d == axis || s[d] == first[d];
    if (!compatible) {
      throw DimensionError("concat: incompatible shapes " + shape_string(first) + " and " + shape_string(s) +
                           " on axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const Index outer = shape_size(Shape(first.begin(), first.begin() + axis));
  const Index inner = shape_size(Shape(first.begin() + axis + 1, first.end()));
  const Index total = out_shape[axis] * inner;

  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  Tensor<Scalar> out(out_shape);
  Eigen::Map<RowMatrix> om(out.data().data(), outer, total);
  std::vector<std::pair<Index, Index>> spans;  // (column offset, width) per operand
  Index offset = 0;
  for (const auto& p : parts) {
    const Index width = p.shape()[axis] * inner;
    om.middleCols(offset, width) = Eigen::Map<const RowMatrix>(p.value().data().data(), outer, width);
    spans.emplace_back(offset, width);
    offset += width;
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts.front().graph->record(
      std::move(out), parts, [ids, spans, outer, total](Graph<Scalar>& g, int self) {
        Eigen::Map<const RowMatrix> gm(g.grad(self).data().data(), outer, total);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.requires_grad(ids[k])) continue;
          Eigen::Map<RowMatrix>(g.grad(ids[k]).data().data(), outer, spans[k].second) +=
              gm.middleCols(spans[k].first, spans[k].second);
        }
      });
}

/// Contiguous range [begin, begin+length) along `axis`.
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> x, Index axis, Index begin, Index length) {
  const Shape& s = x.shape();
  const Index rank = static_cast<Index>(s.size());
  if (axis < 0 || axis >= rank || begin < 0 || length <= 0 || begin + length > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_string(s));
  }
  const Index outer = shape_size(Shape(s.begin(), s.begin() + axis));
  const Index inner = shape_size(Shape(s.begin() + axis + 1, s.end()));
  const Index total = s[axis] * inner;
  Shape out_shape = s;
  out_shape[axis] = length;

  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  Tensor<Scalar> out(out_shape);
  Eigen::Map<RowMatrix>(out.data().data(), outer, length * inner) =
      Eigen::Map<const RowMatrix>(x.value().data().data(), outer, total).middleCols(begin * inner, length * inner);
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in, outer, inner, total, begin, length](Graph<Scalar>& g, int self) {
    if (!g.requires_grad(in)) return;
    Eigen::Map<RowMatrix>(g.grad(in).data().data(), outer, total).middleCols(begin * inner, length * inner) +=
        Eigen::Map<const RowMatrix>(g.grad(self).data().data(), outer, length * inner);
  });
}

/// Gather columns of a rank-2 tensor: out(:, j) = x(:, columns[j]).
template <typename Scalar>
Var<Scalar> select_columns(Var<Scalar> x, std::vector<Index> columns) {
  if (x.value().rank() != 2) throw DimensionError("select_columns: expected rank-2 input, got " + shape_string(x.shape()));
  const Index rows = x.shape()[0], cols = x.shape()[1];
  for (Index c : columns) {
    if (c < 0 || c >= cols) throw DimensionError("select_columns: column " + std::to_string(c) + " out of range");
  }
  Tensor<Scalar> out({rows, static_cast<Index>(columns.size())});
  auto om = out.matrix();
  const auto xm = x.value().matrix();
  for (std::size_t j = 0; j < columns.size(); ++j) om.col(static_cast<Index>(j)) = xm.col(columns[j]);
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in, columns = std::move(columns)](Graph<Scalar>& g, int self) {
    if (!g.requires_grad(in)) return;
    auto gi = g.grad(in).matrix();
    const auto go = g.grad(self).matrix();
    for (std::size_t j = 0; j < columns.size(); ++j) gi.col(columns[j]) += go.col(static_cast<Index>(j));
  });
}

/**
 * Inverted dropout. In training mode each element is zeroed with probability
 * `rate` and survivors are scaled by 1/(1-rate); otherwise the identity.
 */
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  typename Tensor<Scalar>::Vector mask(x.size());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  Tensor<Scalar> out(x.shape(), x.value().data().cwiseProduct(mask));
  const int in = x.id;
  return x.graph->record(std::move(out), {x}, [in, mask = std::move(mask)](Graph<Scalar>& g, int self) {
    if (g.requires_grad(in)) g.grad(in).data() += g.grad(self).data().cwiseProduct(mask);
  });
}

/// Zero padding that keeps the time length of a width-m kernel unchanged.
struct TimePadding {
  Index left;
  Index right;
};

inline TimePadding same_padding(Index kernel_width) {
  return {(kernel_width - 1) / 2, kernel_width / 2};
}

/**
 * Temporal convolution whose kernel spans every sensor.
 *
 * input  [s, w, c] or [batch, s, w, c]
 * kernel [s, m, c, f]
 * bias   [f]
 * output [1, w, f] or [batch, 1, w, f]
 *
 * Cross-correlation (no kernel flip) sliding over time only with stride 1,
 * zero padded per same_padding() so the output keeps w steps.
 */
template <typename Scalar>
Var<Scalar> conv_time(Var<Scalar> input, Var<Scalar> kernel, Var<Scalar> bias) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const bool batched = is.size() == 4;
  if ((is.size() != 3 && !batched) || ks.size() != 4) {
    throw DimensionError("conv_time: expected input [s,w,c] or [b,s,w,c] and kernel [s,m,c,f], got " +
                         shape_string(is) + " and " + shape_string(ks));
  }
  const Index batch = batched ? is[0] : 1;
  const Index sensors = is[is.size() - 3], steps = is[is.size() - 2], channels = is[is.size() - 1];
  const Index width = ks[1], filters = ks[3];
  if (ks[0] != sensors) {
    throw DimensionError("conv_time: kernel height " + std::to_string(ks[0]) + " must equal sensor count " +
                         std::to_string(sensors));
  }
  if (ks[2] != channels) {
    throw DimensionError("conv_time: kernel expects " + std::to_string(ks[2]) + " channels, input has " +
                         std::to_string(channels));
  }
  if (width > steps) {
    throw ConfigError("conv_time: kernel width " + std::to_string(width) + " exceeds window length " +
                      std::to_string(steps));
  }
  if (bias.value().rank() != 1 || bias.size() != filters) {
    throw DimensionError("conv_time: bias must have shape [" + std::to_string(filters) + "]");
  }
  const TimePadding pad = same_padding(width);
  const Index patch = sensors * width * channels;

  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  // Patch row (b, t) holds input[b, i, t + j - pad.left, ch] at column (i*m + j)*c + ch.
  auto im2col = [=](const typename Tensor<Scalar>::Vector& x) {
    RowMatrix cols = RowMatrix::Zero(batch * steps, patch);
    for (Index b = 0; b < batch; ++b)
      for (Index t = 0; t < steps; ++t)
        for (Index i = 0; i < sensors; ++i)
          for (Index j = 0; j < width; ++j) {
            const Index src_t = t + j - pad.left;
            if (src_t < 0 || src_t >= steps) continue;
            for (Index ch = 0; ch < channels; ++ch)
              cols(b * steps + t, (i * width + j) * channels + ch) =
                  x[((b * sensors + i) * steps + src_t) * channels + ch];
          }
    return cols;
  };

  RowMatrix cols = im2col(input.value().data());
  Eigen::Map<const RowMatrix> km(kernel.value().data().data(), patch, filters);
  RowMatrix result = cols * km;
  result.rowwise() += bias.value().data().transpose();
  Shape out_shape = batched ? Shape{batch, 1, steps, filters} : Shape{1, steps, filters};
  Tensor<Scalar> out(out_shape, Eigen::Map<const typename Tensor<Scalar>::Vector>(result.data(), result.size()));

  const int ii = input.id, ik = kernel.id, ib = bias.id;
  return input.graph->record(
      std::move(out), {input, kernel, bias},
      [=, cols = std::move(cols)](Graph<Scalar>& g, int self) {
        Eigen::Map<const RowMatrix> go(g.grad(self).data().data(), batch * steps, filters);
        if (g.requires_grad(ib)) g.grad(ib).data() += go.colwise().sum().transpose();
        if (g.requires_grad(ik)) Eigen::Map<RowMatrix>(g.grad(ik).data().data(), patch, filters).noalias() += cols.transpose() * go;
        if (g.requires_grad(ii)) {
          Eigen::Map<const RowMatrix> kmat(g.value(ik).data().data(), patch, filters);
          RowMatrix dcols = go * kmat.transpose();
          auto& gi = g.grad(ii).data();
          for (Index b = 0; b < batch; ++b)
            for (Index t = 0; t < steps; ++t)
              for (Index i = 0; i < sensors; ++i)
                for (Index j = 0; j < width; ++j) {
                  const Index src_t = t + j - pad.left;
                  if (src_t < 0 || src_t >= steps) continue;
                  for (Index ch = 0; ch < channels; ++ch)
                    gi[((b * sensors + i) * steps + src_t) * channels + ch] +=
                        dcols(b * steps + t, (i * width + j) * channels + ch);
                }
        }
      });
}

}  // namespace stimpute::ad

#endif  // STIMPUTE_AUTODIFF_HPP
