#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/error.hpp"
#include "stagecap/ndarray.hpp"
#include "stagecap/rng.hpp"

namespace stagecap {

using NodeId = std::size_t;

enum class OpKind {
  kConstant,
  kParameter,
  kMatMul,
  kAdd,
  kAddBias,
  kScale,
  kMul,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kCrossEntropy,
  kEmbedding,
  kAttention,
  kDropout,
  kReshape,
  kSum,
};

namespace detail {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const NDArray& a) {
  return ConstMatrixMap(a.data(), static_cast<Eigen::Index>(a.rows()),
                        static_cast<Eigen::Index>(a.cols()));
}
inline MatrixMap as_matrix(NDArray& a) {
  return MatrixMap(a.data(), static_cast<Eigen::Index>(a.rows()),
                   static_cast<Eigen::Index>(a.cols()));
}

}  // namespace detail

class Graph;
using BackwardFn = std::function<void(Graph&, NodeId)>;

/// Tape of op records in creation order, which is a topological order.
/// A graph built with recording disabled keeps values only and cannot run
/// backward; inference uses that mode.
class Graph {
 public:
  explicit Graph(bool record_gradients = true) : record_(record_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  NodeId constant(NDArray value) {
    return push(OpKind::kConstant, {}, std::move(value), false, nullptr);
  }

  NodeId parameter(NDArray value) {
    return push(OpKind::kParameter, {}, std::move(value), record_, nullptr);
  }

  OpKind op(NodeId id) const { return at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return at(id).inputs; }
  const NDArray& value(NodeId id) const { return at(id).value; }
  bool requires_grad(NodeId id) const { return at(id).requires_grad; }

  /// Gradient accumulated by the last backward call; zeros if none reached
  /// this node.
  NDArray grad(NodeId id) const {
    const Node& n = at(id);
    if (n.has_grad) return n.grad;
    return NDArray(n.value.shape(), 0.0);
  }

  /// Zero-initialised gradient buffer, allocated on first use.
  NDArray& grad_buffer(NodeId id) {
    Node& n = at(id);
    if (!n.has_grad) {
      n.grad = NDArray(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Records an op. The node requires a gradient when any input does; the
  /// backward function is dropped otherwise.
  NodeId record(OpKind op, std::vector<NodeId> inputs, NDArray value,
                BackwardFn fn) {
    bool needs = false;
    for (NodeId i : inputs) needs = needs || at(i).requires_grad;
    return push(op, std::move(inputs), std::move(value), needs,
                needs ? std::move(fn) : nullptr);
  }

  void backward(NodeId loss) {
    if (!record_) throw Error("backward: graph was built without recording");
    if (at(loss).value.size() != 1) {
      throw Error("backward: loss node has shape " +
                  shape_string(at(loss).value.shape()) + ", expected scalar");
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = NDArray();
    }
    grad_buffer(loss)[0] = 1.0;
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    NDArray value;
    NDArray grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  NodeId push(OpKind op, std::vector<NodeId> inputs, NDArray value,
              bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), NDArray(),
                          false, needs_grad && record_, std::move(fn)});
    return nodes_.size() - 1;
  }

  Node& at(NodeId id) {
    if (id >= nodes_.size()) throw Error("graph: unknown node id");
    return nodes_[id];
  }
  const Node& at(NodeId id) const {
    if (id >= nodes_.size()) throw Error("graph: unknown node id");
    return nodes_[id];
  }

  bool record_;
  std::deque<Node> nodes_;  // deque: values stay put while ops append
};

// ---------------------------------------------------------------------------
// Ops. Every op validates shapes and records its own backward rule.

inline NodeId matmul(Graph& g, NodeId a, NodeId b) {
  const NDArray& av = g.value(a);
  const NDArray& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw Error("matmul: shape mismatch " + shape_string(av.shape()) + " x " +
                shape_string(bv.shape()));
  }
  NDArray out(Shape{av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() =
      detail::as_matrix(av) * detail::as_matrix(bv);
  return g.record(OpKind::kMatMul, {a, b}, std::move(out),
                  [a, b](Graph& g, NodeId self) {
                    auto dout = detail::as_matrix(g.grad_buffer(self));
                    if (g.requires_grad(a)) {
                      detail::as_matrix(g.grad_buffer(a)).noalias() +=
                          dout * detail::as_matrix(g.value(b)).transpose();
                    }
                    if (g.requires_grad(b)) {
                      detail::as_matrix(g.grad_buffer(b)).noalias() +=
                          detail::as_matrix(g.value(a)).transpose() * dout;
                    }
                  });
}

inline NodeId add(Graph& g, NodeId a, NodeId b) {
  const NDArray& av = g.value(a);
  const NDArray& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw Error("add: shape mismatch " + shape_string(av.shape()) + " + " +
                shape_string(bv.shape()));
  }
  NDArray out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record(OpKind::kAdd, {a, b}, std::move(out),
                  [a, b](Graph& g, NodeId self) {
                    for (NodeId in : {a, b}) {
                      if (!g.requires_grad(in)) continue;
                      NDArray& gi = g.grad_buffer(in);
                      const NDArray& go = g.grad_buffer(self);
                      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
                    }
                  });
}

/// x[r, c] + bias[c] for every row r.
inline NodeId add_bias(Graph& g, NodeId x, NodeId bias) {
  const NDArray& xv = g.value(x);
  const NDArray& bv = g.value(bias);
  if (bv.size() != xv.cols()) {
    throw Error("add_bias: bias " + shape_string(bv.shape()) +
                " does not match last dimension of " +
                shape_string(xv.shape()));
  }
  NDArray out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return g.record(OpKind::kAddBias, {x, bias}, std::move(out),
                  [x, bias](Graph& g, NodeId self) {
                    const NDArray& go = g.grad_buffer(self);
                    if (g.requires_grad(x)) {
                      NDArray& gx = g.grad_buffer(x);
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                    }
                    if (g.requires_grad(bias)) {
                      NDArray& gb = g.grad_buffer(bias);
                      for (std::size_t r = 0; r < go.rows(); ++r) {
                        auto row = go.row(r);
                        for (std::size_t c = 0; c < row.size(); ++c) {
                          gb[c] += row[c];
                        }
                      }
                    }
                  });
}

inline NodeId linear(Graph& g, NodeId x, NodeId weight, NodeId bias) {
  return add_bias(g, matmul(g, x, weight), bias);
}

inline NodeId scale(Graph& g, NodeId x, double factor) {
  NDArray out = g.value(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
  return g.record(OpKind::kScale, {x}, std::move(out),
                  [x, factor](Graph& g, NodeId self) {
                    NDArray& gx = g.grad_buffer(x);
                    const NDArray& go = g.grad_buffer(self);
                    for (std::size_t i = 0; i < gx.size(); ++i) {
                      gx[i] += factor * go[i];
                    }
                  });
}

inline NodeId mul(Graph& g, NodeId a, NodeId b) {
  const NDArray& av = g.value(a);
  const NDArray& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw Error("mul: shape mismatch " + shape_string(av.shape()) + " * " +
                shape_string(bv.shape()));
  }
  NDArray out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record(OpKind::kMul, {a, b}, std::move(out),
                  [a, b](Graph& g, NodeId self) {
                    const NDArray& go = g.grad_buffer(self);
                    if (g.requires_grad(a)) {
                      NDArray& ga = g.grad_buffer(a);
                      const NDArray& bv = g.value(b);
                      for (std::size_t i = 0; i < ga.size(); ++i) {
                        ga[i] += go[i] * bv[i];
                      }
                    }
                    if (g.requires_grad(b)) {
                      NDArray& gb = g.grad_buffer(b);
                      const NDArray& av = g.value(a);
                      for (std::size_t i = 0; i < gb.size(); ++i) {
                        gb[i] += go[i] * av[i];
                      }
                    }
                  });
}

inline NodeId relu(Graph& g, NodeId x) {
  NDArray out = g.value(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], 0.0);
  return g.record(OpKind::kRelu, {x}, std::move(out),
                  [x](Graph& g, NodeId self) {
                    NDArray& gx = g.grad_buffer(x);
                    const NDArray& go = g.grad_buffer(self);
                    const NDArray& xv = g.value(x);
                    for (std::size_t i = 0; i < gx.size(); ++i) {
                      if (xv[i] > 0.0) gx[i] += go[i];
                    }
                  });
}

inline NodeId sum(Graph& g, NodeId x) {
  double total = 0.0;
  for (double v : g.value(x).values()) total += v;
  return g.record(OpKind::kSum, {x}, NDArray::scalar(total),
                  [x](Graph& g, NodeId self) {
                    const double go = g.grad_buffer(self)[0];
                    NDArray& gx = g.grad_buffer(x);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
                  });
}

inline NodeId reshape(Graph& g, NodeId x, Shape shape) {
  NDArray out = g.value(x);
  out.reshape(std::move(shape));
  return g.record(OpKind::kReshape, {x}, std::move(out),
                  [x](Graph& g, NodeId self) {
                    NDArray& gx = g.grad_buffer(x);
                    const NDArray& go = g.grad_buffer(self);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                  });
}

namespace detail {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Max-subtracted softmax along `axis`.
inline NodeId softmax(Graph& g, NodeId x, std::size_t axis) {
  const NDArray& xv = g.value(x);
  if (axis >= xv.rank()) {
    throw Error("softmax: axis " + std::to_string(axis) + " invalid for " +
                shape_string(xv.shape()));
  }
  const auto s = detail::split_axis(xv.shape(), axis);
  NDArray out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) {
        peak = std::max(peak, xv[base + k * s.inner]);
      }
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - peak);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return g.record(OpKind::kSoftmax, {x}, std::move(out),
                  [x, s](Graph& g, NodeId self) {
                    const NDArray& y = g.value(self);
                    const NDArray& go = g.grad_buffer(self);
                    NDArray& gx = g.grad_buffer(x);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t in = 0; in < s.inner; ++in) {
                        const std::size_t base = o * s.extent * s.inner + in;
                        double dot = 0.0;
                        for (std::size_t k = 0; k < s.extent; ++k) {
                          const std::size_t i = base + k * s.inner;
                          dot += go[i] * y[i];
                        }
                        for (std::size_t k = 0; k < s.extent; ++k) {
                          const std::size_t i = base + k * s.inner;
                          gx[i] += y[i] * (go[i] - dot);
                        }
                      }
                    }
                  });
}

/// Normalises over the last dimension, then applies gain and bias.
inline NodeId layer_norm(Graph& g, NodeId x, NodeId gain, NodeId bias,
                         double eps = 1e-5) {
  const NDArray& xv = g.value(x);
  const std::size_t width = xv.cols();
  if (g.value(gain).size() != width || g.value(bias).size() != width) {
    throw Error("layer_norm: gain/bias size must equal last dimension " +
                std::to_string(width));
  }
  const std::size_t rows = xv.rows();
  auto normalized = std::make_shared<NDArray>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  NDArray out(xv.shape());
  const NDArray& gv = g.value(gain);
  const NDArray& bv = g.value(bias);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    auto xh = normalized->row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < width; ++c) {
      xh[c] = (in[c] - mean) * is;
      o[c] = gv[c] * xh[c] + bv[c];
    }
  }
  return g.record(
      OpKind::kLayerNorm, {x, gain, bias}, std::move(out),
      [x, gain, bias, normalized, inv_std](Graph& g, NodeId self) {
        const NDArray& go = g.grad_buffer(self);
        const NDArray& gv = g.value(gain);
        const std::size_t width = go.cols();
        const double n = static_cast<double>(width);
        if (g.requires_grad(gain) || g.requires_grad(bias)) {
          NDArray& gg = g.grad_buffer(gain);
          NDArray& gb = g.grad_buffer(bias);
          for (std::size_t r = 0; r < go.rows(); ++r) {
            auto dy = go.row(r);
            auto xh = normalized->row(r);
            for (std::size_t c = 0; c < width; ++c) {
              gg[c] += dy[c] * xh[c];
              gb[c] += dy[c];
            }
          }
        }
        if (!g.requires_grad(x)) return;
        NDArray& gx = g.grad_buffer(x);
        for (std::size_t r = 0; r < go.rows(); ++r) {
          auto dy = go.row(r);
          auto xh = normalized->row(r);
          auto dx = gx.row(r);
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            const double d = dy[c] * gv[c];
            mean_d += d;
            mean_dx += d * xh[c];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t c = 0; c < width; ++c) {
            const double d = dy[c] * gv[c];
            dx[c] += (*inv_std)[r] * (d - mean_d - xh[c] * mean_dx);
          }
        }
      });
}

/// Mean over rows with weight_mask set of -log softmax(logits)[row, target].
inline NodeId cross_entropy(Graph& g, NodeId logits,
                            std::span<const std::int32_t> targets,
                            const std::vector<bool>& weight_mask) {
  const NDArray& lv = g.value(logits);
  const std::size_t rows = lv.rows();
  const std::size_t vocab = lv.cols();
  if (lv.rank() != 2 || targets.size() != rows || weight_mask.size() != rows) {
    throw Error("cross_entropy: logits " + shape_string(lv.shape()) +
                " need one target and one mask flag per row");
  }
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw Error("cross_entropy: target id " + std::to_string(targets[r]) +
                  " outside [0," + std::to_string(vocab) + ")");
    }
    if (weight_mask[r]) ++active;
  }
  if (active == 0) {
    throw Error("cross_entropy: every position is masked out");
  }
  auto probs = std::make_shared<NDArray>(lv.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = lv.row(r);
    auto p = probs->row(r);
    const double peak = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      p[c] = std::exp(in[c] - peak);
      total += p[c];
    }
    for (std::size_t c = 0; c < vocab; ++c) p[c] /= total;
    if (weight_mask[r]) {
      loss += -(in[targets[r]] - peak - std::log(total));
    }
  }
  const double inv = 1.0 / static_cast<double>(active);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return g.record(
      OpKind::kCrossEntropy, {logits}, NDArray::scalar(loss * inv),
      [logits, probs, tgt = std::move(tgt), weight_mask, inv](Graph& g,
                                                              NodeId self) {
        const double go = g.grad_buffer(self)[0] * inv;
        NDArray& gl = g.grad_buffer(logits);
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          if (!weight_mask[r]) continue;
          auto p = probs->row(r);
          auto d = gl.row(r);
          for (std::size_t c = 0; c < p.size(); ++c) d[c] += go * p[c];
          d[tgt[r]] -= go;
        }
      });
}

/// Gathers rows of `table` (V x d) for each id.
inline NodeId embedding(Graph& g, NodeId table,
                        std::span<const std::int32_t> ids) {
  const NDArray& tv = g.value(table);
  if (ids.empty()) throw Error("embedding: empty id list");
  NDArray out(Shape{ids.size(), tv.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw Error("embedding: id " + std::to_string(ids[i]) +
                  " outside table of " + std::to_string(tv.rows()) + " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return g.record(OpKind::kEmbedding, {table}, std::move(out),
                  [table, idv = std::move(idv)](Graph& g, NodeId self) {
                    const NDArray& go = g.grad_buffer(self);
                    NDArray& gt = g.grad_buffer(table);
                    for (std::size_t i = 0; i < idv.size(); ++i) {
                      auto src = go.row(i);
                      auto dst = gt.row(static_cast<std::size_t>(idv[i]));
                      for (std::size_t c = 0; c < src.size(); ++c) {
                        dst[c] += src[c];
                      }
                    }
                  });
}

/// Inverted dropout; identity when rate is zero.
inline NodeId dropout(Graph& g, NodeId x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout: rate must be < 1");
  const NDArray& xv = g.value(x);
  auto keep = std::make_shared<std::vector<double>>(xv.size());
  std::bernoulli_distribution coin(1.0 - rate);
  const double factor = 1.0 / (1.0 - rate);
  NDArray out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*keep)[i] = coin(rng) ? factor : 0.0;
    out[i] *= (*keep)[i];
  }
  return g.record(OpKind::kDropout, {x}, std::move(out),
                  [x, keep](Graph& g, NodeId self) {
                    const NDArray& go = g.grad_buffer(self);
                    NDArray& gx = g.grad_buffer(x);
                    for (std::size_t i = 0; i < gx.size(); ++i) {
                      gx[i] += go[i] * (*keep)[i];
                    }
                  });
}

enum class Visibility { kCausal, kFull };

/// Row layout for batched multi-head attention. Queries are stacked as
/// batch x query_len rows, keys/values as batch x key_len rows. Key j of batch
/// entry b is visible when j < key_valid[b] (all keys when key_valid is empty)
/// and, under causal visibility, j <= query index.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  Visibility visibility = Visibility::kFull;
  std::vector<std::size_t> key_valid;
};

inline NodeId attention(Graph& g, NodeId q, NodeId k, NodeId v,
                        AttentionLayout layout) {
  const NDArray& qv = g.value(q);
  const NDArray& kv = g.value(k);
  const NDArray& vv = g.value(v);
  const std::size_t width = qv.cols();
  if (qv.rank() != 2 || kv.shape() != vv.shape() || kv.cols() != width ||
      qv.rows() != layout.batch * layout.query_len ||
      kv.rows() != layout.batch * layout.key_len) {
    throw Error("attention: shapes q" + shape_string(qv.shape()) + " k" +
                shape_string(kv.shape()) + " v" + shape_string(vv.shape()) +
                " disagree with layout");
  }
  if (layout.heads == 0 || width % layout.heads != 0) {
    throw Error("attention: width " + std::to_string(width) +
                " not divisible by heads " + std::to_string(layout.heads));
  }
  if (layout.visibility == Visibility::kCausal &&
      layout.query_len != layout.key_len) {
    throw Error("attention: causal visibility needs query_len == key_len");
  }
  if (layout.key_valid.empty()) {
    layout.key_valid.assign(layout.batch, layout.key_len);
  }
  if (layout.key_valid.size() != layout.batch) {
    throw Error("attention: key_valid needs one entry per batch element");
  }
  for (std::size_t kvalid : layout.key_valid) {
    if (kvalid == 0 || kvalid > layout.key_len) {
      throw Error("attention: key_valid out of range");
    }
  }

  const std::size_t dh = width / layout.heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t tq = layout.query_len;
  const std::size_t tk = layout.key_len;
  auto probs = std::make_shared<std::vector<double>>(layout.batch *
                                                     layout.heads * tq * tk);
  NDArray out(qv.shape(), 0.0);
  std::vector<double> scores(tk);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < layout.heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < tq; ++i) {
        const double* qi = qv.data() + (b * tq + i) * width + off;
        std::size_t visible = layout.key_valid[b];
        if (layout.visibility == Visibility::kCausal) {
          visible = std::min(visible, i + 1);
        }
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = kv.data() + (b * tk + j) * width + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * sc;
          peak = std::max(peak, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          scores[j] = std::exp(scores[j] - peak);
          total += scores[j];
        }
        double* p = probs->data() + ((b * layout.heads + h) * tq + i) * tk;
        double* oi = out.data() + (b * tq + i) * width + off;
        for (std::size_t j = 0; j < visible; ++j) {
          p[j] = scores[j] / total;
          const double* vj = vv.data() + (b * tk + j) * width + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return g.record(
      OpKind::kAttention, {q, k, v}, std::move(out),
      [q, k, v, layout = std::move(layout), probs, dh, sc](Graph& g,
                                                         NodeId self) {
        const NDArray& qv = g.value(q);
        const NDArray& kv = g.value(k);
        const NDArray& vv = g.value(v);
        const NDArray& go = g.grad_buffer(self);
        const bool need_q = g.requires_grad(q);
        const bool need_k = g.requires_grad(k);
        const bool need_v = g.requires_grad(v);
        double* gq = need_q ? g.grad_buffer(q).data() : nullptr;
        double* gk = need_k ? g.grad_buffer(k).data() : nullptr;
        double* gv = need_v ? g.grad_buffer(v).data() : nullptr;
        const std::size_t width = qv.cols();
        const std::size_t tq = layout.query_len;
        const std::size_t tk = layout.key_len;
        std::vector<double> dp(tk);
        for (std::size_t b = 0; b < layout.batch; ++b) {
          for (std::size_t h = 0; h < layout.heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < tq; ++i) {
              std::size_t visible = layout.key_valid[b];
              if (layout.visibility == Visibility::kCausal) {
                visible = std::min(visible, i + 1);
              }
              const double* p =
                  probs->data() + ((b * layout.heads + h) * tq + i) * tk;
              const double* doi = go.data() + (b * tq + i) * width + off;
              double weighted = 0.0;
              for (std::size_t j = 0; j < visible; ++j) {
                const double* vj = vv.data() + (b * tk + j) * width + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
                dp[j] = s;
                weighted += p[j] * s;
              }
              const double* qi = qv.data() + (b * tq + i) * width + off;
              for (std::size_t j = 0; j < visible; ++j) {
                const double ds = p[j] * (dp[j] - weighted) * sc;
                const std::size_t krow = (b * tk + j) * width + off;
                if (need_q) {
                  double* gqi = gq + (b * tq + i) * width + off;
                  for (std::size_t c = 0; c < dh; ++c) {
                    gqi[c] += ds * kv.data()[krow + c];
                  }
                }
                if (need_k) {
                  for (std::size_t c = 0; c < dh; ++c) {
                    gk[krow + c] += ds * qi[c];
                  }
                }
                if (need_v) {
                  for (std::size_t c = 0; c < dh; ++c) {
                    gv[krow + c] += p[j] * doi[c];
                  }
                }
              }
            }
          }
        }
      });
}

}  // namespace stagecap
