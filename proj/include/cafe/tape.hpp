#pragma once

// Reverse-mode autodiff over an explicit op tape. Forward values are
// computed eagerly and recorded; backward() replays the tape in reverse and
// applies the matching vector-Jacobian rule per op. The tape is append-only
// during forward and read-only during backward, and backward() is const, so
// repeated sweeps over the same tape give identical results.
//
// Ops are recorded with typed kinds (not closures) so a second interpreter
// can walk the same tape with different rules; see lrp.hpp.

#include <array>
#include <memory>
#include <vector>

#include "cafe/tensor.hpp"

namespace cafe {

enum class Op : std::uint8_t {
  kInput,
  kMatmul,
  kTranspose,
  kAdd,
  kSub,
  kScale,
  kAddRow,
  kSubRow,
  kRelu,
  kGelu,
  kLayerNorm,
  kSoftmaxRows,
  kSliceRows,
  kSliceCols,
  kConcatRows,
  kConcatCols,
  kGather,
  kSumSquares,
  kSumAbs,
};

using NodeId = int;

template <typename T>
struct TapeNode {
  Op op = Op::kInput;
  std::array<NodeId, 3> in{-1, -1, -1};
  Tensor<T> val;
  Tensor<T> aux0, aux1;  // kLayerNorm: per-row mu, rstd
  std::shared_ptr<const std::vector<int>> idx;  // kGather: flat source index per output element
  T scalar = T(0);                              // kScale factor, kLayerNorm eps
  int i0 = 0, i1 = 0;                           // slice bounds [i0, i1)
  bool param = false;      // parameter leaf
  bool constlike = false;  // true when no non-param leaf feeds this node
};

template <typename T>
class Tape {
 public:
  NodeId input(Tensor<T> v, bool param = false) {
    TapeNode<T> n;
    n.op = Op::kInput;
    n.val = std::move(v);
    n.param = param;
    n.constlike = param;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    TapeNode<T> n;
    n.op = Op::kMatmul;
    n.in = {a, b, -1};
    n.val = cafe::matmul(value(a), value(b));
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kTranspose;
    n.in = {a, -1, -1};
    n.val = cafe::transpose(value(a));
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) {
    TapeNode<T> n;
    n.op = Op::kAdd;
    n.in = {a, b, -1};
    n.val = cafe::add(value(a), value(b));
    return push(std::move(n));
  }

  NodeId sub(NodeId a, NodeId b) {
    TapeNode<T> n;
    n.op = Op::kSub;
    n.in = {a, b, -1};
    n.val = cafe::sub(value(a), value(b));
    return push(std::move(n));
  }

  NodeId scale(NodeId a, T s) {
    TapeNode<T> n;
    n.op = Op::kScale;
    n.in = {a, -1, -1};
    n.scalar = s;
    n.val = cafe::scale(value(a), s);
    return push(std::move(n));
  }

  NodeId add_row(NodeId x, NodeId v) {
    TapeNode<T> n;
    n.op = Op::kAddRow;
    n.in = {x, v, -1};
    n.val = cafe::add_rowvec(value(x), value(v));
    return push(std::move(n));
  }

  NodeId sub_row(NodeId x, NodeId v) {
    TapeNode<T> n;
    n.op = Op::kSubRow;
    n.in = {x, v, -1};
    n.val = cafe::sub_rowvec(value(x), value(v));
    return push(std::move(n));
  }

  NodeId relu(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kRelu;
    n.in = {a, -1, -1};
    n.val = cafe::relu(value(a));
    return push(std::move(n));
  }

  NodeId gelu(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kGelu;
    n.in = {a, -1, -1};
    n.val = cafe::gelu(value(a));
    return push(std::move(n));
  }

  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, T eps) {
    TapeNode<T> n;
    n.op = Op::kLayerNorm;
    n.in = {x, gamma, beta};
    auto out = cafe::layer_norm_stats(value(x), value(gamma), value(beta), eps);
    n.val = std::move(out.y);
    n.aux0 = std::move(out.mu);
    n.aux1 = std::move(out.rstd);
    n.scalar = eps;
    return push(std::move(n));
  }

  NodeId softmax_rows(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kSoftmaxRows;
    n.in = {a, -1, -1};
    n.val = cafe::softmax_rows(value(a));
    return push(std::move(n));
  }

  NodeId slice_rows(NodeId a, int r0, int r1) {
    const Tensor<T>& x = value(a);
    require(0 <= r0 && r0 < r1 && r1 <= x.rows(), "slice_rows out of range");
    TapeNode<T> n;
    n.op = Op::kSliceRows;
    n.in = {a, -1, -1};
    n.i0 = r0;
    n.i1 = r1;
    const int cols = x.cols();
    Tensor<T> v({r1 - r0, cols});
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < cols; ++j) v(i - r0, j) = x(i, j);
    n.val = std::move(v);
    return push(std::move(n));
  }

  NodeId slice_cols(NodeId a, int c0, int c1) {
    const Tensor<T>& x = value(a);
    require(0 <= c0 && c0 < c1 && c1 <= x.cols(), "slice_cols out of range");
    TapeNode<T> n;
    n.op = Op::kSliceCols;
    n.in = {a, -1, -1};
    n.i0 = c0;
    n.i1 = c1;
    Tensor<T> v({x.rows(), c1 - c0});
    for (int i = 0; i < x.rows(); ++i)
      for (int j = c0; j < c1; ++j) v(i, j - c0) = x(i, j);
    n.val = std::move(v);
    return push(std::move(n));
  }

  NodeId concat_rows(NodeId a, NodeId b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    require(x.cols() == y.cols(), "concat_rows column mismatch");
    TapeNode<T> n;
    n.op = Op::kConcatRows;
    n.in = {a, b, -1};
    Tensor<T> v({x.rows() + y.rows(), x.cols()});
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < x.cols(); ++j) v(i, j) = x(i, j);
    for (int i = 0; i < y.rows(); ++i)
      for (int j = 0; j < y.cols(); ++j) v(i + x.rows(), j) = y(i, j);
    n.val = std::move(v);
    return push(std::move(n));
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    require(x.rows() == y.rows(), "concat_cols row mismatch");
    TapeNode<T> n;
    n.op = Op::kConcatCols;
    n.in = {a, b, -1};
    Tensor<T> v({x.rows(), x.cols() + y.cols()});
    for (int i = 0; i < x.rows(); ++i) {
      for (int j = 0; j < x.cols(); ++j) v(i, j) = x(i, j);
      for (int j = 0; j < y.cols(); ++j) v(i, j + x.cols()) = y(i, j);
    }
    n.val = std::move(v);
    return push(std::move(n));
  }

  // out[e] = in_flat[idx[e]], out reshaped to out_shape. idx entries must be
  // valid flat indices into the input.
  NodeId gather(NodeId a, std::shared_ptr<const std::vector<int>> idx,
                Shape out_shape) {
    const Tensor<T>& x = value(a);
    require(idx && idx->size() == shape_numel(out_shape), "gather index size");
    TapeNode<T> n;
    n.op = Op::kGather;
    n.in = {a, -1, -1};
    Tensor<T> v(std::move(out_shape));
    for (std::size_t e = 0; e < v.size(); ++e) {
      const int src = (*idx)[e];
      require(src >= 0 && static_cast<std::size_t>(src) < x.size(),
              "gather index out of range");
      v[e] = x[static_cast<std::size_t>(src)];
    }
    n.idx = std::move(idx);
    n.val = std::move(v);
    return push(std::move(n));
  }

  NodeId sum_squares(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kSumSquares;
    n.in = {a, -1, -1};
    const Tensor<T>& x = value(a);
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc = std::fma(x[i], x[i], acc);
    n.val = Tensor<T>::scalar(acc);
    return push(std::move(n));
  }

  NodeId sum_abs(NodeId a) {
    TapeNode<T> n;
    n.op = Op::kSumAbs;
    n.in = {a, -1, -1};
    const Tensor<T>& x = value(a);
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i]);
    n.val = Tensor<T>::scalar(acc);
    return push(std::move(n));
  }

  // 1x1 view of element (i, j).
  NodeId pick(NodeId a, int i, int j) {
    return slice_cols(slice_rows(a, i, i + 1), j, j + 1);
  }

  const Tensor<T>& value(NodeId id) const { return node(id).val; }
  const TapeNode<T>& node(NodeId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(),
            "node id not on tape");
    return nodes_[static_cast<std::size_t>(id)];
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Gradients of (seed . output) with respect to each node in `wanted`.
  // Nodes not feeding any wanted leaf are skipped entirely.
  std::vector<Tensor<T>> backward(NodeId out, const Tensor<T>& seed,
                                  const std::vector<NodeId>& wanted) const {
    require(!nodes_.empty(), "backward on empty tape");
    require(out >= 0 && static_cast<std::size_t>(out) < nodes_.size(),
            "backward target not on tape");
    require(seed.same_shape(value(out)), "seed shape mismatch");

    std::vector<char> needed(nodes_.size(), 0);
    for (NodeId w : wanted) {
      require(w >= 0 && static_cast<std::size_t>(w) < nodes_.size(),
              "wanted node not on tape");
      needed[static_cast<std::size_t>(w)] = 1;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (needed[i]) continue;
      for (NodeId a : nodes_[i].in)
        if (a >= 0 && needed[static_cast<std::size_t>(a)]) {
          needed[i] = 1;
          break;
        }
    }

    std::vector<Tensor<T>> grads(nodes_.size());
    if (needed[static_cast<std::size_t>(out)]) {
      grads[static_cast<std::size_t>(out)] = seed;
      for (NodeId id = out; id >= 0; --id) {
        const std::size_t ui = static_cast<std::size_t>(id);
        if (!needed[ui] || grads[ui].empty()) continue;
        distribute(id, grads[ui], needed, grads);
      }
    }

    std::vector<Tensor<T>> result;
    result.reserve(wanted.size());
    for (NodeId w : wanted) {
      const std::size_t ui = static_cast<std::size_t>(w);
      result.push_back(grads[ui].empty() ? Tensor<T>::zeros(value(w).shape())
                                         : std::move(grads[ui]));
    }
    return result;
  }

  // Gradient of a scalar (1x1) node with respect to one leaf.
  Tensor<T> grad(NodeId out, NodeId leaf) const {
    require(value(out).size() == 1, "grad() target must be scalar");
    return backward(out, Tensor<T>::scalar(T(1)), {leaf})[0];
  }

 private:
  NodeId push(TapeNode<T> n) {
    if (n.op != Op::kInput) {
      bool cl = true;
      for (NodeId a : n.in)
        if (a >= 0 && !nodes_[static_cast<std::size_t>(a)].constlike) cl = false;
      n.constlike = cl;
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  static void accumulate(Tensor<T>& slot, const Shape& shape,
                         const Tensor<T>& delta) {
    if (slot.empty()) slot = Tensor<T>::zeros(shape);
    for (std::size_t i = 0; i < delta.size(); ++i) slot[i] += delta[i];
  }

  void add_into(std::vector<Tensor<T>>& grads, const std::vector<char>& needed,
                NodeId target, const Tensor<T>& delta) const {
    if (target < 0) return;
    const std::size_t ui = static_cast<std::size_t>(target);
    if (!needed[ui]) return;
    accumulate(grads[ui], value(target).shape(), delta);
  }

  void distribute(NodeId id, const Tensor<T>& g, const std::vector<char>& needed,
                  std::vector<Tensor<T>>& grads) const {
    const TapeNode<T>& n = nodes_[static_cast<std::size_t>(id)];
    const NodeId a = n.in[0], b = n.in[1], c = n.in[2];
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kMatmul: {
        if (needed_of(needed, a)) add_into(grads, needed, a, matmul_nt(g, value(b)));
        if (needed_of(needed, b)) add_into(grads, needed, b, matmul_tn(value(a), g));
        break;
      }
      case Op::kTranspose:
        add_into(grads, needed, a, cafe::transpose(g));
        break;
      case Op::kAdd:
        add_into(grads, needed, a, g);
        add_into(grads, needed, b, g);
        break;
      case Op::kSub:
        add_into(grads, needed, a, g);
        add_into(grads, needed, b, cafe::scale(g, T(-1)));
        break;
      case Op::kScale:
        add_into(grads, needed, a, cafe::scale(g, n.scalar));
        break;
      case Op::kAddRow:
      case Op::kSubRow: {
        add_into(grads, needed, a, g);
        if (needed_of(needed, b)) {
          const int m = g.rows(), cols = g.cols();
          Tensor<T> gv(value(b).shape());
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < cols; ++j) gv[static_cast<std::size_t>(j)] += g(i, j);
          if (n.op == Op::kSubRow)
            for (std::size_t j = 0; j < gv.size(); ++j) gv[j] = -gv[j];
          add_into(grads, needed, b, gv);
        }
        break;
      }
      case Op::kRelu: {
        if (needed_of(needed, a)) {
          const Tensor<T>& x = value(a);
          Tensor<T> gx(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i)
            gx[i] = x[i] > T(0) ? g[i] : T(0);  // subgradient 0 at 0
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kGelu: {
        if (needed_of(needed, a)) {
          const Tensor<T>& x = value(a);
          Tensor<T> gx(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i)
            gx[i] = g[i] * gelu_grad_scalar(x[i]);
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor<T>& x = value(a);
        const Tensor<T>& gamma = value(b);
        const int m = x.rows(), d = x.cols();
        if (needed_of(needed, a)) {
          Tensor<T> gx(x.shape());
          for (int i = 0; i < m; ++i) {
            const T mu = n.aux0[static_cast<std::size_t>(i)];
            const T r = n.aux1[static_cast<std::size_t>(i)];
            T mean_gh = 0, mean_ghx = 0;
            for (int j = 0; j < d; ++j) {
              const T gh = g(i, j) * gamma[static_cast<std::size_t>(j)];
              const T xh = (x(i, j) - mu) * r;
              mean_gh += gh;
              mean_ghx += gh * xh;
            }
            mean_gh /= static_cast<T>(d);
            mean_ghx /= static_cast<T>(d);
            for (int j = 0; j < d; ++j) {
              const T gh = g(i, j) * gamma[static_cast<std::size_t>(j)];
              const T xh = (x(i, j) - mu) * r;
              gx(i, j) = r * (gh - mean_gh - xh * mean_ghx);
            }
          }
          add_into(grads, needed, a, gx);
        }
        if (needed_of(needed, b)) {
          Tensor<T> gg(value(b).shape());
          for (int i = 0; i < m; ++i) {
            const T mu = n.aux0[static_cast<std::size_t>(i)];
            const T r = n.aux1[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j)
              gg[static_cast<std::size_t>(j)] += g(i, j) * (x(i, j) - mu) * r;
          }
          add_into(grads, needed, b, gg);
        }
        if (needed_of(needed, c)) {
          Tensor<T> gb(value(c).shape());
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += g(i, j);
          add_into(grads, needed, c, gb);
        }
        break;
      }
      case Op::kSoftmaxRows: {
        if (needed_of(needed, a)) {
          const Tensor<T>& p = n.val;
          const int m = p.rows(), d = p.cols();
          Tensor<T> gx(p.shape());
          for (int i = 0; i < m; ++i) {
            T dotgp = 0;
            for (int j = 0; j < d; ++j) dotgp = std::fma(g(i, j), p(i, j), dotgp);
            for (int j = 0; j < d; ++j) gx(i, j) = p(i, j) * (g(i, j) - dotgp);
          }
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kSliceRows: {
        if (needed_of(needed, a)) {
          Tensor<T> gx(value(a).shape());
          for (int i = n.i0; i < n.i1; ++i)
            for (int j = 0; j < gx.cols(); ++j) gx(i, j) = g(i - n.i0, j);
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kSliceCols: {
        if (needed_of(needed, a)) {
          Tensor<T> gx(value(a).shape());
          for (int i = 0; i < gx.rows(); ++i)
            for (int j = n.i0; j < n.i1; ++j) gx(i, j) = g(i, j - n.i0);
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kConcatRows: {
        const int ra = value(a).rows();
        if (needed_of(needed, a)) {
          Tensor<T> ga(value(a).shape());
          for (int i = 0; i < ra; ++i)
            for (int j = 0; j < ga.cols(); ++j) ga(i, j) = g(i, j);
          add_into(grads, needed, a, ga);
        }
        if (needed_of(needed, b)) {
          Tensor<T> gb(value(b).shape());
          for (int i = 0; i < gb.rows(); ++i)
            for (int j = 0; j < gb.cols(); ++j) gb(i, j) = g(i + ra, j);
          add_into(grads, needed, b, gb);
        }
        break;
      }
      case Op::kConcatCols: {
        const int ca = value(a).cols();
        if (needed_of(needed, a)) {
          Tensor<T> ga(value(a).shape());
          for (int i = 0; i < ga.rows(); ++i)
            for (int j = 0; j < ca; ++j) ga(i, j) = g(i, j);
          add_into(grads, needed, a, ga);
        }
        if (needed_of(needed, b)) {
          Tensor<T> gb(value(b).shape());
          for (int i = 0; i < gb.rows(); ++i)
            for (int j = 0; j < gb.cols(); ++j) gb(i, j) = g(i, j + ca);
          add_into(grads, needed, b, gb);
        }
        break;
      }
      case Op::kGather: {
        if (needed_of(needed, a)) {
          Tensor<T> gx(value(a).shape());
          const std::vector<int>& idx = *n.idx;
          for (std::size_t e = 0; e < g.size(); ++e)
            gx[static_cast<std::size_t>(idx[e])] += g[e];
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kSumSquares: {
        if (needed_of(needed, a)) {
          const Tensor<T>& x = value(a);
          Tensor<T> gx(x.shape());
          const T s = g[0];
          for (std::size_t i = 0; i < x.size(); ++i) gx[i] = T(2) * x[i] * s;
          add_into(grads, needed, a, gx);
        }
        break;
      }
      case Op::kSumAbs: {
        if (needed_of(needed, a)) {
          const Tensor<T>& x = value(a);
          Tensor<T> gx(x.shape());
          const T s = g[0];
          for (std::size_t i = 0; i < x.size(); ++i)
            gx[i] = x[i] > T(0) ? s : (x[i] < T(0) ? -s : T(0));
          add_into(grads, needed, a, gx);
        }
        break;
      }
    }
  }

  static bool needed_of(const std::vector<char>& needed, NodeId id) {
    return id >= 0 && needed[static_cast<std::size_t>(id)];
  }

  std::vector<TapeNode<T>> nodes_;
};

}  // namespace cafe
