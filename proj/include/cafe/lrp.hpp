#pragma once

// Relevance propagation over a recorded tape. Walks the same node list as
// Tape::backward but applies conservation-oriented rules instead of
// vector-Jacobian products:
//
//   - epsilon rule for affine maps (matmul against parameters, row-vector
//     bias adds, LayerNorm with per-row statistics frozen),
//   - proportional split at elementwise additions (residual connections),
//   - pass-through for elementwise activations (ReLU, GELU) and scaling,
//   - for a product of two activations (attention probabilities times
//     values): an epsilon-rule bilinear split with half the relevance to
//     each factor, or the first factor treated as a constant,
//   - softmax relevance moved to its logits through the softmax Jacobian,
//     epsilon-stabilized.
//
// Relevance into parameter-only subgraphs is dropped. On bias-free networks
// with constant mixing matrices the rules conserve total relevance up to
// epsilon; on a full transformer the residual is measured, not asserted.

#include <vector>

#include "cafe/tape.hpp"

namespace cafe {

enum class AttnRule {
  kBilinear,  // split products of activations, propagate through softmax
  kFrozen,    // treat attention probabilities as constants
};

template <typename T>
struct LrpOptions {
  T eps = T(0);
  AttnRule attn = AttnRule::kBilinear;
};

template <typename T>
struct LrpResult {
  Tensor<T> relevance;  // at the stop node, same shape as its value
  T total_in = 0;       // sum over `relevance`
  T target_value = 0;   // scalar the sweep started from
};

namespace detail {

template <typename T>
inline T stabilized(T z, T eps) {
  return z + (z >= T(0) ? eps : -eps);
}

}  // namespace detail

// Propagates relevance from scalar node `target` down to node `stop` and
// returns the relevance arriving there. Nothing is distributed past `stop`.
template <typename T>
LrpResult<T> lrp_backward(const Tape<T>& tape, NodeId target, NodeId stop,
                          const LrpOptions<T>& opt) {
  require(opt.eps > T(0), "lrp eps must be > 0");
  require(tape.value(target).size() == 1, "lrp target must be scalar");
  require(!tape.node(target).constlike, "lrp target does not depend on data");
  const T eps = opt.eps;

  std::vector<Tensor<T>> rel(static_cast<std::size_t>(tape.size()));
  auto add_rel = [&](NodeId id, const Tensor<T>& delta) {
    if (id < 0) return;
    const TapeNode<T>& n = tape.node(id);
    if (n.constlike) return;  // parameters absorb no relevance
    Tensor<T>& slot = rel[static_cast<std::size_t>(id)];
    if (slot.empty()) slot = Tensor<T>::zeros(n.val.shape());
    for (std::size_t i = 0; i < delta.size(); ++i) slot[i] += delta[i];
  };

  rel[static_cast<std::size_t>(target)] = tape.value(target);

  for (NodeId id = target; id >= 0; --id) {
    const std::size_t ui = static_cast<std::size_t>(id);
    if (rel[ui].empty() || id == stop) continue;
    const Tensor<T>& r = rel[ui];
    const TapeNode<T>& n = tape.node(id);
    const NodeId a = n.in[0], b = n.in[1];

    switch (n.op) {
      case Op::kInput:
        break;  // relevance rests here
      case Op::kMatmul: {
        const Tensor<T>& av = tape.value(a);
        const Tensor<T>& bv = tape.value(b);
        const bool ca = tape.node(a).constlike, cb = tape.node(b).constlike;
        Tensor<T> s(n.val.shape());
        for (std::size_t i = 0; i < s.size(); ++i)
          s[i] = r[i] / detail::stabilized(n.val[i], eps);
        const T share =
            (!ca && !cb && opt.attn == AttnRule::kBilinear) ? T(0.5) : T(1);
        const bool to_a = !ca && (cb || opt.attn == AttnRule::kBilinear);
        const bool to_b = !cb;
        if (to_a) {
          Tensor<T> ra = matmul_nt(s, bv);
          for (std::size_t i = 0; i < ra.size(); ++i) ra[i] *= av[i] * share;
          add_rel(a, ra);
        }
        if (to_b) {
          const T bshare = (!ca && opt.attn == AttnRule::kBilinear) ? T(0.5) : T(1);
          Tensor<T> rb = matmul_tn(av, s);
          for (std::size_t i = 0; i < rb.size(); ++i)
            rb[i] *= bv[i] * (ca ? T(1) : bshare);
          add_rel(b, rb);
        }
        break;
      }
      case Op::kTranspose:
        add_rel(a, cafe::transpose(r));
        break;
      case Op::kAdd:
      case Op::kSub: {
        const Tensor<T>& av = tape.value(a);
        const Tensor<T>& bv = tape.value(b);
        const T sgn = n.op == Op::kSub ? T(-1) : T(1);
        Tensor<T> ra(av.shape()), rb(bv.shape());
        for (std::size_t i = 0; i < r.size(); ++i) {
          const T d = detail::stabilized(n.val[i], eps);
          ra[i] = av[i] / d * r[i];
          rb[i] = sgn * bv[i] / d * r[i];
        }
        add_rel(a, ra);
        add_rel(b, rb);
        break;
      }
      case Op::kScale:
        add_rel(a, r);  // output proportional to input
        break;
      case Op::kAddRow:
      case Op::kSubRow: {
        // x gets its epsilon share; the bias share is dropped.
        const Tensor<T>& xv = tape.value(a);
        Tensor<T> rx(xv.shape());
        for (std::size_t i = 0; i < r.size(); ++i)
          rx[i] = xv[i] / detail::stabilized(n.val[i], eps) * r[i];
        add_rel(a, rx);
        break;
      }
      case Op::kRelu:
      case Op::kGelu:
        add_rel(a, r);
        break;
      case Op::kLayerNorm: {
        // Affine with frozen per-row statistics: y_j = x_j * (rstd*gamma_j) + c_j.
        const Tensor<T>& xv = tape.value(a);
        const Tensor<T>& gamma = tape.value(b);
        const int m = xv.rows(), d = xv.cols();
        Tensor<T> rx(xv.shape());
        for (int i = 0; i < m; ++i) {
          const T rs = n.aux1[static_cast<std::size_t>(i)];
          for (int j = 0; j < d; ++j) {
            const T w = rs * gamma[static_cast<std::size_t>(j)];
            rx(i, j) = xv(i, j) * w / detail::stabilized(n.val(i, j), eps) * r(i, j);
          }
        }
        add_rel(a, rx);
        break;
      }
      case Op::kSoftmaxRows: {
        // R_x = x .* J^T (R ./ stab(p)) with J the softmax Jacobian.
        const Tensor<T>& xv = tape.value(a);
        const Tensor<T>& p = n.val;
        const int m = p.rows(), d = p.cols();
        Tensor<T> rx(xv.shape());
        for (int i = 0; i < m; ++i) {
          T dot_sp = 0;
          for (int j = 0; j < d; ++j)
            dot_sp += r(i, j) / detail::stabilized(p(i, j), eps) * p(i, j);
          for (int j = 0; j < d; ++j) {
            const T s = r(i, j) / detail::stabilized(p(i, j), eps);
            rx(i, j) = xv(i, j) * p(i, j) * (s - dot_sp);
          }
        }
        add_rel(a, rx);
        break;
      }
      case Op::kSliceRows: {
        Tensor<T> rx(tape.value(a).shape());
        for (int i = n.i0; i < n.i1; ++i)
          for (int j = 0; j < rx.cols(); ++j) rx(i, j) = r(i - n.i0, j);
        add_rel(a, rx);
        break;
      }
      case Op::kSliceCols: {
        Tensor<T> rx(tape.value(a).shape());
        for (int i = 0; i < rx.rows(); ++i)
          for (int j = n.i0; j < n.i1; ++j) rx(i, j) = r(i, j - n.i0);
        add_rel(a, rx);
        break;
      }
      case Op::kConcatRows: {
        const int ra_rows = tape.value(a).rows();
        Tensor<T> ra(tape.value(a).shape()), rb(tape.value(b).shape());
        for (int i = 0; i < ra.rows(); ++i)
          for (int j = 0; j < ra.cols(); ++j) ra(i, j) = r(i, j);
        for (int i = 0; i < rb.rows(); ++i)
          for (int j = 0; j < rb.cols(); ++j) rb(i, j) = r(i + ra_rows, j);
        add_rel(a, ra);
        add_rel(b, rb);
        break;
      }
      case Op::kConcatCols: {
        const int ca_cols = tape.value(a).cols();
        Tensor<T> ra(tape.value(a).shape()), rb(tape.value(b).shape());
        for (int i = 0; i < ra.rows(); ++i)
          for (int j = 0; j < ra.cols(); ++j) ra(i, j) = r(i, j);
        for (int i = 0; i < rb.rows(); ++i)
          for (int j = 0; j < rb.cols(); ++j) rb(i, j) = r(i, j + ca_cols);
        add_rel(a, ra);
        add_rel(b, rb);
        break;
      }
      case Op::kGather: {
        Tensor<T> rx(tape.value(a).shape());
        const std::vector<int>& idx = *n.idx;
        for (std::size_t e = 0; e < r.size(); ++e)
          rx[static_cast<std::size_t>(idx[e])] += r[e];
        add_rel(a, rx);
        break;
      }
      case Op::kSumSquares:
      case Op::kSumAbs:
        throw usage_error("lrp does not propagate through loss reductions");
    }
  }

  LrpResult<T> out;
  const Tensor<T>& stop_rel = rel[static_cast<std::size_t>(stop)];
  out.relevance = stop_rel.empty()
                      ? Tensor<T>::zeros(tape.value(stop).shape())
                      : stop_rel;
  out.total_in = sum(out.relevance);
  out.target_value = tape.value(target)[0];
  return out;
}

}  // namespace cafe
