#pragma once

// Sparse autoencoder over token latents:
//   encode  z = ReLU(W_e (h - b_dec))
//   decode  h_hat = W_d z - b_out          (sign configurable)
//   loss    ||h - h_hat||^2 + lambda * ||z||_1
// trained with Adam, decoder columns renormalized to unit length after every
// step. An optional nested-prefix ("matryoshka") variant averages the
// reconstruction loss over ascending feature prefixes.

#include <cstdint>
#include <string>
#include <vector>

#include "cafe/rng.hpp"
#include "cafe/tape.hpp"
#include "cafe/tensor.hpp"
#include "cafe/vit.hpp"

namespace cafe {

template <typename T>
struct SAEModel {
  int n = 0;  // latent dim
  int m = 0;  // feature count, m > n
  Tensor<T> w_enc;  // [m x n]
  Tensor<T> w_dec;  // [n x m]
  Tensor<T> b_dec;  // [n], subtracted before encoding
  Tensor<T> b_out;  // [n], applied to the decoder output
  bool subtract_output_bias = true;  // h_hat = W_d z - b_out when true

  void validate() const {
    require(m > n && n > 0, "sae: feature count must exceed latent dim");
    require(w_enc.rows() == m && w_enc.cols() == n, "sae: w_enc shape");
    require(w_dec.rows() == n && w_dec.cols() == m, "sae: w_dec shape");
    require(static_cast<int>(b_dec.size()) == n &&
                static_cast<int>(b_out.size()) == n,
            "sae: bias shapes");
  }
};

template <typename T>
SAEModel<T> zero_sae(int n, int m) {
  SAEModel<T> s;
  s.n = n;
  s.m = m;
  s.w_enc = Tensor<T>({m, n});
  s.w_dec = Tensor<T>({n, m});
  s.b_dec = Tensor<T>({n});
  s.b_out = Tensor<T>({n});
  s.validate();
  return s;
}

template <typename T>
Tensor<T> sae_encode(const SAEModel<T>& s, const Tensor<T>& h) {
  require(static_cast<int>(h.size()) == s.n, "sae_encode: latent length");
  Tensor<T> z({s.m});
  for (int j = 0; j < s.m; ++j) {
    T acc = 0;
    const T* wrow = s.w_enc.data() + static_cast<std::size_t>(j) * s.n;
    for (int i = 0; i < s.n; ++i)
      acc = std::fma(wrow[i], h[static_cast<std::size_t>(i)] - s.b_dec[static_cast<std::size_t>(i)], acc);
    z[static_cast<std::size_t>(j)] = acc > T(0) ? acc : T(0);
  }
  return z;
}

// Rows of `hs` are encoded independently: [B x n] -> [B x m].
template <typename T>
Tensor<T> sae_encode_batch(const SAEModel<T>& s, const Tensor<T>& hs) {
  require(hs.cols() == s.n, "sae_encode_batch: latent length");
  return relu(matmul(sub_rowvec(hs, s.b_dec), transpose(s.w_enc)));
}

template <typename T>
Tensor<T> sae_decode(const SAEModel<T>& s, const Tensor<T>& z) {
  require(static_cast<int>(z.size()) == s.m, "sae_decode: code length");
  Tensor<T> h({s.n});
  for (int i = 0; i < s.n; ++i) {
    T acc = 0;
    const T* wrow = s.w_dec.data() + static_cast<std::size_t>(i) * s.m;
    for (int j = 0; j < s.m; ++j)
      acc = std::fma(wrow[j], z[static_cast<std::size_t>(j)], acc);
    h[static_cast<std::size_t>(i)] =
        s.subtract_output_bias ? acc - s.b_out[static_cast<std::size_t>(i)]
                               : acc + s.b_out[static_cast<std::size_t>(i)];
  }
  return h;
}

template <typename T>
struct SAETrainConfig {
  T lambda = static_cast<T>(1e-3);
  T lr = static_cast<T>(1e-3);
  int batch = 64;
  int steps = 1000;
  std::uint64_t seed = 0;
  std::vector<int> matryoshka_groups;  // empty -> plain loss; else ascending, last == m
  int dead_steps = 1000;  // reinit features inactive this many consecutive steps
  T adam_beta1 = static_cast<T>(0.9);
  T adam_beta2 = static_cast<T>(0.999);
  T adam_eps = static_cast<T>(1e-8);

  void validate(int m) const {
    require(lambda >= T(0), "sae train: lambda must be >= 0");
    require(batch > 0 && steps >= 0 && lr > T(0), "sae train: batch/steps/lr");
    if (!matryoshka_groups.empty()) {
      int prev = 0;
      for (int g : matryoshka_groups) {
        require(g > prev, "sae train: matryoshka groups must be ascending");
        prev = g;
      }
      require(matryoshka_groups.back() == m,
              "sae train: last matryoshka group must equal m");
    }
  }
};

template <typename T>
struct SAELossResult {
  T loss = 0;
  T recon = 0;  // mean-over-groups reconstruction term (per batch sum)
  T l1 = 0;     // ||z||_1 term before lambda
  Tensor<T> d_w_enc, d_w_dec, d_b_dec, d_b_out;
  Tensor<T> z;  // activations of the batch, [B x m]
};

// Loss and parameter gradients for a batch [B x n] via the autodiff tape.
// Per-sample losses are summed, then divided by B. With groups given, the
// reconstruction term is the mean over prefix reconstructions; the L1 term
// is applied once on the full code.
template <typename T>
SAELossResult<T> sae_loss_batch(const SAEModel<T>& s, const Tensor<T>& hs,
                                T lambda,
                                const std::vector<int>& groups = {}) {
  s.validate();
  require(lambda >= T(0), "sae_loss: lambda must be >= 0");
  require(hs.cols() == s.n, "sae_loss: latent length");
  const int batch = hs.rows();

  Tape<T> tp;
  NodeId h_in = tp.input(hs);
  NodeId we = tp.input(s.w_enc, true);
  NodeId wd = tp.input(s.w_dec, true);
  NodeId bd = tp.input(s.b_dec, true);
  NodeId bh = tp.input(s.b_out, true);

  NodeId pre = tp.sub_row(h_in, bd);
  NodeId z = tp.relu(tp.matmul(pre, tp.transpose(we)));

  std::vector<int> gs = groups.empty() ? std::vector<int>{s.m} : groups;
  NodeId recon_sum = -1;
  for (int g : gs) {
    NodeId zg = g == s.m ? z : tp.slice_cols(z, 0, g);
    NodeId wdg = g == s.m ? wd : tp.slice_cols(wd, 0, g);
    NodeId lin = tp.matmul(zg, tp.transpose(wdg));
    NodeId hhat = s.subtract_output_bias ? tp.sub_row(lin, bh) : tp.add_row(lin, bh);
    NodeId r = tp.sum_squares(tp.sub(h_in, hhat));
    recon_sum = recon_sum < 0 ? r : tp.add(recon_sum, r);
  }
  NodeId recon = tp.scale(recon_sum, T(1) / static_cast<T>(gs.size()));
  NodeId l1 = tp.sum_abs(z);
  NodeId loss =
      tp.scale(tp.add(recon, tp.scale(l1, lambda)), T(1) / static_cast<T>(batch));

  auto grads = tp.backward(loss, Tensor<T>::scalar(T(1)), {we, wd, bd, bh});
  SAELossResult<T> out;
  out.loss = tp.value(loss)[0];
  out.recon = tp.value(recon)[0];
  out.l1 = tp.value(l1)[0];
  out.d_w_enc = std::move(grads[0]);
  out.d_w_dec = std::move(grads[1]);
  out.d_b_dec = std::move(grads[2]);
  out.d_b_out = std::move(grads[3]);
  out.z = tp.value(z);
  return out;
}

template <typename T>
SAELossResult<T> sae_loss(const SAEModel<T>& s, const Tensor<T>& h, T lambda,
                          const std::vector<int>& groups = {}) {
  require(static_cast<int>(h.size()) == s.n, "sae_loss: latent length");
  return sae_loss_batch(s, h.reshaped({1, s.n}), lambda, groups);
}

namespace detail {

template <typename T>
void renorm_decoder_columns(SAEModel<T>& s) {
  for (int j = 0; j < s.m; ++j) {
    T nn = 0;
    for (int i = 0; i < s.n; ++i) {
      const T v = s.w_dec(i, j);
      nn = std::fma(v, v, nn);
    }
    const T norm = std::sqrt(nn);
    if (norm < static_cast<T>(1e-30)) continue;
    const T inv = T(1) / norm;
    for (int i = 0; i < s.n; ++i) s.w_dec(i, j) *= inv;
  }
}

template <typename T>
struct AdamState {
  Tensor<T> m, v;
  explicit AdamState(const Shape& shape)
      : m(Tensor<T>::zeros(shape)), v(Tensor<T>::zeros(shape)) {}
};

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& st,
               const SAETrainConfig<T>& cfg, int t) {
  const T b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const T bc1 = T(1) - std::pow(b1, static_cast<T>(t));
  const T bc2 = T(1) - std::pow(b2, static_cast<T>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    st.m[i] = b1 * st.m[i] + (T(1) - b1) * grad[i];
    st.v[i] = b2 * st.v[i] + (T(1) - b2) * grad[i] * grad[i];
    const T mhat = st.m[i] / bc1;
    const T vhat = st.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

}  // namespace detail

// Trains an SAE on a latent dataset [N x n]. Deterministic for a fixed seed:
// initialization, batch draws and updates all follow one RNG stream.
// Decoder columns start as random unit vectors with tied encoder rows.
// Features with no positive activation for `dead_steps` consecutive steps
// are reinitialized from the worst-reconstructed sample of the current batch.
template <typename T>
SAEModel<T> train_sae(const Tensor<T>& latents, int m,
                      const SAETrainConfig<T>& cfg) {
  if (latents.empty() || latents.rows() == 0)
    throw data_error("train_sae: empty dataset");
  const int n = latents.cols();
  cfg.validate(m);

  SAEModel<T> s = zero_sae<T>(n, m);
  Rng rng(cfg.seed);
  const T enc_scale = static_cast<T>(0.1);
  for (int j = 0; j < m; ++j) {
    T nn = 0;
    std::vector<T> col(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      col[static_cast<std::size_t>(i)] = static_cast<T>(rng.normal());
      nn = std::fma(col[static_cast<std::size_t>(i)], col[static_cast<std::size_t>(i)], nn);
    }
    const T inv = T(1) / std::sqrt(nn);
    for (int i = 0; i < n; ++i) {
      s.w_dec(i, j) = col[static_cast<std::size_t>(i)] * inv;
      s.w_enc(j, i) = col[static_cast<std::size_t>(i)] * inv * enc_scale;
    }
  }

  detail::AdamState<T> st_we(s.w_enc.shape()), st_wd(s.w_dec.shape()),
      st_bd(s.b_dec.shape()), st_bh(s.b_out.shape());
  std::vector<int> inactive(static_cast<std::size_t>(m), 0);
  const int nrows = latents.rows();

  for (int step = 1; step <= cfg.steps; ++step) {
    Tensor<T> batch({cfg.batch, n});
    for (int b = 0; b < cfg.batch; ++b) {
      const int row = rng.uniform_int(nrows);
      for (int i = 0; i < n; ++i) batch(b, i) = latents(row, i);
    }

    auto res = sae_loss_batch(s, batch, cfg.lambda, cfg.matryoshka_groups);
    detail::adam_step(s.w_enc, res.d_w_enc, st_we, cfg, step);
    detail::adam_step(s.w_dec, res.d_w_dec, st_wd, cfg, step);
    detail::adam_step(s.b_dec, res.d_b_dec, st_bd, cfg, step);
    detail::adam_step(s.b_out, res.d_b_out, st_bh, cfg, step);
    detail::renorm_decoder_columns(s);

    // Dead-feature bookkeeping.
    for (int j = 0; j < m; ++j) {
      bool active = false;
      for (int b = 0; b < cfg.batch && !active; ++b)
        active = res.z(b, j) > T(0);
      inactive[static_cast<std::size_t>(j)] =
          active ? 0 : inactive[static_cast<std::size_t>(j)] + 1;
    }
    int worst = -1;
    for (int j = 0; j < m; ++j) {
      if (inactive[static_cast<std::size_t>(j)] < cfg.dead_steps) continue;
      if (worst < 0) {
        // Highest-reconstruction-error sample in this batch.
        T worst_err = T(-1);
        for (int b = 0; b < cfg.batch; ++b) {
          Tensor<T> h({n});
          for (int i = 0; i < n; ++i) h[static_cast<std::size_t>(i)] = batch(b, i);
          Tensor<T> diff = sub(h, sae_decode(s, sae_encode(s, h)));
          const T err = dot(diff, diff);
          if (err > worst_err) {
            worst_err = err;
            worst = b;
          }
        }
      }
      Tensor<T> h({n});
      for (int i = 0; i < n; ++i) h[static_cast<std::size_t>(i)] = batch(worst, i);
      Tensor<T> resid = sub(h, sae_decode(s, sae_encode(s, h)));
      const T rn = norm2(resid);
      if (rn > static_cast<T>(1e-12)) {
        for (int i = 0; i < n; ++i) {
          s.w_dec(i, j) = resid[static_cast<std::size_t>(i)] / rn;
          s.w_enc(j, i) = resid[static_cast<std::size_t>(i)] / rn * enc_scale;
          st_wd.m(i, j) = st_wd.v(i, j) = T(0);
          st_we.m(j, i) = st_we.v(j, i) = T(0);
        }
      }
      inactive[static_cast<std::size_t>(j)] = 0;
    }
  }
  return s;
}

template <typename T>
struct FeatureNode {
  NodeId node = -1;
  T value = 0;
};

// Appends the encoder computation for feature k of token `token` at layer
// `layer` to a recorded forward tape and returns the scalar activation node.
// This is the differentiable target used by all attribution backends.
template <typename T>
FeatureNode<T> feature_activation(const SAEModel<T>& s, ForwardTape<T>& ft,
                                  int layer, int token, int k) {
  s.validate();
  require(layer >= 0 && layer < static_cast<int>(ft.h.size()),
          "feature_activation: layer out of range");
  require(token >= 0 && token < ft.cfg.tokens(),
          "feature_activation: token out of range");
  require(k >= 0 && k < s.m, "feature_activation: feature out of range");
  require(ft.latents(layer).cols() == s.n,
          "feature_activation: sae latent dim does not match model dim");

  Tape<T>& tp = ft.tape;
  NodeId h_row = tp.slice_rows(ft.h[static_cast<std::size_t>(layer)], token, token + 1);
  NodeId pre = tp.sub_row(h_row, tp.input(s.b_dec, true));
  NodeId z_row = tp.relu(tp.matmul(pre, tp.transpose(tp.input(s.w_enc, true))));
  FeatureNode<T> out;
  out.node = tp.pick(z_row, 0, k);
  out.value = tp.value(out.node)[0];
  return out;
}

}  // namespace cafe
