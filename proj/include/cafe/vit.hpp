#pragma once

// Small pre-norm vision transformer recorded on an autodiff tape:
// patchify -> linear embed (+CLS, +positional) -> depth x (LN, multi-head
// self-attention, residual; LN, GELU MLP, residual). Every intermediate
// needed for gradient or relevance backpropagation stays on the tape.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cafe/rng.hpp"
#include "cafe/tape.hpp"
#include "cafe/tensor.hpp"

namespace cafe {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int depth = 6;
  int heads = 4;
  int model_dim = 64;
  int mlp_dim = 128;
  bool use_cls_token = true;
  std::uint64_t seed = 0;

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int tokens() const { return n_patches() + (use_cls_token ? 1 : 0); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int head_dim() const { return model_dim / heads; }
  // Token index of patch p; CLS (when present) is token 0.
  int patch_token(int p) const { return p + (use_cls_token ? 1 : 0); }

  void validate() const {
    require(image_size > 0 && patch_size > 0 && channels > 0,
            "vit config: sizes must be positive");
    require(image_size % patch_size == 0,
            "vit config: patch_size must divide image_size");
    require(depth >= 0 && heads > 0 && model_dim > 0 && mlp_dim > 0,
            "vit config: depth/heads/dims invalid");
    require(model_dim % heads == 0,
            "vit config: model_dim must be divisible by heads");
  }
};

// Linear layers are stored [in x out] and applied as x * W + b.
template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, wk, wv, wo;  // [d x d]
  Tensor<T> bq, bk, bv, bo;  // [d]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1;  // [d x mlp], [mlp]
  Tensor<T> w2, b2;  // [mlp x d], [d]
};

template <typename T>
struct ViTWeights {
  ViTConfig cfg;
  Tensor<T> patch_embed;  // [patch_dim x d]
  Tensor<T> patch_bias;   // [d]
  Tensor<T> cls;          // [1 x d] when use_cls_token
  Tensor<T> pos;          // [tokens x d]
  std::vector<BlockWeights<T>> blocks;

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("patch_embed", patch_embed);
    fn("patch_bias", patch_bias);
    if (cfg.use_cls_token) fn("cls", cls);
    fn("pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blk" + std::to_string(i) + ".";
      BlockWeights<T>& b = blocks[i];
      fn(p + "ln1_g", b.ln1_g);
      fn(p + "ln1_b", b.ln1_b);
      fn(p + "wq", b.wq);
      fn(p + "wk", b.wk);
      fn(p + "wv", b.wv);
      fn(p + "wo", b.wo);
      fn(p + "bq", b.bq);
      fn(p + "bk", b.bk);
      fn(p + "bv", b.bv);
      fn(p + "bo", b.bo);
      fn(p + "ln2_g", b.ln2_g);
      fn(p + "ln2_b", b.ln2_b);
      fn(p + "w1", b.w1);
      fn(p + "b1", b.b1);
      fn(p + "w2", b.w2);
      fn(p + "b2", b.b2);
    }
  }
};

inline constexpr double kLayerNormEps = 1e-5;

// Zero-initialized weight set with the right shapes.
template <typename T>
ViTWeights<T> zero_vit(const ViTConfig& cfg) {
  cfg.validate();
  const int d = cfg.model_dim;
  ViTWeights<T> w;
  w.cfg = cfg;
  w.patch_embed = Tensor<T>({cfg.patch_dim(), d});
  w.patch_bias = Tensor<T>({d});
  if (cfg.use_cls_token) w.cls = Tensor<T>({1, d});
  w.pos = Tensor<T>({cfg.tokens(), d});
  w.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& b : w.blocks) {
    b.ln1_g = Tensor<T>::full({d}, T(1));
    b.ln1_b = Tensor<T>({d});
    b.wq = Tensor<T>({d, d});
    b.wk = Tensor<T>({d, d});
    b.wv = Tensor<T>({d, d});
    b.wo = Tensor<T>({d, d});
    b.bq = Tensor<T>({d});
    b.bk = Tensor<T>({d});
    b.bv = Tensor<T>({d});
    b.bo = Tensor<T>({d});
    b.ln2_g = Tensor<T>::full({d}, T(1));
    b.ln2_b = Tensor<T>({d});
    b.w1 = Tensor<T>({d, cfg.mlp_dim});
    b.b1 = Tensor<T>({cfg.mlp_dim});
    b.w2 = Tensor<T>({cfg.mlp_dim, d});
    b.b2 = Tensor<T>({d});
  }
  return w;
}

// Seeded random initialization. All projection matrices, positional and CLS
// embeddings draw from normal(0, 0.02/sqrt(model_dim)); biases start at 0,
// LayerNorm at gamma=1, beta=0. Draw order is fixed: patch_embed, cls, pos,
// then per block wq, wk, wv, wo, w1, w2.
template <typename T>
ViTWeights<T> init_vit(const ViTConfig& cfg) {
  ViTWeights<T> w = zero_vit<T>(cfg);
  Rng rng(cfg.seed);
  const double std_dev = 0.02 / std::sqrt(static_cast<double>(cfg.model_dim));
  auto fill = [&](Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<T>(rng.normal() * std_dev);
  };
  fill(w.patch_embed);
  if (cfg.use_cls_token) fill(w.cls);
  fill(w.pos);
  for (auto& b : w.blocks) {
    fill(b.wq);
    fill(b.wk);
    fill(b.wv);
    fill(b.wo);
    fill(b.w1);
    fill(b.w2);
  }
  return w;
}

// Flat pixel index for each (patch, element). Patches run row-major over the
// grid; within a patch, elements run channel-major, then pixel row, then
// pixel column.
inline std::shared_ptr<const std::vector<int>> patch_index_map(int channels,
                                                               int height,
                                                               int width,
                                                               int patch) {
  require(height % patch == 0 && width % patch == 0,
          "patchify: patch size must divide image dims");
  const int gh = height / patch, gw = width / patch;
  auto map = std::make_shared<std::vector<int>>();
  map->reserve(static_cast<std::size_t>(gh) * gw * channels * patch * patch);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px)
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            map->push_back((c * height + py * patch + y) * width + px * patch + x);
  return map;
}

// [C,H,W] image -> [P x C*patch*patch] matrix of flattened patches.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, int patch) {
  require(image.ndim() == 3, "patchify expects a [C,H,W] image");
  const int c = image.dim(0), h = image.dim(1), wdt = image.dim(2);
  auto map = patch_index_map(c, h, wdt, patch);
  const int p = (h / patch) * (wdt / patch);
  Tensor<T> out({p, c * patch * patch});
  for (std::size_t e = 0; e < out.size(); ++e)
    out[e] = image[static_cast<std::size_t>((*map)[e])];
  return out;
}

template <typename T>
struct ForwardTape {
  Tape<T> tape;
  ViTConfig cfg;
  NodeId image_node = -1;
  std::vector<NodeId> h;                   // token latents per layer, h[0] = embeddings
  std::vector<std::vector<NodeId>> probs;  // attention probabilities [layer][head]

  const Tensor<T>& latents(int layer) const {
    require(layer >= 0 && layer < static_cast<int>(h.size()),
            "layer index out of range");
    return tape.value(h[static_cast<std::size_t>(layer)]);
  }
  int layers() const { return static_cast<int>(h.size()) - 1; }
};

// Runs the encoder on one [C,H,W] image, recording everything on a tape.
// `upto_layer` < 0 runs all blocks; otherwise only the first `upto_layer`
// blocks execute (enough when the consumer only reads latents there).
template <typename T>
ForwardTape<T> forward(const ViTWeights<T>& w, const Tensor<T>& image,
                       int upto_layer = -1) {
  const ViTConfig& cfg = w.cfg;
  cfg.validate();
  require(image.ndim() == 3 && image.dim(0) == cfg.channels &&
              image.dim(1) == cfg.image_size && image.dim(2) == cfg.image_size,
          "forward: image dims do not match config");
  image.require_finite("forward input image");
  const int depth = upto_layer < 0 ? cfg.depth : std::min(upto_layer, cfg.depth);
  const int d = cfg.model_dim, hd = cfg.head_dim();

  ForwardTape<T> ft;
  ft.cfg = cfg;
  Tape<T>& tp = ft.tape;

  const std::size_t n_pix = image.size();
  ft.image_node = tp.input(image.reshaped({1, static_cast<int>(n_pix)}));
  auto pmap = patch_index_map(cfg.channels, cfg.image_size, cfg.image_size,
                              cfg.patch_size);
  NodeId x = tp.gather(ft.image_node, pmap, {cfg.n_patches(), cfg.patch_dim()});
  x = tp.matmul(x, tp.input(w.patch_embed, true));
  x = tp.add_row(x, tp.input(w.patch_bias, true));
  if (cfg.use_cls_token) x = tp.concat_rows(tp.input(w.cls, true), x);
  NodeId hcur = tp.add(x, tp.input(w.pos, true));
  ft.h.push_back(hcur);

  const T ln_eps = static_cast<T>(kLayerNormEps);
  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (int l = 0; l < depth; ++l) {
    const BlockWeights<T>& b = w.blocks[static_cast<std::size_t>(l)];
    NodeId ln1 = tp.layer_norm(hcur, tp.input(b.ln1_g, true),
                               tp.input(b.ln1_b, true), ln_eps);
    NodeId q = tp.add_row(tp.matmul(ln1, tp.input(b.wq, true)), tp.input(b.bq, true));
    NodeId k = tp.add_row(tp.matmul(ln1, tp.input(b.wk, true)), tp.input(b.bk, true));
    NodeId v = tp.add_row(tp.matmul(ln1, tp.input(b.wv, true)), tp.input(b.bv, true));

    std::vector<NodeId> layer_probs;
    NodeId heads_out = -1;
    for (int hh = 0; hh < cfg.heads; ++hh) {
      const int c0 = hh * hd, c1 = (hh + 1) * hd;
      NodeId qh = tp.slice_cols(q, c0, c1);
      NodeId kh = tp.slice_cols(k, c0, c1);
      NodeId vh = tp.slice_cols(v, c0, c1);
      NodeId scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), attn_scale);
      NodeId p = tp.softmax_rows(scores);
      layer_probs.push_back(p);
      NodeId oh = tp.matmul(p, vh);
      heads_out = hh == 0 ? oh : tp.concat_cols(heads_out, oh);
    }
    ft.probs.push_back(std::move(layer_probs));

    NodeId attn = tp.add_row(tp.matmul(heads_out, tp.input(b.wo, true)),
                             tp.input(b.bo, true));
    hcur = tp.add(hcur, attn);

    NodeId ln2 = tp.layer_norm(hcur, tp.input(b.ln2_g, true),
                               tp.input(b.ln2_b, true), ln_eps);
    NodeId m1 = tp.gelu(tp.add_row(tp.matmul(ln2, tp.input(b.w1, true)),
                                   tp.input(b.b1, true)));
    NodeId m2 = tp.add_row(tp.matmul(m1, tp.input(b.w2, true)),
                           tp.input(b.b2, true));
    hcur = tp.add(hcur, m2);
    ft.h.push_back(hcur);
  }
  (void)d;
  return ft;
}

// Exact reverse-mode gradient of a recorded scalar node with respect to the
// input pixels, reshaped back to [C,H,W].
template <typename T>
Tensor<T> input_gradient(const ForwardTape<T>& ft, NodeId target) {
  require(ft.tape.value(target).size() == 1, "input_gradient target must be scalar");
  Tensor<T> g = ft.tape.grad(target, ft.image_node);
  return g.reshaped({ft.cfg.channels, ft.cfg.image_size, ft.cfg.image_size});
}

// Value-only forward: token latents at `layer` without recording a tape.
// Calls the same kernels in the same order as forward(), so results are
// bit-identical to the recorded path; used where only z values are needed
// (coalition evaluations, insertion sweeps).
template <typename T>
Tensor<T> forward_latents(const ViTWeights<T>& w, const Tensor<T>& image,
                          int layer) {
  const ViTConfig& cfg = w.cfg;
  cfg.validate();
  require(layer >= 0 && layer <= cfg.depth, "forward_latents: layer out of range");
  require(image.ndim() == 3 && image.dim(0) == cfg.channels &&
              image.dim(1) == cfg.image_size && image.dim(2) == cfg.image_size,
          "forward_latents: image dims do not match config");
  image.require_finite("forward input image");
  const int hd = cfg.head_dim();

  Tensor<T> x = patchify(image, cfg.patch_size);
  x = add_rowvec(matmul(x, w.patch_embed), w.patch_bias);
  Tensor<T> h({cfg.tokens(), cfg.model_dim});
  int row0 = 0;
  if (cfg.use_cls_token) {
    for (int j = 0; j < cfg.model_dim; ++j) h(0, j) = w.cls(0, j);
    row0 = 1;
  }
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < cfg.model_dim; ++j) h(i + row0, j) = x(i, j);
  h = add(h, w.pos);

  const T ln_eps = static_cast<T>(kLayerNormEps);
  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (int l = 0; l < layer; ++l) {
    const BlockWeights<T>& b = w.blocks[static_cast<std::size_t>(l)];
    Tensor<T> ln1 = layer_norm(h, b.ln1_g, b.ln1_b, ln_eps);
    Tensor<T> q = add_rowvec(matmul(ln1, b.wq), b.bq);
    Tensor<T> k = add_rowvec(matmul(ln1, b.wk), b.bk);
    Tensor<T> v = add_rowvec(matmul(ln1, b.wv), b.bv);
    Tensor<T> heads_out({cfg.tokens(), cfg.model_dim});
    for (int hh = 0; hh < cfg.heads; ++hh) {
      const int c0 = hh * hd;
      Tensor<T> qh({cfg.tokens(), hd}), kh({cfg.tokens(), hd}), vh({cfg.tokens(), hd});
      for (int i = 0; i < cfg.tokens(); ++i)
        for (int j = 0; j < hd; ++j) {
          qh(i, j) = q(i, c0 + j);
          kh(i, j) = k(i, c0 + j);
          vh(i, j) = v(i, c0 + j);
        }
      Tensor<T> p = softmax_rows(scale(matmul(qh, transpose(kh)), attn_scale));
      Tensor<T> oh = matmul(p, vh);
      for (int i = 0; i < cfg.tokens(); ++i)
        for (int j = 0; j < hd; ++j) heads_out(i, c0 + j) = oh(i, j);
    }
    h = add(h, add_rowvec(matmul(heads_out, b.wo), b.bo));
    Tensor<T> ln2 = layer_norm(h, b.ln2_g, b.ln2_b, ln_eps);
    Tensor<T> m1 = gelu(add_rowvec(matmul(ln2, b.w1), b.b1));
    h = add(h, add_rowvec(matmul(m1, b.w2), b.b2));
  }
  return h;
}

}  // namespace cafe
