#pragma once

// Ground-truth harness: transformer weights wired by hand so that chosen
// "router" attention heads copy content from known source patches S to a
// sink token t, while every other token attends a dead target (the CLS
// token, whose content is zero). A paired SAE reads the routed direction, so
// feature k fires at the sink although its causal evidence sits at S. That
// gives attribution methods a model with an exactly known answer.
//
// Construction sketch, all in an orthonormal basis of R^d:
//   - one basis vector per token ("address"), carried by the positional
//     embedding with magnitude alpha
//   - one basis vector per feature ("content"), produced by the patch
//     embedding from an orthonormal pixel pattern per feature
//   - one basis vector per routed feature ("value direction" v)
// The router head's Q/K columns read addresses, so attention logits are
// saturated (margin ~10): the sink matches its sources, everyone else
// matches CLS. V reads the feature's content, the output projection writes
// strength * v. All basis vectors are orthogonal to the all-ones direction,
// which makes LayerNorm a pure per-token rescaling on this model.
//
// Thresholds are calibrated by a probe forward pass at build time, so the
// SAE fires at ~50% headroom on painted images and not at all otherwise.

#include <cstdint>
#include <string>
#include <vector>

#include "cafe/erf.hpp"
#include "cafe/rng.hpp"
#include "cafe/sae.hpp"
#include "cafe/tensor.hpp"
#include "cafe/vit.hpp"

namespace cafe {

struct PlantedRouterSpec {
  std::vector<int> sources;        // patch indices
  int sink = 0;                    // token index (may be CLS)
  std::vector<double> direction;   // optional explicit unit v in R^d
  int head = 0;
  double strength = 4.0;
};

struct PlantedFeatureSpec {
  bool non_local = true;
  std::vector<int> sources;       // patches painted with this feature's pattern
  int sink_token = -1;            // required when non_local
  int router_block = 0;
  int head = 0;
  double strength = 4.0;
  std::vector<double> direction;  // optional explicit v (non_local only)
};

template <typename T>
struct PlantedModel {
  ViTWeights<T> weights;
  SAEModel<T> sae;

  struct Feature {
    int index = 0;  // SAE feature row
    bool non_local = false;
    std::vector<int> sources;
    int sink_token = -1;
    int router_block = 0;
    std::vector<T> direction;  // the vector the SAE row reads
  };
  std::vector<Feature> features;

  Tensor<T> patterns;  // [n_features x patch_dim], pixel pattern per feature
  T paint_beta = T(1);

  // Ground truth for the single-router case.
  const std::vector<int>& ground_truth() const { return features.at(0).sources; }
};

namespace detail {

// Byte-grid quantization: the in-memory image equals what a PPM round-trip
// would produce.
template <typename T>
T quantize_byte(T v) {
  const T c = std::min(T(1), std::max(T(0), v));
  return std::floor(c * T(255) + T(0.5)) / T(255);
}

template <typename T>
void gram_schmidt(Tensor<T>& v, const std::vector<Tensor<T>>& basis) {
  for (const Tensor<T>& b : basis) {
    const T p = dot(v, b);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
  }
}

template <typename T>
Tensor<T> fresh_orthonormal(Rng& rng, const std::vector<Tensor<T>>& basis, int dim) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Tensor<T> v({dim});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(rng.normal());
    gram_schmidt(v, basis);
    const T nn = norm2(v);
    if (nn > static_cast<T>(1e-4)) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] /= nn;
      return v;
    }
  }
  throw data_error("planted: failed to draw an orthonormal vector");
}

}  // namespace detail

// Background noise plus each feature's sources painted with its pattern.
// Pixels are quantized to the byte grid.
template <typename T>
Tensor<T> paint_planted_image(const ViTConfig& cfg,
                              const std::vector<typename PlantedModel<T>::Feature>& features,
                              const Tensor<T>& patterns, T beta, Rng& rng) {
  Tensor<T> img({cfg.channels, cfg.image_size, cfg.image_size});
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = detail::quantize_byte(static_cast<T>(rng.uniform()));
  auto map = patch_index_map(cfg.channels, cfg.image_size, cfg.image_size,
                             cfg.patch_size);
  const int pd = cfg.patch_dim();
  for (std::size_t f = 0; f < features.size(); ++f) {
    for (int src : features[f].sources) {
      for (int e = 0; e < pd; ++e) {
        const int flat = (*map)[static_cast<std::size_t>(src) * pd + e];
        img[static_cast<std::size_t>(flat)] = detail::quantize_byte(
            T(0.5) + beta * patterns(static_cast<int>(features[f].index), e));
      }
    }
  }
  return img;
}

template <typename T>
Tensor<T> make_planted_image(const PlantedModel<T>& m, Rng& rng) {
  return paint_planted_image<T>(m.weights.cfg, m.features, m.patterns,
                                m.paint_beta, rng);
}

// Replaces the listed patches with zeros.
template <typename T>
Tensor<T> blank_patches(const ViTConfig& cfg, const Tensor<T>& img,
                        const std::vector<int>& patches) {
  auto map = patch_index_map(cfg.channels, cfg.image_size, cfg.image_size,
                             cfg.patch_size);
  const int pd = cfg.patch_dim();
  Tensor<T> out = img;
  for (int p : patches)
    for (int e = 0; e < pd; ++e)
      out[static_cast<std::size_t>((*map)[static_cast<std::size_t>(p) * pd + e])] = T(0);
  return out;
}

// Builds weights plus SAE for a set of planted features sharing one model.
template <typename T>
PlantedModel<T> build_planted_suite(const ViTConfig& cfg,
                                    const std::vector<PlantedFeatureSpec>& specs,
                                    std::uint64_t seed) {
  cfg.validate();
  require(cfg.use_cls_token, "planted models need a CLS token as dead attractor");
  require(!specs.empty(), "planted: need at least one feature");
  const int d = cfg.model_dim, tokens = cfg.tokens(), pd = cfg.patch_dim();
  const int dh = cfg.head_dim();
  const int nf = static_cast<int>(specs.size());

  int n_nonlocal = 0;
  std::vector<char> used_patch(static_cast<std::size_t>(cfg.n_patches()), 0);
  for (const PlantedFeatureSpec& f : specs) {
    require(!f.sources.empty(), "planted: every feature needs sources");
    for (int s : f.sources) {
      require(s >= 0 && s < cfg.n_patches(), "planted: source patch out of range");
      require(!used_patch[static_cast<std::size_t>(s)],
              "planted: source patches must be disjoint across features");
      used_patch[static_cast<std::size_t>(s)] = 1;
    }
    if (f.non_local) {
      ++n_nonlocal;
      require(f.sink_token >= 0 && f.sink_token < tokens,
              "planted: sink token out of range");
      for (int s : f.sources)
        require(cfg.patch_token(s) != f.sink_token,
                "planted: sink must not be one of its sources");
      require(f.router_block >= 0 && f.router_block < cfg.depth,
              "planted: router block out of range");
      require(f.head >= 0 && f.head < cfg.heads, "planted: head out of range");
    }
  }
  for (const PlantedFeatureSpec& f : specs)
    if (f.non_local && f.sink_token > 0)
      require(!used_patch[static_cast<std::size_t>(f.sink_token - 1)],
              "planted: sink patch must not be painted");
  require(1 + n_nonlocal + nf + tokens <= d,
          "planted: model_dim too small for tokens + features");

  Rng rng(seed);

  // Orthonormal basis: all-ones direction first (reserved, keeps LayerNorm
  // means at zero for everything built from the rest), then explicit value
  // directions, then generated vectors.
  std::vector<Tensor<T>> basis;
  {
    Tensor<T> ones = Tensor<T>::full({d}, T(1) / std::sqrt(static_cast<T>(d)));
    basis.push_back(std::move(ones));
  }
  std::vector<int> vdir_ix(static_cast<std::size_t>(nf), -1);
  for (int f = 0; f < nf; ++f) {
    const PlantedFeatureSpec& sp = specs[static_cast<std::size_t>(f)];
    if (!sp.non_local || sp.direction.empty()) continue;
    require(static_cast<int>(sp.direction.size()) == d,
            "planted: direction length must equal model_dim");
    Tensor<T> v({d});
    for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] = static_cast<T>(sp.direction[static_cast<std::size_t>(i)]);
    require(std::abs(norm2(v) - T(1)) < static_cast<T>(1e-4),
            "planted: direction must be unit norm");
    Tensor<T> check = v;
    detail::gram_schmidt(check, basis);
    if (norm2(check) < static_cast<T>(1e-3))
      throw data_error("planted: direction conflicts with reserved subspace");
    vdir_ix[static_cast<std::size_t>(f)] = static_cast<int>(basis.size());
    basis.push_back(std::move(v));
  }
  // NOTE: an explicit direction is used exactly as given; remaining basis
  // vectors are orthogonalized against it.
  for (int f = 0; f < nf; ++f) {
    if (!specs[static_cast<std::size_t>(f)].non_local ||
        vdir_ix[static_cast<std::size_t>(f)] >= 0)
      continue;
    vdir_ix[static_cast<std::size_t>(f)] = static_cast<int>(basis.size());
    basis.push_back(detail::fresh_orthonormal(rng, basis, d));
  }
  std::vector<int> cdir_ix(static_cast<std::size_t>(nf));
  for (int f = 0; f < nf; ++f) {
    cdir_ix[static_cast<std::size_t>(f)] = static_cast<int>(basis.size());
    basis.push_back(detail::fresh_orthonormal(rng, basis, d));
  }
  std::vector<int> addr_ix(static_cast<std::size_t>(tokens));
  for (int t = 0; t < tokens; ++t) {
    addr_ix[static_cast<std::size_t>(t)] = static_cast<int>(basis.size());
    basis.push_back(detail::fresh_orthonormal(rng, basis, d));
  }

  // Pixel patterns, orthonormal and orthogonal to the all-ones pixel vector
  // so painting around 0.5 shifts no other channel.
  std::vector<Tensor<T>> pat_basis;
  pat_basis.push_back(Tensor<T>::full({pd}, T(1) / std::sqrt(static_cast<T>(pd))));
  Tensor<T> patterns({nf, pd});
  for (int f = 0; f < nf; ++f) {
    Tensor<T> a = detail::fresh_orthonormal(rng, pat_basis, pd);
    for (int e = 0; e < pd; ++e) patterns(f, e) = a[static_cast<std::size_t>(e)];
    pat_basis.push_back(std::move(a));
  }

  // Gains. Addresses dominate LayerNorm variance, so attention logits are
  // stable across image content; margins between matched and unmatched
  // logits come out near 10.
  const T alpha = T(8);        // address magnitude in the positional embedding
  const T gain_route_q = T(1.5);
  const T gain_route_k = T(1);
  const T gain_dead = T(0.8);  // every token's pull toward CLS
  const T gain_value = T(1);
  const T gain_embed = T(1);

  ViTWeights<T> w = zero_vit<T>(cfg);
  for (int f = 0; f < nf; ++f) {
    const Tensor<T>& c = basis[static_cast<std::size_t>(cdir_ix[static_cast<std::size_t>(f)])];
    for (int e = 0; e < pd; ++e)
      for (int i = 0; i < d; ++i)
        w.patch_embed(e, i) += patterns(f, e) * gain_embed * c[static_cast<std::size_t>(i)];
  }
  for (int t = 0; t < tokens; ++t) {
    const Tensor<T>& a = basis[static_cast<std::size_t>(addr_ix[static_cast<std::size_t>(t)])];
    for (int i = 0; i < d; ++i) w.pos(t, i) = alpha * a[static_cast<std::size_t>(i)];
  }

  // Router heads. Channel 0 of a router head is the dead attractor; routed
  // features take channels 1.. in declaration order.
  std::vector<std::vector<int>> routed(static_cast<std::size_t>(cfg.depth * cfg.heads));
  for (int f = 0; f < nf; ++f) {
    const PlantedFeatureSpec& sp = specs[static_cast<std::size_t>(f)];
    if (!sp.non_local) continue;
    routed[static_cast<std::size_t>(sp.router_block * cfg.heads + sp.head)].push_back(f);
  }
  Tensor<T> addr_sum({d});
  for (int t = 0; t < tokens; ++t) {
    const Tensor<T>& a = basis[static_cast<std::size_t>(addr_ix[static_cast<std::size_t>(t)])];
    for (int i = 0; i < d; ++i) addr_sum[static_cast<std::size_t>(i)] += a[static_cast<std::size_t>(i)];
  }
  for (int blk = 0; blk < cfg.depth; ++blk) {
    for (int hh = 0; hh < cfg.heads; ++hh) {
      const std::vector<int>& fs = routed[static_cast<std::size_t>(blk * cfg.heads + hh)];
      if (fs.empty()) continue;
      require(static_cast<int>(fs.size()) + 1 <= dh,
              "planted: too many routed features for one head");
      BlockWeights<T>& b = w.blocks[static_cast<std::size_t>(blk)];
      const int off = hh * dh;
      const Tensor<T>& cls_addr = basis[static_cast<std::size_t>(addr_ix[0])];
      for (int i = 0; i < d; ++i) {
        b.wq(i, off) = gain_dead * addr_sum[static_cast<std::size_t>(i)];
        b.wk(i, off) = cls_addr[static_cast<std::size_t>(i)];
      }
      for (std::size_t j = 0; j < fs.size(); ++j) {
        const int f = fs[j];
        const PlantedFeatureSpec& sp = specs[static_cast<std::size_t>(f)];
        const int ch = off + 1 + static_cast<int>(j);
        const Tensor<T>& sink_addr =
            basis[static_cast<std::size_t>(addr_ix[static_cast<std::size_t>(sp.sink_token)])];
        Tensor<T> src_addr({d});
        for (int s : sp.sources) {
          const Tensor<T>& a = basis[static_cast<std::size_t>(
              addr_ix[static_cast<std::size_t>(cfg.patch_token(s))])];
          for (int i = 0; i < d; ++i)
            src_addr[static_cast<std::size_t>(i)] += a[static_cast<std::size_t>(i)];
        }
        const Tensor<T>& c = basis[static_cast<std::size_t>(cdir_ix[static_cast<std::size_t>(f)])];
        const Tensor<T>& v = basis[static_cast<std::size_t>(vdir_ix[static_cast<std::size_t>(f)])];
        for (int i = 0; i < d; ++i) {
          b.wq(i, ch) = gain_route_q * sink_addr[static_cast<std::size_t>(i)];
          b.wk(i, ch) = gain_route_k * src_addr[static_cast<std::size_t>(i)];
          b.wv(i, ch) = gain_value * c[static_cast<std::size_t>(i)];
          b.wo(ch, i) = static_cast<T>(sp.strength) * v[static_cast<std::size_t>(i)];
        }
      }
    }
  }

  PlantedModel<T> model;
  model.weights = std::move(w);
  model.patterns = std::move(patterns);
  model.paint_beta = T(1);
  for (int f = 0; f < nf; ++f) {
    const PlantedFeatureSpec& sp = specs[static_cast<std::size_t>(f)];
    typename PlantedModel<T>::Feature feat;
    feat.index = f;
    feat.non_local = sp.non_local;
    feat.sources = sp.sources;
    feat.sink_token = sp.non_local ? sp.sink_token : -1;
    feat.router_block = sp.non_local ? sp.router_block : -1;
    const Tensor<T>& dir = basis[static_cast<std::size_t>(
        sp.non_local ? vdir_ix[static_cast<std::size_t>(f)]
                     : cdir_ix[static_cast<std::size_t>(f)])];
    feat.direction.assign(dir.data(), dir.data() + dir.size());
    model.features.push_back(std::move(feat));
  }

  // Threshold calibration: one probe image with everything painted; each
  // feature's bias eats half of its probe pre-activation.
  Rng probe_rng = rng.fork(0xca11b);
  Tensor<T> probe = paint_planted_image<T>(cfg, model.features, model.patterns,
                                           model.paint_beta, probe_rng);
  Tensor<T> h = forward_latents(model.weights, probe, cfg.depth);
  const int m_feat = std::max(2 * d, nf + 1);
  SAEModel<T> sae = zero_sae<T>(d, m_feat);
  for (int f = 0; f < nf; ++f) {
    const typename PlantedModel<T>::Feature& feat = model.features[static_cast<std::size_t>(f)];
    const int tok = feat.non_local ? feat.sink_token : cfg.patch_token(feat.sources[0]);
    T pre = 0;
    for (int i = 0; i < d; ++i)
      pre = std::fma(h(tok, i), feat.direction[static_cast<std::size_t>(i)], pre);
    if (!(pre > static_cast<T>(1e-3)))
      throw data_error("planted: probe activation not positive for feature " +
                       std::to_string(f));
    const T theta = pre / T(2);
    for (int i = 0; i < d; ++i) {
      sae.w_enc(f, i) = feat.direction[static_cast<std::size_t>(i)];
      sae.w_dec(i, f) = feat.direction[static_cast<std::size_t>(i)];
      sae.b_dec[static_cast<std::size_t>(i)] += theta * feat.direction[static_cast<std::size_t>(i)];
    }
  }
  // Remaining decoder columns filled with unit vectors to keep the
  // unit-column invariant; their encoder rows stay zero (dead features).
  for (int j = nf; j < m_feat; ++j) sae.w_dec(j % d, j) = T(1);
  model.sae = std::move(sae);
  return model;
}

// Single-router build per the narrow interface: one non-local feature, its
// ground-truth source set, and a paired SAE whose feature 0 reads v.
template <typename T>
PlantedModel<T> build_planted_router(const ViTConfig& cfg,
                                     const PlantedRouterSpec& spec,
                                     std::uint64_t seed = 0) {
  PlantedFeatureSpec f;
  f.non_local = true;
  f.sources = spec.sources;
  f.sink_token = spec.sink;
  f.router_block = 0;
  f.head = spec.head;
  f.strength = spec.strength;
  f.direction = spec.direction;
  return build_planted_suite<T>(cfg, {f}, seed);
}

// Random disjoint geometry for a mixed suite: every non-local feature's
// sources sit at Chebyshev distance >= min_dist from its sink patch.
inline std::vector<PlantedFeatureSpec> random_planted_specs(
    Rng& rng, const ViTConfig& cfg, int n_nonlocal, int n_local,
    int sources_per_feature, int min_dist = 2, bool staggered_routers = false) {
  const int grid = cfg.grid(), P = cfg.n_patches();
  require(n_nonlocal >= 0 && n_local >= 0 && sources_per_feature >= 1,
          "planted spec counts invalid");
  std::vector<char> used(static_cast<std::size_t>(P), 0);
  auto take_free = [&](auto&& pred) -> int {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const int p = rng.uniform_int(P);
      if (!used[static_cast<std::size_t>(p)] && pred(p)) {
        used[static_cast<std::size_t>(p)] = 1;
        return p;
      }
    }
    throw data_error("planted: could not place patches (grid too crowded)");
  };
  std::vector<PlantedFeatureSpec> specs;
  for (int f = 0; f < n_nonlocal + n_local; ++f) {
    PlantedFeatureSpec sp;
    sp.non_local = f < n_nonlocal;
    if (sp.non_local) {
      const int sink_patch = take_free([](int) { return true; });
      sp.sink_token = cfg.patch_token(sink_patch);
      const int sr = sink_patch / grid, sc = sink_patch % grid;
      for (int s = 0; s < sources_per_feature; ++s)
        sp.sources.push_back(take_free([&](int p) {
          const int dr = std::abs(p / grid - sr), dc = std::abs(p % grid - sc);
          return std::max(dr, dc) >= min_dist;
        }));
      sp.router_block = staggered_routers ? f % cfg.depth : 0;
    } else {
      sp.sources.push_back(take_free([](int) { return true; }));
    }
    specs.push_back(std::move(sp));
  }
  return specs;
}

template <typename T>
struct PlantedCheck {
  T min_source_blank_drop = 0;  // min over features/images, want >= 0.9
  T max_offpath_effect = 0;     // blanking one unrelated patch, want <= 0.05
  T max_sink_perturb = 0;       // rerolling the sink patch pixels, want <= 0.1
  bool pass() const {
    return min_source_blank_drop >= static_cast<T>(0.9) &&
           max_offpath_effect <= static_cast<T>(0.05) &&
           max_sink_perturb <= static_cast<T>(0.1);
  }
};

// Ablation oracle for the construction above, run on freshly painted images.
template <typename T>
PlantedCheck<T> verify_planted(const PlantedModel<T>& m, int n_images,
                               std::uint64_t seed) {
  const ViTConfig& cfg = m.weights.cfg;
  Rng rng(seed);
  PlantedCheck<T> chk;
  chk.min_source_blank_drop = T(1);
  auto map = patch_index_map(cfg.channels, cfg.image_size, cfg.image_size,
                             cfg.patch_size);
  const int pd = cfg.patch_dim();

  for (int im = 0; im < n_images; ++im) {
    Tensor<T> img = make_planted_image(m, rng);
    for (const auto& feat : m.features) {
      if (!feat.non_local) continue;
      TargetDesc t;
      t.layer = cfg.depth;
      t.token = feat.sink_token;
      t.feature = feat.index;
      const T z0 = feature_value(m.weights, m.sae, img, t);
      if (!(z0 > T(0)))
        throw data_error("planted verify: feature does not fire on its image");

      const T z_blank = feature_value(m.weights, m.sae,
                                      blank_patches(cfg, img, feat.sources), t);
      chk.min_source_blank_drop =
          std::min(chk.min_source_blank_drop, (z0 - z_blank) / z0);

      // One unrelated patch per image keeps this oracle linear in P.
      std::vector<char> related(static_cast<std::size_t>(cfg.n_patches()), 0);
      for (const auto& f2 : m.features)
        for (int s : f2.sources) related[static_cast<std::size_t>(s)] = 1;
      if (feat.sink_token > 0) related[static_cast<std::size_t>(feat.sink_token - 1)] = 1;
      int off = -1;
      for (int attempt = 0; attempt < 256 && off < 0; ++attempt) {
        const int p = rng.uniform_int(cfg.n_patches());
        if (!related[static_cast<std::size_t>(p)]) off = p;
      }
      if (off >= 0) {
        const T z_off = feature_value(m.weights, m.sae,
                                      blank_patches(cfg, img, {off}), t);
        chk.max_offpath_effect =
            std::max(chk.max_offpath_effect, std::abs(z_off - z0) / z0);
      }

      if (feat.sink_token > 0) {
        Tensor<T> perturbed = img;
        const int sink_patch = feat.sink_token - 1;
        for (int e = 0; e < pd; ++e)
          perturbed[static_cast<std::size_t>(
              (*map)[static_cast<std::size_t>(sink_patch) * pd + e])] =
              detail::quantize_byte(static_cast<T>(rng.uniform()));
        const T z_pert = feature_value(m.weights, m.sae, perturbed, t);
        chk.max_sink_perturb =
            std::max(chk.max_sink_perturb, std::abs(z_pert - z0) / z0);
      }
    }
  }
  return chk;
}

}  // namespace cafe
