#pragma once

// Input-attribution backends mapping one SAE feature activation to signed
// per-patch scores. Four interchangeable methods behind one request/response
// pair: plain gradients, integrated gradients, KernelSHAP over patch
// coalitions, and attention-aware relevance propagation. An exact Shapley
// enumerator is included as the reference for KernelSHAP.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cafe/lrp.hpp"
#include "cafe/rng.hpp"
#include "cafe/sae.hpp"
#include "cafe/tensor.hpp"
#include "cafe/vit.hpp"

namespace cafe {

enum class Method { kGradient, kIntegratedGradients, kKernelShap, kAttnLrp };
enum class BaselinePolicy { kZero, kDatasetMean };
enum class Pooling { kSignedSum, kAbsSum, kL2 };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kGradient: return "gradient";
    case Method::kIntegratedGradients: return "ig";
    case Method::kKernelShap: return "kernelshap";
    case Method::kAttnLrp: return "attnlrp";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "gradient") return Method::kGradient;
  if (s == "ig") return Method::kIntegratedGradients;
  if (s == "kernelshap") return Method::kKernelShap;
  if (s == "attnlrp") return Method::kAttnLrp;
  throw usage_error("unknown attribution method: " + s);
}

struct TargetDesc {
  int layer = 0;
  int token = 0;
  int feature = 0;
  std::string image_id;

  bool same_triple(const TargetDesc& o) const {
    return layer == o.layer && feature == o.feature && image_id == o.image_id;
  }
};

template <typename T>
struct AttributionRequest {
  Method method = Method::kAttnLrp;
  TargetDesc target;
  Tensor<T> image;  // [C,H,W]
  BaselinePolicy baseline = BaselinePolicy::kZero;
  Tensor<T> baseline_image;  // required for kDatasetMean
  int ig_steps = 128;
  int shap_samples = 2048;
  T shap_ridge = static_cast<T>(1e-6);
  std::uint64_t shap_seed = 0;
  T lrp_eps = sizeof(T) == 8 ? static_cast<T>(1e-9) : static_cast<T>(1e-6);
  AttnRule attn_rule = AttnRule::kBilinear;
  Pooling pooling = Pooling::kSignedSum;
};

// One signed score per image patch; CLS is never part of the map.
template <typename T>
struct ERFMap {
  int grid = 0;  // patches per side
  std::vector<T> scores;
  TargetDesc target;
  std::string method;
  std::map<std::string, std::string> meta;

  int patches() const { return static_cast<int>(scores.size()); }
  int row_of(int p) const { return p / grid; }
  int col_of(int p) const { return p % grid; }
  void require_finite() const {
    for (T v : scores)
      if (!std::isfinite(v)) throw data_error("erf map: non-finite score");
  }
};

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace detail {

template <typename T>
Tensor<T> resolve_baseline(const AttributionRequest<T>& req) {
  if (req.baseline == BaselinePolicy::kZero)
    return Tensor<T>::zeros(req.image.shape());
  require(req.baseline_image.shape() == req.image.shape(),
          "baseline image shape does not match input image");
  return req.baseline_image;
}

// Patch indices -> flat pixel indices, grouped per patch.
template <typename T>
std::vector<std::vector<int>> patch_pixel_sets(const ViTConfig& cfg) {
  auto map = patch_index_map(cfg.channels, cfg.image_size, cfg.image_size,
                             cfg.patch_size);
  const int pd = cfg.patch_dim();
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(cfg.n_patches()));
  for (int p = 0; p < cfg.n_patches(); ++p)
    sets[static_cast<std::size_t>(p)].assign(map->begin() + static_cast<std::ptrdiff_t>(p) * pd,
                                             map->begin() + static_cast<std::ptrdiff_t>(p + 1) * pd);
  return sets;
}

template <typename T>
ERFMap<T> make_map(const ViTConfig& cfg, const AttributionRequest<T>& req) {
  ERFMap<T> m;
  m.grid = cfg.grid();
  m.scores.assign(static_cast<std::size_t>(cfg.n_patches()), T(0));
  m.target = req.target;
  m.method = method_name(req.method);
  return m;
}

// Pools pixel-level contributions into per-patch scores.
template <typename T>
void pool_pixels(ERFMap<T>& m, const ViTConfig& cfg, const Tensor<T>& pix,
                 Pooling pooling) {
  auto sets = patch_pixel_sets<T>(cfg);
  for (int p = 0; p < cfg.n_patches(); ++p) {
    T acc = 0;
    for (int flat : sets[static_cast<std::size_t>(p)]) {
      const T v = pix[static_cast<std::size_t>(flat)];
      switch (pooling) {
        case Pooling::kSignedSum: acc += v; break;
        case Pooling::kAbsSum: acc += std::abs(v); break;
        case Pooling::kL2: acc = std::fma(v, v, acc); break;
      }
    }
    m.scores[static_cast<std::size_t>(p)] =
        pooling == Pooling::kL2 ? std::sqrt(acc) : acc;
  }
}

}  // namespace detail

// Forward through the encoder up to the target layer plus the SAE feature
// node, recorded on one tape.
template <typename T>
struct FeatureEval {
  ForwardTape<T> ft;
  FeatureNode<T> feature;
};

template <typename T>
FeatureEval<T> eval_feature(const ViTWeights<T>& w, const SAEModel<T>& s,
                            const Tensor<T>& image, const TargetDesc& t) {
  FeatureEval<T> fe{forward(w, image, t.layer), {}};
  fe.feature = feature_activation(s, fe.ft, t.layer, t.token, t.feature);
  return fe;
}

// Value-only z_k, bit-identical to the recorded path.
template <typename T>
T feature_value(const ViTWeights<T>& w, const SAEModel<T>& s,
                const Tensor<T>& image, const TargetDesc& t) {
  Tensor<T> h = forward_latents(w, image, t.layer);
  require(t.token >= 0 && t.token < h.rows(), "feature_value: token out of range");
  Tensor<T> row({s.n});
  for (int i = 0; i < s.n; ++i) row[static_cast<std::size_t>(i)] = h(t.token, i);
  Tensor<T> z = sae_encode(s, row);
  require(t.feature >= 0 && t.feature < s.m, "feature_value: feature out of range");
  return z[static_cast<std::size_t>(t.feature)];
}

// image with the patches outside `keep` replaced by the baseline.
template <typename T>
Tensor<T> composite_patches(const ViTConfig& cfg, const Tensor<T>& image,
                            const Tensor<T>& baseline,
                            const std::vector<char>& keep) {
  require(static_cast<int>(keep.size()) == cfg.n_patches(),
          "composite_patches mask length");
  auto sets = detail::patch_pixel_sets<T>(cfg);
  Tensor<T> out = baseline;
  for (int p = 0; p < cfg.n_patches(); ++p) {
    if (!keep[static_cast<std::size_t>(p)]) continue;
    for (int flat : sets[static_cast<std::size_t>(p)])
      out[static_cast<std::size_t>(flat)] = image[static_cast<std::size_t>(flat)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient (gradient x input by default).

template <typename T>
ERFMap<T> attr_gradient(const ViTWeights<T>& w, const SAEModel<T>& s,
                        const AttributionRequest<T>& req) {
  FeatureEval<T> fe = eval_feature(w, s, req.image, req.target);
  Tensor<T> g = fe.ft.tape.grad(fe.feature.node, fe.ft.image_node);
  ERFMap<T> m = detail::make_map(w.cfg, req);

  Tensor<T> pix(g.shape());
  if (req.pooling == Pooling::kL2) {
    pix = g;  // raw-gradient norm pooling
  } else {
    for (std::size_t i = 0; i < g.size(); ++i)
      pix[i] = g[i] * req.image[i];
  }
  detail::pool_pixels(m, w.cfg, pix, req.pooling);

  T gnorm = 0;
  for (std::size_t i = 0; i < g.size(); ++i) gnorm = std::fma(g[i], g[i], gnorm);
  if (fe.feature.value == T(0) && gnorm == T(0))
    m.meta["zero_target"] = "1";
  m.meta["target_value"] = fmt_num(static_cast<double>(fe.feature.value));
  m.require_finite();
  return m;
}

// ---------------------------------------------------------------------------
// Integrated gradients: trapezoid rule on the straight path baseline -> input.

template <typename T>
ERFMap<T> attr_integrated_gradients(const ViTWeights<T>& w, const SAEModel<T>& s,
                                    const AttributionRequest<T>& req) {
  require(req.ig_steps >= 2, "integrated gradients needs ig_steps >= 2");
  Tensor<T> x0 = detail::resolve_baseline(req);
  const Tensor<T>& x = req.image;
  const int steps = req.ig_steps;

  Tensor<T> avg_grad(x.shape());
  T z_start = 0, z_end = 0;
  for (int i = 0; i < steps; ++i) {
    const T t = static_cast<T>(i) / static_cast<T>(steps - 1);
    Tensor<T> xi(x.shape());
    for (std::size_t e = 0; e < x.size(); ++e)
      xi[e] = x0[e] + t * (x[e] - x0[e]);
    FeatureEval<T> fe = eval_feature(w, s, xi, req.target);
    if (i == 0) z_start = fe.feature.value;
    if (i == steps - 1) z_end = fe.feature.value;
    Tensor<T> g = fe.ft.tape.grad(fe.feature.node, fe.ft.image_node);
    const T wgt = (i == 0 || i == steps - 1) ? T(0.5) : T(1);
    for (std::size_t e = 0; e < g.size(); ++e)
      avg_grad[e] = std::fma(wgt, g[e], avg_grad[e]);
  }
  const T inv = T(1) / static_cast<T>(steps - 1);
  Tensor<T> pix(x.shape());
  for (std::size_t e = 0; e < x.size(); ++e)
    pix[e] = (x[e] - x0[e]) * avg_grad[e] * inv;

  ERFMap<T> m = detail::make_map(w.cfg, req);
  detail::pool_pixels(m, w.cfg, pix, req.pooling);

  T total = 0;
  for (std::size_t e = 0; e < pix.size(); ++e) total += pix[e];
  const T delta = z_end - z_start;
  m.meta["ig_steps"] = std::to_string(steps);
  m.meta["z_input"] = fmt_num(static_cast<double>(z_end));
  m.meta["z_baseline"] = fmt_num(static_cast<double>(z_start));
  m.meta["completeness_residual"] =
      fmt_num(std::abs(static_cast<double>(total - delta)));
  m.require_finite();
  return m;
}

// ---------------------------------------------------------------------------
// Shapley machinery.

// Exact Shapley values over all 2^P coalitions. Refused for P > 12.
template <typename T>
std::vector<T> exact_shapley(const std::function<T(const std::vector<char>&)>& value_fn,
                             int n_players) {
  require(n_players >= 1 && n_players <= 12,
          "exact_shapley limited to 12 players");
  const int full = 1 << n_players;
  std::vector<T> values(static_cast<std::size_t>(full));
  std::vector<char> mask(static_cast<std::size_t>(n_players));
  for (int c = 0; c < full; ++c) {
    for (int i = 0; i < n_players; ++i) mask[static_cast<std::size_t>(i)] = (c >> i) & 1;
    values[static_cast<std::size_t>(c)] = value_fn(mask);
  }
  // weight for |C| = s, player outside C: s! (P-1-s)! / P!
  std::vector<double> fact(static_cast<std::size_t>(n_players) + 1, 1.0);
  for (int i = 1; i <= n_players; ++i)
    fact[static_cast<std::size_t>(i)] = fact[static_cast<std::size_t>(i - 1)] * i;
  std::vector<double> wt(static_cast<std::size_t>(n_players));
  for (int sct = 0; sct < n_players; ++sct)
    wt[static_cast<std::size_t>(sct)] = fact[static_cast<std::size_t>(sct)] *
                                        fact[static_cast<std::size_t>(n_players - 1 - sct)] /
                                        fact[static_cast<std::size_t>(n_players)];
  std::vector<T> phi(static_cast<std::size_t>(n_players), T(0));
  for (int i = 0; i < n_players; ++i) {
    double acc = 0;
    for (int c = 0; c < full; ++c) {
      if ((c >> i) & 1) continue;
      const int sct = __builtin_popcount(static_cast<unsigned>(c));
      acc += wt[static_cast<std::size_t>(sct)] *
             static_cast<double>(values[static_cast<std::size_t>(c | (1 << i))] -
                                 values[static_cast<std::size_t>(c)]);
    }
    phi[static_cast<std::size_t>(i)] = static_cast<T>(acc);
  }
  return phi;
}

inline double shapley_kernel_weight(int p, int s) {
  // (P-1) / (C(P,s) * s * (P-s))
  double comb = 1.0;
  for (int i = 1; i <= s; ++i) comb *= static_cast<double>(p - i + 1) / i;
  return (p - 1) / (comb * s * (p - s));
}

namespace detail {

// Weighted ridge least squares for KernelSHAP with the efficiency constraint
// eliminated exactly: phi_last = delta - sum(others).
template <typename T>
std::vector<T> solve_kernelshap(
    const std::vector<std::vector<char>>& masks, const std::vector<double>& wts,
    const std::vector<T>& vals, T v0, T delta, int p, T ridge) {
  const int u = p - 1;  // unknowns after elimination
  std::vector<double> a(static_cast<std::size_t>(u) * u, 0.0);
  std::vector<double> b(static_cast<std::size_t>(u), 0.0);
  std::vector<double> xrow(static_cast<std::size_t>(u));
  for (std::size_t r = 0; r < masks.size(); ++r) {
    const std::vector<char>& mask = masks[r];
    const double zl = mask[static_cast<std::size_t>(p - 1)] ? 1.0 : 0.0;
    for (int i = 0; i < u; ++i)
      xrow[static_cast<std::size_t>(i)] = (mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0) - zl;
    const double y = static_cast<double>(vals[r] - v0) - static_cast<double>(delta) * zl;
    const double wgt = wts[r];
    for (int i = 0; i < u; ++i) {
      const double wxi = wgt * xrow[static_cast<std::size_t>(i)];
      if (wxi == 0.0) continue;
      double* arow = a.data() + static_cast<std::size_t>(i) * u;
      for (int j = 0; j < u; ++j)
        arow[j] = std::fma(wxi, xrow[static_cast<std::size_t>(j)], arow[j]);
      b[static_cast<std::size_t>(i)] = std::fma(wxi, y, b[static_cast<std::size_t>(i)]);
    }
  }
  for (int i = 0; i < u; ++i)
    a[static_cast<std::size_t>(i) * u + i] += static_cast<double>(ridge);

  // Cholesky; the ridge keeps the system positive definite unless the
  // sampled design is degenerate, which is reported rather than patched.
  std::vector<double> l(a);
  for (int i = 0; i < u; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = l[static_cast<std::size_t>(i) * u + j];
      for (int k = 0; k < j; ++k)
        sum -= l[static_cast<std::size_t>(i) * u + k] * l[static_cast<std::size_t>(j) * u + k];
      if (i == j) {
        if (sum <= 0.0)
          throw data_error("kernelshap: singular system after ridge");
        l[static_cast<std::size_t>(i) * u + i] = std::sqrt(sum);
      } else {
        l[static_cast<std::size_t>(i) * u + j] = sum / l[static_cast<std::size_t>(j) * u + j];
      }
    }
  }
  std::vector<double> y(static_cast<std::size_t>(u));
  for (int i = 0; i < u; ++i) {
    double sum = b[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k)
      sum -= l[static_cast<std::size_t>(i) * u + k] * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] = sum / l[static_cast<std::size_t>(i) * u + i];
  }
  std::vector<double> phi(static_cast<std::size_t>(u));
  for (int i = u - 1; i >= 0; --i) {
    double sum = y[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < u; ++k)
      sum -= l[static_cast<std::size_t>(k) * u + i] * phi[static_cast<std::size_t>(k)];
    phi[static_cast<std::size_t>(i)] = sum / l[static_cast<std::size_t>(i) * u + i];
  }

  std::vector<T> out(static_cast<std::size_t>(p));
  double acc = 0;
  for (int i = 0; i < u; ++i) {
    out[static_cast<std::size_t>(i)] = static_cast<T>(phi[static_cast<std::size_t>(i)]);
    acc += phi[static_cast<std::size_t>(i)];
  }
  out[static_cast<std::size_t>(p - 1)] = static_cast<T>(static_cast<double>(delta) - acc);
  return out;
}

}  // namespace detail

// KernelSHAP over a caller-supplied value function. Coalitions of size
// 1..P-1 are enumerated exactly with kernel weights when the budget covers
// all of them; otherwise sizes are sampled proportional to the kernel mass
// per size and duplicates fold into frequency weights. The empty and full
// coalitions are always evaluated and enter through the exact efficiency
// constraint.
template <typename T>
std::vector<T> kernelshap_values(
    const std::function<T(const std::vector<char>&)>& value_fn, int p,
    int samples, T ridge, std::uint64_t seed, bool* full_enum = nullptr,
    T* efficiency_delta = nullptr) {
  require(p >= 2, "kernelshap needs at least 2 patches");
  require(samples >= p + 2, "kernelshap: samples must be >= patches + 2");

  std::vector<char> mask(static_cast<std::size_t>(p), 0);
  const T v0 = value_fn(mask);
  std::fill(mask.begin(), mask.end(), 1);
  const T vf = value_fn(mask);
  const T delta = vf - v0;

  std::vector<std::vector<char>> masks;
  std::vector<double> wts;
  std::vector<T> vals;

  const bool enumerate = p <= 26 && (1LL << p) <= static_cast<long long>(samples);
  if (enumerate) {
    for (long long c = 1; c < (1LL << p) - 1; ++c) {
      std::vector<char> mk(static_cast<std::size_t>(p));
      int sct = 0;
      for (int i = 0; i < p; ++i) {
        mk[static_cast<std::size_t>(i)] = (c >> i) & 1;
        sct += mk[static_cast<std::size_t>(i)];
      }
      masks.push_back(mk);
      wts.push_back(shapley_kernel_weight(p, sct));
      vals.push_back(value_fn(mk));
    }
  } else {
    // Cumulative kernel mass per coalition size.
    std::vector<double> size_mass(static_cast<std::size_t>(p), 0.0);
    double total = 0;
    for (int sct = 1; sct <= p - 1; ++sct) {
      total += static_cast<double>(p - 1) / (static_cast<double>(sct) * (p - sct));
      size_mass[static_cast<std::size_t>(sct)] = total;
    }
    Rng rng(seed);
    std::unordered_map<std::string, std::size_t> seen;
    std::vector<int> order(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) order[static_cast<std::size_t>(i)] = i;
    const int draws = samples - 2;
    for (int dr = 0; dr < draws; ++dr) {
      const double u = rng.uniform() * total;
      int sct = 1;
      while (sct < p - 1 && size_mass[static_cast<std::size_t>(sct)] < u) ++sct;
      // partial Fisher-Yates for a uniform subset of size sct
      for (int i = 0; i < sct; ++i) {
        const int j = i + rng.uniform_int(p - i);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      }
      std::vector<char> mk(static_cast<std::size_t>(p), 0);
      for (int i = 0; i < sct; ++i) mk[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
      std::string key(mk.begin(), mk.end());
      auto it = seen.find(key);
      if (it != seen.end()) {
        wts[it->second] += 1.0;
      } else {
        seen.emplace(std::move(key), masks.size());
        masks.push_back(mk);
        wts.push_back(1.0);
        vals.push_back(value_fn(mk));
      }
    }
  }

  if (full_enum) *full_enum = enumerate;
  if (efficiency_delta) *efficiency_delta = delta;
  return detail::solve_kernelshap(masks, wts, vals, v0, delta, p, ridge);
}

template <typename T>
ERFMap<T> attr_kernelshap(const ViTWeights<T>& w, const SAEModel<T>& s,
                          const AttributionRequest<T>& req) {
  const ViTConfig& cfg = w.cfg;
  const int p = cfg.n_patches();
  Tensor<T> baseline = detail::resolve_baseline(req);

  std::unordered_map<std::string, T> cache;
  auto value_fn = [&](const std::vector<char>& mask) -> T {
    std::string key(mask.begin(), mask.end());
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Tensor<T> img = composite_patches(cfg, req.image, baseline, mask);
    const T v = feature_value(w, s, img, req.target);
    cache.emplace(std::move(key), v);
    return v;
  };

  bool full_enum = false;
  T delta = 0;
  std::vector<T> phi =
      kernelshap_values<T>(value_fn, p, req.shap_samples, req.shap_ridge,
                           req.shap_seed, &full_enum, &delta);

  ERFMap<T> m = detail::make_map(cfg, req);
  m.scores = phi;
  T total = 0;
  for (T v : phi) total += v;
  m.meta["samples"] = std::to_string(req.shap_samples);
  m.meta["seed"] = std::to_string(req.shap_seed);
  m.meta["ridge"] = fmt_num(static_cast<double>(req.shap_ridge));
  m.meta["full_enumeration"] = full_enum ? "1" : "0";
  m.meta["efficiency_residual"] =
      fmt_num(std::abs(static_cast<double>(total - delta)));
  m.require_finite();
  return m;
}

// ---------------------------------------------------------------------------
// Attention-aware relevance propagation down to the input patch tokens.

template <typename T>
ERFMap<T> attr_attnlrp(const ViTWeights<T>& w, const SAEModel<T>& s,
                       const AttributionRequest<T>& req) {
  FeatureEval<T> fe = eval_feature(w, s, req.image, req.target);
  LrpOptions<T> opt;
  opt.eps = req.lrp_eps;
  opt.attn = req.attn_rule;
  LrpResult<T> res = lrp_backward(fe.ft.tape, fe.feature.node, fe.ft.h[0], opt);

  const ViTConfig& cfg = w.cfg;
  ERFMap<T> m = detail::make_map(cfg, req);
  // Patch score = total relevance of the patch's input token row.
  for (int pch = 0; pch < cfg.n_patches(); ++pch) {
    const int tok = cfg.patch_token(pch);
    T acc = 0;
    for (int j = 0; j < cfg.model_dim; ++j) acc += res.relevance(tok, j);
    m.scores[static_cast<std::size_t>(pch)] = acc;
  }
  const double zv = static_cast<double>(res.target_value);
  m.meta["target_value"] = fmt_num(zv);
  m.meta["lrp_eps"] = fmt_num(static_cast<double>(req.lrp_eps));
  m.meta["attn_rule"] = req.attn_rule == AttnRule::kBilinear ? "attnlrp" : "attn-const";
  m.meta["conservation_residual"] = fmt_num(
      std::abs(static_cast<double>(res.total_in) - zv) / std::max(std::abs(zv), 1e-8));
  m.require_finite();
  return m;
}

// Uniform entry point: same request in, same map shape out for every method.
template <typename T>
ERFMap<T> attribute(const ViTWeights<T>& w, const SAEModel<T>& s,
                    const AttributionRequest<T>& req) {
  switch (req.method) {
    case Method::kGradient: return attr_gradient(w, s, req);
    case Method::kIntegratedGradients: return attr_integrated_gradients(w, s, req);
    case Method::kKernelShap: return attr_kernelshap(w, s, req);
    case Method::kAttnLrp: return attr_attnlrp(w, s, req);
  }
  throw usage_error("unknown attribution method");
}

}  // namespace cafe
