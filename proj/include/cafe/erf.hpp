#pragma once

// Target selection and ERF assembly: per-token activation maps for one
// (layer, feature, image) triple, the policy that picks the token whose
// activation becomes the attribution target, and the dispatcher that pairs
// the resulting map with the activation map through a shared target
// descriptor.

#include <string>
#include <vector>

#include "cafe/attribution.hpp"
#include "cafe/sae.hpp"
#include "cafe/vit.hpp"

namespace cafe {

enum class SelectPolicy { kMaxActivation, kExplicit, kCls };

struct TargetSpec {
  int layer = 0;
  int feature = 0;
  int token = 0;
  SelectPolicy policy = SelectPolicy::kMaxActivation;
};

template <typename T>
struct ActivationMap {
  int layer = 0;
  int feature = 0;
  std::string image_id;
  bool has_cls = false;
  int grid = 0;
  std::vector<T> values;  // one per token, CLS first when present
  int argmax = 0;         // ties broken by lowest token index

  int tokens() const { return static_cast<int>(values.size()); }
  int patch_token(int p) const { return p + (has_cls ? 1 : 0); }
  T max_value() const { return values[static_cast<std::size_t>(argmax)]; }
};

// z_k for every token at one layer. Values are post-ReLU, so >= 0.
template <typename T>
ActivationMap<T> activation_map(const ViTWeights<T>& w, const SAEModel<T>& s,
                                const Tensor<T>& image, int layer, int feature,
                                const std::string& image_id = "") {
  s.validate();
  require(layer >= 0 && layer <= w.cfg.depth, "activation_map: layer out of range");
  require(feature >= 0 && feature < s.m, "activation_map: feature out of range");
  Tensor<T> h = forward_latents(w, image, layer);
  Tensor<T> z = sae_encode_batch(s, h);

  ActivationMap<T> m;
  m.layer = layer;
  m.feature = feature;
  m.image_id = image_id;
  m.has_cls = w.cfg.use_cls_token;
  m.grid = w.cfg.grid();
  m.values.resize(static_cast<std::size_t>(h.rows()));
  for (int t = 0; t < h.rows(); ++t)
    m.values[static_cast<std::size_t>(t)] = z(t, feature);
  m.argmax = 0;
  for (int t = 1; t < h.rows(); ++t)
    if (m.values[static_cast<std::size_t>(t)] > m.values[static_cast<std::size_t>(m.argmax)])
      m.argmax = t;
  return m;
}

// Same computation through the recorded tape; equals activation_map values
// elementwise by construction of the shared kernels.
template <typename T>
ActivationMap<T> activation_map_from_tape(const SAEModel<T>& s,
                                          ForwardTape<T>& ft, int layer,
                                          int feature,
                                          const std::string& image_id = "") {
  const Tensor<T>& h = ft.latents(layer);
  Tensor<T> z = sae_encode_batch(s, h);
  ActivationMap<T> m;
  m.layer = layer;
  m.feature = feature;
  m.image_id = image_id;
  m.has_cls = ft.cfg.use_cls_token;
  m.grid = ft.cfg.grid();
  m.values.resize(static_cast<std::size_t>(h.rows()));
  for (int t = 0; t < h.rows(); ++t)
    m.values[static_cast<std::size_t>(t)] = z(t, feature);
  m.argmax = 0;
  for (int t = 1; t < h.rows(); ++t)
    if (m.values[static_cast<std::size_t>(t)] > m.values[static_cast<std::size_t>(m.argmax)])
      m.argmax = t;
  return m;
}

// Picks the target token. Max-activation requires a strictly positive
// maximum: a feature that never fires has no well-posed explanation.
template <typename T>
TargetSpec select_target(const ActivationMap<T>& map, SelectPolicy policy,
                         int explicit_token = -1) {
  TargetSpec t;
  t.layer = map.layer;
  t.feature = map.feature;
  t.policy = policy;
  switch (policy) {
    case SelectPolicy::kMaxActivation:
      if (!(map.max_value() > T(0)))
        throw data_error("select_target: feature does not fire on this image");
      t.token = map.argmax;
      break;
    case SelectPolicy::kCls:
      require(map.has_cls, "select_target: model has no CLS token");
      t.token = 0;
      break;
    case SelectPolicy::kExplicit:
      require(explicit_token >= 0 && explicit_token < map.tokens(),
              "select_target: explicit token out of range");
      t.token = explicit_token;
      break;
  }
  return t;
}

// Dispatches to the chosen backend; the returned map carries the same
// target descriptor as the activation map it belongs to.
template <typename T>
ERFMap<T> compute_erf(Method method, const ViTWeights<T>& w, const SAEModel<T>& s,
                      const TargetSpec& target, const Tensor<T>& image,
                      AttributionRequest<T> params = {},
                      const std::string& image_id = "") {
  params.method = method;
  params.target.layer = target.layer;
  params.target.token = target.token;
  params.target.feature = target.feature;
  params.target.image_id = image_id;
  params.image = image;
  return attribute(w, s, params);
}

}  // namespace cafe
