#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cafe/erf.hpp"
#include "cafe/planted.hpp"
#include "oracles.hpp"

using cafe::ActivationMap;
using cafe::Method;
using cafe::Rng;
using cafe::SAEModel;
using cafe::SelectPolicy;
using cafe::Tensor;
using cafe::ViTConfig;

namespace {

ViTConfig planted_config() {
  ViTConfig c;
  c.image_size = 12;
  c.patch_size = 4;
  c.channels = 3;
  c.depth = 2;
  c.heads = 4;
  c.model_dim = 64;
  c.mlp_dim = 32;
  c.use_cls_token = true;
  c.seed = 0;
  return c;
}

cafe::PlantedModel<double> simple_router(std::uint64_t seed = 1) {
  cafe::PlantedRouterSpec spec;
  spec.sources = {0, 2, 6};
  spec.sink = planted_config().patch_token(8);
  return cafe::build_planted_router<double>(planted_config(), spec, seed);
}

}  // namespace

TEST_CASE("activation map: dead feature is all zeros with argmax at token 0") {
  auto pm = simple_router();
  Rng rng(1);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  // feature index past the planted ones has a zero encoder row
  const int dead = static_cast<int>(pm.features.size()) + 3;
  ActivationMap<double> m =
      cafe::activation_map(pm.weights, pm.sae, img, 2, dead, "img");
  for (double v : m.values) CHECK(v == 0.0);
  CHECK(m.argmax == 0);  // tie-break at the lowest token index
}

TEST_CASE("activation map equals feature_activation per token") {
  auto pm = simple_router();
  Rng rng(2);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  ActivationMap<double> m = cafe::activation_map(pm.weights, pm.sae, img, 2, 0, "img");
  auto ft = cafe::forward(pm.weights, img);
  for (int tok = 0; tok < pm.weights.cfg.tokens(); ++tok) {
    auto fn = cafe::feature_activation(pm.sae, ft, 2, tok, 0);
    CHECK(m.values[static_cast<std::size_t>(tok)] == fn.value);
  }
  // values are post-ReLU, so nonnegative
  for (double v : m.values) CHECK(v >= 0.0);
}

TEST_CASE("activation map on the planted router peaks at the sink, not the sources") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto pm = simple_router(seed);
    Rng rng(40 + seed);
    Tensor<double> img = cafe::make_planted_image(pm, rng);
    ActivationMap<double> m =
        cafe::activation_map(pm.weights, pm.sae, img, 2, 0, "img");
    CHECK(m.argmax == pm.features[0].sink_token);
    for (int src : pm.ground_truth())
      CHECK(m.argmax != pm.weights.cfg.patch_token(src));
  }
}

TEST_CASE("select_target policies") {
  ActivationMap<double> m;
  m.layer = 1;
  m.feature = 2;
  m.has_cls = true;
  m.grid = 2;
  m.values = {0.0, 0.3, 0.0, 0.7, 0.1};
  m.argmax = 3;

  cafe::TargetSpec t = cafe::select_target(m, SelectPolicy::kMaxActivation);
  CHECK(t.token == 3);
  CHECK(t.layer == 1);
  CHECK(t.feature == 2);

  t = cafe::select_target(m, SelectPolicy::kCls);
  CHECK(t.token == 0);

  t = cafe::select_target(m, SelectPolicy::kExplicit, 4);
  CHECK(t.token == 4);
  CHECK_THROWS_AS(cafe::select_target(m, SelectPolicy::kExplicit, 9),
                  cafe::usage_error);

  // two equal maxima resolve to the lower token index
  ActivationMap<double> tie = m;
  tie.values = {0.0, 0.7, 0.0, 0.7, 0.1};
  tie.argmax = 1;  // activation_map computes this; emulate
  t = cafe::select_target(tie, SelectPolicy::kMaxActivation);
  CHECK(t.token == 1);

  // all-zero map cannot produce a max-activation target
  ActivationMap<double> zero = m;
  zero.values = {0.0, 0.0, 0.0, 0.0, 0.0};
  zero.argmax = 0;
  CHECK_THROWS_AS(cafe::select_target(zero, SelectPolicy::kMaxActivation),
                  cafe::data_error);

  // idempotence: re-selecting from the same map gives the same target
  cafe::TargetSpec t1 = cafe::select_target(m, SelectPolicy::kMaxActivation);
  cafe::TargetSpec t2 = cafe::select_target(m, SelectPolicy::kMaxActivation);
  CHECK(t1.token == t2.token);
}

TEST_CASE("activation argmax breaks ties toward the lower token") {
  // constructed map where two tokens share the max
  auto pm = simple_router();
  SAEModel<double> s = pm.sae;
  for (int i = 0; i < s.n; ++i) s.w_enc(2, i) = 0.0;
  // feature 2 now reads nothing: all zeros, argmax must be token 0
  Rng rng(3);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  ActivationMap<double> m = cafe::activation_map(pm.weights, s, img, 2, 2, "img");
  CHECK(m.argmax == 0);
}

TEST_CASE("compute_erf dispatches and stamps the shared target descriptor") {
  auto pm = simple_router();
  Rng rng(4);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  ActivationMap<double> act =
      cafe::activation_map(pm.weights, pm.sae, img, 2, 0, "imgX");
  cafe::TargetSpec spec = cafe::select_target(act, SelectPolicy::kMaxActivation);

  cafe::AttributionRequest<double> params;
  cafe::ERFMap<double> erf = cafe::compute_erf(Method::kAttnLrp, pm.weights,
                                               pm.sae, spec, img, params, "imgX");
  CHECK(erf.target.layer == act.layer);
  CHECK(erf.target.feature == act.feature);
  CHECK(erf.target.image_id == act.image_id);
  CHECK(erf.target.same_triple(cafe::TargetDesc{act.layer, spec.token, act.feature, "imgX"}));

  // determinism: identical request twice gives identical maps
  cafe::ERFMap<double> erf2 = cafe::compute_erf(Method::kAttnLrp, pm.weights,
                                                pm.sae, spec, img, params, "imgX");
  CHECK(std::memcmp(erf.scores.data(), erf2.scores.data(),
                    erf.scores.size() * sizeof(double)) == 0);
}

TEST_CASE("erf of a planted router: top sources win, and the argmaxes diverge") {
  int top_hits = 0;
  const int trials = 10;
  for (int i = 0; i < trials; ++i) {
    auto pm = simple_router(300 + static_cast<std::uint64_t>(i));
    Rng rng(500 + static_cast<std::uint64_t>(i));
    Tensor<double> img = cafe::make_planted_image(pm, rng);
    ActivationMap<double> act =
        cafe::activation_map(pm.weights, pm.sae, img, 2, 0, "img");
    cafe::TargetSpec spec = cafe::select_target(act, SelectPolicy::kMaxActivation);
    cafe::AttributionRequest<double> params;
    cafe::ERFMap<double> erf = cafe::compute_erf(
        Method::kAttnLrp, pm.weights, pm.sae, spec, img, params, "img");

    // activation argmax is the sink; erf argmax must be a source patch
    CHECK(act.argmax == pm.features[0].sink_token);
    std::vector<int> order(erf.scores.size());
    for (std::size_t p = 0; p < order.size(); ++p) order[p] = static_cast<int>(p);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return erf.scores[static_cast<std::size_t>(a)] > erf.scores[static_cast<std::size_t>(b)];
    });
    const auto& srcs = pm.ground_truth();
    bool all_sources_on_top = true;
    for (std::size_t r = 0; r < srcs.size(); ++r)
      if (std::find(srcs.begin(), srcs.end(), order[r]) == srcs.end())
        all_sources_on_top = false;
    if (all_sources_on_top) ++top_hits;
    CHECK(act.argmax != pm.weights.cfg.patch_token(order[0]));
  }
  CHECK(top_hits >= 9);
}

TEST_CASE("constant-feature erf is a zero map with the zero flag") {
  auto pm = simple_router();
  SAEModel<double> dead = pm.sae;
  for (int i = 0; i < dead.n; ++i) dead.w_enc(1, i) = 0.0;
  Rng rng(5);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  cafe::TargetSpec spec;
  spec.layer = 2;
  spec.feature = 1;
  spec.token = 0;
  spec.policy = SelectPolicy::kExplicit;
  cafe::AttributionRequest<double> params;
  cafe::ERFMap<double> m = cafe::compute_erf(Method::kGradient, pm.weights, dead,
                                             spec, img, params, "img");
  for (double v : m.scores) CHECK(v == 0.0);
  CHECK(m.meta.count("zero_target") == 1);
}
