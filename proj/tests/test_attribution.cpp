#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cafe/attribution.hpp"
#include "cafe/planted.hpp"
#include "oracles.hpp"

using cafe::AttributionRequest;
using cafe::ERFMap;
using cafe::Method;
using cafe::Rng;
using cafe::SAEModel;
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
  spec.sink = planted_config().patch_token(8);  // bottom-right patch
  return cafe::build_planted_router<double>(planted_config(), spec, seed);
}

template <typename T>
AttributionRequest<T> request_for(const cafe::PlantedModel<T>& m,
                                  const Tensor<T>& img, Method method) {
  AttributionRequest<T> req;
  req.method = method;
  req.target.layer = m.weights.cfg.depth;
  req.target.token = m.features[0].sink_token;
  req.target.feature = 0;
  req.image = img;
  return req;
}

}  // namespace

TEST_CASE("gradient backend: zero input with zero positional embedding gives a zero map") {
  ViTConfig c = planted_config();
  auto w = cafe::init_vit<double>(c);
  w.pos = Tensor<double>(w.pos.shape());
  SAEModel<double> s = cafe::zero_sae<double>(c.model_dim, 2 * c.model_dim);
  Rng rng(2);
  for (std::size_t i = 0; i < s.w_enc.size(); ++i) s.w_enc[i] = rng.normal() * 0.3;
  for (int j = 0; j < s.m; ++j) s.w_dec(j % s.n, j) = 1.0;

  AttributionRequest<double> req;
  req.method = Method::kGradient;
  req.target = {c.depth, 0, 0, ""};
  req.image = Tensor<double>({c.channels, c.image_size, c.image_size});
  ERFMap<double> m = cafe::attr_gradient(w, s, req);
  for (double v : m.scores) CHECK(v == 0.0);  // gradient x input at x = 0
}

TEST_CASE("gradient backend: planted linear probe puts all mass on its patch") {
  // depth-0 model: token latents are patch embeddings, so a feature reading
  // one token depends on exactly one patch.
  ViTConfig c = planted_config();
  c.depth = 0;
  c.use_cls_token = false;
  auto w = cafe::init_vit<double>(c);
  w.pos = Tensor<double>(w.pos.shape());
  w.patch_bias = Tensor<double>(w.patch_bias.shape());

  SAEModel<double> s = cafe::zero_sae<double>(c.model_dim, 2 * c.model_dim);
  Rng rng(3);
  for (int i = 0; i < s.n; ++i) s.w_enc(0, i) = rng.normal();
  for (int j = 0; j < s.m; ++j) s.w_dec(j % s.n, j) = 1.0;

  const int probe_patch = 4;
  Tensor<double> img({c.channels, c.image_size, c.image_size});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform() + 0.5;

  cafe::TargetDesc t{0, probe_patch, 0, ""};
  // flip the encoder row sign if needed so the feature fires
  if (cafe::feature_value(w, s, img, t) == 0.0)
    for (int i = 0; i < s.n; ++i) s.w_enc(0, i) = -s.w_enc(0, i);
  REQUIRE(cafe::feature_value(w, s, img, t) > 0.0);

  AttributionRequest<double> req;
  req.method = Method::kGradient;
  req.target = t;
  req.image = img;
  ERFMap<double> m = cafe::attr_gradient(w, s, req);
  for (int p = 0; p < m.patches(); ++p) {
    if (p == probe_patch)
      CHECK(std::abs(m.scores[static_cast<std::size_t>(p)]) > 1e-6);
    else
      CHECK(m.scores[static_cast<std::size_t>(p)] == 0.0);
  }

  // scaling the target scales every score linearly
  SAEModel<double> s2 = s;
  for (int i = 0; i < s.n; ++i) s2.w_enc(0, i) *= 3.0;
  ERFMap<double> m3 = cafe::attr_gradient(w, s2, req);
  for (int p = 0; p < m.patches(); ++p)
    CHECK(m3.scores[static_cast<std::size_t>(p)] ==
          Catch::Approx(3.0 * m.scores[static_cast<std::size_t>(p)]).margin(1e-12));
}

TEST_CASE("integrated gradients: degenerate path gives a zero map") {
  auto pm = simple_router();
  Rng rng(4);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  AttributionRequest<double> req = request_for(pm, img, Method::kIntegratedGradients);
  req.baseline = cafe::BaselinePolicy::kDatasetMean;
  req.baseline_image = img;  // x == x0
  ERFMap<double> m = cafe::attr_integrated_gradients(pm.weights, pm.sae, req);
  for (double v : m.scores) CHECK(v == 0.0);
}

TEST_CASE("integrated gradients is exact for a locally linear target") {
  // depth-0 model, encoder pre-activation positive along the whole path, so
  // the target is linear in the input and IG equals gradient x (x - x0).
  ViTConfig c = planted_config();
  c.depth = 0;
  c.use_cls_token = false;
  auto w = cafe::init_vit<double>(c);
  SAEModel<double> s = cafe::zero_sae<double>(c.model_dim, 2 * c.model_dim);
  Rng rng(5);
  for (int i = 0; i < s.n; ++i) s.w_enc(0, i) = rng.normal();
  for (int j = 0; j < s.m; ++j) s.w_dec(j % s.n, j) = 1.0;
  // positive offset via pos embedding keeps the ReLU open from x0=0 to x
  cafe::TargetDesc t{0, 3, 0, ""};
  Tensor<double> probe = cafe::forward_latents(w, Tensor<double>({c.channels, c.image_size, c.image_size}), 0);
  double base_pre = 0;
  for (int i = 0; i < s.n; ++i) base_pre += s.w_enc(0, i) * probe(3, i);
  for (int i = 0; i < s.n; ++i)
    w.pos(3, i) += (base_pre >= 0 ? 1.0 : -1.0) * s.w_enc(0, i) * 0.0 +
                   s.w_enc(0, i) * 2.0;  // push pre-activation up along the row

  Tensor<double> img({c.channels, c.image_size, c.image_size});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform() * 0.1;
  REQUIRE(cafe::feature_value(w, s, img, t) > 0.0);
  REQUIRE(cafe::feature_value(
              w, s, Tensor<double>({c.channels, c.image_size, c.image_size}), t) > 0.0);

  AttributionRequest<double> ig_req;
  ig_req.method = Method::kIntegratedGradients;
  ig_req.target = t;
  ig_req.image = img;
  AttributionRequest<double> g_req = ig_req;
  g_req.method = Method::kGradient;

  ERFMap<double> grad_map = cafe::attr_gradient(w, s, g_req);
  for (int steps : {2, 5, 128}) {
    ig_req.ig_steps = steps;
    ERFMap<double> ig = cafe::attr_integrated_gradients(w, s, ig_req);
    for (int p = 0; p < ig.patches(); ++p)
      CHECK(ig.scores[static_cast<std::size_t>(p)] ==
            Catch::Approx(grad_map.scores[static_cast<std::size_t>(p)]).margin(1e-9));
  }
  ig_req.ig_steps = 1;
  CHECK_THROWS_AS(cafe::attr_integrated_gradients(w, s, ig_req), cafe::usage_error);
}

TEST_CASE("integrated gradients completeness at 128 trapezoid steps") {
  // Completeness of the trapezoid rule needs a kink-free path, so the target
  // must fire at the baseline as well as at the input; across a ReLU kink
  // the discretization error is O(1/steps) by nature, checked separately.
  cafe::ViTConfig c = planted_config();
  auto w = cafe::init_vit<double>(c);
  Rng rng(6);
  Tensor<double> img({c.channels, c.image_size, c.image_size});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();

  cafe::SAEModel<double> s = cafe::zero_sae<double>(c.model_dim, 2 * c.model_dim);
  for (std::size_t i = 0; i < s.w_enc.size(); ++i) s.w_enc[i] = rng.normal() * 0.3;
  for (int j = 0; j < s.m; ++j) s.w_dec(j % s.n, j) = 1.0;

  Tensor<double> zero(img.shape());
  cafe::TargetDesc best;
  double best_base = 0;
  for (int tok = 0; tok < c.tokens(); ++tok)
    for (int k = 0; k < s.m; ++k) {
      cafe::TargetDesc t{c.depth, tok, k, ""};
      const double z0 = cafe::feature_value(w, s, zero, t);
      const double z1 = cafe::feature_value(w, s, img, t);
      if (z0 > 1e-3 && std::abs(z1 - z0) > 1e-3 && z0 > best_base) {
        best = t;
        best_base = z0;
      }
    }
  REQUIRE(best_base > 0);

  AttributionRequest<double> req;
  req.method = Method::kIntegratedGradients;
  req.target = best;
  req.image = img;
  req.ig_steps = 128;
  ERFMap<double> m = cafe::attr_integrated_gradients(w, s, req);
  const double z1 = std::stod(m.meta.at("z_input"));
  const double z0 = std::stod(m.meta.at("z_baseline"));
  const double residual = std::stod(m.meta.at("completeness_residual"));
  REQUIRE(std::abs(z1 - z0) > 1e-3);
  CHECK(residual < 1e-3 * std::abs(z1 - z0));

  // kinked path on the planted router: residual stays bounded at O(1/steps)
  auto pm = simple_router();
  Rng rng2(7);
  Tensor<double> pimg = cafe::make_planted_image(pm, rng2);
  AttributionRequest<double> preq = request_for(pm, pimg, Method::kIntegratedGradients);
  preq.ig_steps = 128;
  ERFMap<double> pmap = cafe::attr_integrated_gradients(pm.weights, pm.sae, preq);
  const double pz1 = std::stod(pmap.meta.at("z_input"));
  const double pz0 = std::stod(pmap.meta.at("z_baseline"));
  const double presidual = std::stod(pmap.meta.at("completeness_residual"));
  CHECK(presidual < 0.05 * std::abs(pz1 - pz0));
}

TEST_CASE("exact shapley: symmetry, dummy player, majority game") {
  // v(C) = 1 iff |C| >= 2 over three players
  auto majority = [](const std::vector<char>& mask) -> double {
    int cnt = 0;
    for (char c : mask) cnt += c;
    return cnt >= 2 ? 1.0 : 0.0;
  };
  auto phi = cafe::exact_shapley<double>(majority, 3);
  for (double v : phi) CHECK(v == Catch::Approx(1.0 / 3).margin(1e-12));

  // player 2 is a dummy; players 0, 1 symmetric
  auto dummy = [](const std::vector<char>& mask) -> double {
    return (mask[0] ? 1.0 : 0.0) + (mask[1] ? 1.0 : 0.0);
  };
  auto phi2 = cafe::exact_shapley<double>(dummy, 3);
  CHECK(phi2[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(phi2[1] == Catch::Approx(1.0).margin(1e-12));
  CHECK(phi2[2] == Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_AS(cafe::exact_shapley<double>(majority, 13), cafe::usage_error);
}

TEST_CASE("kernelshap recovers an additive game exactly") {
  Rng rng(7);
  const int p = 6;
  std::vector<double> weights(p);
  for (double& w : weights) w = rng.normal();
  auto value_fn = [&](const std::vector<char>& mask) -> double {
    double acc = 0;
    for (int i = 0; i < p; ++i)
      if (mask[static_cast<std::size_t>(i)]) acc += weights[static_cast<std::size_t>(i)];
    return acc;
  };
  for (int budget : {p + 2, 4 * p, 256}) {
    auto phi = cafe::kernelshap_values<double>(value_fn, p, budget, 1e-9, 99);
    for (int i = 0; i < p; ++i)
      CHECK(std::abs(phi[static_cast<std::size_t>(i)] - weights[static_cast<std::size_t>(i)]) < 1e-6);
  }
}

TEST_CASE("kernelshap on a constant target returns near-zero scores") {
  auto pm = simple_router();
  SAEModel<double> dead = pm.sae;
  for (int i = 0; i < dead.n; ++i) dead.w_enc(1, i) = 0.0;  // feature 1 never fires
  Rng rng(8);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  AttributionRequest<double> req = request_for(pm, img, Method::kKernelShap);
  req.target.feature = 1;
  req.shap_samples = 64;
  ERFMap<double> m = cafe::attr_kernelshap(pm.weights, dead, req);
  for (double v : m.scores) CHECK(std::abs(v) < 1e-8);
}

TEST_CASE("kernelshap with full enumeration matches exact shapley on P=9") {
  auto pm = simple_router();
  Rng rng(9);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  const auto& cfg = pm.weights.cfg;
  REQUIRE(cfg.n_patches() == 9);

  cafe::TargetDesc t;
  t.layer = cfg.depth;
  t.token = pm.features[0].sink_token;
  t.feature = 0;
  Tensor<double> baseline(img.shape());
  auto value_fn = [&](const std::vector<char>& mask) -> double {
    return cafe::feature_value(pm.weights, pm.sae,
                               cafe::composite_patches(cfg, img, baseline, mask), t);
  };
  auto exact = cafe::exact_shapley<double>(value_fn, 9);

  AttributionRequest<double> req = request_for(pm, img, Method::kKernelShap);
  req.shap_samples = 512;  // covers all 2^9 coalitions
  req.shap_ridge = 1e-9;
  ERFMap<double> m = cafe::attr_kernelshap(pm.weights, pm.sae, req);
  CHECK(m.meta.at("full_enumeration") == "1");
  for (int i = 0; i < 9; ++i)
    CHECK(std::abs(m.scores[static_cast<std::size_t>(i)] - exact[static_cast<std::size_t>(i)]) < 1e-6);

  // efficiency: sum of scores equals v(full) - v(empty)
  CHECK(std::stod(m.meta.at("efficiency_residual")) < 1e-6);
}

TEST_CASE("kernelshap sampling is seed-deterministic") {
  auto pm = simple_router();
  Rng rng(10);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  AttributionRequest<double> req = request_for(pm, img, Method::kKernelShap);
  req.shap_samples = 48;  // below 2^9, so the sampled path runs
  ERFMap<double> a = cafe::attr_kernelshap(pm.weights, pm.sae, req);
  ERFMap<double> b = cafe::attr_kernelshap(pm.weights, pm.sae, req);
  CHECK(std::memcmp(a.scores.data(), b.scores.data(), a.scores.size() * sizeof(double)) == 0);
  req.shap_seed = 1;
  ERFMap<double> c2 = cafe::attr_kernelshap(pm.weights, pm.sae, req);
  bool differs = false;
  for (std::size_t i = 0; i < c2.scores.size() && !differs; ++i)
    differs = c2.scores[i] != a.scores[i];
  CHECK(differs);
  // efficiency holds for the sampled path too
  CHECK(std::stod(a.meta.at("efficiency_residual")) < 1e-6);
}

TEST_CASE("lrp single linear layer matches the epsilon-rule closed form") {
  cafe::Tape<double> tp;
  Rng rng(11);
  Tensor<double> x = oracle::random_tensor({1, 4}, rng);
  Tensor<double> wmat = oracle::random_tensor({4, 3}, rng);
  cafe::NodeId xin = tp.input(x);
  cafe::NodeId win = tp.input(wmat, true);
  cafe::NodeId out = tp.matmul(xin, win);
  const int k = 1;
  cafe::NodeId target = tp.pick(out, 0, k);
  const double zk = tp.value(target)[0];

  const double eps = 1e-9;
  cafe::LrpOptions<double> opt;
  opt.eps = eps;
  auto res = cafe::lrp_backward(tp, target, xin, opt);
  const double stab = zk + (zk >= 0 ? eps : -eps);
  for (int j = 0; j < 4; ++j)
    CHECK(res.relevance(0, j) ==
          Catch::Approx(x(0, j) * wmat(j, k) * zk / stab).margin(1e-12));
  // conservation is exact as eps -> 0 on the bias-free layer
  CHECK(std::abs(res.total_in - zk) < 1e-7 * std::abs(zk));

  cafe::LrpOptions<double> bad;
  bad.eps = 0;
  CHECK_THROWS_AS(cafe::lrp_backward(tp, target, xin, bad), cafe::usage_error);
}

TEST_CASE("lrp conserves relevance through a bias-free frozen-attention chain") {
  // x -> W1 -> relu -> (A_const x V) -> W2 -> relu -> z_k, all bias-free.
  Rng rng(12);
  const int tkn = 5, d = 8;
  cafe::Tape<double> tp;
  Tensor<double> x = oracle::random_tensor({tkn, d}, rng);
  cafe::NodeId xin = tp.input(x);
  cafe::NodeId w1 = tp.input(oracle::random_tensor({d, d}, rng), true);
  cafe::NodeId h1 = tp.relu(tp.matmul(xin, w1));
  Tensor<double> uniform = Tensor<double>::full({tkn, tkn}, 1.0 / tkn);
  cafe::NodeId amat = tp.input(uniform, true);  // frozen uniform attention
  cafe::NodeId mixed = tp.matmul(amat, h1);
  cafe::NodeId w2 = tp.input(oracle::random_tensor({d, d}, rng), true);
  cafe::NodeId h2 = tp.relu(tp.matmul(mixed, w2));

  cafe::LrpOptions<double> opt;
  opt.eps = 1e-9;
  opt.attn = cafe::AttnRule::kFrozen;
  int checked = 0;
  for (int tok = 0; tok < tkn && checked < 4; ++tok)
    for (int k = 0; k < d && checked < 4; ++k) {
      cafe::NodeId target = tp.pick(h2, tok, k);
      const double zk = tp.value(target)[0];
      if (zk <= 1e-3) continue;
      auto res = cafe::lrp_backward(tp, target, xin, opt);
      CHECK(std::abs(res.total_in - zk) / std::abs(zk) < 1e-6);
      ++checked;
    }
  REQUIRE(checked == 4);
}

TEST_CASE("attnlrp on the planted router concentrates relevance on the sources") {
  int hits = 0;
  const int trials = 10;
  for (int i = 0; i < trials; ++i) {
    auto pm = simple_router(100 + static_cast<std::uint64_t>(i));
    Rng rng(200 + static_cast<std::uint64_t>(i));
    Tensor<double> img = cafe::make_planted_image(pm, rng);
    AttributionRequest<double> req = request_for(pm, img, Method::kAttnLrp);
    ERFMap<double> m = cafe::attr_attnlrp(pm.weights, pm.sae, req);
    int best = 0;
    for (int p = 1; p < m.patches(); ++p)
      if (m.scores[static_cast<std::size_t>(p)] > m.scores[static_cast<std::size_t>(best)]) best = p;
    const auto& srcs = pm.ground_truth();
    if (std::find(srcs.begin(), srcs.end(), best) != srcs.end()) ++hits;
  }
  CHECK(hits >= trials - 1);
}

TEST_CASE("every backend returns the same map shape for the same request") {
  auto pm = simple_router();
  Rng rng(13);
  Tensor<double> img = cafe::make_planted_image(pm, rng);
  for (Method method : {Method::kGradient, Method::kIntegratedGradients,
                        Method::kKernelShap, Method::kAttnLrp}) {
    AttributionRequest<double> req = request_for(pm, img, method);
    req.ig_steps = 8;
    req.shap_samples = 32;
    ERFMap<double> m = cafe::attribute(pm.weights, pm.sae, req);
    CHECK(m.grid == pm.weights.cfg.grid());
    CHECK(m.patches() == pm.weights.cfg.n_patches());
    CHECK(m.method == cafe::method_name(method));
    CHECK(m.target.token == req.target.token);
  }
}
