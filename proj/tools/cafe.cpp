// Command-line surface over the library: synthetic benchmark generation, SAE
// training, single-target ERF export, insertion evaluation, non-locality
// scanning and method comparison. Every run reads a sectioned config file
// (flags override keys), writes only under the resolved output directory and
// echoes the effective configuration there.
//
// Exit codes: 0 success, 1 usage error, 2 data/numeric error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cafe/eval.hpp"
#include "cafe/io.hpp"
#include "cafe/planted.hpp"
#include "cafe/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_flag;
  std::string manifest;
  std::vector<std::string> overrides;  // section.key=value
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run configuration file (ini)");
  cmd->add_option("--out", args.out_flag, "output directory");
  cmd->add_option("--set", args.overrides,
                  "override a config key, e.g. --set attribution.method=ig");
}

cafe::RunConfig load_config(const CommonArgs& args) {
  cafe::RunConfig cfg = args.config_path.empty()
                            ? cafe::RunConfig()
                            : cafe::RunConfig::load(args.config_path);
  for (const std::string& ov : args.overrides) {
    const auto dot = ov.find('.');
    const auto eq = ov.find('=');
    if (dot == std::string::npos || eq == std::string::npos || eq < dot)
      throw cafe::usage_error("--set expects section.key=value, got: " + ov);
    cfg.set(ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1), ov.substr(eq + 1));
  }
  return cfg;
}

// --out flag, then CAFE_OUT_DIR, then the config value.
std::string resolve_out(const CommonArgs& args, const cafe::RunConfig& cfg) {
  if (!args.out_flag.empty()) return args.out_flag;
  if (const char* env = std::getenv("CAFE_OUT_DIR"); env && *env) return env;
  return cfg.get("run", "out");
}

std::string prepare_out(const CommonArgs& args, const cafe::RunConfig& cfg) {
  const std::string out = resolve_out(args, cfg);
  fs::create_directories(out);
  cfg.write((fs::path(out) / "effective_config.ini").string());
  return out;
}

template <typename T>
cafe::AttributionRequest<T> attribution_params(const cafe::RunConfig& cfg) {
  cafe::AttributionRequest<T> req;
  req.method = cafe::parse_method(cfg.get("attribution", "method"));
  req.ig_steps = cfg.get_int("attribution", "ig_steps");
  req.shap_samples = cfg.get_int("attribution", "shap_samples");
  req.shap_ridge = static_cast<T>(cfg.get_double("attribution", "shap_ridge"));
  req.shap_seed = cfg.get_u64("attribution", "shap_seed");
  if (!cfg.get("attribution", "lrp_eps").empty())
    req.lrp_eps = static_cast<T>(cfg.get_double("attribution", "lrp_eps"));
  const std::string rule = cfg.get("attribution", "attn_rule");
  if (rule == "attnlrp")
    req.attn_rule = cafe::AttnRule::kBilinear;
  else if (rule == "attn-const")
    req.attn_rule = cafe::AttnRule::kFrozen;
  else
    throw cafe::usage_error("attribution.attn_rule must be attnlrp or attn-const");
  const std::string pooling = cfg.get("attribution", "pooling");
  if (pooling == "signed")
    req.pooling = cafe::Pooling::kSignedSum;
  else if (pooling == "abs")
    req.pooling = cafe::Pooling::kAbsSum;
  else if (pooling == "l2")
    req.pooling = cafe::Pooling::kL2;
  else
    throw cafe::usage_error("attribution.pooling must be signed, abs or l2");
  const std::string baseline = cfg.get("attribution", "baseline");
  if (baseline == "zero") {
    req.baseline = cafe::BaselinePolicy::kZero;
  } else if (baseline == "mean") {
    req.baseline = cafe::BaselinePolicy::kDatasetMean;
    const std::string p = cfg.get("attribution", "baseline_image");
    if (p.empty())
      throw cafe::usage_error("baseline=mean needs attribution.baseline_image");
    req.baseline_image = cafe::read_ppm<T>(p);
  } else {
    throw cafe::usage_error("attribution.baseline must be zero or mean");
  }
  return req;
}

json load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw cafe::data_error("cannot open manifest: " + path);
  json m = json::parse(f, nullptr, false);
  if (m.is_discarded()) throw cafe::data_error("manifest is not valid JSON: " + path);
  if (!m.contains("format_version") || m["format_version"].get<int>() != cafe::kManifestVersion)
    throw cafe::data_error("manifest format_version mismatch: " + path);
  return m;
}

template <typename T>
std::vector<std::pair<std::string, cafe::Tensor<T>>> load_manifest_images(
    const json& manifest, const std::string& manifest_path) {
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<std::pair<std::string, cafe::Tensor<T>>> images;
  for (const auto& im : manifest.at("images"))
    images.emplace_back(im.at("id").get<std::string>(),
                        cafe::read_ppm<T>((base / im.at("file").get<std::string>()).string()));
  return images;
}

std::string checkpoint_path(const cafe::RunConfig& cfg, const json* manifest,
                            const std::string& manifest_path, const char* key,
                            const char* manifest_key) {
  const std::string from_cfg = cfg.get("run", key);
  if (!from_cfg.empty()) return from_cfg;
  if (manifest && manifest->contains(manifest_key)) {
    const fs::path base = fs::path(manifest_path).parent_path();
    return (base / manifest->at(manifest_key).get<std::string>()).string();
  }
  throw cafe::usage_error(std::string("no ") + key +
                          " configured and no manifest to take it from");
}

cafe::SyntheticConfig synthetic_config(const cafe::RunConfig& cfg) {
  cafe::SyntheticConfig sc;
  sc.vit = cfg.vit_config();
  sc.n_images = cfg.get_int("synthetic", "n_images");
  sc.n_local = cfg.get_int("synthetic", "n_local");
  sc.n_nonlocal = cfg.get_int("synthetic", "n_nonlocal");
  sc.sources_per_feature = cfg.get_int("synthetic", "sources_per_feature");
  sc.strength = cfg.get_double("synthetic", "strength");
  sc.min_dist = cfg.get_int("synthetic", "min_dist");
  sc.staggered_routers = cfg.get_bool("synthetic", "staggered_routers");
  sc.seed = cfg.get_u64("run", "seed");
  return sc;
}

// ---------------------------------------------------------------------------

template <typename T>
int run_gen_synthetic(const CommonArgs& args) {
  cafe::RunConfig cfg = load_config(args);
  const std::string out = prepare_out(args, cfg);
  cafe::SyntheticDataset<T> ds = cafe::gen_synthetic<T>(synthetic_config(cfg));
  cafe::write_synthetic(ds, out);
  std::cout << "wrote " << ds.images.size() << " images, vit.ckpt, sae.ckpt, "
            << "manifest.json under " << out << "\n";
  return 0;
}

template <typename T>
int run_train_sae(const CommonArgs& args) {
  cafe::RunConfig cfg = load_config(args);
  const std::string out = prepare_out(args, cfg);

  cafe::Tensor<T> latents;
  const std::string latents_path = cfg.get("sae", "latents");
  if (!latents_path.empty()) {
    latents = cafe::Checkpoint::load(latents_path).get<T>("latents");
  } else {
    if (args.manifest.empty())
      throw cafe::usage_error("train-sae needs --manifest or sae.latents");
    const json manifest = load_manifest(args.manifest);
    auto images = load_manifest_images<T>(manifest, args.manifest);
    const std::string vit_path =
        checkpoint_path(cfg, &manifest, args.manifest, "vit_checkpoint", "vit_checkpoint");
    cafe::ViTWeights<T> w = cafe::load_vit<T>(vit_path);
    const int layer = cfg.get_int("sae", "layer");
    std::vector<T> rows;
    int n = 0;
    for (const auto& [id, img] : images) {
      cafe::Tensor<T> h = cafe::forward_latents(w, img, layer);
      n = h.cols();
      rows.insert(rows.end(), h.data(), h.data() + h.size());
    }
    latents = cafe::Tensor<T>({static_cast<int>(rows.size()) / n, n}, std::move(rows));
  }

  cafe::SAETrainConfig<T> tc;
  tc.lambda = static_cast<T>(cfg.get_double("sae", "lambda"));
  tc.lr = static_cast<T>(cfg.get_double("sae", "lr"));
  tc.batch = cfg.get_int("sae", "batch");
  tc.steps = cfg.get_int("sae", "steps");
  tc.seed = cfg.get_u64("sae", "seed");
  tc.dead_steps = cfg.get_int("sae", "dead_steps");
  tc.matryoshka_groups = cfg.get_int_list("sae", "matryoshka_groups");
  cafe::SAEModel<T> s = cafe::train_sae(latents, cfg.get_int("sae", "m"), tc);
  s.subtract_output_bias = cfg.get("sae", "decoder_bias_sign") == "sub";
  cafe::save_sae(s, (fs::path(out) / "sae.ckpt").string());
  std::cout << "trained sae (n=" << s.n << ", m=" << s.m << ") -> " << out
            << "/sae.ckpt\n";
  return 0;
}

template <typename T>
int run_erf(const CommonArgs& args, const std::string& image_path, int layer,
            int feature, int token, const std::string& method) {
  cafe::RunConfig cfg = load_config(args);
  if (!method.empty()) cfg.set("attribution", "method", method);
  const std::string out = prepare_out(args, cfg);

  std::optional<json> manifest;
  if (!args.manifest.empty()) manifest = load_manifest(args.manifest);
  const json* mp = manifest ? &*manifest : nullptr;
  cafe::ViTWeights<T> w = cafe::load_vit<T>(checkpoint_path(
      cfg, mp, args.manifest, "vit_checkpoint", "vit_checkpoint"));
  cafe::SAEModel<T> s = cafe::load_sae<T>(checkpoint_path(
      cfg, mp, args.manifest, "sae_checkpoint", "sae_checkpoint"));
  cafe::Tensor<T> image = cafe::read_ppm<T>(image_path);

  const int use_layer = layer >= 0 ? layer : cfg.get_int("sae", "layer");
  cafe::ActivationMap<T> act = cafe::activation_map(w, s, image, use_layer,
                                                    feature, image_path);
  cafe::TargetSpec spec =
      token >= 0 ? cafe::select_target(act, cafe::SelectPolicy::kExplicit, token)
                 : cafe::select_target(act, cafe::SelectPolicy::kMaxActivation);
  cafe::AttributionRequest<T> params = attribution_params<T>(cfg);
  cafe::ERFMap<T> erf =
      cafe::compute_erf(params.method, w, s, spec, image, params, image_path);

  cafe::write_erf_csv(erf, (fs::path(out) / "erf.csv").string());
  cafe::export_erf_heatmap(erf, (fs::path(out) / "erf.ppm").string());
  cafe::export_activation_heatmap(act, (fs::path(out) / "activation.pgm").string());
  std::cout << "target token " << spec.token;
  if (erf.meta.count("target_value"))
    std::cout << ", z=" << erf.meta.at("target_value");
  std::cout << "\nwrote erf.csv, erf.ppm, activation.pgm under " << out << "\n";
  return 0;
}

// Shared target assembly for insertion-eval / compare: every (image,
// non-local feature) pair from the manifest, max-activation token.
template <typename T>
std::vector<cafe::EvalTarget<T>> manifest_targets(
    const json& manifest, const std::string& manifest_path,
    const cafe::ViTWeights<T>& w, const cafe::SAEModel<T>& s, int layer) {
  auto images = load_manifest_images<T>(manifest, manifest_path);
  std::vector<cafe::EvalTarget<T>> targets;
  for (const auto& [id, img] : images) {
    for (const auto& f : manifest.at("features")) {
      if (!f.at("non_local").get<bool>()) continue;
      const int feature = f.at("feature").get<int>();
      cafe::ActivationMap<T> act = cafe::activation_map(w, s, img, layer, feature, id);
      if (!(act.max_value() > T(0))) continue;
      cafe::EvalTarget<T> t;
      t.spec = cafe::select_target(act, cafe::SelectPolicy::kMaxActivation);
      t.image = img;
      t.image_id = id;
      targets.push_back(std::move(t));
    }
  }
  if (targets.empty()) throw cafe::data_error("no firing targets in manifest");
  return targets;
}

template <typename T>
int run_insertion_eval(const CommonArgs& args, const std::string& methods_csv) {
  cafe::RunConfig cfg = load_config(args);
  const std::string out = prepare_out(args, cfg);
  if (args.manifest.empty())
    throw cafe::usage_error("insertion-eval needs --manifest");
  const json manifest = load_manifest(args.manifest);
  cafe::ViTWeights<T> w = cafe::load_vit<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "vit_checkpoint", "vit_checkpoint"));
  cafe::SAEModel<T> s = cafe::load_sae<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "sae_checkpoint", "sae_checkpoint"));
  const int layer = cfg.get_int("sae", "layer");

  std::vector<cafe::Method> methods;
  std::stringstream ss(methods_csv.empty() ? cfg.get("attribution", "method")
                                           : methods_csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) methods.push_back(cafe::parse_method(item));

  auto targets = manifest_targets(manifest, args.manifest, w, s, layer);
  cafe::AttributionRequest<T> params = attribution_params<T>(cfg);
  cafe::ComparisonResult<T> res = cafe::compare_methods(w, s, targets, methods, params);
  cafe::write_curves_csv(res.curves, (fs::path(out) / "curves.csv").string());
  if (!res.skipped.empty()) {
    std::ofstream sf((fs::path(out) / "skipped.txt").string());
    for (const std::string& t : res.skipped) sf << t << '\n';
  }
  std::cout << "wrote curves.csv (" << res.curves.size() << " curves, "
            << res.skipped.size() << " skipped) under " << out << "\n";
  return 0;
}

template <typename T>
int run_compare(const CommonArgs& args) {
  cafe::RunConfig cfg = load_config(args);
  const std::string out = prepare_out(args, cfg);
  if (args.manifest.empty()) throw cafe::usage_error("compare needs --manifest");
  const json manifest = load_manifest(args.manifest);
  cafe::ViTWeights<T> w = cafe::load_vit<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "vit_checkpoint", "vit_checkpoint"));
  cafe::SAEModel<T> s = cafe::load_sae<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "sae_checkpoint", "sae_checkpoint"));
  const int layer = cfg.get_int("sae", "layer");

  auto targets = manifest_targets(manifest, args.manifest, w, s, layer);
  const std::vector<cafe::Method> methods{
      cafe::Method::kAttnLrp, cafe::Method::kIntegratedGradients,
      cafe::Method::kKernelShap, cafe::Method::kGradient};
  cafe::AttributionRequest<T> params = attribution_params<T>(cfg);
  cafe::ComparisonResult<T> res = cafe::compare_methods(w, s, targets, methods, params);
  cafe::write_comparison_csv(res.rows, (fs::path(out) / "comparison.csv").string());
  cafe::write_curves_csv(res.curves, (fs::path(out) / "curves.csv").string());
  for (const auto& row : res.rows)
    std::cout << row.method << ": mean_auc=" << row.mean_auc
              << " win_rate=" << row.win_rate << " (n=" << row.n_targets << ")\n";
  return 0;
}

template <typename T>
int run_nonlocal_scan(const CommonArgs& args) {
  cafe::RunConfig cfg = load_config(args);
  const std::string out = prepare_out(args, cfg);
  if (args.manifest.empty())
    throw cafe::usage_error("nonlocal-scan needs --manifest");
  const json manifest = load_manifest(args.manifest);
  cafe::ViTWeights<T> w = cafe::load_vit<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "vit_checkpoint", "vit_checkpoint"));
  cafe::SAEModel<T> s = cafe::load_sae<T>(checkpoint_path(
      cfg, &manifest, args.manifest, "sae_checkpoint", "sae_checkpoint"));
  auto images = load_manifest_images<T>(manifest, args.manifest);

  std::vector<int> layers = cfg.get_int_list("eval", "layers");
  if (layers.empty())
    for (int l = 1; l <= w.cfg.depth; ++l) layers.push_back(l);
  std::vector<std::pair<int, const cafe::SAEModel<T>*>> saes;
  for (int l : layers) saes.emplace_back(l, &s);

  cafe::AttributionRequest<T> params = attribution_params<T>(cfg);
  cafe::NonlocalityReport<T> rep = cafe::layer_scan(
      w, saes, images, cfg.get_int("eval", "features_per_layer"),
      cfg.get_int("eval", "radius"), static_cast<T>(cfg.get_double("eval", "theta")),
      params);
  cafe::write_nonlocality_csv(rep, (fs::path(out) / "nonlocality.csv").string());
  for (std::size_t i = 0; i < rep.layers.size(); ++i)
    std::cout << "layer " << rep.layers[i] << ": " << rep.flagged_counts[i]
              << " non-local\n";
  std::cout << "wrote nonlocality.csv under " << out << "\n";
  return 0;
}

template <typename Fn>
int dispatch_dtype(const CommonArgs& args, Fn&& fn) {
  cafe::RunConfig cfg = load_config(args);
  const std::string dtype = cfg.get("run", "dtype");
  if (dtype == "f32") return fn(float{});
  if (dtype == "f64") return fn(double{});
  throw cafe::usage_error("run.dtype must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"effective-receptive-field toolkit for SAE features"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, erf_args, ins_args, scan_args, cmp_args;

  CLI::App* gen = app.add_subcommand("gen-synthetic",
                                     "generate a planted benchmark dataset");
  add_common(gen, gen_args);

  CLI::App* train = app.add_subcommand("train-sae", "train an SAE on latents");
  add_common(train, train_args);
  train->add_option("--manifest", train_args.manifest, "dataset manifest.json");

  CLI::App* erf = app.add_subcommand("erf", "one ERF map + activation map");
  add_common(erf, erf_args);
  erf->add_option("--manifest", erf_args.manifest, "dataset manifest.json");
  std::string erf_image, erf_method;
  int erf_layer = -1, erf_feature = 0, erf_token = -1;
  erf->add_option("--image", erf_image, "input image (ppm)")->required();
  erf->add_option("--layer", erf_layer, "target layer (default: sae.layer)");
  erf->add_option("--feature", erf_feature, "feature index");
  erf->add_option("--token", erf_token, "explicit target token (default: argmax)");
  erf->add_option("--method", erf_method, "gradient|ig|kernelshap|attnlrp");

  CLI::App* ins = app.add_subcommand("insertion-eval", "insertion curves");
  add_common(ins, ins_args);
  ins->add_option("--manifest", ins_args.manifest, "dataset manifest.json");
  std::string ins_methods;
  ins->add_option("--methods", ins_methods, "comma list of methods");

  CLI::App* scan = app.add_subcommand("nonlocal-scan", "layer-wise non-locality scan");
  add_common(scan, scan_args);
  scan->add_option("--manifest", scan_args.manifest, "dataset manifest.json");

  CLI::App* cmp = app.add_subcommand("compare", "method comparison table");
  add_common(cmp, cmp_args);
  cmp->add_option("--manifest", cmp_args.manifest, "dataset manifest.json");

  if (argc <= 1) {
    std::cout << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
      return app.exit(e);
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return dispatch_dtype(gen_args, [&](auto tag) {
        return run_gen_synthetic<decltype(tag)>(gen_args);
      });
    if (train->parsed())
      return dispatch_dtype(train_args, [&](auto tag) {
        return run_train_sae<decltype(tag)>(train_args);
      });
    if (erf->parsed())
      return dispatch_dtype(erf_args, [&](auto tag) {
        return run_erf<decltype(tag)>(erf_args, erf_image, erf_layer, erf_feature,
                                      erf_token, erf_method);
      });
    if (ins->parsed())
      return dispatch_dtype(ins_args, [&](auto tag) {
        return run_insertion_eval<decltype(tag)>(ins_args, ins_methods);
      });
    if (scan->parsed())
      return dispatch_dtype(scan_args, [&](auto tag) {
        return run_nonlocal_scan<decltype(tag)>(scan_args);
      });
    if (cmp->parsed())
      return dispatch_dtype(cmp_args, [&](auto tag) {
        return run_compare<decltype(tag)>(cmp_args);
      });
  } catch (const cafe::usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
