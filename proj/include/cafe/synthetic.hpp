#pragma once

// Synthetic benchmark generation: planted-router models, painted image sets,
// checkpoints and a ground-truth manifest, all deterministic in the seed.
// Every instance is re-verified by the ablation oracle before anything is
// declared generated.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cafe/io.hpp"
#include "cafe/planted.hpp"

namespace cafe {

inline constexpr int kManifestVersion = 1;

struct SyntheticConfig {
  ViTConfig vit;
  int n_images = 8;
  int n_local = 1;
  int n_nonlocal = 1;
  int sources_per_feature = 3;
  double strength = 4.0;
  int min_dist = 2;
  bool staggered_routers = false;
  std::uint64_t seed = 0;
};

template <typename T>
struct SyntheticDataset {
  PlantedModel<T> model;
  std::vector<std::pair<std::string, Tensor<T>>> images;  // (id, image)
  nlohmann::json manifest;
};

// Builds the planted model and image set in memory. Throws data_error when
// the generation-time ablation check fails.
template <typename T>
SyntheticDataset<T> gen_synthetic(const SyntheticConfig& cfg) {
  Rng rng(cfg.seed);
  Rng layout_rng = rng.fork(1);
  std::vector<PlantedFeatureSpec> specs = random_planted_specs(
      layout_rng, cfg.vit, cfg.n_nonlocal, cfg.n_local, cfg.sources_per_feature,
      cfg.min_dist, cfg.staggered_routers);
  for (auto& sp : specs) sp.strength = cfg.strength;

  SyntheticDataset<T> ds;
  ds.model = build_planted_suite<T>(cfg.vit, specs, rng.fork(2).next_u64());

  Rng img_rng = rng.fork(3);
  for (int i = 0; i < cfg.n_images; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "img_%03d", i);
    ds.images.emplace_back(id, make_planted_image(ds.model, img_rng));
  }

  PlantedCheck<T> chk =
      verify_planted(ds.model, std::max(1, cfg.n_images / 2), rng.fork(4).next_u64());
  if (!chk.pass())
    throw data_error("gen_synthetic: planted ablation check failed (drop " +
                     fmt_num(static_cast<double>(chk.min_source_blank_drop)) +
                     ", offpath " + fmt_num(static_cast<double>(chk.max_offpath_effect)) +
                     ", sink " + fmt_num(static_cast<double>(chk.max_sink_perturb)) + ")");

  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : ds.model.features) {
    feats.push_back({{"feature", f.index},
                     {"non_local", f.non_local},
                     {"sources", f.sources},
                     {"sink_token", f.sink_token},
                     {"router_block", f.router_block}});
  }
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& [id, img] : ds.images)
    imgs.push_back({{"id", id}, {"file", "images/" + id + ".ppm"}});
  ds.manifest = {
      {"format_version", kManifestVersion},
      {"seed", cfg.seed},
      {"grid", cfg.vit.grid()},
      {"vit_checkpoint", "vit.ckpt"},
      {"sae_checkpoint", "sae.ckpt"},
      {"features", feats},
      {"images", imgs},
      {"verification",
       {{"min_source_blank_drop", static_cast<double>(chk.min_source_blank_drop)},
        {"max_offpath_effect", static_cast<double>(chk.max_offpath_effect)},
        {"max_sink_perturb", static_cast<double>(chk.max_sink_perturb)}}}};
  return ds;
}

// Writes the dataset under `out_dir`: images/, vit.ckpt, sae.ckpt,
// manifest.json.
template <typename T>
void write_synthetic(const SyntheticDataset<T>& ds, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  for (const auto& [id, img] : ds.images)
    write_ppm((fs::path(out_dir) / "images" / (id + ".ppm")).string(), img);
  save_vit(ds.model.weights, (fs::path(out_dir) / "vit.ckpt").string());
  save_sae(ds.model.sae, (fs::path(out_dir) / "sae.ckpt").string());
  std::ofstream f((fs::path(out_dir) / "manifest.json").string());
  if (!f) throw data_error("cannot write manifest under " + out_dir);
  f << ds.manifest.dump(2) << '\n';
}

// Sparse nonnegative combinations of planted unit directions; the reference
// generation process for dictionary-recovery checks. Returns latents and the
// planted directions [n_dirs x n].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> gen_dictionary_latents(int n, int n_dirs,
                                                       int n_samples,
                                                       std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> dirs({n_dirs, n});
  for (int k = 0; k < n_dirs; ++k) {
    T nn = 0;
    for (int i = 0; i < n; ++i) {
      const T v = static_cast<T>(rng.normal());
      dirs(k, i) = v;
      nn = std::fma(v, v, nn);
    }
    const T inv = T(1) / std::sqrt(nn);
    for (int i = 0; i < n; ++i) dirs(k, i) *= inv;
  }
  Tensor<T> latents({n_samples, n});
  for (int s = 0; s < n_samples; ++s) {
    const int k_active = 1 + rng.uniform_int(3);
    for (int a = 0; a < k_active; ++a) {
      const int k = rng.uniform_int(n_dirs);
      const T coeff = static_cast<T>(0.5 + rng.uniform());
      for (int i = 0; i < n; ++i)
        latents(s, i) = std::fma(coeff, dirs(k, i), latents(s, i));
    }
  }
  return {std::move(latents), std::move(dirs)};
}

}  // namespace cafe
