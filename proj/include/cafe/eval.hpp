#pragma once

// Faithfulness evaluation: patch-insertion curves with their AUC, method
// comparison tables against the activation-ranking baseline, and the
// non-locality scanner that flags features whose ERF mass sits away from
// their top-activation patch.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cafe/attribution.hpp"
#include "cafe/erf.hpp"

namespace cafe {

// Target excluded from aggregates because its full-image activation is too
// small to normalize against.
struct skip_target_error : data_error {
  using data_error::data_error;
};

// Descending score order, ties broken by lowest index.
template <typename T>
std::vector<int> rank_patches(const std::vector<T>& scores) {
  require(!scores.empty(), "rank_patches: empty map");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return order;
}

template <typename T>
std::vector<int> rank_patches(const ERFMap<T>& map) {
  return rank_patches(map.scores);
}

// Activation ranking over patch tokens only; CLS is not an image patch.
template <typename T>
std::vector<int> rank_patches(const ActivationMap<T>& map) {
  const int off = map.has_cls ? 1 : 0;
  std::vector<T> patch_scores(map.values.begin() + off, map.values.end());
  return rank_patches(patch_scores);
}

template <typename T>
struct InsertionCurve {
  std::string ranking_id;
  std::vector<T> r;  // r[0..P], activation recovery normalized by the full image
  T auc = 0;         // mean of r[1..P]
};

// Mean of r_1..r_P; the 0-patch point is excluded by convention.
template <typename T>
T auc(const InsertionCurve<T>& curve) {
  require(curve.r.size() >= 2, "auc: incomplete curve");
  T acc = 0;
  for (std::size_t i = 1; i < curve.r.size(); ++i) acc += curve.r[i];
  return acc / static_cast<T>(curve.r.size() - 1);
}

// Starts from the baseline image and inserts original patches in ranking
// order, one per step, recording z_k recovery. The final step composites
// every patch, which reproduces the original image byte for byte, so
// r_P = 1 up to float division.
template <typename T>
InsertionCurve<T> insertion_curve(const ViTWeights<T>& w, const SAEModel<T>& s,
                                  const TargetDesc& target, const Tensor<T>& image,
                                  const std::vector<int>& ranking,
                                  const Tensor<T>& baseline,
                                  const std::string& ranking_id = "") {
  const ViTConfig& cfg = w.cfg;
  const int p = cfg.n_patches();
  require(static_cast<int>(ranking.size()) == p,
          "insertion_curve: ranking must cover every patch");

  const T z_full = feature_value(w, s, image, target);
  if (!(z_full > static_cast<T>(1e-6)))
    throw skip_target_error("insertion_curve: full-image activation below 1e-6");

  InsertionCurve<T> curve;
  curve.ranking_id = ranking_id;
  curve.r.resize(static_cast<std::size_t>(p) + 1);
  std::vector<char> keep(static_cast<std::size_t>(p), 0);
  for (int i = 0; i <= p; ++i) {
    if (i > 0) keep[static_cast<std::size_t>(ranking[static_cast<std::size_t>(i - 1)])] = 1;
    Tensor<T> img = composite_patches(cfg, image, baseline, keep);
    curve.r[static_cast<std::size_t>(i)] = feature_value(w, s, img, target) / z_full;
  }
  curve.auc = auc(curve);
  return curve;
}

template <typename T>
struct ComparisonRow {
  std::string method;
  int layer = 0;
  T mean_auc = 0;
  T sd = 0;
  T win_rate = 0;  // vs the activation baseline; ties count 0.5
  int n_targets = 0;
};

template <typename T>
struct CurveRecord {
  std::string target_id;
  std::string method;
  InsertionCurve<T> curve;
};

template <typename T>
struct EvalTarget {
  TargetSpec spec;
  Tensor<T> image;
  std::string image_id;
};

inline constexpr const char* kActivationRanking = "activation";

template <typename T>
struct ComparisonResult {
  std::vector<ComparisonRow<T>> rows;
  std::vector<CurveRecord<T>> curves;
  std::vector<std::string> skipped;  // target ids excluded from aggregates
};

// Insertion AUC per method over a target set, with the activation ranking as
// the common baseline. Methods run per target; a target is dropped for all
// methods if any ranking skips it, keeping aggregates comparable.
template <typename T>
ComparisonResult<T> compare_methods(const ViTWeights<T>& w, const SAEModel<T>& s,
                                    const std::vector<EvalTarget<T>>& targets,
                                    const std::vector<Method>& methods,
                                    const AttributionRequest<T>& params) {
  require(!targets.empty(), "compare_methods: empty target set");
  ComparisonResult<T> out;
  std::vector<std::string> names{kActivationRanking};
  for (Method m : methods) names.push_back(method_name(m));

  std::vector<std::vector<T>> aucs(names.size());
  for (const EvalTarget<T>& tgt : targets) {
    const std::string tid = tgt.image_id + ":L" + std::to_string(tgt.spec.layer) +
                            ":f" + std::to_string(tgt.spec.feature) + ":t" +
                            std::to_string(tgt.spec.token);
    TargetDesc desc;
    desc.layer = tgt.spec.layer;
    desc.token = tgt.spec.token;
    desc.feature = tgt.spec.feature;
    desc.image_id = tgt.image_id;
    Tensor<T> baseline = params.baseline == BaselinePolicy::kZero
                             ? Tensor<T>::zeros(tgt.image.shape())
                             : params.baseline_image;
    try {
      std::vector<CurveRecord<T>> recs;
      // activation baseline ranking
      ActivationMap<T> act =
          activation_map(w, s, tgt.image, tgt.spec.layer, tgt.spec.feature, tgt.image_id);
      recs.push_back({tid, kActivationRanking,
                      insertion_curve(w, s, desc, tgt.image, rank_patches(act),
                                      baseline, kActivationRanking)});
      for (Method m : methods) {
        AttributionRequest<T> req = params;
        ERFMap<T> erf = compute_erf(m, w, s, tgt.spec, tgt.image, req, tgt.image_id);
        recs.push_back({tid, method_name(m),
                        insertion_curve(w, s, desc, tgt.image, rank_patches(erf),
                                        baseline, method_name(m))});
      }
      for (std::size_t i = 0; i < recs.size(); ++i)
        aucs[i].push_back(recs[i].curve.auc);
      for (auto& r : recs) out.curves.push_back(std::move(r));
    } catch (const skip_target_error&) {
      out.skipped.push_back(tid);
    }
  }
  if (aucs[0].empty()) throw data_error("compare_methods: all targets skipped");

  const int n = static_cast<int>(aucs[0].size());
  for (std::size_t mi = 0; mi < names.size(); ++mi) {
    ComparisonRow<T> row;
    row.method = names[mi];
    row.layer = targets[0].spec.layer;
    row.n_targets = n;
    T mean = 0;
    for (T v : aucs[mi]) mean += v;
    mean /= static_cast<T>(n);
    T var = 0;
    for (T v : aucs[mi]) var += (v - mean) * (v - mean);
    row.mean_auc = mean;
    row.sd = n > 1 ? std::sqrt(var / static_cast<T>(n - 1)) : T(0);
    T wins = 0;
    for (int i = 0; i < n; ++i) {
      const T a = aucs[mi][static_cast<std::size_t>(i)];
      const T b = aucs[0][static_cast<std::size_t>(i)];
      wins += a > b ? T(1) : (a == b ? T(0.5) : T(0));
    }
    row.win_rate = wins / static_cast<T>(n);
    out.rows.push_back(row);
  }
  return out;
}

// sigma = 1 - (positive ERF mass within Chebyshev radius r of the
// activation-argmax patch) / (total positive mass). 0 when there is no
// positive mass; 1 for a CLS argmax, which has no patch neighborhood.
template <typename T>
T nonlocality_score(const ActivationMap<T>& act, const ERFMap<T>& erf, int radius) {
  require(act.layer == erf.target.layer && act.feature == erf.target.feature &&
              act.image_id == erf.target.image_id,
          "nonlocality_score: maps refer to different targets");
  T total = 0;
  for (T v : erf.scores)
    if (v > T(0)) total += v;
  if (total < static_cast<T>(1e-12)) return T(0);

  const int off = act.has_cls ? 1 : 0;
  if (act.has_cls && act.argmax == 0) return T(1);
  const int apatch = act.argmax - off;
  const int arow = apatch / act.grid, acol = apatch % act.grid;
  T near = 0;
  for (int p = 0; p < erf.patches(); ++p) {
    const T v = erf.scores[static_cast<std::size_t>(p)];
    if (v <= T(0)) continue;
    const int dr = std::abs(erf.row_of(p) - arow);
    const int dc = std::abs(erf.col_of(p) - acol);
    if (std::max(dr, dc) <= radius) near += v;
  }
  return T(1) - near / total;
}

template <typename T>
struct NonlocalityEntry {
  int layer = 0;
  int feature = 0;
  T sigma = 0;  // median over firing images
  bool flagged = false;
  int n_firing_images = 0;
};

template <typename T>
struct NonlocalityReport {
  std::vector<NonlocalityEntry<T>> entries;
  std::vector<std::pair<int, int>> never_fired;  // (layer, feature)
  // flagged count per scanned layer, aligned with `layers`
  std::vector<int> layers;
  std::vector<int> flagged_counts;
};

// Scans features 0..N-1 per layer over an image set. A feature is non-local
// when the median sigma over the images where it fires exceeds theta.
// Features that never fire are listed separately.
template <typename T>
NonlocalityReport<T> layer_scan(const ViTWeights<T>& w,
                                const std::vector<std::pair<int, const SAEModel<T>*>>& saes,
                                const std::vector<std::pair<std::string, Tensor<T>>>& images,
                                int n_features, int radius, T theta,
                                const AttributionRequest<T>& params) {
  NonlocalityReport<T> rep;
  for (const auto& [layer, sae] : saes) {
    rep.layers.push_back(layer);
    int flagged_count = 0;
    for (int f = 0; f < n_features; ++f) {
      std::vector<T> sigmas;
      for (const auto& [image_id, image] : images) {
        ActivationMap<T> act = activation_map(w, *sae, image, layer, f, image_id);
        if (!(act.max_value() > T(0))) continue;
        TargetSpec spec = select_target(act, SelectPolicy::kMaxActivation);
        AttributionRequest<T> req = params;
        ERFMap<T> erf = compute_erf(req.method, w, *sae, spec, image, req, image_id);
        sigmas.push_back(nonlocality_score(act, erf, radius));
      }
      if (sigmas.empty()) {
        rep.never_fired.emplace_back(layer, f);
        continue;
      }
      std::sort(sigmas.begin(), sigmas.end());
      const std::size_t n = sigmas.size();
      const T median = n % 2 ? sigmas[n / 2]
                             : (sigmas[n / 2 - 1] + sigmas[n / 2]) / T(2);
      NonlocalityEntry<T> e;
      e.layer = layer;
      e.feature = f;
      e.sigma = median;
      e.flagged = median > theta;
      e.n_firing_images = static_cast<int>(n);
      if (e.flagged) ++flagged_count;
      rep.entries.push_back(e);
    }
    rep.flagged_counts.push_back(flagged_count);
  }
  return rep;
}

}  // namespace cafe
