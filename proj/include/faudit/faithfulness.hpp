#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "faudit/explainers.hpp"
#include "faudit/heatmap.hpp"
#include "faudit/rng.hpp"
#include "faudit/tensor.hpp"

namespace faudit {

enum class FillKind { zero, blur };

/// Replacement values for perturbed pixels.
struct FillOperator {
  FillKind kind = FillKind::zero;
  double sigma = 3.0;  // blur only

  static FillOperator zero() { return {FillKind::zero, 0.0}; }
  static FillOperator blur(double sigma = 3.0) { return {FillKind::blur, sigma}; }

  /// "zero" or "blur" (with the sigma when it is not the default 3).
  std::string name() const;
  static FillOperator parse(const std::string& name);

  /// Image whose pixels replace deleted ones; same shape as `image`.
  Tensor reference(const Tensor& image) const;
};

/// Normalized 1-D Gaussian, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
/// Separable blur of one h x w plane, mirror-reflected border.
std::vector<double> gaussian_blur(std::span<const double> plane, std::size_t h, std::size_t w,
                                  double sigma);

/// Pixel indices by decreasing value; equal values keep row-major order.
std::vector<std::size_t> rank_pixels(std::span<const double> values);

/// Pixels perturbed at step i of `steps`: ceil(i * n / steps).
inline std::size_t pixels_at_step(std::size_t i, std::size_t steps, std::size_t n) {
  return (i * n + steps - 1) / steps;
}

enum class Direction { deletion, insertion };
std::string to_string(Direction d);

struct PerturbationCurve {
  Direction direction = Direction::deletion;
  std::vector<double> fractions;
  std::vector<double> probabilities;
  std::size_t target_class = 0;
  bool degenerate = false;
};

/// Pixels are removed (deletion) or restored (insertion) in heatmap order.
/// `target_class` is normally the model's prediction on the clean image.
PerturbationCurve perturbation_curve(const PredictFn& predict, const Tensor& image,
                                     const Heatmap& heatmap, const FillOperator& fill,
                                     Direction direction, std::size_t target_class,
                                     std::size_t steps = 20);
/// As above with the target fixed to the prediction on `image`.
PerturbationCurve deletion_curve(const PredictFn& predict, const Tensor& image,
                                 const Heatmap& heatmap, const FillOperator& fill,
                                 std::size_t steps = 20);
PerturbationCurve insertion_curve(const PredictFn& predict, const Tensor& image,
                                  const Heatmap& heatmap, const FillOperator& fill,
                                  std::size_t steps = 20);

/// Trapezoidal area under the curve.
double curve_auc(const PerturbationCurve& curve);
double curve_auc(std::span<const double> x, std::span<const double> y);

// ---- stability ----

/// Semantics-preserving augmentation ranges.
struct Augmentation {
  double max_rotation_deg = 15.0;
  int max_shift = 3;
  double noise_sigma = 0.02;
};

struct AugmentDraw {
  double angle_deg = 0.0;
  int dx = 0;
  int dy = 0;
};

/// Rotation about the image centre (nearest neighbour), then shift; pixels
/// from outside the image are 0.
std::vector<double> warp_plane(std::span<const double> plane, std::size_t h, std::size_t w,
                               const AugmentDraw& draw);
/// Maps a plane in augmented coordinates back onto the original grid.
std::vector<double> unwarp_plane(std::span<const double> plane, std::size_t h, std::size_t w,
                                 const AugmentDraw& draw);

AugmentDraw draw_augmentation(const Augmentation& aug, Rng& rng);
/// Warp every channel and add N(0, noise_sigma) noise.
Tensor augment(const Tensor& image, const Augmentation& aug, const AugmentDraw& draw, Rng& rng);

/// Pixels where any channel of the image is > 0.
std::vector<std::uint8_t> region_mask(const Tensor& image);

/// Heatmap for an arbitrary (possibly augmented) input.
using ExplainFn = std::function<Heatmap(const Tensor& image)>;

struct StabilityResult {
  double value = 0.0;
  /// Terms where either map had zero norm on the region; each contributes 0.
  std::size_t degenerate_terms = 0;
};

/// Cosine similarity of two maps over `region`. Returns 0 and sets `*ok`
/// to false when either side has zero norm there.
double region_cosine(std::span<const double> a, std::span<const double> b,
                     std::span<const std::uint8_t> region, bool* ok = nullptr);

/// Mean over k of cos(h(x), h(x'_k)) on `region`. The augmented map is
/// compared as is unless `align` is set.
StabilityResult stability(const ExplainFn& explain, const Tensor& image, const Heatmap& base,
                          std::size_t k, const Augmentation& aug,
                          std::span<const std::uint8_t> region, std::uint64_t seed,
                          bool align = false);
StabilityResult stability(const ExplainFn& explain, const Tensor& image, std::size_t k,
                          const Augmentation& aug, std::span<const std::uint8_t> region,
                          std::uint64_t seed, bool align = false);

// ---- alignment with the defect mask ----

/// Top (100 - percentile)% of pixels by rank against the mask.
double iou(const Heatmap& heatmap, std::span<const std::uint8_t> mask,
           double threshold_percentile = 50.0);

/// Spearman rho between heatmap and mask; 0 with `*defined = false` for a
/// constant heatmap. Throws if the mask is all one value.
double spearman_defect(const Heatmap& heatmap, std::span<const std::uint8_t> mask,
                       bool* defined = nullptr);

/// p(original) - p(top k% replaced by the fill reference), k in (0, 100].
double topk_drop(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                 int k_percent, const FillOperator& fill);
double topk_drop(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                 int k_percent, const FillOperator& fill, std::size_t target_class,
                 double clean_probability);

// ---- per-sample bundle ----

struct MetricConfig {
  std::size_t curve_steps = 20;
  std::size_t stability_k = 5;
  Augmentation augmentation;
  bool stability_align = false;
  std::vector<int> topk_percents = {5, 10, 20};
  double iou_percentile = 50.0;
};

/// Fill-dependent metrics of one heatmap.
struct HeatmapScores {
  std::size_t target_class = 0;
  PerturbationCurve deletion;
  PerturbationCurve insertion;
  double del_auc = 0.0;
  double ins_auc = 0.0;
  double iou = 0.0;
  double spearman_defect = 0.0;
  bool has_mask = false;
  std::map<int, double> topk_drop;
  std::vector<std::string> annotations;
};

/// Curves, AUCs, top-k drops and mask alignment. An empty or all-defect
/// mask leaves iou/spearman at 0 with has_mask false.
HeatmapScores score_heatmap(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                            std::span<const std::uint8_t> mask, const FillOperator& fill,
                            const MetricConfig& config);

}  // namespace faudit
