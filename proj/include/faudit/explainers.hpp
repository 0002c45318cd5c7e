#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "faudit/heatmap.hpp"
#include "faudit/models.hpp"
#include "faudit/tensor.hpp"

namespace faudit {

/// Black-box view of a classifier: image[1,H,W] -> class probabilities.
/// Must be safe to call from several threads at once.
using PredictFn = std::function<std::vector<double>(const Tensor& image)>;

/// Forward-only softmax predictor over a frozen model. The model must
/// outlive the returned function.
PredictFn predictor(const Classifier& model);

/// Raised for explainer preconditions (wrong architecture, bad layer, ...).
class ExplainerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Explainer ids used in records and configs.
inline constexpr const char* kGradCam = "gradcam";
inline constexpr const char* kGradCamVit = "gradcam_vit";
inline constexpr const char* kRollout = "rollout";
inline constexpr const char* kClsLast = "cls_last";
inline constexpr const char* kRise = "rise";
inline constexpr const char* kRandom = "random";

/// Ids valid for a given architecture. Black-box models only get the
/// forward-only ones (rise, random).
std::vector<std::string> explainers_for(Arch arch);
bool needs_model_internals(const std::string& explainer);
bool supports(const std::string& explainer, Arch arch);

// ---- Grad-CAM ----

/// Layer used for Grad-CAM by default: the CBAM output on the CNN, the
/// post-attention residual stream of the last block on the ViT.
std::string default_gradcam_layer(const Classifier& model);

/// Grad-CAM from precomputed activations and gradients in [C, h, w] layout.
/// Returns the raw (pre-normalization) map bilinearly upsampled to out_h x out_w.
std::vector<double> grad_cam_raw(std::span<const double> activation, std::span<const double> grad,
                                 std::size_t channels, std::size_t h, std::size_t w,
                                 std::size_t out_h, std::size_t out_w);

/// Gradient of the target logit with respect to `layer`, weighted per channel.
/// Token layers ([T, D]) drop the CLS row and are read as D maps over the patch grid.
Heatmap grad_cam(const Classifier& model, const Tensor& image, std::size_t target_class,
                 const std::string& layer);

// ---- attention readouts ----

/// R^(1..L) with R^(l) = (0.5 * mean_h A^(l) + 0.5 I) R^(l-1), each T x T row-major.
std::vector<std::vector<double>> rollout_matrices(const AttentionStack& attention);
/// CLS row of R^(L).
std::vector<double> rollout_cls_row(const AttentionStack& attention);
/// Head-averaged CLS row of the final layer, no identity mixing.
std::vector<double> last_layer_cls_row(const AttentionStack& attention);

/// Patch part of a CLS row -> nearest-upsampled, normalized heatmap.
Heatmap token_row_heatmap(std::span<const double> cls_row, std::size_t image_size,
                          std::string explainer);

Heatmap attention_rollout(const Classifier& model, const Tensor& image);
Heatmap cls_attention_last_layer(const Classifier& model, const Tensor& image);

// ---- RISE ----

struct RiseConfig {
  std::size_t n_masks = 4000;
  std::size_t grid = 8;
  double p = 0.5;
  std::uint64_t seed = 0;
  /// Random sub-cell offset per mask.
  bool random_shift = true;
  /// Worker threads for the forward passes; results are reduced in mask order.
  std::size_t threads = 1;

  void validate(std::size_t height, std::size_t width) const;
};

/// Mask `index` of the sequence defined by `config`, values in [0,1], H x W.
std::vector<double> rise_mask(const RiseConfig& config, std::size_t index, std::size_t height,
                              std::size_t width);

/// Raw saliency (1/N) sum_i f_c(x * M_i) M_i for an explicit mask list.
std::vector<double> rise_saliency(const PredictFn& predict, const Tensor& image,
                                  std::size_t target_class,
                                  std::span<const std::vector<double>> masks);

Heatmap rise(const PredictFn& predict, const Tensor& image, std::size_t target_class,
             const RiseConfig& config);

// ---- random baseline ----

/// Uniformly random pixel ranking, ranks scaled to [0,1].
Heatmap random_baseline(std::size_t height, std::size_t width, std::uint64_t seed);

// ---- dispatch ----

struct ExplainOptions {
  RiseConfig rise;
  /// Empty means default_gradcam_layer.
  std::string gradcam_layer;
  std::uint64_t seed = 0;
};

/// Runs explainer `id`. `model` may be null for forward-only explainers.
Heatmap explain(const std::string& id, const Classifier* model, const PredictFn& predict,
                const Tensor& image, std::size_t target_class, const ExplainOptions& options);

}  // namespace faudit
