#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "faudit/container.hpp"
#include "faudit/tensor.hpp"

namespace faudit {

enum class Arch { cnn, vit };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& name);

struct ModelConfig {
  Arch arch = Arch::cnn;
  std::size_t image_size = 32;
  std::size_t n_classes = 5;
  std::uint64_t init_seed = 0;

  // CNN
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  bool residual = true;
  std::size_t cbam_reduction = 4;
  std::size_t spatial_kernel = 7;

  // ViT
  std::size_t patch = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 2;
  std::size_t mlp_hidden = 128;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

/// Attention weights of every layer and head, [depth][heads][tokens][tokens]
/// flattened row-major. Token 0 is CLS.
struct AttentionStack {
  std::size_t depth = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> weights;

  double at(std::size_t layer, std::size_t head, std::size_t row, std::size_t col) const {
    return weights[((layer * heads + head) * tokens + row) * tokens + col];
  }
  double& at(std::size_t layer, std::size_t head, std::size_t row, std::size_t col) {
    return weights[((layer * heads + head) * tokens + row) * tokens + col];
  }
  bool empty() const { return depth == 0; }
};

/// Result of an instrumented forward pass.
struct InstrumentedForward {
  Tensor logits;
  std::map<std::string, Tensor> activations;
  AttentionStack attention;  // empty for the CNN

  const Tensor& activation(const std::string& layer) const;
  /// Gradient reaching a captured activation; valid after backward().
  std::vector<double> captured_grad(const std::string& layer) const;
};

/// Common surface of the two reference classifiers.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual const ModelConfig& config() const = 0;
  virtual std::vector<std::string> layer_names() const = 0;

  /// Full forward pass over image[1,H,W]. Throws std::invalid_argument for
  /// capture names the model does not have.
  virtual InstrumentedForward forward(const Tensor& image,
                                      const std::set<std::string>& capture = {}) const = 0;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;

  std::size_t n_classes() const { return config().n_classes; }

  /// Deep copy of the parameters.
  virtual std::unique_ptr<Classifier> clone() const = 0;

 protected:
  void add_param(std::string name, Tensor value);
  void validate_image(const Tensor& image) const;
  void validate_capture(const std::set<std::string>& capture) const;

  std::vector<NamedTensor> params_;
};

/// Conv/pool backbone, optional residual block, CBAM, GAP, linear head.
class TinyCnnCbam final : public Classifier {
 public:
  explicit TinyCnnCbam(ModelConfig config);

  const ModelConfig& config() const override { return config_; }
  std::vector<std::string> layer_names() const override;
  InstrumentedForward forward(const Tensor& image,
                              const std::set<std::string>& capture = {}) const override;
  std::unique_ptr<Classifier> clone() const override;

 private:
  ModelConfig config_;
};

/// Patch-embedding ViT with a CLS token, plain (norm-free) blocks.
class TinyViT final : public Classifier {
 public:
  explicit TinyViT(ModelConfig config);

  const ModelConfig& config() const override { return config_; }
  std::vector<std::string> layer_names() const override;
  InstrumentedForward forward(const Tensor& image,
                              const std::set<std::string>& capture = {}) const override;
  std::unique_ptr<Classifier> clone() const override;

  std::size_t n_patches() const;

 private:
  ModelConfig config_;
};

std::unique_ptr<Classifier> make_model(const ModelConfig& config);

/// Softmax of the logits, computed without recording gradients.
std::vector<double> predict_proba(const Classifier& model, const Tensor& image);
std::size_t predict_class(const Classifier& model, const Tensor& image);

void save_model(const std::filesystem::path& path, const Classifier& model);
std::unique_ptr<Classifier> load_model(const std::filesystem::path& path);

/// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

}  // namespace faudit
