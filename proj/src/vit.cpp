#include <cmath>
#include <stdexcept>

#include "faudit/models.hpp"
#include "faudit/ops.hpp"
#include "faudit/rng.hpp"

namespace faudit {

namespace {

Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data));
}

Tensor normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(data));
}

std::string block(std::size_t i, const char* suffix) {
  return "block" + std::to_string(i) + suffix;
}

}  // namespace

TinyViT::TinyViT(ModelConfig config) : config_(std::move(config)) {
  if (config_.arch != Arch::vit) throw std::invalid_argument("TinyViT: config is not a vit");
  const auto p = config_.patch, d = config_.embed_dim;
  if (p == 0 || config_.image_size % p != 0) {
    throw DimensionError("TinyViT: image size " + std::to_string(config_.image_size) +
                         " not divisible by patch " + std::to_string(p));
  }
  if (config_.heads == 0 || d % config_.heads != 0) {
    throw DimensionError("TinyViT: embed dim must be divisible by heads");
  }
  Rng rng(mix_seed(config_.init_seed, 2));
  const auto tokens = n_patches() + 1;
  add_param("patch.w", xavier({p * p, d}, p * p, d, rng));
  add_param("patch.b", Tensor::zeros({d}));
  add_param("cls", normal({1, d}, 0.02, rng));
  add_param("pos", normal({tokens, d}, 0.02, rng));
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const auto pre = "block" + std::to_string(l) + ".";
    add_param(pre + "qkv.w", xavier({d, 3 * d}, d, d, rng));
    add_param(pre + "qkv.b", Tensor::zeros({3 * d}));
    add_param(pre + "proj.w", xavier({d, d}, d, d, rng));
    add_param(pre + "proj.b", Tensor::zeros({d}));
    add_param(pre + "mlp1.w", xavier({d, config_.mlp_hidden}, d, config_.mlp_hidden, rng));
    add_param(pre + "mlp1.b", Tensor::zeros({config_.mlp_hidden}));
    add_param(pre + "mlp2.w", xavier({config_.mlp_hidden, d}, config_.mlp_hidden, d, rng));
    add_param(pre + "mlp2.b", Tensor::zeros({d}));
  }
  add_param("head.w", xavier({d, config_.n_classes}, d, config_.n_classes, rng));
  add_param("head.b", Tensor::zeros({config_.n_classes}));
}

std::size_t TinyViT::n_patches() const {
  const auto g = config_.image_size / config_.patch;
  return g * g;
}

std::vector<std::string> TinyViT::layer_names() const {
  std::vector<std::string> names = {"patch_embed", "tokens"};
  for (std::size_t l = 0; l < config_.depth; ++l) {
    names.push_back(block(l, "_attn_out"));
    names.push_back(block(l, "_out"));
  }
  names.push_back("cls_final");
  names.push_back("logits");
  return names;
}

InstrumentedForward TinyViT::forward(const Tensor& image,
                                     const std::set<std::string>& capture) const {
  validate_image(image);
  validate_capture(capture);
  using namespace ops;
  InstrumentedForward out;
  auto rec = [&](const std::string& name, const Tensor& t) {
    if (capture.count(name)) out.activations[name] = t;
    return t;
  };

  const auto d = config_.embed_dim, heads = config_.heads, hd = d / heads;
  const auto tokens = n_patches() + 1;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  auto emb = rec("patch_embed", add_row_bias(matmul(patchify(image, config_.patch), param("patch.w")),
                                             param("patch.b")));
  auto z = rec("tokens", add(concat_rows(param("cls"), emb), param("pos")));

  out.attention.depth = config_.depth;
  out.attention.heads = heads;
  out.attention.tokens = tokens;
  out.attention.weights.resize(config_.depth * heads * tokens * tokens);

  for (std::size_t l = 0; l < config_.depth; ++l) {
    const auto pre = "block" + std::to_string(l) + ".";
    auto qkv = add_row_bias(matmul(z, param(pre + "qkv.w")), param(pre + "qkv.b"));
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto q = slice_cols(qkv, h * hd, hd);
      auto k = slice_cols(qkv, d + h * hd, hd);
      auto v = slice_cols(qkv, 2 * d + h * hd, hd);
      auto attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt), -1);
      std::copy(attn.data().begin(), attn.data().end(),
                out.attention.weights.begin() +
                    static_cast<std::ptrdiff_t>((l * heads + h) * tokens * tokens));
      head_out.push_back(matmul(attn, v));
    }
    auto merged = heads == 1 ? head_out.front() : concat_cols(head_out);
    auto attn_out = add_row_bias(matmul(merged, param(pre + "proj.w")), param(pre + "proj.b"));
    z = rec(block(l, "_attn_out"), add(z, attn_out));
    auto hidden = relu(add_row_bias(matmul(z, param(pre + "mlp1.w")), param(pre + "mlp1.b")));
    auto mlp = add_row_bias(matmul(hidden, param(pre + "mlp2.w")), param(pre + "mlp2.b"));
    z = rec(block(l, "_out"), add(z, mlp));
  }

  auto cls = rec("cls_final", slice_rows(z, 0, 1));
  auto logits = add_row_bias(matmul(cls, param("head.w")), param("head.b"));
  out.logits = rec("logits", reshape(logits, {config_.n_classes}));
  return out;
}

std::unique_ptr<Classifier> TinyViT::clone() const {
  auto copy = std::make_unique<TinyViT>(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = copy->params_[i].value.mutable_data();
    std::copy(params_[i].value.data().begin(), params_[i].value.data().end(), dst.begin());
  }
  return copy;
}

}  // namespace faudit
