#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "faudit/models.hpp"
#include "faudit/ops.hpp"
#include "faudit/rng.hpp"
#include "json.hpp"

namespace faudit {

using nlohmann::json;

std::string to_string(Arch arch) { return arch == Arch::cnn ? "cnn" : "vit"; }

Arch arch_from_string(const std::string& name) {
  if (name == "cnn") return Arch::cnn;
  if (name == "vit") return Arch::vit;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

std::string ModelConfig::to_json() const {
  json j{{"arch", to_string(arch)},
         {"image_size", image_size},
         {"n_classes", n_classes},
         {"init_seed", init_seed}};
  if (arch == Arch::cnn) {
    j["conv1_channels"] = conv1_channels;
    j["conv2_channels"] = conv2_channels;
    j["residual"] = residual;
    j["cbam_reduction"] = cbam_reduction;
    j["spatial_kernel"] = spatial_kernel;
  } else {
    j["patch"] = patch;
    j["embed_dim"] = embed_dim;
    j["depth"] = depth;
    j["heads"] = heads;
    j["mlp_hidden"] = mlp_hidden;
  }
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.arch = arch_from_string(j.at("arch").get<std::string>());
  c.image_size = j.value("image_size", c.image_size);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.conv1_channels = j.value("conv1_channels", c.conv1_channels);
  c.conv2_channels = j.value("conv2_channels", c.conv2_channels);
  c.residual = j.value("residual", c.residual);
  c.cbam_reduction = j.value("cbam_reduction", c.cbam_reduction);
  c.spatial_kernel = j.value("spatial_kernel", c.spatial_kernel);
  c.patch = j.value("patch", c.patch);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  return c;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

const Tensor& InstrumentedForward::activation(const std::string& layer) const {
  auto it = activations.find(layer);
  if (it == activations.end()) throw std::invalid_argument("layer '" + layer + "' was not captured");
  return it->second;
}

std::vector<double> InstrumentedForward::captured_grad(const std::string& layer) const {
  return activation(layer).grad();
}

std::vector<Tensor> Classifier::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

Tensor& Classifier::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.value;
  throw std::invalid_argument("no parameter named '" + name + "'");
}

const Tensor& Classifier::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw std::invalid_argument("no parameter named '" + name + "'");
}

void Classifier::add_param(std::string name, Tensor value) {
  value.set_requires_grad(true);
  params_.push_back({std::move(name), std::move(value)});
}

void Classifier::validate_image(const Tensor& image) const {
  const auto s = config().image_size;
  if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != s || image.dim(2) != s) {
    throw DimensionError("expected image of shape [1," + std::to_string(s) + "," +
                         std::to_string(s) + "], got " + shape_str(image.shape()));
  }
}

void Classifier::validate_capture(const std::set<std::string>& capture) const {
  const auto names = layer_names();
  for (const auto& c : capture) {
    if (std::find(names.begin(), names.end(), c) == names.end()) {
      std::string known;
      for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
      throw std::invalid_argument("unknown capture layer '" + c + "' (known: " + known + ")");
    }
  }
}

namespace {

// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data));
}

class Recorder {
 public:
  Recorder(InstrumentedForward& out, const std::set<std::string>& capture)
      : out_(out), capture_(capture) {}
  const Tensor& operator()(const std::string& name, const Tensor& t) {
    if (capture_.count(name)) out_.activations[name] = t;
    return t;
  }

 private:
  InstrumentedForward& out_;
  const std::set<std::string>& capture_;
};

}  // namespace

TinyCnnCbam::TinyCnnCbam(ModelConfig config) : config_(std::move(config)) {
  if (config_.arch != Arch::cnn) throw std::invalid_argument("TinyCnnCbam: config is not a cnn");
  if (config_.image_size % 4 != 0) throw DimensionError("TinyCnnCbam: image size must be divisible by 4");
  Rng rng(mix_seed(config_.init_seed, 1));
  const auto c1 = config_.conv1_channels, c2 = config_.conv2_channels;
  const auto hidden = std::max<std::size_t>(1, c2 / config_.cbam_reduction);
  const auto sk = config_.spatial_kernel;
  add_param("conv1.w", uniform_init({c1, 1, 3, 3}, 9, rng));
  add_param("conv1.b", uniform_init({c1}, 9, rng));
  add_param("conv2.w", uniform_init({c2, c1, 3, 3}, c1 * 9, rng));
  add_param("conv2.b", uniform_init({c2}, c1 * 9, rng));
  if (config_.residual) {
    add_param("res_a.w", uniform_init({c2, c2, 3, 3}, c2 * 9, rng));
    add_param("res_a.b", uniform_init({c2}, c2 * 9, rng));
    add_param("res_b.w", uniform_init({c2, c2, 3, 3}, c2 * 9, rng));
    add_param("res_b.b", uniform_init({c2}, c2 * 9, rng));
  }
  add_param("cbam.mlp1.w", uniform_init({c2, hidden}, c2, rng));
  add_param("cbam.mlp1.b", uniform_init({hidden}, c2, rng));
  add_param("cbam.mlp2.w", uniform_init({hidden, c2}, hidden, rng));
  add_param("cbam.mlp2.b", uniform_init({c2}, hidden, rng));
  add_param("cbam.spatial.w", uniform_init({1, 2, sk, sk}, 2 * sk * sk, rng));
  add_param("cbam.spatial.b", uniform_init({1}, 2 * sk * sk, rng));
  add_param("head.w", uniform_init({c2, config_.n_classes}, c2, rng));
  add_param("head.b", uniform_init({config_.n_classes}, c2, rng));
}

std::vector<std::string> TinyCnnCbam::layer_names() const {
  std::vector<std::string> names = {"conv1", "block1_out", "conv2", "block2_out"};
  if (config_.residual) names.push_back("res_out");
  names.insert(names.end(), {"cbam_channel_att", "cbam_channel_out", "cbam_spatial_att",
                             "cbam_out", "gap", "logits"});
  return names;
}

InstrumentedForward TinyCnnCbam::forward(const Tensor& image,
                                         const std::set<std::string>& capture) const {
  validate_image(image);
  validate_capture(capture);
  using namespace ops;
  InstrumentedForward out;
  Recorder rec(out, capture);

  auto h = rec("conv1", relu(add_channel_bias(conv2d(image, param("conv1.w"), 1, 1), param("conv1.b"))));
  h = rec("block1_out", pool2d(h, PoolKind::max, 2));
  h = rec("conv2", relu(add_channel_bias(conv2d(h, param("conv2.w"), 1, 1), param("conv2.b"))));
  h = rec("block2_out", pool2d(h, PoolKind::max, 2));
  if (config_.residual) {
    // y = F(x) + x
    auto f = relu(add_channel_bias(conv2d(h, param("res_a.w"), 1, 1), param("res_a.b")));
    f = add_channel_bias(conv2d(f, param("res_b.w"), 1, 1), param("res_b.b"));
    h = rec("res_out", add(f, h));
  }

  const std::size_t c = h.dim(0), hh = h.dim(1), ww = h.dim(2);
  auto mlp = [&](const Tensor& v) {
    auto z = relu(add_row_bias(matmul(v, param("cbam.mlp1.w")), param("cbam.mlp1.b")));
    return add_row_bias(matmul(z, param("cbam.mlp2.w")), param("cbam.mlp2.b"));
  };
  auto avg = reshape(pool2d(h, PoolKind::global_avg), {1, c});
  auto mx = reshape(pool2d(h, PoolKind::global_max), {1, c});
  auto channel_att = rec("cbam_channel_att", sigmoid(add(mlp(avg), mlp(mx))));
  auto refined = rec("cbam_channel_out", scale_channels(h, channel_att));

  auto pooled = concat_rows(reshape(channel_mean(refined), {1, hh * ww}),
                            reshape(channel_max(refined), {1, hh * ww}));
  const auto pad = config_.spatial_kernel / 2;
  auto spatial_att = rec("cbam_spatial_att",
                         sigmoid(add_channel_bias(conv2d(reshape(pooled, {2, hh, ww}),
                                                         param("cbam.spatial.w"), 1, pad),
                                                  param("cbam.spatial.b"))));
  auto cbam_out = rec("cbam_out", scale_spatial(refined, spatial_att));

  auto gap = rec("gap", pool2d(cbam_out, PoolKind::global_avg));
  auto logits = add_row_bias(matmul(reshape(gap, {1, c}), param("head.w")), param("head.b"));
  out.logits = rec("logits", reshape(logits, {config_.n_classes}));
  return out;
}

std::unique_ptr<Classifier> TinyCnnCbam::clone() const {
  auto copy = std::make_unique<TinyCnnCbam>(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = copy->params_[i].value.mutable_data();
    std::copy(params_[i].value.data().begin(), params_[i].value.data().end(), dst.begin());
  }
  return copy;
}

std::unique_ptr<Classifier> make_model(const ModelConfig& config) {
  if (config.arch == Arch::cnn) return std::make_unique<TinyCnnCbam>(config);
  return std::make_unique<TinyViT>(config);
}

std::vector<double> predict_proba(const Classifier& model, const Tensor& image) {
  NoGradGuard guard;
  auto probs = ops::softmax(model.forward(image).logits);
  return {probs.data().begin(), probs.data().end()};
}

std::size_t predict_class(const Classifier& model, const Tensor& image) {
  return argmax(predict_proba(model, image));
}

void save_model(const std::filesystem::path& path, const Classifier& model) {
  Container c;
  c.meta_json = model.config().to_json();
  for (const auto& p : model.parameters()) c.records.push_back({p.name, p.value.detach()});
  write_container(path, c);
}

std::unique_ptr<Classifier> load_model(const std::filesystem::path& path) {
  auto c = read_container(path);
  auto model = make_model(ModelConfig::from_json(c.meta_json));
  for (auto& p : model->parameters()) {
    const auto& stored = c.get(p.name);
    if (stored.shape() != p.value.shape()) {
      throw FormatError("checkpoint: parameter '" + p.name + "' has shape " +
                        shape_str(stored.shape()) + ", model expects " + shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
  return model;
}

}  // namespace faudit
