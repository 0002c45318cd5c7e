#include "faudit/explainers.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "faudit/ops.hpp"
#include "faudit/rng.hpp"

namespace faudit {

PredictFn predictor(const Classifier& model) {
  return [&model](const Tensor& image) { return predict_proba(model, image); };
}

std::vector<std::string> explainers_for(Arch arch) {
  if (arch == Arch::cnn) return {kGradCam, kRise, kRandom};
  return {kRollout, kClsLast, kGradCamVit, kRise, kRandom};
}

bool needs_model_internals(const std::string& explainer) {
  return explainer != kRise && explainer != kRandom;
}

bool supports(const std::string& explainer, Arch arch) {
  const auto ids = explainers_for(arch);
  return std::find(ids.begin(), ids.end(), explainer) != ids.end();
}

std::string default_gradcam_layer(const Classifier& model) {
  if (model.config().arch == Arch::cnn) return "cbam_out";
  return "block" + std::to_string(model.config().depth - 1) + "_attn_out";
}

std::vector<double> grad_cam_raw(std::span<const double> activation, std::span<const double> grad,
                                 std::size_t channels, std::size_t h, std::size_t w,
                                 std::size_t out_h, std::size_t out_w) {
  const std::size_t hw = h * w;
  if (activation.size() != channels * hw || grad.size() != channels * hw || hw == 0) {
    throw ExplainerError("grad_cam: activation/gradient size does not match [C,h,w]");
  }
  std::vector<double> cam(hw, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto g = grad.subspan(c * hw, hw);
    const double alpha = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(hw);
    const auto a = activation.subspan(c * hw, hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * a[i];
  }
  for (double& v : cam) v = std::max(v, 0.0);
  return upsample_bilinear(cam, h, w, out_h, out_w);
}

Heatmap grad_cam(const Classifier& model, const Tensor& image, std::size_t target_class,
                 const std::string& layer) {
  if (target_class >= model.n_classes()) {
    throw ExplainerError("grad_cam: class " + std::to_string(target_class) + " out of range");
  }
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    throw ExplainerError("grad_cam: unknown layer '" + layer + "'");
  }
  const std::size_t size = model.config().image_size;

  GradModeGuard recording(true);
  Tape::current().clear();
  auto fwd = model.forward(image, {layer});
  const Tensor& act = fwd.activation(layer);

  std::size_t channels = 0, h = 0, w = 0;
  bool tokens = false;
  if (act.rank() == 3) {
    channels = act.dim(0), h = act.dim(1), w = act.dim(2);
  } else if (act.rank() == 2 && model.config().arch == Arch::vit) {
    const std::size_t n = act.dim(0) - 1;
    const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) throw ExplainerError("grad_cam: token count is not a square grid");
    channels = act.dim(1), h = g, w = g;
    tokens = true;
  } else {
    Tape::current().clear();
    throw ExplainerError("grad_cam: layer '" + layer + "' is not spatial (shape " +
                         shape_str(act.shape()) + ")");
  }

  std::vector<double> onehot(model.n_classes(), 0.0);
  onehot[target_class] = 1.0;
  auto loss = ops::sum(ops::mul(fwd.logits, Tensor({model.n_classes()}, onehot)));
  backward(loss, BackwardOptions{.accumulate_leaf_grads = false});

  std::vector<double> a(act.data().begin(), act.data().end());
  std::vector<double> g = act.grad();
  if (tokens) {
    // [T, D] with CLS at row 0 -> [D, n] over the patch grid.
    const std::size_t n = h * w;
    std::vector<double> a2(channels * n), g2(channels * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c) {
        a2[c * n + i] = a[(i + 1) * channels + c];
        g2[c * n + i] = g[(i + 1) * channels + c];
      }
    a = std::move(a2);
    g = std::move(g2);
  }
  auto raw = grad_cam_raw(a, g, channels, h, w, size, size);
  auto map = normalize_heatmap(std::move(raw), size, size,
                               model.config().arch == Arch::cnn ? kGradCam : kGradCamVit);
  map.target_class = target_class;
  return map;
}

namespace {

void check_stack(const AttentionStack& att) {
  if (att.empty() || att.heads == 0 || att.tokens < 2) {
    throw ExplainerError("attention readout needs a model with a CLS token and attention stack");
  }
  if (att.weights.size() != att.depth * att.heads * att.tokens * att.tokens) {
    throw ExplainerError("attention stack has inconsistent size");
  }
}

std::vector<double> head_mean(const AttentionStack& att, std::size_t layer) {
  const std::size_t t = att.tokens;
  std::vector<double> m(t * t, 0.0);
  for (std::size_t h = 0; h < att.heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) m[i * t + j] += att.at(layer, h, i, j);
  for (double& v : m) v /= static_cast<double>(att.heads);
  return m;
}

}  // namespace

std::vector<std::vector<double>> rollout_matrices(const AttentionStack& attention) {
  check_stack(attention);
  const std::size_t t = attention.tokens;
  std::vector<std::vector<double>> out;
  out.reserve(attention.depth);
  std::vector<double> r(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) r[i * t + i] = 1.0;
  for (std::size_t l = 0; l < attention.depth; ++l) {
    auto a = head_mean(attention, l);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) a[i * t + j] *= 0.5;
      a[i * t + i] += 0.5;
    }
    std::vector<double> next(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < t; ++k) {
        const double aik = a[i * t + k];
        if (aik == 0.0) continue;
        for (std::size_t j = 0; j < t; ++j) next[i * t + j] += aik * r[k * t + j];
      }
    r = next;
    out.push_back(std::move(next));
  }
  return out;
}

std::vector<double> rollout_cls_row(const AttentionStack& attention) {
  const auto mats = rollout_matrices(attention);
  const auto& r = mats.back();
  return {r.begin(), r.begin() + static_cast<std::ptrdiff_t>(attention.tokens)};
}

std::vector<double> last_layer_cls_row(const AttentionStack& attention) {
  check_stack(attention);
  const auto m = head_mean(attention, attention.depth - 1);
  return {m.begin(), m.begin() + static_cast<std::ptrdiff_t>(attention.tokens)};
}

Heatmap token_row_heatmap(std::span<const double> cls_row, std::size_t image_size,
                          std::string explainer) {
  const std::size_t n = cls_row.size() - 1;
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || g * g != n || image_size % g != 0) {
    throw ExplainerError("attention readout: " + std::to_string(n) +
                         " patch tokens do not tile the image");
  }
  auto up = upsample_nearest(cls_row.subspan(1), g, g, image_size, image_size);
  return normalize_heatmap(std::move(up), image_size, image_size, std::move(explainer));
}

Heatmap attention_rollout(const Classifier& model, const Tensor& image) {
  NoGradGuard no_grad;
  const auto fwd = model.forward(image);
  auto map = token_row_heatmap(rollout_cls_row(fwd.attention), model.config().image_size, kRollout);
  map.target_class = argmax(fwd.logits.data());
  return map;
}

Heatmap cls_attention_last_layer(const Classifier& model, const Tensor& image) {
  NoGradGuard no_grad;
  const auto fwd = model.forward(image);
  auto map =
      token_row_heatmap(last_layer_cls_row(fwd.attention), model.config().image_size, kClsLast);
  map.target_class = argmax(fwd.logits.data());
  return map;
}

void RiseConfig::validate(std::size_t height, std::size_t width) const {
  if (n_masks < 1) throw std::invalid_argument("rise: n_masks must be >= 1");
  if (grid < 1 || grid > std::min(height, width)) {
    throw std::invalid_argument("rise: grid " + std::to_string(grid) + " outside [1, " +
                                std::to_string(std::min(height, width)) + "]");
  }
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("rise: p must lie in (0,1)");
}

std::vector<double> rise_mask(const RiseConfig& config, std::size_t index, std::size_t height,
                              std::size_t width) {
  Rng rng(mix_seed(config.seed, index));
  const std::size_t s = config.grid;
  std::vector<double> cells(s * s);
  for (auto& c : cells) c = rng.bernoulli(config.p) ? 1.0 : 0.0;
  if (!config.random_shift) return upsample_bilinear(cells, s, s, height, width);

  const std::size_t cell_h = (height + s - 1) / s, cell_w = (width + s - 1) / s;
  const std::size_t up_h = (s + 1) * cell_h, up_w = (s + 1) * cell_w;
  const auto up = upsample_bilinear(cells, s, s, up_h, up_w);
  const auto dy = static_cast<std::size_t>(rng.below(cell_h));
  const auto dx = static_cast<std::size_t>(rng.below(cell_w));
  std::vector<double> mask(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) mask[y * width + x] = up[(y + dy) * up_w + x + dx];
  return mask;
}

namespace {

double masked_score(const PredictFn& predict, const Tensor& image, std::size_t target,
                    std::span<const double> mask, std::size_t index) {
  std::vector<double> data(image.data().begin(), image.data().end());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] *= mask[i];
  std::vector<double> probs;
  try {
    probs = predict(Tensor(image.shape(), std::move(data)));
  } catch (const std::exception& e) {
    throw std::runtime_error("rise: prediction failed on mask " + std::to_string(index) + ": " +
                             e.what());
  }
  if (target >= probs.size()) {
    throw std::runtime_error("rise: class " + std::to_string(target) + " missing from mask " +
                             std::to_string(index) + " prediction");
  }
  return probs[target];
}

void check_image(const Tensor& image, const char* who) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw DimensionError(std::string(who) + ": expected image [1,H,W], got " +
                         shape_str(image.shape()));
  }
}

}  // namespace

std::vector<double> rise_saliency(const PredictFn& predict, const Tensor& image,
                                  std::size_t target_class,
                                  std::span<const std::vector<double>> masks) {
  check_image(image, "rise");
  const std::size_t hw = image.dim(1) * image.dim(2);
  if (masks.empty()) throw std::invalid_argument("rise: no masks");
  std::vector<double> sal(hw, 0.0);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].size() != hw) throw DimensionError("rise: mask size does not match image");
    const double f = masked_score(predict, image, target_class, masks[i], i);
    for (std::size_t p = 0; p < hw; ++p) sal[p] += f * masks[i][p];
  }
  for (double& v : sal) v /= static_cast<double>(masks.size());
  return sal;
}

Heatmap rise(const PredictFn& predict, const Tensor& image, std::size_t target_class,
             const RiseConfig& config) {
  check_image(image, "rise");
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  config.validate(h, w);
  const std::size_t n = config.n_masks;

  std::vector<double> scores(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, n));
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto mask = rise_mask(config, i, h, w);
      scores[i] = masked_score(predict, image, target_class, mask, i);
    }
  };
  if (workers == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t t = 0; t < workers; ++t) {
      const std::size_t begin = n * t / workers, end = n * (t + 1) / workers;
      pool.emplace_back([&, begin, end] {
        try {
          run(begin, end);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  // Masks are regenerated rather than stored; summation runs in index order.
  std::vector<double> sal(hw, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mask = rise_mask(config, i, h, w);
    for (std::size_t p = 0; p < hw; ++p) sal[p] += scores[i] * mask[p];
  }
  for (double& v : sal) v /= static_cast<double>(n);
  auto map = normalize_heatmap(std::move(sal), h, w, kRise);
  map.target_class = target_class;
  return map;
}

Heatmap random_baseline(std::size_t height, std::size_t width, std::uint64_t seed) {
  const std::size_t n = height * width;
  if (n == 0) throw std::invalid_argument("random_baseline: empty image");
  std::vector<double> ranks(n);
  std::iota(ranks.begin(), ranks.end(), 0.0);
  Rng rng(seed);
  rng.shuffle(ranks.begin(), ranks.end());
  return normalize_heatmap(std::move(ranks), height, width, kRandom);
}

Heatmap explain(const std::string& id, const Classifier* model, const PredictFn& predict,
                const Tensor& image, std::size_t target_class, const ExplainOptions& options) {
  check_image(image, "explain");
  if (id == kRandom) {
    auto map = random_baseline(image.dim(1), image.dim(2), options.seed);
    map.target_class = target_class;
    return map;
  }
  if (id == kRise) {
    auto cfg = options.rise;
    cfg.seed = options.seed;
    return rise(predict, image, target_class, cfg);
  }
  if (model == nullptr) {
    throw ExplainerError("explainer '" + id + "' needs model internals; not available over the "
                         "black-box protocol");
  }
  if (!supports(id, model->config().arch)) {
    throw ExplainerError("explainer '" + id + "' does not apply to a " +
                         to_string(model->config().arch) + " model");
  }
  if (id == kGradCam || id == kGradCamVit) {
    const auto layer =
        options.gradcam_layer.empty() ? default_gradcam_layer(*model) : options.gradcam_layer;
    return grad_cam(*model, image, target_class, layer);
  }
  if (id == kRollout) return attention_rollout(*model, image);
  if (id == kClsLast) return cls_attention_last_layer(*model, image);
  throw ExplainerError("unknown explainer '" + id + "'");
}

}  // namespace faudit
