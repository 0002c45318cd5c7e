#include "faudit/faithfulness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "faudit/stats.hpp"

namespace faudit {

namespace {

void check_image(const Tensor& image, const char* who) {
  if (image.rank() != 3 || image.size() == 0) {
    throw DimensionError(std::string(who) + ": expected image [C,H,W], got " +
                         shape_str(image.shape()));
  }
}

void check_heatmap(const Tensor& image, const Heatmap& heatmap, const char* who) {
  check_image(image, who);
  if (heatmap.height != image.dim(1) || heatmap.width != image.dim(2) ||
      heatmap.values.size() != heatmap.height * heatmap.width) {
    throw DimensionError(std::string(who) + ": heatmap " + std::to_string(heatmap.height) + "x" +
                         std::to_string(heatmap.width) + " does not match image " +
                         shape_str(image.shape()));
  }
}

double class_probability(const PredictFn& predict, const Tensor& image, std::size_t target) {
  const auto probs = predict(image);
  if (target >= probs.size()) {
    throw std::out_of_range("target class " + std::to_string(target) + " not in prediction of " +
                            std::to_string(probs.size()) + " classes");
  }
  return probs[target];
}

std::size_t mirror_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  i %= period;
  if (i < 0) i += period;
  const auto u = static_cast<std::size_t>(i);
  return u < n ? u : 2 * n - 1 - u;
}

/// Copies pixels order[from..to) of every channel from `src` into `dst`.
void copy_pixels(std::vector<double>& dst, std::span<const double> src,
                 std::span<const std::size_t> order, std::size_t from, std::size_t to,
                 std::size_t channels, std::size_t hw) {
  for (std::size_t r = from; r < to; ++r) {
    const auto p = order[r];
    for (std::size_t c = 0; c < channels; ++c) dst[c * hw + p] = src[c * hw + p];
  }
}

}  // namespace

std::string FillOperator::name() const {
  if (kind == FillKind::zero) return "zero";
  if (sigma == 3.0) return "blur";
  char buf[64];
  std::snprintf(buf, sizeof buf, "blur:%g", sigma);
  return buf;
}

FillOperator FillOperator::parse(const std::string& name) {
  if (name == "zero") return zero();
  if (name == "blur") return blur();
  if (name.rfind("blur:", 0) == 0) {
    std::size_t used = 0;
    double s = 0.0;
    try {
      s = std::stod(name.substr(5), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != name.size() - 5 || !(s > 0.0)) {
      throw std::invalid_argument("fill '" + name + "': blur sigma must be a positive number");
    }
    return blur(s);
  }
  throw std::invalid_argument("unknown fill operator '" + name + "' (expected zero or blur[:sigma])");
}

Tensor FillOperator::reference(const Tensor& image) const {
  check_image(image, "fill");
  if (kind == FillKind::zero) return Tensor::zeros(image.shape());
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  std::vector<double> out(image.size());
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    const auto plane = gaussian_blur(image.data().subspan(c * hw, hw), h, w, sigma);
    std::copy(plane.begin(), plane.end(), out.begin() + static_cast<std::ptrdiff_t>(c * hw));
  }
  return Tensor(image.shape(), std::move(out));
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

std::vector<double> gaussian_blur(std::span<const double> plane, std::size_t h, std::size_t w,
                                  double sigma) {
  if (plane.size() != h * w) throw DimensionError("gaussian_blur: size does not match dims");
  const auto k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  std::vector<double> tmp(h * w, 0.0), out(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -radius; d <= radius; ++d)
        s += k[static_cast<std::size_t>(d + radius)] *
             plane[y * w + mirror_index(static_cast<std::ptrdiff_t>(x) + d, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -radius; d <= radius; ++d)
        s += k[static_cast<std::size_t>(d + radius)] *
             tmp[mirror_index(static_cast<std::ptrdiff_t>(y) + d, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

std::vector<std::size_t> rank_pixels(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

std::string to_string(Direction d) { return d == Direction::deletion ? "deletion" : "insertion"; }

PerturbationCurve perturbation_curve(const PredictFn& predict, const Tensor& image,
                                     const Heatmap& heatmap, const FillOperator& fill,
                                     Direction direction, std::size_t target_class,
                                     std::size_t steps) {
  check_heatmap(image, heatmap, "perturbation_curve");
  if (steps < 1) throw std::invalid_argument("perturbation_curve: need at least one step");
  const std::size_t channels = image.dim(0), hw = heatmap.values.size();
  const auto order = rank_pixels(heatmap.values);
  const Tensor reference = fill.reference(image);

  const bool del = direction == Direction::deletion;
  std::span<const double> source = del ? reference.data() : image.data();
  std::vector<double> current(del ? image.data().begin() : reference.data().begin(),
                              del ? image.data().end() : reference.data().end());

  PerturbationCurve curve;
  curve.direction = direction;
  curve.target_class = target_class;
  curve.degenerate = heatmap.degenerate;
  std::size_t done = 0;
  for (std::size_t i = 0; i <= steps; ++i) {
    const std::size_t count = pixels_at_step(i, steps, hw);
    copy_pixels(current, source, order, done, count, channels, hw);
    done = count;
    const double p = class_probability(predict, Tensor(image.shape(), current), target_class);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw NumericError("perturbation_curve: probability " + std::to_string(p) +
                         " outside [0,1]");
    }
    curve.fractions.push_back(static_cast<double>(i) / static_cast<double>(steps));
    curve.probabilities.push_back(p);
  }
  return curve;
}

PerturbationCurve deletion_curve(const PredictFn& predict, const Tensor& image,
                                 const Heatmap& heatmap, const FillOperator& fill,
                                 std::size_t steps) {
  return perturbation_curve(predict, image, heatmap, fill, Direction::deletion,
                            argmax(predict(image)), steps);
}

PerturbationCurve insertion_curve(const PredictFn& predict, const Tensor& image,
                                  const Heatmap& heatmap, const FillOperator& fill,
                                  std::size_t steps) {
  return perturbation_curve(predict, image, heatmap, fill, Direction::insertion,
                            argmax(predict(image)), steps);
}

double curve_auc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("curve_auc: need at least two matching points");
  }
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return area;
}

double curve_auc(const PerturbationCurve& curve) {
  return curve_auc(curve.fractions, curve.probabilities);
}

namespace {

// Destination p = R(q - c) + c + t, with q a source pixel.
void forward_point(double qx, double qy, double cx, double cy, const AugmentDraw& d, double& px,
                   double& py) {
  const double a = d.angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  px = ca * (qx - cx) - sa * (qy - cy) + cx + d.dx;
  py = sa * (qx - cx) + ca * (qy - cy) + cy + d.dy;
}

void inverse_point(double px, double py, double cx, double cy, const AugmentDraw& d, double& qx,
                   double& qy) {
  const double a = d.angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double ux = px - d.dx - cx, uy = py - d.dy - cy;
  qx = ca * ux + sa * uy + cx;
  qy = -sa * ux + ca * uy + cy;
}

template <typename Map>
std::vector<double> resample(std::span<const double> plane, std::size_t h, std::size_t w,
                             Map&& map) {
  if (plane.size() != h * w) throw DimensionError("warp: size does not match dims");
  std::vector<double> out(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sx = 0.0, sy = 0.0;
      map(static_cast<double>(x), static_cast<double>(y), sx, sy);
      const auto ix = static_cast<std::ptrdiff_t>(std::lround(sx));
      const auto iy = static_cast<std::ptrdiff_t>(std::lround(sy));
      if (ix < 0 || iy < 0 || ix >= static_cast<std::ptrdiff_t>(w) ||
          iy >= static_cast<std::ptrdiff_t>(h))
        continue;
      out[y * w + x] = plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
    }
  return out;
}

}  // namespace

std::vector<double> warp_plane(std::span<const double> plane, std::size_t h, std::size_t w,
                               const AugmentDraw& draw) {
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  return resample(plane, h, w, [&](double x, double y, double& sx, double& sy) {
    inverse_point(x, y, cx, cy, draw, sx, sy);
  });
}

std::vector<double> unwarp_plane(std::span<const double> plane, std::size_t h, std::size_t w,
                                 const AugmentDraw& draw) {
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  return resample(plane, h, w, [&](double x, double y, double& sx, double& sy) {
    forward_point(x, y, cx, cy, draw, sx, sy);
  });
}

AugmentDraw draw_augmentation(const Augmentation& aug, Rng& rng) {
  AugmentDraw d;
  d.angle_deg = aug.max_rotation_deg > 0.0 ? rng.uniform(-aug.max_rotation_deg, aug.max_rotation_deg)
                                           : 0.0;
  d.dx = aug.max_shift > 0 ? static_cast<int>(rng.between(-aug.max_shift, aug.max_shift)) : 0;
  d.dy = aug.max_shift > 0 ? static_cast<int>(rng.between(-aug.max_shift, aug.max_shift)) : 0;
  return d;
}

Tensor augment(const Tensor& image, const Augmentation& aug, const AugmentDraw& draw, Rng& rng) {
  check_image(image, "augment");
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  std::vector<double> out(image.size());
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    const auto plane = warp_plane(image.data().subspan(c * hw, hw), h, w, draw);
    std::copy(plane.begin(), plane.end(), out.begin() + static_cast<std::ptrdiff_t>(c * hw));
  }
  if (aug.noise_sigma > 0.0)
    for (double& v : out) v += rng.normal(0.0, aug.noise_sigma);
  return Tensor(image.shape(), std::move(out));
}

std::vector<std::uint8_t> region_mask(const Tensor& image) {
  check_image(image, "region_mask");
  const std::size_t hw = image.dim(1) * image.dim(2);
  std::vector<std::uint8_t> region(hw, 0);
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (image[c * hw + p] > 0.0) region[p] = 1;
  return region;
}

double region_cosine(std::span<const double> a, std::span<const double> b,
                     std::span<const std::uint8_t> region, bool* ok) {
  if (a.size() != b.size() || a.size() != region.size()) {
    throw DimensionError("region_cosine: sizes differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!region[i]) continue;
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (ok) *ok = false;
    return 0.0;
  }
  if (ok) *ok = true;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

StabilityResult stability(const ExplainFn& explain, const Tensor& image, const Heatmap& base,
                          std::size_t k, const Augmentation& aug,
                          std::span<const std::uint8_t> region, std::uint64_t seed, bool align) {
  check_heatmap(image, base, "stability");
  if (k == 0) throw std::invalid_argument("stability: k must be >= 1");
  const std::size_t h = image.dim(1), w = image.dim(2);
  StabilityResult result;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    Rng rng(mix_seed(seed, i));
    const auto draw = draw_augmentation(aug, rng);
    const auto augmented = augment(image, aug, draw, rng);
    const auto map = explain(augmented);
    if (map.values.size() != base.values.size()) {
      throw DimensionError("stability: augmented heatmap has a different size");
    }
    const auto other = align ? unwarp_plane(map.values, h, w, draw) : map.values;
    bool ok = true;
    total += region_cosine(base.values, other, region, &ok);
    if (!ok) ++result.degenerate_terms;
  }
  result.value = total / static_cast<double>(k);
  return result;
}

StabilityResult stability(const ExplainFn& explain, const Tensor& image, std::size_t k,
                          const Augmentation& aug, std::span<const std::uint8_t> region,
                          std::uint64_t seed, bool align) {
  return stability(explain, image, explain(image), k, aug, region, seed, align);
}

double iou(const Heatmap& heatmap, std::span<const std::uint8_t> mask,
           double threshold_percentile) {
  const std::size_t n = heatmap.values.size();
  if (mask.size() != n) throw DimensionError("iou: mask size does not match heatmap");
  if (std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; })) {
    throw std::invalid_argument("iou: empty mask");
  }
  if (!(threshold_percentile >= 0.0 && threshold_percentile < 100.0)) {
    throw std::invalid_argument("iou: percentile must lie in [0,100)");
  }
  const auto keep = static_cast<std::size_t>(
      std::ceil(static_cast<double>(n) * (100.0 - threshold_percentile) / 100.0));
  const auto order = rank_pixels(heatmap.values);
  std::vector<std::uint8_t> hot(n, 0);
  for (std::size_t r = 0; r < keep; ++r) hot[order[r]] = 1;
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    inter += hot[i] && mask[i];
    uni += hot[i] || mask[i];
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double spearman_defect(const Heatmap& heatmap, std::span<const std::uint8_t> mask,
                       bool* defined) {
  if (mask.size() != heatmap.values.size()) {
    throw DimensionError("spearman_defect: mask size does not match heatmap");
  }
  std::vector<double> m(mask.begin(), mask.end());
  for (double& v : m) v = v != 0.0 ? 1.0 : 0.0;
  const bool has_on = std::find(m.begin(), m.end(), 1.0) != m.end();
  const bool has_off = std::find(m.begin(), m.end(), 0.0) != m.end();
  if (!has_on || !has_off) {
    throw std::invalid_argument("spearman_defect: mask needs defect and non-defect pixels");
  }
  const auto rho = stats::spearman(heatmap.values, m);
  if (defined) *defined = rho.has_value();
  return rho.value_or(0.0);
}

double topk_drop(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                 int k_percent, const FillOperator& fill, std::size_t target_class,
                 double clean_probability) {
  check_heatmap(image, heatmap, "topk_drop");
  if (k_percent <= 0 || k_percent > 100) {
    throw std::invalid_argument("topk_drop: k must lie in (0, 100], got " +
                                std::to_string(k_percent));
  }
  const std::size_t channels = image.dim(0), hw = heatmap.values.size();
  const auto order = rank_pixels(heatmap.values);
  const Tensor reference = fill.reference(image);
  std::vector<double> current(image.data().begin(), image.data().end());
  copy_pixels(current, reference.data(), order, 0,
              pixels_at_step(static_cast<std::size_t>(k_percent), 100, hw), channels, hw);
  return clean_probability -
         class_probability(predict, Tensor(image.shape(), std::move(current)), target_class);
}

double topk_drop(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                 int k_percent, const FillOperator& fill) {
  const auto probs = predict(image);
  const auto target = argmax(probs);
  return topk_drop(predict, image, heatmap, k_percent, fill, target, probs[target]);
}

HeatmapScores score_heatmap(const PredictFn& predict, const Tensor& image, const Heatmap& heatmap,
                            std::span<const std::uint8_t> mask, const FillOperator& fill,
                            const MetricConfig& config) {
  check_heatmap(image, heatmap, "score_heatmap");
  HeatmapScores s;
  const auto probs = predict(image);
  s.target_class = argmax(probs);
  s.deletion = perturbation_curve(predict, image, heatmap, fill, Direction::deletion,
                                  s.target_class, config.curve_steps);
  s.insertion = perturbation_curve(predict, image, heatmap, fill, Direction::insertion,
                                   s.target_class, config.curve_steps);
  s.del_auc = curve_auc(s.deletion);
  s.ins_auc = curve_auc(s.insertion);
  for (int k : config.topk_percents)
    s.topk_drop[k] = topk_drop(predict, image, heatmap, k, fill, s.target_class, probs[s.target_class]);
  if (heatmap.degenerate) s.annotations.push_back("degenerate_heatmap");

  const auto on = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(),
                                                         [](auto m) { return m != 0; }));
  s.has_mask = on > 0 && on < mask.size();
  if (s.has_mask) {
    s.iou = iou(heatmap, mask, config.iou_percentile);
    bool defined = true;
    s.spearman_defect = spearman_defect(heatmap, mask, &defined);
    if (!defined) s.annotations.push_back("spearman_undefined");
  } else {
    s.annotations.push_back("no_defect_mask");
  }
  return s;
}

}  // namespace faudit
