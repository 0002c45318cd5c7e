#include "faudit/synthwafer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

#include "faudit/container.hpp"
#include "faudit/rng.hpp"
#include "json.hpp"

namespace faudit {

namespace {

const std::array<const char*, kWaferClasses> kClassNames = {"None", "Center", "Ring", "EdgeLoc",
                                                            "Scratch"};
const std::array<Split, 3> kSplits = {Split::train, Split::val, Split::test};

double angle_diff(double a, double b) {
  double d = std::fmod(std::abs(a - b), 2.0 * std::numbers::pi);
  return d > std::numbers::pi ? 2.0 * std::numbers::pi - d : d;
}

void check_range(double lo, double hi, const char* what) {
  if (!(lo <= hi) || lo < 0.0) {
    throw std::invalid_argument(std::string("dataset spec: invalid range for ") + what);
  }
}

}  // namespace

std::string class_name(std::size_t cls) {
  if (cls >= kWaferClasses) throw std::out_of_range("class index " + std::to_string(cls));
  return kClassNames[cls];
}

std::size_t class_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kWaferClasses; ++i)
    if (name == kClassNames[i]) return i;
  throw std::invalid_argument("unknown class '" + name + "'");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

double radius_of(std::size_t row, std::size_t col, std::size_t image_size) {
  const double c = (static_cast<double>(image_size) - 1.0) / 2.0;
  return std::hypot(static_cast<double>(row) - c, static_cast<double>(col) - c);
}

DatasetSpec DatasetSpec::uniform(std::size_t train, std::size_t val, std::size_t test,
                                 std::uint64_t seed) {
  DatasetSpec s;
  for (auto& c : s.counts) c = {train, val, test};
  s.seed = seed;
  return s;
}

void DatasetSpec::validate() const {
  const auto& g = geometry;
  if (noise_rate < 0.0 || noise_rate > 0.2) {
    throw std::invalid_argument("dataset spec: noise rate must lie in [0, 0.2]");
  }
  if (g.image_size < 4) throw std::invalid_argument("dataset spec: image too small");
  const double half = static_cast<double>(g.image_size) / 2.0;
  if (g.wafer_radius <= 0.0 || g.wafer_radius > half) {
    throw std::invalid_argument("dataset spec: wafer radius exceeds the image");
  }
  check_range(g.center_radius_min, g.center_radius_max, "center radius");
  check_range(g.ring_width_min, g.ring_width_max, "ring width");
  check_range(g.edge_depth_min, g.edge_depth_max, "edge depth");
  check_range(g.edge_arc_min, g.edge_arc_max, "edge arc");
  if (g.center_radius_max > g.wafer_radius || g.ring_width_max > g.wafer_radius ||
      g.edge_depth_max > g.wafer_radius) {
    throw std::invalid_argument("dataset spec: pattern geometry exceeds wafer radius");
  }
  if (g.scratch_length_min == 0 || g.scratch_length_min > g.scratch_length_max ||
      static_cast<double>(g.scratch_length_max) > 2.0 * g.wafer_radius) {
    throw std::invalid_argument("dataset spec: scratch length exceeds wafer diameter");
  }
}

WaferSample render_sample(std::size_t label, const WaferGeometry& g, double noise_rate,
                          std::uint64_t seed) {
  if (label >= kWaferClasses) throw std::out_of_range("render_sample: bad label");
  const std::size_t s = g.image_size;
  const double c = (static_cast<double>(s) - 1.0) / 2.0;
  Rng rng(seed);
  std::vector<double> image(s * s, kBackground);
  std::vector<double> mask(s * s, 0.0);
  auto inside = [&](std::size_t r, std::size_t col) { return radius_of(r, col, s) <= g.wafer_radius; };
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t col = 0; col < s; ++col)
      if (inside(r, col)) image[r * s + col] = kNormalDie;

  switch (static_cast<WaferClass>(label)) {
    case WaferClass::none:
      break;
    case WaferClass::center: {
      const double radius = rng.uniform(g.center_radius_min, g.center_radius_max);
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t col = 0; col < s; ++col)
          if (radius_of(r, col, s) <= radius) mask[r * s + col] = 1.0;
      break;
    }
    case WaferClass::ring: {
      const double width = rng.uniform(g.ring_width_min, g.ring_width_max);
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t col = 0; col < s; ++col) {
          const double d = radius_of(r, col, s);
          if (d <= g.wafer_radius && d >= g.wafer_radius - width) mask[r * s + col] = 1.0;
        }
      break;
    }
    case WaferClass::edge_loc: {
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double arc = rng.uniform(g.edge_arc_min, g.edge_arc_max);
      const double depth = rng.uniform(g.edge_depth_min, g.edge_depth_max);
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t col = 0; col < s; ++col) {
          const double d = radius_of(r, col, s);
          if (d > g.wafer_radius || d < g.wafer_radius - depth) continue;
          const double phi = std::atan2(static_cast<double>(r) - c, static_cast<double>(col) - c);
          if (angle_diff(phi, theta) <= arc) mask[r * s + col] = 1.0;
        }
      break;
    }
    case WaferClass::scratch: {
      const auto target = static_cast<std::size_t>(
          rng.between(static_cast<std::int64_t>(g.scratch_length_min),
                      static_cast<std::int64_t>(g.scratch_length_max)));
      std::vector<std::size_t> best;
      for (int attempt = 0; attempt < 32 && best.size() < target; ++attempt) {
        const double r0 = g.wafer_radius * 0.6 * std::sqrt(rng.uniform());
        const double a0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        double y = c + r0 * std::sin(a0), x = c + r0 * std::cos(a0);
        double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
        std::vector<std::size_t> path;
        while (path.size() < target) {
          const long ri = std::lround(y), ci = std::lround(x);
          if (ri < 0 || ci < 0 || ri >= static_cast<long>(s) || ci >= static_cast<long>(s) ||
              !inside(static_cast<std::size_t>(ri), static_cast<std::size_t>(ci))) {
            break;
          }
          const std::size_t idx = static_cast<std::size_t>(ri) * s + static_cast<std::size_t>(ci);
          if (std::find(path.begin(), path.end(), idx) == path.end()) path.push_back(idx);
          heading += rng.normal(0.0, 0.12);
          y += std::sin(heading);
          x += std::cos(heading);
        }
        if (path.size() > best.size()) best = std::move(path);
      }
      for (auto idx : best) mask[idx] = 1.0;
      break;
    }
  }

  for (std::size_t i = 0; i < s * s; ++i) {
    if (mask[i] > 0.0) {
      image[i] = kDefectDie;
    } else if (image[i] == kNormalDie && noise_rate > 0.0 && rng.bernoulli(noise_rate)) {
      image[i] = kDefectDie;
    }
  }

  WaferSample out;
  out.image = Tensor({1, s, s}, std::move(image));
  out.mask = Tensor({s, s}, std::move(mask));
  out.label = label;
  out.seed = seed;
  return out;
}

std::vector<WaferSample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<WaferSample> out;
  std::uint64_t id = 0;
  for (auto split : kSplits) {
    for (std::size_t cls = 0; cls < kWaferClasses; ++cls) {
      const auto n = spec.counts[cls][static_cast<std::size_t>(split)];
      for (std::size_t i = 0; i < n; ++i, ++id) {
        auto sample = render_sample(cls, spec.geometry, spec.noise_rate, mix_seed(spec.seed, id));
        sample.sample_id = id;
        sample.split = split;
        out.push_back(std::move(sample));
      }
    }
  }
  return out;
}

std::vector<WaferSample> stratified_split(std::vector<WaferSample> samples,
                                          std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0.0) {
    throw std::invalid_argument("stratified_split: ratios must be nonnegative and sum to 1");
  }
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);

  for (auto& [cls, idx] : by_class) {
    const std::size_t n = idx.size();
    const std::size_t wanted = static_cast<std::size_t>(
        std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));
    if (n < wanted) {
      throw std::invalid_argument("stratified_split: class " + class_name(cls) + " has " +
                                  std::to_string(n) + " samples for " + std::to_string(wanted) +
                                  " splits");
    }
    // Largest-remainder apportionment, then make every nonzero split non-empty.
    std::array<std::size_t, 3> k{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double exact = ratios[j] * static_cast<double>(n);
      k[j] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      rem[j] = exact - static_cast<double>(k[j]);
      assigned += k[j];
    }
    while (assigned < n) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 3; ++j)
        if (rem[j] > rem[best]) best = j;
      ++k[best];
      rem[best] = -1.0;
      ++assigned;
    }
    for (std::size_t j = 0; j < 3; ++j) {
      if (ratios[j] > 0.0 && k[j] == 0) {
        const auto donor = static_cast<std::size_t>(std::max_element(k.begin(), k.end()) - k.begin());
        --k[donor];
        ++k[j];
      }
    }

    Rng rng(mix_seed(seed, cls));
    rng.shuffle(idx.begin(), idx.end());
    std::size_t pos = 0;
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t t = 0; t < k[j]; ++t) samples[idx[pos++]].split = kSplits[j];
  }
  return samples;
}

std::vector<WaferSample> balanced_eval_subset(const std::vector<WaferSample>& samples,
                                              std::size_t n_per_class, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == Split::test) by_class[samples[i].label].push_back(i);
  std::vector<WaferSample> out;
  for (std::size_t cls = 0; cls < kWaferClasses; ++cls) {
    auto& idx = by_class[cls];
    if (idx.size() < n_per_class) {
      throw std::invalid_argument("balanced_eval_subset: class " + class_name(cls) + " has " +
                                  std::to_string(idx.size()) + " test samples, need " +
                                  std::to_string(n_per_class));
    }
    Rng rng(mix_seed(seed, cls));
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t i = 0; i < n_per_class; ++i) out.push_back(samples[idx[i]]);
  }
  return out;
}

std::vector<WaferSample> filter_split(const std::vector<WaferSample>& samples, Split split) {
  std::vector<WaferSample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

std::vector<LabeledImage> to_labeled(const std::vector<WaferSample>& samples) {
  std::vector<LabeledImage> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.image, s.label});
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<WaferSample>& samples,
                  const std::string& spec_json) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["spec"] = spec_json.empty() ? json::object() : json::parse(spec_json);
  for (auto split : kSplits) {
    const auto part = filter_split(samples, split);
    std::size_t s = part.empty() ? 0 : part.front().mask.dim(0);
    std::vector<double> images, masks, labels;
    json meta{{"split", split_name(split)}, {"image_size", s}};
    json ids = json::array(), seeds = json::array();
    json counts = json::array();
    std::array<std::size_t, kWaferClasses> per_class{};
    for (const auto& w : part) {
      images.insert(images.end(), w.image.data().begin(), w.image.data().end());
      masks.insert(masks.end(), w.mask.data().begin(), w.mask.data().end());
      labels.push_back(static_cast<double>(w.label));
      ids.push_back(w.sample_id);
      seeds.push_back(w.seed);
      ++per_class[w.label];
    }
    meta["sample_ids"] = ids;
    meta["seeds"] = seeds;
    Container c;
    c.meta_json = meta.dump();
    c.records.push_back({"images", Tensor({part.size(), 1, s, s}, std::move(images))});
    c.records.push_back({"masks", Tensor({part.size(), s, s}, std::move(masks))});
    c.records.push_back({"labels", Tensor({part.size()}, std::move(labels))});
    write_container(dir / (split_name(split) + ".faud"), c);
    for (std::size_t k = 0; k < kWaferClasses; ++k) counts.push_back(per_class[k]);
    manifest["counts"][split_name(split)] = counts;
  }
  manifest["classes"] = std::vector<std::string>(kClassNames.begin(), kClassNames.end());
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<WaferSample> load_dataset(const std::filesystem::path& dir) {
  using nlohmann::json;
  std::vector<WaferSample> out;
  for (auto split : kSplits) {
    const auto c = read_container(dir / (split_name(split) + ".faud"));
    const json meta = json::parse(c.meta_json);
    const auto& images = c.get("images");
    const auto& masks = c.get("masks");
    const auto& labels = c.get("labels");
    const std::size_t n = labels.size();
    if (n == 0) continue;
    const std::size_t s = masks.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      WaferSample w;
      w.image = Tensor({1, s, s}, std::vector<double>(images.data().begin() + i * s * s,
                                                      images.data().begin() + (i + 1) * s * s));
      w.mask = Tensor({s, s}, std::vector<double>(masks.data().begin() + i * s * s,
                                                  masks.data().begin() + (i + 1) * s * s));
      w.label = static_cast<std::size_t>(labels[i]);
      w.split = split;
      w.sample_id = meta.at("sample_ids").at(i).get<std::uint64_t>();
      w.seed = meta.at("seeds").at(i).get<std::uint64_t>();
      out.push_back(std::move(w));
    }
  }
  return out;
}

}  // namespace faudit
