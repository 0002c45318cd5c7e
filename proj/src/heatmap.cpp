#include "faudit/heatmap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "json.hpp"

namespace faudit {

Heatmap normalize_heatmap(std::vector<double> raw, std::size_t height, std::size_t width,
                          std::string explainer) {
  if (raw.size() != height * width || raw.empty()) {
    throw std::invalid_argument("normalize_heatmap: size does not match dims");
  }
  Heatmap h;
  h.height = height;
  h.width = width;
  h.explainer = std::move(explainer);
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  h.raw_min = *lo;
  h.raw_max = *hi;
  const double range = h.raw_max - h.raw_min;
  if (!(range >= kDegenerateRange)) {
    h.degenerate = true;
    h.values.assign(raw.size(), 0.0);
    return h;
  }
  h.values = std::move(raw);
  for (double& v : h.values) v = (v - h.raw_min) / range;
  return h;
}

std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t src_h,
                                      std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w || src.empty()) {
    throw std::invalid_argument("upsample_bilinear: size does not match dims");
  }
  std::vector<double> out(dst_h * dst_w);
  const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
  const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(src_h - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const auto y1 = std::min(y0 + 1, src_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dst_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(src_w - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const auto x1 = std::min(x0 + 1, src_w - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
      const double bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
      out[y * dst_w + x] = top * (1.0 - wy) + bot * wy;
    }
  }
  return out;
}

std::vector<double> upsample_nearest(std::span<const double> src, std::size_t src_h,
                                     std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w || src.empty() || dst_h % src_h != 0 || dst_w % src_w != 0) {
    throw std::invalid_argument("upsample_nearest: dims are not integer multiples");
  }
  const std::size_t fy = dst_h / src_h, fx = dst_w / src_w;
  std::vector<double> out(dst_h * dst_w);
  for (std::size_t y = 0; y < dst_h; ++y)
    for (std::size_t x = 0; x < dst_w; ++x) out[y * dst_w + x] = src[(y / fy) * src_w + x / fx];
  return out;
}

void save_heatmap(const std::filesystem::path& stem, const Heatmap& map,
                  const std::string& extra_json) {
  using nlohmann::json;
  auto with_ext = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  {
    std::ofstream bin(with_ext(".bin"), std::ios::binary | std::ios::trunc);
    for (double v : map.values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) bin.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    if (!bin) throw std::runtime_error("cannot write " + with_ext(".bin").string());
  }
  json side{{"explainer", map.explainer},
            {"target_class", map.target_class},
            {"sample_id", map.sample_id},
            {"height", map.height},
            {"width", map.width},
            {"degenerate", map.degenerate},
            {"raw_min", map.raw_min},
            {"raw_max", map.raw_max}};
  if (!extra_json.empty()) side["extra"] = json::parse(extra_json);
  std::ofstream(with_ext(".json")) << side.dump(2) << '\n';

  std::ofstream pgm(with_ext(".pgm"), std::ios::binary | std::ios::trunc);
  pgm << "P5\n" << map.width << ' ' << map.height << "\n255\n";
  for (double v : map.values) pgm.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

Heatmap load_heatmap(const std::filesystem::path& stem) {
  using nlohmann::json;
  auto with_ext = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  std::ifstream side_in(with_ext(".json"));
  if (!side_in) throw std::runtime_error("cannot read " + with_ext(".json").string());
  const json side = json::parse(side_in);
  Heatmap h;
  h.explainer = side.at("explainer").get<std::string>();
  h.target_class = side.at("target_class").get<std::size_t>();
  h.sample_id = side.at("sample_id").get<std::uint64_t>();
  h.height = side.at("height").get<std::size_t>();
  h.width = side.at("width").get<std::size_t>();
  h.degenerate = side.at("degenerate").get<bool>();
  h.raw_min = side.at("raw_min").get<double>();
  h.raw_max = side.at("raw_max").get<double>();

  std::ifstream bin(with_ext(".bin"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (bytes.size() != h.height * h.width * 8) {
    throw std::runtime_error("heatmap payload size mismatch: " + with_ext(".bin").string());
  }
  h.values.resize(h.height * h.width);
  for (std::size_t i = 0; i < h.values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    h.values[i] = std::bit_cast<double>(bits);
  }
  return h;
}

}  // namespace faudit
