#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace faudit {

/// Raw maps whose dynamic range falls below this are flagged degenerate.
inline constexpr double kDegenerateRange = 1e-12;

/// Per-pixel importance at input resolution, min-max normalized to [0,1].
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  bool degenerate = false;
  std::string explainer;
  std::size_t target_class = 0;
  std::uint64_t sample_id = 0;
  double raw_min = 0.0;
  double raw_max = 0.0;

  std::size_t size() const { return values.size(); }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

/// Min-max normalizes `raw`; a constant map becomes all zeros, flagged.
Heatmap normalize_heatmap(std::vector<double> raw, std::size_t height, std::size_t width,
                          std::string explainer = {});

/// Half-pixel-centred bilinear resize with edge clamping.
std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t src_h,
                                      std::size_t src_w, std::size_t dst_h, std::size_t dst_w);
/// Block replication; destination dims must be multiples of the source dims.
std::vector<double> upsample_nearest(std::span<const double> src, std::size_t src_h,
                                     std::size_t src_w, std::size_t dst_h, std::size_t dst_w);

/// Writes `<stem>.bin` (flat little-endian f64), `<stem>.json` and `<stem>.pgm`.
void save_heatmap(const std::filesystem::path& stem, const Heatmap& map,
                  const std::string& extra_json = {});
Heatmap load_heatmap(const std::filesystem::path& stem);

}  // namespace faudit
