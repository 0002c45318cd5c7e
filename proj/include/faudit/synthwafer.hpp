#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "faudit/tensor.hpp"
#include "faudit/train.hpp"

namespace faudit {

enum class WaferClass : std::size_t { none = 0, center = 1, ring = 2, edge_loc = 3, scratch = 4 };
inline constexpr std::size_t kWaferClasses = 5;

std::string class_name(std::size_t cls);
std::size_t class_from_name(const std::string& name);

enum class Split : std::size_t { train = 0, val = 1, test = 2 };
std::string split_name(Split s);

/// Pixel values of a wafer map.
inline constexpr double kBackground = 0.0;
inline constexpr double kNormalDie = 0.5;
inline constexpr double kDefectDie = 1.0;

struct WaferSample {
  Tensor image;  // [1,S,S]
  std::size_t label = 0;
  Tensor mask;   // [S,S], 1 on pattern defect pixels
  Split split = Split::train;
  std::uint64_t sample_id = 0;
  std::uint64_t seed = 0;
};

struct WaferGeometry {
  std::size_t image_size = 32;
  double wafer_radius = 15.0;
  double center_radius_min = 3.0;
  double center_radius_max = 6.0;
  double ring_width_min = 2.0;
  double ring_width_max = 3.5;
  double edge_depth_min = 3.0;
  double edge_depth_max = 6.0;
  /// Half-angle of the edge cluster, radians.
  double edge_arc_min = 0.35;
  double edge_arc_max = 0.8;
  std::size_t scratch_length_min = 10;
  std::size_t scratch_length_max = 22;
};

struct DatasetSpec {
  /// counts[class][split]
  std::array<std::array<std::size_t, 3>, kWaferClasses> counts{};
  /// Probability that an off-pattern die pixel is flipped to a defect.
  double noise_rate = 0.02;
  WaferGeometry geometry;
  std::uint64_t seed = 0;

  /// Same count for every class, split by ratio (train/val/test).
  static DatasetSpec uniform(std::size_t train, std::size_t val, std::size_t test,
                             std::uint64_t seed);
  void validate() const;
};

/// Renders one sample of `label` from a per-sample seed.
WaferSample render_sample(std::size_t label, const WaferGeometry& geometry, double noise_rate,
                          std::uint64_t seed);

/// Deterministic dataset for `spec`, ordered by split, class, index.
std::vector<WaferSample> generate(const DatasetSpec& spec);

/// Re-tags samples per class into train/val/test by `ratios`.
std::vector<WaferSample> stratified_split(std::vector<WaferSample> samples,
                                          std::array<double, 3> ratios, std::uint64_t seed);

/// Exactly `n_per_class` test-split samples per class, without replacement.
std::vector<WaferSample> balanced_eval_subset(const std::vector<WaferSample>& samples,
                                              std::size_t n_per_class, std::uint64_t seed);

std::vector<WaferSample> filter_split(const std::vector<WaferSample>& samples, Split split);
std::vector<LabeledImage> to_labeled(const std::vector<WaferSample>& samples);

/// Distance of pixel (row, col) from the wafer center.
double radius_of(std::size_t row, std::size_t col, std::size_t image_size);

/// One container file per split plus manifest.json (counts, seed, and
/// the dataset spec given as `spec_json`).
void save_dataset(const std::filesystem::path& dir, const std::vector<WaferSample>& samples,
                  const std::string& spec_json);
std::vector<WaferSample> load_dataset(const std::filesystem::path& dir);

}  // namespace faudit
