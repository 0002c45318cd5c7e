#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "faudit/tensor.hpp"

namespace faudit {

/// Binary tensor container shared by checkpoints and dataset files.
///
/// Layout (all integers little-endian):
///   "FAUD1"            5-byte magic
///   version            u32 (currently 1)
///   meta_len           u32, followed by meta_len bytes of UTF-8 JSON
///   records until EOF: name_len u16, name bytes, rank u8,
///                      dims rank x u32, payload prod(dims) x f64
struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  std::string meta_json = "{}";
  std::vector<NamedTensor> records;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kContainerVersion = 1;

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace faudit
