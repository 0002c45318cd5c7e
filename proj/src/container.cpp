#include "faudit/container.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace faudit {

namespace {

constexpr char kMagic[5] = {'F', 'A', 'U', 'D', '1'};

template <typename T>
void put(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

void put_f64(std::string& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(value);
  }

  double get_f64(const char* what) { return std::bit_cast<double>(get<std::uint64_t>(what)); }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("container: truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Container::get(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r.value;
  throw FormatError("container: no record named '" + name + "'");
}

bool Container::contains(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return true;
  return false;
}

std::string encode_container(const Container& c) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.meta_json.size()));
  out += c.meta_json;
  for (const auto& r : c.records) {
    if (r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("container: record name too long");
    }
    if (r.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
      throw FormatError("container: rank too large");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.value.rank()));
    for (auto d : r.value.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("container: dim too large");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (double v : r.value.data()) put_f64(out, v);
  }
  return out;
}

Container decode_container(const std::string& bytes) {
  Reader in(bytes);
  const std::string magic = in.get_bytes(sizeof(kMagic), "magic");
  if (magic != std::string(kMagic, sizeof(kMagic))) throw FormatError("container: bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError("container: unsupported version " + std::to_string(version));
  }
  Container c;
  const auto meta_len = in.get<std::uint32_t>("meta length");
  c.meta_json = in.get_bytes(meta_len, "meta");
  while (!in.done()) {
    NamedTensor r;
    const auto name_len = in.get<std::uint16_t>("name length");
    r.name = in.get_bytes(name_len, "name");
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint32_t>("dims");
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = in.get_f64("payload");
    r.value = Tensor(std::move(shape), std::move(data));
    c.records.push_back(std::move(r));
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = encode_container(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace faudit
