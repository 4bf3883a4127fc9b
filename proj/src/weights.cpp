#include "fdet/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdet {
namespace {

constexpr char kMagic[8] = {'F', 'D', 'E', 'T', 'W', 'G', 'T', '\0'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error("truncated weight file " + path.string());
  return to_little(v);
}

}  // namespace

void save_weights(const std::filesystem::path& path, std::span<Param* const> params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kWeightFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Param* p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rank()));
    for (int d : p->value.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (const Param* p : params)
    for (double v : p->value.data()) put<double>(os, v);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

void load_weights(const std::filesystem::path& path, std::span<Param* const> params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weight file " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path.string() + " is not a weight file (bad magic)");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kWeightFormatVersion)
    throw std::runtime_error(path.string() + ": weight format version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kWeightFormatVersion));
  const auto count = get<std::uint32_t>(is, path);
  if (count != params.size())
    throw std::runtime_error(path.string() + ": holds " + std::to_string(count) +
                             " parameters, model has " + std::to_string(params.size()));
  for (const Param* p : params) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("truncated weight file " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is, path));
    if (name != p->name || shape != p->value.shape())
      throw std::runtime_error(path.string() + ": manifest entry " + name + " " +
                               shape_string(shape) + " does not match model parameter " +
                               p->name + " " + shape_string(p->value.shape()));
  }
  for (Param* p : params)
    for (double& v : p->value.data()) v = get<double>(is, path);
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(path.string() + ": trailing bytes after weight data");
}

}  // namespace fdet
