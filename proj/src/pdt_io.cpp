#include "panodeform/pdt_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace panodeform {

namespace {

static_assert(std::endian::native == std::endian::little,
              "PDT1 payloads are written with native little-endian byte order");

constexpr std::array<char, 4> kMagic{'P', 'D', 'T', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("PDT1: truncated header");
  return v;
}

}  // namespace

void write_pdt(std::ostream& os, const Tensor& t) {
  if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("PDT1: rank too large");
  os.write(kMagic.data(), kMagic.size());
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("PDT1: extent too large");
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  const auto data = t.data();
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!os) throw FormatError("PDT1: write failed");
}

Tensor read_pdt(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("PDT1: bad magic");
  const auto rank = get<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = get<std::uint32_t>(is);
  std::vector<double> data(numel(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    throw FormatError("PDT1: truncated payload");
  }
  return Tensor::from(std::move(shape), std::move(data));
}

void save_pdt(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_pdt(os, t);
}

Tensor load_pdt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_pdt(is);
}

}  // namespace panodeform
