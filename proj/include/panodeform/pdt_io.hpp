#pragma once

// PDT1 binary tensor files:
//   bytes 0..3  magic "PDT1"
//   byte  4     rank (u8)
//   then rank x u32 extents, little-endian
//   then prod(extents) x f64 payload, little-endian, row-major

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "panodeform/tensor.hpp"

namespace panodeform {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_pdt(std::ostream& os, const Tensor& t);
Tensor read_pdt(std::istream& is);

void save_pdt(const std::filesystem::path& path, const Tensor& t);
Tensor load_pdt(const std::filesystem::path& path);

}  // namespace panodeform
