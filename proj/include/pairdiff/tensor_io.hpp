#pragma once

#include <iosfwd>
#include <string>

#include "pairdiff/tensor.hpp"

namespace pairdiff {

// Flat binary tensor format used by every module that persists arrays:
//   magic "PDT1" (4 bytes), u32 rank, rank x u32 dims, f64 little-endian payload.
void write_tensor(std::ostream& os, const Tensor& t);
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& what = "<stream>");
Tensor read_tensor_file(const std::string& path);

}  // namespace pairdiff
