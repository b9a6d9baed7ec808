#include "pairdiff/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace pairdiff {

static_assert(std::endian::native == std::endian::little,
              "PDT1 I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'P', 'D', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error("PDT1: truncated header in " + what);
  return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw std::runtime_error("PDT1: write failed");
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("PDT1: cannot open " + path + " for writing");
  write_tensor(f, t);
  f.close();
  if (!f) throw std::runtime_error("PDT1: write failed for " + path);
}

Tensor read_tensor(std::istream& is, const std::string& what) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("PDT1: bad magic in " + what);
  const std::uint32_t rank = get_u32(is, what);
  if (rank > 8) throw std::runtime_error("PDT1: implausible rank in " + what);
  Shape shape(rank);
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = get_u32(is, what);
    if (d == 0) throw std::runtime_error("PDT1: zero extent in " + what);
    shape[i] = static_cast<int>(d);
    n *= d;
  }
  std::vector<double> data(n);
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(n * sizeof(double))))
    throw std::runtime_error("PDT1: truncated payload in " + what);
  return Tensor::from_data(shape, std::move(data));
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("PDT1: cannot open " + path);
  return read_tensor(f, path);
}

}  // namespace pairdiff
