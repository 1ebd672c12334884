#include "tsr/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace tsr {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

namespace {

constexpr char kMagic[4] = {'T', 'S', 'R', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("tensor snapshot truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_u32(os, 4);
  put_u32(os, std::uint32_t(t.n()));
  put_u32(os, std::uint32_t(t.c()));
  put_u32(os, std::uint32_t(t.h()));
  put_u32(os, std::uint32_t(t.w()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    float v = t[i];
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  }
  if (!os) throw DataError("tensor snapshot write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("not a tensor snapshot (bad magic)");
  std::uint32_t rank = get_u32(is);
  if (rank != 4) throw DataError("tensor snapshot rank " + std::to_string(rank) + ", expected 4");
  Shape s;
  s.n = int(get_u32(is));
  s.c = int(get_u32(is));
  s.h = int(get_u32(is));
  s.w = int(get_u32(is));
  Tensor::validate(s);
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    t[i] = v;
  }
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  return read_tensor(is);
}

}  // namespace tsr
