#include "streamconv/io.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace streamconv {

namespace {

constexpr char kMagic[5] = {'S', 'T', 'E', 'N', '1'};

void put_u32le(std::ofstream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32le(std::ifstream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 5);
  uint8_t dt = static_cast<uint8_t>(t.dtype());
  uint8_t rank = static_cast<uint8_t>(t.rank());
  os.put(static_cast<char>(dt));
  os.put(static_cast<char>(rank));
  for (int64_t d : t.shape()) {
    if (d > UINT32_MAX) throw ShapeError("dim too large for tensor file");
    put_u32le(os, static_cast<uint32_t>(d));
  }
  // Dump as little-endian raw values; this code targets LE hosts.
  if (t.dtype() == Dtype::F32) {
    auto s = t.data<float>();
    os.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(t.bytes()));
  } else {
    auto s = t.data<double>();
    os.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(t.bytes()));
  }
  if (!os) throw IoError("short write: " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) {
    throw ParseError("not a tensor file (bad magic): " + path);
  }
  int dt = is.get();
  int rank = is.get();
  if (dt != 0 && dt != 1) throw ParseError("unknown dtype tag in " + path);
  if (rank < 1 || rank > 8) throw ParseError("unreasonable rank in " + path);
  std::vector<int64_t> shape;
  for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(get_u32le(is)));
  if (!is) throw ParseError("truncated header: " + path);
  Tensor t(static_cast<Dtype>(dt), shape);
  if (t.dtype() == Dtype::F32) {
    is.read(reinterpret_cast<char*>(t.data<float>().data()),
            static_cast<std::streamsize>(t.bytes()));
  } else {
    is.read(reinterpret_cast<char*>(t.data<double>().data()),
            static_cast<std::streamsize>(t.bytes()));
  }
  if (!is) throw ParseError("truncated payload: " + path);
  return t;
}

Tensor read_tensor(const std::string& path, Dtype expect) {
  Tensor t = read_tensor(path);
  if (t.dtype() != expect) {
    throw DtypeError("tensor file " + path + " holds " + dtype_name(t.dtype()) +
                     " but the run uses " + dtype_name(expect));
  }
  return t;
}

}  // namespace streamconv
