#include "primed/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace primed::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(path, mode | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream is(path, mode);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  return is;
}

}  // namespace

std::string dtype_name(DType d) { return d == DType::Float32 ? "float32" : "uint8"; }

DType dtype_from_name(const std::string& name) {
  if (name == "float32") return DType::Float32;
  if (name == "uint8") return DType::UInt8;
  throw std::runtime_error("unsupported dtype: " + name);
}

fs::path sidecar_path(const fs::path& bin) { return fs::path(bin.string() + ".json"); }

void round_to_float32(Tensor& t) {
  for (auto& v : t.data()) v = static_cast<Scalar>(static_cast<float>(v));
}

void write_array(const fs::path& bin, const Tensor& t, DType dtype) {
  auto os = open_out(bin, std::ios::binary);
  if (dtype == DType::Float32) {
    std::vector<char> buf(static_cast<std::size_t>(t.numel()) * 4);
    for (Index i = 0; i < t.numel(); ++i) {
      const float f = static_cast<float>(t[i]);
      std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      std::memcpy(buf.data() + i * 4, &bits, 4);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  } else {
    std::vector<char> buf(static_cast<std::size_t>(t.numel()));
    for (Index i = 0; i < t.numel(); ++i) {
      if (t[i] != 0.0 && t[i] != 1.0) throw std::invalid_argument("uint8 mask value outside {0,1} in " + bin.string());
      buf[static_cast<std::size_t>(i)] = static_cast<char>(t[i] != 0.0 ? 1 : 0);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw std::runtime_error("write failed: " + bin.string());
  write_json(sidecar_path(bin), json{{"dtype", dtype_name(dtype)}, {"shape", t.shape()}});
}

Tensor read_array(const fs::path& bin, DType* dtype_out) {
  const json meta = read_json(sidecar_path(bin));
  const DType dtype = dtype_from_name(meta.at("dtype").get<std::string>());
  Shape shape = meta.at("shape").get<Shape>();
  Tensor t(shape);
  const std::size_t width = dtype == DType::Float32 ? 4 : 1;
  auto is = open_in(bin, std::ios::binary);
  std::vector<char> buf(static_cast<std::size_t>(t.numel()) * width);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("truncated array file: " + bin.string());
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in array file: " + bin.string());
  for (Index i = 0; i < t.numel(); ++i) {
    if (dtype == DType::Float32) {
      std::uint32_t bits;
      std::memcpy(&bits, buf.data() + i * 4, 4);
      t[i] = static_cast<Scalar>(std::bit_cast<float>(to_le(bits)));
    } else {
      const auto b = static_cast<unsigned char>(buf[static_cast<std::size_t>(i)]);
      if (b > 1) throw std::runtime_error("uint8 mask value outside {0,1} in " + bin.string());
      t[i] = b;
    }
  }
  if (dtype_out) *dtype_out = dtype;
  return t;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  auto os = open_out(path, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  auto is = open_in(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace primed::io
