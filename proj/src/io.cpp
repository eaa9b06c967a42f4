#include "fluiddiff/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <vector>

namespace fluiddiff::io {
namespace {

constexpr char kMagic[4] = {'F', 'D', 'T', 'N'};
constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 34;

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(FormatError::Kind::Truncated, std::string("truncated tensor file: missing ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return in;
}

// Writes via a temporary sibling so readers never see a partial file.
template <typename F>
void atomic_write(const std::filesystem::path& path, F&& body) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    body(out);
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace

const char* to_string(FormatError::Kind kind) {
  switch (kind) {
    case FormatError::Kind::BadMagic: return "bad-magic";
    case FormatError::Kind::BadVersion: return "bad-version";
    case FormatError::Kind::Truncated: return "truncated";
    case FormatError::Kind::DimensionOverflow: return "dimension-overflow";
    case FormatError::Kind::BadDType: return "bad-dtype";
    case FormatError::Kind::BadName: return "bad-name";
  }
  return "unknown";
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  if (tensor.ndim() > 255) throw std::invalid_argument("write_tensor: more than 255 dimensions");
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.ndim()));
  for (std::size_t d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw std::invalid_argument("write_tensor: extent " + std::to_string(d) + " exceeds u32");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
  } else {
    for (T v : tensor.data()) put_le<Bits<T>>(out, std::bit_cast<Bits<T>>(v));
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) throw FormatError(FormatError::Kind::Truncated, "truncated tensor file: missing magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "not a tensor file (magic mismatch)");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kFormatVersion) {
    throw FormatError(FormatError::Kind::BadVersion, "unsupported tensor format version " +
                                                         std::to_string(version) + " (expected " +
                                                         std::to_string(kFormatVersion) + ")");
  }
  const auto dtype = get_le<std::uint8_t>(in, "dtype");
  if (dtype > 1) throw FormatError(FormatError::Kind::BadDType, "unknown dtype code " + std::to_string(dtype));
  if (dtype != static_cast<std::uint8_t>(dtype_of<T>())) {
    throw FormatError(FormatError::Kind::BadDType,
                      std::string("dtype mismatch: file holds ") + (dtype == 0 ? "float32" : "float64"));
  }
  const auto ndim = get_le<std::uint8_t>(in, "ndim");
  Shape shape(ndim);
  std::uint64_t bytes = sizeof(T);
  for (auto& d : shape) {
    d = get_le<std::uint32_t>(in, "dims");
    if (d == 0) throw FormatError(FormatError::Kind::DimensionOverflow, "zero extent in tensor shape");
    if (bytes > kMaxPayloadBytes / d) {
      throw FormatError(FormatError::Kind::DimensionOverflow, "tensor payload exceeds 2^34 bytes");
    }
    bytes *= d;
  }
  const std::size_t n = bytes / sizeof(T);
  std::vector<T> data(n);
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes)) {
      throw FormatError(FormatError::Kind::Truncated, "truncated tensor file: expected " + std::to_string(bytes) +
                                                          " data bytes, got " + std::to_string(in.gcount()));
    }
  } else {
    for (auto& v : data) v = std::bit_cast<T>(get_le<Bits<T>>(in, "data"));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& tensor) {
  atomic_write(path, [&](std::ostream& out) { write_tensor(out, tensor); });
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_tensor<T>(in);
}

template <typename T>
void write_named(const std::filesystem::path& path, const NamedTensors<T>& tensors) {
  atomic_write(path, [&](std::ostream& out) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const std::string& name = tensors.names()[i];
      if (name.empty() || name.size() > 0xFFFF) throw std::invalid_argument("write_named: bad name length");
      put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(out, tensors.tensors()[i]);
    }
  });
}

template <typename T>
NamedTensors<T> read_named(const std::filesystem::path& path) {
  auto in = open_in(path);
  NamedTensors<T> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = get_le<std::uint16_t>(in, "name length");
    if (len == 0) throw FormatError(FormatError::Kind::BadName, "empty tensor name in " + path.string());
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (in.gcount() != len) throw FormatError(FormatError::Kind::Truncated, "truncated tensor name in " + path.string());
    if (out.contains(name)) throw FormatError(FormatError::Kind::BadName, "duplicate tensor name '" + name + "'");
    out.add(name, read_tensor<T>(in));
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[digest[i] >> 4];
    s += hex[digest[i] & 0xF];
  }
  return s;
}

std::string read_text_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& out) { out.write(text.data(), static_cast<std::streamsize>(text.size())); });
}

#define FLUIDDIFF_INSTANTIATE_IO(T)                                                  \
  template void write_tensor(std::ostream&, const Tensor<T>&);                       \
  template Tensor<T> read_tensor<T>(std::istream&);                                  \
  template void write_tensor(const std::filesystem::path&, const Tensor<T>&);        \
  template Tensor<T> read_tensor<T>(const std::filesystem::path&);                   \
  template void write_named(const std::filesystem::path&, const NamedTensors<T>&);   \
  template NamedTensors<T> read_named<T>(const std::filesystem::path&);

FLUIDDIFF_INSTANTIATE_IO(float)
FLUIDDIFF_INSTANTIATE_IO(double)

#undef FLUIDDIFF_INSTANTIATE_IO

}  // namespace fluiddiff::io
