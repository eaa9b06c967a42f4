#pragma once
// Binary tensor files and named-tensor containers.
//
// Tensor file (".fdt"), all integers little-endian:
//   "FDTN" | version u32 | dtype u8 (0 = float32, 1 = float64) | ndim u8 |
//   dims u32 x ndim | raw row-major data
// Named container: a sequence of (name length u16, UTF-8 name, tensor file
// body) records until end of file.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "fluiddiff/named_tensors.hpp"
#include "fluiddiff/tensor.hpp"

namespace fluiddiff::io {

inline constexpr std::uint32_t kFormatVersion = 1;

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, DimensionOverflow, BadDType, BadName };
  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

const char* to_string(FormatError::Kind kind);

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

/// Throws FormatError; the stream position is unspecified afterwards. The
/// stored dtype must match T.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& tensor);

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path);

template <typename T>
void write_named(const std::filesystem::path& path, const NamedTensors<T>& tensors);

template <typename T>
NamedTensors<T> read_named(const std::filesystem::path& path);

/// Element-wise conversion between precisions.
template <typename To, typename From>
Tensor<To> convert(const Tensor<From>& x) {
  Tensor<To> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<To>(x[i]);
  return out;
}

/// Lowercase hex SHA-256 of the file contents.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(const std::string& bytes);

/// Writes to a temporary sibling and renames into place.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace fluiddiff::io
