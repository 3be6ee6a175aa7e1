#pragma once

// CCDT: a minimal binary container for dense float32 tensors.
//
//   offset  size        field
//   0       4           magic "CCDT"
//   4       2           version (u16 little-endian, currently 1)
//   6       1           dtype   (0 = float32 little-endian)
//   7       1           rank    (>= 1)
//   8       4 * rank    dims, u32 little-endian, slowest-varying first
//   ...     4 * prod    row-major payload

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccd/error.hpp"

namespace ccd {

inline constexpr char kTensorMagic[4] = {'C', 'C', 'D', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::size_t kMaxTensorRank = 255;

enum class TensorErrorKind {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kUnsupportedDtype,
  kTruncated,
  kTrailingBytes,
  kShape,
};

const char* to_string(TensorErrorKind kind);

class TensorError : public InputError {
 public:
  TensorError(TensorErrorKind kind, const std::string& what)
      : InputError(what), kind_(kind) {}
  TensorErrorKind kind() const noexcept { return kind_; }

 private:
  TensorErrorKind kind_;
};

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  Tensor() = default;
  /// Throws TensorError(kShape) when dims are empty, contain a zero, or do
  /// not match the payload length.
  Tensor(std::vector<std::uint32_t> dims, std::vector<float> data);

  std::size_t rank() const { return dims.size(); }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Number of elements implied by dims; throws TensorError(kShape) on invalid
/// dims or size_t overflow.
std::size_t element_count(std::span<const std::uint32_t> dims);

std::string encode_tensor(const Tensor& tensor);
/// `source` only labels error messages.
Tensor decode_tensor(std::string_view bytes, std::string_view source = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

/// Bitwise comparison of payloads (distinguishes -0.0 from 0.0, equal NaNs).
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace ccd
