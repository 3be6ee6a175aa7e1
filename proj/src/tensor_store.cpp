#include "ccd/tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace ccd {
namespace {

static_assert(std::endian::native == std::endian::little,
              "CCDT encoding assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

template <typename T>
void put_le(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::string shape_string(std::span<const std::uint32_t> dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ')';
  return os.str();
}

}  // namespace

const char* to_string(TensorErrorKind kind) {
  switch (kind) {
    case TensorErrorKind::kIo: return "io";
    case TensorErrorKind::kBadMagic: return "bad_magic";
    case TensorErrorKind::kUnsupportedVersion: return "unsupported_version";
    case TensorErrorKind::kUnsupportedDtype: return "unsupported_dtype";
    case TensorErrorKind::kTruncated: return "truncated";
    case TensorErrorKind::kTrailingBytes: return "trailing_bytes";
    case TensorErrorKind::kShape: return "shape";
  }
  return "unknown";
}

std::size_t element_count(std::span<const std::uint32_t> dims) {
  if (dims.empty()) {
    throw TensorError(TensorErrorKind::kShape, "tensor rank 0 is not allowed");
  }
  if (dims.size() > kMaxTensorRank) {
    throw TensorError(TensorErrorKind::kShape, "tensor rank exceeds 255");
  }
  std::size_t n = 1;
  for (std::uint32_t d : dims) {
    if (d == 0) {
      throw TensorError(TensorErrorKind::kShape,
                        "tensor dims must be positive, got " + shape_string(dims));
    }
    if (n > std::numeric_limits<std::size_t>::max() / 4 / d) {
      throw TensorError(TensorErrorKind::kShape,
                        "tensor dims overflow: " + shape_string(dims));
    }
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<std::uint32_t> d, std::vector<float> values)
    : dims(std::move(d)), data(std::move(values)) {
  const std::size_t n = element_count(dims);
  if (n != data.size()) {
    throw TensorError(TensorErrorKind::kShape,
                      "payload has " + std::to_string(data.size()) +
                          " elements but dims " + shape_string(dims) +
                          " require " + std::to_string(n));
  }
}

std::string encode_tensor(const Tensor& tensor) {
  const std::size_t n = element_count(tensor.dims);
  if (n != tensor.data.size()) {
    throw TensorError(TensorErrorKind::kShape,
                      "payload has " + std::to_string(tensor.data.size()) +
                          " elements but dims " + shape_string(tensor.dims) +
                          " require " + std::to_string(n));
  }
  std::string out;
  out.reserve(8 + 4 * tensor.dims.size() + 4 * n);
  out.append(kTensorMagic, 4);
  put_le<std::uint16_t>(out, kTensorVersion);
  put_le<std::uint8_t>(out, kDtypeF32);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dims.size()));
  for (std::uint32_t d : tensor.dims) put_le<std::uint32_t>(out, d);
  const auto* raw = reinterpret_cast<const char*>(tensor.data.data());
  out.append(raw, 4 * n);
  return out;
}

Tensor decode_tensor(std::string_view bytes, std::string_view source) {
  const std::string src(source);
  if (bytes.size() < 8) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
      throw TensorError(TensorErrorKind::kBadMagic, src + ": bad magic");
    }
    throw TensorError(TensorErrorKind::kTruncated,
                      src + ": truncated header: expected at least 8 bytes, got " +
                          std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw TensorError(TensorErrorKind::kBadMagic,
                      src + ": bad magic (expected \"CCDT\")");
  }
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kTensorVersion) {
    throw TensorError(TensorErrorKind::kUnsupportedVersion,
                      src + ": unsupported version " + std::to_string(version));
  }
  const auto dtype = get_le<std::uint8_t>(bytes, 6);
  if (dtype != kDtypeF32) {
    throw TensorError(TensorErrorKind::kUnsupportedDtype,
                      src + ": unsupported dtype " + std::to_string(dtype));
  }
  const auto rank = get_le<std::uint8_t>(bytes, 7);
  if (rank == 0) {
    throw TensorError(TensorErrorKind::kShape, src + ": rank 0 is not allowed");
  }
  const std::size_t header = 8 + 4 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) {
    throw TensorError(TensorErrorKind::kTruncated,
                      src + ": truncated header: expected " +
                          std::to_string(header) + " bytes, got " +
                          std::to_string(bytes.size()));
  }
  std::vector<std::uint32_t> dims(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = get_le<std::uint32_t>(bytes, 8 + 4 * i);
  }
  const std::size_t n = element_count(dims);
  const std::size_t expected = header + 4 * n;
  if (bytes.size() < expected) {
    throw TensorError(TensorErrorKind::kTruncated,
                      src + ": truncated payload: expected " +
                          std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw TensorError(TensorErrorKind::kTrailingBytes,
                      src + ": trailing bytes: expected " +
                          std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
  }
  std::vector<float> data(n);
  std::memcpy(data.data(), bytes.data() + header, 4 * n);
  return Tensor(std::move(dims), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  const std::string bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw TensorError(TensorErrorKind::kIo,
                      "cannot open " + path.string() + " for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw TensorError(TensorErrorKind::kIo, "write failed: " + path.string());
  }
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TensorError(TensorErrorKind::kIo, "cannot open " + path.string());
  }
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw TensorError(TensorErrorKind::kIo, "read failed: " + path.string());
  }
  return decode_tensor(bytes, path.string());
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.dims == b.dims && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), 4 * a.data.size()) == 0;
}

}  // namespace ccd
