#pragma once

// Crop-embedding provider client. Wire protocol v1, one UTF-8 JSON object per
// line in each direction:
//
//   provider -> engine (first line)  {"protocol":"ccd-view","version":1,"embedding_dim":D}
//   engine -> provider               {"id":int,"image":str,"box":[x0,y0,x1,y1],"resize_long":int}
//   provider -> engine               {"id":int,"embedding":[...]}
//                                    {"id":int,"error":{"code":str,"message":str}}
//
// Responses may arrive in any order; they are matched by id.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ccd/error.hpp"
#include "ccd/geometry.hpp"
#include "json.hpp"

namespace ccd {

inline constexpr const char* kProtocolName = "ccd-view";
inline constexpr int kProtocolVersion = 1;

// --- errors -----------------------------------------------------------------

/// Malformed, truncated or unexpected traffic on the provider channel.
class ProtocolError : public ProviderError {
 public:
  using ProviderError::ProviderError;
};

class ProviderTimeout : public ProviderError {
 public:
  ProviderTimeout(const std::string& what, std::vector<std::int64_t> pending)
      : ProviderError(what), pending_(std::move(pending)) {}
  const std::vector<std::int64_t>& pending_ids() const { return pending_; }

 private:
  std::vector<std::int64_t> pending_;
};

/// The provider answered a request with an error object.
class ProviderResponseError : public ProviderError {
 public:
  ProviderResponseError(const std::string& what, std::int64_t id,
                        std::string image_id, std::string code)
      : ProviderError(what), id_(id), image_id_(std::move(image_id)), code_(std::move(code)) {}
  std::int64_t request_id() const { return id_; }
  const std::string& image_id() const { return image_id_; }
  const std::string& code() const { return code_; }

 private:
  std::int64_t id_;
  std::string image_id_;
  std::string code_;
};

/// Embedding dimension or content does not match the dataset.
class ProviderValidationError : public ProviderError {
 public:
  using ProviderError::ProviderError;
};

// --- transport --------------------------------------------------------------

struct LineRead {
  enum class Status { kLine, kTimeout, kEof, kTruncated };
  Status status = Status::kEof;
  std::string line;  // full line for kLine, partial bytes for kTruncated
};

class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void write_line(std::string_view line) = 0;
  virtual LineRead read_line(std::chrono::steady_clock::time_point deadline) = 0;
  /// Signals end of input to the peer; further writes are errors.
  virtual void close_write() = 0;
};

/// Line channel over file descriptors (pipes or a socket). Owns the fds.
class FdChannel : public LineChannel {
 public:
  FdChannel(int read_fd, int write_fd);
  ~FdChannel() override;
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;

  void write_line(std::string_view line) override;
  /// Raw write, no newline appended.
  void write_bytes(std::string_view data);
  LineRead read_line(std::chrono::steady_clock::time_point deadline) override;
  void close_write() override;

 private:
  int read_fd_;
  int write_fd_;
  bool is_socket_;
  std::string buffer_;
  bool eof_ = false;
};

/// Connected pair of in-process channels (socketpair).
std::pair<std::unique_ptr<FdChannel>, std::unique_ptr<FdChannel>> make_channel_pair();

/// Launches argv[0] with argv and speaks over its stdin/stdout.
class SubprocessChannel : public LineChannel {
 public:
  explicit SubprocessChannel(const std::vector<std::string>& argv);
  ~SubprocessChannel() override;

  void write_line(std::string_view line) override;
  LineRead read_line(std::chrono::steady_clock::time_point deadline) override;
  void close_write() override;

 private:
  int pid_ = -1;
  std::unique_ptr<FdChannel> channel_;
};

/// Connects to "host:port".
std::unique_ptr<FdChannel> connect_tcp(const std::string& address);

// --- cache ------------------------------------------------------------------

struct ViewRequest {
  std::string image_id;
  Box box;
  std::int32_t resize_long = 640;

  friend bool operator==(const ViewRequest&, const ViewRequest&) = default;
};

/// (image, box, resize_long) -> embedding, persisted append-only as
/// [key JSON line]["CCDT" tensor bytes] records. Hits are bit-identical to
/// the stored response. Concurrent readers, exclusive writers.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;  // memory only
  explicit EmbeddingCache(const std::filesystem::path& file);

  std::optional<std::vector<float>> get(const ViewRequest& key) const;
  void put(const ViewRequest& key, const std::vector<float>& embedding);
  std::size_t size() const;

  static std::string key_string(const ViewRequest& key);

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::vector<float>> entries_;
  std::optional<std::filesystem::path> file_;
};

// --- client -----------------------------------------------------------------

struct ProviderOptions {
  std::size_t window = 16;
  std::chrono::milliseconds timeout{60000};
  std::uint32_t embedding_dim = 0;  // 0: accept the handshake value
};

class ViewProviderClient {
 public:
  /// Reads and validates the handshake line.
  ViewProviderClient(std::unique_ptr<LineChannel> channel, ProviderOptions options);
  ~ViewProviderClient();

  std::uint32_t embedding_dim() const { return dim_; }
  /// Number of requests sent over the wire in this session.
  std::uint64_t requests_sent() const { return next_id_ - 1; }

  /// Embeddings in request order. Cache consulted first; identical requests
  /// are sent once. The session is unusable after an exception.
  std::vector<std::vector<float>> request_embeddings(std::span<const ViewRequest> views,
                                                     EmbeddingCache* cache = nullptr);

 private:
  std::vector<float> parse_response(const nlohmann::json& doc, std::int64_t id,
                                    const std::string& image_id) const;

  std::unique_ptr<LineChannel> channel_;
  ProviderOptions options_;
  std::uint32_t dim_ = 0;
  std::int64_t next_id_ = 1;
  bool failed_ = false;
};

// --- provider side ----------------------------------------------------------

/// Provider-side handler: maps a request to an embedding, or throws
/// ProviderRequestFailure to answer with an error object.
class ProviderRequestFailure : public std::runtime_error {
 public:
  ProviderRequestFailure(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

using CropEmbedder = std::function<std::vector<float>(const ViewRequest&)>;

/// Serves protocol v1 on `channel` until the peer closes its side.
/// Per-request failures produce error responses; the loop never exits on them.
void serve_provider(LineChannel& channel, std::uint32_t embedding_dim,
                    const CropEmbedder& embed);

std::string format_request(std::int64_t id, const ViewRequest& req);
std::string format_embedding_response(std::int64_t id, std::span<const float> embedding);
std::string format_error_response(const nlohmann::json& id, const std::string& code,
                                  const std::string& message);
std::string format_handshake(std::uint32_t embedding_dim);

}  // namespace ccd
