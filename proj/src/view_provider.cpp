#include "ccd/view_provider.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <iterator>
#include <mutex>
#include <sstream>
#include <thread>

#include "ccd/tensor_store.hpp"

namespace ccd {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

void ignore_sigpipe_once() {
  static std::once_flag flag;
  std::call_once(flag, [] { ::signal(SIGPIPE, SIG_IGN); });
}

bool fd_is_socket(int fd) {
  struct stat st{};
  return ::fstat(fd, &st) == 0 && S_ISSOCK(st.st_mode);
}

std::string preview(std::string_view s) {
  constexpr std::size_t kMax = 80;
  return s.size() <= kMax ? std::string(s) : std::string(s.substr(0, kMax)) + "...";
}

std::string ids_string(const std::vector<std::int64_t>& ids) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? "," : "") << ids[i];
  os << ']';
  return os.str();
}

}  // namespace

// --- FdChannel --------------------------------------------------------------

FdChannel::FdChannel(int read_fd, int write_fd)
    : read_fd_(read_fd), write_fd_(write_fd), is_socket_(fd_is_socket(write_fd)) {
  ignore_sigpipe_once();
}

FdChannel::~FdChannel() {
  if (read_fd_ >= 0) ::close(read_fd_);
  if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
}

void FdChannel::write_line(std::string_view line) {
  std::string data(line);
  data.push_back('\n');
  write_bytes(data);
}

void FdChannel::write_bytes(std::string_view data) {
  if (write_fd_ < 0) throw ProtocolError("write on a closed channel");
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = is_socket_
                          ? ::send(write_fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                          : ::write(write_fd_, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("provider channel write failed: ") +
                          std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

LineRead FdChannel::read_line(Clock::time_point deadline) {
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      LineRead r{LineRead::Status::kLine, buffer_.substr(0, nl)};
      buffer_.erase(0, nl + 1);
      if (!r.line.empty() && r.line.back() == '\r') r.line.pop_back();
      return r;
    }
    if (eof_) {
      if (buffer_.empty()) return {LineRead::Status::kEof, {}};
      LineRead r{LineRead::Status::kTruncated, std::move(buffer_)};
      buffer_.clear();
      return r;
    }
    int wait_ms = -1;
    if (deadline != Clock::time_point::max()) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - Clock::now());
      if (left.count() <= 0) return {LineRead::Status::kTimeout, {}};
      wait_ms = static_cast<int>(std::min<std::int64_t>(left.count(), INT32_MAX));
    }
    pollfd pfd{read_fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, wait_ms);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
    }
    if (rc == 0) return {LineRead::Status::kTimeout, {}};
    char buf[8192];
    const ssize_t n = ::read(read_fd_, buf, sizeof buf);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      if (errno == ECONNRESET) {
        eof_ = true;
        continue;
      }
      throw ProtocolError(std::string("provider channel read failed: ") +
                          std::strerror(errno));
    }
    if (n == 0) {
      eof_ = true;
    } else {
      buffer_.append(buf, static_cast<std::size_t>(n));
    }
  }
}

void FdChannel::close_write() {
  if (write_fd_ < 0) return;
  if (write_fd_ == read_fd_) {
    ::shutdown(write_fd_, SHUT_WR);
  } else {
    ::close(write_fd_);
  }
  write_fd_ = -1;
}

std::pair<std::unique_ptr<FdChannel>, std::unique_ptr<FdChannel>> make_channel_pair() {
  int fds[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) {
    throw ProviderError(std::string("socketpair failed: ") + std::strerror(errno));
  }
  return {std::make_unique<FdChannel>(fds[0], fds[0]),
          std::make_unique<FdChannel>(fds[1], fds[1])};
}

// --- SubprocessChannel ------------------------------------------------------

SubprocessChannel::SubprocessChannel(const std::vector<std::string>& argv) {
  if (argv.empty()) throw ConfigError("provider command is empty");
  ignore_sigpipe_once();
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) {
    throw ProviderError(std::string("pipe failed: ") + std::strerror(errno));
  }
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw ProviderError(std::string("pipe failed: ") + std::strerror(errno));
  }
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  pid_ = ::fork();
  if (pid_ < 0) {
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
    throw ProviderError(std::string("fork failed: ") + std::strerror(errno));
  }
  if (pid_ == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  channel_ = std::make_unique<FdChannel>(from_child[0], to_child[1]);
}

SubprocessChannel::~SubprocessChannel() {
  if (channel_) channel_->close_write();
  channel_.reset();
  if (pid_ <= 0) return;
  int status = 0;
  for (int i = 0; i < 200; ++i) {
    if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::kill(pid_, SIGKILL);
  ::waitpid(pid_, &status, 0);
}

void SubprocessChannel::write_line(std::string_view line) { channel_->write_line(line); }

LineRead SubprocessChannel::read_line(Clock::time_point deadline) {
  return channel_->read_line(deadline);
}

void SubprocessChannel::close_write() { channel_->close_write(); }

std::unique_ptr<FdChannel> connect_tcp(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ConfigError("provider address must be host:port, got \"" + address + "\"");
  }
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw ProviderError("cannot resolve " + address + ": " + ::gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo* p = res; p; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw ProviderError("cannot connect to provider at " + address);
  return std::make_unique<FdChannel>(fd, fd);
}

// --- EmbeddingCache ---------------------------------------------------------

std::string EmbeddingCache::key_string(const ViewRequest& key) {
  return json{{"image", key.image_id},
              {"box", key.box.coords()},
              {"resize_long", key.resize_long}}
      .dump();
}

EmbeddingCache::EmbeddingCache(const std::filesystem::path& file) : file_(file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return;  // created on first put
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  std::size_t pos = 0, good = 0;
  while (pos < bytes.size()) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) break;
    try {
      const json key = json::parse(bytes.substr(pos, nl - pos));
      const auto n = key.at("bytes").get<std::size_t>();
      if (nl + 1 + n > bytes.size()) break;
      Tensor t = decode_tensor(std::string_view(bytes).substr(nl + 1, n), file.string());
      const auto c = key.at("box").get<std::vector<std::int32_t>>();
      if (c.size() != 4 || t.rank() != 1) break;
      ViewRequest req{key.at("image").get<std::string>(), Box{c[0], c[1], c[2], c[3]},
                      key.at("resize_long").get<std::int32_t>()};
      entries_.emplace(key_string(req), std::move(t.data));
      pos = nl + 1 + n;
      good = pos;
    } catch (const std::exception&) {
      break;
    }
  }
  in.close();
  if (good < bytes.size()) std::filesystem::resize_file(file, good);
}

std::optional<std::vector<float>> EmbeddingCache::get(const ViewRequest& key) const {
  std::shared_lock lock(mutex_);
  if (auto it = entries_.find(key_string(key)); it != entries_.end()) return it->second;
  return std::nullopt;
}

void EmbeddingCache::put(const ViewRequest& key, const std::vector<float>& embedding) {
  std::unique_lock lock(mutex_);
  const std::string k = key_string(key);
  if (entries_.count(k)) return;
  if (file_) {
    const std::string blob = encode_tensor(
        Tensor({static_cast<std::uint32_t>(embedding.size())}, embedding));
    json line = json::parse(k);
    line["bytes"] = blob.size();
    std::ofstream out(*file_, std::ios::binary | std::ios::app);
    out << line.dump() << '\n';
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw InputError("cannot append to embedding cache " + file_->string());
  }
  entries_.emplace(k, embedding);
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

// --- wire formatting --------------------------------------------------------

std::string format_handshake(std::uint32_t embedding_dim) {
  return json{{"protocol", kProtocolName},
              {"version", kProtocolVersion},
              {"embedding_dim", embedding_dim}}
      .dump();
}

std::string format_request(std::int64_t id, const ViewRequest& req) {
  return json{{"id", id},
              {"image", req.image_id},
              {"box", req.box.coords()},
              {"resize_long", req.resize_long}}
      .dump();
}

std::string format_embedding_response(std::int64_t id, std::span<const float> embedding) {
  json arr = json::array();
  for (float v : embedding) arr.push_back(v);
  return json{{"id", id}, {"embedding", std::move(arr)}}.dump();
}

std::string format_error_response(const json& id, const std::string& code,
                                  const std::string& message) {
  return json{{"id", id}, {"error", {{"code", code}, {"message", message}}}}.dump();
}

// --- client -----------------------------------------------------------------

ViewProviderClient::ViewProviderClient(std::unique_ptr<LineChannel> channel,
                                       ProviderOptions options)
    : channel_(std::move(channel)), options_(options) {
  if (options_.window == 0) throw ConfigError("provider window must be positive");
  const LineRead r = channel_->read_line(Clock::now() + options_.timeout);
  switch (r.status) {
    case LineRead::Status::kTimeout:
      throw ProviderTimeout("provider sent no handshake within timeout", {});
    case LineRead::Status::kEof:
      throw ProtocolError("provider closed the stream before the handshake");
    case LineRead::Status::kTruncated:
      throw ProtocolError("truncated handshake line: " + preview(r.line));
    case LineRead::Status::kLine:
      break;
  }
  json hs;
  try {
    hs = json::parse(r.line);
  } catch (const json::parse_error&) {
    throw ProtocolError("malformed handshake line: " + preview(r.line));
  }
  if (!hs.is_object() || hs.value("protocol", "") != kProtocolName) {
    throw ProtocolError("handshake does not announce protocol \"ccd-view\"");
  }
  if (!hs.contains("version") || !hs["version"].is_number_integer() ||
      hs["version"].get<int>() != kProtocolVersion) {
    throw ProtocolError("unsupported protocol version in handshake");
  }
  if (!hs.contains("embedding_dim") || !hs["embedding_dim"].is_number_unsigned() ||
      hs["embedding_dim"].get<std::uint64_t>() == 0) {
    throw ProtocolError("handshake has no valid embedding_dim");
  }
  dim_ = hs["embedding_dim"].get<std::uint32_t>();
  if (options_.embedding_dim != 0 && dim_ != options_.embedding_dim) {
    throw ProviderValidationError("provider embedding_dim " + std::to_string(dim_) +
                                  " does not match dataset embedding_dim " +
                                  std::to_string(options_.embedding_dim));
  }
}

ViewProviderClient::~ViewProviderClient() {
  if (channel_) {
    try {
      channel_->close_write();
    } catch (...) {
    }
  }
}

std::vector<float> ViewProviderClient::parse_response(const json& doc, std::int64_t id,
                                                      const std::string& image_id) const {
  if (auto err = doc.find("error"); err != doc.end()) {
    const std::string code =
        err->is_object() && err->contains("code") && (*err)["code"].is_string()
            ? (*err)["code"].get<std::string>()
            : "unknown";
    const std::string message =
        err->is_object() && err->contains("message") && (*err)["message"].is_string()
            ? (*err)["message"].get<std::string>()
            : "";
    throw ProviderResponseError("provider error for request " + std::to_string(id) +
                                    " (image \"" + image_id + "\"): " + code +
                                    (message.empty() ? "" : ": " + message),
                                id, image_id, code);
  }
  auto emb = doc.find("embedding");
  if (emb == doc.end() || !emb->is_array()) {
    throw ProtocolError("response " + std::to_string(id) +
                        " has neither \"embedding\" nor \"error\"");
  }
  if (emb->size() != dim_) {
    throw ProviderValidationError("embedding for request " + std::to_string(id) +
                                  " (image \"" + image_id + "\") has " +
                                  std::to_string(emb->size()) + " values, expected " +
                                  std::to_string(dim_));
  }
  std::vector<float> out;
  out.reserve(dim_);
  for (const auto& v : *emb) {
    if (!v.is_number()) {
      throw ProtocolError("embedding for request " + std::to_string(id) +
                          " contains a non-number");
    }
    const float f = static_cast<float>(v.get<double>());
    if (!std::isfinite(f)) {
      throw ProviderValidationError("embedding for request " + std::to_string(id) +
                                    " (image \"" + image_id + "\") is not finite");
    }
    out.push_back(f);
  }
  return out;
}

std::vector<std::vector<float>> ViewProviderClient::request_embeddings(
    std::span<const ViewRequest> views, EmbeddingCache* cache) {
  if (failed_) throw ProviderError("provider session is unusable after an earlier error");
  failed_ = true;

  // Deduplicate, keeping first-appearance order.
  std::vector<std::size_t> slot_of(views.size());
  std::vector<std::size_t> unique_views;
  std::map<std::string, std::size_t> slot_by_key;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto key = EmbeddingCache::key_string(views[i]);
    auto [it, inserted] = slot_by_key.emplace(key, unique_views.size());
    if (inserted) unique_views.push_back(i);
    slot_of[i] = it->second;
  }

  std::vector<std::optional<std::vector<float>>> results(unique_views.size());
  std::vector<std::size_t> to_send;
  for (std::size_t s = 0; s < unique_views.size(); ++s) {
    if (cache) {
      if (auto hit = cache->get(views[unique_views[s]])) {
        if (hit->size() != dim_) {
          throw ProviderValidationError("cached embedding has the wrong dimension");
        }
        results[s] = std::move(*hit);
        continue;
      }
    }
    to_send.push_back(s);
  }

  std::map<std::int64_t, std::size_t> pending;  // request id -> slot
  std::size_t sent = 0;
  while (sent < to_send.size() || !pending.empty()) {
    while (pending.size() < options_.window && sent < to_send.size()) {
      const std::size_t s = to_send[sent++];
      const std::int64_t id = next_id_++;
      channel_->write_line(format_request(id, views[unique_views[s]]));
      pending.emplace(id, s);
    }
    const LineRead r = channel_->read_line(Clock::now() + options_.timeout);
    auto pending_ids = [&] {
      std::vector<std::int64_t> ids;
      for (const auto& [id, _] : pending) ids.push_back(id);
      return ids;
    };
    switch (r.status) {
      case LineRead::Status::kTimeout: {
        const auto ids = pending_ids();
        throw ProviderTimeout("provider timed out; pending request ids " + ids_string(ids),
                              ids);
      }
      case LineRead::Status::kEof:
        throw ProtocolError("provider closed the stream with pending request ids " +
                            ids_string(pending_ids()));
      case LineRead::Status::kTruncated:
        throw ProtocolError("truncated response line at end of stream: " +
                            preview(r.line));
      case LineRead::Status::kLine:
        break;
    }
    json doc;
    try {
      doc = json::parse(r.line);
    } catch (const json::parse_error&) {
      throw ProtocolError("malformed response line: " + preview(r.line));
    }
    if (!doc.is_object() || !doc.contains("id")) {
      throw ProtocolError("response line without an id: " + preview(r.line));
    }
    if (!doc["id"].is_number_integer()) {
      if (doc.contains("error")) {
        throw ProtocolError("provider rejected a request without naming it: " +
                            preview(r.line));
      }
      throw ProtocolError("response id is not an integer: " + preview(r.line));
    }
    const auto id = doc["id"].get<std::int64_t>();
    auto it = pending.find(id);
    if (it == pending.end()) {
      throw ProtocolError("unexpected response id " + std::to_string(id));
    }
    const std::size_t s = it->second;
    const ViewRequest& req = views[unique_views[s]];
    results[s] = parse_response(doc, id, req.image_id);
    pending.erase(it);
    if (cache) cache->put(req, *results[s]);
  }

  std::vector<std::vector<float>> out;
  out.reserve(views.size());
  for (std::size_t i = 0; i < views.size(); ++i) out.push_back(*results[slot_of[i]]);
  failed_ = false;
  return out;
}

// --- provider loop ----------------------------------------------------------

void serve_provider(LineChannel& channel, std::uint32_t embedding_dim,
                    const CropEmbedder& embed) {
  try {
    channel.write_line(format_handshake(embedding_dim));
    for (;;) {
      const LineRead r = channel.read_line(Clock::time_point::max());
      if (r.status != LineRead::Status::kLine) return;
      if (r.line.empty()) continue;
      json id = nullptr;
      ViewRequest req;
      try {
        const json doc = json::parse(r.line);
        if (!doc.is_object()) throw std::invalid_argument("request is not an object");
        if (doc.contains("id")) id = doc["id"];
        if (!id.is_number_integer()) throw std::invalid_argument("missing integer id");
        req.image_id = doc.at("image").get<std::string>();
        const auto c = doc.at("box").get<std::vector<std::int32_t>>();
        if (c.size() != 4) throw std::invalid_argument("box needs 4 coordinates");
        req.box = Box{c[0], c[1], c[2], c[3]};
        req.resize_long = doc.value("resize_long", 640);
        if (req.box.empty() || req.resize_long <= 0) {
          throw std::invalid_argument("degenerate box or resize_long");
        }
      } catch (const std::exception& e) {
        channel.write_line(format_error_response(id, "bad_request", e.what()));
        continue;
      }
      try {
        const auto emb = embed(req);
        channel.write_line(format_embedding_response(id.get<std::int64_t>(), emb));
      } catch (const ProviderRequestFailure& f) {
        channel.write_line(format_error_response(id, f.code(), f.what()));
      } catch (const std::exception& e) {
        channel.write_line(format_error_response(id, "internal", e.what()));
      }
    }
  } catch (const ProtocolError&) {
    // Peer went away mid-write.
  }
}

}  // namespace ccd
