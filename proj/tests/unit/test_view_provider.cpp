#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cmath>
#include <thread>

#include "ccd/rng.hpp"
#include "ccd/view_provider.hpp"
#include "json.hpp"
#include "test_util.hpp"
#include "transcript.hpp"

using namespace ccd;
using ccd::testing::TempDir;
using Clock = std::chrono::steady_clock;

namespace {

// Oracle embedding: a function of the box center and resize_long only.
std::vector<float> center_embedding(const ViewRequest& r) {
  const float cx = 0.5f * static_cast<float>(r.box.x0 + r.box.x1);
  const float cy = 0.5f * static_cast<float>(r.box.y0 + r.box.y1);
  return {cx, cy, std::sin(cx * 0.01f) + static_cast<float>(r.resize_long), 1.0f};
}

// Counts engine-side request lines.
class CountingChannel : public LineChannel {
 public:
  explicit CountingChannel(std::unique_ptr<LineChannel> inner, std::atomic<int>* count)
      : inner_(std::move(inner)), count_(count) {}
  void write_line(std::string_view line) override {
    ++*count_;
    inner_->write_line(line);
  }
  LineRead read_line(Clock::time_point deadline) override { return inner_->read_line(deadline); }
  void close_write() override { inner_->close_write(); }

 private:
  std::unique_ptr<LineChannel> inner_;
  std::atomic<int>* count_;
};

struct Served {
  std::unique_ptr<ViewProviderClient> client;
  std::thread server;
  std::atomic<int> sent{0};

  ~Served() {
    client.reset();
    if (server.joinable()) server.join();
  }
};

std::unique_ptr<Served> serve(std::size_t window = 16) {
  auto s = std::make_unique<Served>();
  auto [engine, provider] = make_channel_pair();
  s->server = std::thread([ch = std::move(provider)]() mutable {
    serve_provider(*ch, 4, center_embedding);
  });
  ProviderOptions opts;
  opts.window = window;
  opts.timeout = std::chrono::milliseconds(5000);
  s->client = std::make_unique<ViewProviderClient>(
      std::make_unique<CountingChannel>(std::move(engine), &s->sent), opts);
  return s;
}

// Answers every request it has buffered in reverse arrival order.
void reversing_provider(LineChannel& ch) {
  ch.write_line(format_handshake(4));
  for (;;) {
    std::vector<nlohmann::json> batch;
    auto r = ch.read_line(Clock::time_point::max());
    if (r.status != LineRead::Status::kLine) return;
    batch.push_back(nlohmann::json::parse(r.line));
    for (;;) {
      r = ch.read_line(Clock::now() + std::chrono::milliseconds(20));
      if (r.status == LineRead::Status::kLine) {
        batch.push_back(nlohmann::json::parse(r.line));
        continue;
      }
      if (r.status != LineRead::Status::kTimeout) return;
      break;
    }
    for (auto it = batch.rbegin(); it != batch.rend(); ++it) {
      const auto c = (*it)["box"].get<std::vector<std::int32_t>>();
      const ViewRequest req{(*it)["image"], Box{c[0], c[1], c[2], c[3]}, (*it)["resize_long"]};
      ch.write_line(format_embedding_response((*it)["id"], center_embedding(req)));
    }
  }
}

std::vector<ViewRequest> random_requests(Rng& rng, std::size_t n) {
  std::vector<ViewRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x0 = static_cast<std::int32_t>(rng.uniform_int(0, 300));
    const auto y0 = static_cast<std::int32_t>(rng.uniform_int(0, 300));
    out.push_back({"img_" + std::to_string(rng.uniform_int(0, 5)),
                   Box{x0, y0, x0 + static_cast<std::int32_t>(rng.uniform_int(1, 300)),
                       y0 + static_cast<std::int32_t>(rng.uniform_int(1, 300))},
                   static_cast<std::int32_t>(rng.uniform_int(0, 1) ? 640 : 320)});
  }
  return out;
}

}  // namespace

TEST(Wire, FieldNames) {
  const auto req = nlohmann::json::parse(format_request(7, {"a", Box{1, 2, 3, 4}, 640}));
  EXPECT_EQ(req, nlohmann::json::parse(R"({"id":7,"image":"a","box":[1,2,3,4],"resize_long":640})"));
  const std::vector<float> e{0.5f, -1.0f};
  EXPECT_EQ(nlohmann::json::parse(format_embedding_response(3, e)),
            nlohmann::json::parse(R"({"id":3,"embedding":[0.5,-1.0]})"));
  EXPECT_EQ(nlohmann::json::parse(format_error_response(4, "bad", "msg")),
            nlohmann::json::parse(R"({"id":4,"error":{"code":"bad","message":"msg"}})"));
  EXPECT_EQ(nlohmann::json::parse(format_handshake(512)),
            nlohmann::json::parse(R"({"protocol":"ccd-view","version":1,"embedding_dim":512})"));
}

TEST(Wire, FloatsSurviveTextRoundTrip) {
  Rng rng(1);
  std::vector<float> e(64);
  for (auto& v : e) v = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform_int(-8, 8)));
  const auto doc = nlohmann::json::parse(format_embedding_response(1, e));
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(static_cast<float>(doc["embedding"][i].get<double>()), e[i]);
  }
}

TEST(Client, OracleProviderMatchesDirectEvaluation) {
  Rng rng(2);
  const auto reqs = random_requests(rng, 100);
  auto s = serve();
  EXPECT_EQ(s->client->embedding_dim(), 4u);
  const auto out = s->client->request_embeddings(reqs);
  ASSERT_EQ(out.size(), reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) EXPECT_EQ(out[i], center_embedding(reqs[i]));
}

TEST(Client, IdenticalViewsSentOnce) {
  const ViewRequest a{"img", Box{0, 0, 10, 10}, 640};
  auto s = serve();
  const std::vector<ViewRequest> reqs{a, a};
  const auto out = s->client->request_embeddings(reqs);
  EXPECT_EQ(s->sent.load(), 1);
  EXPECT_EQ(s->client->requests_sent(), 1u);
  EXPECT_EQ(out[0], out[1]);
}

TEST(Client, FullyCachedCallSendsNothing) {
  Rng rng(3);
  const auto reqs = random_requests(rng, 20);
  EmbeddingCache cache;
  {
    auto s = serve();
    s->client->request_embeddings(reqs, &cache);
  }
  auto s = serve();
  const auto out = s->client->request_embeddings(reqs, &cache);
  EXPECT_EQ(s->sent.load(), 0);
  for (std::size_t i = 0; i < reqs.size(); ++i) EXPECT_EQ(out[i], center_embedding(reqs[i]));
}

TEST(Client, CacheTransparency) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto reqs = random_requests(rng, 40);
    reqs.insert(reqs.end(), reqs.begin(), reqs.begin() + 10);
    EmbeddingCache cache;
    // warm part of the cache
    {
      auto s = serve();
      s->client->request_embeddings(std::span(reqs).subspan(0, 15), &cache);
    }
    auto with = serve();
    auto without = serve();
    EXPECT_EQ(with->client->request_embeddings(reqs, &cache),
              without->client->request_embeddings(reqs));
  }
}

TEST(Client, ResultsIndependentOfWindowAndArrivalOrder) {
  Rng rng(5);
  const auto reqs = random_requests(rng, 60);
  std::vector<std::vector<float>> reference;
  {
    auto s = serve(16);
    reference = s->client->request_embeddings(reqs);
  }
  for (std::size_t window : {1u, 3u, 7u, 64u}) {
    auto s = serve(window);
    EXPECT_EQ(s->client->request_embeddings(reqs), reference) << "window " << window;
  }
  for (std::size_t window : {1u, 5u, 16u}) {
    auto [engine, provider] = make_channel_pair();
    std::thread server([ch = std::move(provider)]() mutable { reversing_provider(*ch); });
    {
      ProviderOptions opts;
      opts.window = window;
      opts.timeout = std::chrono::milliseconds(5000);
      ViewProviderClient client(std::move(engine), opts);
      EXPECT_EQ(client.request_embeddings(reqs), reference) << "reversed, window " << window;
    }
    server.join();
  }
}

TEST(Client, SessionUnusableAfterError) {
  auto [engine, provider] = make_channel_pair();
  std::thread server([ch = std::move(provider)]() mutable {
    serve_provider(*ch, 4, [](const ViewRequest& r) -> std::vector<float> {
      if (r.image_id == "bad") throw ProviderRequestFailure("unknown_image", "no such image");
      return center_embedding(r);
    });
  });
  {
    ProviderOptions opts;
    opts.timeout = std::chrono::milliseconds(5000);
    ViewProviderClient client(std::move(engine), opts);
    const std::vector<ViewRequest> bad{{"bad", Box{0, 0, 5, 5}, 640}};
    try {
      client.request_embeddings(bad);
      FAIL();
    } catch (const ProviderResponseError& e) {
      EXPECT_EQ(e.code(), "unknown_image");
      EXPECT_EQ(e.image_id(), "bad");
      EXPECT_EQ(e.exit_code(), 4);
      EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
    }
    const std::vector<ViewRequest> good{{"ok", Box{0, 0, 5, 5}, 640}};
    EXPECT_THROW(client.request_embeddings(good), ProviderError);
  }
  server.join();
}

TEST(Client, ServerRejectsMalformedRequests) {
  auto [engine, provider] = make_channel_pair();
  std::thread server([ch = std::move(provider)]() mutable { serve_provider(*ch, 4, center_embedding); });
  auto r = engine->read_line(Clock::now() + std::chrono::seconds(5));
  ASSERT_EQ(r.status, LineRead::Status::kLine);
  engine->write_line("not json");
  r = engine->read_line(Clock::now() + std::chrono::seconds(5));
  ASSERT_EQ(r.status, LineRead::Status::kLine);
  const auto doc = nlohmann::json::parse(r.line);
  EXPECT_TRUE(doc["id"].is_null());
  EXPECT_EQ(doc["error"]["code"], "bad_request");
  engine->write_line(R"({"id":5,"image":"x","box":[1,2,3],"resize_long":640})");
  r = engine->read_line(Clock::now() + std::chrono::seconds(5));
  EXPECT_EQ(nlohmann::json::parse(r.line)["id"], 5);
  EXPECT_TRUE(nlohmann::json::parse(r.line).contains("error"));
  engine->close_write();
  server.join();
}

TEST(Cache, PersistsBitExactly) {
  TempDir dir;
  const ViewRequest a{"img", Box{1, 2, 3, 4}, 640}, b{"img", Box{1, 2, 3, 4}, 320};
  const std::vector<float> ea{-0.0f, 1e-38f, 3.14159274f}, eb{NAN, 1.0f, 2.0f};
  {
    EmbeddingCache cache(dir / "cache.bin");
    cache.put(a, ea);
    cache.put(b, eb);
    cache.put(a, {9, 9, 9});  // first write wins
  }
  EmbeddingCache reloaded(dir / "cache.bin");
  EXPECT_EQ(reloaded.size(), 2u);
  const auto ga = *reloaded.get(a);
  EXPECT_EQ(std::memcmp(ga.data(), ea.data(), 12), 0);
  const auto gb = *reloaded.get(b);
  EXPECT_EQ(std::memcmp(gb.data(), eb.data(), 12), 0);
  EXPECT_FALSE(reloaded.get({"img", Box{1, 2, 3, 5}, 640}));
}

TEST(Cache, TornTailIsDropped) {
  TempDir dir;
  const ViewRequest a{"img", Box{1, 2, 3, 4}, 640};
  {
    EmbeddingCache cache(dir / "cache.bin");
    cache.put(a, {1, 2});
  }
  const auto size = std::filesystem::file_size(dir / "cache.bin");
  {
    std::ofstream out(dir / "cache.bin", std::ios::binary | std::ios::app);
    out << R"({"image":"img","box":[0,0,1,1],"resize_long":640,"bytes":16})" << '\n' << "CCD";
  }
  EmbeddingCache reloaded(dir / "cache.bin");
  EXPECT_EQ(reloaded.size(), 1u);
  EXPECT_EQ(std::filesystem::file_size(dir / "cache.bin"), size);
}

TEST(Transport, TcpProvider) {
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  ASSERT_GE(listener, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  ASSERT_EQ(::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  ASSERT_EQ(::listen(listener, 1), 0);
  socklen_t len = sizeof addr;
  ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  std::thread server([listener] {
    const int fd = ::accept(listener, nullptr, nullptr);
    FdChannel ch(fd, fd);
    serve_provider(ch, 4, center_embedding);
  });
  {
    ProviderOptions opts;
    opts.timeout = std::chrono::milliseconds(5000);
    ViewProviderClient client(connect_tcp("127.0.0.1:" + std::to_string(port)), opts);
    const std::vector<ViewRequest> reqs{{"a", Box{0, 0, 8, 8}, 640}};
    EXPECT_EQ(client.request_embeddings(reqs)[0], center_embedding(reqs[0]));
  }
  server.join();
  ::close(listener);
  EXPECT_THROW(connect_tcp("no-port"), ConfigError);
}

TEST(Transport, SubprocessProvider) {
  // `cat` echoes our own requests back, which is not a handshake.
  EXPECT_THROW(ViewProviderClient(std::make_unique<SubprocessChannel>(
                                      std::vector<std::string>{"/bin/sh", "-c", "echo '{\"protocol\":\"x\"}'; cat"}),
                                  ProviderOptions{}),
               ProtocolError);
  const std::string hs = format_handshake(2);
  const std::string script = "echo '" + hs + "'; read line; echo '{\"id\":1,\"embedding\":[0.25,4]}'; cat >/dev/null";
  ViewProviderClient client(std::make_unique<SubprocessChannel>(std::vector<std::string>{"/bin/sh", "-c", script}),
                            ProviderOptions{});
  const std::vector<ViewRequest> reqs{{"a", Box{0, 0, 8, 8}, 640}};
  EXPECT_EQ(client.request_embeddings(reqs)[0], (std::vector<float>{0.25f, 4.0f}));
}

class TranscriptTest : public ::testing::TestWithParam<ccd::testing::Transcript> {};

TEST_P(TranscriptTest, SurfacesDeclaredOutcome) {
  const auto outcome = ccd::testing::run_transcript(GetParam());
  EXPECT_TRUE(outcome.passed) << outcome.detail;
  EXPECT_LT(outcome.seconds, 10.0);
}

INSTANTIATE_TEST_SUITE_P(
    Canned, TranscriptTest,
    ::testing::ValuesIn(ccd::testing::load_transcripts(std::string(CCD_SOURCE_DIR) + "/tests/transcripts")),
    [](const auto& info) { return info.param.name; });

TEST(TranscriptHarness, DetectsWrongExpectation) {
  ccd::testing::Transcript t;
  t.name = "mismatch";
  t.header = {{"expect", "ok"}, {"requests", "1"}};
  t.script = {{"send", format_handshake(2)}, {"await", "1"},
              {"send", R"({"id":1,"error":{"code":"x","message":"y"}})"}};
  EXPECT_FALSE(ccd::testing::run_transcript(t).passed);
  t.header["expect"] = "response_error";
  EXPECT_TRUE(ccd::testing::run_transcript(t).passed);
  t.header["expect_code"] = "z";
  EXPECT_FALSE(ccd::testing::run_transcript(t).passed);
  // ok with the wrong payload
  t.header = {{"expect", "ok"}, {"requests", "1"}};
  t.script = {{"send", format_handshake(2)}, {"await", "1"}, {"send", R"({"id":1,"embedding":[2,-2]})"}};
  EXPECT_FALSE(ccd::testing::run_transcript(t).passed);
}
