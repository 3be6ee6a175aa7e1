#include "transcript.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ccd::testing {

Transcript load_transcript(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open transcript " + path.string());
  Transcript t;
  t.name = path.stem().string();
  std::string line;
  bool body = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!body) {
      if (line == "---") {
        body = true;
        continue;
      }
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw std::runtime_error("bad header line: " + line);
      std::string value = line.substr(colon + 1);
      value.erase(0, value.find_first_not_of(' '));
      t.header[line.substr(0, colon)] = value;
      continue;
    }
    const auto space = line.find(' ');
    t.script.emplace_back(line.substr(0, space),
                          space == std::string::npos ? "" : line.substr(space + 1));
  }
  return t;
}

std::vector<Transcript> load_transcripts(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Transcript> out;
  for (const auto& f : files) out.push_back(load_transcript(f));
  return out;
}

ScriptedProvider::ScriptedProvider(const Transcript& t, std::unique_ptr<FdChannel> end) {
  thread_ = std::thread([this, script = t.script, ch = std::move(end)]() mutable {
    auto drain = [&] {
      while (ch->read_line(std::chrono::steady_clock::now() + std::chrono::seconds(10)).status ==
             LineRead::Status::kLine) {
      }
    };
    try {
      for (const auto& [op, arg] : script) {
        if (op == "send") {
          ch->write_line(arg);
        } else if (op == "partial") {
          ch->write_bytes(arg);
        } else if (op == "await") {
          const int n = std::stoi(arg);
          for (int i = 0; i < n; ++i) {
            const auto r = ch->read_line(std::chrono::steady_clock::now() + std::chrono::seconds(5));
            if (r.status != LineRead::Status::kLine) return;
            received_.push_back(r.line);
          }
        } else if (op == "sleep") {
          std::this_thread::sleep_for(std::chrono::milliseconds(std::stoi(arg)));
        } else if (op == "close") {
          ch->close_write();
          drain();
          return;
        } else if (op == "hold") {
          drain();
          return;
        } else {
          throw std::runtime_error("unknown transcript directive " + op);
        }
      }
      drain();
    } catch (const std::exception&) {
    }
  });
}

ScriptedProvider::~ScriptedProvider() { join(); }

void ScriptedProvider::join() {
  if (thread_.joinable()) thread_.join();
}

std::vector<std::string> ScriptedProvider::received() const { return received_; }

namespace {

std::vector<std::int64_t> parse_ids(const std::string& s) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoll(tok));
  }
  return out;
}

}  // namespace

std::vector<ViewRequest> transcript_requests(std::size_t n) {
  std::vector<ViewRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"img_" + std::to_string(i), Box{0, 0, 10 + static_cast<std::int32_t>(i), 10}, 640});
  }
  return out;
}

TranscriptOutcome run_transcript(const Transcript& t) {
  const auto start = std::chrono::steady_clock::now();
  TranscriptOutcome out;
  const std::string expect = t.get("expect", "ok");
  const auto requests = transcript_requests(std::stoul(t.get("requests", "0")));
  ProviderOptions opts;
  opts.window = std::stoul(t.get("window", "16"));
  opts.timeout = std::chrono::milliseconds(std::stoll(t.get("timeout_ms", "2000")));
  opts.embedding_dim = static_cast<std::uint32_t>(std::stoul(t.get("dataset_dim", "0")));

  auto [engine, provider_end] = make_channel_pair();
  ScriptedProvider provider(t, std::move(provider_end));

  std::string got = "ok";
  std::string detail;
  std::vector<std::vector<float>> result;
  try {
    ViewProviderClient client(std::move(engine), opts);
    result = client.request_embeddings(requests);
  } catch (const ProviderTimeout& e) {
    got = "timeout";
    detail = e.what();
    const auto want = t.get("expect_ids");
    if (!want.empty() && parse_ids(want) != e.pending_ids()) {
      got = "timeout_wrong_ids";
    }
  } catch (const ProviderResponseError& e) {
    got = "response_error";
    detail = e.what();
    if (t.header.count("expect_code") && e.code() != t.get("expect_code")) got = "response_error_wrong_code";
    if (t.header.count("expect_image") && e.image_id() != t.get("expect_image")) got = "response_error_wrong_image";
    if (t.header.count("expect_ids") && parse_ids(t.get("expect_ids")) != std::vector<std::int64_t>{e.request_id()}) {
      got = "response_error_wrong_id";
    }
  } catch (const ProviderValidationError& e) {
    got = "validation_error";
    detail = e.what();
  } catch (const ProtocolError& e) {
    got = "protocol_error";
    detail = e.what();
  } catch (const std::exception& e) {
    got = "other_error";
    detail = e.what();
  }
  provider.join();

  out.passed = got == expect;
  if (out.passed && expect == "ok") {
    for (std::size_t i = 0; i < result.size(); ++i) {
      const float k = static_cast<float>(i + 1);
      if (result[i] != std::vector<float>{k, -k}) {
        out.passed = false;
        got = "ok_wrong_embedding";
      }
    }
  }
  if (t.header.count("expect_received") &&
      provider.received().size() != std::stoul(t.get("expect_received"))) {
    out.passed = false;
    got += " (provider saw " + std::to_string(provider.received().size()) + " requests)";
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.detail = "expected " + expect + ", got " + got + (detail.empty() ? "" : ": " + detail);
  return out;
}

}  // namespace ccd::testing
