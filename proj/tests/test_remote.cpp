#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "leaml/remote.hpp"

#ifndef LEAML_FIXTURE_DIR
#define LEAML_FIXTURE_DIR "tests/fixtures"
#endif

using namespace leaml;
namespace fs = std::filesystem;

namespace {

class Recorder : public Transport {
 public:
  std::vector<HttpResponse> script;  // replayed in order, the last one repeats
  std::vector<HttpRequest> calls;
  bool fail_network = false;

  HttpResponse post(const HttpRequest& request) override {
    calls.push_back(request);
    if (fail_network) throw TransportError("connection refused");
    return script.at(std::min(calls.size() - 1, script.size() - 1));
  }
};

std::string ok_body(const std::string& text) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}}}.dump();
}

VisualInput visual(double shift = 0.0) {
  VisualInput v;
  v.rows = 2;
  v.dim = 3;
  v.features = {0.5 + shift, -1.25, 3.0, 0.0, 1e-3, -7.5};
  return v;
}

RemoteCaptionConfig config(const std::string& name) {
  RemoteCaptionConfig c;
  c.endpoint = "http://captioner.invalid/v1/chat/completions";
  c.cache_dir = fs::temp_directory_path() / "leaml_test_remote" / name;
  fs::remove_all(c.cache_dir);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(RemoteCaptioner, RequestCarriesPromptAndFeatures) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{200, ok_body("two pink polyp")}};
  RemoteCaptioner c(config("request"), rec, [](auto) {});
  EXPECT_EQ(c.caption(visual(), "describe"), "two pink polyp");
  ASSERT_EQ(rec->calls.size(), 1u);
  EXPECT_EQ(rec->calls[0].url, "http://captioner.invalid/v1/chat/completions");
  const auto body = nlohmann::json::parse(rec->calls[0].body);
  EXPECT_EQ(body.at("model"), "teacher");
  const auto& content = body.at("messages").at(0).at("content");
  EXPECT_EQ(content.at(0).at("text"), "describe");
  EXPECT_EQ(content.at(1).at("features").size(), 2u);
  EXPECT_DOUBLE_EQ(content.at(1).at("features").at(1).at(2).get<double>(), -7.5);
}

TEST(RemoteCaptioner, CacheHitIssuesNoRequest) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{200, ok_body("one amber clip")}};
  const auto cfg = config("cache");
  RemoteCaptioner first(cfg, rec, [](auto) {});
  EXPECT_EQ(first.caption(visual()), "one amber clip");
  ASSERT_EQ(rec->calls.size(), 1u);

  auto silent = std::make_shared<Recorder>();
  silent->fail_network = true;
  RemoteCaptioner second(cfg, silent, [](auto) {});
  EXPECT_EQ(second.caption(visual()), "one amber clip");
  EXPECT_TRUE(silent->calls.empty());
}

TEST(RemoteCaptioner, DifferentPayloadOrPromptMissesCache) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{200, ok_body("x")}};
  RemoteCaptioner c(config("miss"), rec, [](auto) {});
  c.caption(visual());
  c.caption(visual(0.25));
  c.caption(visual(), "another prompt");
  c.caption(visual());
  EXPECT_EQ(rec->calls.size(), 3u);
  EXPECT_NE(c.cache_key(c.request_body(visual(), "a")), c.cache_key(c.request_body(visual(), "b")));
}

TEST(RemoteCaptioner, ServerErrorFailsAfterExactlyThreeAttempts) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{500, "internal error"}};
  std::vector<std::chrono::milliseconds> sleeps;
  RemoteCaptioner c(config("500"), rec, [&](auto d) { sleeps.push_back(d); });
  EXPECT_THROW(c.caption(visual()), TransportError);
  EXPECT_EQ(rec->calls.size(), 3u);
  ASSERT_EQ(sleeps.size(), 2u);
  EXPECT_EQ(sleeps[1], 2 * sleeps[0]);
}

TEST(RemoteCaptioner, NetworkFailureRetriesThenThrows) {
  auto rec = std::make_shared<Recorder>();
  rec->fail_network = true;
  RemoteCaptioner c(config("net"), rec, [](auto) {});
  EXPECT_THROW(c.caption(visual()), TransportError);
  EXPECT_EQ(rec->calls.size(), 3u);
}

TEST(RemoteCaptioner, RecoversWhenARetrySucceeds) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{503, ""}, {429, ""}, {200, ok_body("three violet ulcer")}};
  RemoteCaptioner c(config("recover"), rec, [](auto) {});
  EXPECT_EQ(c.caption(visual()), "three violet ulcer");
  EXPECT_EQ(rec->calls.size(), 3u);
}

TEST(RemoteCaptioner, ClientErrorIsNotRetried) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{401, "unauthorized"}};
  RemoteCaptioner c(config("401"), rec, [](auto) {});
  EXPECT_THROW(c.caption(visual()), TransportError);
  EXPECT_EQ(rec->calls.size(), 1u);
}

TEST(RemoteCaptioner, MalformedBodyIsAProtocolError) {
  for (const char* body : {"not json", "{}", R"({"choices": []})", R"({"choices": [{"message": {"content": 3}}]})"}) {
    auto rec = std::make_shared<Recorder>();
    rec->script = {{200, body}};
    RemoteCaptioner c(config("malformed"), rec, [](auto) {});
    EXPECT_THROW(c.caption(visual()), ProtocolError) << body;
    EXPECT_FALSE(fs::exists(c.cache_path(c.cache_key(c.request_body(visual(), kDefaultCaptionPrompt)))));
  }
}

TEST(RemoteCaptioner, AuthTokenComesFromTheEnvironment) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{200, ok_body("ok")}};
  auto cfg = config("auth");
  cfg.auth_env = "LEAML_TEST_REMOTE_TOKEN";
  ::setenv("LEAML_TEST_REMOTE_TOKEN", "s3cret", 1);
  RemoteCaptioner c(cfg, rec, [](auto) {});
  c.caption(visual());
  ::unsetenv("LEAML_TEST_REMOTE_TOKEN");
  bool found = false;
  for (const auto& [k, v] : rec->calls.at(0).headers) found |= k == "Authorization" && v == "Bearer s3cret";
  EXPECT_TRUE(found);
}

TEST(RemoteCaptioner, DamagedCacheEntryIsRefetched) {
  auto rec = std::make_shared<Recorder>();
  rec->script = {{200, ok_body("fresh")}};
  RemoteCaptioner c(config("damaged"), rec, [](auto) {});
  const auto path = c.cache_path(c.cache_key(c.request_body(visual(), kDefaultCaptionPrompt)));
  fs::create_directories(path.parent_path());
  std::ofstream(path) << "{\"capt";
  EXPECT_EQ(c.caption(visual()), "fresh");
  EXPECT_EQ(rec->calls.size(), 1u);
  EXPECT_EQ(nlohmann::json::parse(slurp(path)).at("caption"), "fresh");
}

TEST(RemoteCaptioner, RejectsBadConfiguration) {
  auto rec = std::make_shared<Recorder>();
  auto cfg = config("bad");
  cfg.endpoint.clear();
  EXPECT_THROW(RemoteCaptioner(cfg, rec), InvalidInput);
  cfg = config("bad");
  cfg.max_attempts = 0;
  EXPECT_THROW(RemoteCaptioner(cfg, rec), InvalidInput);
  EXPECT_THROW(RemoteCaptioner(config("bad"), nullptr), InvalidInput);
  RemoteCaptioner c(config("bad"), rec);
  VisualInput broken;
  broken.rows = 2;
  broken.dim = 2;
  EXPECT_THROW(c.caption(broken), InvalidInput);
  EXPECT_TRUE(rec->calls.empty());
}

TEST(HttplibTransport, SplitsUrls) {
  EXPECT_EQ(HttplibTransport::split_url("http://h:8/a/b"), std::make_pair(std::string("http://h:8"), std::string("/a/b")));
  EXPECT_EQ(HttplibTransport::split_url("http://h"), std::make_pair(std::string("http://h"), std::string("/")));
  EXPECT_THROW(HttplibTransport::split_url("h/a"), InvalidInput);
}

// A local server replays a recorded response over real HTTP.
TEST(HttplibTransport, FixtureEndpointRoundTripsCaptionBytes) {
  const auto fixture = slurp(fs::path(LEAML_FIXTURE_DIR) / "captioner_response.json");
  ASSERT_FALSE(fixture.empty());
  const std::string expected = nlohmann::json::parse(fixture)["choices"][0]["message"]["content"];

  httplib::Server server;
  std::atomic<int> hits{0};
  std::string seen_prompt;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    seen_prompt = nlohmann::json::parse(req.body)["messages"][0]["content"][0]["text"];
    res.set_content(fixture, "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto cfg = config("fixture");
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  RemoteCaptioner c(cfg, std::make_shared<HttplibTransport>(std::chrono::seconds(5)), [](auto) {});
  const auto got = c.caption(visual(), "placeholder prompt");
  const auto again = c.caption(visual(), "placeholder prompt");
  server.stop();
  th.join();

  EXPECT_EQ(got, expected);
  EXPECT_EQ(again, expected);
  EXPECT_EQ(hits.load(), 1);
  EXPECT_EQ(seen_prompt, "placeholder prompt");
}

TEST(HttplibTransport, UnreachableEndpointIsATransportError) {
  httplib::Server probe;
  const int port = probe.bind_to_any_port("127.0.0.1");
  probe.stop();
  auto cfg = config("unreachable");
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/x";
  cfg.backoff = std::chrono::milliseconds(0);
  RemoteCaptioner c(cfg, std::make_shared<HttplibTransport>(std::chrono::seconds(2)));
  EXPECT_THROW(c.caption(visual()), TransportError);
}
