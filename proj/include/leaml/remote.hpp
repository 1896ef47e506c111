#pragma once

// Client for a chat-completion style captioning endpoint. Requests carry the
// prompt plus the visual features as JSON; responses are cached on disk, one
// file per content hash, so reruns never touch the network.
//
// Request:  {"model": str, "max_tokens": int,
//            "messages": [{"role": "user", "content": [
//                {"type": "text", "text": prompt},
//                {"type": "visual_features", "features": [[...], ...]}]}]}
// Response: {"choices": [{"message": {"content": str}}]}

#include <sys/file.h>
#include <unistd.h>
#include <fcntl.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "leaml/checkpoint.hpp"
#include "leaml/dataset.hpp"

namespace leaml {

inline constexpr const char* kDefaultCaptionPrompt =
    "Describe the findings in this image in one sentence. Mention what is visible, its color, how many there "
    "are, where it is located, and whether there is bleeding.";

struct HttpRequest {
  std::string url;
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Sends one request. Network-level failures throw TransportError.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

class HttplibTransport : public Transport {
 public:
  explicit HttplibTransport(std::chrono::seconds timeout = std::chrono::seconds(60)) : timeout_(timeout) {}

  HttpResponse post(const HttpRequest& request) override {
    auto [origin, path] = split_url(request.url);
    httplib::Client client(origin);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers headers;
    for (const auto& [k, v] : request.headers) headers.emplace(k, v);
    auto res = client.Post(path, headers, request.body, "application/json");
    if (!res) throw TransportError("request to " + request.url + " failed: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }

  /// "http://host:port/a/b" -> {"http://host:port", "/a/b"}.
  static std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw InvalidInput("endpoint '" + url + "' lacks a scheme");
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
  }

 private:
  std::chrono::seconds timeout_;
};

struct RemoteCaptionConfig {
  std::string endpoint;
  std::string model = "teacher";
  std::string auth_env = "LEAML_CAPTIONER_TOKEN";
  std::filesystem::path cache_dir = "caption_cache";
  int max_attempts = 3;
  std::chrono::milliseconds backoff{250};  // doubled after every failed attempt
  int max_tokens = 128;
};

class RemoteCaptioner {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  RemoteCaptioner(RemoteCaptionConfig config, std::shared_ptr<Transport> transport, Sleeper sleeper = {})
      : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
    if (config_.endpoint.empty()) throw InvalidInput("remote captioner endpoint is not configured");
    if (config_.max_attempts < 1) throw InvalidInput("max_attempts must be at least 1");
    if (!transport_) throw InvalidInput("remote captioner needs a transport");
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }

  std::string request_body(const VisualInput& visual, const std::string& prompt) const {
    validate_visual(visual);
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", prompt}});
    content.push_back({{"type", "visual_features"}, {"features", visual_to_json(visual)}});
    nlohmann::json body = {{"model", config_.model},
                           {"max_tokens", config_.max_tokens},
                           {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
    return body.dump();
  }

  /// Hex content hash of (endpoint, request body).
  std::string cache_key(const std::string& body) const {
    const std::string keyed = config_.endpoint + '\n' + body;
    const auto* p = reinterpret_cast<const std::uint8_t*>(keyed.data());
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(fnv1a64(p, keyed.size())),
                  static_cast<unsigned long long>(fnv1a64(p, keyed.size(), 0x84222325cbf29ce4ULL)));
    return buf;
  }

  std::filesystem::path cache_path(const std::string& key) const { return config_.cache_dir / (key + ".json"); }

  std::string caption(const VisualInput& visual, const std::string& prompt = kDefaultCaptionPrompt) {
    const auto body = request_body(visual, prompt);
    const auto key = cache_key(body);
    if (auto hit = read_cache(key)) return *hit;

    HttpRequest req{config_.endpoint, {{"Content-Type", "application/json"}}, body};
    if (const char* token = std::getenv(config_.auth_env.c_str()); token && *token) {
      req.headers.emplace_back("Authorization", std::string("Bearer ") + token);
    }
    std::string last_error;
    auto delay = config_.backoff;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      try {
        auto res = transport_->post(req);
        if (res.status >= 200 && res.status < 300) {
          auto text = parse_response(res.body);
          write_cache(key, text);
          return text;
        }
        last_error = "HTTP status " + std::to_string(res.status);
        if (res.status < 500 && res.status != 429) break;
      } catch (const TransportError& e) {
        last_error = e.what();
      }
      if (attempt < config_.max_attempts) {
        sleeper_(delay);
        delay *= 2;
      }
    }
    throw TransportError("remote captioner failed: " + last_error);
  }

  static std::string parse_response(const std::string& body) {
    try {
      auto j = nlohmann::json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (!content.is_string()) throw ProtocolError("response content is not a string");
      return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed captioner response: ") + e.what());
    }
  }

 private:
  std::optional<std::string> read_cache(const std::string& key) const {
    const auto path = cache_path(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    try {
      return nlohmann::json::parse(in).at("caption").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;  // a damaged entry is refetched and overwritten
    }
  }

  void write_cache(const std::string& key, const std::string& text) const {
    std::filesystem::create_directories(config_.cache_dir);
    const auto lock_path = config_.cache_dir / ".lock";
    const int fd = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd < 0) throw Error("cannot open cache lock " + lock_path.string());
    ::flock(fd, LOCK_EX);
    const auto path = cache_path(key);
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      out << nlohmann::json{{"caption", text}}.dump() << '\n';
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    ::flock(fd, LOCK_UN);
    ::close(fd);
    if (ec) throw Error("cannot write cache entry " + path.string() + ": " + ec.message());
  }

  RemoteCaptionConfig config_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
};

/// One-shot convenience over the default HTTP transport.
inline std::string remote_caption(const RemoteCaptionConfig& config, const VisualInput& visual,
                                  const std::string& prompt = kDefaultCaptionPrompt) {
  RemoteCaptioner c(config, std::make_shared<HttplibTransport>());
  return c.caption(visual, prompt);
}

}  // namespace leaml
