// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Denoiser over HTTP. Frames are
//   u32 LE header length | JSON header | PSFM blocks named in header["blocks"]
// Matrices travel as PSFM blocks with grid (rows x 1) and dim = cols.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "partsmith/denoiser.hpp"
#include "partsmith/error.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/psfm.hpp"

namespace partsmith::remote {

inline constexpr const char* kFrameType = "application/x-partsmith-frame";
inline const std::vector<int> kClientVersions = {1};

struct Frame {
  nlohmann::json header = nlohmann::json::object();
  std::vector<Matrix> blocks;
};

inline std::string encode_frame(const Frame& f) {
  const std::string head = f.header.dump();
  std::string out;
  psfm::detail::put_u32(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  for (const Matrix& m : f.blocks)
    out += psfm::encode(psfm::from_doubles(static_cast<std::uint32_t>(m.rows), 1, static_cast<std::uint32_t>(m.cols), m.data));
  return out;
}

inline Frame decode_frame(std::string_view bytes) {
  require(bytes.size() >= 4, ErrorKind::format, "frame shorter than its length prefix");
  const std::uint32_t n = psfm::detail::get_u32(reinterpret_cast<const unsigned char*>(bytes.data()));
  require(bytes.size() >= 4 + static_cast<std::size_t>(n), ErrorKind::corruption, "frame header truncated");
  Frame f;
  try {
    f.header = nlohmann::json::parse(bytes.substr(4, n));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("frame header is not JSON: ") + e.what());
  }
  std::size_t pos = 4 + n;
  while (pos < bytes.size()) {
    std::size_t used = 0;
    const psfm::Block b = psfm::decode(bytes.substr(pos), &used);
    require(b.grid_w == 1, ErrorKind::format, "frame block is not a matrix");
    f.blocks.emplace_back(b.grid_h, b.dim, psfm::to_doubles(b));
    pos += used;
  }
  return f;
}

/// Highest version both sides support, or 0.
inline int negotiate(const std::vector<int>& server, const std::vector<int>& client = kClientVersions) {
  int best = 0;
  for (int v : server)
    if (std::find(client.begin(), client.end(), v) != client.end()) best = std::max(best, v);
  return best;
}

// ---- wire encoding of calls -------------------------------------------------------

inline Frame encode_request(int version, const Matrix& z_t, std::size_t t, const Conditioning& cond) {
  Frame f;
  f.header = {{"protocol_version", version},
              {"t", t},
              {"channels", cond.channels},
              {"positions", cond.prompt.positions},
              {"channel_of_position", cond.prompt.channel_of_position},
              {"blocks", {"z_t", "prompt"}}};
  f.blocks = {z_t, cond.prompt.token_vectors};
  return f;
}

struct DecodedRequest {
  int version = 0;
  Matrix z_t;
  std::size_t t = 0;
  Conditioning cond;
};

inline DecodedRequest decode_request(const Frame& f) {
  require(f.blocks.size() == 2, ErrorKind::validation, "predict_noise expects z_t and prompt blocks");
  DecodedRequest r;
  r.version = f.header.at("protocol_version").get<int>();
  r.t = f.header.at("t").get<std::size_t>();
  r.cond.channels = f.header.at("channels").get<std::size_t>();
  r.cond.prompt.positions = f.header.at("positions").get<std::vector<std::size_t>>();
  r.cond.prompt.channel_of_position = f.header.at("channel_of_position").get<std::vector<std::size_t>>();
  r.z_t = f.blocks[0];
  r.cond.prompt.token_vectors = f.blocks[1];
  return r;
}

inline Frame encode_response(const NoisePrediction& p) {
  Frame f;
  const AttentionStack& a = p.attention;
  std::vector<bool> present = a.present;
  f.header = {{"blocks", {"eps", "attention"}},
              {"attention", {{"layers", a.layers}, {"channels", a.channels}, {"h", a.h}, {"w", a.w},
                             {"present", present}}}};
  f.blocks.push_back(p.eps);
  f.blocks.emplace_back(a.layers * a.channels, a.cells(), a.data);
  return f;
}

inline NoisePrediction decode_response(const Frame& f) {
  require(f.blocks.size() == 2, ErrorKind::format, "predict_noise response needs eps and attention blocks");
  NoisePrediction p;
  p.eps = f.blocks[0];
  const auto& a = f.header.at("attention");
  p.attention = AttentionStack(a.at("layers").get<std::size_t>(), a.at("channels").get<std::size_t>(),
                               a.at("h").get<std::size_t>(), a.at("w").get<std::size_t>());
  const auto present = a.at("present").get<std::vector<bool>>();
  require(present.size() == p.attention.channels, ErrorKind::format, "attention presence length mismatch");
  p.attention.present = present;
  require(f.blocks[1].data.size() == p.attention.data.size(), ErrorKind::format, "attention block size mismatch");
  p.attention.data = f.blocks[1].data;
  return p;
}

// ---- client -------------------------------------------------------------------------

struct ClientOptions {
  std::string token;  // sent as a bearer token when non-empty
  int retries = 3;
  std::chrono::milliseconds backoff{100};  // doubled after each failed attempt
  std::chrono::seconds timeout{30};
};

struct Endpoint {
  std::string base;  // scheme://host:port
};

inline Endpoint parse_url(const std::string& url) {
  const std::string prefix = "remote:";
  std::string u = url.rfind(prefix, 0) == 0 ? url.substr(prefix.size()) : url;
  require(u.rfind("http://", 0) == 0 || u.rfind("https://", 0) == 0, ErrorKind::validation,
          "backend URL must start with http:// or https://: " + url);
  while (!u.empty() && u.back() == '/') u.pop_back();
  return {u};
}

class RemoteBackend final : public DenoiserBackend {
 public:
  RemoteBackend(const std::string& url, ClientOptions opts = {}) : endpoint_(parse_url(url)), opts_(std::move(opts)) {
    const nlohmann::json caps = get_json("/v1/capabilities");
    const auto versions = caps.value("supported_versions", std::vector<int>{caps.value("protocol_version", 1)});
    version_ = negotiate(versions);
    if (version_ == 0)
      fail(ErrorKind::backend_unavailable,
           "no common protocol version with " + endpoint_.base + " (server offers " + nlohmann::json(versions).dump() +
               ", client supports " + nlohmann::json(kClientVersions).dump() + ")");
    try {
      caps_ = caps.get<BackendCapabilities>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::backend_unavailable, std::string("malformed capabilities: ") + e.what());
    }
    caps_.protocol_version = version_;
  }

  int protocol_version() const { return version_; }
  std::size_t attempts() const { return attempts_; }
  BackendCapabilities capabilities() const override { return caps_; }

  NoisePrediction predict_noise(const Matrix& z_t, std::size_t t, const Conditioning& cond) override {
    require(z_t.rows == caps_.latent_channels && z_t.cols == caps_.latent_h * caps_.latent_w,
            ErrorKind::validation, "latent shape does not match the remote backend declaration");
    const std::string body = encode_frame(encode_request(version_, z_t, t, cond));
    const httplib::Result res = with_retries([&](httplib::Client& c) {
      return c.Post("/v1/predict_noise", headers(), body, kFrameType);
    });
    if (res->status == 422) fail(ErrorKind::validation, "remote backend rejected the request: " + res->body);
    if (res->status != 200)
      fail(ErrorKind::backend_unavailable, "predict_noise returned HTTP " + std::to_string(res->status));
    try {
      NoisePrediction p = decode_response(decode_frame(res->body));
      require(p.eps.same_shape(z_t), ErrorKind::format, "remote eps shape differs from z_t");
      return p;
    } catch (const Error& e) {
      fail(ErrorKind::backend_unavailable, std::string("protocol error: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::backend_unavailable, std::string("protocol error: ") + e.what());
    }
  }

 private:
  httplib::Headers headers() const {
    httplib::Headers h;
    if (!opts_.token.empty()) h.emplace("Authorization", "Bearer " + opts_.token);
    return h;
  }

  // Connection failures and 5xx responses are retried with exponential backoff.
  template <typename Call>
  httplib::Result with_retries(Call&& call) {
    std::chrono::milliseconds wait = opts_.backoff;
    std::string last = "no attempt";
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(wait);
        wait *= 2;
      }
      ++attempts_;
      httplib::Client client(endpoint_.base);
      client.set_connection_timeout(opts_.timeout);
      client.set_read_timeout(opts_.timeout);
      client.set_write_timeout(opts_.timeout);
      httplib::Result res = call(client);
      if (res && res->status < 500) return res;
      last = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
    }
    fail(ErrorKind::backend_unavailable, endpoint_.base + " unreachable after " + std::to_string(opts_.retries) +
                                             " retries (" + last + ")");
  }

  nlohmann::json get_json(const std::string& path) {
    const httplib::Result res = with_retries([&](httplib::Client& c) { return c.Get(path, headers()); });
    if (res->status != 200) fail(ErrorKind::backend_unavailable, path + " returned HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::backend_unavailable, path + " is not JSON: " + e.what());
    }
  }

  Endpoint endpoint_;
  ClientOptions opts_;
  BackendCapabilities caps_;
  int version_ = 0;
  std::atomic<std::size_t> attempts_{0};
};

// ---- server side ------------------------------------------------------------------

/// Registers /v1/capabilities and /v1/predict_noise for `backend` on `server`. Calls into
/// the backend are serialised.
inline void mount_backend(httplib::Server& server, DenoiserBackend& backend,
                          std::vector<int> versions = kClientVersions) {
  auto lock = std::make_shared<std::mutex>();
  server.Get("/v1/capabilities", [&backend, versions](const httplib::Request&, httplib::Response& res) {
    nlohmann::json j = backend.capabilities();
    j["supported_versions"] = versions;
    j["protocol_version"] = *std::max_element(versions.begin(), versions.end());
    res.set_content(j.dump(), "application/json");
  });
  server.Post("/v1/predict_noise", [&backend, versions, lock](const httplib::Request& req, httplib::Response& res) {
    try {
      const DecodedRequest r = decode_request(decode_frame(req.body));
      if (std::find(versions.begin(), versions.end(), r.version) == versions.end()) {
        res.status = 422;
        res.set_content("unsupported protocol version " + std::to_string(r.version), "text/plain");
        return;
      }
      NoisePrediction p;
      {
        std::lock_guard<std::mutex> guard(*lock);
        p = backend.predict_noise(r.z_t, r.t, r.cond);
      }
      res.set_content(encode_frame(encode_response(p)), kFrameType);
    } catch (const std::exception& e) {
      res.status = 422;
      res.set_content(e.what(), "text/plain");
    }
  });
}

/// Background HTTP server bound to an ephemeral (or given) port on 127.0.0.1.
class ServerThread {
 public:
  explicit ServerThread(std::function<void(httplib::Server&)> setup, int port = 0) {
    setup(server_);
    port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
    require(port_ > 0, ErrorKind::io, "could not bind a local port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~ServerThread() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  ServerThread(const ServerThread&) = delete;
  ServerThread& operator=(const ServerThread&) = delete;

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  httplib::Server& server() { return server_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace partsmith::remote
