// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// HTTP surface for the creature mixer. Artifacts are loaded once and only read;
// generation runs on a bounded worker pool behind a job queue.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "partsmith/composition.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/evaluation.hpp"
#include "partsmith/image.hpp"
#include "partsmith/model.hpp"

namespace partsmith::service {

inline std::string base64(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

struct Diagnostic {
  std::optional<std::size_t> channel;
  std::string problem;
};

inline bool is_count(const nlohmann::json& j) {
  return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0);
}

/// Channel-level problems with a JSON prompt code; empty when the code is valid.
inline std::vector<Diagnostic> code_diagnostics(const nlohmann::json& j, std::size_t M, std::size_t K) {
  std::vector<Diagnostic> out;
  if (!j.is_object()) return {{std::nullopt, "code must be a JSON object"}};
  if (!j.contains("M") || !is_count(j.at("M")))
    out.push_back({std::nullopt, "M must be a non-negative integer"});
  else if (j.at("M").get<std::size_t>() != M)
    out.push_back({std::nullopt, "M is " + j.at("M").dump() + ", dictionary has M=" + std::to_string(M)});
  if (!j.contains("pairs") || !j.at("pairs").is_array()) {
    out.push_back({std::nullopt, "pairs must be an array"});
    return out;
  }
  std::vector<bool> seen(M + 1, false);
  for (const auto& p : j.at("pairs")) {
    if (!p.is_object() || !p.contains("channel") || !is_count(p.at("channel"))) {
      out.push_back({std::nullopt, "each pair needs a non-negative integer channel"});
      continue;
    }
    const auto m = p.at("channel").get<std::size_t>();
    if (m > M) {
      out.push_back({m, "channel outside 0.." + std::to_string(M)});
      continue;
    }
    if (seen[m]) out.push_back({m, "channel listed twice"});
    seen[m] = true;
    if (!p.contains("split") || !is_count(p.at("split")))
      out.push_back({m, "split must be an integer in 1.." + std::to_string(K)});
    else if (const auto k = p.at("split").get<std::size_t>(); k < 1 || k > K)
      out.push_back({m, "split " + std::to_string(k) + " outside 1.." + std::to_string(K)});
  }
  if (out.empty() && std::none_of(seen.begin(), seen.end(), [](bool b) { return b; }))
    out.push_back({std::nullopt, "code has no present channel"});
  return out;
}

inline nlohmann::json to_json(const std::vector<Diagnostic>& ds) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : ds)
    out.push_back({{"channel", d.channel ? nlohmann::json(*d.channel) : nlohmann::json(nullptr)}, {"problem", d.problem}});
  return out;
}

struct ServiceOptions {
  std::size_t concurrency = 2;
  std::size_t max_queue = 64;
  std::string cors_origin = "*";
  int retry_after_seconds = 5;
  std::size_t sampler_steps = 50;
  std::size_t patch = 4;
};

enum class JobStatus { queued, running, done, failed };

inline const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "unknown";
}

struct Job {
  std::string id;
  PromptCode code;
  std::uint64_t seed = 0;
  std::string style_suffix;
  JobStatus status = JobStatus::queued;
  std::string prompt;
  std::string image_png;
  std::vector<std::pair<std::size_t, std::string>> attention_png;  // (channel, png)
  std::size_t attn_h = 0;
  std::size_t attn_w = 0;
  std::string error;
};

class MixerService {
 public:
  /// `backend` may be null to sample with the checkpoint's toy denoiser.
  MixerService(CreatureModel model, SubConceptDictionary dict, std::string dictionary_checksum,
               DenoiserBackend* backend = nullptr, ServiceOptions opts = {})
      : model_(std::move(model)), dict_(std::move(dict)), checksum_(std::move(dictionary_checksum)),
        backend_(backend), opts_(std::move(opts)) {
    require(dict_.M == model_.M && dict_.K == model_.K, ErrorKind::validation,
            "dictionary shape does not match the checkpoint");
    require(opts_.concurrency >= 1, ErrorKind::validation, "concurrency must be at least 1");
    for (std::size_t i = 0; i < opts_.concurrency; ++i) workers_.emplace_back([this] { work(); });
  }

  ~MixerService() {
    {
      std::lock_guard<std::mutex> g(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  MixerService(const MixerService&) = delete;
  MixerService& operator=(const MixerService&) = delete;

  void mount(httplib::Server& server) {
    server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", opts_.cors_origin);
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });
    server.Get("/v1/dictionary", [this](const httplib::Request&, httplib::Response& res) { dictionary(res); });
    server.Post("/v1/compose", [this](const httplib::Request& req, httplib::Response& res) { compose_route(req, res); });
    server.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) { generate_route(req, res); });
    server.Get(R"(/v1/jobs/([A-Za-z0-9-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      job_route(req.matches[1], res, false);
    });
    server.Get(R"(/v1/jobs/([A-Za-z0-9-]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
      job_route(req.matches[1], res, true);
    });
    server.Get(R"(/v1/attention/([A-Za-z0-9-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      attention_route(req.matches[1], res);
    });
  }

  /// Blocks until the job leaves the queue and finishes (test and CLI helper).
  JobStatus wait(const std::string& id, std::chrono::milliseconds timeout = std::chrono::minutes(5)) {
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait_for(lk, timeout, [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second->status == JobStatus::done || it->second->status == JobStatus::failed;
    });
    auto it = jobs_.find(id);
    return it == jobs_.end() ? JobStatus::failed : it->second->status;
  }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  void reject(httplib::Response& res, const std::string& what, const std::vector<Diagnostic>& ds) {
    send_json(res, 422, {{"error", what}, {"diagnostics", to_json(ds)}});
  }

  static std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
      return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      send_json(res, 400, {{"error", std::string("body is not JSON: ") + e.what()}});
      return std::nullopt;
    }
  }

  void dictionary(httplib::Response& res) const {
    nlohmann::json channels = nlohmann::json::array();
    for (std::size_t m = 0; m <= dict_.M; ++m)
      channels.push_back({{"channel", m}, {"name", m == kBackgroundChannel ? "background" : "part " + std::to_string(m)},
                          {"splits", dict_.K}});
    send_json(res, 200, {{"M", dict_.M}, {"K", dict_.K}, {"channels", channels},
                         {"dataset_name", dict_.dataset_name}, {"checksum", checksum_}, {"exemplars", nullptr}});
  }

  void compose_route(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    if (!body->contains("base")) return reject(res, "missing base code", {{std::nullopt, "base is required"}});
    const auto ds = code_diagnostics(body->at("base"), dict_.M, dict_.K);
    if (!ds.empty()) return reject(res, "invalid base code", ds);
    PromptCode code = code_from_json(body->at("base"));
    std::vector<Diagnostic> problems;
    std::vector<bool> used(code.channels(), false);
    for (const auto& r : body->value("replacements", nlohmann::json::array())) {
      // Each replacement is a single pair {channel, split}.
      nlohmann::json probe = {{"M", dict_.M}, {"pairs", nlohmann::json::array({r})}};
      const auto rd = code_diagnostics(probe, dict_.M, dict_.K);
      if (!rd.empty()) {
        problems.insert(problems.end(), rd.begin(), rd.end());
        continue;
      }
      const auto m = r.at("channel").get<std::size_t>();
      if (used[m]) {
        problems.push_back({m, "channel replaced twice"});
        continue;
      }
      used[m] = true;
      code.pairs[m] = {m, r.at("split").get<std::size_t>(), true};
    }
    if (!problems.empty()) return reject(res, "invalid replacement", problems);
    send_json(res, 200, code_to_json(code));
  }

  bool backend_cooling_down() const {
    return last_backend_failure_ &&
           std::chrono::steady_clock::now() - *last_backend_failure_ < std::chrono::seconds(opts_.retry_after_seconds);
  }

  void generate_route(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    if (!body->contains("code")) return reject(res, "missing code", {{std::nullopt, "code is required"}});
    const auto ds = code_diagnostics(body->at("code"), dict_.M, dict_.K);
    if (!ds.empty()) return reject(res, "invalid code", ds);
    auto job = std::make_shared<Job>();
    job->code = code_from_json(body->at("code"));
    job->seed = body->value("seed", std::uint64_t{0});
    job->style_suffix = body->value("style_suffix", std::string{});
    {
      std::lock_guard<std::mutex> g(mu_);
      if (backend_cooling_down() || queue_.size() >= opts_.max_queue) {
        res.set_header("Retry-After", std::to_string(opts_.retry_after_seconds));
        send_json(res, 503, {{"error", backend_cooling_down() ? "backend unavailable" : "job queue is full"}});
        return;
      }
      job->id = "job-" + std::to_string(++next_id_);
      jobs_[job->id] = job;
      queue_.push_back(job);
    }
    cv_.notify_one();
    send_json(res, 202, {{"job_id", job->id}, {"status", "queued"}});
  }

  std::shared_ptr<Job> find(const std::string& id) {
    std::lock_guard<std::mutex> g(mu_);
    auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : it->second;
  }

  void job_route(const std::string& id, httplib::Response& res, bool raw_image) {
    const auto job = find(id);
    if (!job) return send_json(res, 404, {{"error", "unknown job " + id}});
    std::lock_guard<std::mutex> g(mu_);
    if (raw_image) {
      if (job->status != JobStatus::done) return send_json(res, 409, {{"error", "job is " + std::string(to_string(job->status))}});
      res.set_content(job->image_png, "image/png");
      return;
    }
    nlohmann::json j = {{"job_id", job->id}, {"status", to_string(job->status)}, {"code", code_to_json(job->code)},
                        {"seed", job->seed}, {"style_suffix", job->style_suffix}};
    if (job->status == JobStatus::done) {
      j["prompt"] = job->prompt;
      j["image_png_base64"] = base64(job->image_png);
      j["image_url"] = "/v1/jobs/" + job->id + "/image";
    }
    if (job->status == JobStatus::failed) j["error"] = job->error;
    send_json(res, 200, j);
  }

  void attention_route(const std::string& id, httplib::Response& res) {
    const auto job = find(id);
    if (!job) return send_json(res, 404, {{"error", "unknown job " + id}});
    std::lock_guard<std::mutex> g(mu_);
    if (job->status != JobStatus::done) return send_json(res, 409, {{"error", "job is " + std::string(to_string(job->status))}});
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& [m, png] : job->attention_png) maps.push_back({{"channel", m}, {"png_base64", base64(png)}});
    send_json(res, 200, {{"job_id", job->id}, {"h", job->attn_h}, {"w", job->attn_w}, {"channels", maps}});
  }

  void work() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        job = queue_.front();
        queue_.pop_front();
        job->status = JobStatus::running;
      }
      run(*job);
      done_cv_.notify_all();
    }
  }

  void run(Job& job) {
    std::string png, prompt, error;
    std::vector<std::pair<std::size_t, std::string>> maps;
    std::size_t h = 0, w = 0;
    bool backend_down = false;
    try {
      SamplerOptions opts{opts_.sampler_steps, job.seed, job.style_suffix};
      const GenerationResult g = generate(model_, job.code, opts, backend_, opts_.patch);
      png = encode_png(g.image);
      prompt = g.prompt;
      if (!g.attention.data.empty()) {
        const NormalizedAttention a = normalize_attention(g.attention);
        h = a.h;
        w = a.w;
        for (std::size_t m = 0; m < a.channels; ++m) {
          if (!a.present[m]) continue;
          std::vector<std::uint8_t> px(a.cells());
          for (std::size_t i = 0; i < a.cells(); ++i)
            px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(a.at(m, i), 0.0, 1.0) * 255.0));
          maps.emplace_back(m, encode_png(a.w, a.h, 1, px));
        }
      }
    } catch (const Error& e) {
      error = e.what();
      backend_down = e.kind() == ErrorKind::backend_unavailable;
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard<std::mutex> g(mu_);
    if (error.empty()) {
      job.image_png = std::move(png);
      job.prompt = std::move(prompt);
      job.attention_png = std::move(maps);
      job.attn_h = h;
      job.attn_w = w;
      job.status = JobStatus::done;
    } else {
      job.error = std::move(error);
      job.status = JobStatus::failed;
      if (backend_down) last_backend_failure_ = std::chrono::steady_clock::now();
    }
  }

  CreatureModel model_;
  SubConceptDictionary dict_;
  std::string checksum_;
  DenoiserBackend* backend_;
  ServiceOptions opts_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::optional<std::chrono::steady_clock::time_point> last_backend_failure_;
  std::size_t next_id_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace partsmith::service
