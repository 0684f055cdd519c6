// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <random>

#include "partsmith/composition.hpp"
#include "partsmith/remote_backend.hpp"
#include "partsmith/training.hpp"
#include "test_util.hpp"

namespace partsmith {
namespace {

using testing::expect_error;

Matrix random_matrix(std::mt19937_64& gen, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  std::normal_distribution<double> n;
  for (double& v : m.data) v = n(gen);
  return m;
}

Conditioning prompt(std::mt19937_64& gen) {
  Conditioning c;
  c.channels = 3;
  c.prompt.token_vectors = random_matrix(gen, 6, 16);
  c.prompt.positions = {3, 4, 5};
  c.prompt.channel_of_position = {0, 1, 2};
  return c;
}

void expect_close(const Matrix& a, const Matrix& b) {
  ASSERT_TRUE(a.same_shape(b));
  for (std::size_t k = 0; k < a.data.size(); ++k)
    ASSERT_NEAR(a.data[k], b.data[k], 1e-6 * (1.0 + std::abs(b.data[k])));
}

remote::ClientOptions fast_retries() {
  remote::ClientOptions o;
  o.retries = 2;
  o.backoff = std::chrono::milliseconds(5);
  o.timeout = std::chrono::seconds(5);
  return o;
}

TEST(Frame, RoundTripsHeaderAndBlocks) {
  std::mt19937_64 gen(1);
  remote::Frame f;
  f.header = {{"k", "v"}, {"n", 3}};
  f.blocks = {random_matrix(gen, 2, 3), random_matrix(gen, 5, 1)};
  const auto back = remote::decode_frame(remote::encode_frame(f));
  EXPECT_EQ(back.header, f.header);
  ASSERT_EQ(back.blocks.size(), 2u);
  expect_close(back.blocks[0], f.blocks[0]);
  expect_close(back.blocks[1], f.blocks[1]);
}

TEST(Frame, RejectsTruncatedInput) {
  expect_error(ErrorKind::format, [] { remote::decode_frame("ab"); });
  std::string bytes = remote::encode_frame({});
  bytes[0] = 100;
  expect_error(ErrorKind::corruption, [&] { remote::decode_frame(bytes); });
}

TEST(Frame, RequestAndResponseRoundTrip) {
  std::mt19937_64 gen(2);
  const Matrix z = random_matrix(gen, 4, 256);
  const auto cond = prompt(gen);
  const auto r = remote::decode_request(remote::decode_frame(remote::encode_frame(remote::encode_request(1, z, 77, cond))));
  EXPECT_EQ(r.version, 1);
  EXPECT_EQ(r.t, 77u);
  EXPECT_EQ(r.cond.prompt.positions, cond.prompt.positions);
  expect_close(r.z_t, z);
  ToyDenoiser net;
  const auto p = net.predict_noise(z, 77, cond);
  const auto q = remote::decode_response(remote::decode_frame(remote::encode_frame(remote::encode_response(p))));
  expect_close(q.eps, p.eps);
  EXPECT_EQ(q.attention.present, p.attention.present);
  EXPECT_EQ(q.attention.layers, p.attention.layers);
}

TEST(Negotiation, PicksTheHighestCommonVersion) {
  EXPECT_EQ(remote::negotiate({1, 2, 3}, {1, 2}), 2);
  EXPECT_EQ(remote::negotiate({1}, {1, 2}), 1);
  EXPECT_EQ(remote::negotiate({3}, {1, 2}), 0);
}

TEST(Url, AcceptsRemotePrefixAndRejectsOtherSchemes) {
  EXPECT_EQ(remote::parse_url("remote:http://h:1/").base, "http://h:1");
  EXPECT_EQ(remote::parse_url("https://x").base, "https://x");
  expect_error(ErrorKind::validation, [] { remote::parse_url("ftp://x"); });
}

TEST(RemoteBackend, MatchesTheLocalDenoiser) {
  ToyDenoiser local;
  remote::ServerThread server([&](httplib::Server& s) { remote::mount_backend(s, local); });
  remote::RemoteBackend backend(server.url(), fast_retries());
  EXPECT_EQ(backend.protocol_version(), 1);
  EXPECT_EQ(backend.capabilities().latent_channels, 4u);
  EXPECT_FALSE(backend.capabilities().attention_taps.empty());
  std::mt19937_64 gen(3);
  const Matrix z = random_matrix(gen, 4, 256);
  const auto cond = prompt(gen);
  const auto want = local.predict_noise(z, 500, cond);
  const auto got = backend.predict_noise(z, 500, cond);
  // Values travel as float32.
  expect_close(got.eps, want.eps);
  EXPECT_EQ(got.attention.present, want.attention.present);
  expect_error(ErrorKind::validation, [&] { backend.predict_noise(Matrix(3, 256), 0, cond); });
}

TEST(RemoteBackend, SamplingIsSeedDeterministic) {
  ToyDenoiser local;
  remote::ServerThread server([&](httplib::Server& s) { remote::mount_backend(s, local); });
  remote::RemoteBackend backend(server.url(), fast_retries());
  std::mt19937_64 gen(4);
  const auto cond = prompt(gen);
  SamplerOptions opts;
  opts.steps = 4;
  opts.seed = 12;
  const auto a = sample_latent(backend, cond, local.schedule(), opts);
  const auto b = sample_latent(backend, cond, local.schedule(), opts);
  EXPECT_EQ(a.latent, b.latent);
}

TEST(RemoteBackend, NoCommonVersionIsUnavailable) {
  ToyDenoiser local;
  remote::ServerThread server([&](httplib::Server& s) { remote::mount_backend(s, local, {7, 8}); });
  try {
    remote::RemoteBackend backend(server.url(), fast_retries());
    ADD_FAILURE() << "expected a negotiation failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::backend_unavailable);
    EXPECT_NE(std::string(e.what()).find("[7,8]"), std::string::npos) << e.what();
  }
}

TEST(RemoteBackend, RetriesServerErrorsThenSucceeds) {
  ToyDenoiser local;
  std::atomic<int> failures{2};
  remote::ServerThread server([&](httplib::Server& s) {
    remote::mount_backend(s, local);
    s.set_pre_routing_handler([&](const httplib::Request&, httplib::Response& res) {
      if (failures.fetch_sub(1) > 0) {
        res.status = 503;
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });
  });
  remote::RemoteBackend backend(server.url(), fast_retries());
  EXPECT_EQ(backend.attempts(), 3u);
}

TEST(RemoteBackend, UnreachableServerIsUnavailable) {
  int port = 0;
  {
    ToyDenoiser local;
    remote::ServerThread server([&](httplib::Server& s) { remote::mount_backend(s, local); });
    port = server.port();
  }
  expect_error(ErrorKind::backend_unavailable,
               [&] { remote::RemoteBackend("http://127.0.0.1:" + std::to_string(port), fast_retries()); });
}

TEST(RemoteBackend, RejectedRequestIsAValidationError) {
  ToyDenoiser local;
  remote::ServerThread server([&](httplib::Server& s) {
    s.Get("/v1/capabilities", [&](const httplib::Request&, httplib::Response& res) {
      res.set_content(nlohmann::json(local.capabilities()).dump(), "application/json");
    });
    s.Post("/v1/predict_noise", [](const httplib::Request&, httplib::Response& res) {
      res.status = 422;
      res.set_content("prompt too long", "text/plain");
    });
  });
  remote::RemoteBackend backend(server.url(), fast_retries());
  std::mt19937_64 gen(5);
  try {
    backend.predict_noise(random_matrix(gen, 4, 256), 3, prompt(gen));
    ADD_FAILURE() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
    EXPECT_NE(std::string(e.what()).find("prompt too long"), std::string::npos);
  }
}

TEST(RemoteBackend, SendsTheBearerToken) {
  ToyDenoiser local;
  std::string seen;
  remote::ServerThread server([&](httplib::Server& s) {
    s.Get("/v1/capabilities", [&](const httplib::Request& req, httplib::Response& res) {
      seen = req.get_header_value("Authorization");
      nlohmann::json j = local.capabilities();
      j["supported_versions"] = {1};
      res.set_content(j.dump(), "application/json");
    });
  });
  auto opts = fast_retries();
  opts.token = "s3cret";
  remote::RemoteBackend backend(server.url(), opts);
  EXPECT_EQ(seen, "Bearer s3cret");
}

TEST(RemoteBackend, CannotBeTrained) {
  ToyDenoiser local;
  remote::ServerThread server([&](httplib::Server& s) { remote::mount_backend(s, local); });
  remote::RemoteBackend backend(server.url(), fast_retries());
  TrainConfig cfg;
  expect_error(ErrorKind::dependency, [&] { require_trainable(backend, cfg); });
}

}  // namespace
}  // namespace partsmith
