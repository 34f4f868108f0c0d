// Copyright 2026 The mvdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <atomic>
#include <bit>
#include <cstring>
#include <random>
#include <thread>

#include "doctest.h"
#include "mvd/bridge.hpp"
#include "mvd/consistency.hpp"
#include "test_util.hpp"

namespace mvd {
namespace {

using nlohmann::json;

WireMessage random_message(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(1, 4);
  std::uniform_int_distribution<int> count(0, 3);
  std::uniform_int_distribution<int> dim(0, 5);
  std::uniform_int_distribution<std::uint32_t> bits;
  WireMessage m;
  m.kind = static_cast<MessageKind>(kind(rng));
  m.header = json{{"view_id", static_cast<int>(bits(rng) % 64)}, {"note", "n" + std::to_string(bits(rng))}};
  const int n = count(rng);
  for (int k = 0; k < n; ++k) {
    NamedTensor t{"t" + std::to_string(k), {}, {}};
    const int rank = 1 + static_cast<int>(bits(rng) % 3);
    std::size_t size = 1;
    for (int r = 0; r < rank; ++r) {
      t.dims.push_back(dim(rng));
      size *= static_cast<std::size_t>(t.dims.back());
    }
    // Arbitrary bit patterns, NaNs and denormals included.
    for (std::size_t i = 0; i < size; ++i) t.data.push_back(std::bit_cast<float>(bits(rng)));
    m.tensors.push_back(std::move(t));
  }
  return m;
}

// Runs serve_requests on its own thread over a loopback pair.
struct LoopbackServer {
  std::unique_ptr<Stream> client;
  std::unique_ptr<Stream> server;
  std::thread thread;
  ServeStats stats;

  explicit LoopbackServer(BackendFactory factory) {
    auto [a, b] = make_loopback_pair();
    client = std::move(a);
    server = std::move(b);
    thread = std::thread([this, f = std::move(factory)] { stats = serve_requests(*server, f); });
  }
  ~LoopbackServer() {
    client->close();
    thread.join();
  }
};

BackendFactory oracle_factory(LatentField target) {
  return [target](const Hello& h) {
    return std::make_unique<OracleDenoiser>(target, Schedule::from_alpha_bar(h.alpha_bar));
  };
}

TEST_CASE("float encoding is little endian") {
  std::uint8_t b[4];
  put_f32_le(1.0f, b);
  CHECK(b[0] == 0x00);
  CHECK(b[1] == 0x00);
  CHECK(b[2] == 0x80);
  CHECK(b[3] == 0x3f);
  CHECK(get_f32_le(b) == 1.0f);
  const std::uint8_t neg[4] = {0x00, 0x00, 0x20, 0xc1};
  CHECK(get_f32_le(neg) == -10.0f);
}

TEST_CASE("a hand-built frame decodes") {
  const std::string header = R"({"dtype":"f32","tensors":[{"dims":[2],"name":"x"}],"view_id":3})";
  std::vector<std::uint8_t> frame = {'M', 'V', 'D', '1', 2};
  const std::uint32_t len = static_cast<std::uint32_t>(header.size() + 1 + 8);
  for (int i = 0; i < 4; ++i) frame.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  frame.insert(frame.end(), header.begin(), header.end());
  frame.push_back('\n');
  for (std::uint8_t v : {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0}) frame.push_back(v);
  const WireMessage m = decode_message(frame);
  CHECK(m.kind == MessageKind::response);
  CHECK(m.header["view_id"] == 3);
  REQUIRE(m.tensors.size() == 1);
  CHECK(m.tensors[0].data == std::vector<float>{1.0f, -2.0f});
  // Our encoder writes exactly these bytes back.
  CHECK(encode_message(m) == frame);
}

TEST_CASE("serialization round trip over 1000 random frames") {
  std::mt19937_64 rng(2026);
  for (int i = 0; i < 1000; ++i) {
    const WireMessage m = random_message(rng);
    const auto bytes = encode_message(m);
    const WireMessage back = decode_message(bytes);
    CHECK(back.kind == m.kind);
    CHECK(back.header == m.header);
    REQUIRE(back.tensors.size() == m.tensors.size());
    CHECK(encode_message(back) == bytes);
  }
}

TEST_CASE("framing violations") {
  WireMessage m;
  m.kind = MessageKind::request;
  m.tensors.push_back({"latent", {1, 2, 2}, {1, 2, 3, 4}});
  const auto good = encode_message(m);

  auto reason_of = [](const std::vector<std::uint8_t>& f) {
    try {
      decode_message(f);
    } catch (const ProtocolError& e) {
      return e.reason();
    }
    return std::string("ok");
  };
  // Drop the last float but keep the declared length consistent.
  auto shorter = good;
  shorter.resize(shorter.size() - 4);
  const std::uint32_t len = static_cast<std::uint32_t>(shorter.size() - kFramePrefix);
  for (int i = 0; i < 4; ++i) shorter[5 + i] = static_cast<std::uint8_t>(len >> (8 * i));
  CHECK(reason_of(shorter) == "short payload");
  auto cut = good;
  cut.resize(cut.size() - 3);
  CHECK(reason_of(cut) == "short payload");
  auto magic = good;
  magic[0] = 'X';
  CHECK(reason_of(magic) == "bad magic");
  auto kind = good;
  kind[4] = 9;
  CHECK(reason_of(kind) == "unknown kind");
  auto big = good;
  big[8] = 0xff;
  CHECK(reason_of(big) == "payload too large");
  auto longer = good;
  longer.push_back(0);
  CHECK(reason_of(longer) == "trailing bytes");
}

TEST_CASE("request and response mapping keeps every field") {
  std::mt19937_64 rng(4);
  DenoiserRequest req;
  req.view_id = 5;
  req.timestep = 77;
  req.latent = round_to_f32(testing::random_field({2, 3, 4}, rng));
  req.conditions.emplace("depth", round_to_f32(testing::random_field({1, 3, 4}, rng, 0, 1, Space::image)));
  req.prompt = "a person";
  Eigen::MatrixXd keys(2, 3);
  keys << 1, 2, 3, 4, 5, 6;
  req.reference_features = AttentionFeatures{keys, -keys};
  const DenoiserRequest back = request_from_wire(decode_message(encode_message(to_wire(req))));
  CHECK(back.view_id == 5);
  CHECK(back.timestep == 77);
  CHECK(max_abs_diff(back.latent, req.latent) == 0.0);
  CHECK(max_abs_diff(back.conditions.at("depth"), req.conditions.at("depth")) == 0.0);
  CHECK(back.prompt == req.prompt);
  REQUIRE(back.reference_features);
  CHECK(back.reference_features->keys == keys);
  CHECK(back.reference_features->values == -keys);

  DenoiserResponse resp{req.latent, AttentionFeatures{keys, keys}};
  const WireMessage wire = decode_message(encode_message(to_wire(resp, 5, 77)));
  CHECK(wire.header["dims"] == json::array({2, 3, 4}));
  const DenoiserResponse r2 = response_from_wire(wire);
  CHECK(max_abs_diff(r2.eps, resp.eps) == 0.0);
  REQUIRE(r2.features);
  CHECK(r2.features->keys == keys);
  CHECK_THROWS_AS(response_from_wire(error_message("boom")), RuntimeError);
}

TEST_CASE("oracle round trip over loopback is bit-exact") {
  const Schedule s = Schedule::build(150);
  std::mt19937_64 rng(7);
  const LatentField target = testing::random_field({1, 4, 4}, rng);
  LoopbackServer srv(oracle_factory(target));
  RemoteDenoiser remote(*srv.client, s);

  DenoiserRequest req;
  req.view_id = 2;
  req.timestep = 90;
  req.latent = round_to_f32(testing::random_field({1, 4, 4}, rng));
  const DenoiserResponse got = remote.denoise(req);
  const LatentField want = round_to_f32(oracle_denoise(req, target, s).eps);
  REQUIRE(got.eps.shape() == want.shape());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.eps[i] == want[i]);
  CHECK(remote.concurrency() == Concurrency::serial_only);
}

TEST_CASE("a frame with a short payload gets an error and the connection survives") {
  const Schedule s = Schedule::build(20);
  const LatentField target({1, 2, 2}, Space::latent, 0.5);
  LoopbackServer srv(oracle_factory(target));
  Hello h;
  h.alpha_bar = s.alpha_bar_table();
  write_message(*srv.client, to_wire(h));
  REQUIRE(read_message(*srv.client)->kind == MessageKind::hello);

  DenoiserRequest req;
  req.timestep = 10;
  req.latent = LatentField({1, 2, 2}, Space::latent, 0.25);
  auto bytes = encode_message(to_wire(req));
  bytes.resize(bytes.size() - 4);
  const std::uint32_t len = static_cast<std::uint32_t>(bytes.size() - kFramePrefix);
  for (int i = 0; i < 4; ++i) bytes[5 + i] = static_cast<std::uint8_t>(len >> (8 * i));
  srv.client->write_all(bytes);
  const auto err = read_message(*srv.client);
  REQUIRE(err);
  CHECK(err->kind == MessageKind::error);
  CHECK(err->header["reason"] == "short payload");

  write_message(*srv.client, to_wire(req));
  const auto ok = read_message(*srv.client);
  REQUIRE(ok);
  CHECK(ok->kind == MessageKind::response);
}

TEST_CASE("corrupted frames each produce exactly one error") {
  const Schedule s = Schedule::build(20);
  LoopbackServer srv(oracle_factory(LatentField({1, 3, 3}, Space::latent, 0.1)));
  Hello h;
  h.alpha_bar = s.alpha_bar_table();
  write_message(*srv.client, to_wire(h));
  REQUIRE(read_message(*srv.client)->kind == MessageKind::hello);

  std::mt19937_64 rng(13);
  DenoiserRequest req;
  req.timestep = 5;
  req.latent = LatentField({1, 3, 3}, Space::latent, 0.0);
  const auto good = encode_message(to_wire(req));
  const std::size_t nl = std::find(good.begin() + kFramePrefix, good.end(), '\n') - good.begin();
  int errors = 0;
  for (int i = 0; i < 100; ++i) {
    auto f = good;
    switch (i % 4) {
      case 0: {  // drop tensor bytes, fix the length
        const std::size_t drop = 1 + rng() % 8;
        f.resize(f.size() - drop);
        break;
      }
      case 1:  // header terminator lost
        f[nl] = ' ';
        break;
      case 2:  // header no longer JSON
        f[kFramePrefix + rng() % (nl - kFramePrefix)] = '}';
        f[kFramePrefix] = '[';
        break;
      default:  // unknown kind
        f[4] = static_cast<std::uint8_t>(5 + rng() % 200);
        break;
    }
    const std::uint32_t len = static_cast<std::uint32_t>(f.size() - kFramePrefix);
    for (int b = 0; b < 4; ++b) f[5 + b] = static_cast<std::uint8_t>(len >> (8 * b));
    srv.client->write_all(f);
    const auto reply = read_message(*srv.client, std::chrono::steady_clock::now() + std::chrono::seconds(5));
    REQUIRE(reply);
    if (reply->kind == MessageKind::error) ++errors;
  }
  CHECK(errors == 100);
  write_message(*srv.client, to_wire(req));
  CHECK(read_message(*srv.client)->kind == MessageKind::response);
}

TEST_CASE("hello with the wrong version is answered with an error and a close") {
  LoopbackServer srv(oracle_factory(LatentField({1, 1, 1})));
  Hello h;
  h.version = 7;
  write_message(*srv.client, to_wire(h));
  const auto err = read_message(*srv.client);
  REQUIRE(err);
  CHECK(err->kind == MessageKind::error);
  CHECK(read_message(*srv.client) == std::nullopt);
}

TEST_CASE("remote engine run matches the in-process run") {
  const Schedule s = Schedule::build(150);
  std::mt19937_64 rng(21);
  const Shape shape{3, 16, 16};
  const LatentField target = testing::random_field(shape, rng);
  OracleDenoiser local(target, s);
  const SamplingPolicy policy;
  const auto a = run_2d_degenerate(4, local, s, policy, shape, 99);
  LoopbackServer srv(oracle_factory(target));
  RemoteDenoiser remote(*srv.client, s);
  const auto b = run_2d_degenerate(4, remote, s, policy, shape, 99);
  for (std::size_t v = 0; v < a.size(); ++v) CHECK(max_abs_diff(a[v], b[v]) <= 1e-6);
}

struct CountingDenoiser final : Denoiser {
  std::atomic<int>* calls;
  int fail_after;
  explicit CountingDenoiser(std::atomic<int>* c, int n) : calls(c), fail_after(n) {}
  DenoiserResponse denoise(const DenoiserRequest& r) override {
    if (++*calls > fail_after) throw RuntimeError("test", "backend gone");
    return {LatentField(r.latent.shape()), std::nullopt};
  }
};

TEST_CASE("a backend that disappears aborts the step without touching states") {
  const Schedule s = Schedule::build(10);
  auto [client, server] = make_loopback_pair();
  std::thread th([&, srv = server.get()] {
    // Serve the hello and two requests, then drop the connection.
    auto hello = read_message(*srv);
    write_message(*srv, to_wire(Hello{}));
    for (int i = 0; i < 2; ++i) {
      auto m = read_message(*srv);
      const DenoiserRequest req = request_from_wire(*m);
      write_message(*srv, to_wire(DenoiserResponse{LatentField(req.latent.shape()), std::nullopt}, req.view_id,
                                  req.timestep));
    }
    read_message(*srv);
    srv->close();
  });
  RemoteDenoiser remote(*client, s, std::chrono::milliseconds(2000));
  DenoiserPool pool(remote);
  IdentityGeometry geo(3, 4, 4);
  IdentityCodec codec;
  const BlendPlan plan = build_blend_plan(geo, codec);
  SamplerContext ctx;
  ctx.schedule = &s;
  ctx.geometry = &geo;
  ctx.codec = &codec;
  ctx.denoisers = &pool;
  ctx.plan = &plan;
  std::vector<ViewState> states;
  for (int v = 0; v < 3; ++v) states.push_back({v, LatentField({1, 4, 4}, Space::latent, 0.3 * v), false, true});
  const auto before = states;
  CHECK_THROWS_AS(multiview_step(states, ctx, SamplingPolicy{}, 10), RuntimeError);
  for (int v = 0; v < 3; ++v) CHECK(max_abs_diff(states[v].latent, before[v].latent) == 0.0);
  CHECK_THROWS_AS(remote.denoise(DenoiserRequest{0, 9, LatentField({1, 4, 4}), {}, {}, {}}), RuntimeError);
  th.join();
}

TEST_CASE("a silent backend times out") {
  const Schedule s = Schedule::build(10);
  auto [client, server] = make_loopback_pair();
  std::thread th([srv = server.get()] {
    read_message(*srv);
    write_message(*srv, to_wire(Hello{}));
    read_message(*srv);  // swallow the request, never answer
    read_message(*srv);
  });
  RemoteDenoiser remote(*client, s, std::chrono::milliseconds(100));
  const auto t0 = std::chrono::steady_clock::now();
  try {
    remote.denoise(DenoiserRequest{0, 5, LatentField({1, 2, 2}), {}, {}, {}});
    CHECK(false);
  } catch (const RuntimeError& e) {
    CHECK(std::string(e.what()).find("timeout") != std::string::npos);
  }
  CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5));
  client->close();
  th.join();
}

TEST_CASE("two connections serve distinct views in parallel") {
  const Schedule s = Schedule::build(50);
  const Shape shape{1, 3, 3};
  std::vector<LatentField> targets;
  for (int v = 0; v < 8; ++v) targets.emplace_back(shape, Space::latent, 0.1 * v);
  BackendFactory f = [&](const Hello& h) {
    return std::make_unique<OracleDenoiser>(targets, Schedule::from_alpha_bar(h.alpha_bar));
  };
  LoopbackServer a(f), b(f);
  RemoteDenoiser ra(*a.client, s), rb(*b.client, s);
  DenoiserPool pool(std::vector<Denoiser*>{&ra, &rb});
  CHECK(pool.max_parallel(4) == 2);
  std::mt19937_64 rng(1);
  std::vector<LatentField> latents;
  for (int v = 0; v < 8; ++v) latents.push_back(round_to_f32(testing::random_field(shape, rng)));
  std::vector<LatentField> x0(8);
  parallel_for(8, 4, [&](int v) {
    const DenoiserResponse r = pool.denoise(DenoiserRequest{v, 30, latents[v], {}, {}, {}});
    x0[v] = predict_original(latents[v], r.eps, 30, s);
  });
  for (int v = 0; v < 8; ++v) {
    for (std::size_t i = 0; i < x0[v].size(); ++i) CHECK(std::abs(x0[v][i] - 0.1 * v) <= 1e-5);
  }
}

TEST_CASE("tcp: two sequential connections are both served") {
  const Schedule s = Schedule::build(20);
  const LatentField target({1, 2, 2}, Space::latent, 0.4);
  TcpListener listener("127.0.0.1", 0);
  std::thread th([&] {
    for (int i = 0; i < 2; ++i) {
      auto conn = listener.accept();
      serve_requests(*conn, oracle_factory(target));
    }
  });
  for (int i = 0; i < 2; ++i) {
    RemoteDenoiser remote(connect_tcp("127.0.0.1:" + std::to_string(listener.port())), s);
    const LatentField x = round_to_f32(LatentField({1, 2, 2}, Space::latent, 0.3 + i));
    const DenoiserResponse r = remote.denoise(DenoiserRequest{i, 7, x, {}, {}, {}});
    CHECK(max_abs_diff(r.eps, round_to_f32(oracle_denoise(DenoiserRequest{i, 7, x, {}, {}, {}}, target, s).eps)) == 0.0);
  }
  th.join();
  CHECK_THROWS_AS(connect_tcp("nonsense"), ConfigError);
}

TEST_CASE("socket pair carries frames") {
  auto [a, b] = make_socket_pair();
  WireMessage m = error_message("x");
  write_message(*a, m);
  const auto got = read_message(*b);
  REQUIRE(got);
  CHECK(got->header["reason"] == "x");
  a->close();
  CHECK(read_message(*b) == std::nullopt);
}

}  // namespace
}  // namespace mvd
