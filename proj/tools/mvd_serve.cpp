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

// Denoiser backend speaking the wire protocol over stdio or TCP. Serves the
// reference predictors; a real network would replace make_backend().

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "mvd/bridge.hpp"
#include "mvd/io.hpp"
#include "mvd/pipeline.hpp"

namespace {

struct ServeOptions {
  std::string mode = "stdio";
  std::string host = "127.0.0.1";
  int port = 0;
  int connections = 0;
  std::string predictor = "oracle";
  std::string target;
  std::string target_dir;
  int modes = 3;
  double amplitude = 0.5;
};

class ZerosDenoiser final : public mvd::Denoiser {
 public:
  mvd::DenoiserResponse denoise(const mvd::DenoiserRequest& req) override {
    return {mvd::LatentField(req.latent.shape(), req.latent.space()), std::nullopt};
  }
};

// Mixture of cosine modes built for whatever latent shape arrives.
class LazyGmmDenoiser final : public mvd::Denoiser {
 public:
  LazyGmmDenoiser(mvd::Schedule s, int modes, double amplitude)
      : schedule_(std::move(s)), modes_(modes), amplitude_(amplitude) {}
  mvd::DenoiserResponse denoise(const mvd::DenoiserRequest& req) override {
    const mvd::Shape& sh = req.latent.shape();
    const auto key = std::make_tuple(sh.channels, sh.height, sh.width);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, mvd::cosine_modes(sh, modes_, amplitude_)).first;
    return mvd::gmm_denoise(req, it->second, schedule_);
  }
  mvd::Concurrency concurrency() const override { return mvd::Concurrency::serial_only; }

 private:
  mvd::Schedule schedule_;
  int modes_;
  double amplitude_;
  std::map<std::tuple<int, int, int>, mvd::GaussianMixtureModel> cache_;
};

std::vector<mvd::LatentField> load_targets(const ServeOptions& o) {
  std::vector<mvd::LatentField> out;
  if (!o.target.empty()) {
    out.push_back(mvd::read_pfm(o.target));
    return out;
  }
  for (int v = 0;; ++v) {
    const auto p = std::filesystem::path(o.target_dir) / mvd::view_file_name("view", v, ".pfm");
    if (!std::filesystem::exists(p)) break;
    out.push_back(mvd::read_pfm(p));
  }
  if (out.empty()) throw mvd::ConfigError("serve", "no view_XX.pfm targets in '" + o.target_dir + "'");
  return out;
}

mvd::BackendFactory make_backend(const ServeOptions& o) {
  std::vector<mvd::LatentField> targets;
  if (o.predictor == "oracle") targets = load_targets(o);
  return [o, targets](const mvd::Hello& h) -> std::unique_ptr<mvd::Denoiser> {
    const mvd::Schedule s = mvd::Schedule::from_alpha_bar(h.alpha_bar);
    if (o.predictor == "zeros") return std::make_unique<ZerosDenoiser>();
    if (o.predictor == "gmm") return std::make_unique<LazyGmmDenoiser>(s, o.modes, o.amplitude);
    return std::make_unique<mvd::OracleDenoiser>(targets, s);
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Denoiser backend for the mvd wire protocol"};
  ServeOptions o;
  app.add_option("--mode", o.mode, "transport")->check(CLI::IsMember({"stdio", "tcp"}))->capture_default_str();
  app.add_option("--host", o.host, "TCP bind address")->capture_default_str();
  app.add_option("--port", o.port, "TCP port (0 picks one and prints it)")->capture_default_str();
  app.add_option("--connections", o.connections, "TCP connections to serve before exiting (0: forever)");
  app.add_option("--predictor", o.predictor, "oracle, zeros or gmm")
      ->check(CLI::IsMember({"oracle", "zeros", "gmm"}))
      ->capture_default_str();
  auto* target = app.add_option("--target", o.target, "oracle target for every view (PFM)")->check(CLI::ExistingFile);
  auto* target_dir = app.add_option("--target-dir", o.target_dir, "per-view oracle targets view_XX.pfm")
                         ->check(CLI::ExistingDirectory);
  target->excludes(target_dir);
  app.add_option("--modes", o.modes, "gmm mode count")->capture_default_str();
  app.add_option("--amplitude", o.amplitude, "gmm mode amplitude")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  if (o.predictor == "oracle" && o.target.empty() && o.target_dir.empty()) {
    std::fprintf(stderr, "error: the oracle predictor needs --target or --target-dir\n");
    return 2;
  }
  try {
    const mvd::BackendFactory factory = make_backend(o);
    if (o.mode == "stdio") {
      mvd::FdStream io(STDIN_FILENO, STDOUT_FILENO);
      const mvd::ServeStats st = mvd::serve_requests(io, factory);
      std::fprintf(stderr, "served %d requests, %d errors\n", st.requests, st.errors);
      return 0;
    }
    mvd::TcpListener listener(o.host, o.port);
    std::printf("listening on %s:%d\n", o.host.c_str(), listener.port());
    std::fflush(stdout);
    std::vector<std::thread> workers;
    for (int served = 0; o.connections == 0 || served < o.connections; ++served) {
      std::shared_ptr<mvd::Stream> conn = listener.accept();
      workers.emplace_back([conn, &factory] {
        try {
          mvd::serve_requests(*conn, factory);
        } catch (const std::exception& e) {
          std::fprintf(stderr, "connection ended: %s\n", e.what());
        }
      });
    }
    for (auto& t : workers) t.join();
  } catch (const mvd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == mvd::ErrorKind::config ? 2 : 3;
  }
  return 0;
}
