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

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvd/denoise.hpp"
#include "mvd/schedule.hpp"

namespace mvd {

// ------------------------------------------------------------------ framing
//
// Frame: "MVD1" | kind (1 byte) | payload length (u32 LE) | payload.
// Payload: one-line JSON header, '\n', then the tensors listed in the
// header's "tensors" array as little-endian float32, channel-major.

inline constexpr char kWireMagic[4] = {'M', 'V', 'D', '1'};
inline constexpr int kWireVersion = 1;
inline constexpr std::size_t kFramePrefix = 9;
inline constexpr std::uint32_t kMaxPayload = 1u << 30;

enum class MessageKind : std::uint8_t { request = 1, response = 2, error = 3, hello = 4 };

struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct WireMessage {
  MessageKind kind = MessageKind::request;
  nlohmann::json header = nlohmann::json::object();  // "tensors" and "dtype" are managed by encode
  std::vector<NamedTensor> tensors;
};

/// Framing or content violation. `reason` is the short text sent back in
/// error frames ("short payload", "bad magic", ...).
class ProtocolError : public RuntimeError {
 public:
  /// `fatal` marks violations after which the byte stream cannot be resynced.
  explicit ProtocolError(std::string reason, bool fatal = false)
      : RuntimeError("bridge", "protocol error: " + reason), reason_(std::move(reason)), fatal_(fatal) {}
  const std::string& reason() const noexcept { return reason_; }
  bool fatal() const noexcept { return fatal_; }

 private:
  std::string reason_;
  bool fatal_;
};

std::vector<std::uint8_t> encode_message(const WireMessage& m);

struct FramePrefix {
  MessageKind kind;
  std::uint32_t length;
};

/// Validates magic, kind and length of the first 9 bytes.
FramePrefix decode_prefix(std::span<const std::uint8_t> prefix);

/// Parses a payload whose prefix has already been validated.
WireMessage decode_payload(MessageKind kind, std::span<const std::uint8_t> payload);

/// Whole-frame decode; trailing bytes are an error.
WireMessage decode_message(std::span<const std::uint8_t> frame);

void put_f32_le(float v, std::uint8_t* out);
float get_f32_le(const std::uint8_t* in);

// ----------------------------------------------------------------- messages

struct Hello {
  std::string protocol = "MVD1";
  int version = kWireVersion;
  std::vector<double> alpha_bar;  // empty in the server's reply
};

WireMessage to_wire(const Hello& h);
Hello hello_from_wire(const WireMessage& m);

WireMessage to_wire(const DenoiserRequest& req);
DenoiserRequest request_from_wire(const WireMessage& m);

WireMessage to_wire(const DenoiserResponse& resp, int view_id, int timestep);
DenoiserResponse response_from_wire(const WireMessage& m);

WireMessage error_message(const std::string& reason);

/// Float32 view of a field, as it travels.
LatentField round_to_f32(const LatentField& f);

// --------------------------------------------------------------- transports

using Deadline = std::optional<std::chrono::steady_clock::time_point>;

/// Reliable byte stream. Reads block until `n` bytes arrive, the peer closes
/// (returns fewer bytes) or the deadline passes (throws RuntimeError).
class Stream {
 public:
  virtual ~Stream() = default;
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  virtual std::size_t read_exact(std::uint8_t* out, std::size_t n, Deadline deadline) = 0;
  virtual void close() = 0;
};

/// Reads one frame. Returns nullopt on a clean close before the first byte.
/// Throws ProtocolError on framing violations and RuntimeError on timeout.
std::optional<WireMessage> read_message(Stream& s, Deadline deadline = std::nullopt);
void write_message(Stream& s, const WireMessage& m);

/// Two connected in-process endpoints.
std::pair<std::unique_ptr<Stream>, std::unique_ptr<Stream>> make_loopback_pair();

/// Stream over POSIX descriptors (pipe pair or socket). Owns them.
class FdStream final : public Stream {
 public:
  FdStream(int read_fd, int write_fd);
  ~FdStream() override;
  FdStream(const FdStream&) = delete;
  FdStream& operator=(const FdStream&) = delete;

  void write_all(std::span<const std::uint8_t> bytes) override;
  std::size_t read_exact(std::uint8_t* out, std::size_t n, Deadline deadline) override;
  void close() override;

 private:
  int read_fd_;
  int write_fd_;
};

std::pair<std::unique_ptr<Stream>, std::unique_ptr<Stream>> make_socket_pair();

/// "host:port" client connection.
std::unique_ptr<Stream> connect_tcp(const std::string& address);

class TcpListener {
 public:
  /// Port 0 picks a free port; see port().
  TcpListener(const std::string& host, int port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  int port() const noexcept { return port_; }
  std::unique_ptr<Stream> accept();
  void close();

 private:
  int fd_ = -1;
  int port_ = 0;
};

/// A backend started with `sh -c cmd`, speaking over its stdin/stdout.
class ChildProcess {
 public:
  explicit ChildProcess(const std::string& command);
  ~ChildProcess();
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  Stream& stream() { return *stream_; }
  int pid() const noexcept { return pid_; }
  /// SIGKILL to the whole process group started for the command.
  void kill();
  /// Waits for exit and returns the status code (or 128 + signal).
  int wait();

 private:
  int pid_ = -1;
  std::unique_ptr<Stream> stream_;
  bool reaped_ = false;
  int status_ = 0;
};

// ------------------------------------------------------------------ serving

/// Builds the backend once the engine's hello (with its schedule) arrives.
using BackendFactory = std::function<std::unique_ptr<Denoiser>(const Hello&)>;

struct ServeStats {
  int requests = 0;
  int errors = 0;
};

/// Hello handshake, then one response per request until the peer closes.
/// Malformed frames get an error frame and the connection stays open,
/// except after a bad magic or an oversized length (no way to resync) and a
/// version mismatch, which close it.
ServeStats serve_requests(Stream& s, const BackendFactory& factory);
ServeStats serve_requests(Stream& s, Denoiser& backend);

/// Engine-side proxy. One request in flight per connection.
class RemoteDenoiser final : public Denoiser {
 public:
  RemoteDenoiser(std::unique_ptr<Stream> stream, const Schedule& schedule,
                 std::chrono::milliseconds timeout = std::chrono::seconds(120));
  /// Borrows a stream owned elsewhere (e.g. a ChildProcess).
  RemoteDenoiser(Stream& stream, const Schedule& schedule,
                 std::chrono::milliseconds timeout = std::chrono::seconds(120));

  DenoiserResponse denoise(const DenoiserRequest& req) override;
  Concurrency concurrency() const override { return Concurrency::serial_only; }

 private:
  void handshake(const Schedule& schedule);
  Deadline deadline() const;

  std::unique_ptr<Stream> owned_;
  Stream* stream_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  bool broken_ = false;
};

}  // namespace mvd
