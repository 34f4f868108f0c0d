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

#include "mvd/bridge.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <thread>

namespace mvd {
namespace {

constexpr const char* kModule = "bridge";
using nlohmann::json;

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_u32_le(std::uint32_t v, std::uint8_t* p) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

bool valid_kind(std::uint8_t k) { return k >= 1 && k <= 4; }

NamedTensor tensor_from_field(const std::string& name, const LatentField& f) {
  NamedTensor t{name, {f.channels(), f.height(), f.width()}, {}};
  t.data.reserve(f.size());
  for (double v : f.storage()) t.data.push_back(static_cast<float>(v));
  return t;
}

LatentField field_from_tensor(const NamedTensor& t, Space space) {
  if (t.dims.size() != 3) throw ProtocolError("tensor '" + t.name + "' must have 3 dims");
  LatentField f({t.dims[0], t.dims[1], t.dims[2]}, space);
  for (std::size_t i = 0; i < t.data.size(); ++i) f[i] = static_cast<double>(t.data[i]);
  return f;
}

NamedTensor tensor_from_matrix(const std::string& name, const Eigen::MatrixXd& m) {
  NamedTensor t{name, {static_cast<int>(m.rows()), static_cast<int>(m.cols())}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  return t;
}

Eigen::MatrixXd matrix_from_tensor(const NamedTensor& t) {
  if (t.dims.size() != 2) throw ProtocolError("tensor '" + t.name + "' must have 2 dims");
  Eigen::MatrixXd m(t.dims[0], t.dims[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<double>(t.data[k++]);
  return m;
}

const NamedTensor* find_tensor(const WireMessage& m, const std::string& name) {
  for (const auto& t : m.tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

int header_int(const json& h, const char* key) {
  const auto it = h.find(key);
  if (it == h.end() || !it->is_number_integer()) throw ProtocolError(std::string("header field '") + key + "' missing");
  return it->get<int>();
}

std::vector<int> field_dims(const LatentField& f) { return {f.channels(), f.height(), f.width()}; }

void ignore_sigpipe() {
  static const bool once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

[[noreturn]] void throw_errno(const std::string& what) {
  throw RuntimeError(kModule, what + ": " + std::strerror(errno));
}

}  // namespace

// ------------------------------------------------------------------ framing

void put_f32_le(float v, std::uint8_t* out) { put_u32_le(std::bit_cast<std::uint32_t>(v), out); }

float get_f32_le(const std::uint8_t* in) { return std::bit_cast<float>(get_u32_le(in)); }

std::vector<std::uint8_t> encode_message(const WireMessage& m) {
  if (!valid_kind(static_cast<std::uint8_t>(m.kind))) throw ContractError(kModule, "unknown message kind");
  if (!m.header.is_object()) throw ContractError(kModule, "message header must be a JSON object");
  json header = m.header;
  json list = json::array();
  std::size_t floats = 0;
  for (const auto& t : m.tensors) {
    std::size_t n = 1;
    for (int d : t.dims) {
      if (d < 0) throw ContractError(kModule, "tensor '" + t.name + "' has a negative dim");
      n *= static_cast<std::size_t>(d);
    }
    if (n != t.data.size()) {
      throw ContractError(kModule, "tensor '" + t.name + "' holds " + std::to_string(t.data.size()) +
                                       " values, dims say " + std::to_string(n));
    }
    list.push_back(json{{"name", t.name}, {"dims", t.dims}});
    floats += n;
  }
  header["dtype"] = "f32";
  header["tensors"] = std::move(list);
  const std::string text = header.dump();
  const std::size_t payload = text.size() + 1 + 4 * floats;
  if (payload > kMaxPayload) throw ContractError(kModule, "message exceeds the payload limit");

  std::vector<std::uint8_t> out(kFramePrefix + payload);
  std::memcpy(out.data(), kWireMagic, 4);
  out[4] = static_cast<std::uint8_t>(m.kind);
  put_u32_le(static_cast<std::uint32_t>(payload), out.data() + 5);
  std::memcpy(out.data() + kFramePrefix, text.data(), text.size());
  out[kFramePrefix + text.size()] = '\n';
  std::uint8_t* p = out.data() + kFramePrefix + text.size() + 1;
  for (const auto& t : m.tensors) {
    for (float v : t.data) {
      put_f32_le(v, p);
      p += 4;
    }
  }
  return out;
}

FramePrefix decode_prefix(std::span<const std::uint8_t> prefix) {
  if (prefix.size() < kFramePrefix) throw ProtocolError("short frame", true);
  if (std::memcmp(prefix.data(), kWireMagic, 4) != 0) throw ProtocolError("bad magic", true);
  const std::uint32_t len = get_u32_le(prefix.data() + 5);
  if (len > kMaxPayload) throw ProtocolError("payload too large", true);
  if (!valid_kind(prefix[4])) throw ProtocolError("unknown kind");
  return {static_cast<MessageKind>(prefix[4]), len};
}

WireMessage decode_payload(MessageKind kind, std::span<const std::uint8_t> payload) {
  const auto* begin = payload.data();
  const auto* nl = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', payload.size()));
  if (nl == nullptr) throw ProtocolError("missing header terminator");
  json header = json::parse(begin, nl, nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw ProtocolError("bad header");

  WireMessage m;
  m.kind = kind;
  const auto dtype = header.find("dtype");
  if (dtype == header.end() || *dtype != "f32") throw ProtocolError("unsupported dtype");
  const auto list = header.find("tensors");
  if (list == header.end() || !list->is_array()) throw ProtocolError("bad tensor list");

  std::size_t floats = 0;
  for (const auto& e : *list) {
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string() || !e.contains("dims") ||
        !e["dims"].is_array()) {
      throw ProtocolError("bad tensor entry");
    }
    NamedTensor t;
    t.name = e["name"].get<std::string>();
    std::size_t n = 1;
    for (const auto& d : e["dims"]) {
      if (!d.is_number_integer() || d.get<long long>() < 0 || d.get<long long>() > (1 << 28)) {
        throw ProtocolError("bad tensor dims");
      }
      t.dims.push_back(d.get<int>());
      n *= static_cast<std::size_t>(d.get<int>());
      if (n > kMaxPayload) throw ProtocolError("bad tensor dims");
    }
    floats += n;
    if (floats > kMaxPayload) throw ProtocolError("bad tensor dims");
    t.data.resize(n);
    m.tensors.push_back(std::move(t));
  }
  const std::size_t have = payload.size() - static_cast<std::size_t>(nl - begin) - 1;
  if (have < 4 * floats) throw ProtocolError("short payload");
  if (have > 4 * floats) throw ProtocolError("long payload");
  const std::uint8_t* p = nl + 1;
  for (auto& t : m.tensors) {
    for (auto& v : t.data) {
      v = get_f32_le(p);
      p += 4;
    }
  }
  header.erase("dtype");
  header.erase("tensors");
  m.header = std::move(header);
  return m;
}

WireMessage decode_message(std::span<const std::uint8_t> frame) {
  const FramePrefix pre = decode_prefix(frame);
  const std::size_t have = frame.size() - kFramePrefix;
  if (have < pre.length) throw ProtocolError("short payload");
  if (have > pre.length) throw ProtocolError("trailing bytes");
  return decode_payload(pre.kind, frame.subspan(kFramePrefix));
}

// ----------------------------------------------------------------- messages

WireMessage to_wire(const Hello& h) {
  WireMessage m;
  m.kind = MessageKind::hello;
  m.header = json{{"protocol", h.protocol}, {"version", h.version}};
  if (!h.alpha_bar.empty()) m.header["alpha_bar"] = h.alpha_bar;
  return m;
}

Hello hello_from_wire(const WireMessage& m) {
  if (m.kind != MessageKind::hello) throw ProtocolError("expected hello");
  Hello h;
  const auto p = m.header.find("protocol");
  if (p == m.header.end() || !p->is_string()) throw ProtocolError("hello without protocol");
  h.protocol = p->get<std::string>();
  h.version = header_int(m.header, "version");
  if (const auto a = m.header.find("alpha_bar"); a != m.header.end()) {
    if (!a->is_array()) throw ProtocolError("bad alpha_bar");
    for (const auto& v : *a) {
      if (!v.is_number()) throw ProtocolError("bad alpha_bar");
      h.alpha_bar.push_back(v.get<double>());
    }
  }
  return h;
}

WireMessage to_wire(const DenoiserRequest& req) {
  WireMessage m;
  m.kind = MessageKind::request;
  json conds = json::array();
  for (const auto& [name, _] : req.conditions) conds.push_back(name);
  m.header = json{{"view_id", req.view_id},
                  {"timestep", req.timestep},
                  {"dims", field_dims(req.latent)},
                  {"conditions", conds}};
  if (req.prompt) m.header["prompt"] = *req.prompt;
  m.tensors.push_back(tensor_from_field("latent", req.latent));
  for (const auto& [name, field] : req.conditions) m.tensors.push_back(tensor_from_field("cond/" + name, field));
  if (req.reference_features) {
    m.tensors.push_back(tensor_from_matrix("ref_keys", req.reference_features->keys));
    m.tensors.push_back(tensor_from_matrix("ref_values", req.reference_features->values));
  }
  return m;
}

DenoiserRequest request_from_wire(const WireMessage& m) {
  if (m.kind != MessageKind::request) throw ProtocolError("expected request");
  DenoiserRequest req;
  req.view_id = header_int(m.header, "view_id");
  req.timestep = header_int(m.header, "timestep");
  const NamedTensor* latent = find_tensor(m, "latent");
  if (latent == nullptr) throw ProtocolError("request without latent");
  req.latent = field_from_tensor(*latent, Space::latent);
  if (const auto d = m.header.find("dims"); d == m.header.end() || *d != json(latent->dims)) {
    throw ProtocolError("latent dims disagree with header");
  }
  const auto conds = m.header.find("conditions");
  if (conds != m.header.end()) {
    if (!conds->is_array()) throw ProtocolError("bad condition list");
    for (const auto& c : *conds) {
      if (!c.is_string()) throw ProtocolError("bad condition list");
      const NamedTensor* t = find_tensor(m, "cond/" + c.get<std::string>());
      if (t == nullptr) throw ProtocolError("missing condition tensor '" + c.get<std::string>() + "'");
      req.conditions.emplace(c.get<std::string>(), field_from_tensor(*t, Space::image));
    }
  }
  if (const auto p = m.header.find("prompt"); p != m.header.end()) {
    if (!p->is_string()) throw ProtocolError("bad prompt");
    req.prompt = p->get<std::string>();
  }
  const NamedTensor* rk = find_tensor(m, "ref_keys");
  const NamedTensor* rv = find_tensor(m, "ref_values");
  if ((rk == nullptr) != (rv == nullptr)) throw ProtocolError("incomplete reference features");
  if (rk != nullptr) req.reference_features = AttentionFeatures{matrix_from_tensor(*rk), matrix_from_tensor(*rv)};
  return req;
}

WireMessage to_wire(const DenoiserResponse& resp, int view_id, int timestep) {
  WireMessage m;
  m.kind = MessageKind::response;
  m.header = json{{"view_id", view_id}, {"timestep", timestep}, {"dims", field_dims(resp.eps)}};
  m.tensors.push_back(tensor_from_field("eps", resp.eps));
  if (resp.features) {
    m.tensors.push_back(tensor_from_matrix("keys", resp.features->keys));
    m.tensors.push_back(tensor_from_matrix("values", resp.features->values));
  }
  return m;
}

DenoiserResponse response_from_wire(const WireMessage& m) {
  if (m.kind == MessageKind::error) {
    const auto r = m.header.find("reason");
    throw RuntimeError(kModule, "backend error: " + (r != m.header.end() && r->is_string() ? r->get<std::string>()
                                                                                          : std::string("unknown")));
  }
  if (m.kind != MessageKind::response) throw ProtocolError("expected response");
  const NamedTensor* eps = find_tensor(m, "eps");
  if (eps == nullptr) throw ProtocolError("response without eps");
  DenoiserResponse resp;
  resp.eps = field_from_tensor(*eps, Space::latent);
  const NamedTensor* k = find_tensor(m, "keys");
  const NamedTensor* v = find_tensor(m, "values");
  if ((k == nullptr) != (v == nullptr)) throw ProtocolError("incomplete features");
  if (k != nullptr) resp.features = AttentionFeatures{matrix_from_tensor(*k), matrix_from_tensor(*v)};
  return resp;
}

WireMessage error_message(const std::string& reason) {
  WireMessage m;
  m.kind = MessageKind::error;
  m.header = json{{"reason", reason}};
  return m;
}

LatentField round_to_f32(const LatentField& f) {
  LatentField out = f;
  for (auto& v : out.storage()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

// --------------------------------------------------------------- transports

std::optional<WireMessage> read_message(Stream& s, Deadline deadline) {
  std::uint8_t prefix[kFramePrefix];
  const std::size_t got = s.read_exact(prefix, kFramePrefix, deadline);
  if (got == 0) return std::nullopt;
  if (got < kFramePrefix) throw ProtocolError("short frame", true);
  FramePrefix pre{};
  try {
    pre = decode_prefix({prefix, kFramePrefix});
  } catch (const ProtocolError& e) {
    if (e.fatal()) throw;
    // Length is trustworthy here: drain the payload so the next frame lines up.
    std::vector<std::uint8_t> skip(get_u32_le(prefix + 5));
    if (s.read_exact(skip.data(), skip.size(), deadline) < skip.size()) throw ProtocolError("short payload", true);
    throw;
  }
  std::vector<std::uint8_t> payload(pre.length);
  if (s.read_exact(payload.data(), payload.size(), deadline) < payload.size()) {
    throw ProtocolError("short payload", true);
  }
  return decode_payload(pre.kind, payload);
}

void write_message(Stream& s, const WireMessage& m) {
  const auto bytes = encode_message(m);
  s.write_all(bytes);
}

namespace {

struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> buf;
  bool writer_closed = false;
  bool reader_closed = false;
};

class LoopbackStream final : public Stream {
 public:
  LoopbackStream(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out) : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackStream() override { close(); }

  void write_all(std::span<const std::uint8_t> bytes) override {
    std::lock_guard<std::mutex> lock(out_->mu);
    if (out_->writer_closed || out_->reader_closed) throw RuntimeError(kModule, "write on closed loopback stream");
    out_->buf.insert(out_->buf.end(), bytes.begin(), bytes.end());
    out_->cv.notify_all();
  }

  std::size_t read_exact(std::uint8_t* out, std::size_t n, Deadline deadline) override {
    std::unique_lock<std::mutex> lock(in_->mu);
    std::size_t got = 0;
    while (got < n) {
      auto ready = [&] { return !in_->buf.empty() || in_->writer_closed || in_->reader_closed; };
      if (deadline) {
        if (!in_->cv.wait_until(lock, *deadline, ready)) throw RuntimeError(kModule, "timeout waiting for backend");
      } else {
        in_->cv.wait(lock, ready);
      }
      if (in_->buf.empty()) break;
      const std::size_t take = std::min(n - got, in_->buf.size());
      std::copy_n(in_->buf.begin(), take, out + got);
      in_->buf.erase(in_->buf.begin(), in_->buf.begin() + static_cast<std::ptrdiff_t>(take));
      got += take;
    }
    return got;
  }

  void close() override {
    {
      std::lock_guard<std::mutex> lock(out_->mu);
      out_->writer_closed = true;
      out_->cv.notify_all();
    }
    std::lock_guard<std::mutex> lock(in_->mu);
    in_->reader_closed = true;
    in_->cv.notify_all();
  }

 private:
  std::shared_ptr<Pipe> in_;
  std::shared_ptr<Pipe> out_;
};

}  // namespace

std::pair<std::unique_ptr<Stream>, std::unique_ptr<Stream>> make_loopback_pair() {
  auto a = std::make_shared<Pipe>();
  auto b = std::make_shared<Pipe>();
  return {std::make_unique<LoopbackStream>(a, b), std::make_unique<LoopbackStream>(b, a)};
}

FdStream::FdStream(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) { ignore_sigpipe(); }

FdStream::~FdStream() { close(); }

void FdStream::write_all(std::span<const std::uint8_t> bytes) {
  if (write_fd_ < 0) throw RuntimeError(kModule, "write on closed stream");
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(write_fd_, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_errno("write failed");
    }
    done += static_cast<std::size_t>(n);
  }
}

std::size_t FdStream::read_exact(std::uint8_t* out, std::size_t n, Deadline deadline) {
  if (read_fd_ < 0) return 0;
  std::size_t got = 0;
  while (got < n) {
    int wait_ms = -1;
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw RuntimeError(kModule, "timeout waiting for backend");
      wait_ms = static_cast<int>(std::min<long long>(left.count(), 1 << 30));
    }
    pollfd pfd{read_fd_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, wait_ms);
    if (pr < 0) {
      if (errno == EINTR) continue;
      throw_errno("poll failed");
    }
    if (pr == 0) throw RuntimeError(kModule, "timeout waiting for backend");
    const ssize_t r = ::read(read_fd_, out + got, n - got);
    if (r < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      if (errno == ECONNRESET) break;
      throw_errno("read failed");
    }
    if (r == 0) break;
    got += static_cast<std::size_t>(r);
  }
  return got;
}

void FdStream::close() {
  if (read_fd_ >= 0 && read_fd_ == write_fd_) {
    ::shutdown(read_fd_, SHUT_RDWR);
    ::close(read_fd_);
  } else {
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0) ::close(write_fd_);
  }
  read_fd_ = -1;
  write_fd_ = -1;
}

std::pair<std::unique_ptr<Stream>, std::unique_ptr<Stream>> make_socket_pair() {
  int fds[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) throw_errno("socketpair failed");
  return {std::make_unique<FdStream>(fds[0], fds[0]), std::make_unique<FdStream>(fds[1], fds[1])};
}

std::unique_ptr<Stream> connect_tcp(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ConfigError(kModule, "backend address must be host:port, got '" + address + "'");
  }
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw RuntimeError(kModule, "cannot resolve '" + address + "': " + ::gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw RuntimeError(kModule, "cannot connect to '" + address + "'");
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<FdStream>(fd, fd);
}

TcpListener::TcpListener(const std::string& host, int port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw_errno("socket failed");
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    close();
    throw ConfigError(kModule, "listen host must be an IPv4 address, got '" + host + "'");
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 16) != 0) {
    const int err = errno;
    close();
    errno = err;
    throw_errno("cannot listen on " + host + ":" + std::to_string(port));
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  ignore_sigpipe();
}

TcpListener::~TcpListener() { close(); }

std::unique_ptr<Stream> TcpListener::accept() {
  for (;;) {
    const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return std::make_unique<FdStream>(fd, fd);
    }
    if (errno == EINTR) continue;
    throw_errno("accept failed");
  }
}

void TcpListener::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
  }
  fd_ = -1;
}

ChildProcess::ChildProcess(const std::string& command) {
  int to_child[2];
  int from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw_errno("pipe failed");
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw_errno("pipe failed");
  }
  pid_ = ::fork();
  if (pid_ < 0) throw_errno("fork failed");
  if (pid_ == 0) {
    ::setpgid(0, 0);  // own group, so kill() also reaches what the shell spawns
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid_, pid_);
  ::close(to_child[0]);
  ::close(from_child[1]);
  stream_ = std::make_unique<FdStream>(from_child[0], to_child[1]);
}

ChildProcess::~ChildProcess() {
  if (stream_) stream_->close();
  if (reaped_ || pid_ <= 0) return;
  for (int i = 0; i < 200; ++i) {
    int st = 0;
    if (::waitpid(pid_, &st, WNOHANG) == pid_) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::kill(-pid_, SIGKILL);
  ::waitpid(pid_, nullptr, 0);
}

void ChildProcess::kill() {
  if (!reaped_ && pid_ > 0) ::kill(-pid_, SIGKILL);
}

int ChildProcess::wait() {
  if (reaped_) return status_;
  int st = 0;
  while (::waitpid(pid_, &st, 0) < 0) {
    if (errno != EINTR) throw_errno("waitpid failed");
  }
  reaped_ = true;
  status_ = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
  return status_;
}

// ------------------------------------------------------------------ serving

namespace {

bool try_send(Stream& s, const WireMessage& m) {
  try {
    write_message(s, m);
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

ServeStats serve_requests(Stream& s, const BackendFactory& factory) {
  ServeStats stats;
  std::unique_ptr<Denoiser> backend;
  try {
    const auto first = read_message(s);
    if (!first) return stats;
    const Hello h = hello_from_wire(*first);
    if (h.protocol != "MVD1" || h.version != kWireVersion) {
      ++stats.errors;
      try_send(s, error_message("version mismatch: expected MVD1 version " + std::to_string(kWireVersion)));
      s.close();
      return stats;
    }
    backend = factory(h);
    if (!backend) throw RuntimeError(kModule, "backend factory returned nothing");
    write_message(s, to_wire(Hello{}));
  } catch (const ProtocolError& e) {
    ++stats.errors;
    try_send(s, error_message(e.reason()));
    s.close();
    return stats;
  } catch (const Error& e) {
    ++stats.errors;
    try_send(s, error_message(e.what()));
    s.close();
    return stats;
  }

  for (;;) {
    std::optional<WireMessage> msg;
    try {
      msg = read_message(s);
    } catch (const ProtocolError& e) {
      ++stats.errors;
      const bool sent = try_send(s, error_message(e.reason()));
      if (e.fatal() || !sent) {
        s.close();
        return stats;
      }
      continue;
    } catch (const Error&) {
      s.close();
      return stats;
    }
    if (!msg) return stats;

    WireMessage reply;
    try {
      const DenoiserRequest req = request_from_wire(*msg);
      DenoiserResponse resp = backend->denoise(req);
      if (resp.eps.shape() != req.latent.shape()) {
        throw RuntimeError(kModule, "backend returned " + to_string(resp.eps.shape()) + " for a " +
                                        to_string(req.latent.shape()) + " latent");
      }
      reply = to_wire(resp, req.view_id, req.timestep);
      ++stats.requests;
    } catch (const ProtocolError& e) {
      ++stats.errors;
      reply = error_message(e.reason());
    } catch (const std::exception& e) {
      ++stats.errors;
      reply = error_message(e.what());
    }
    if (!try_send(s, reply)) {
      s.close();
      return stats;
    }
  }
}

ServeStats serve_requests(Stream& s, Denoiser& backend) {
  struct Borrowed final : Denoiser {
    Denoiser* inner;
    explicit Borrowed(Denoiser* d) : inner(d) {}
    DenoiserResponse denoise(const DenoiserRequest& r) override { return inner->denoise(r); }
  };
  return serve_requests(s, [&](const Hello&) { return std::make_unique<Borrowed>(&backend); });
}

RemoteDenoiser::RemoteDenoiser(std::unique_ptr<Stream> stream, const Schedule& schedule,
                               std::chrono::milliseconds timeout)
    : owned_(std::move(stream)), stream_(owned_.get()), timeout_(timeout) {
  handshake(schedule);
}

RemoteDenoiser::RemoteDenoiser(Stream& stream, const Schedule& schedule, std::chrono::milliseconds timeout)
    : stream_(&stream), timeout_(timeout) {
  handshake(schedule);
}

Deadline RemoteDenoiser::deadline() const {
  if (timeout_.count() <= 0) return std::nullopt;
  return std::chrono::steady_clock::now() + timeout_;
}

void RemoteDenoiser::handshake(const Schedule& schedule) {
  Hello h;
  h.alpha_bar = schedule.alpha_bar_table();
  write_message(*stream_, to_wire(h));
  const auto reply = read_message(*stream_, deadline());
  if (!reply) throw RuntimeError(kModule, "backend closed the connection during hello");
  if (reply->kind == MessageKind::error) response_from_wire(*reply);  // throws with the reason
  const Hello back = hello_from_wire(*reply);
  if (back.protocol != "MVD1" || back.version != kWireVersion) {
    throw RuntimeError(kModule, "backend speaks " + back.protocol + " version " + std::to_string(back.version));
  }
}

DenoiserResponse RemoteDenoiser::denoise(const DenoiserRequest& req) {
  std::lock_guard<std::mutex> lock(mu_);
  if (broken_) throw RuntimeError(kModule, "connection to backend is broken");
  std::optional<WireMessage> reply;
  try {
    write_message(*stream_, to_wire(req));
    reply = read_message(*stream_, deadline());
  } catch (const Error& e) {
    broken_ = true;
    throw RuntimeError(kModule, std::string("view ") + std::to_string(req.view_id) + " step " +
                                    std::to_string(req.timestep) + ": " + e.what());
  }
  if (!reply) {
    broken_ = true;
    throw RuntimeError(kModule, "backend disconnected at view " + std::to_string(req.view_id) + " step " +
                                    std::to_string(req.timestep));
  }
  DenoiserResponse resp = response_from_wire(*reply);
  if (header_int(reply->header, "view_id") != req.view_id || header_int(reply->header, "timestep") != req.timestep) {
    broken_ = true;
    throw RuntimeError(kModule, "response routed to the wrong request");
  }
  if (resp.eps.shape() != req.latent.shape()) {
    throw RuntimeError(kModule, "response eps " + to_string(resp.eps.shape()) + " does not match latent " +
                                    to_string(req.latent.shape()));
  }
  return resp;
}

}  // namespace mvd
