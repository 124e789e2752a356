#include "fednl/net.h"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cerrno>
#include <cstring>
#include <thread>
#include <vector>

#include "fednl/errors.h"

namespace fednl {

namespace {

using Clock = std::chrono::steady_clock;

std::string errno_text() { return std::strerror(errno); }

void set_nodelay(int fd) {
  int one = 1;
  if (::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one) != 0) {
    throw ProtocolError("cannot disable Nagle: " + errno_text());
  }
}

// Waits until fd is ready for `events`; false on timeout.
bool wait_ready(int fd, short events, std::chrono::milliseconds timeout) {
  pollfd p{fd, events, 0};
  for (;;) {
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw ProtocolError("poll failed: " + errno_text());
  }
}

struct AddrInfo {
  addrinfo* head = nullptr;
  ~AddrInfo() {
    if (head) ::freeaddrinfo(head);
  }
};

void resolve(const Endpoint& ep, bool passive, AddrInfo& out) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = passive ? AI_PASSIVE : 0;
  const char* host = ep.host.empty() ? nullptr : ep.host.c_str();
  if (!passive && !host) host = "localhost";
  const int rc = ::getaddrinfo(host, ep.port.c_str(), &hints, &out.head);
  if (rc != 0) {
    throw ConfigError("cannot resolve " + ep.host + ":" + ep.port + ": " + ::gai_strerror(rc));
  }
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  if (text.empty()) throw ConfigError("empty network address");
  Endpoint ep;
  if (text.front() == '[') {
    const auto close = text.find(']');
    if (close == std::string::npos || close + 1 >= text.size() || text[close + 1] != ':') {
      throw ConfigError("bad address '" + text + "', expected [host]:port");
    }
    ep.host = text.substr(1, close - 1);
    ep.port = text.substr(close + 2);
  } else {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos) {
      ep.port = text;
    } else {
      if (text.find(':') != colon) {
        throw ConfigError("bad address '" + text + "', bracket IPv6 hosts: [addr]:port");
      }
      ep.host = text.substr(0, colon);
      ep.port = text.substr(colon + 1);
    }
  }
  if (ep.port.empty()) throw ConfigError("address '" + text + "' has no port");
  unsigned long port = 0;
  const auto [end, ec] = std::from_chars(ep.port.data(), ep.port.data() + ep.port.size(), port);
  if (ec != std::errc{} || end != ep.port.data() + ep.port.size() || port > 65535) {
    throw ConfigError("bad port '" + ep.port + "' in address '" + text + "'");
  }
  return ep;
}

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.release();
  }
  return *this;
}

int Socket::release() {
  const int fd = fd_;
  fd_ = -1;
  return fd;
}

void Socket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Connection::Connection(Socket socket, std::chrono::milliseconds timeout)
    : socket_(std::move(socket)), timeout_(timeout) {
  set_nodelay(socket_.fd());
}

void Connection::write_all(std::span<const std::uint8_t> data) {
  std::size_t done = 0;
  while (done < data.size()) {
    if (!wait_ready(socket_.fd(), POLLOUT, timeout_)) throw ProtocolError("send timed out");
    const ssize_t n = ::send(socket_.fd(), data.data() + done, data.size() - done, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw ProtocolError("send failed: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

void Connection::read_exact(std::span<std::uint8_t> out) {
  std::size_t done = 0;
  while (done < out.size()) {
    if (!wait_ready(socket_.fd(), POLLIN, timeout_)) throw ProtocolError("receive timed out");
    const ssize_t n = ::recv(socket_.fd(), out.data() + done, out.size() - done, 0);
    if (n == 0) throw ProtocolError("connection closed by peer");
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw ProtocolError("receive failed: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

void Connection::send(const Frame& frame) {
  if (poisoned_) throw ProtocolError("connection is poisoned");
  const Bytes bytes = encode_frame(frame);
  write_all(bytes);
  sent_ += bytes.size();
}

Frame Connection::recv() {
  if (poisoned_) throw ProtocolError("connection is poisoned");
  std::array<std::uint8_t, kFrameHeaderBytes> head{};
  read_exact(head);
  FrameHeader h;
  try {
    h = decode_header(head);
  } catch (const ProtocolError&) {
    poisoned_ = true;
    throw;
  }
  Frame f;
  f.type = h.type;
  f.client_id = h.client_id;
  f.round = h.round;
  f.payload.resize(h.payload_len);
  read_exact(f.payload);
  received_ += f.wire_size();
  return f;
}

Frame Connection::expect(MsgType type) {
  Frame f = recv();
  if (f.type == MsgType::kReject) {
    const Reject rej = decode_reject(f.payload);
    throw ProtocolError("rejected by peer (" + std::string(to_string(rej.code)) +
                        "): " + rej.message);
  }
  if (f.type != type) {
    throw ProtocolError("expected " + std::string(to_string(type)) + ", got " +
                        std::string(to_string(f.type)));
  }
  return f;
}

Listener::Listener(const Endpoint& bind) {
  AddrInfo ai;
  resolve(bind, true, ai);
  std::vector<addrinfo*> candidates;
  for (addrinfo* p = ai.head; p; p = p->ai_next) candidates.push_back(p);
  // A dual-stack IPv6 wildcard socket also accepts IPv4 clients.
  std::stable_partition(candidates.begin(), candidates.end(),
                        [](const addrinfo* p) { return p->ai_family == AF_INET6; });
  std::string last_error = "no usable address";
  for (addrinfo* p : candidates) {
    Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
    if (!s.valid()) {
      last_error = errno_text();
      continue;
    }
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (p->ai_family == AF_INET6) {
      int zero = 0;
      ::setsockopt(s.fd(), IPPROTO_IPV6, IPV6_V6ONLY, &zero, sizeof zero);
    }
    if (::bind(s.fd(), p->ai_addr, p->ai_addrlen) != 0 || ::listen(s.fd(), 128) != 0) {
      last_error = errno_text();
      continue;
    }
    socket_ = std::move(s);
    break;
  }
  if (!socket_.valid()) {
    throw ConfigError("cannot listen on " + bind.host + ":" + bind.port + ": " + last_error);
  }
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  ::getsockname(socket_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  if (addr.ss_family == AF_INET6) {
    port_ = ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
  } else {
    port_ = ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  }
}

Connection Listener::accept(std::chrono::milliseconds timeout) {
  if (!wait_ready(socket_.fd(), POLLIN, timeout)) {
    throw ProtocolError("timed out waiting for clients to connect");
  }
  for (;;) {
    const int fd = ::accept(socket_.fd(), nullptr, nullptr);
    if (fd >= 0) return Connection(Socket(fd), timeout);
    if (errno != EINTR) throw ProtocolError("accept failed: " + errno_text());
  }
}

Connection connect_to(const Endpoint& remote, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::string last_error;
  for (;;) {
    AddrInfo ai;
    resolve(remote, false, ai);
    for (addrinfo* p = ai.head; p; p = p->ai_next) {
      Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
      if (!s.valid()) {
        last_error = errno_text();
        continue;
      }
      if (::connect(s.fd(), p->ai_addr, p->ai_addrlen) == 0) {
        return Connection(std::move(s), timeout);
      }
      last_error = errno_text();
    }
    if (Clock::now() >= deadline) {
      throw ProtocolError("cannot connect to " + remote.host + ":" + remote.port + ": " +
                          last_error);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

}  // namespace fednl
