#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <string>

#include "fednl/wire.h"

namespace fednl {

inline constexpr std::chrono::milliseconds kDefaultNetTimeout{30000};

struct Endpoint {
  std::string host;  // empty: any address when binding
  std::string port;
};

// Accepts "host:port", "[v6addr]:port", ":port" and a bare port.
Endpoint parse_endpoint(const std::string& text);

// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release();
  void close();

 private:
  int fd_ = -1;
};

// One framed TCP connection. Counts every byte it moves, headers included.
class Connection {
 public:
  Connection() = default;
  Connection(Socket socket, std::chrono::milliseconds timeout);

  void send(const Frame& frame);
  // Throws ProtocolError on timeout, closed peer or malformed frame; a
  // malformed frame also poisons the connection for further use.
  Frame recv();
  // recv() and require the given type; a REJECT is turned into an error.
  Frame expect(MsgType type);

  std::uint64_t bytes_sent() const { return sent_; }
  std::uint64_t bytes_received() const { return received_; }
  bool poisoned() const { return poisoned_; }
  bool open() const { return socket_.valid(); }
  void close() { socket_.close(); }

 private:
  void write_all(std::span<const std::uint8_t> data);
  void read_exact(std::span<std::uint8_t> out);

  Socket socket_;
  std::chrono::milliseconds timeout_{kDefaultNetTimeout};
  std::uint64_t sent_ = 0;
  std::uint64_t received_ = 0;
  bool poisoned_ = false;
};

class Listener {
 public:
  // Port "0" binds an ephemeral port; see port().
  explicit Listener(const Endpoint& bind);

  std::uint16_t port() const { return port_; }
  Connection accept(std::chrono::milliseconds timeout);

 private:
  Socket socket_;
  std::uint16_t port_ = 0;
};

// Retries refused connections until the timeout, so clients may start
// before the master is listening.
Connection connect_to(const Endpoint& remote, std::chrono::milliseconds timeout);

}  // namespace fednl
