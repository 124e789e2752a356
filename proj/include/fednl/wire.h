#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fednl/algorithms.h"
#include "fednl/compressors.h"

namespace fednl {

enum class MsgType : std::uint8_t {
  kHello = 1,
  kWelcome = 2,
  kRoundBegin = 3,
  kClientUpdate = 4,
  kEvalFRequest = 5,
  kEvalFResponse = 6,
  kShutdown = 7,
  kReject = 8,
  kInitReport = 9,
  kMetricsRequest = 10,
  kMetricsResponse = 11,
};

std::string_view to_string(MsgType t);

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 22;
// Upper bound on a single payload; a larger length is treated as corruption.
inline constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 32;

using Bytes = std::vector<std::uint8_t>;

struct Frame {
  MsgType type = MsgType::kShutdown;
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  Bytes payload;

  std::size_t wire_size() const { return kFrameHeaderBytes + payload.size(); }

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct FrameHeader {
  MsgType type = MsgType::kShutdown;
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  std::uint64_t payload_len = 0;
};

Bytes encode_frame(const Frame& frame);
// Validates magic, version, message type and payload bound.
FrameHeader decode_header(std::span<const std::uint8_t> bytes);
// Decodes exactly one frame occupying all of `bytes`.
Frame decode_frame(std::span<const std::uint8_t> bytes);

// Little-endian primitive writer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);
  void bytes(std::span<const std::uint8_t> v);
  void str(const std::string& s);

  std::size_t size() const { return out_.size(); }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

// Little-endian primitive reader; every underrun throws ProtocolError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  DenseVector f64s(std::size_t count);
  std::span<const std::uint8_t> bytes(std::size_t count);
  std::string str();

  std::size_t remaining() const { return in_.size() - pos_; }
  void expect_end() const;

 private:
  std::span<const std::uint8_t> take(std::size_t count);

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

// Everything a receiver needs to rebuild a delta: the negotiated compressor
// and, for seed reconstruction, the sender's stream coordinates.
struct DeltaContext {
  CompressorSpec spec;
  std::size_t dim = 0;
  IndexMode mode = IndexMode::kReconstruct;
  std::uint64_t run_seed = 0;
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
};

void write_delta(ByteWriter& w, const CompressedDelta& delta, IndexMode mode);
CompressedDelta read_delta(ByteReader& r, const DeltaContext& ctx);

// CLIENT_UPDATE payload.
//   FedNL, FedNL-LS: grad (8d) | l (8) | f (8, LS only) | delta
//   FedNL-PP:        delta | dl (8) | dg (8d)
Bytes serialize_update(const ClientUpdate& u, const RunConfig& cfg);
ClientUpdate deserialize_update(std::span<const std::uint8_t> payload, const RunConfig& cfg,
                                std::uint32_t client_id, std::uint32_t round);
std::size_t update_payload_bytes(const RunConfig& cfg, std::size_t delta_bytes);

// Stable encoding of every RunConfig field that both ends must agree on,
// except the dimension, which the handshake checks separately.
Bytes encode_config(const RunConfig& cfg);
RunConfig decode_config(std::span<const std::uint8_t> bytes);
// FNV-1a over encode_config(cfg).
std::uint64_t config_hash(const RunConfig& cfg);

struct Hello {
  std::uint64_t config_hash = 0;
  std::uint64_t run_seed = 0;
  std::uint64_t dim = 0;
  std::uint8_t capabilities = 0;  // bit 0: can reconstruct Rand-family indices
};
inline constexpr std::uint8_t kCapReconstruct = 1;
Bytes encode_hello(const Hello& h);
Hello decode_hello(std::span<const std::uint8_t> payload);

enum class RejectCode : std::uint8_t {
  kDuplicateClient = 1,
  kConfigMismatch = 2,
  kDimensionMismatch = 3,
  kBadClientId = 4,
  kSeedMismatch = 5,
  kMissingCapability = 6,
};
std::string_view to_string(RejectCode c);
struct Reject {
  RejectCode code = RejectCode::kConfigMismatch;
  std::string message;
};
Bytes encode_reject(const Reject& r);
Reject decode_reject(std::span<const std::uint8_t> payload);

Bytes encode_vector(std::span<const double> v);
DenseVector decode_vector(std::span<const std::uint8_t> payload, std::size_t d);

Bytes encode_init_report(const InitReport& r, const RunConfig& cfg);
InitReport decode_init_report(std::span<const std::uint8_t> payload, const RunConfig& cfg,
                              std::uint32_t client_id);

Bytes encode_metrics(const LocalMetrics& m);
LocalMetrics decode_metrics(std::span<const std::uint8_t> payload, std::size_t d);

}  // namespace fednl
