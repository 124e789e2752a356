#include "fednl/wire.h"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <stdexcept>

#include "fednl/errors.h"
#include "fednl/prg.h"

namespace fednl {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'F', 'D', 'N', 'L'};

bool valid_msg_type(std::uint8_t t) { return t >= 1 && t <= 11; }

void check_index_order(const std::vector<std::uint32_t>& idx, std::size_t w) {
  for (std::size_t t = 0; t < idx.size(); ++t) {
    if (idx[t] >= w) throw ProtocolError("delta index out of range");
    if (t > 0 && idx[t] <= idx[t - 1]) throw ProtocolError("delta indices not increasing");
  }
}

std::uint8_t wire_mode(CompressorKind kind, IndexMode mode) {
  return is_rand_family(kind) && mode == IndexMode::kReconstruct ? 1 : 0;
}

}  // namespace

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::kHello: return "HELLO";
    case MsgType::kWelcome: return "WELCOME";
    case MsgType::kRoundBegin: return "ROUND_BEGIN";
    case MsgType::kClientUpdate: return "CLIENT_UPDATE";
    case MsgType::kEvalFRequest: return "EVAL_F_REQUEST";
    case MsgType::kEvalFResponse: return "EVAL_F_RESPONSE";
    case MsgType::kShutdown: return "SHUTDOWN";
    case MsgType::kReject: return "REJECT";
    case MsgType::kInitReport: return "INIT_REPORT";
    case MsgType::kMetricsRequest: return "METRICS_REQUEST";
    case MsgType::kMetricsResponse: return "METRICS_RESPONSE";
  }
  return "UNKNOWN";
}

std::string_view to_string(RejectCode c) {
  switch (c) {
    case RejectCode::kDuplicateClient: return "duplicate client id";
    case RejectCode::kConfigMismatch: return "config hash mismatch";
    case RejectCode::kDimensionMismatch: return "dimension mismatch";
    case RejectCode::kBadClientId: return "client id out of range";
    case RejectCode::kSeedMismatch: return "run seed mismatch";
    case RejectCode::kMissingCapability: return "missing capability";
  }
  return "unknown";
}

void ByteWriter::u16(std::uint16_t v) {
  for (int s = 0; s < 16; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
}
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::f64s(std::span<const double> v) {
  out_.reserve(out_.size() + 8 * v.size());
  for (double x : v) f64(x);
}
void ByteWriter::bytes(std::span<const std::uint8_t> v) {
  out_.insert(out_.end(), v.begin(), v.end());
}
void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.insert(out_.end(), s.begin(), s.end());
}

std::span<const std::uint8_t> ByteReader::take(std::size_t count) {
  if (count > remaining()) throw ProtocolError("truncated payload");
  auto s = in_.subspan(pos_, count);
  pos_ += count;
  return s;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }
std::uint16_t ByteReader::u16() {
  auto b = take(2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
std::uint32_t ByteReader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
std::uint64_t ByteReader::u64() {
  auto b = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
DenseVector ByteReader::f64s(std::size_t count) {
  if (count > remaining() / 8) throw ProtocolError("truncated payload");
  DenseVector v(count);
  for (double& x : v) x = f64();
  return v;
}
std::span<const std::uint8_t> ByteReader::bytes(std::size_t count) { return take(count); }
std::string ByteReader::str() {
  const std::uint32_t len = u32();
  auto b = take(len);
  return std::string(b.begin(), b.end());
}
void ByteReader::expect_end() const {
  if (pos_ != in_.size()) {
    throw ProtocolError("payload has " + std::to_string(in_.size() - pos_) + " trailing bytes");
  }
}

Bytes encode_frame(const Frame& frame) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u8(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(frame.type));
  w.u32(frame.client_id);
  w.u32(frame.round);
  w.u64(frame.payload.size());
  w.bytes(frame.payload);
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderBytes) throw ProtocolError("truncated frame header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw ProtocolError("bad frame magic");
  }
  ByteReader r(bytes.subspan(4, kFrameHeaderBytes - 4));
  const std::uint8_t version = r.u8();
  if (version != kProtocolVersion) {
    throw ProtocolError("unsupported protocol version " + std::to_string(version));
  }
  const std::uint8_t type = r.u8();
  if (!valid_msg_type(type)) throw ProtocolError("unknown message type " + std::to_string(type));
  FrameHeader h;
  h.type = static_cast<MsgType>(type);
  h.client_id = r.u32();
  h.round = r.u32();
  h.payload_len = r.u64();
  if (h.payload_len > kMaxPayloadBytes) throw ProtocolError("payload length overrun");
  return h;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  const FrameHeader h = decode_header(bytes);
  const std::size_t available = bytes.size() - kFrameHeaderBytes;
  if (h.payload_len > available) throw ProtocolError("truncated frame payload");
  if (h.payload_len < available) throw ProtocolError("bytes past the end of the frame");
  Frame f;
  f.type = h.type;
  f.client_id = h.client_id;
  f.round = h.round;
  f.payload.assign(bytes.begin() + kFrameHeaderBytes, bytes.end());
  return f;
}

void write_delta(ByteWriter& w, const CompressedDelta& delta, IndexMode mode) {
  const std::size_t count = delta.entry_count();
  w.u8(static_cast<std::uint8_t>(delta.kind));
  w.u8(wire_mode(delta.kind, mode));
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(count));
  switch (delta.kind) {
    case CompressorKind::kIdentity:
      w.f64s(delta.values);
      break;
    case CompressorKind::kNatural: {
      Bytes packed((12 * count + 7) / 8, 0);
      for (std::size_t t = 0; t < count; ++t) {
        const std::uint16_t code = natural_encode(delta.values[t]);
        for (int b = 0; b < 12; ++b) {
          if ((code >> b) & 1) {
            const std::size_t bit = 12 * t + static_cast<std::size_t>(b);
            packed[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
          }
        }
      }
      w.bytes(packed);
      break;
    }
    case CompressorKind::kTopK:
    case CompressorKind::kTopLEK:
    case CompressorKind::kRandK:
    case CompressorKind::kRandSeqK:
      if (wire_mode(delta.kind, mode)) {
        w.f64s(delta.values);
      } else {
        for (std::size_t t = 0; t < count; ++t) {
          w.u32(delta.indices[t]);
          w.f64(delta.values[t]);
        }
      }
      break;
  }
}

CompressedDelta read_delta(ByteReader& r, const DeltaContext& ctx) {
  const std::size_t w = packed_size(ctx.dim);
  const auto kind_byte = r.u8();
  if (kind_byte > static_cast<std::uint8_t>(CompressorKind::kNatural)) {
    throw ProtocolError("unknown compressor kind " + std::to_string(kind_byte));
  }
  const auto kind = static_cast<CompressorKind>(kind_byte);
  if (kind != ctx.spec.kind) {
    throw ProtocolError("delta kind " + std::string(to_string(kind)) + " does not match the run (" +
                        std::string(to_string(ctx.spec.kind)) + ")");
  }
  const std::uint8_t mode = r.u8();
  if (mode != wire_mode(kind, ctx.mode)) throw ProtocolError("delta index mode mismatch");
  if (r.u16() != 0) throw ProtocolError("delta reserved field is not zero");
  const std::size_t count = r.u32();

  CompressedDelta d;
  d.kind = kind;
  d.length = w;
  d.order = ctx.dim;
  switch (kind) {
    case CompressorKind::kIdentity:
      if (count != w) throw ProtocolError("identity delta must carry every coordinate");
      d.values = r.f64s(count);
      break;
    case CompressorKind::kNatural: {
      if (count != w) throw ProtocolError("natural delta must carry every coordinate");
      auto packed = r.bytes((12 * count + 7) / 8);
      d.values.resize(count);
      for (std::size_t t = 0; t < count; ++t) {
        std::uint16_t code = 0;
        for (int b = 0; b < 12; ++b) {
          const std::size_t bit = 12 * t + static_cast<std::size_t>(b);
          if ((packed[bit / 8] >> (bit % 8)) & 1) code |= static_cast<std::uint16_t>(1u << b);
        }
        d.values[t] = natural_decode(code);
      }
      const std::size_t used = 12 * count;
      for (std::size_t bit = used; bit < 8 * packed.size(); ++bit) {
        if ((packed[bit / 8] >> (bit % 8)) & 1) throw ProtocolError("natural padding not zero");
      }
      break;
    }
    case CompressorKind::kTopK:
    case CompressorKind::kTopLEK:
    case CompressorKind::kRandK:
    case CompressorKind::kRandSeqK: {
      const bool rand = is_rand_family(kind);
      if (rand && count != 0 && count != ctx.spec.k) {
        throw ProtocolError("rand delta carries " + std::to_string(count) + " entries, expected " +
                            std::to_string(ctx.spec.k));
      }
      if (!rand && count > ctx.spec.k) throw ProtocolError("top delta carries more than k entries");
      if (mode == 1) {
        d.values = r.f64s(count);
        if (count > 0) {
          Prg prg(round_seed(ctx.run_seed, ctx.client_id, ctx.round));
          d.indices = kind == CompressorKind::kRandK ? sample_randk_indices(w, count, prg)
                                                     : sample_randseqk_indices(w, count, prg);
        }
      } else {
        if (count > r.remaining() / 12) throw ProtocolError("truncated payload");
        d.indices.resize(count);
        d.values.resize(count);
        for (std::size_t t = 0; t < count; ++t) {
          d.indices[t] = r.u32();
          d.values[t] = r.f64();
        }
        check_index_order(d.indices, w);
      }
      break;
    }
  }
  return d;
}

Bytes serialize_update(const ClientUpdate& u, const RunConfig& cfg) {
  ByteWriter w;
  if (cfg.algorithm == Algorithm::kFedNLPP) {
    write_delta(w, u.delta, cfg.index_mode);
    w.f64(u.dl);
    w.f64s(u.dg);
  } else {
    w.f64s(u.grad);
    w.f64(u.l);
    if (cfg.algorithm == Algorithm::kFedNLLS) w.f64(u.f);
    write_delta(w, u.delta, cfg.index_mode);
  }
  return w.take();
}

ClientUpdate deserialize_update(std::span<const std::uint8_t> payload, const RunConfig& cfg,
                                std::uint32_t client_id, std::uint32_t round) {
  const DeltaContext ctx{cfg.compressor, cfg.dim, cfg.index_mode, cfg.run_seed, client_id, round};
  ByteReader r(payload);
  ClientUpdate u;
  u.client_id = client_id;
  u.round = round;
  if (cfg.algorithm == Algorithm::kFedNLPP) {
    u.delta = read_delta(r, ctx);
    u.dl = r.f64();
    u.dg = r.f64s(cfg.dim);
  } else {
    u.grad = r.f64s(cfg.dim);
    u.l = r.f64();
    if (cfg.algorithm == Algorithm::kFedNLLS) u.f = r.f64();
    u.delta = read_delta(r, ctx);
  }
  r.expect_end();
  return u;
}

std::size_t update_payload_bytes(const RunConfig& cfg, std::size_t delta_bytes) {
  const std::size_t vec = 8 * cfg.dim;
  if (cfg.algorithm == Algorithm::kFedNLPP) return delta_bytes + 8 + vec;
  return vec + 8 + (cfg.algorithm == Algorithm::kFedNLLS ? 8 : 0) + delta_bytes;
}

Bytes encode_config(const RunConfig& cfg) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(cfg.algorithm));
  w.u8(static_cast<std::uint8_t>(cfg.option));
  w.u32(cfg.clients);
  w.u32(cfg.rounds);
  w.u8(static_cast<std::uint8_t>(cfg.compressor.kind));
  w.u64(cfg.compressor.k);
  w.u8(static_cast<std::uint8_t>(cfg.compressor.ranking));
  w.u8(static_cast<std::uint8_t>(cfg.index_mode));
  w.u8(cfg.alpha.has_value() ? 1 : 0);
  w.f64(cfg.alpha.value_or(0.0));
  w.f64(cfg.mu);
  w.f64(cfg.lambda);
  w.f64(cfg.ls_c);
  w.f64(cfg.ls_gamma);
  w.u32(cfg.tau);
  w.u64(cfg.run_seed);
  w.u8(static_cast<std::uint8_t>(cfg.h_init));
  w.f64(cfg.grad_tol);
  return w.take();
}

RunConfig decode_config(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  RunConfig cfg;
  const auto algorithm = r.u8();
  const auto option = r.u8();
  if (algorithm > 2 || option > 1) throw ProtocolError("config echo: bad enum value");
  cfg.algorithm = static_cast<Algorithm>(algorithm);
  cfg.option = static_cast<StepOption>(option);
  cfg.clients = r.u32();
  cfg.rounds = r.u32();
  const auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(CompressorKind::kNatural)) {
    throw ProtocolError("config echo: bad compressor kind");
  }
  cfg.compressor.kind = static_cast<CompressorKind>(kind);
  cfg.compressor.k = r.u64();
  const auto ranking = r.u8();
  const auto mode = r.u8();
  if (ranking > 1 || mode > 1) throw ProtocolError("config echo: bad enum value");
  cfg.compressor.ranking = static_cast<TopRanking>(ranking);
  cfg.index_mode = static_cast<IndexMode>(mode);
  const bool has_alpha = r.u8() != 0;
  const double alpha = r.f64();
  if (has_alpha) cfg.alpha = alpha;
  cfg.mu = r.f64();
  cfg.lambda = r.f64();
  cfg.ls_c = r.f64();
  cfg.ls_gamma = r.f64();
  cfg.tau = r.u32();
  cfg.run_seed = r.u64();
  const auto h_init = r.u8();
  if (h_init > 2) throw ProtocolError("config echo: bad enum value");
  cfg.h_init = static_cast<HessianInit>(h_init);
  cfg.grad_tol = r.f64();
  r.expect_end();
  return cfg;
}

std::uint64_t config_hash(const RunConfig& cfg) {
  // Only the fields that change what a client computes or sends. The
  // round budget and stopping tolerance are the master's business, and
  // alpha is compared by its resolved value.
  RunConfig canon = cfg;
  canon.rounds = 0;
  canon.grad_tol = 0.0;
  canon.alpha = cfg.dim > 0 ? std::optional<double>(cfg.resolved_alpha()) : cfg.alpha;
  const Bytes bytes = encode_config(canon);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Bytes encode_hello(const Hello& h) {
  ByteWriter w;
  w.u64(h.config_hash);
  w.u64(h.run_seed);
  w.u64(h.dim);
  w.u8(h.capabilities);
  return w.take();
}

Hello decode_hello(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  Hello h;
  h.config_hash = r.u64();
  h.run_seed = r.u64();
  h.dim = r.u64();
  h.capabilities = r.u8();
  r.expect_end();
  return h;
}

Bytes encode_reject(const Reject& rej) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(rej.code));
  w.str(rej.message);
  return w.take();
}

Reject decode_reject(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  Reject rej;
  const auto code = r.u8();
  if (code < 1 || code > 6) throw ProtocolError("unknown reject code " + std::to_string(code));
  rej.code = static_cast<RejectCode>(code);
  rej.message = r.str();
  r.expect_end();
  return rej;
}

Bytes encode_vector(std::span<const double> v) {
  ByteWriter w;
  w.f64s(v);
  return w.take();
}

DenseVector decode_vector(std::span<const std::uint8_t> payload, std::size_t d) {
  ByteReader r(payload);
  DenseVector v = r.f64s(d);
  r.expect_end();
  return v;
}

Bytes encode_init_report(const InitReport& rep, const RunConfig& cfg) {
  ByteWriter w;
  const bool pp = cfg.algorithm == Algorithm::kFedNLPP;
  w.u8(static_cast<std::uint8_t>((rep.h0 ? 1 : 0) | (pp ? 2 : 0)));
  if (rep.h0) write_delta(w, *rep.h0, cfg.index_mode);
  if (pp) {
    w.f64(rep.l0);
    w.f64s(rep.g0);
  }
  return w.take();
}

InitReport decode_init_report(std::span<const std::uint8_t> payload, const RunConfig& cfg,
                              std::uint32_t client_id) {
  ByteReader r(payload);
  InitReport rep;
  rep.client_id = client_id;
  const std::uint8_t flags = r.u8();
  if (flags > 3) throw ProtocolError("init report: unknown flags");
  if (flags & 1) {
    DeltaContext ctx;
    ctx.spec.kind = CompressorKind::kIdentity;
    ctx.dim = cfg.dim;
    rep.h0 = read_delta(r, ctx);
  }
  if (flags & 2) {
    rep.l0 = r.f64();
    rep.g0 = r.f64s(cfg.dim);
  }
  r.expect_end();
  return rep;
}

Bytes encode_metrics(const LocalMetrics& m) {
  ByteWriter w;
  w.f64(m.f);
  w.f64s(m.grad);
  return w.take();
}

LocalMetrics decode_metrics(std::span<const std::uint8_t> payload, std::size_t d) {
  ByteReader r(payload);
  LocalMetrics m;
  m.f = r.f64();
  m.grad = r.f64s(d);
  r.expect_end();
  return m;
}

}  // namespace fednl
