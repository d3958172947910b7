#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Wire format for the federation protocol. One frame per message:
//
//   u32  magic          0x50464831 ("PFH1"), little-endian
//   u8   kind
//   u32  round
//   u32  env_id
//   u32  payload length (count of f64 elements)
//   f64  payload[length], little-endian IEEE-754
//   u32  crc32 over all preceding bytes
//
// Only parameter vectors and deltas ever ride in payloads; no message kind
// has fields for environment data.

namespace fedgrid::fed {

enum class MsgKind : std::uint8_t { ParamsDown = 0, DeltaUp = 1, Register = 2, Ack = 3 };

inline constexpr std::uint32_t kMagic = 0x50464831u; // "PFH1"
inline constexpr std::size_t kHeaderBytes = 4 + 1 + 4 + 4 + 4; // through payload length
inline constexpr std::size_t kTrailerBytes = 4;
inline constexpr std::uint32_t kMaxPayloadElems = 1u << 24;    // transport sanity cap

struct RoundMessage {
    MsgKind kind = MsgKind::Ack;
    std::uint32_t round = 0;
    std::uint32_t env_id = 0;
    std::vector<double> payload;
    std::uint32_t checksum = 0; // derived; filled by encode/decode

    friend bool operator==(const RoundMessage& a, const RoundMessage& b) {
        if (a.kind != b.kind || a.round != b.round || a.env_id != b.env_id ||
            a.payload.size() != b.payload.size())
            return false;
        // bit-exact comparison (distinguishes -0.0, compares NaN payloads sanely)
        for (std::size_t i = 0; i < a.payload.size(); ++i)
            if (std::bit_cast<std::uint64_t>(a.payload[i]) != std::bit_cast<std::uint64_t>(b.payload[i]))
                return false;
        return true;
    }
};

struct CodecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TruncatedFrameError : CodecError {
    using CodecError::CodecError;
};
struct ChecksumError : CodecError {
    using CodecError::CodecError;
};
struct BadMagicError : CodecError {
    using CodecError::CodecError;
};
struct MalformedFrameError : CodecError {
    using CodecError::CodecError;
};

// CRC-32 (IEEE 802.3 reflected, poly 0xEDB88320).
namespace detail {

inline const std::array<std::uint32_t, 256>& crc_table() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

} // namespace detail

inline std::uint32_t crc32(std::span<const std::uint8_t> data) {
    const auto& t = detail::crc_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::uint8_t b : data) c = t[(c ^ b) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline double get_f64(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

} // namespace detail

inline constexpr std::size_t frame_size(std::size_t payload_elems) {
    return kHeaderBytes + 8 * payload_elems + kTrailerBytes;
}

inline std::vector<std::uint8_t> encode(const RoundMessage& msg) {
    if (msg.payload.size() > kMaxPayloadElems)
        throw MalformedFrameError("codec: payload exceeds element cap");
    std::vector<std::uint8_t> out;
    out.reserve(frame_size(msg.payload.size()));
    detail::put_u32(out, kMagic);
    out.push_back(static_cast<std::uint8_t>(msg.kind));
    detail::put_u32(out, msg.round);
    detail::put_u32(out, msg.env_id);
    detail::put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
    for (double v : msg.payload) detail::put_f64(out, v);
    detail::put_u32(out, crc32(out));
    return out;
}

// Decodes one complete frame. The checksum covers every preceding byte and
// is verified first, so any single corrupted byte surfaces as ChecksumError
// rather than as a garbage message or a misleading structural error.
inline RoundMessage decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < frame_size(0))
        throw TruncatedFrameError("codec: frame shorter than minimum (" +
                                  std::to_string(bytes.size()) + " bytes)");
    const std::uint32_t stored = detail::get_u32(bytes.data() + bytes.size() - kTrailerBytes);
    const std::uint32_t computed = crc32(bytes.first(bytes.size() - kTrailerBytes));
    if (stored != computed) throw ChecksumError("codec: checksum mismatch");
    if (detail::get_u32(bytes.data()) != kMagic) throw BadMagicError("codec: bad magic");

    const std::uint8_t kind_raw = bytes[4];
    if (kind_raw > static_cast<std::uint8_t>(MsgKind::Ack))
        throw MalformedFrameError("codec: unknown message kind");
    RoundMessage msg;
    msg.kind = static_cast<MsgKind>(kind_raw);
    msg.round = detail::get_u32(bytes.data() + 5);
    msg.env_id = detail::get_u32(bytes.data() + 9);
    const std::uint32_t len = detail::get_u32(bytes.data() + 13);
    if (len > kMaxPayloadElems) throw MalformedFrameError("codec: payload exceeds element cap");
    if (bytes.size() != frame_size(len))
        throw MalformedFrameError("codec: declared payload length disagrees with frame size");
    msg.payload.resize(len);
    for (std::uint32_t i = 0; i < len; ++i)
        msg.payload[i] = detail::get_f64(bytes.data() + kHeaderBytes + 8 * static_cast<std::size_t>(i));
    msg.checksum = stored;
    return msg;
}

inline const char* kind_name(MsgKind k) {
    switch (k) {
        case MsgKind::ParamsDown: return "ParamsDown";
        case MsgKind::DeltaUp: return "DeltaUp";
        case MsgKind::Register: return "Register";
        case MsgKind::Ack: return "Ack";
    }
    return "?";
}

} // namespace fedgrid::fed
