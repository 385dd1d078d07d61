#pragma once

#include "skysim/net_types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace skysim {

enum class MessageKind : std::uint8_t {
    UdpProbe,
    UdpProbeReply,
    PresenceAdvert,
    HandshakeChallenge,
    HandshakeResponse,
    AuthRequest,
    AuthOk,
    AuthFail,
    SearchQuery,
    SearchCandidates,
    SearchResult,
    SearchMiss,
    CallInvite,
    CallAccept,
    CallReject,
    CallCancel,
    CallTeardown,
    RelayBind,
    RelayData,
    MediaFrame,
    KeepAlive,
    HoldPing,
    VersionCheckRequest,
    VersionCheckResponse,
    IcmpMarker,
    // Trace-only tag for TCP connection attempts (SYN/ACK).
    Syn,
};

inline constexpr std::size_t kMessageKindCount = static_cast<std::size_t>(MessageKind::Syn) + 1;

std::string_view to_string(MessageKind k);
std::optional<MessageKind> parse_message_kind(std::string_view s);

// What the replier saw as the source of a UDP probe. Comparing it with the
// local socket address is how a client learns whether it sits behind a NAT.
struct ExternalAddressReport {
    SocketAddr observed;
};

ExternalAddressReport probe_reply_body(const SocketAddr& observed_src);

struct MessageBody {
    std::string user;
    std::string token;
    std::string keyword;
    std::uint64_t session = 0;
    std::uint64_t nonce = 0;
    std::optional<ExternalAddressReport> report;
    // Node lists: search candidates, advertisement targets, redirects.
    std::vector<SocketAddr> nodes;
    // Search answers and call routing.
    std::vector<NodeId> locations;
};

struct Message {
    MessageKind kind = MessageKind::UdpProbe;
    Endpoint src;
    Endpoint dst;
    std::uint32_t payload_bytes = 1;
    std::uint64_t correlation = 0;
    MessageBody body;
    // Source address as seen by the receiver, after any NAT translation.
    SocketAddr observed_from;
};

// Default payload size per message kind. MediaFrame entries describe the UDP
// frame; the TCP framing adds two bytes.
class SizeTable {
public:
    static SizeTable defaults();

    std::uint32_t operator[](MessageKind k) const { return bytes_[static_cast<std::size_t>(k)]; }
    void set(MessageKind k, std::uint32_t bytes);

    // `kind=<name> bytes=<n>` per line, every kind.
    std::string serialize() const;
    // Applies override lines onto `base`. Throws std::invalid_argument with the
    // line number on malformed input.
    static SizeTable parse_overrides(std::string_view text, SizeTable base = defaults());

    bool operator==(const SizeTable&) const = default;

private:
    std::array<std::uint32_t, kMessageKindCount> bytes_{};
};

inline constexpr std::uint32_t kTcpFramingBytes = 2;

std::uint32_t sized(MessageKind kind, Transport transport, const SizeTable& table);
std::uint32_t sized(MessageKind kind, Transport transport = Transport::Udp);

}  // namespace skysim
