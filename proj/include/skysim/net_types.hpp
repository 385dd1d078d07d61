#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace skysim {

// Milliseconds since scenario start.
using SimTime = std::chrono::milliseconds;
using Duration = std::chrono::milliseconds;
using NodeId = std::string;

enum class Transport : std::uint8_t { Udp, Tcp };

std::string_view to_string(Transport t);

struct SocketAddr {
    std::string addr;
    std::uint16_t port = 0;

    auto operator<=>(const SocketAddr&) const = default;
};

std::string to_string(const SocketAddr& a);

struct Endpoint {
    NodeId node;
    std::uint16_t port = 0;
    Transport transport = Transport::Udp;

    auto operator<=>(const Endpoint&) const = default;
};

enum class NatKind : std::uint8_t { Public, PortRestrictedNat, NatUdpBlockedFirewall };

std::string_view to_string(NatKind k);
std::optional<NatKind> parse_nat_kind(std::string_view s);

struct NatProfile {
    NatKind kind = NatKind::Public;
    // nullopt means any port; only consulted for the firewall kind.
    std::optional<std::set<std::uint16_t>> allowed_outbound_tcp_ports;

    bool admits_outbound_tcp(std::uint16_t port) const;
    bool admits_inbound_tcp() const { return kind == NatKind::Public; }
};

}  // namespace skysim
