#include "skysim/net_types.hpp"

namespace skysim {

std::string_view to_string(Transport t)
{
    return t == Transport::Udp ? "udp" : "tcp";
}

std::string to_string(const SocketAddr& a)
{
    return a.addr + ":" + std::to_string(a.port);
}

std::string_view to_string(NatKind k)
{
    switch (k) {
    case NatKind::Public: return "Public";
    case NatKind::PortRestrictedNat: return "PortRestrictedNat";
    case NatKind::NatUdpBlockedFirewall: return "NatUdpBlockedFirewall";
    }
    return "?";
}

std::optional<NatKind> parse_nat_kind(std::string_view s)
{
    if (s == "Public" || s == "public") return NatKind::Public;
    if (s == "PortRestrictedNat" || s == "prnat" || s == "nat") return NatKind::PortRestrictedNat;
    if (s == "NatUdpBlockedFirewall" || s == "firewall") return NatKind::NatUdpBlockedFirewall;
    return std::nullopt;
}

bool NatProfile::admits_outbound_tcp(std::uint16_t port) const
{
    if (kind != NatKind::NatUdpBlockedFirewall || !allowed_outbound_tcp_ports) return true;
    return allowed_outbound_tcp_ports->count(port) != 0;
}

}  // namespace skysim
