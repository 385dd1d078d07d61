#include "skysim/wire.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

namespace skysim {

namespace {

constexpr std::array<std::string_view, kMessageKindCount> kNames = {
    "UdpProbe",       "UdpProbeReply",      "PresenceAdvert",       "HandshakeChallenge",
    "HandshakeResponse", "AuthRequest",     "AuthOk",               "AuthFail",
    "SearchQuery",    "SearchCandidates",   "SearchResult",         "SearchMiss",
    "CallInvite",     "CallAccept",         "CallReject",           "CallCancel",
    "CallTeardown",   "RelayBind",          "RelayData",            "MediaFrame",
    "KeepAlive",      "HoldPing",           "VersionCheckRequest",  "VersionCheckResponse",
    "IcmpMarker",     "Syn",
};

}  // namespace

std::string_view to_string(MessageKind k)
{
    return kNames[static_cast<std::size_t>(k)];
}

std::optional<MessageKind> parse_message_kind(std::string_view s)
{
    for (std::size_t i = 0; i < kNames.size(); ++i)
        if (kNames[i] == s) return static_cast<MessageKind>(i);
    return std::nullopt;
}

ExternalAddressReport probe_reply_body(const SocketAddr& observed_src)
{
    return ExternalAddressReport{observed_src};
}

SizeTable SizeTable::defaults()
{
    SizeTable t;
    t.bytes_.fill(32);
    using K = MessageKind;
    t.set(K::UdpProbe, 18);
    t.set(K::UdpProbeReply, 11);
    t.set(K::PresenceAdvert, 3880);
    t.set(K::HandshakeChallenge, 14);
    t.set(K::HandshakeResponse, 5);
    t.set(K::AuthRequest, 321);
    t.set(K::AuthOk, 4);
    t.set(K::AuthFail, 4);
    t.set(K::SearchQuery, 42);
    t.set(K::SearchCandidates, 60);
    t.set(K::KeepAlive, 8);
    t.set(K::CallInvite, 1433);
    t.set(K::CallAccept, 1432);
    t.set(K::MediaFrame, 67);
    t.set(K::IcmpMarker, 1);
    t.set(K::Syn, 1);
    return t;
}

void SizeTable::set(MessageKind k, std::uint32_t bytes)
{
    if (bytes == 0)
        throw std::invalid_argument("payload size for " + std::string(to_string(k)) + " must be >= 1");
    bytes_[static_cast<std::size_t>(k)] = bytes;
}

std::string SizeTable::serialize() const
{
    std::ostringstream out;
    for (std::size_t i = 0; i < kMessageKindCount; ++i)
        out << "kind=" << kNames[i] << " bytes=" << bytes_[i] << '\n';
    return out.str();
}

SizeTable SizeTable::parse_overrides(std::string_view text, SizeTable base)
{
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string kind_field, bytes_field, extra;
        fields >> kind_field >> bytes_field;
        auto fail = [&](const std::string& what) {
            throw std::invalid_argument("size table line " + std::to_string(lineno) + ": " + what);
        };
        if (kind_field.rfind("kind=", 0) != 0 || bytes_field.rfind("bytes=", 0) != 0 || (fields >> extra))
            fail("expected 'kind=<name> bytes=<n>'");
        auto kind = parse_message_kind(kind_field.substr(5));
        if (!kind) fail("unknown message kind '" + kind_field.substr(5) + "'");
        unsigned long n = 0;
        std::string_view digits = std::string_view(bytes_field).substr(6);
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
        if (ec != std::errc{} || ptr != digits.data() + digits.size()) fail("bad byte count");
        if (n == 0 || n > 1'000'000) fail("byte count out of range");
        base.set(*kind, static_cast<std::uint32_t>(n));
    }
    return base;
}

std::uint32_t sized(MessageKind kind, Transport transport, const SizeTable& table)
{
    std::uint32_t n = table[kind];
    if (kind == MessageKind::MediaFrame && transport == Transport::Tcp) n += kTcpFramingBytes;
    return n;
}

std::uint32_t sized(MessageKind kind, Transport transport)
{
    static const SizeTable table = SizeTable::defaults();
    return sized(kind, transport, table);
}

}  // namespace skysim
