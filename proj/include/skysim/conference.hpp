#pragma once

#include "skysim/directory.hpp"
#include "skysim/media.hpp"
#include "skysim/simnet.hpp"

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace skysim {

class World;

enum class ConferenceState : std::uint8_t { Setup, Active, Ended, Failed };

std::string_view to_string(ConferenceState s);

struct MemberRates {
    double up_kbps = 0.0;
    double down_kbps = 0.0;
    double total_kbps() const { return up_kbps + down_kbps; }
};

struct ConferenceLeg {
    NodeId member;
    Transport transport = Transport::Udp;
    std::optional<ConnectionId> conn;  // member -> host
    std::optional<SocketAddr> member_udp;  // as seen by the host
    MediaStream uplink;                // member -> host
    MediaStream downlink;              // host -> member, mixed
};

struct Conference {
    std::string label;  // c1, c2, ...
    std::array<NodeId, 3> members;
    NodeId initiator;
    NodeId host;
    ConferenceState state = ConferenceState::Setup;
    std::string failure;  // member-offline | no-feasible-path
    std::vector<ConferenceLeg> legs;  // one per non-host member
    SimTime started_at{0};
    std::optional<SimTime> active_at;
};

// Argmax of capability score; ties go to the smallest node id.
NodeId elect_host(std::span<const NodeId> members, const std::map<NodeId, Capability>& caps,
                  const CapabilityWeights& w = {});

// Star-topology three-party conferences with the strongest member mixing.
class ConferenceManager {
public:
    explicit ConferenceManager(World& world);
    ~ConferenceManager();

    std::string start(const NodeId& initiator, const NodeId& m2, const NodeId& m3);
    void end(const std::string& label);

    const Conference* conference(const std::string& label) const;
    std::vector<const Conference*> conferences() const;

    // Per-member uplink and downlink rates over [from, from + window).
    std::map<NodeId, MemberRates> bandwidth(const std::string& label, SimTime from, Duration window) const;

private:
    struct Live;

    void fail(Live& c, std::string reason);
    void join_leg(Live& c, std::size_t leg);
    void leg_ready(Live& c);
    void start_media(Live& c);

    World& world_;
    std::map<std::string, std::unique_ptr<Live>> live_;
    std::uint64_t next_id_ = 1;
};

}  // namespace skysim
