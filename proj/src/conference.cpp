#include "skysim/conference.hpp"

#include "skysim/world.hpp"

#include <algorithm>
#include <stdexcept>

namespace skysim {

std::string_view to_string(ConferenceState s)
{
    switch (s) {
    case ConferenceState::Setup: return "Setup";
    case ConferenceState::Active: return "Active";
    case ConferenceState::Ended: return "Ended";
    case ConferenceState::Failed: return "Failed";
    }
    return "?";
}

NodeId elect_host(std::span<const NodeId> members, const std::map<NodeId, Capability>& caps,
                  const CapabilityWeights& w)
{
    if (members.empty()) throw std::invalid_argument("no members to elect from");
    auto score = [&](const NodeId& id) {
        auto it = caps.find(id);
        return it == caps.end() ? 0.0 : capability_score(it->second, w);
    };
    NodeId best = members.front();
    for (const auto& m : members.subspan(1)) {
        double a = score(m);
        double b = score(best);
        if (a > b || (a == b && m < best)) best = m;
    }
    return best;
}

struct ConferenceManager::Live {
    Conference c;
    std::size_t ready = 0;
    std::vector<std::unique_ptr<FramePacer>> pacers;
};

ConferenceManager::ConferenceManager(World& world) : world_(world) {}

ConferenceManager::~ConferenceManager() = default;

std::string ConferenceManager::start(const NodeId& initiator, const NodeId& m2, const NodeId& m3)
{
    std::set<NodeId> distinct{initiator, m2, m3};
    if (distinct.size() != 3) throw std::invalid_argument("conference needs three distinct members");
    auto live = std::make_unique<Live>();
    Conference& c = live->c;
    c.label = "c" + std::to_string(next_id_++);
    c.members = {initiator, m2, m3};
    c.initiator = initiator;
    c.started_at = world_.now();
    std::string label = c.label;
    Live& l = *live;
    live_.emplace(label, std::move(live));

    for (const auto& m : c.members) {
        const auto* cl = world_.find_client(m);
        if (!cl || cl->state() != ClientState::Online) {
            fail(l, "member-offline");
            return label;
        }
    }
    c.host = elect_host(c.members, world_.capabilities(), world_.config().admission.weights);
    // Every member must reach the host directly, so the mixer needs a public address.
    if (world_.net().node(c.host).nat.kind != NatKind::Public) {
        fail(l, "no-feasible-path");
        return label;
    }
    for (const auto& m : c.members) {
        if (m == c.host) continue;
        ConferenceLeg leg;
        leg.member = m;
        const auto* cl = world_.find_client(m);
        NatKind k = cl->nat() ? cl->nat()->detected : world_.net().node(m).nat.kind;
        leg.transport = k == NatKind::NatUdpBlockedFirewall ? Transport::Tcp : Transport::Udp;
        c.legs.push_back(std::move(leg));
    }
    for (std::size_t i = 0; i < c.legs.size(); ++i) join_leg(l, i);
    return label;
}

void ConferenceManager::fail(Live& c, std::string reason)
{
    c.c.state = ConferenceState::Failed;
    c.c.failure = std::move(reason);
    world_.net().note(c.c.initiator, MessageKind::CallInvite, c.c.label + " failed reason=" + c.c.failure);
}

void ConferenceManager::join_leg(Live& c, std::size_t leg)
{
    std::string label = c.c.label;
    NodeId member = c.c.legs[leg].member;
    NodeId host = c.c.host;
    world_.connect_ladder(member, world_.contact_address(host), [this, label, leg, member, host](std::optional<ConnectionId> conn) {
        auto it = live_.find(label);
        if (it == live_.end()) return;
        Live& c = *it->second;
        if (c.c.state != ConferenceState::Setup) {
            if (conn) world_.net().close(*conn);
            return;
        }
        if (!conn) {
            fail(c, "no-feasible-path");
            return;
        }
        c.c.legs[leg].conn = *conn;
        auto& net = world_.net();
        Message invite = world_.make(MessageKind::CallInvite, member, 0, Transport::Tcp);
        net.send_tcp(*conn, member, invite, [this, label, leg, member, host, conn](const Message&) {
            Message accept = world_.make(MessageKind::CallAccept, host, 0, Transport::Tcp);
            world_.net().send_tcp(*conn, host, accept, [this, label, leg, member, host](const Message&) {
                auto it = live_.find(label);
                if (it == live_.end()) return;
                Live& c = *it->second;
                if (c.c.legs[leg].transport == Transport::Udp) {
                    // Opens the member's NAT binding towards the host before media flows.
                    Message bind = world_.make(MessageKind::RelayBind, member, world_.info(member).port, Transport::Udp);
                    world_.net().send_udp(bind, world_.contact_address(host), [this, label, leg](const Message& m) {
                        auto it = live_.find(label);
                        if (it == live_.end()) return;
                        it->second->c.legs[leg].member_udp = m.observed_from;
                        leg_ready(*it->second);
                    });
                } else {
                    leg_ready(c);
                }
            });
        });
    });
}

void ConferenceManager::leg_ready(Live& c)
{
    if (++c.ready == c.c.legs.size() && c.c.state == ConferenceState::Setup) start_media(c);
}

void ConferenceManager::start_media(Live& c)
{
    c.c.state = ConferenceState::Active;
    c.c.active_at = world_.now();
    const CodecSpec& codec = world_.config().codec;
    std::string label = c.c.label;
    for (std::size_t i = 0; i < c.c.legs.size(); ++i) {
        auto& leg = c.c.legs[i];
        leg.uplink.label = leg.downlink.label = label;
        leg.uplink.from = leg.downlink.to = leg.member;
        leg.uplink.to = leg.downlink.from = c.c.host;
        leg.uplink.transport = leg.downlink.transport = leg.transport;
        leg.uplink.active_since = leg.downlink.active_since = world_.now();

        for (bool up : {true, false}) {
            auto pacer = std::make_unique<FramePacer>();
            std::uint32_t fps = up ? codec.frames_per_second : codec.mixer_frames_per_second;
            pacer->start(world_.scheduler(), world_.now(), fps, [this, label, i, up](std::uint64_t) {
                auto it = live_.find(label);
                if (it == live_.end()) return;
                Live& c = *it->second;
                auto& leg = c.c.legs[i];
                const CodecSpec& codec = world_.config().codec;
                MediaStream& st = up ? leg.uplink : leg.downlink;
                std::uint32_t bytes = up ? codec.payload(leg.transport) : codec.mixer_payload(leg.transport);
                Message f = world_.make(MessageKind::MediaFrame, st.from, world_.info(st.from).port, leg.transport);
                f.payload_bytes = bytes;
                f.correlation = static_cast<std::uint64_t>(world_.now().count());
                st.on_sent(bytes);
                auto delivered = [this, label, i, up](const Message& m) {
                    auto it = live_.find(label);
                    if (it == live_.end()) return;
                    auto& leg = it->second->c.legs[i];
                    (up ? leg.uplink : leg.downlink)
                        .on_delivered(SimTime{static_cast<std::int64_t>(m.correlation)}, m.payload_bytes);
                };
                if (leg.transport == Transport::Tcp) {
                    if (leg.conn) world_.net().send_tcp(*leg.conn, st.from, f, delivered);
                } else if (up) {
                    world_.net().send_udp(f, world_.contact_address(c.c.host), delivered);
                } else if (leg.member_udp) {
                    world_.net().send_udp(f, *leg.member_udp, delivered);
                }
            });
            c.pacers.push_back(std::move(pacer));
        }
    }
}

void ConferenceManager::end(const std::string& label)
{
    auto it = live_.find(label);
    if (it == live_.end()) return;
    Live& c = *it->second;
    if (c.c.state == ConferenceState::Ended || c.c.state == ConferenceState::Failed) return;
    for (auto& p : c.pacers) p->stop();
    for (auto& leg : c.c.legs) {
        leg.uplink.active_time += world_.now() - leg.uplink.active_since;
        leg.downlink.active_time += world_.now() - leg.downlink.active_since;
        if (leg.conn) {
            Message bye = world_.make(MessageKind::CallTeardown, c.c.host, 0, Transport::Tcp);
            ConnectionId conn = *leg.conn;
            world_.net().send_tcp(conn, c.c.host, bye, [this, conn](const Message&) { world_.net().close(conn); });
        }
    }
    c.c.state = ConferenceState::Ended;
}

const Conference* ConferenceManager::conference(const std::string& label) const
{
    auto it = live_.find(label);
    return it == live_.end() ? nullptr : &it->second->c;
}

std::vector<const Conference*> ConferenceManager::conferences() const
{
    std::vector<const Conference*> out;
    for (const auto& [_, l] : live_) out.push_back(&l->c);
    return out;
}

std::map<NodeId, MemberRates> ConferenceManager::bandwidth(const std::string& label, SimTime from, Duration window) const
{
    const Conference* c = conference(label);
    if (!c) throw std::out_of_range("unknown conference '" + label + "'");
    if (window < Duration{1000}) throw std::invalid_argument("bandwidth window must be at least 1 s");
    double secs = static_cast<double>(window.count()) / 1000.0;
    auto kbps = [&](const MediaStream& s) { return static_cast<double>(s.delivered_in(from, window)) * 8.0 / secs / 1000.0; };
    std::map<NodeId, MemberRates> out;
    for (const auto& m : c->members) out[m] = MemberRates{};
    for (const auto& leg : c->legs) {
        double up = kbps(leg.uplink);
        double down = kbps(leg.downlink);
        out[leg.member].up_kbps += up;
        out[leg.member].down_kbps += down;
        out[c->host].down_kbps += up;
        out[c->host].up_kbps += down;
    }
    return out;
}

}  // namespace skysim
