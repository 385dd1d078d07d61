#include "skysim/call_session.hpp"

#include "skysim/world.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace skysim {

std::string_view to_string(CallPath p)
{
    switch (p) {
    case CallPath::DirectUdp: return "DirectUdp";
    case CallPath::RelayedUdp: return "RelayedUdp";
    case CallPath::RelayedTcp: return "RelayedTcp";
    }
    return "?";
}

std::optional<CallPath> parse_call_path(std::string_view s)
{
    for (CallPath p : {CallPath::DirectUdp, CallPath::RelayedUdp, CallPath::RelayedTcp})
        if (to_string(p) == s) return p;
    return std::nullopt;
}

namespace {

std::size_t cell(NatKind a, NatKind b) { return static_cast<std::size_t>(a) * 3 + static_cast<std::size_t>(b); }

}  // namespace

PathMatrix PathMatrix::defaults()
{
    PathMatrix m;
    for (NatKind a : {NatKind::Public, NatKind::PortRestrictedNat, NatKind::NatUdpBlockedFirewall})
        for (NatKind b : {NatKind::Public, NatKind::PortRestrictedNat, NatKind::NatUdpBlockedFirewall}) {
            CallPath p = CallPath::RelayedUdp;
            if (a == NatKind::NatUdpBlockedFirewall || b == NatKind::NatUdpBlockedFirewall)
                p = CallPath::RelayedTcp;
            else if (a == NatKind::Public && b == NatKind::Public)
                p = CallPath::DirectUdp;
            m.set(a, b, p);
        }
    return m;
}

CallPath PathMatrix::operator()(NatKind caller, NatKind callee) const { return table_[cell(caller, callee)]; }

void PathMatrix::set(NatKind caller, NatKind callee, CallPath p) { table_[cell(caller, callee)] = p; }

Transport media_transport(CallPath p) { return p == CallPath::RelayedTcp ? Transport::Tcp : Transport::Udp; }

std::string_view to_string(CallState s)
{
    switch (s) {
    case CallState::Inviting: return "Inviting";
    case CallState::Active: return "Active";
    case CallState::Held: return "Held";
    case CallState::TornDown: return "TornDown";
    case CallState::Failed: return "Failed";
    }
    return "?";
}

std::string_view to_string(CallFailure f)
{
    switch (f) {
    case CallFailure::SearchMiss: return "search-miss";
    case CallFailure::CalleeOffline: return "callee-offline";
    case CallFailure::NoRelayAvailable: return "no-relay-available";
    case CallFailure::Rejected: return "rejected";
    case CallFailure::NoAnswer: return "no-answer";
    case CallFailure::CallerOffline: return "caller-offline";
    }
    return "?";
}

std::optional<AnswerPolicy> parse_answer_policy(std::string_view s)
{
    AnswerPolicy p;
    std::string_view mode = s;
    std::string_view arg;
    if (auto colon = s.find(':'); colon != std::string_view::npos) {
        mode = s.substr(0, colon);
        arg = s.substr(colon + 1);
    }
    if (mode == "auto") p.mode = AnswerMode::Auto;
    else if (mode == "manual") p.mode = AnswerMode::Manual;
    else if (mode == "reject") p.mode = AnswerMode::Reject;
    else if (mode == "random") p.mode = AnswerMode::Random;
    else return std::nullopt;
    if (!arg.empty()) {
        if (p.mode == AnswerMode::Manual || p.mode == AnswerMode::Random) return std::nullopt;
        std::int64_t ms = 0;
        auto [ptr, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), ms);
        if (ec != std::errc{} || ptr != arg.data() + arg.size() || ms < 0) return std::nullopt;
        p.delay = Duration{ms};
    }
    return p;
}

// ---------------------------------------------------------------- CallManager

struct CallManager::Live {
    CallSession s;
    std::array<FramePacer, 2> media;
    std::map<NodeId, PeriodicTimer> keepup;
    std::map<NodeId, FramePacer> hold_udp;
    std::map<NodeId, PeriodicTimer> hold_tcp;
    std::map<std::size_t, EventId> answer_timers;
    std::optional<EventId> ring_timer;
    bool ringing_started = false;
    std::size_t legs_pending = 0;  // legs whose invite is still in flight
};

CallManager::CallManager(World& world, CallConfig cfg) : world_(world), cfg_(std::move(cfg)) {}

CallManager::~CallManager() = default;

CallManager::Live* CallManager::find(std::uint64_t id)
{
    auto it = live_.find(id);
    return it == live_.end() ? nullptr : it->second.get();
}

const CallSession* CallManager::session(std::uint64_t id) const
{
    auto it = live_.find(id);
    return it == live_.end() ? nullptr : &it->second->s;
}

const CallSession* CallManager::session(const std::string& label) const
{
    for (const auto& [_, l] : live_)
        if (l->s.label == label) return &l->s;
    return nullptr;
}

std::vector<const CallSession*> CallManager::sessions() const
{
    std::vector<const CallSession*> out;
    for (const auto& [_, l] : live_) out.push_back(&l->s);
    return out;
}

AnswerPolicy CallManager::answer_policy(const NodeId& node) const
{
    auto it = policies_.find(node);
    return it == policies_.end() ? AnswerPolicy{} : it->second;
}

NodeKindPair CallManager::kinds(const NodeId& caller, const NodeId& callee) const
{
    auto kind = [&](const NodeId& n) {
        const auto* c = world_.find_client(n);
        if (c && c->nat()) return c->nat()->detected;
        return world_.net().node(n).nat.kind;
    };
    return NodeKindPair{kind(caller), kind(callee)};
}

std::optional<NodeId> CallManager::select_relay(const NodeId& caller, const std::vector<NodeId>& exclude) const
{
    const auto* c = world_.find_client(caller);
    if (!c) return std::nullopt;
    auto excluded = [&](const NodeId& id) { return std::find(exclude.begin(), exclude.end(), id) != exclude.end(); };
    for (const auto& e : c->alternate_nodes().entries()) {
        if (!e.live) continue;
        auto id = world_.node_at(e.node);
        if (!id || excluded(*id) || *id == caller) continue;
        if (world_.net().node(*id).nat.kind != NatKind::Public || !world_.sn_eligible(*id)) continue;
        return id;
    }
    if (c->super_node() && !excluded(*c->super_node()) && world_.net().is_up(*c->super_node())) return c->super_node();
    return std::nullopt;
}

std::optional<ConnectionId> CallManager::relay_conn(const Live& s, const NodeId& party, const NodeId& relay) const
{
    auto it = s.s.relay_conns.find({party, relay});
    if (it == s.s.relay_conns.end()) return std::nullopt;
    return it->second;
}

SendOutcome CallManager::send_tcp(Live& s, ConnectionId conn, const NodeId& from, MessageKind kind,
                                  ArrivalHandler on_arrival)
{
    Message m = world_.make(kind, from, 0, Transport::Tcp);
    m.body.session = s.s.id;
    m.correlation = s.s.id;
    auto out = world_.net().send_tcp(conn, from, m, std::move(on_arrival));
    if (out && s.s.state == CallState::Inviting) s.s.signaling_bytes += m.payload_bytes;
    return out;
}

std::uint64_t CallManager::place_call(const NodeId& caller, const std::string& callee_user, bool in_buddy_list)
{
    auto live = std::make_unique<Live>();
    Live& s = *live;
    s.s.id = next_id_++;
    s.s.label = "s" + std::to_string(s.s.id);
    s.s.caller = caller;
    s.s.callee_user = callee_user;
    s.s.buddy = in_buddy_list;
    s.s.placed_at = world_.now();
    live_.emplace(s.s.id, std::move(live));

    const auto* c = world_.find_client(caller);
    if (!c || c->state() != ClientState::Online) {
        fail(s, CallFailure::CallerOffline);
        return s.s.id;
    }
    std::uint64_t id = s.s.id;
    // Pings to alternate nodes that go out alongside the invite.
    auto alternates = c->alternate_nodes().live();
    if (alternates.size() > cfg_.setup_probe_count) alternates.resize(cfg_.setup_probe_count);
    for (const auto& a : alternates) {
        Message probe = world_.make(MessageKind::UdpProbe, caller, c->port(), Transport::Udp);
        probe.correlation = id;
        auto out = world_.net().send_udp(probe, a, [this, id](const Message& m) {
            world_.on_probe(m, [this, id](const Message& reply) {
                Live* s = find(id);
                if (s && s->s.state == CallState::Inviting) s->s.signaling_bytes += reply.payload_bytes;
            });
        });
        if (out) s.s.signaling_bytes += probe.payload_bytes;
    }
    auto online_locations = [this](const std::vector<NodeId>& nodes) {
        std::vector<NodeId> out;
        for (const auto& n : nodes) {
            const auto* cl = world_.find_client(n);
            if (cl && cl->state() == ClientState::Online) out.push_back(n);
        }
        return out;
    };
    if (in_buddy_list) {
        std::vector<NodeId> nodes;
        if (const auto* r = world_.directory().find(callee_user))
            for (const auto& l : r->locations) nodes.push_back(l.node);
        resolve_and_invite(s, online_locations(nodes));
    } else {
        world_.search().search(caller, callee_user, [this, id, online_locations](const SearchOutcome& out) {
            Live* s = find(id);
            if (!s || s->s.state != CallState::Inviting) return;
            if (!out.found) {
                fail(*s, CallFailure::SearchMiss);
                return;
            }
            resolve_and_invite(*s, online_locations(out.locations));
        });
    }
    return id;
}

void CallManager::fail(Live& s, CallFailure f)
{
    stop_timers(s);
    s.s.state = CallState::Failed;
    s.s.failure = f;
    s.s.ended_at = world_.now();
    world_.net().note(s.s.caller, MessageKind::CallInvite, s.s.label + " failed reason=" + std::string(to_string(f)));
}

void CallManager::resolve_and_invite(Live& s, std::vector<NodeId> locations)
{
    std::erase(locations, s.s.caller);
    if (locations.empty()) {
        fail(s, CallFailure::CalleeOffline);
        return;
    }
    bool relayed = false;
    for (const auto& loc : locations) {
        RingLeg leg;
        leg.location = loc;
        auto k = kinds(s.s.caller, loc);
        leg.path = cfg_.matrix(k.caller, k.callee);
        relayed = relayed || leg.path != CallPath::DirectUdp;
        s.s.legs.push_back(std::move(leg));
    }
    s.s.path = s.s.legs.front().path;
    s.legs_pending = s.s.legs.size();

    auto invite_all = [this, id = s.s.id] {
        Live* s = find(id);
        if (!s || s->s.state != CallState::Inviting) return;
        for (std::size_t i = 0; i < s->s.legs.size(); ++i) {
            if (s->s.legs[i].path == CallPath::DirectUdp)
                invite_direct(*s, i);
            else
                invite_relayed(*s, i);
        }
    };
    if (!relayed) {
        invite_all();
        return;
    }
    auto first = select_relay(s.s.caller);
    if (!first) {
        fail(s, CallFailure::NoRelayAvailable);
        return;
    }
    s.s.relays.push_back(*first);
    if (cfg_.relay_count >= 2)
        if (auto second = select_relay(s.s.caller, {*first})) s.s.relays.push_back(*second);
    bind_to_relays(s, s.s.caller, invite_all);
}

void CallManager::bind_to_relays(Live& s, const NodeId& party, std::function<void()> done)
{
    auto remaining = std::make_shared<std::size_t>(s.s.relays.size());
    auto ok = std::make_shared<bool>(true);
    std::uint64_t id = s.s.id;
    bool udp = media_transport(s.s.path) == Transport::Udp &&
               kinds(party, party).caller != NatKind::NatUdpBlockedFirewall;
    for (const auto& relay : s.s.relays) {
        world_.connect_ladder(party, world_.contact_address(relay),
                              [this, id, party, relay, remaining, ok, done, udp](std::optional<ConnectionId> conn) {
                                  Live* s = find(id);
                                  if (!s) return;
                                  if (!conn) {
                                      *ok = false;
                                  } else {
                                      s->s.relay_conns[{party, relay}] = *conn;
                                      send_tcp(*s, *conn, party, MessageKind::RelayBind, {});
                                      if (udp) {
                                          // Opens the NAT binding the relay will answer through.
                                          Message b = world_.make(MessageKind::RelayBind, party,
                                                                  world_.info(party).port, Transport::Udp);
                                          b.body.session = id;
                                          auto out = world_.net().send_udp(b, world_.contact_address(relay),
                                                                          [this, id, party, relay](const Message& m) {
                                                                              if (Live* s = find(id))
                                                                                  s->s.relay_udp[{party, relay}] = m.observed_from;
                                                                          });
                                          if (out && s->s.state == CallState::Inviting) s->s.signaling_bytes += b.payload_bytes;
                                      }
                                  }
                                  if (--*remaining > 0) return;
                                  if (!*ok && s->s.state == CallState::Inviting && party == s->s.caller) {
                                      fail(*s, CallFailure::NoRelayAvailable);
                                      return;
                                  }
                                  done();
                              });
    }
}

void CallManager::invite_direct(Live& s, std::size_t leg)
{
    std::uint64_t id = s.s.id;
    NodeId caller = s.s.caller;
    NodeId loc = s.s.legs[leg].location;
    world_.connect_ladder(caller, world_.contact_address(loc), [this, id, leg, caller, loc](std::optional<ConnectionId> conn) {
        Live* s = find(id);
        if (!s) return;
        if (!conn) {
            s->s.legs[leg].failed = true;
            if (--s->legs_pending == 0 && !s->ringing_started && s->s.state == CallState::Inviting)
                fail(*s, CallFailure::CalleeOffline);
            return;
        }
        ConnectionId c = *conn;
        s->s.legs[leg].caller_conn = c;
        send_tcp(*s, c, caller, MessageKind::HandshakeChallenge, [this, id, leg, c, loc, caller](const Message&) {
            Live* s = find(id);
            send_tcp(*s, c, loc, MessageKind::HandshakeResponse, [this, id, leg, c, caller](const Message&) {
                Live* s = find(id);
                send_tcp(*s, c, caller, MessageKind::CallInvite, [this, id, leg](const Message&) {
                    Live* s = find(id);
                    --s->legs_pending;
                    ring(*s, leg);
                });
            });
        });
    });
}

void CallManager::invite_relayed(Live& s, std::size_t leg)
{
    // Caller -> relay -> callee's super node -> callee, which then binds to the relays.
    std::uint64_t id = s.s.id;
    const NodeId relay = s.s.relays.front();
    const NodeId loc = s.s.legs[leg].location;
    auto c1 = relay_conn(s, s.s.caller, relay);
    auto* callee = world_.find_client(loc);
    if (!c1 || !callee || !callee->super_node() || !callee->sn_connection()) {
        s.s.legs[leg].failed = true;
        if (--s.legs_pending == 0 && !s.ringing_started) fail(s, CallFailure::CalleeOffline);
        return;
    }
    NodeId sn = *callee->super_node();
    ConnectionId sn_conn = *callee->sn_connection();

    auto deliver_to_callee = [this, id, leg, loc, sn, sn_conn] {
        Live* s = find(id);
        if (!s) return;
        send_tcp(*s, sn_conn, sn, MessageKind::CallInvite, [this, id, leg, loc](const Message&) {
            Live* s = find(id);
            if (!s) return;
            bind_to_relays(*s, loc, [this, id, leg] {
                Live* s = find(id);
                if (!s) return;
                s->s.legs[leg].bound = true;
                --s->legs_pending;
                ring(*s, leg);
            });
        });
    };

    send_tcp(s, *c1, s.s.caller, MessageKind::CallInvite, [this, id, relay, sn, deliver_to_callee](const Message&) {
        Live* s = find(id);
        if (!s) return;
        if (relay == sn) {
            deliver_to_callee();
            return;
        }
        world_.connect_ladder(relay, world_.contact_address(sn),
                              [this, id, relay, deliver_to_callee](std::optional<ConnectionId> hop) {
                                  Live* s = find(id);
                                  if (!s || !hop) return;
                                  send_tcp(*s, *hop, relay, MessageKind::CallInvite, [this, hop, deliver_to_callee](const Message&) {
                                      world_.net().close(*hop);
                                      deliver_to_callee();
                                  });
                              });
    });
}

void CallManager::send_signal(Live& s, std::size_t leg, bool from_caller, MessageKind kind,
                              std::function<void()> on_arrival)
{
    const RingLeg& l = s.s.legs[leg];
    NodeId from = from_caller ? s.s.caller : l.location;
    NodeId to = from_caller ? l.location : s.s.caller;
    if (l.path == CallPath::DirectUdp) {
        if (!l.caller_conn) return;
        send_tcp(s, *l.caller_conn, from, kind, [on_arrival](const Message&) {
            if (on_arrival) on_arrival();
        });
        return;
    }
    if (s.s.relays.empty()) return;
    NodeId relay = s.s.relays.front();
    auto up = relay_conn(s, from, relay);
    auto down = relay_conn(s, to, relay);
    if (!up || !down) return;
    std::uint64_t id = s.s.id;
    ConnectionId d = *down;
    send_tcp(s, *up, from, kind, [this, id, d, relay, kind, on_arrival](const Message&) {
        Live* s = find(id);
        if (!s) return;
        send_tcp(*s, d, relay, kind, [on_arrival](const Message&) {
            if (on_arrival) on_arrival();
        });
    });
}

void CallManager::ring(Live& s, std::size_t leg)
{
    auto& l = s.s.legs[leg];
    if (l.cancelled) return;
    l.invited = true;
    if (l.cancel_pending || s.s.state != CallState::Inviting) {
        l.cancel_pending = false;
        cancel_leg(s, leg);
        return;
    }
    std::uint64_t id = s.s.id;
    if (!s.ringing_started) {
        s.ringing_started = true;
        s.ring_timer = world_.scheduler().schedule_after(cfg_.ring_timeout, [this, id] {
            Live* s = find(id);
            if (!s) return;
            s->ring_timer.reset();
            if (s->s.state != CallState::Inviting) return;
            fail(*s, CallFailure::NoAnswer);
            for (std::size_t i = 0; i < s->s.legs.size(); ++i) cancel_leg(*s, i);
        });
    }
    AnswerPolicy p = answer_policy(l.location);
    Duration delay = p.delay;
    if (p.mode == AnswerMode::Random) delay = Duration{500 + static_cast<std::int64_t>(world_.rng()() % 2501)};
    if (p.mode == AnswerMode::Manual) return;
    bool reject = p.mode == AnswerMode::Reject;
    s.answer_timers[leg] = world_.scheduler().schedule_after(delay, [this, id, leg, reject] {
        Live* s = find(id);
        if (!s) return;
        s->answer_timers.erase(leg);
        if (reject)
            location_rejects(*s, leg);
        else
            location_answers(*s, leg);
    });
}

void CallManager::answer(const NodeId& location)
{
    for (auto& [_, l] : live_) {
        if (l->s.state != CallState::Inviting) continue;
        for (std::size_t i = 0; i < l->s.legs.size(); ++i) {
            const auto& leg = l->s.legs[i];
            if (leg.location == location && leg.invited && !leg.accepted && !leg.cancelled) {
                location_answers(*l, i);
                return;
            }
        }
    }
    world_.warn(location, MessageKind::CallAccept, "nothing-to-answer");
}

void CallManager::location_answers(Live& s, std::size_t leg)
{
    auto& l = s.s.legs[leg];
    if (l.cancelled || l.accepted || l.rejected) return;
    l.accepted = true;
    std::uint64_t id = s.s.id;
    send_signal(s, leg, false, MessageKind::CallAccept, [this, id, leg] {
        if (Live* s = find(id)) accept_reached_caller(*s, leg);
    });
}

void CallManager::location_rejects(Live& s, std::size_t leg)
{
    auto& l = s.s.legs[leg];
    if (l.cancelled || l.accepted || l.rejected) return;
    std::uint64_t id = s.s.id;
    send_signal(s, leg, false, MessageKind::CallReject, [this, id, leg] {
        Live* s = find(id);
        if (!s) return;
        s->s.legs[leg].rejected = true;
        if (s->s.state != CallState::Inviting) return;
        bool all = std::all_of(s->s.legs.begin(), s->s.legs.end(),
                               [](const RingLeg& l) { return l.rejected || l.failed; });
        if (all) fail(*s, CallFailure::Rejected);
    });
}

void CallManager::accept_reached_caller(Live& s, std::size_t leg)
{
    if (s.s.state != CallState::Inviting) {
        // Lost the race, or the call is already over.
        if (!s.s.winner || *s.s.winner != leg) cancel_leg(s, leg);
        return;
    }
    s.s.winner = leg;
    s.s.callee = s.s.legs[leg].location;
    s.s.path = s.s.legs[leg].path;
    for (std::size_t i = 0; i < s.s.legs.size(); ++i)
        if (i != leg) cancel_leg(s, i);
    go_active(s);
}

void CallManager::cancel_leg(Live& s, std::size_t leg)
{
    auto& l = s.s.legs[leg];
    if (l.cancelled || l.failed) return;
    if (auto t = s.answer_timers.find(leg); t != s.answer_timers.end()) {
        world_.scheduler().cancel(t->second);
        s.answer_timers.erase(t);
    }
    if (l.path != CallPath::DirectUdp && !l.bound) {
        l.cancel_pending = true;  // sent once the location finishes binding
        return;
    }
    if (l.path == CallPath::DirectUdp && !l.caller_conn) {
        l.cancel_pending = true;
        return;
    }
    std::uint64_t id = s.s.id;
    send_signal(s, leg, true, MessageKind::CallCancel, [this, id, leg] {
        Live* s = find(id);
        if (!s) return;
        auto& l = s->s.legs[leg];
        l.cancelled = true;
        if (l.caller_conn) world_.net().close(*l.caller_conn);
        if (!s->s.relays.empty())
            for (const auto& r : s->s.relays)
                if (auto c = relay_conn(*s, l.location, r)) world_.net().close(*c);
    });
}

void CallManager::go_active(Live& s)
{
    if (s.ring_timer) {
        world_.scheduler().cancel(*s.ring_timer);
        s.ring_timer.reset();
    }
    s.s.state = CallState::Active;
    s.s.active_at = world_.now();
    if (s.s.path == CallPath::DirectUdp && !s.s.relays.empty()) {
        // Another location needed the relay; this pairing does not.
        for (const auto& r : s.s.relays)
            if (auto c = relay_conn(s, s.s.caller, r)) world_.net().close(*c);
        s.s.relays.clear();
    }
    start_media(s);
    if (s.s.path != CallPath::DirectUdp) {
        std::uint64_t id = s.s.id;
        for (const NodeId& party : {s.s.caller, s.s.callee}) {
            s.keepup[party].start(world_.scheduler(), world_.now() + cfg_.relay_keepup_period, cfg_.relay_keepup_period,
                                  [this, id, party] {
                                      Live* s = find(id);
                                      if (!s || s->s.relays.empty()) return;
                                      if (auto c = relay_conn(*s, party, s->s.relays.front()))
                                          send_tcp(*s, *c, party, MessageKind::RelayData, {});
                                  });
        }
    }
}

void CallManager::start_media(Live& s)
{
    const CodecSpec& codec = world_.config().codec;
    Transport t = media_transport(s.s.path);
    std::uint64_t id = s.s.id;
    for (int d = 0; d < 2; ++d) {
        auto& st = s.s.streams[d];
        st.label = s.s.label;
        st.from = d == 0 ? s.s.caller : s.s.callee;
        st.to = d == 0 ? s.s.callee : s.s.caller;
        st.transport = t;
        st.active_since = world_.now();
        // Silence changes nothing on the wire; it only shows up as an annotation.
        if (const auto* c = world_.find_client(st.from); c && c->silent)
            world_.net().note(st.from, MessageKind::MediaFrame, s.s.label + " talk-state silent");
        s.media[d].start(world_.scheduler(), world_.now(), codec.frames_per_second, [this, id, d](std::uint64_t) {
            if (Live* s = find(id)) send_frame(*s, d);
        });
    }
}

void CallManager::send_frame(Live& s, int direction)
{
    auto& st = s.s.streams[direction];
    const CodecSpec& codec = world_.config().codec;
    auto& net = world_.net();
    Message m = world_.make(MessageKind::MediaFrame, st.from, world_.info(st.from).port, st.transport);
    m.payload_bytes = codec.payload(st.transport);
    m.correlation = static_cast<std::uint64_t>(world_.now().count());
    m.body.session = s.s.id;
    st.on_sent(m.payload_bytes);
    std::uint64_t id = s.s.id;
    auto delivered = [this, id, direction](const Message& f) {
        if (Live* s = find(id)) s->s.streams[direction].on_delivered(SimTime{static_cast<std::int64_t>(f.correlation)}, f.payload_bytes);
    };

    if (s.s.path == CallPath::DirectUdp) {
        net.send_udp(m, world_.contact_address(st.to), delivered);
        return;
    }
    const NodeId relay = (s.s.relays.size() > 1 && direction == 1) ? s.s.relays[1] : s.s.relays.front();
    NodeId to = st.to;
    if (st.transport == Transport::Udp) {
        net.send_udp(m, world_.contact_address(relay), [this, id, relay, to, delivered](const Message& f) {
            Live* s = find(id);
            if (!s) return;
            auto addr = s->s.relay_udp.find({to, relay});
            if (addr == s->s.relay_udp.end()) return;
            Message fwd = f;
            fwd.src = Endpoint{relay, world_.info(relay).port, Transport::Udp};
            world_.net().send_udp(std::move(fwd), addr->second, delivered);
        });
        return;
    }
    auto up = relay_conn(s, st.from, relay);
    auto down = relay_conn(s, to, relay);
    if (!up || !down) return;
    ConnectionId d = *down;
    net.send_tcp(*up, st.from, m, [this, relay, d, delivered](const Message& f) {
        world_.net().send_tcp(d, relay, f, delivered);
    });
}

void CallManager::hold(std::uint64_t session, const NodeId& by)
{
    Live* s = find(session);
    if (!s || s->s.state != CallState::Active) return;
    s->s.state = CallState::Held;
    s->s.held_by = by;
    for (auto& p : s->media) p.stop();
    for (auto& st : s->s.streams) st.active_time += world_.now() - st.active_since;
    start_hold_pings(*s);
}

void CallManager::start_hold_pings(Live& s)
{
    std::uint64_t id = s.s.id;
    bool tcp_only = s.s.path == CallPath::RelayedTcp;
    for (const NodeId& party : {s.s.caller, s.s.callee}) {
        NodeId other = party == s.s.caller ? s.s.callee : s.s.caller;
        s.hold_udp[party].start(world_.scheduler(), world_.now(), cfg_.hold_pings_per_second,
                                [this, id, party, other, tcp_only](std::uint64_t) {
                                    Live* s = find(id);
                                    if (!s) return;
                                    if (tcp_only) {
                                        if (auto c = relay_conn(*s, party, s->s.relays.front()))
                                            if (send_tcp(*s, *c, party, MessageKind::HoldPing, {})) {
                                                ++s->s.hold_tcp_pings;
                                                ++s->s.hold_pings_by_party[party];
                                            }
                                        return;
                                    }
                                    SocketAddr to = s->s.path == CallPath::DirectUdp
                                                        ? world_.contact_address(other)
                                                        : world_.contact_address(s->s.relays.front());
                                    Message m = world_.make(MessageKind::HoldPing, party, world_.info(party).port,
                                                            Transport::Udp);
                                    m.body.session = id;
                                    if (world_.net().send_udp(m, to)) {
                                        ++s->s.hold_udp_pings;
                                        ++s->s.hold_pings_by_party[party];
                                    }
                                });
        s.hold_tcp[party].start(world_.scheduler(), world_.now() + cfg_.hold_tcp_ping_period, cfg_.hold_tcp_ping_period,
                                [this, id, party] {
                                    Live* s = find(id);
                                    if (!s) return;
                                    std::optional<ConnectionId> c;
                                    if (s->s.path == CallPath::DirectUdp)
                                        c = s->s.legs[*s->s.winner].caller_conn;
                                    else
                                        c = relay_conn(*s, party, s->s.relays.front());
                                    if (c && send_tcp(*s, *c, party, MessageKind::HoldPing, {})) ++s->s.hold_tcp_pings;
                                });
    }
}

void CallManager::resume(std::uint64_t session)
{
    Live* s = find(session);
    if (!s || s->s.state != CallState::Held) return;
    for (auto& [_, p] : s->hold_udp) p.stop();
    for (auto& [_, t] : s->hold_tcp) t.stop();
    s->s.state = CallState::Active;
    s->s.held_by.reset();
    start_media(*s);
}

void CallManager::stop_timers(Live& s)
{
    for (auto& p : s.media) p.stop();
    for (auto& [_, t] : s.keepup) t.stop();
    for (auto& [_, p] : s.hold_udp) p.stop();
    for (auto& [_, t] : s.hold_tcp) t.stop();
    for (auto& [_, e] : s.answer_timers) world_.scheduler().cancel(e);
    s.answer_timers.clear();
    if (s.ring_timer) world_.scheduler().cancel(*s.ring_timer);
    s.ring_timer.reset();
}

void CallManager::teardown(std::uint64_t session, const NodeId& by)
{
    Live* s = find(session);
    if (!s || s->s.state == CallState::TornDown || s->s.state == CallState::Failed) return;
    bool was_active = s->s.state == CallState::Active;
    if (was_active)
        for (auto& st : s->s.streams) st.active_time += world_.now() - st.active_since;
    stop_timers(*s);
    if (s->s.state == CallState::Inviting) {
        s->s.state = CallState::TornDown;
        for (std::size_t i = 0; i < s->s.legs.size(); ++i) cancel_leg(*s, i);
        s->s.ended_at = world_.now();
        return;
    }
    s->s.state = CallState::TornDown;
    s->s.ended_at = world_.now();
    std::size_t leg = *s->s.winner;
    bool from_caller = by != s->s.callee;
    std::uint64_t id = s->s.id;
    send_signal(*s, leg, from_caller, MessageKind::CallTeardown, [this, id, leg] {
        Live* s = find(id);
        if (!s) return;
        if (auto c = s->s.legs[leg].caller_conn) world_.net().close(*c);
        for (const auto& [key, c] : s->s.relay_conns) world_.net().close(c);
    });
}

}  // namespace skysim
