#pragma once

#include "skysim/directory.hpp"
#include "skysim/media.hpp"
#include "skysim/simnet.hpp"

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace skysim {

class World;

enum class CallPath : std::uint8_t { DirectUdp, RelayedUdp, RelayedTcp };

std::string_view to_string(CallPath p);
std::optional<CallPath> parse_call_path(std::string_view s);

// (caller kind x callee kind) -> CallPath.
class PathMatrix {
public:
    static PathMatrix defaults();

    CallPath operator()(NatKind caller, NatKind callee) const;
    void set(NatKind caller, NatKind callee, CallPath p);

private:
    std::array<CallPath, 9> table_{};
};

Transport media_transport(CallPath p);

enum class CallState : std::uint8_t { Inviting, Active, Held, TornDown, Failed };

std::string_view to_string(CallState s);

enum class CallFailure : std::uint8_t { SearchMiss, CalleeOffline, NoRelayAvailable, Rejected, NoAnswer, CallerOffline };

std::string_view to_string(CallFailure f);

enum class AnswerMode : std::uint8_t { Auto, Manual, Reject, Random };

// Random picks a delay in [500, 3000] ms from the world generator.
struct AnswerPolicy {
    AnswerMode mode = AnswerMode::Auto;
    Duration delay{1000};
};

std::optional<AnswerPolicy> parse_answer_policy(std::string_view s);

struct NodeKindPair {
    NatKind caller = NatKind::Public;
    NatKind callee = NatKind::Public;
};

struct CallConfig {
    PathMatrix matrix = PathMatrix::defaults();
    std::size_t relay_count = 1;  // 2 puts the callee->caller media on a second relay
    Duration relay_keepup_period{333};
    std::uint32_t hold_pings_per_second = 3;
    Duration hold_tcp_ping_period{10'000};
    Duration ring_timeout{30'000};
    std::size_t setup_probe_count = 4;  // UDP pings to alternate nodes during setup
};

// One callee location being rung.
struct RingLeg {
    NodeId location;
    CallPath path = CallPath::DirectUdp;
    std::optional<ConnectionId> caller_conn;  // caller <-> callee (direct) or unused
    std::optional<ConnectionId> callee_conn;  // callee <-> primary relay
    bool invited = false;
    bool accepted = false;
    bool rejected = false;
    bool cancelled = false;  // CallCancel reached the location
    bool bound = false;      // callee side of the relay binding is in place
    bool cancel_pending = false;
    bool failed = false;
};

struct CallSession {
    std::uint64_t id = 0;
    std::string label;
    NodeId caller;
    std::string callee_user;
    NodeId callee;  // the answering location once Active
    CallPath path = CallPath::DirectUdp;
    std::vector<NodeId> relays;
    CallState state = CallState::Inviting;
    std::optional<NodeId> held_by;
    std::optional<CallFailure> failure;
    bool buddy = false;
    SimTime placed_at{0};
    std::optional<SimTime> active_at;
    std::optional<SimTime> ended_at;
    std::uint64_t signaling_bytes = 0;  // non-media bytes until Active
    std::vector<RingLeg> legs;
    std::optional<std::size_t> winner;
    // Party <-> relay TCP connections, keyed by (party, relay).
    std::map<std::pair<NodeId, NodeId>, ConnectionId> relay_conns;
    // Party UDP addresses as seen by each relay, keyed by (party, relay).
    std::map<std::pair<NodeId, NodeId>, SocketAddr> relay_udp;
    std::array<MediaStream, 2> streams;  // [0] caller->callee, [1] callee->caller
    std::uint64_t hold_udp_pings = 0;
    std::uint64_t hold_tcp_pings = 0;
    std::map<NodeId, std::uint64_t> hold_pings_by_party;
};

// Call establishment, teardown, hold and forking over the overlay.
class CallManager {
public:
    CallManager(World& world, CallConfig cfg);
    ~CallManager();

    // Returns the session id; the outcome is visible on the session.
    std::uint64_t place_call(const NodeId& caller, const std::string& callee_user, bool in_buddy_list);
    void answer(const NodeId& location);
    void hold(std::uint64_t session, const NodeId& by);
    void resume(std::uint64_t session);
    void teardown(std::uint64_t session, const NodeId& by);

    // First live ANT entry that is public and SN-eligible, else the caller's SN.
    std::optional<NodeId> select_relay(const NodeId& caller, const std::vector<NodeId>& exclude = {}) const;

    const CallSession* session(std::uint64_t id) const;
    const CallSession* session(const std::string& label) const;
    std::vector<const CallSession*> sessions() const;
    const CallConfig& config() const { return cfg_; }
    void set_answer_policy(const NodeId& node, AnswerPolicy p) { policies_[node] = p; }
    AnswerPolicy answer_policy(const NodeId& node) const;

private:
    struct Live;

    Live* find(std::uint64_t id);
    void fail(Live& s, CallFailure f);
    void resolve_and_invite(Live& s, std::vector<NodeId> locations);
    void invite_direct(Live& s, std::size_t leg);
    void invite_relayed(Live& s, std::size_t leg);
    void bind_to_relays(Live& s, const NodeId& party, std::function<void()> done);
    void ring(Live& s, std::size_t leg);
    void location_answers(Live& s, std::size_t leg);
    void location_rejects(Live& s, std::size_t leg);
    void accept_reached_caller(Live& s, std::size_t leg);
    void cancel_leg(Live& s, std::size_t leg);
    void go_active(Live& s);
    void start_media(Live& s);
    void send_frame(Live& s, int direction);
    void start_hold_pings(Live& s);
    void stop_timers(Live& s);
    // Caller <-> location over the leg's signaling path (direct or via the primary relay).
    void send_signal(Live& s, std::size_t leg, bool from_caller, MessageKind kind, std::function<void()> on_arrival);
    SendOutcome send_tcp(Live& s, ConnectionId conn, const NodeId& from, MessageKind kind, ArrivalHandler on_arrival);
    std::optional<ConnectionId> relay_conn(const Live& s, const NodeId& party, const NodeId& relay) const;
    NodeKindPair kinds(const NodeId& caller, const NodeId& callee) const;

    World& world_;
    CallConfig cfg_;
    std::map<std::uint64_t, std::unique_ptr<Live>> live_;
    std::map<NodeId, AnswerPolicy> policies_;
    std::uint64_t next_id_ = 1;
};

}  // namespace skysim
