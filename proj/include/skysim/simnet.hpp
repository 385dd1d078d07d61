#pragma once

#include "skysim/net_types.hpp"
#include "skysim/wire.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace skysim {

using EventId = std::uint64_t;

// Discrete-event queue. Events fire in (time, insertion sequence) order.
class Scheduler {
public:
    SimTime now() const { return now_; }

    // Throws std::invalid_argument when `at` lies in the past.
    EventId schedule(SimTime at, std::function<void()> fn);
    EventId schedule_after(Duration delay, std::function<void()> fn) { return schedule(now_ + delay, std::move(fn)); }
    bool cancel(EventId id);

    // Processes every event with time <= t, then sets now to t.
    std::size_t advance_until(SimTime t);
    // Runs until the queue drains or `limit` is reached.
    std::size_t run_until_idle(SimTime limit);

    bool empty() const { return queue_.empty(); }
    std::size_t pending() const { return queue_.size(); }
    std::size_t processed() const { return processed_; }

    // Invoked after every processed event; used for runtime invariant checks.
    void set_after_event(std::function<void()> hook) { after_event_ = std::move(hook); }

private:
    struct Key {
        SimTime at;
        EventId seq;
        auto operator<=>(const Key&) const = default;
    };

    std::map<Key, std::function<void()>> queue_;
    std::unordered_map<EventId, SimTime> index_;
    SimTime now_{0};
    EventId next_seq_ = 1;
    std::size_t processed_ = 0;
    std::function<void()> after_event_;
};

// Calls `fn` at `first`, then every `period`, until stopped or destroyed.
class PeriodicTimer {
public:
    PeriodicTimer() = default;
    PeriodicTimer(const PeriodicTimer&) = delete;
    PeriodicTimer& operator=(const PeriodicTimer&) = delete;
    ~PeriodicTimer() { stop(); }

    void start(Scheduler& sched, SimTime first, Duration period, std::function<void()> fn);
    void stop();
    bool running() const { return sched_ != nullptr; }

private:
    void arm(SimTime at);

    Scheduler* sched_ = nullptr;
    Duration period_{0};
    std::optional<EventId> pending_;
    std::function<void()> fn_;
};

enum class TraceType : std::uint8_t { Delivered, Blocked, Conn, ConnRefused, Note };

struct TraceEvent {
    SimTime at{0};
    TraceType type = TraceType::Note;
    MessageKind kind = MessageKind::Syn;
    Endpoint src;
    Endpoint dst;
    std::uint32_t bytes = 0;
    std::string reason;  // blocked / refused reason, or the note text
};

// `t=<millis> <TYPE> <kind> <src>:<port>/<tr> -> <dst>:<port>/<tr> bytes=<n> [reason=<r>]`
std::string format_trace_line(const TraceEvent& e);
std::string format_trace(const std::vector<TraceEvent>& events);

struct NatBinding {
    SocketAddr internal;
    SocketAddr external;
    SocketAddr peer;
    SimTime last_use{0};
    Duration ttl{30'000};

    bool alive(SimTime now) const { return now - last_use <= ttl; }
};

struct NodeSpec {
    NodeId id;
    std::string addr;
    NatProfile nat;
    // Public address of the NAT box; ignored for public nodes.
    std::string external_addr;
    std::optional<std::uint64_t> uplink_cap;    // payload bytes per second
    std::optional<std::uint64_t> downlink_cap;
};

struct NodeCounters {
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
    std::uint64_t udp_sent = 0;
    std::uint64_t udp_received = 0;
    std::uint64_t tcp_sent = 0;
    std::uint64_t tcp_received = 0;
};

struct LinkConfig {
    Duration default_latency{20};
    Duration binding_ttl{30'000};
};

using ConnectionId = std::uint64_t;

struct Connection {
    ConnectionId id = 0;
    Endpoint initiator;
    Endpoint acceptor;
    bool open = false;

    const Endpoint& local(const NodeId& n) const { return n == initiator.node ? initiator : acceptor; }
    const Endpoint& remote(const NodeId& n) const { return n == initiator.node ? acceptor : initiator; }
};

struct SendOutcome {
    bool delivered = false;
    std::string reason;
    SimTime arrival{0};

    explicit operator bool() const { return delivered; }
};

struct ConnectOutcome {
    std::optional<ConnectionId> conn;
    std::string reason;  // no-listener | inbound-blocked | outbound-port-blocked

    explicit operator bool() const { return conn.has_value(); }
};

using ArrivalHandler = std::function<void(const Message&)>;

// Network semantics over the scheduler: latency, NAT/firewall filtering,
// bandwidth caps, byte accounting and the trace. Decisions are taken when a
// message is sent; the arrival handler runs one latency later.
class Network {
public:
    Network(Scheduler& sched, LinkConfig cfg = {});

    Scheduler& scheduler() { return sched_; }
    SimTime now() const { return sched_.now(); }
    const LinkConfig& config() const { return cfg_; }

    void add_node(NodeSpec spec);
    bool has_node(const NodeId& id) const { return nodes_.count(id) != 0; }
    const NodeSpec& node(const NodeId& id) const;
    std::vector<NodeId> node_ids() const;

    // A down node has no listeners and its connections are closed.
    void set_up(const NodeId& id, bool up);
    bool is_up(const NodeId& id) const;

    void listen(const NodeId& id, std::uint16_t port, Transport t);
    void unlisten_all(const NodeId& id);
    bool listening(const NodeId& id, std::uint16_t port, Transport t) const;

    // Takes effect for messages sent from now on.
    void set_caps(const NodeId& id, std::optional<std::uint64_t> uplink, std::optional<std::uint64_t> downlink);

    void set_latency(const NodeId& a, const NodeId& b, Duration d);
    Duration latency(const NodeId& a, const NodeId& b) const;

    // Address other hosts use to reach a listener on a public node.
    SocketAddr address_of(const NodeId& id, std::uint16_t port) const;
    // Node answering on a public address, if any.
    std::optional<NodeId> node_at(const std::string& addr) const;

    // Sends a datagram from msg.src (node, port) to `to`. msg.dst is resolved here.
    SendOutcome send_udp(Message msg, const SocketAddr& to, ArrivalHandler on_arrival = {});

    ConnectOutcome tcp_connect(const NodeId& initiator, const SocketAddr& target);
    SendOutcome send_tcp(ConnectionId conn, const NodeId& from, Message msg, ArrivalHandler on_arrival = {});
    void close(ConnectionId conn);
    const Connection* connection(ConnectionId conn) const;
    bool connection_open(ConnectionId conn) const;
    std::size_t open_connections(const NodeId& a, const NodeId& b) const;

    void note(const NodeId& node, MessageKind kind, std::string text);

    const std::vector<TraceEvent>& trace() const { return trace_; }
    const NodeCounters& counters(const NodeId& id) const;
    std::vector<NatBinding> bindings(const NodeId& id) const;

private:
    struct NodeState {
        NodeSpec spec;
        bool up = true;
        std::map<std::pair<std::uint16_t, Transport>, bool> listeners;
        // internal port -> external port (endpoint-independent mapping)
        std::map<std::uint16_t, std::uint16_t> port_map;
        std::vector<NatBinding> bindings;
        NodeCounters counters;
        std::map<std::int64_t, std::uint64_t> up_window;    // second -> bytes
        std::map<std::int64_t, std::uint64_t> down_window;
        std::uint16_t next_ephemeral = 49152;
        std::uint16_t next_external = 40000;
    };

    NodeState& state(const NodeId& id);
    const NodeState& state(const NodeId& id) const;
    std::uint16_t external_port(NodeState& n, std::uint16_t internal);
    // Strict per-second cap; returns false when the message does not fit.
    static bool fits(std::map<std::int64_t, std::uint64_t>& window, std::optional<std::uint64_t> cap,
                     std::int64_t second, std::uint32_t bytes);
    // First second at or after `from` with room for `bytes` (TCP queueing).
    static std::int64_t reserve(std::map<std::int64_t, std::uint64_t>& window, std::optional<std::uint64_t> cap,
                                std::int64_t from, std::uint32_t bytes);
    void record(TraceType type, const Message& m, std::string reason);
    void deliver_later(SimTime at, Message msg, ArrivalHandler handler);

    Scheduler& sched_;
    LinkConfig cfg_;
    std::map<NodeId, NodeState> nodes_;
    std::map<std::string, NodeId> public_addrs_;
    std::map<std::string, NodeId> external_addrs_;
    std::map<std::pair<NodeId, NodeId>, Duration> latency_;
    std::map<ConnectionId, Connection> conns_;
    std::map<std::pair<ConnectionId, bool>, SimTime> last_arrival_;  // ordered delivery per direction
    ConnectionId next_conn_ = 1;
    std::vector<TraceEvent> trace_;
};

}  // namespace skysim
