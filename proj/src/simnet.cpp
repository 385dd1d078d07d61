#include "skysim/simnet.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace skysim {

// ---------------------------------------------------------------- Scheduler

EventId Scheduler::schedule(SimTime at, std::function<void()> fn)
{
    if (at < now_)
        throw std::invalid_argument("cannot schedule event at t=" + std::to_string(at.count()) +
                                    " before now=" + std::to_string(now_.count()));
    EventId id = next_seq_++;
    queue_.emplace(Key{at, id}, std::move(fn));
    index_.emplace(id, at);
    return id;
}

bool Scheduler::cancel(EventId id)
{
    auto it = index_.find(id);
    if (it == index_.end()) return false;
    queue_.erase(Key{it->second, id});
    index_.erase(it);
    return true;
}

std::size_t Scheduler::advance_until(SimTime t)
{
    if (t < now_) throw std::invalid_argument("advance_until: target time is in the past");
    std::size_t count = 0;
    while (!queue_.empty() && queue_.begin()->first.at <= t) {
        auto node = queue_.extract(queue_.begin());
        index_.erase(node.key().seq);
        now_ = node.key().at;
        node.mapped()();
        ++count;
        ++processed_;
        if (after_event_) after_event_();
    }
    now_ = t;
    return count;
}

std::size_t Scheduler::run_until_idle(SimTime limit)
{
    std::size_t count = 0;
    while (!queue_.empty() && queue_.begin()->first.at <= limit)
        count += advance_until(queue_.begin()->first.at);
    return count;
}

void PeriodicTimer::start(Scheduler& sched, SimTime first, Duration period, std::function<void()> fn)
{
    stop();
    if (period <= Duration{0}) throw std::invalid_argument("timer period must be positive");
    sched_ = &sched;
    period_ = period;
    fn_ = std::move(fn);
    arm(first);
}

void PeriodicTimer::stop()
{
    if (sched_ && pending_) sched_->cancel(*pending_);
    pending_.reset();
    sched_ = nullptr;
}

void PeriodicTimer::arm(SimTime at)
{
    pending_ = sched_->schedule(at, [this, at] {
        pending_.reset();
        arm(at + period_);
        fn_();
    });
}

// -------------------------------------------------------------------- Trace

namespace {

std::string_view type_name(TraceType t)
{
    switch (t) {
    case TraceType::Delivered: return "DELIVERED";
    case TraceType::Blocked: return "BLOCKED";
    case TraceType::Conn: return "CONN";
    case TraceType::ConnRefused: return "CONN_REFUSED";
    case TraceType::Note: return "NOTE";
    }
    return "?";
}

}  // namespace

std::string format_trace_line(const TraceEvent& e)
{
    std::ostringstream out;
    out << "t=" << e.at.count() << ' ' << type_name(e.type) << ' ' << to_string(e.kind) << ' ';
    if (e.type == TraceType::Note) {
        out << e.src.node << ' ' << e.reason;
        return out.str();
    }
    out << e.src.node << ':' << e.src.port << '/' << to_string(e.src.transport) << " -> " << e.dst.node << ':'
        << e.dst.port << '/' << to_string(e.dst.transport) << " bytes=" << e.bytes;
    if (!e.reason.empty()) out << " reason=" << e.reason;
    return out.str();
}

std::string format_trace(const std::vector<TraceEvent>& events)
{
    std::string out;
    for (const auto& e : events) {
        out += format_trace_line(e);
        out += '\n';
    }
    return out;
}

// ------------------------------------------------------------------ Network

Network::Network(Scheduler& sched, LinkConfig cfg) : sched_(sched), cfg_(cfg) {}

void Network::add_node(NodeSpec spec)
{
    if (nodes_.count(spec.id)) throw std::invalid_argument("duplicate node id '" + spec.id + "'");
    if (spec.nat.kind == NatKind::Public) {
        if (public_addrs_.count(spec.addr)) throw std::invalid_argument("duplicate address '" + spec.addr + "'");
        public_addrs_[spec.addr] = spec.id;
    } else {
        if (spec.external_addr.empty()) spec.external_addr = "nat-" + spec.addr;
        if (external_addrs_.count(spec.external_addr) || public_addrs_.count(spec.external_addr))
            throw std::invalid_argument("duplicate external address '" + spec.external_addr + "'");
        external_addrs_[spec.external_addr] = spec.id;
    }
    NodeState st;
    st.spec = std::move(spec);
    NodeId id = st.spec.id;
    nodes_.emplace(std::move(id), std::move(st));
}

Network::NodeState& Network::state(const NodeId& id)
{
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::out_of_range("unknown node '" + id + "'");
    return it->second;
}

const Network::NodeState& Network::state(const NodeId& id) const
{
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::out_of_range("unknown node '" + id + "'");
    return it->second;
}

const NodeSpec& Network::node(const NodeId& id) const { return state(id).spec; }

std::vector<NodeId> Network::node_ids() const
{
    std::vector<NodeId> ids;
    for (const auto& [id, _] : nodes_) ids.push_back(id);
    return ids;
}

void Network::set_up(const NodeId& id, bool up)
{
    auto& n = state(id);
    n.up = up;
    if (!up) {
        n.listeners.clear();
        for (auto& [cid, c] : conns_)
            if (c.initiator.node == id || c.acceptor.node == id) c.open = false;
    }
}

bool Network::is_up(const NodeId& id) const
{
    auto it = nodes_.find(id);
    return it != nodes_.end() && it->second.up;
}

void Network::listen(const NodeId& id, std::uint16_t port, Transport t)
{
    auto& n = state(id);
    if (!n.up) throw std::logic_error("node '" + id + "' is down");
    n.listeners[{port, t}] = true;
}

void Network::unlisten_all(const NodeId& id) { state(id).listeners.clear(); }

bool Network::listening(const NodeId& id, std::uint16_t port, Transport t) const
{
    const auto& n = state(id);
    return n.up && n.listeners.count({port, t}) != 0;
}

void Network::set_caps(const NodeId& id, std::optional<std::uint64_t> uplink, std::optional<std::uint64_t> downlink)
{
    auto& st = state(id);
    st.spec.uplink_cap = uplink;
    st.spec.downlink_cap = downlink;
}

void Network::set_latency(const NodeId& a, const NodeId& b, Duration d)
{
    latency_[{a, b}] = d;
    latency_[{b, a}] = d;
}

Duration Network::latency(const NodeId& a, const NodeId& b) const
{
    auto it = latency_.find({a, b});
    return it == latency_.end() ? cfg_.default_latency : it->second;
}

SocketAddr Network::address_of(const NodeId& id, std::uint16_t port) const
{
    const auto& n = state(id);
    return SocketAddr{n.spec.nat.kind == NatKind::Public ? n.spec.addr : n.spec.external_addr, port};
}

std::optional<NodeId> Network::node_at(const std::string& addr) const
{
    auto it = public_addrs_.find(addr);
    if (it == public_addrs_.end()) return std::nullopt;
    return it->second;
}

std::uint16_t Network::external_port(NodeState& n, std::uint16_t internal)
{
    auto it = n.port_map.find(internal);
    if (it != n.port_map.end()) return it->second;
    std::uint16_t ext = n.next_external++;
    n.port_map.emplace(internal, ext);
    return ext;
}

bool Network::fits(std::map<std::int64_t, std::uint64_t>& window, std::optional<std::uint64_t> cap,
                   std::int64_t second, std::uint32_t bytes)
{
    if (!cap) return true;
    return window[second] + bytes <= *cap;
}

std::int64_t Network::reserve(std::map<std::int64_t, std::uint64_t>& window, std::optional<std::uint64_t> cap,
                              std::int64_t from, std::uint32_t bytes)
{
    if (!cap) return from;
    for (std::int64_t s = from;; ++s) {
        auto& used = window[s];
        if (used + bytes <= *cap || used == 0) {
            used += bytes;
            return s;
        }
    }
}

void Network::record(TraceType type, const Message& m, std::string reason)
{
    TraceEvent e;
    e.at = now();
    e.type = type;
    e.kind = m.kind;
    e.src = m.src;
    e.dst = m.dst;
    e.bytes = (type == TraceType::Delivered || type == TraceType::Blocked) ? m.payload_bytes : 0;
    e.reason = std::move(reason);
    trace_.push_back(std::move(e));
}

void Network::deliver_later(SimTime at, Message msg, ArrivalHandler handler)
{
    sched_.schedule(at, [this, msg = std::move(msg), handler = std::move(handler)] {
        if (handler && is_up(msg.dst.node)) handler(msg);
    });
}

SendOutcome Network::send_udp(Message msg, const SocketAddr& to, ArrivalHandler on_arrival)
{
    msg.src.transport = Transport::Udp;
    auto& sender = state(msg.src.node);
    msg.dst = Endpoint{to.addr, to.port, Transport::Udp};

    auto blocked = [&](std::string reason) {
        record(TraceType::Blocked, msg, reason);
        return SendOutcome{false, std::move(reason), now()};
    };
    if (!sender.up) return blocked("host-down");

    SocketAddr observed{sender.spec.addr, msg.src.port};
    if (sender.spec.nat.kind != NatKind::Public) {
        observed = SocketAddr{sender.spec.external_addr, external_port(sender, msg.src.port)};
        auto it = std::find_if(sender.bindings.begin(), sender.bindings.end(), [&](const NatBinding& b) {
            return b.internal.port == msg.src.port && b.peer == to;
        });
        if (it == sender.bindings.end())
            sender.bindings.push_back(NatBinding{SocketAddr{sender.spec.addr, msg.src.port}, observed, to, now(),
                                                 cfg_.binding_ttl});
        else
            it->last_use = now();
    }
    msg.observed_from = observed;

    NodeState* receiver = nullptr;
    if (auto it = public_addrs_.find(to.addr); it != public_addrs_.end()) {
        receiver = &state(it->second);
        msg.dst.node = it->second;
    } else if (auto ext = external_addrs_.find(to.addr); ext != external_addrs_.end()) {
        receiver = &state(ext->second);
        msg.dst.node = ext->second;
        if (receiver->spec.nat.kind == NatKind::NatUdpBlockedFirewall) return blocked("udp-filtered");
        auto pm = std::find_if(receiver->port_map.begin(), receiver->port_map.end(),
                               [&](const auto& kv) { return kv.second == to.port; });
        if (pm == receiver->port_map.end()) return blocked("no-binding");
        msg.dst.port = pm->first;
        auto binding = std::find_if(receiver->bindings.begin(), receiver->bindings.end(), [&](const NatBinding& b) {
            return b.internal.port == pm->first && b.peer == observed;
        });
        if (binding == receiver->bindings.end() || !binding->alive(now())) return blocked("no-binding");
    } else {
        return blocked("no-route");
    }

    if (!receiver->up || !receiver->listeners.count({msg.dst.port, Transport::Udp})) return blocked("no-listener");

    Duration lat = latency(msg.src.node, msg.dst.node);
    SimTime arrival = now() + lat;
    std::int64_t up_sec = now().count() / 1000;
    std::int64_t down_sec = arrival.count() / 1000;
    if (!fits(sender.up_window, sender.spec.uplink_cap, up_sec, msg.payload_bytes)) return blocked("uplink-cap");
    if (!fits(receiver->down_window, receiver->spec.downlink_cap, down_sec, msg.payload_bytes))
        return blocked("downlink-cap");
    if (sender.spec.uplink_cap) sender.up_window[up_sec] += msg.payload_bytes;
    if (receiver->spec.downlink_cap) receiver->down_window[down_sec] += msg.payload_bytes;

    if (receiver->spec.nat.kind == NatKind::PortRestrictedNat) {
        for (auto& b : receiver->bindings)
            if (b.internal.port == msg.dst.port && b.peer == observed) b.last_use = now();
    }

    sender.counters.bytes_sent += msg.payload_bytes;
    sender.counters.udp_sent += 1;
    receiver->counters.bytes_received += msg.payload_bytes;
    receiver->counters.udp_received += 1;
    record(TraceType::Delivered, msg, {});
    deliver_later(arrival, msg, std::move(on_arrival));
    return SendOutcome{true, {}, arrival};
}

ConnectOutcome Network::tcp_connect(const NodeId& initiator, const SocketAddr& target)
{
    auto& init = state(initiator);
    Message syn;
    syn.kind = MessageKind::Syn;
    syn.src = Endpoint{initiator, init.next_ephemeral, Transport::Tcp};
    syn.dst = Endpoint{target.addr, target.port, Transport::Tcp};
    if (++init.next_ephemeral == 0) init.next_ephemeral = 49152;

    auto refused = [&](std::string reason) {
        record(TraceType::ConnRefused, syn, reason);
        return ConnectOutcome{std::nullopt, std::move(reason)};
    };
    if (!init.up) return refused("initiator-down");

    std::optional<NodeId> target_node;
    if (auto it = public_addrs_.find(target.addr); it != public_addrs_.end()) target_node = it->second;
    else if (auto ext = external_addrs_.find(target.addr); ext != external_addrs_.end()) target_node = ext->second;
    if (target_node) syn.dst.node = *target_node;

    if (!init.spec.nat.admits_outbound_tcp(target.port)) return refused("outbound-port-blocked");
    if (!target_node) return refused("no-listener");
    const auto& tgt = state(*target_node);
    if (!tgt.spec.nat.admits_inbound_tcp()) return refused("inbound-blocked");
    if (!tgt.up || !tgt.listeners.count({target.port, Transport::Tcp})) return refused("no-listener");

    Connection c;
    c.id = next_conn_++;
    c.initiator = syn.src;
    c.acceptor = syn.dst;
    c.open = true;
    conns_.emplace(c.id, c);
    record(TraceType::Conn, syn, {});
    return ConnectOutcome{c.id, {}};
}

SendOutcome Network::send_tcp(ConnectionId conn, const NodeId& from, Message msg, ArrivalHandler on_arrival)
{
    auto it = conns_.find(conn);
    if (it == conns_.end()) throw std::out_of_range("unknown connection");
    const Connection& c = it->second;
    msg.src = c.local(from);
    msg.dst = c.remote(from);
    msg.observed_from = address_of(from, msg.src.port);
    if (!c.open || !is_up(msg.src.node) || !is_up(msg.dst.node)) {
        record(TraceType::Blocked, msg, "connection-closed");
        return SendOutcome{false, "connection-closed", now()};
    }
    auto& sender = state(msg.src.node);
    auto& receiver = state(msg.dst.node);
    std::int64_t up_sec = reserve(sender.up_window, sender.spec.uplink_cap, now().count() / 1000, msg.payload_bytes);
    SimTime depart = std::max(now(), SimTime{up_sec * 1000});
    SimTime arrival = depart + latency(msg.src.node, msg.dst.node);
    std::int64_t down_sec =
        reserve(receiver.down_window, receiver.spec.downlink_cap, arrival.count() / 1000, msg.payload_bytes);
    arrival = std::max(arrival, SimTime{down_sec * 1000});
    auto& last = last_arrival_[{conn, from == c.initiator.node}];
    arrival = std::max(arrival, last);
    last = arrival;

    sender.counters.bytes_sent += msg.payload_bytes;
    sender.counters.tcp_sent += 1;
    receiver.counters.bytes_received += msg.payload_bytes;
    receiver.counters.tcp_received += 1;
    record(TraceType::Delivered, msg, {});
    deliver_later(arrival, msg, std::move(on_arrival));
    return SendOutcome{true, {}, arrival};
}

void Network::close(ConnectionId conn)
{
    if (auto it = conns_.find(conn); it != conns_.end()) it->second.open = false;
}

const Connection* Network::connection(ConnectionId conn) const
{
    auto it = conns_.find(conn);
    return it == conns_.end() ? nullptr : &it->second;
}

bool Network::connection_open(ConnectionId conn) const
{
    auto c = connection(conn);
    return c && c->open && is_up(c->initiator.node) && is_up(c->acceptor.node);
}

std::size_t Network::open_connections(const NodeId& a, const NodeId& b) const
{
    std::size_t n = 0;
    for (const auto& [id, c] : conns_)
        if (c.open && ((c.initiator.node == a && c.acceptor.node == b) || (c.initiator.node == b && c.acceptor.node == a)))
            ++n;
    return n;
}

void Network::note(const NodeId& node, MessageKind kind, std::string text)
{
    TraceEvent e;
    e.at = now();
    e.type = TraceType::Note;
    e.kind = kind;
    e.src = Endpoint{node, 0, Transport::Udp};
    e.reason = std::move(text);
    trace_.push_back(std::move(e));
}

const NodeCounters& Network::counters(const NodeId& id) const { return state(id).counters; }

std::vector<NatBinding> Network::bindings(const NodeId& id) const { return state(id).bindings; }

}  // namespace skysim
