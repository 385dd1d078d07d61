#include "skysim/world.hpp"

#include <algorithm>
#include <stdexcept>

namespace skysim {

std::string_view to_string(Role r)
{
    switch (r) {
    case Role::Client: return "client";
    case Role::SuperNode: return "sn";
    case Role::LoginServer: return "login";
    case Role::VersionServer: return "version";
    }
    return "?";
}

std::optional<Role> parse_role(std::string_view s)
{
    for (Role r : {Role::Client, Role::SuperNode, Role::LoginServer, Role::VersionServer})
        if (to_string(r) == s) return r;
    return std::nullopt;
}

World::World(WorldConfig cfg)
    : cfg_(std::move(cfg)), net_(sched_, cfg_.link), rng_(cfg_.seed)
{
    search_ = std::make_unique<SearchService>(*this, cfg_.search);
    calls_ = std::make_unique<CallManager>(*this, cfg_.calls);
    conferences_ = std::make_unique<ConferenceManager>(*this);
}

World::~World() = default;

void World::add_node(NodeSpec spec, Role role, std::uint16_t port, Capability cap)
{
    if (port == 0) throw std::invalid_argument("node '" + spec.id + "' needs a non-zero port");
    if (cfg_.strict_firewall && spec.nat.kind == NatKind::NatUdpBlockedFirewall && !spec.nat.allowed_outbound_tcp_ports)
        spec.nat.allowed_outbound_tcp_ports = std::set<std::uint16_t>{80, 443};
    NodeId id = spec.id;
    net_.add_node(std::move(spec));
    info_[id] = NodeInfo{id, role, port, cap};
    if (role == Role::Client) clients_[id] = std::make_unique<ClientNode>(*this, id, port);
    open_listeners(id);
}

const NodeInfo& World::info(const NodeId& id) const
{
    auto it = info_.find(id);
    if (it == info_.end()) throw std::out_of_range("unknown node '" + id + "'");
    return it->second;
}

std::vector<NodeId> World::node_ids() const
{
    std::vector<NodeId> out;
    for (const auto& [id, _] : info_) out.push_back(id);
    return out;
}

std::map<NodeId, Capability> World::capabilities() const
{
    std::map<NodeId, Capability> out;
    for (const auto& [id, i] : info_) out[id] = i.capability;
    return out;
}

ClientNode& World::client(const NodeId& id)
{
    if (auto* c = find_client(id)) return *c;
    throw std::out_of_range("'" + id + "' is not a client");
}

const ClientNode& World::client(const NodeId& id) const
{
    if (const auto* c = find_client(id)) return *c;
    throw std::out_of_range("'" + id + "' is not a client");
}

ClientNode* World::find_client(const NodeId& id)
{
    auto it = clients_.find(id);
    return it == clients_.end() ? nullptr : it->second.get();
}

const ClientNode* World::find_client(const NodeId& id) const
{
    auto it = clients_.find(id);
    return it == clients_.end() ? nullptr : it->second.get();
}

std::vector<ClientNode*> World::clients()
{
    std::vector<ClientNode*> out;
    for (auto& [_, c] : clients_) out.push_back(c.get());
    return out;
}

SocketAddr World::contact_address(const NodeId& id) const { return net_.address_of(id, info(id).port); }

std::optional<NodeId> World::node_at(const SocketAddr& a) const { return net_.node_at(a.addr); }

bool World::is_super_node(const NodeId& id) const
{
    auto it = info_.find(id);
    return it != info_.end() && it->second.role == Role::SuperNode;
}

std::vector<NodeId> World::live_super_nodes() const
{
    std::vector<NodeId> out;
    for (const auto& [id, i] : info_)
        if (i.role == Role::SuperNode && net_.is_up(id)) out.push_back(id);
    return out;
}

bool World::sn_eligible(const NodeId& id) const
{
    auto it = info_.find(id);
    if (it == info_.end() || !net_.is_up(id)) return false;
    return sn_admission(net_.node(id).nat.kind, it->second.capability, cfg_.admission);
}

Message World::make(MessageKind kind, const NodeId& from, std::uint16_t port, Transport t) const
{
    Message m;
    m.kind = kind;
    m.src = Endpoint{from, port, t};
    m.payload_bytes = size(kind, t);
    return m;
}

void World::open_listeners(const NodeId& id)
{
    const auto& i = info(id);
    if (i.role != Role::VersionServer) {
        net_.listen(id, i.port, Transport::Udp);
        net_.listen(id, i.port, Transport::Tcp);
    }
    net_.listen(id, 80, Transport::Tcp);
    net_.listen(id, 443, Transport::Tcp);
}

void World::connect_ladder(const NodeId& from, const SocketAddr& target,
                           std::function<void(std::optional<ConnectionId>)> done)
{
    std::vector<std::uint16_t> ports{target.port};
    for (std::uint16_t p : {std::uint16_t{80}, std::uint16_t{443}})
        if (std::find(ports.begin(), ports.end(), p) == ports.end()) ports.push_back(p);

    auto step = std::make_shared<std::function<void(std::size_t)>>();
    *step = [this, from, target, ports, done = std::move(done), step](std::size_t i) {
        auto out = net_.tcp_connect(from, SocketAddr{target.addr, ports[i]});
        auto peer = net_.node_at(target.addr);
        Duration rtt = 2 * (peer ? net_.latency(from, *peer) : net_.config().default_latency);
        auto conn = out.conn;
        bool last = i + 1 == ports.size();
        sched_.schedule_after(rtt, [this, step, i, conn, last, done] {
            bool ok = conn && net_.connection_open(*conn);
            if (!ok && !last) {
                (*step)(i + 1);
                return;
            }
            *step = nullptr;  // ladder finished; drop the self-reference
            done(ok ? conn : std::nullopt);
        });
    };
    (*step)(0);
}

void World::on_probe(const Message& probe, ProbeReplyHandler on_reply)
{
    const NodeId& me = probe.dst.node;
    auto it = info_.find(me);
    if (it == info_.end()) return;
    Message reply = make(MessageKind::UdpProbeReply, me, probe.dst.port, Transport::Udp);
    reply.body.report = probe_reply_body(probe.observed_from);
    reply.correlation = probe.correlation;
    if (it->second.role == Role::Client) {
        const auto* c = find_client(me);
        if (!c || c->state() != ClientState::Online || !c->super_node()) return;
        // An ordinary node points the prober at its own super node.
        reply.body.nodes.push_back(contact_address(*c->super_node()));
    } else if (it->second.role != Role::SuperNode) {
        return;
    }
    net_.send_udp(std::move(reply), probe.observed_from, std::move(on_reply));
}

void World::sn_handshake(ConnectionId conn, const NodeId& sn, const NodeId& client,
                         std::function<void(const Message&)> done)
{
    (void)client;
    Message resp = make(MessageKind::HandshakeResponse, sn, info(sn).port, Transport::Tcp);
    if (login_server_ && net_.has_node(*login_server_)) resp.body.nodes.push_back(contact_address(*login_server_));
    net_.send_tcp(conn, sn, std::move(resp), std::move(done));
}

std::vector<SocketAddr> World::advert_targets(const NodeId& sn)
{
    std::vector<NodeId> pool;
    for (const auto& id : live_super_nodes())
        if (id != sn) pool.push_back(id);
    // Fisher-Yates with the world generator keeps runs portable across standard libraries.
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng_() % i]);
    if (pool.size() > cfg_.advert_targets) pool.resize(cfg_.advert_targets);
    std::vector<SocketAddr> out;
    for (const auto& id : pool) out.push_back(contact_address(id));
    return out;
}

void World::sn_advert(ConnectionId conn, const NodeId& sn, const NodeId& client,
                      std::function<void(const Message&)> done)
{
    (void)client;
    Message resp = make(MessageKind::PresenceAdvert, sn, info(sn).port, Transport::Tcp);
    resp.body.nodes = advert_targets(sn);
    net_.send_tcp(conn, sn, std::move(resp), std::move(done));
}

void World::version_check(const NodeId& client, Message request)
{
    if (!version_server_ || !net_.is_up(*version_server_)) {
        warn(client, MessageKind::VersionCheckRequest, "version-server-unreachable");
        return;
    }
    auto out = net_.tcp_connect(client, net_.address_of(*version_server_, 80));
    if (!out) {
        warn(client, MessageKind::VersionCheckRequest, "version-server-unreachable");
        return;
    }
    ConnectionId conn = *out.conn;
    NodeId server = *version_server_;
    net_.send_tcp(conn, client, std::move(request), [this, conn, server](const Message&) {
        Message resp = make(MessageKind::VersionCheckResponse, server, 80, Transport::Tcp);
        net_.send_tcp(conn, server, std::move(resp), [this, conn](const Message&) { net_.close(conn); });
    });
}

void World::kill(const NodeId& id)
{
    if (auto* c = find_client(id)) c->crash();
    net_.set_up(id, false);
}

void World::revive(const NodeId& id)
{
    if (net_.is_up(id)) return;
    net_.set_up(id, true);
    open_listeners(id);
}

}  // namespace skysim
