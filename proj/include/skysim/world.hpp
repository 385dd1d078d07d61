#pragma once

#include "skysim/call_session.hpp"
#include "skysim/client_node.hpp"
#include "skysim/conference.hpp"
#include "skysim/directory.hpp"
#include "skysim/host_cache.hpp"
#include "skysim/media.hpp"
#include "skysim/simnet.hpp"
#include "skysim/wire.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace skysim {

enum class Role : std::uint8_t { Client, SuperNode, LoginServer, VersionServer };

std::string_view to_string(Role r);
std::optional<Role> parse_role(std::string_view s);

struct WorldConfig {
    std::uint64_t seed = 1;
    LinkConfig link;
    SizeTable sizes = SizeTable::defaults();
    LoginTimers timers;
    SearchConfig search;
    CallConfig calls;
    CodecSpec codec = default_codec();
    AdmissionPolicy admission;
    bool strict_firewall = false;
    // Trace-only ICMP markers on first login.
    std::size_t icmp_markers = 2;
    // Targets a super node hands out for the presence advertisement.
    std::size_t advert_targets = 22;
};

struct NodeInfo {
    NodeId id;
    Role role = Role::Client;
    std::uint16_t port = 0;
    Capability capability;
};

// Owns the scheduler, the network, every node and the protocol services.
// Infrastructure roles (super nodes, login and version servers) have no
// state machine of their own; their reactions are the handlers below.
class World {
public:
    explicit World(WorldConfig cfg);
    ~World();
    World(const World&) = delete;
    World& operator=(const World&) = delete;

    Scheduler& scheduler() { return sched_; }
    Network& net() { return net_; }
    const Network& net() const { return net_; }
    Directory& directory() { return directory_; }
    const Directory& directory() const { return directory_; }
    SearchService& search() { return *search_; }
    CallManager& calls() { return *calls_; }
    const CallManager& calls() const { return *calls_; }
    ConferenceManager& conferences() { return *conferences_; }
    const ConferenceManager& conferences() const { return *conferences_; }
    const WorldConfig& config() const { return cfg_; }
    std::mt19937_64& rng() { return rng_; }
    SimTime now() const { return sched_.now(); }

    // Strict-firewall mode narrows unspecified firewall port sets to {80, 443}.
    void add_node(NodeSpec spec, Role role, std::uint16_t port, Capability cap = {});
    const NodeInfo& info(const NodeId& id) const;
    std::vector<NodeId> node_ids() const;
    std::map<NodeId, Capability> capabilities() const;

    ClientNode& client(const NodeId& id);
    const ClientNode& client(const NodeId& id) const;
    ClientNode* find_client(const NodeId& id);
    const ClientNode* find_client(const NodeId& id) const;
    std::vector<ClientNode*> clients();

    // Address other hosts dial to reach the node's main port.
    SocketAddr contact_address(const NodeId& id) const;
    std::optional<NodeId> node_at(const SocketAddr& a) const;

    bool is_super_node(const NodeId& id) const;
    // Up super nodes, sorted by id.
    std::vector<NodeId> live_super_nodes() const;
    bool sn_eligible(const NodeId& id) const;

    void set_bootstrap(BootstrapList list) { bootstrap_ = std::move(list); }
    const std::optional<BootstrapList>& bootstrap() const { return bootstrap_; }
    void set_login_server(NodeId id) { login_server_ = std::move(id); }
    const std::optional<NodeId>& login_server() const { return login_server_; }
    void set_version_server(NodeId id) { version_server_ = std::move(id); }
    const std::optional<NodeId>& version_server() const { return version_server_; }

    std::uint32_t size(MessageKind k, Transport t) const { return sized(k, t, cfg_.sizes); }
    Message make(MessageKind kind, const NodeId& from, std::uint16_t port, Transport t) const;

    // Tries `target.port`, then 80, then 443. Each attempt resolves one round
    // trip later. `done` receives the connection or nullopt.
    void connect_ladder(const NodeId& from, const SocketAddr& target,
                        std::function<void(std::optional<ConnectionId>)> done);

    // Receiver side of a UdpProbe: super nodes answer with the observed
    // address; online ordinary nodes also point at their super node.
    using ProbeReplyHandler = std::function<void(const Message& reply)>;
    void on_probe(const Message& probe, ProbeReplyHandler on_reply);

    // Super-node side of the login handshake. Replies with the login server address.
    void sn_handshake(ConnectionId conn, const NodeId& sn, const NodeId& client, std::function<void(const Message&)> done);
    // Super-node side of the presence advertisement; replies with targets.
    void sn_advert(ConnectionId conn, const NodeId& sn, const NodeId& client, std::function<void(const Message&)> done);
    std::vector<SocketAddr> advert_targets(const NodeId& sn);

    // Version check; logs a warning note when no server is reachable.
    void version_check(const NodeId& client, Message request);

    // Process death or network loss. Clients crash, infrastructure stops answering.
    void kill(const NodeId& id);
    // Brings a node back: network up, listeners reopened.
    void revive(const NodeId& id);

    void warn(const NodeId& node, MessageKind kind, std::string text) { net_.note(node, kind, "warning " + std::move(text)); }

private:
    void open_listeners(const NodeId& id);

    WorldConfig cfg_;
    Scheduler sched_;
    Network net_;
    std::mt19937_64 rng_;
    Directory directory_;
    std::unique_ptr<SearchService> search_;
    std::unique_ptr<CallManager> calls_;
    std::unique_ptr<ConferenceManager> conferences_;
    std::map<NodeId, NodeInfo> info_;
    std::map<NodeId, std::unique_ptr<ClientNode>> clients_;
    std::optional<BootstrapList> bootstrap_;
    std::optional<NodeId> login_server_;
    std::optional<NodeId> version_server_;
};

}  // namespace skysim
