#pragma once

#include "skysim/host_cache.hpp"
#include "skysim/simnet.hpp"
#include "skysim/wire.hpp"

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace skysim {

class World;

enum class ClientState : std::uint8_t {
    Offline,
    ProbingHc,
    TcpFallback,
    Authenticating,
    AdvertisingPresence,
    Online,
    LoginFailed,
};

std::string_view to_string(ClientState s);
std::optional<ClientState> parse_client_state(std::string_view s);

struct LoginTimers {
    Duration udp_wait{5000};
    Duration cycle_wait{6000};
    int max_cycles = 5;
    // Host-cache entries probed per login cycle, and per UDP wave.
    std::size_t hc_probe_count = 30;
    std::size_t hc_probe_wave = 5;
    // Reply window after the 22-node presence advertisement.
    Duration advert_wait{1000};
    Duration keepalive_period{60'000};
    Duration nat_refresh_period{3'600'000};
};

struct AntEntry {
    SocketAddr node;
    bool live = true;

    bool operator==(const AntEntry&) const = default;
};

// Peers that answered the post-login advertisement; failover and relay
// candidates.
class AlternateNodeTable {
public:
    static constexpr std::size_t kCapacity = 22;

    bool add(const SocketAddr& node);
    void mark_dead(const SocketAddr& node);
    void clear() { entries_.clear(); }

    const std::vector<AntEntry>& entries() const { return entries_; }
    std::vector<SocketAddr> live() const;
    bool contains(const SocketAddr& node) const;
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

private:
    std::vector<AntEntry> entries_;
};

struct NatDetermination {
    NatKind detected = NatKind::Public;
    SimTime decided_at{0};
    Duration refresh_period{3'600'000};

    bool operator==(const NatDetermination&) const = default;
};

// Pure classification of a probe wave. No replies while probes went out and
// TCP worked means UDP is filtered; a reply reporting an address other than
// the local one means translation.
NatDetermination detect_nat(std::span<const ExternalAddressReport> replies, const SocketAddr& local,
                            std::size_t probes_sent, bool tcp_ok, SimTime now,
                            Duration refresh_period = Duration{3'600'000});

struct UserIdentity {
    std::string user_name;
    std::string password_token;
    SimTime last_login{0};
};

struct LoginRecord {
    bool ok = false;
    bool failover = false;
    bool first_login = false;
    std::string reason;
    SimTime started{0};
    SimTime finished{0};
    NodeId super_node;
    std::uint64_t bytes = 0;  // sent + received by the client during the attempt
    int cycles = 0;

    Duration duration() const { return finished - started; }
};

// An ordinary host: version check, login ladder, authentication, presence
// advertisement, NAT detection, keep-alives and super-node failover.
class ClientNode {
public:
    ClientNode(World& world, NodeId id, std::uint16_t port);

    const NodeId& id() const { return id_; }
    std::uint16_t port() const { return port_; }
    ClientState state() const { return state_; }

    void set_identity(UserIdentity identity) { identity_ = std::move(identity); }
    const UserIdentity& identity() const { return identity_; }

    // Sends the version check; the request body carries "installed" on the
    // first run and "getlatestversion" afterwards.
    Message startup_check();
    bool first_run() const { return first_run_; }

    // Starts the login ladder. Uses the bootstrap list when the host cache is empty.
    void login();
    void logout();
    // Process death: everything stops without any goodbye traffic.
    void crash();
    void keepalive_tick();
    void failover();

    HostCache& host_cache() { return hc_; }
    const HostCache& host_cache() const { return hc_; }
    const AlternateNodeTable& alternate_nodes() const { return ant_; }
    AlternateNodeTable& alternate_nodes() { return ant_; }
    const std::optional<NatDetermination>& nat() const { return nat_; }
    void set_nat(NatDetermination d) { nat_ = d; }
    const std::optional<NodeId>& super_node() const { return sn_; }
    std::optional<ConnectionId> sn_connection() const { return sn_conn_; }
    SocketAddr local_address() const;

    const std::vector<LoginRecord>& logins() const { return logins_; }
    std::size_t keepalives_sent() const { return keepalives_; }

    // Runs `fn(true)` the next time the client reaches Online, or `fn(false)`
    // when the pending login fails or the client goes offline first.
    void when_online(std::function<void(bool)> fn) { on_online_.push_back(std::move(fn)); }

    std::set<std::string>& buddies() { return buddies_; }
    bool silent = false;

private:
    struct Reply {
        SocketAddr from;
        ExternalAddressReport report;
        std::optional<SocketAddr> redirect;
    };

    struct Attempt {
        bool failover = false;
        bool first_login = false;
        std::vector<SocketAddr> candidates;
        std::size_t wave_start = 0;
        int cycle = 1;
        std::vector<Reply> wave_replies;
        std::vector<ExternalAddressReport> reports;
        std::size_t probes_sent = 0;
        std::size_t tcp_index = 0;
        SimTime started{0};
        std::uint64_t bytes_at_start = 0;
        bool tcp_fallback_used = false;
    };

    enum class ProbePurpose : std::uint8_t { Login, Advert, Refresh };

    std::uint64_t bytes_now() const;
    void begin_attempt(bool failover);
    void run_cycle();
    void probe_wave();
    void wave_closed(std::uint64_t epoch);
    void connect_responders(std::vector<SocketAddr> targets, std::size_t idx);
    void tcp_ladder_next();
    void cycle_failed();
    void connected(ConnectionId conn, const SocketAddr& sn_addr);
    void authenticate(const SocketAddr& login_server);
    void advertise();
    void advert_closed(std::uint64_t epoch);
    void finish_login(bool ok, std::string reason);
    void schedule_keepalive();
    void schedule_nat_refresh();
    void nat_refresh();
    void refresh_closed(std::uint64_t epoch, std::size_t probes);
    void send_probe(const SocketAddr& to, std::uint64_t epoch, ProbePurpose purpose);
    Message make(MessageKind kind, Transport t) const;
    void drop_sn_connection();
    void flush_waiters(bool online);

    World& world_;
    NodeId id_;
    std::uint16_t port_;
    ClientState state_ = ClientState::Offline;
    UserIdentity identity_;
    bool first_run_ = true;
    HostCache hc_;
    AlternateNodeTable ant_;
    std::optional<NatDetermination> nat_;
    std::optional<NodeId> sn_;
    std::optional<SocketAddr> sn_addr_;
    std::optional<ConnectionId> sn_conn_;
    std::optional<Attempt> attempt_;
    std::vector<SocketAddr> advert_replies_;
    std::vector<ExternalAddressReport> refresh_reports_;
    std::uint64_t refresh_epoch_ = 0;
    std::uint64_t epoch_ = 0;  // bumped to invalidate outstanding timers
    std::vector<LoginRecord> logins_;
    std::size_t keepalives_ = 0;
    std::vector<std::function<void(bool)>> on_online_;
    std::set<std::string> buddies_;
};

// Client snapshot: state, NAT determination, ANT entries and a reference to
// the host cache snapshot file.
struct ClientSnapshot {
    ClientState state = ClientState::Offline;
    std::optional<NatDetermination> nat;
    std::vector<AntEntry> ant;
    std::string host_cache_ref;

    bool operator==(const ClientSnapshot&) const = default;
};

ClientSnapshot capture(const ClientNode& client, std::string host_cache_ref);
std::string serialize(const ClientSnapshot& snap);
// Throws std::invalid_argument with the line number on malformed input.
ClientSnapshot parse_client_snapshot(std::string_view text);

}  // namespace skysim
