#pragma once

#include "skysim/net_types.hpp"
#include "skysim/wire.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace skysim {

class World;

// ------------------------------------------------------------ admission

struct Capability {
    std::uint32_t cpu_score = 1;
    std::uint64_t uplink_cap = 0;  // bytes/s, 0 when unknown
};

struct CapabilityWeights {
    double cpu = 1.0;
    double uplink_per_kb = 1.0;
};

// cpu_score * w_cpu + uplink_cap / 1000 * w_uplink
double capability_score(const Capability& c, const CapabilityWeights& w = {});

struct AdmissionPolicy {
    double threshold = 0.0;  // admits every public node by default
    CapabilityWeights weights;
};

// Only public nodes may serve as super nodes; a client cannot opt out.
bool sn_admission(NatKind kind, const Capability& c, const AdmissionPolicy& policy = {});

// ------------------------------------------------------------ login server

struct UserLocation {
    NodeId node;
    NatKind nat = NatKind::Public;
    NodeId super_node;

    bool operator==(const UserLocation&) const = default;
};

struct UserRecord {
    std::string user_name;
    std::string password_token;
    SimTime last_login{0};
    // Last instant the user was known online; updated on login and logout.
    SimTime last_online{0};
    bool ever_logged_in = false;
    std::vector<UserLocation> locations;       // one per concurrent login
    std::vector<UserLocation> last_locations;  // kept after logout
};

inline constexpr Duration kFindableWindow = std::chrono::hours(72);

// Online users are always findable; offline ones for 72 h after they were last seen.
bool findable_window(const UserRecord& record, SimTime now);

enum class AuthStatus : std::uint8_t { Ok, BadCredentials, NameTaken };

std::string_view to_string(AuthStatus s);

// Central authority: credentials, name uniqueness, last-login records and
// current locations. Also holds the per-super-node search caches.
class Directory {
public:
    AuthStatus register_user(const std::string& name, const std::string& token);
    AuthStatus authenticate(const std::string& name, const std::string& token, const UserLocation& at, SimTime now);
    void logout(const std::string& name, const NodeId& node, SimTime now);
    void move_location(const std::string& name, const NodeId& node, const NodeId& new_super_node);

    const UserRecord* find(const std::string& name) const;
    std::optional<std::string> user_at(const NodeId& node) const;
    std::vector<std::string> user_names() const;

    struct CacheEntry {
        std::vector<NodeId> locations;
        SimTime cached_at{0};
    };
    void cache_put(const NodeId& super_node, const std::string& user, std::vector<NodeId> locations, SimTime now);
    // Fresh entry whose cached locations are all still live logins of the user.
    std::optional<CacheEntry> cache_get(const NodeId& super_node, const std::string& user, SimTime now,
                                        Duration ttl) const;

private:
    std::map<std::string, UserRecord> users_;
    std::map<NodeId, std::map<std::string, CacheEntry>> caches_;
};

// ------------------------------------------------------------ search

struct SearchOutcome {
    std::string target;
    NodeId origin;
    bool found = false;
    std::vector<NodeId> locations;
    std::size_t contacted = 0;  // distinct non-SN nodes the origin queried itself
    std::size_t rounds = 0;
    Duration duration{0};
    bool cached = false;
    std::vector<std::size_t> round_sizes;  // nodes queried per round
    std::string error;
};

inline constexpr std::array<std::size_t, 3> kSearchRoundSizes{4, 8, 16};

struct SearchConfig {
    Duration round_wait{3000};
    Duration cache_ttl{3'600'000};
    std::size_t index_replicas = 3;
};

// Super-node assisted user search. Public and NAT'd origins query the
// candidates their SN hands out round by round; a UDP-blocked origin lets its
// SN run the rounds. Found results are cached at the SN on the reply path.
class SearchService {
public:
    using Callback = std::function<void(const SearchOutcome&)>;

    SearchService(World& world, SearchConfig cfg);

    void search(const NodeId& origin, const std::string& target, Callback done);

    // Live super nodes other than `sn`, nearest first, alternating successor
    // and predecessor around the ring of node ids.
    std::vector<NodeId> ring_from(const NodeId& sn) const;
    // Super nodes holding the index entry for `user` (empty when not findable).
    std::set<NodeId> index_holders(const std::string& user) const;

    const std::vector<SearchOutcome>& outcomes() const { return outcomes_; }
    const SearchConfig& config() const { return cfg_; }

private:
    struct Run;

    void start(std::shared_ptr<Run> run);
    void sn_receive_query(std::shared_ptr<Run> run);
    void sn_hand_out_round(std::shared_ptr<Run> run);
    void origin_query_round(std::shared_ptr<Run> run, std::vector<NodeId> candidates);
    void sn_query_round(std::shared_ptr<Run> run, std::vector<NodeId> candidates);
    void answer_query(std::shared_ptr<Run> run, const NodeId& candidate, const Message& query);
    void sn_round_closed(std::shared_ptr<Run> run);
    void round_closed(std::shared_ptr<Run> run);
    void finish(std::shared_ptr<Run> run);
    std::vector<NodeId> next_round(Run& run);

    World& world_;
    SearchConfig cfg_;
    std::vector<SearchOutcome> outcomes_;
    std::uint64_t next_id_ = 1;
};

}  // namespace skysim
