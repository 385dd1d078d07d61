#include "skysim/directory.hpp"

#include "skysim/world.hpp"

#include <algorithm>
#include <stdexcept>

namespace skysim {

double capability_score(const Capability& c, const CapabilityWeights& w)
{
    return static_cast<double>(c.cpu_score) * w.cpu + static_cast<double>(c.uplink_cap) / 1000.0 * w.uplink_per_kb;
}

bool sn_admission(NatKind kind, const Capability& c, const AdmissionPolicy& policy)
{
    return kind == NatKind::Public && capability_score(c, policy.weights) >= policy.threshold;
}

bool findable_window(const UserRecord& record, SimTime now)
{
    if (!record.locations.empty()) return true;
    return record.ever_logged_in && now - record.last_online <= kFindableWindow;
}

std::string_view to_string(AuthStatus s)
{
    switch (s) {
    case AuthStatus::Ok: return "ok";
    case AuthStatus::BadCredentials: return "bad-credentials";
    case AuthStatus::NameTaken: return "name-taken";
    }
    return "?";
}

// ---------------------------------------------------------------- Directory

AuthStatus Directory::register_user(const std::string& name, const std::string& token)
{
    if (name.empty()) throw std::invalid_argument("user name must not be empty");
    if (users_.count(name)) return AuthStatus::NameTaken;
    UserRecord r;
    r.user_name = name;
    r.password_token = token;
    users_.emplace(name, std::move(r));
    return AuthStatus::Ok;
}

AuthStatus Directory::authenticate(const std::string& name, const std::string& token, const UserLocation& at,
                                   SimTime now)
{
    auto it = users_.find(name);
    if (it == users_.end() || it->second.password_token != token) return AuthStatus::BadCredentials;
    auto& r = it->second;
    r.last_login = now;
    r.last_online = now;
    r.ever_logged_in = true;
    std::erase_if(r.locations, [&](const UserLocation& l) { return l.node == at.node; });
    r.locations.push_back(at);
    return AuthStatus::Ok;
}

void Directory::logout(const std::string& name, const NodeId& node, SimTime now)
{
    auto it = users_.find(name);
    if (it == users_.end()) return;
    auto& r = it->second;
    auto loc = std::find_if(r.locations.begin(), r.locations.end(), [&](const UserLocation& l) { return l.node == node; });
    if (loc == r.locations.end()) return;
    std::erase_if(r.last_locations, [&](const UserLocation& l) { return l.node == node; });
    r.last_locations.push_back(*loc);
    r.locations.erase(loc);
    r.last_online = now;
}

void Directory::move_location(const std::string& name, const NodeId& node, const NodeId& new_super_node)
{
    auto it = users_.find(name);
    if (it == users_.end()) return;
    for (auto& l : it->second.locations)
        if (l.node == node) l.super_node = new_super_node;
}

const UserRecord* Directory::find(const std::string& name) const
{
    auto it = users_.find(name);
    return it == users_.end() ? nullptr : &it->second;
}

std::optional<std::string> Directory::user_at(const NodeId& node) const
{
    for (const auto& [name, r] : users_)
        for (const auto& l : r.locations)
            if (l.node == node) return name;
    return std::nullopt;
}

std::vector<std::string> Directory::user_names() const
{
    std::vector<std::string> out;
    for (const auto& [name, _] : users_) out.push_back(name);
    return out;
}

void Directory::cache_put(const NodeId& super_node, const std::string& user, std::vector<NodeId> locations, SimTime now)
{
    caches_[super_node][user] = CacheEntry{std::move(locations), now};
}

std::optional<Directory::CacheEntry> Directory::cache_get(const NodeId& super_node, const std::string& user,
                                                          SimTime now, Duration ttl) const
{
    auto sn = caches_.find(super_node);
    if (sn == caches_.end()) return std::nullopt;
    auto it = sn->second.find(user);
    if (it == sn->second.end()) return std::nullopt;
    const auto& e = it->second;
    if (now - e.cached_at > ttl || e.locations.empty()) return std::nullopt;
    const UserRecord* r = find(user);
    if (!r) return std::nullopt;
    for (const auto& node : e.locations) {
        bool live = std::any_of(r->locations.begin(), r->locations.end(), [&](const UserLocation& l) { return l.node == node; });
        if (!live) return std::nullopt;
    }
    return e;
}

// ---------------------------------------------------------------- SearchService

struct SearchService::Run {
    std::uint64_t id = 0;
    NodeId origin;
    NodeId sn;
    ConnectionId conn = 0;
    std::string target;
    SimTime started{0};
    bool firewalled = false;
    bool public_origin = false;
    bool retried = false;
    bool finished = false;
    std::vector<NodeId> ring;
    std::set<NodeId> ant;  // origin's alternate nodes, excluded from round one
    std::set<NodeId> queried;
    std::vector<NodeId> found;
    SearchOutcome out;
    Callback done;
};

SearchService::SearchService(World& world, SearchConfig cfg) : world_(world), cfg_(cfg) {}

std::vector<NodeId> SearchService::ring_from(const NodeId& sn) const
{
    std::vector<NodeId> ring = world_.live_super_nodes();
    std::erase(ring, sn);
    std::vector<NodeId> out;
    if (ring.empty()) return out;
    // First entry strictly after `sn` in id order is the successor.
    auto succ = static_cast<std::size_t>(std::upper_bound(ring.begin(), ring.end(), sn) - ring.begin());
    std::size_t n = ring.size();
    for (std::size_t k = 0; out.size() < n; ++k) {
        out.push_back(ring[(succ + k) % n]);
        if (out.size() == n) break;
        out.push_back(ring[(succ + n - 1 - k) % n]);
    }
    std::vector<NodeId> unique;
    for (auto& id : out)
        if (std::find(unique.begin(), unique.end(), id) == unique.end()) unique.push_back(id);
    return unique;
}

std::set<NodeId> SearchService::index_holders(const std::string& user) const
{
    std::set<NodeId> holders;
    const UserRecord* r = world_.directory().find(user);
    if (!r || !findable_window(*r, world_.now())) return holders;
    const auto& locs = r->locations.empty() ? r->last_locations : r->locations;
    std::vector<NodeId> ring = world_.live_super_nodes();
    for (const auto& l : locs) {
        if (l.super_node.empty()) continue;
        if (world_.net().is_up(l.super_node)) holders.insert(l.super_node);
        if (ring.empty()) continue;
        auto pos = static_cast<std::size_t>(std::upper_bound(ring.begin(), ring.end(), l.super_node) - ring.begin());
        for (std::size_t k = 0; k < cfg_.index_replicas && k < ring.size(); ++k)
            holders.insert(ring[(pos + k) % ring.size()]);
    }
    return holders;
}

void SearchService::search(const NodeId& origin, const std::string& target, Callback done)
{
    auto run = std::make_shared<Run>();
    run->id = next_id_++;
    run->origin = origin;
    run->target = target;
    run->started = world_.now();
    run->done = std::move(done);
    run->out.target = target;
    run->out.origin = origin;
    start(run);
}

void SearchService::start(std::shared_ptr<Run> run)
{
    auto* c = world_.find_client(run->origin);
    if (!c || c->state() != ClientState::Online || !c->sn_connection() || !c->super_node()) {
        run->out.error = "origin-offline";
        finish(run);
        return;
    }
    run->sn = *c->super_node();
    run->conn = *c->sn_connection();
    NatKind kind = c->nat() ? c->nat()->detected : world_.net().node(run->origin).nat.kind;
    run->firewalled = kind == NatKind::NatUdpBlockedFirewall;
    run->public_origin = kind == NatKind::Public;
    run->ant.clear();
    for (const auto& a : c->alternate_nodes().entries())
        if (auto id = world_.node_at(a.node)) run->ant.insert(*id);

    Message q = world_.make(MessageKind::SearchQuery, run->origin, c->port(), Transport::Tcp);
    q.body.user = run->target;
    q.correlation = run->id;
    auto out = world_.net().send_tcp(run->conn, run->origin, q, [this, run](const Message&) { sn_receive_query(run); });
    if (out) return;
    if (run->retried) {
        run->out.error = "sn-unreachable";
        finish(run);
        return;
    }
    run->retried = true;
    c->when_online([this, run](bool online) {
        if (online) {
            start(run);
        } else {
            run->out.error = "sn-unreachable";
            finish(run);
        }
    });
    c->failover();
}

void SearchService::sn_receive_query(std::shared_ptr<Run> run)
{
    if (auto hit = world_.directory().cache_get(run->sn, run->target, world_.now(), cfg_.cache_ttl)) {
        run->out.cached = true;
        run->found = hit->locations;
        Message res = world_.make(MessageKind::SearchResult, run->sn, world_.info(run->sn).port, Transport::Tcp);
        res.body.user = run->target;
        res.body.locations = hit->locations;
        res.correlation = run->id;
        auto out = world_.net().send_tcp(run->conn, run->sn, res, [this, run](const Message&) { finish(run); });
        if (!out) finish(run);
        return;
    }
    run->ring = ring_from(run->sn);
    if (run->firewalled)
        sn_query_round(run, next_round(*run));
    else
        sn_hand_out_round(run);
}

std::vector<NodeId> SearchService::next_round(Run& run)
{
    std::vector<NodeId> picked;
    if (run.out.rounds >= kSearchRoundSizes.size()) return picked;
    std::size_t want = kSearchRoundSizes[run.out.rounds];
    bool first = run.out.rounds == 0;
    for (const auto& id : run.ring) {
        if (picked.size() == want) break;
        if (run.queried.count(id)) continue;
        if (first && run.public_origin && run.ant.count(id)) continue;
        picked.push_back(id);
    }
    ++run.out.rounds;
    run.out.round_sizes.push_back(picked.size());
    return picked;
}

void SearchService::sn_hand_out_round(std::shared_ptr<Run> run)
{
    auto candidates = next_round(*run);
    auto& net = world_.net();
    std::uint16_t sn_port = world_.info(run->sn).port;
    if (candidates.empty()) {
        Message miss = world_.make(MessageKind::SearchMiss, run->sn, sn_port, Transport::Tcp);
        miss.correlation = run->id;
        if (!net.send_tcp(run->conn, run->sn, miss, [this, run](const Message&) { finish(run); })) finish(run);
        return;
    }
    Message m = world_.make(MessageKind::SearchCandidates, run->sn, sn_port, Transport::Tcp);
    m.correlation = run->id;
    for (const auto& id : candidates) m.body.nodes.push_back(world_.contact_address(id));
    auto out = net.send_tcp(run->conn, run->sn, m,
                            [this, run, candidates](const Message&) { origin_query_round(run, candidates); });
    if (!out) {
        run->out.error = "sn-unreachable";
        finish(run);
    }
}

void SearchService::origin_query_round(std::shared_ptr<Run> run, std::vector<NodeId> candidates)
{
    std::uint16_t port = world_.info(run->origin).port;
    for (const auto& cand : candidates) {
        Message q = world_.make(MessageKind::SearchQuery, run->origin, port, Transport::Udp);
        q.body.user = run->target;
        q.correlation = run->id;
        if (run->queried.insert(cand).second) ++run->out.contacted;
        world_.net().send_udp(q, world_.contact_address(cand),
                              [this, run, cand](const Message& m) { answer_query(run, cand, m); });
    }
    world_.scheduler().schedule_after(cfg_.round_wait, [this, run] { round_closed(run); });
}

void SearchService::sn_query_round(std::shared_ptr<Run> run, std::vector<NodeId> candidates)
{
    std::uint16_t port = world_.info(run->sn).port;
    for (const auto& cand : candidates) {
        Message q = world_.make(MessageKind::SearchQuery, run->sn, port, Transport::Udp);
        q.body.user = run->target;
        q.correlation = run->id;
        run->queried.insert(cand);
        world_.net().send_udp(q, world_.contact_address(cand),
                              [this, run, cand](const Message& m) { answer_query(run, cand, m); });
    }
    world_.scheduler().schedule_after(cfg_.round_wait, [this, run] { sn_round_closed(run); });
}

void SearchService::answer_query(std::shared_ptr<Run> run, const NodeId& candidate, const Message& query)
{
    auto holders = index_holders(run->target);
    bool hit = holders.count(candidate) != 0;
    Message reply = world_.make(hit ? MessageKind::SearchResult : MessageKind::SearchMiss, candidate,
                                world_.info(candidate).port, Transport::Udp);
    reply.body.user = run->target;
    reply.correlation = run->id;
    if (hit) {
        const UserRecord* r = world_.directory().find(run->target);
        const auto& locs = r->locations.empty() ? r->last_locations : r->locations;
        for (const auto& l : locs) reply.body.locations.push_back(l.node);
    }
    world_.net().send_udp(reply, query.observed_from, [run](const Message& m) {
        if (m.kind != MessageKind::SearchResult) return;
        for (const auto& n : m.body.locations)
            if (std::find(run->found.begin(), run->found.end(), n) == run->found.end()) run->found.push_back(n);
    });
}

void SearchService::round_closed(std::shared_ptr<Run> run)
{
    if (run->finished) return;
    auto& net = world_.net();
    std::uint16_t port = world_.info(run->origin).port;
    if (!run->found.empty()) {
        // Report the hit so the super node can cache it for later searches.
        Message res = world_.make(MessageKind::SearchResult, run->origin, port, Transport::Tcp);
        res.body.user = run->target;
        res.body.locations = run->found;
        res.correlation = run->id;
        NodeId sn = run->sn;
        std::string target = run->target;
        std::vector<NodeId> found = run->found;
        net.send_tcp(run->conn, run->origin, res,
                     [this, sn, target, found](const Message&) { world_.directory().cache_put(sn, target, found, world_.now()); });
        finish(run);
        return;
    }
    if (run->out.rounds >= kSearchRoundSizes.size()) {
        finish(run);
        return;
    }
    Message miss = world_.make(MessageKind::SearchMiss, run->origin, port, Transport::Tcp);
    miss.body.user = run->target;
    miss.correlation = run->id;
    auto out = net.send_tcp(run->conn, run->origin, miss, [this, run](const Message&) { sn_hand_out_round(run); });
    if (!out) {
        run->out.error = "sn-unreachable";
        finish(run);
    }
}

void SearchService::sn_round_closed(std::shared_ptr<Run> run)
{
    if (run->finished) return;
    bool more = run->found.empty() && run->out.rounds < kSearchRoundSizes.size();
    if (more) {
        auto next = next_round(*run);
        if (!next.empty()) {
            sn_query_round(run, std::move(next));
            return;
        }
    }
    if (!run->found.empty()) world_.directory().cache_put(run->sn, run->target, run->found, world_.now());
    Message res = world_.make(run->found.empty() ? MessageKind::SearchMiss : MessageKind::SearchResult, run->sn,
                              world_.info(run->sn).port, Transport::Tcp);
    res.body.user = run->target;
    res.body.locations = run->found;
    res.correlation = run->id;
    auto out = world_.net().send_tcp(run->conn, run->sn, res, [this, run](const Message&) { finish(run); });
    if (!out) {
        run->out.error = "sn-unreachable";
        finish(run);
    }
}

void SearchService::finish(std::shared_ptr<Run> run)
{
    if (run->finished) return;
    run->finished = true;
    run->out.found = !run->found.empty();
    run->out.locations = run->found;
    run->out.duration = world_.now() - run->started;
    outcomes_.push_back(run->out);
    if (run->done) run->done(run->out);
}

}  // namespace skysim
