#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace skysim;
using namespace skysim::testing;
using namespace std::chrono_literals;

namespace {

std::string two_users(std::uint64_t seed, const std::string& origin_nat = "public", std::size_t peers = 40)
{
    std::string ext = origin_nat == "public" ? "" : " ext=130.9.0.1";
    std::string addr = origin_nat == "public" ? "130.1.0.10" : "192.168.1.10";
    return base_topology(seed, peers) + "node alice addr=" + addr + " nat=" + origin_nat + ext +
           " port=1100\nnode bob addr=130.1.0.11 port=1200\nnode carol addr=130.1.0.12 port=1300\n"
           "user alice token=a node alice\nuser bob token=b node bob\nuser carol token=c node carol\n";
}

struct Searcher {
    std::unique_ptr<World> w;

    explicit Searcher(const std::string& text) : w(world_from(text))
    {
        for (auto* c : w->clients()) c->login();
        run_to(*w, 40'000);
    }

    SearchOutcome find(const NodeId& origin, const std::string& target)
    {
        std::optional<SearchOutcome> got;
        w->search().search(origin, target, [&](const SearchOutcome& o) { got = o; });
        run_to(*w, w->now().count() + 60'000);
        REQUIRE(got);
        return *got;
    }
};

}  // namespace

TEST_CASE("registration and authentication")
{
    Directory d;
    CHECK(d.register_user("alice", "pw") == AuthStatus::Ok);
    CHECK(d.register_user("alice", "other") == AuthStatus::NameTaken);
    UserLocation at{"n1", NatKind::Public, "sn001"};
    CHECK(d.authenticate("alice", "nope", at, SimTime{0}) == AuthStatus::BadCredentials);
    CHECK(d.authenticate("nobody", "pw", at, SimTime{0}) == AuthStatus::BadCredentials);
    CHECK(d.authenticate("alice", "pw", at, SimTime{10}) == AuthStatus::Ok);
    CHECK(d.user_at("n1") == "alice");
    CHECK(to_string(AuthStatus::NameTaken) == "name-taken");
}

TEST_CASE("findable for 72 hours after logout")
{
    Directory d;
    d.register_user("alice", "pw");
    const UserRecord& r = *d.find("alice");
    CHECK_FALSE(findable_window(r, SimTime{0}));

    d.authenticate("alice", "pw", UserLocation{"n1", NatKind::Public, "sn001"}, SimTime{0});
    CHECK(findable_window(r, SimTime{std::chrono::milliseconds(std::chrono::hours(1000)).count()}));

    SimTime out{5000};
    d.logout("alice", "n1", out);
    CHECK(findable_window(r, out + std::chrono::hours(71)));
    CHECK(findable_window(r, out + std::chrono::hours(72)));
    CHECK_FALSE(findable_window(r, out + std::chrono::hours(73)));
}

TEST_CASE("only public nodes are admitted as super nodes")
{
    Capability strong{100, 1'000'000};
    CHECK(sn_admission(NatKind::Public, strong));
    CHECK_FALSE(sn_admission(NatKind::PortRestrictedNat, strong));
    CHECK_FALSE(sn_admission(NatKind::NatUdpBlockedFirewall, strong));
    AdmissionPolicy picky{50.0, {}};
    CHECK_FALSE(sn_admission(NatKind::Public, Capability{10, 0}, picky));
    CHECK(capability_score(Capability{3, 2000}) == doctest::Approx(5.0));
}

TEST_CASE("ring order alternates successor and predecessor")
{
    auto w = world_from(base_topology(1, 10));
    auto r = w->search().ring_from("sn005");
    CHECK(r == std::vector<NodeId>{"sn006", "sn004", "sn007", "sn003", "sn008", "sn002", "sn009", "sn001", "sn010"});
    auto wrap = w->search().ring_from("sn010");
    CHECK(wrap.front() == "sn001");
    CHECK(wrap[1] == "sn009");
}

TEST_CASE("miss contacts 4 then 8 then 16 nodes")
{
    const std::vector<std::size_t> schedule{4, 8, 16};
    for (std::uint64_t seed : {1, 2, 3}) {
        Searcher s(two_users(seed));
        auto o = s.find("alice", "nobody");
        CHECK_FALSE(o.found);
        CHECK(o.round_sizes == schedule);
        CHECK(o.contacted == std::accumulate(schedule.begin(), schedule.end(), std::size_t{0}));
    }
}

TEST_CASE("a UDP-blocked origin leaves the rounds to its super node")
{
    Searcher s(two_users(4, "firewall"));
    REQUIRE(s.w->client("alice").state() == ClientState::Online);
    auto o = s.find("alice", "bob");
    CHECK(o.found);
    CHECK(o.contacted == 0);
    CHECK(s.find("alice", "nobody").contacted == 0);
}

TEST_CASE("a hit in the first round takes three to four seconds")
{
    std::size_t checked = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Searcher s(two_users(seed));
        auto o = s.find("alice", "bob");
        REQUIRE(o.found);
        CHECK(o.locations == std::vector<NodeId>{"bob"});
        if (o.rounds != 1) continue;
        ++checked;
        CHECK(o.contacted <= 4);
        CHECK(o.duration >= 3000ms);
        CHECK(o.duration <= 4000ms);
    }
    CHECK(checked > 0);
}

TEST_CASE("the super node cache answers repeat searches")
{
    Searcher s(two_users(7));
    auto first = s.find("alice", "bob");
    REQUIRE(first.found);
    auto second = s.find("alice", "bob");
    CHECK(second.cached);
    CHECK(second.contacted == 0);
    CHECK(second.duration < first.duration);
}

TEST_CASE("the cache lives at the super node, not the client")
{
    // carol's host cache points at alice's super node, so both share it.
    Searcher s(two_users(8));
    auto sn = *s.w->client("alice").super_node();
    REQUIRE(s.find("alice", "bob").found);
    auto& carol = s.w->client("carol");
    carol.logout();
    s.w->client("carol").host_cache() = HostCache{};
    s.w->client("carol").host_cache().upsert(HostCacheEntry{s.w->contact_address(sn), s.w->now()});
    carol.login();
    run_to(*s.w, s.w->now().count() + 40'000);
    REQUIRE(carol.super_node() == sn);
    auto o = s.find("carol", "bob");
    CHECK(o.cached);
    CHECK(o.contacted == 0);
}

TEST_CASE("expired or stale cache entries fall through to a full search")
{
    SUBCASE("ttl")
    {
        Searcher s(two_users(9) + "timer cache_ttl=10000\n");
        REQUIRE(s.find("alice", "bob").found);
        auto again = s.find("alice", "bob");  // 60 s later
        CHECK_FALSE(again.cached);
        CHECK(again.contacted > 0);
    }
    SUBCASE("target logged out")
    {
        Searcher s(two_users(9));
        REQUIRE(s.find("alice", "bob").found);
        s.w->client("bob").logout();
        auto again = s.find("alice", "bob");
        CHECK_FALSE(again.cached);
    }
}

TEST_CASE("index holders are the user's super node and its ring successors")
{
    Searcher s(two_users(10));
    auto sn = *s.w->client("bob").super_node();
    auto holders = s.w->search().index_holders("bob");
    CHECK(holders.count(sn));
    CHECK(holders.size() == 1 + s.w->search().config().index_replicas);
    CHECK(s.w->search().index_holders("nobody").empty());
}
