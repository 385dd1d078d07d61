#include "support.hpp"

#include <doctest.h>

#include <algorithm>

using namespace skysim;
using namespace skysim::testing;
using namespace std::chrono_literals;

namespace {

constexpr std::array<NatKind, 3> kKinds{NatKind::Public, NatKind::PortRestrictedNat, NatKind::NatUdpBlockedFirewall};

std::string node_line(const std::string& id, NatKind k, int n)
{
    std::string port = " port=" + std::to_string(1100 + n * 100);
    switch (k) {
    case NatKind::Public: return "node " + id + " addr=130.1.0." + std::to_string(10 + n) + port + "\n";
    case NatKind::PortRestrictedNat:
        return "node " + id + " addr=192.168." + std::to_string(n) + ".10 nat=nat ext=130.9.0." + std::to_string(n) + port + "\n";
    case NatKind::NatUdpBlockedFirewall:
        return "node " + id + " addr=192.168." + std::to_string(n) + ".10 nat=firewall ext=130.9.0." + std::to_string(n) +
               port + "\n";
    }
    return {};
}

std::unique_ptr<World> pair_world(NatKind caller, NatKind callee, std::uint64_t seed = 1, const std::string& extra = {})
{
    auto w = world_from(base_topology(seed) + node_line("alice", caller, 1) + node_line("bob", callee, 2) +
                        "user alice token=a node alice\nuser bob token=b node bob\n" + extra);
    w->client("alice").login();
    w->client("bob").login();
    run_to(*w, 45'000);
    REQUIRE(w->client("alice").state() == ClientState::Online);
    REQUIRE(w->client("bob").state() == ClientState::Online);
    return w;
}

const CallSession& call(World& w, bool buddy = false, std::int64_t settle_ms = 10'000)
{
    auto id = w.calls().place_call("alice", "bob", buddy);
    run_to(w, w.now().count() + settle_ms);
    const auto* s = w.calls().session(id);
    REQUIRE(s);
    return *s;
}

// Written out cell by cell rather than derived from a rule.
CallPath expected_path(NatKind a, NatKind b)
{
    using K = NatKind;
    using P = CallPath;
    static const std::map<std::pair<K, K>, P> table{
        {{K::Public, K::Public}, P::DirectUdp},
        {{K::Public, K::PortRestrictedNat}, P::RelayedUdp},
        {{K::Public, K::NatUdpBlockedFirewall}, P::RelayedTcp},
        {{K::PortRestrictedNat, K::Public}, P::RelayedUdp},
        {{K::PortRestrictedNat, K::PortRestrictedNat}, P::RelayedUdp},
        {{K::PortRestrictedNat, K::NatUdpBlockedFirewall}, P::RelayedTcp},
        {{K::NatUdpBlockedFirewall, K::Public}, P::RelayedTcp},
        {{K::NatUdpBlockedFirewall, K::PortRestrictedNat}, P::RelayedTcp},
        {{K::NatUdpBlockedFirewall, K::NatUdpBlockedFirewall}, P::RelayedTcp},
    };
    return table.at({a, b});
}

std::size_t count_delivered(const World& w, MessageKind kind, const NodeId& to)
{
    std::size_t n = 0;
    for (const auto& e : w.net().trace())
        if (e.type == TraceType::Delivered && e.kind == kind && e.dst.node == to) ++n;
    return n;
}

}  // namespace

TEST_CASE("path matrix defaults")
{
    auto m = PathMatrix::defaults();
    for (auto a : kKinds)
        for (auto b : kKinds) CHECK(m(a, b) == expected_path(a, b));
    CHECK(media_transport(CallPath::RelayedTcp) == Transport::Tcp);
    CHECK(media_transport(CallPath::RelayedUdp) == Transport::Udp);
    CHECK(parse_call_path("RelayedTcp") == CallPath::RelayedTcp);
    CHECK_FALSE(parse_call_path("relayed"));
}

TEST_CASE("answer policy parsing")
{
    auto a = parse_answer_policy("auto:1500");
    REQUIRE(a);
    CHECK(a->mode == AnswerMode::Auto);
    CHECK(a->delay == 1500ms);
    CHECK(parse_answer_policy("manual")->mode == AnswerMode::Manual);
    CHECK(parse_answer_policy("reject")->mode == AnswerMode::Reject);
    CHECK_FALSE(parse_answer_policy("manual:5"));
    CHECK_FALSE(parse_answer_policy("auto:-1"));
    CHECK_FALSE(parse_answer_policy("ring"));
}

TEST_CASE("every pairing of network kinds gets its path")
{
    for (auto a : kKinds)
        for (auto b : kKinds) {
            CAPTURE(to_string(a));
            CAPTURE(to_string(b));
            auto w = pair_world(a, b, 5);
            const auto& s = call(*w);
            CHECK(s.state == CallState::Active);
            CHECK(s.path == expected_path(a, b));
            if (s.path != CallPath::DirectUdp) {
                REQUIRE(s.relays.size() == 1);
                CHECK(w->net().node(s.relays.front()).nat.kind == NatKind::Public);
            }
        }
}

TEST_CASE("public buddies call directly with about 3 kB of signaling")
{
    auto w = pair_world(NatKind::Public, NatKind::Public);
    const auto& s = call(*w, true);
    REQUIRE(s.state == CallState::Active);
    CHECK(s.path == CallPath::DirectUdp);
    CHECK(s.relays.empty());
    CHECK(s.signaling_bytes >= 2700);
    CHECK(s.signaling_bytes <= 3300);
    for (const auto& e : w->net().trace())
        if (e.type == TraceType::Delivered && e.kind == MessageKind::MediaFrame) {
            CHECK(e.bytes == 67);
            CHECK(e.src.transport == Transport::Udp);
        }
}

TEST_CASE("a NAT'd caller goes through one relay for signaling and media")
{
    auto w = pair_world(NatKind::PortRestrictedNat, NatKind::Public, 2);
    const auto& s = call(*w);
    REQUIRE(s.path == CallPath::RelayedUdp);
    REQUIRE(s.relays.size() == 1);
    const auto relay = s.relays.front();
    std::size_t via_relay = 0;
    for (const auto& e : w->net().trace()) {
        if (e.type != TraceType::Delivered || e.kind != MessageKind::MediaFrame) continue;
        CHECK((e.src.node == relay || e.dst.node == relay));
        if (e.dst.node == relay) ++via_relay;
    }
    CHECK(via_relay > 0);
    CHECK(count_delivered(*w, MessageKind::CallInvite, relay) > 0);
}

TEST_CASE("firewalled parties carry 69-byte frames over TCP and receive no UDP")
{
    auto w = pair_world(NatKind::NatUdpBlockedFirewall, NatKind::NatUdpBlockedFirewall, 3);
    const auto& s = call(*w);
    REQUIRE(s.state == CallState::Active);
    CHECK(s.path == CallPath::RelayedTcp);
    std::size_t frames = 0;
    for (const auto& e : w->net().trace())
        if (e.type == TraceType::Delivered && e.kind == MessageKind::MediaFrame) {
            ++frames;
            CHECK(e.bytes == 69);
            CHECK(e.src.transport == Transport::Tcp);
        }
    CHECK(frames > 0);
    CHECK(w->net().counters("alice").udp_received == 0);
    CHECK(w->net().counters("bob").udp_received == 0);
}

TEST_CASE("answering at one location cancels the others")
{
    auto w = build_world(load_scenario("multilogin"));
    for (auto* c : w->clients()) c->login();
    run_to(*w, 10'000);
    auto id = w->calls().place_call("alice", "bob", true);
    run_to(*w, 25'000);
    const auto* s = w->calls().session(id);
    REQUIRE(s);
    CHECK(s->state == CallState::Active);
    CHECK(s->callee == "bob1");
    CHECK(count_delivered(*w, MessageKind::CallCancel, "bob2") == 1);
    CHECK(count_delivered(*w, MessageKind::CallCancel, "bob1") == 0);
}

TEST_CASE("three silent locations end in NoAnswer")
{
    auto w = world_from(base_topology(6) + node_line("alice", NatKind::Public, 1) +
                        "node b1 addr=130.1.0.21 port=1200 answer=manual\n"
                        "node b2 addr=130.1.0.22 port=1300 answer=manual\n"
                        "node b3 addr=130.1.0.23 port=1400 answer=manual\n"
                        "user alice token=a node alice\nuser bob token=b node b1 node b2 node b3\n");
    for (auto* c : w->clients()) c->login();
    run_to(*w, 30'000);
    auto id = w->calls().place_call("alice", "bob", false);
    run_to(*w, 30'000 + 60'000);
    const auto* s = w->calls().session(id);
    REQUIRE(s);
    CHECK(s->legs.size() == 3);
    CHECK(s->state == CallState::Failed);
    CHECK(s->failure == CallFailure::NoAnswer);
}

TEST_CASE("calls from an offline caller fail up front")
{
    auto w = world_from(base_topology() + node_line("alice", NatKind::Public, 1) + node_line("bob", NatKind::Public, 2) +
                        "user alice token=a node alice\nuser bob token=b node bob\n");
    auto id = w->calls().place_call("alice", "bob", true);
    CHECK(w->calls().session(id)->failure == CallFailure::CallerOffline);
}

TEST_CASE("a 30 s hold sends 90 pings each way and keeps the bindings alive")
{
    auto w = pair_world(NatKind::PortRestrictedNat, NatKind::PortRestrictedNat, 4, "binding_ttl 5000\n");
    const auto& s = call(*w);
    REQUIRE(s.state == CallState::Active);
    REQUIRE(s.path == CallPath::RelayedUdp);
    auto held_at = w->now();
    w->calls().hold(s.id, "alice");
    CHECK(s.state == CallState::Held);
    auto id = s.id;
    w->scheduler().schedule(held_at + 30s, [&w, id] { w->calls().resume(id); });
    run_to(*w, (held_at + 30s).count());
    CHECK(s.state == CallState::Active);
    CHECK(s.hold_pings_by_party.at("alice") == 90);
    CHECK(s.hold_pings_by_party.at("bob") == 90);
    CHECK(s.hold_udp_pings == 180);

    auto frames_before = s.streams[0].sent_frames;
    run_to(*w, (held_at + 31s).count());
    CHECK(s.streams[0].sent_frames - frames_before == 70);

    for (const auto& e : w->net().trace())
        if (e.at >= held_at && e.type == TraceType::Blocked) CHECK(e.reason != "no-binding");
}

TEST_CASE("hold on a TCP-relayed call pings over TCP only")
{
    auto w = pair_world(NatKind::NatUdpBlockedFirewall, NatKind::Public, 4);
    const auto& s = call(*w);
    REQUIRE(s.path == CallPath::RelayedTcp);
    auto held_at = w->now();
    w->calls().hold(s.id, "bob");
    run_to(*w, (held_at + 10s).count());
    CHECK(s.hold_udp_pings == 0);
    CHECK(s.hold_tcp_pings > 0);
    for (const auto& e : w->net().trace())
        if (e.kind == MessageKind::HoldPing) CHECK(e.src.transport == Transport::Tcp);
}

TEST_CASE("teardown paths and idempotence")
{
    SUBCASE("direct")
    {
        auto w = pair_world(NatKind::Public, NatKind::Public);
        const auto& s = call(*w, true);
        w->calls().teardown(s.id, "alice");
        run_to(*w, w->now().count() + 1000);
        CHECK(s.state == CallState::TornDown);
        std::size_t n = 0;
        for (const auto& e : w->net().trace())
            if (e.kind == MessageKind::CallTeardown && e.type == TraceType::Delivered) {
                ++n;
                CHECK(e.src.node == "alice");
                CHECK(e.dst.node == "bob");
                CHECK(e.src.transport == Transport::Tcp);
            }
        CHECK(n == 1);
        auto lines = w->net().trace().size();
        w->calls().teardown(s.id, "bob");
        run_to(*w, w->now().count() + 1000);
        CHECK(s.state == CallState::TornDown);
        std::size_t after = 0;
        for (std::size_t i = lines; i < w->net().trace().size(); ++i)
            if (w->net().trace()[i].kind == MessageKind::CallTeardown) ++after;
        CHECK(after == 0);
    }
    SUBCASE("relayed over TCP")
    {
        auto w = pair_world(NatKind::NatUdpBlockedFirewall, NatKind::NatUdpBlockedFirewall, 3);
        const auto& s = call(*w);
        REQUIRE(s.relays.size() == 1);
        w->calls().teardown(s.id, "alice");
        run_to(*w, w->now().count() + 1000);
        bool via_relay = false;
        for (const auto& e : w->net().trace())
            if (e.kind == MessageKind::CallTeardown && e.type == TraceType::Delivered) {
                CHECK(e.src.transport == Transport::Tcp);
                if (e.dst.node == s.relays.front()) via_relay = true;
            }
        CHECK(via_relay);
    }
}

TEST_CASE("relay selection")
{
    auto w = pair_world(NatKind::PortRestrictedNat, NatKind::Public, 8);
    auto& alice = w->client("alice");
    auto& ant = alice.alternate_nodes();
    REQUIRE(ant.size() >= 2);

    SUBCASE("dead entry skipped")
    {
        auto first = ant.entries()[0].node;
        auto second = ant.entries()[1].node;
        ant.mark_dead(first);
        CHECK(w->calls().select_relay("alice") == w->node_at(second));
    }
    SUBCASE("empty table falls back to the super node")
    {
        ant.clear();
        CHECK(w->calls().select_relay("alice") == alice.super_node());
    }
    SUBCASE("relays are public across seeds")
    {
        for (std::uint64_t seed = 10; seed < 16; ++seed) {
            auto v = pair_world(NatKind::PortRestrictedNat, NatKind::PortRestrictedNat, seed);
            auto r = v->calls().select_relay("alice");
            REQUIRE(r);
            CHECK(v->net().node(*r).nat.kind == NatKind::Public);
            CHECK(v->sn_eligible(*r));
        }
    }
}
