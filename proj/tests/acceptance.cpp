// Acceptance checks. Prints one PASS/FAIL line per criterion; exits non-zero
// when any selected criterion fails.

#include "support.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

using namespace skysim;
using namespace skysim::testing;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

// Tolerances.
constexpr double kLoginFastLo = 3000, kLoginFastHi = 7000;
constexpr double kLoginFirewallLo = 30'000, kLoginFirewallHi = 38'000;
constexpr double kTrafficTolerance = 0.30;
constexpr double kPublicLoginBytes = 9000, kNatLoginBytes = 10'000, kFirewallLoginBytes = 8500;
constexpr double kRateLo = 4500, kRateHi = 5500;
constexpr double kConferenceTolerance = 0.10;
constexpr double kHostKbps = 54, kTwoWayKbps = 36;
constexpr int kSeeds = 100;
constexpr auto kLadderWallLimit = 1s;
constexpr auto kSuiteWallLimit = 60s;

const std::vector<std::string> kShipped{"dead_hc",       "login_public",  "login_nat",       "login_firewall",
                                        "setup1_public", "setup2_nat",    "setup3_firewall", "multilogin",
                                        "sn_redirect",   "conference"};

struct Verdict {
    bool pass = true;
    std::ostringstream detail;
    std::string failures;

    void require(bool ok, const std::string& what)
    {
        if (ok) return;
        pass = false;
        failures += " [fail: " + what + "]";
    }
};

bool within(double v, double target, double rel) { return v >= target * (1 - rel) && v <= target * (1 + rel); }

json metrics_of(const std::string& name) { return json::parse(run(load_scenario(name)).metrics); }

std::string node_line(const std::string& id, NatKind k, int n)
{
    std::string port = " port=" + std::to_string(1100 + n * 100);
    std::string octet = std::to_string(n);
    switch (k) {
    case NatKind::Public: return "node " + id + " addr=130.1.0." + std::to_string(10 + n) + port + "\n";
    case NatKind::PortRestrictedNat:
        return "node " + id + " addr=192.168." + octet + ".10 nat=nat ext=130.9.0." + octet + port + "\n";
    case NatKind::NatUdpBlockedFirewall:
        return "node " + id + " addr=192.168." + octet + ".10 nat=firewall ext=130.9.0." + octet + port + "\n";
    }
    return {};
}

std::unique_ptr<World> pair_online(NatKind a, NatKind b, std::uint64_t seed, const std::string& extra = {})
{
    auto w = world_from(base_topology(seed) + extra + node_line("alice", a, 1) + node_line("bob", b, 2) +
                        "user alice token=a node alice\nuser bob token=b node bob\n");
    w->client("alice").login();
    w->client("bob").login();
    run_to(*w, 45'000);
    return w;
}

std::optional<std::uint64_t> active_call(World& w, bool buddy = true)
{
    auto id = w.calls().place_call("alice", "bob", buddy);
    auto deadline = w.now() + 20s;
    while (w.calls().session(id)->state == CallState::Inviting && w.now() < deadline) run_to(w, w.now().count() + 10);
    if (w.calls().session(id)->state != CallState::Active) return std::nullopt;
    return id;
}

SimTime next_second(SimTime t) { return SimTime{(t.count() / 1000 + 1) * 1000}; }

// ------------------------------------------------------------------ criteria

Verdict login_ladder()
{
    Verdict v;
    auto t0 = std::chrono::steady_clock::now();
    auto r = run(load_scenario("dead_hc"));
    auto wall = std::chrono::steady_clock::now() - t0;
    auto d = diff_trace(r.trace, read_text(source_dir() + "/tests/golden/dead_hc.trace"));
    v.require(d.outcome == DiffOutcome::Match, "golden: " + d.describe());

    std::vector<std::string> lines;
    std::istringstream in(r.trace);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    v.require(lines.size() == 21, "expected 20 attempts plus the failure note");
    const char* step[] = {"UdpProbe", "Syn", "Syn", "Syn"};
    const char* port[] = {":33033/udp", ":33033/tcp", ":80/tcp", ":443/tcp"};
    for (std::size_t i = 0; i + 1 < lines.size() && i < 20; ++i)
        v.require(lines[i].find(step[i % 4]) != std::string::npos && lines[i].find(port[i % 4]) != std::string::npos,
                  "ladder order at line " + std::to_string(i + 1));
    if (!lines.empty())
        v.require(lines.back().find("state LoginFailed reason=all-cycles-exhausted") != std::string::npos,
                  "final LoginFailed note");
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(wall).count();
    v.require(wall < kLadderWallLimit, "wall clock");
    v.detail << "5 cycles x 4 attempts, golden match, " << ms << " ms wall";
    return v;
}

Verdict login_timing()
{
    Verdict v;
    for (const auto& [name, lo, hi] : std::vector<std::tuple<std::string, double, double>>{
             {"login_public", kLoginFastLo, kLoginFastHi},
             {"login_nat", kLoginFastLo, kLoginFastHi},
             {"login_firewall", kLoginFirewallLo, kLoginFirewallHi}}) {
        auto m = metrics_of(name);
        double d = m["logins"][0]["duration_ms"].get<double>();
        v.detail << name << "=" << d << "ms ";
        v.require(m["logins"][0]["ok"].get<bool>() && d >= lo && d <= hi, name);
    }
    return v;
}

Verdict login_traffic()
{
    Verdict v;
    for (const auto& [name, target] : std::vector<std::pair<std::string, double>>{
             {"login_public", kPublicLoginBytes}, {"login_nat", kNatLoginBytes}, {"login_firewall", kFirewallLoginBytes}}) {
        double b = metrics_of(name)["logins"][0]["bytes"].get<double>();
        v.detail << name << "=" << b << "B (target " << target << ") ";
        v.require(within(b, target, kTrafficTolerance), name);
    }
    return v;
}

SearchOutcome search_once(World& w, const NodeId& origin, const std::string& target)
{
    std::optional<SearchOutcome> got;
    w.search().search(origin, target, [&](const SearchOutcome& o) { got = o; });
    run_to(w, w.now().count() + 60'000);
    return got.value_or(SearchOutcome{});
}

std::unique_ptr<World> search_world(std::uint64_t seed, NatKind origin)
{
    auto w = world_from(base_topology(seed) + node_line("alice", origin, 1) + node_line("bob", NatKind::Public, 2) +
                        "user alice token=a node alice\nuser bob token=b node bob\n");
    w->client("alice").login();
    w->client("bob").login();
    run_to(*w, 45'000);
    return w;
}

Verdict search_fanout()
{
    Verdict v;
    auto pub = search_world(1, NatKind::Public);
    auto miss = search_once(*pub, "alice", "nobody");
    v.require(miss.round_sizes.size() >= 2 && miss.round_sizes[0] == 4 && miss.round_sizes[1] == 8, "rounds 4 then 8");
    // 4 + 8 + 16 over the three rounds.
    v.require(miss.contacted == 28 && !miss.found, "nonexistent user contacted 28");
    auto fw = search_world(1, NatKind::NatUdpBlockedFirewall);
    auto hit = search_once(*fw, "alice", "bob");
    v.require(hit.found && hit.contacted == 0, "firewalled origin contacted 0");
    v.detail << "rounds=";
    for (auto n : miss.round_sizes) v.detail << n << ",";
    v.detail << " miss contacted=" << miss.contacted << " firewalled contacted=" << hit.contacted;
    return v;
}

Verdict search_caching()
{
    Verdict v;
    int held = 0;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        auto w = search_world(static_cast<std::uint64_t>(seed), NatKind::Public);
        auto first = search_once(*w, "alice", "bob");
        auto second = search_once(*w, "alice", "bob");
        bool ok = first.found && second.found && second.duration < first.duration && second.contacted == 0;
        if (ok) ++held;
        else v.require(false, "seed " + std::to_string(seed));
    }
    v.detail << held << "/" << kSeeds << " seeds";
    return v;
}

Verdict path_matrix()
{
    Verdict v;
    constexpr std::array<NatKind, 3> kinds{NatKind::Public, NatKind::PortRestrictedNat, NatKind::NatUdpBlockedFirewall};
    // Cell by cell: any firewall side goes over TCP, both public go direct, the rest relay over UDP.
    const CallPath expect[3][3] = {{CallPath::DirectUdp, CallPath::RelayedUdp, CallPath::RelayedTcp},
                                   {CallPath::RelayedUdp, CallPath::RelayedUdp, CallPath::RelayedTcp},
                                   {CallPath::RelayedTcp, CallPath::RelayedTcp, CallPath::RelayedTcp}};
    int cells = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            std::string cell = std::string(to_string(kinds[i])) + "/" + std::string(to_string(kinds[j]));
            auto w = pair_online(kinds[i], kinds[j], 5);
            auto id = active_call(*w);
            if (!id) {
                v.require(false, cell + " not active");
                continue;
            }
            run_to(*w, w->now().count() + 3000);
            const auto* s = w->calls().session(*id);
            v.require(s->path == expect[i][j], cell + " path");
            std::uint32_t want = s->path == CallPath::RelayedTcp ? 69 : 67;
            Transport tr = s->path == CallPath::RelayedTcp ? Transport::Tcp : Transport::Udp;
            std::size_t frames = 0;
            for (const auto& e : w->net().trace())
                if (e.type == TraceType::Delivered && e.kind == MessageKind::MediaFrame) {
                    ++frames;
                    if (e.bytes != want || e.src.transport != tr) {
                        v.require(false, cell + " frame size/transport");
                        break;
                    }
                }
            v.require(frames > 0, cell + " media flowed");
            for (std::size_t p = 0; p < 2; ++p)
                if (kinds[p == 0 ? i : j] == NatKind::NatUdpBlockedFirewall)
                    v.require(w->net().counters(p == 0 ? "alice" : "bob").udp_received == 0, cell + " UDP at firewalled node");
            ++cells;
        }
    v.detail << cells << "/9 pairings";
    return v;
}

double capped_rate(std::optional<std::uint64_t> cap)
{
    auto w = pair_online(NatKind::Public, NatKind::Public, 3);
    auto id = active_call(*w);
    if (!id) return -1;
    if (cap)
        for (const char* n : {"alice", "bob"}) w->net().set_caps(n, cap, cap);
    SimTime from = next_second(w->now());
    run_to(*w, (from + 11s).count());
    const auto* s = w->calls().session(*id);
    double worst = 1e18;
    for (const auto& st : s->streams) worst = std::min(worst, quality(st, from, 10s).achieved_rate);
    return worst;
}

Verdict media_rate()
{
    Verdict v;
    double free = capped_rate(std::nullopt);
    double at2000 = capped_rate(2000);
    double at1500 = capped_rate(1500);
    v.require(free >= kRateLo && free <= kRateHi, "uncapped rate band");
    v.require(grade_for(at2000) == Grade::Good, "2000 B/s cap grades Good");
    v.require(grade_for(at1500) == Grade::Unintelligible, "1500 B/s cap grades Unintelligible");
    v.detail << "uncapped=" << free << "B/s cap2000=" << at2000 << "B/s(" << to_string(grade_for(at2000))
             << ") cap1500=" << at1500 << "B/s(" << to_string(grade_for(at1500)) << ")";
    return v;
}

Verdict silence_and_hold()
{
    Verdict v;
    std::array<std::uint64_t, 2> frames{};
    for (int silent = 0; silent < 2; ++silent) {
        auto w = pair_online(NatKind::Public, NatKind::Public, 2);
        w->client("alice").silent = silent == 1;
        auto id = active_call(*w);
        if (!id) {
        v.require(false, "call");
        return v;
    }
        auto start = *w->calls().session(*id)->active_at;
        World* wp = w.get();
        auto call_id = *id;
        w->scheduler().schedule(start + 10s, [wp, call_id] { wp->calls().teardown(call_id, "bob"); });
        run_to(*w, (start + 11s).count());
        const auto* s = w->calls().session(*id);
        frames[silent] = s->streams[0].sent_frames;
        v.require(s->streams[0].sent_frames == s->streams[1].sent_frames, "silent vs talking direction");
    }
    v.require(frames[0] == frames[1], "silent call frame count");

    auto w = pair_online(NatKind::PortRestrictedNat, NatKind::PortRestrictedNat, 4);
    auto id = active_call(*w, false);
    if (!id) {
        v.require(false, "hold call");
        return v;
    }
    auto held = w->now();
    w->calls().hold(*id, "alice");
    World* wp = w.get();
    auto call_id = *id;
    w->scheduler().schedule(held + 30s, [wp, call_id] { wp->calls().resume(call_id); });
    run_to(*w, (held + 30s).count());
    const auto* s = w->calls().session(*id);
    auto a = s->hold_pings_by_party.count("alice") ? s->hold_pings_by_party.at("alice") : 0;
    auto b = s->hold_pings_by_party.count("bob") ? s->hold_pings_by_party.at("bob") : 0;
    v.require(a == 90 && b == 90, "90 hold pings per direction");
    std::size_t expired = 0;
    for (const auto& e : w->net().trace())
        if (e.at >= held && e.type == TraceType::Blocked && e.reason == "no-binding") ++expired;
    // Frames must still get through to both NAT'd parties after resume.
    auto before = s->streams[1].delivered_frames + s->streams[0].delivered_frames;
    run_to(*w, (held + 32s).count());
    auto after = s->streams[1].delivered_frames + s->streams[0].delivered_frames;
    v.require(expired == 0 && after > before, "bindings survive the hold");
    v.detail << "frames talking=" << frames[0] << " silent=" << frames[1] << " hold pings " << a << "/" << b
             << " binding drops=" << expired;
    return v;
}

Verdict keepalive()
{
    Verdict v;
    auto w = world_from(base_topology(1) + node_line("alice", NatKind::Public, 1) + "user alice token=a node alice\n");
    auto& c = w->client("alice");
    c.login();
    run_to(*w, 20'000);
    if (c.state() != ClientState::Online) {
        v.require(false, "online");
        return v;
    }
    auto online = c.logins().front().finished;
    run_to(*w, (online + 600s).count());
    v.require(c.keepalives_sent() == 600 / 60, "floor(600 / 60)");
    v.detail << c.keepalives_sent() << " keep-alives in 600 s";
    return v;
}

std::string trio(bool calibration)
{
    return base_topology(41) + (calibration ? "media_profile calibration\n" : "") +
           "node a addr=130.1.0.10 port=1100 cpu=20\nnode b addr=130.1.0.11 port=1200 cpu=3\n"
           "node c addr=130.1.0.12 port=1300 cpu=2\n"
           "user a token=a node a\nuser b token=b node b\nuser c token=c node c\n";
}

std::unique_ptr<World> trio_online(bool calibration)
{
    auto w = world_from(trio(calibration));
    for (const char* n : {"a", "b", "c"}) w->client(n).login();
    run_to(*w, 45'000);
    return w;
}

Verdict conference()
{
    Verdict v;
    std::vector<NodeId> m{"a", "b", "c"};
    int perms = 0;
    do {
        auto w = trio_online(false);
        auto label = w->conferences().start(m[0], m[1], m[2]);
        run_to(*w, w->now().count() + 5000);
        const auto* c = w->conferences().conference(label);
        v.require(c->host == "a" && c->state == ConferenceState::Active, "host for initiator " + m[0]);
        for (const auto& e : w->net().trace())
            if (e.kind == MessageKind::MediaFrame && e.type == TraceType::Delivered && e.src.node != "a" && e.dst.node != "a") {
                v.require(false, "member-to-member media edge");
                break;
            }
        ++perms;
    } while (std::next_permutation(m.begin(), m.end()));

    auto w = trio_online(true);
    auto label = w->conferences().start("b", "a", "c");
    run_to(*w, w->now().count() + 1000);
    const auto* c = w->conferences().conference(label);
    if (!c->active_at) {
        v.require(false, "calibration conference");
        return v;
    }
    SimTime from = next_second(*c->active_at);
    run_to(*w, (from + 11s).count());
    double host = w->conferences().bandwidth(label, from, 10s).at("a").total_kbps();
    w->conferences().end(label);

    auto id = w->calls().place_call("b", "c", true);
    run_to(*w, w->now().count() + 5000);
    const auto* s = w->calls().session(id);
    double two_way = 0;
    if (s->active_at) {
        SimTime cf = next_second(*s->active_at);
        run_to(*w, (cf + 11s).count());
        for (const auto& st : s->streams) two_way += static_cast<double>(st.delivered_in(cf, 10s)) * 8.0 / 10.0 / 1000.0;
    }
    v.require(within(host, kHostKbps, kConferenceTolerance), "host 54 kb/s");
    v.require(within(two_way, kTwoWayKbps, kConferenceTolerance), "two-way 36 kb/s");
    v.detail << perms << "/6 permutations host=a, host=" << host << "kb/s two-way=" << two_way << "kb/s";
    return v;
}

Verdict multi_login()
{
    Verdict v;
    int held = 0;
    auto base = load_scenario("multilogin");
    for (int seed = 1; seed <= kSeeds; ++seed) {
        RunOptions o;
        o.seed = static_cast<std::uint64_t>(seed);
        auto w = build_world(base, o);
        for (auto* c : w->clients()) c->login();
        run_to(*w, 10'000);
        auto id = w->calls().place_call("alice", "bob", true);
        run_to(*w, 25'000);
        const auto* s = w->calls().session(id);
        std::size_t cancels = 0;
        for (const auto& e : w->net().trace())
            if (e.type == TraceType::Delivered && e.kind == MessageKind::CallCancel && e.dst.node == "bob2") ++cancels;
        if (s->state == CallState::Active && s->callee == "bob1" && cancels == 1) ++held;
        else v.require(false, "seed " + std::to_string(seed));
    }
    v.detail << held << "/" << kSeeds << " seeds";
    return v;
}

Verdict sn_redirect()
{
    Verdict v;
    auto sc = load_scenario("sn_redirect");
    auto w = build_world(sc);
    w->client("alice").login();
    run_to(*w, 10'000);
    auto sn_a = w->client("alice").super_node();
    w->client("carol").login();
    run_to(*w, 20'000);
    auto got = w->client("carol").super_node();
    v.require(sn_a && got && *got == *sn_a, "carol on SN_A");
    v.require(!got || *got != "alice", "never on A");
    v.detail << "SN_A=" << sn_a.value_or("-") << " carol->" << got.value_or("-");
    return v;
}

Verdict determinism()
{
    Verdict v;
    auto t0 = std::chrono::steady_clock::now();
    for (const auto& name : kShipped) {
        auto sc = load_scenario(name);
        auto a = run(sc);
        auto b = run(sc);
        v.require(a.trace == b.trace && a.metrics == b.metrics, name);
    }
    auto wall = std::chrono::steady_clock::now() - t0;
    v.require(wall < kSuiteWallLimit, "runtime");
    v.detail << kShipped.size() << " scenarios x2 identical, "
             << std::chrono::duration_cast<std::chrono::milliseconds>(wall).count() << " ms wall";
    return v;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"acceptance checks"};
    std::vector<int> only;
    app.add_option("--criterion", only, "run only these criteria (1-13)")->check(CLI::Range(1, 13));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"login fallback ladder", login_ladder},
        {"login timing", login_timing},
        {"login traffic totals", login_traffic},
        {"search fan-out", search_fanout},
        {"search caching", search_caching},
        {"path matrix", path_matrix},
        {"media rate and caps", media_rate},
        {"silence and hold", silence_and_hold},
        {"keep-alive", keepalive},
        {"conference", conference},
        {"multi-login", multi_login},
        {"super node redirection", sn_redirect},
        {"determinism", determinism},
    };

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        int n = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
        Verdict v = criteria[i].second();
        if (!v.pass) ++failed;
        std::printf("%-4s %2d %-24s %s\n", v.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(), (v.detail.str() + v.failures).c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
