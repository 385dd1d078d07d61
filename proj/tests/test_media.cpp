#include "support.hpp"

#include <doctest.h>

#include <stdexcept>

using namespace skysim;
using namespace skysim::testing;
using namespace std::chrono_literals;

namespace {

struct LiveCall {
    std::unique_ptr<World> w;
    std::uint64_t id = 0;

    explicit LiveCall(const std::string& extra_nodes = {}, std::uint64_t seed = 1)
        : w(world_from(base_topology(seed) + "node alice addr=130.1.0.10 port=1100\nnode bob addr=130.1.0.11 port=1200\n" +
                       extra_nodes + "user alice token=a node alice\nuser bob token=b node bob\n"))
    {
        w->client("alice").login();
        w->client("bob").login();
        run_to(*w, 20'000);
        id = w->calls().place_call("alice", "bob", true);
        while (session().state == CallState::Inviting) run_to(*w, w->now().count() + 10);
        REQUIRE(session().state == CallState::Active);
    }

    const CallSession& session() const { return *w->calls().session(id); }
    SimTime active_at() const { return *session().active_at; }

    // First whole second after the call went active.
    SimTime aligned() const { return SimTime{(active_at().count() / 1000 + 1) * 1000}; }
};

}  // namespace

TEST_CASE("codec passband")
{
    CHECK(passband_audible(440));
    CHECK(passband_audible(50));
    CHECK(passband_audible(8000));
    CHECK_FALSE(passband_audible(10'000));
    CHECK_FALSE(passband_audible(49.9));
    CHECK_THROWS_AS(passband_audible(0), std::invalid_argument);
    CHECK_THROWS_AS(passband_audible(-5), std::invalid_argument);
}

TEST_CASE("passband ignores the link")
{
    LiveCall c;
    c.w->net().set_caps("alice", 1500, 1500);
    run_to(*c.w, c.w->now().count() + 3000);
    CHECK(passband_audible(60, c.w->config().codec));
}

TEST_CASE("grade thresholds are inclusive at both ends")
{
    CHECK(grade_for(2000) == Grade::Good);
    CHECK(grade_for(1999.9) == Grade::Degraded);
    CHECK(grade_for(1500.1) == Grade::Degraded);
    CHECK(grade_for(1500) == Grade::Unintelligible);
    CHECK(grade_for(0) == Grade::Unintelligible);
    CHECK(to_string(Grade::Degraded) == "Degraded");
}

TEST_CASE("frame offsets")
{
    CHECK(frame_offset(0, 70) == 0ms);
    CHECK(frame_offset(1, 70) == 14ms);
    CHECK(frame_offset(69, 70) == 985ms);
    CHECK(frame_offset(70, 70) == 1000ms);
    CHECK(frame_offset(1, 3) == 333ms);
    CHECK(frame_offset(2, 3) == 666ms);
    CHECK(frame_offset(90, 3) == 30'000ms);
}

TEST_CASE("pacer emits at the configured cadence until stopped")
{
    Scheduler s;
    FramePacer p;
    std::vector<std::uint64_t> ticks;
    std::vector<SimTime> at;
    p.start(s, SimTime{0}, 70, [&](std::uint64_t k) {
        ticks.push_back(k);
        at.push_back(s.now());
    });
    s.advance_until(SimTime{9999});
    CHECK(ticks.size() == 700);
    CHECK(ticks.back() == 699);
    CHECK(at[1] == SimTime{14});
    p.stop();
    s.advance_until(SimTime{20'000});
    CHECK(ticks.size() == 700);
    CHECK_THROWS_AS(p.start(s, s.now(), 0, [](std::uint64_t) {}), std::invalid_argument);
}

TEST_CASE("a 10 s direct call sends 700 frames and 46900 bytes each way")
{
    LiveCall c;
    auto id = c.id;
    World* w = c.w.get();
    w->scheduler().schedule(c.active_at() + 10s, [w, id] { w->calls().teardown(id, "alice"); });
    run_to(*w, (c.active_at() + 12s).count());
    const std::uint64_t frames = 70 * 10;
    for (const auto& st : c.session().streams) {
        CHECK(st.sent_frames == frames);
        CHECK(st.sent_bytes == frames * 67);
        CHECK(st.delivered_frames == frames);
        CHECK(st.active_time == 10s);
    }
}

TEST_CASE("uncapped rate is about 5 kB/s per direction")
{
    LiveCall c;
    run_to(*c.w, (c.aligned() + 6s).count());
    for (const auto& st : c.session().streams) {
        auto q = quality(st, c.aligned(), 5s);
        CHECK(q.achieved_rate == doctest::Approx(70.0 * 67.0));
        CHECK(q.achieved_rate >= 4500);
        CHECK(q.achieved_rate <= 5500);
        CHECK(q.grade == Grade::Good);
    }
    CHECK_THROWS_AS(quality(c.session().streams[0], c.aligned(), 999ms), std::invalid_argument);
}

TEST_CASE("a 1500 B/s cap each way is unintelligible")
{
    LiveCall c;
    for (const char* n : {"alice", "bob"}) c.w->net().set_caps(n, 1500, 1500);
    run_to(*c.w, (c.aligned() + 6s).count());
    for (const auto& st : c.session().streams) {
        auto q = quality(st, c.aligned(), 5s);
        CHECK(q.achieved_rate <= 1500);
        CHECK(q.grade == Grade::Unintelligible);
        // Sending is unaffected by the cap.
        CHECK(st.sent_frames > st.delivered_frames);
    }
}

TEST_CASE("a strict 2000 B/s cap admits whole frames only")
{
    LiveCall c;
    for (const char* n : {"alice", "bob"}) c.w->net().set_caps(n, 2000, 2000);
    run_to(*c.w, (c.aligned() + 6s).count());
    for (const auto& st : c.session().streams) {
        auto q = quality(st, c.aligned(), 5s);
        CHECK(q.achieved_rate == doctest::Approx(static_cast<double>(2000 / 67 * 67)));
    }
}

TEST_CASE("silence does not change emission")
{
    LiveCall talking;
    LiveCall quiet;
    quiet.w->client("alice").silent = true;
    quiet.w->client("bob").silent = true;
    quiet.w->calls().hold(quiet.id, "alice");
    quiet.w->calls().resume(quiet.id);
    talking.w->calls().hold(talking.id, "alice");
    talking.w->calls().resume(talking.id);
    auto t0 = talking.w->now();
    auto q0 = quiet.w->now();
    run_to(*talking.w, (t0 + 10s).count());
    run_to(*quiet.w, (q0 + 10s).count());
    for (int d = 0; d < 2; ++d) CHECK(talking.session().streams[d].sent_frames == quiet.session().streams[d].sent_frames);
    std::size_t notes = 0;
    for (const auto& e : quiet.w->net().trace())
        if (e.type == TraceType::Note && e.reason.find("talk-state silent") != std::string::npos) ++notes;
    CHECK(notes >= 2);
}

TEST_CASE("calibration profile")
{
    auto c = calibration_profile();
    CHECK(c.payload(Transport::Udp) * c.frames_per_second * 8 == 18'000);
    CHECK(c.mixer_payload(Transport::Udp) * c.mixer_frames_per_second * 8 == 9000);
    CHECK(c.payload(Transport::Tcp) == c.payload(Transport::Udp) + 2);
}
