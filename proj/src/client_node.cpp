#include "skysim/client_node.hpp"

#include "skysim/world.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>
#include <stdexcept>

namespace skysim {

std::string_view to_string(ClientState s)
{
    switch (s) {
    case ClientState::Offline: return "Offline";
    case ClientState::ProbingHc: return "ProbingHc";
    case ClientState::TcpFallback: return "TcpFallback";
    case ClientState::Authenticating: return "Authenticating";
    case ClientState::AdvertisingPresence: return "AdvertisingPresence";
    case ClientState::Online: return "Online";
    case ClientState::LoginFailed: return "LoginFailed";
    }
    return "?";
}

std::optional<ClientState> parse_client_state(std::string_view s)
{
    for (int i = 0; i <= static_cast<int>(ClientState::LoginFailed); ++i) {
        auto st = static_cast<ClientState>(i);
        if (to_string(st) == s) return st;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------- ANT

bool AlternateNodeTable::add(const SocketAddr& node)
{
    for (auto& e : entries_)
        if (e.node == node) {
            e.live = true;
            return false;
        }
    if (entries_.size() >= kCapacity) return false;
    entries_.push_back(AntEntry{node, true});
    return true;
}

void AlternateNodeTable::mark_dead(const SocketAddr& node)
{
    for (auto& e : entries_)
        if (e.node == node) e.live = false;
}

std::vector<SocketAddr> AlternateNodeTable::live() const
{
    std::vector<SocketAddr> out;
    for (const auto& e : entries_)
        if (e.live) out.push_back(e.node);
    return out;
}

bool AlternateNodeTable::contains(const SocketAddr& node) const
{
    return std::any_of(entries_.begin(), entries_.end(), [&](const AntEntry& e) { return e.node == node; });
}

// ---------------------------------------------------------------- NAT detection

NatDetermination detect_nat(std::span<const ExternalAddressReport> replies, const SocketAddr& local,
                            std::size_t probes_sent, bool tcp_ok, SimTime now, Duration refresh_period)
{
    NatDetermination d;
    d.decided_at = now;
    d.refresh_period = refresh_period;
    if (replies.empty()) {
        // Nothing came back: UDP is filtered. Without probes or TCP there is no
        // evidence either way, and the restrictive answer is the safe one.
        (void)probes_sent;
        (void)tcp_ok;
        d.detected = NatKind::NatUdpBlockedFirewall;
        return d;
    }
    bool translated = std::any_of(replies.begin(), replies.end(),
                                  [&](const ExternalAddressReport& r) { return r.observed != local; });
    d.detected = translated ? NatKind::PortRestrictedNat : NatKind::Public;
    return d;
}

// ---------------------------------------------------------------- ClientNode

ClientNode::ClientNode(World& world, NodeId id, std::uint16_t port) : world_(world), id_(std::move(id)), port_(port) {}

SocketAddr ClientNode::local_address() const { return SocketAddr{world_.net().node(id_).addr, port_}; }

std::uint64_t ClientNode::bytes_now() const
{
    const auto& c = world_.net().counters(id_);
    return c.bytes_sent + c.bytes_received;
}

Message ClientNode::make(MessageKind kind, Transport t) const { return world_.make(kind, id_, port_, t); }

Message ClientNode::startup_check()
{
    Message m = make(MessageKind::VersionCheckRequest, Transport::Tcp);
    m.body.keyword = first_run_ ? "installed" : "getlatestversion";
    first_run_ = false;
    world_.version_check(id_, m);
    return m;
}

void ClientNode::login()
{
    if (state_ != ClientState::Offline && state_ != ClientState::LoginFailed) {
        world_.warn(id_, MessageKind::AuthRequest, "login-ignored state=" + std::string(to_string(state_)));
        return;
    }
    if (!world_.net().is_up(id_)) {
        world_.warn(id_, MessageKind::AuthRequest, "login-ignored host-down");
        return;
    }
    begin_attempt(false);
}

void ClientNode::begin_attempt(bool failover)
{
    ++epoch_;
    Attempt a;
    a.failover = failover;
    a.started = world_.now();
    a.bytes_at_start = bytes_now();
    auto push = [&](const SocketAddr& s) {
        if (sn_addr_ && s == *sn_addr_) return;
        if (std::find(a.candidates.begin(), a.candidates.end(), s) == a.candidates.end()) a.candidates.push_back(s);
    };
    if (failover) {
        for (const auto& s : ant_.live()) push(s);
        if (!hc_.empty())
            for (const auto& e : hc_.candidates(world_.config().timers.hc_probe_count)) push(e.node);
    } else if (hc_.empty()) {
        a.first_login = true;
        if (world_.bootstrap())
            for (const auto& s : world_.bootstrap()->nodes()) push(s);
    } else {
        for (const auto& e : hc_.candidates(world_.config().timers.hc_probe_count)) push(e.node);
    }
    if (failover) drop_sn_connection();
    attempt_ = std::move(a);
    if (!failover) ant_.clear();
    advert_replies_.clear();
    if (attempt_->candidates.empty()) {
        finish_login(false, "no-candidates");
        return;
    }
    run_cycle();
}

void ClientNode::run_cycle()
{
    state_ = ClientState::ProbingHc;
    attempt_->wave_start = 0;
    probe_wave();
}

void ClientNode::probe_wave()
{
    auto& a = *attempt_;
    const auto& timers = world_.config().timers;
    std::size_t wave = a.first_login ? a.candidates.size() : std::max<std::size_t>(1, timers.hc_probe_wave);
    std::size_t end = std::min(a.wave_start + wave, a.candidates.size());
    a.wave_replies.clear();
    for (std::size_t i = a.wave_start; i < end; ++i) {
        send_probe(a.candidates[i], epoch_, ProbePurpose::Login);
        ++a.probes_sent;
    }
    if (a.first_login && a.cycle == 1 && a.wave_start == 0) {
        std::size_t markers = std::min(world_.config().icmp_markers, end);
        for (std::size_t i = 0; i < markers; ++i)
            world_.net().note(id_, MessageKind::IcmpMarker, "to " + to_string(a.candidates[i]));
    }
    a.wave_start = end;
    auto e = epoch_;
    world_.scheduler().schedule_after(timers.udp_wait, [this, e] { wave_closed(e); });
}

void ClientNode::send_probe(const SocketAddr& to, std::uint64_t epoch, ProbePurpose purpose)
{
    Message m = make(MessageKind::UdpProbe, Transport::Udp);
    m.correlation = epoch;
    world_.net().send_udp(std::move(m), to, [this, epoch, purpose](const Message& probe) {
        world_.on_probe(probe, [this, epoch, purpose](const Message& reply) {
            if (!reply.body.report) return;
            switch (purpose) {
            case ProbePurpose::Login:
                if (epoch != epoch_ || !attempt_) return;
                attempt_->reports.push_back(*reply.body.report);
                attempt_->wave_replies.push_back(Reply{
                    reply.observed_from, *reply.body.report,
                    reply.body.nodes.empty() ? std::nullopt : std::optional<SocketAddr>(reply.body.nodes.front())});
                break;
            case ProbePurpose::Advert:
                if (epoch != epoch_ || !attempt_) return;
                attempt_->reports.push_back(*reply.body.report);
                advert_replies_.push_back(reply.observed_from);
                break;
            case ProbePurpose::Refresh:
                if (epoch != refresh_epoch_) return;
                refresh_reports_.push_back(*reply.body.report);
                break;
            }
        });
    });
}

void ClientNode::wave_closed(std::uint64_t epoch)
{
    if (epoch != epoch_ || !attempt_) return;
    auto& a = *attempt_;
    if (!a.wave_replies.empty()) {
        std::vector<SocketAddr> targets;
        for (const auto& r : a.wave_replies) {
            SocketAddr t = r.redirect ? *r.redirect : r.from;
            if (std::find(targets.begin(), targets.end(), t) == targets.end()) targets.push_back(t);
        }
        connect_responders(std::move(targets), 0);
        return;
    }
    if (a.wave_start < a.candidates.size()) {
        probe_wave();
        return;
    }
    state_ = ClientState::TcpFallback;
    a.tcp_index = 0;
    a.tcp_fallback_used = true;
    tcp_ladder_next();
}

void ClientNode::connect_responders(std::vector<SocketAddr> targets, std::size_t idx)
{
    if (idx >= targets.size()) {
        // Every responder refused TCP; carry on as if the wave had been silent.
        attempt_->wave_replies.clear();
        wave_closed(epoch_);
        return;
    }
    auto e = epoch_;
    SocketAddr target = targets[idx];
    world_.connect_ladder(id_, target, [this, e, targets = std::move(targets), idx](std::optional<ConnectionId> conn) {
        if (e != epoch_) {
            if (conn) world_.net().close(*conn);
            return;
        }
        if (conn)
            connected(*conn, targets[idx]);
        else
            connect_responders(targets, idx + 1);
    });
}

void ClientNode::tcp_ladder_next()
{
    auto& a = *attempt_;
    if (a.tcp_index >= a.candidates.size()) {
        cycle_failed();
        return;
    }
    SocketAddr target = a.candidates[a.tcp_index++];
    auto e = epoch_;
    world_.connect_ladder(id_, target, [this, e, target](std::optional<ConnectionId> conn) {
        if (e != epoch_) {
            if (conn) world_.net().close(*conn);
            return;
        }
        if (conn)
            connected(*conn, target);
        else
            tcp_ladder_next();
    });
}

void ClientNode::cycle_failed()
{
    auto& a = *attempt_;
    if (a.cycle >= world_.config().timers.max_cycles) {
        finish_login(false, "all-cycles-exhausted");
        return;
    }
    auto e = epoch_;
    world_.scheduler().schedule_after(world_.config().timers.cycle_wait, [this, e] {
        if (e != epoch_ || !attempt_) return;
        ++attempt_->cycle;
        run_cycle();
    });
}

void ClientNode::connected(ConnectionId conn, const SocketAddr& sn_addr)
{
    sn_conn_ = conn;
    sn_addr_ = sn_addr;
    sn_ = world_.net().connection(conn)->acceptor.node;
    auto e = epoch_;
    Message ch = make(MessageKind::HandshakeChallenge, Transport::Tcp);
    ch.body.nonce = world_.rng()();
    auto out = world_.net().send_tcp(conn, id_, std::move(ch), [this, e, conn](const Message& m) {
        world_.sn_handshake(conn, m.dst.node, id_, [this, e](const Message& resp) {
            if (e != epoch_ || !attempt_) return;
            if (attempt_->failover) {
                advertise();
            } else if (resp.body.nodes.empty()) {
                finish_login(false, "no-login-server");
            } else {
                authenticate(resp.body.nodes.front());
            }
        });
    });
    if (!out) {
        drop_sn_connection();
        tcp_ladder_next();
    }
}

void ClientNode::authenticate(const SocketAddr& login_server)
{
    state_ = ClientState::Authenticating;
    auto e = epoch_;
    world_.connect_ladder(id_, login_server, [this, e](std::optional<ConnectionId> conn) {
        if (e != epoch_) {
            if (conn) world_.net().close(*conn);
            return;
        }
        if (!conn) {
            finish_login(false, "login-server-unreachable");
            return;
        }
        auto& net = world_.net();
        ConnectionId c = *conn;
        NodeId server = net.connection(c)->acceptor.node;
        Message ch = make(MessageKind::HandshakeChallenge, Transport::Tcp);
        ch.body.nonce = world_.rng()();
        net.send_tcp(c, id_, ch, [this, e, c, server](const Message& challenge) {
            // Login server echoes the nonce.
            Message resp = world_.make(MessageKind::HandshakeResponse, server, challenge.dst.port, Transport::Tcp);
            resp.body.nonce = challenge.body.nonce;
            world_.net().send_tcp(c, server, resp, [this, e, c, server](const Message&) {
                if (e != epoch_) {
                    world_.net().close(c);
                    return;
                }
                Message req = make(MessageKind::AuthRequest, Transport::Tcp);
                req.body.user = identity_.user_name;
                req.body.token = identity_.password_token;
                world_.net().send_tcp(c, id_, req, [this, e, c, server](const Message& r) {
                    UserLocation at{id_, world_.net().node(id_).nat.kind, sn_.value_or(NodeId{})};
                    auto status = world_.directory().authenticate(r.body.user, r.body.token, at, world_.now());
                    Message answer = world_.make(status == AuthStatus::Ok ? MessageKind::AuthOk : MessageKind::AuthFail,
                                                 server, r.dst.port, Transport::Tcp);
                    answer.body.keyword = std::string(to_string(status));
                    world_.net().send_tcp(c, server, answer, [this, e, c](const Message& a) {
                        world_.net().close(c);
                        if (e != epoch_) return;
                        if (a.kind == MessageKind::AuthOk) {
                            identity_.last_login = world_.now();
                            advertise();
                        } else {
                            finish_login(false, "bad-credentials");
                        }
                    });
                });
            });
        });
    });
}

void ClientNode::advertise()
{
    state_ = ClientState::AdvertisingPresence;
    auto e = epoch_;
    ConnectionId conn = *sn_conn_;
    Message adv = make(MessageKind::PresenceAdvert, Transport::Tcp);
    adv.body.user = identity_.user_name;
    auto out = world_.net().send_tcp(conn, id_, adv, [this, e, conn](const Message& m) {
        world_.sn_advert(conn, m.dst.node, id_, [this, e](const Message& resp) {
            if (e != epoch_ || !attempt_) return;
            for (const auto& target : resp.body.nodes) {
                send_probe(target, e, ProbePurpose::Advert);
                ++attempt_->probes_sent;
            }
            world_.scheduler().schedule_after(world_.config().timers.advert_wait, [this, e] { advert_closed(e); });
        });
    });
    if (!out) finish_login(false, "super-node-lost");
}

void ClientNode::advert_closed(std::uint64_t epoch)
{
    if (epoch != epoch_ || !attempt_) return;
    for (const auto& r : advert_replies_) ant_.add(r);
    const auto& timers = world_.config().timers;
    nat_ = detect_nat(attempt_->reports, local_address(), attempt_->probes_sent, true, world_.now(),
                      timers.nat_refresh_period);
    finish_login(true, {});
}

void ClientNode::finish_login(bool ok, std::string reason)
{
    LoginRecord r;
    r.ok = ok;
    r.reason = std::move(reason);
    r.finished = world_.now();
    if (attempt_) {
        r.failover = attempt_->failover;
        r.first_login = attempt_->first_login;
        r.started = attempt_->started;
        r.bytes = bytes_now() - attempt_->bytes_at_start;
        r.cycles = attempt_->cycle;
    }
    if (!ok) {
        state_ = ClientState::LoginFailed;
        drop_sn_connection();
        world_.net().note(id_, r.reason == "bad-credentials" ? MessageKind::AuthFail : MessageKind::Syn,
                          "state LoginFailed reason=" + r.reason);
        if (r.failover && !identity_.user_name.empty())
            world_.directory().logout(identity_.user_name, id_, world_.now());
        logins_.push_back(std::move(r));
        attempt_.reset();
        flush_waiters(false);
        return;
    }

    state_ = ClientState::Online;
    r.super_node = sn_.value_or(NodeId{});
    SimTime now = world_.now();
    if (attempt_->first_login && world_.bootstrap())
        for (const auto& s : world_.bootstrap()->nodes()) hc_.upsert(HostCacheEntry{s, now});
    hc_.upsert(HostCacheEntry{*sn_addr_, now});
    for (const auto& e : ant_.live()) hc_.upsert(HostCacheEntry{e, now});
    if (r.failover && !identity_.user_name.empty())
        world_.directory().move_location(identity_.user_name, id_, *sn_);
    logins_.push_back(std::move(r));
    attempt_.reset();
    schedule_keepalive();
    schedule_nat_refresh();
    if (silent) world_.net().note(id_, MessageKind::MediaFrame, "talk-state silent");

    flush_waiters(true);
}

void ClientNode::flush_waiters(bool online)
{
    auto pending = std::move(on_online_);
    on_online_.clear();
    for (auto& fn : pending) world_.scheduler().schedule_after(Duration{0}, [fn = std::move(fn), online] { fn(online); });
}

void ClientNode::schedule_keepalive()
{
    auto e = epoch_;
    world_.scheduler().schedule_after(world_.config().timers.keepalive_period, [this, e] {
        if (e != epoch_) return;
        keepalive_tick();
    });
}

void ClientNode::keepalive_tick()
{
    if (state_ != ClientState::Online || !sn_conn_) return;
    auto out = world_.net().send_tcp(*sn_conn_, id_, make(MessageKind::KeepAlive, Transport::Tcp));
    if (!out) {
        failover();
        return;
    }
    ++keepalives_;
    schedule_keepalive();
}

void ClientNode::failover()
{
    if (state_ != ClientState::Online) return;
    if (sn_addr_) {
        ant_.mark_dead(*sn_addr_);
        hc_.erase(*sn_addr_);
    }
    begin_attempt(true);
}

void ClientNode::schedule_nat_refresh()
{
    auto e = epoch_;
    world_.scheduler().schedule_after(world_.config().timers.nat_refresh_period, [this, e] {
        if (e != epoch_ || state_ != ClientState::Online) return;
        nat_refresh();
    });
}

void ClientNode::nat_refresh()
{
    refresh_reports_.clear();
    refresh_epoch_ = epoch_;
    auto targets = ant_.live();
    if (targets.empty() && sn_addr_) targets.push_back(*sn_addr_);
    if (targets.size() > 2) targets.resize(2);
    for (const auto& t : targets) send_probe(t, epoch_, ProbePurpose::Refresh);
    auto e = epoch_;
    std::size_t n = targets.size();
    world_.scheduler().schedule_after(world_.config().timers.udp_wait, [this, e, n] { refresh_closed(e, n); });
}

void ClientNode::refresh_closed(std::uint64_t epoch, std::size_t probes)
{
    if (epoch != epoch_ || state_ != ClientState::Online) return;
    nat_ = detect_nat(refresh_reports_, local_address(), probes, true, world_.now(),
                      world_.config().timers.nat_refresh_period);
    schedule_nat_refresh();
}

void ClientNode::drop_sn_connection()
{
    if (sn_conn_) world_.net().close(*sn_conn_);
    sn_conn_.reset();
    sn_.reset();
    sn_addr_.reset();
}

void ClientNode::logout()
{
    if (state_ == ClientState::Offline) return;
    ++epoch_;
    if (state_ == ClientState::Online && !identity_.user_name.empty())
        world_.directory().logout(identity_.user_name, id_, world_.now());
    drop_sn_connection();
    attempt_.reset();
    state_ = ClientState::Offline;
    flush_waiters(false);
}

void ClientNode::crash()
{
    ++epoch_;
    if (state_ == ClientState::Online && !identity_.user_name.empty())
        world_.directory().logout(identity_.user_name, id_, world_.now());
    sn_conn_.reset();
    sn_.reset();
    sn_addr_.reset();
    attempt_.reset();
    state_ = ClientState::Offline;
    flush_waiters(false);
}

// ---------------------------------------------------------------- snapshot

ClientSnapshot capture(const ClientNode& client, std::string host_cache_ref)
{
    ClientSnapshot s;
    s.state = client.state();
    s.nat = client.nat();
    s.ant = client.alternate_nodes().entries();
    s.host_cache_ref = std::move(host_cache_ref);
    return s;
}

std::string serialize(const ClientSnapshot& snap)
{
    std::ostringstream out;
    out << "state " << to_string(snap.state) << '\n';
    if (snap.nat)
        out << "nat " << to_string(snap.nat->detected) << ' ' << snap.nat->decided_at.count() << ' '
            << snap.nat->refresh_period.count() << '\n';
    for (const auto& e : snap.ant) out << "ant " << e.node.addr << ' ' << e.node.port << ' ' << (e.live ? "live" : "dead") << '\n';
    if (!snap.host_cache_ref.empty()) out << "hc " << snap.host_cache_ref << '\n';
    return out.str();
}

namespace {

template <typename T>
T number(std::string_view s, int line)
{
    T v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw std::invalid_argument("line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    return v;
}

}  // namespace

ClientSnapshot parse_client_snapshot(std::string_view text)
{
    ClientSnapshot snap;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line = 0;
    bool have_state = false;
    while (std::getline(in, raw)) {
        ++line;
        std::istringstream ls(raw);
        std::vector<std::string> f;
        for (std::string w; ls >> w;) f.push_back(w);
        if (f.empty()) continue;
        auto fail = [&](const std::string& what) {
            throw std::invalid_argument("line " + std::to_string(line) + ": " + what);
        };
        if (f[0] == "state" && f.size() == 2) {
            auto st = parse_client_state(f[1]);
            if (!st) fail("unknown state '" + f[1] + "'");
            snap.state = *st;
            have_state = true;
        } else if (f[0] == "nat" && f.size() == 4) {
            auto k = parse_nat_kind(f[1]);
            if (!k) fail("unknown nat kind '" + f[1] + "'");
            snap.nat = NatDetermination{*k, SimTime{number<std::int64_t>(f[2], line)},
                                        Duration{number<std::int64_t>(f[3], line)}};
        } else if (f[0] == "ant" && f.size() == 4) {
            auto port = number<std::uint32_t>(f[2], line);
            if (port == 0 || port > 65535) fail("port out of range");
            if (f[3] != "live" && f[3] != "dead") fail("expected live or dead");
            snap.ant.push_back(AntEntry{SocketAddr{f[1], static_cast<std::uint16_t>(port)}, f[3] == "live"});
        } else if (f[0] == "hc" && f.size() == 2) {
            snap.host_cache_ref = f[1];
        } else {
            fail("unrecognised entry '" + f[0] + "'");
        }
    }
    if (!have_state) throw std::invalid_argument("line " + std::to_string(line) + ": missing state");
    return snap;
}

}  // namespace skysim
