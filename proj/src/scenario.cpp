#include "skysim/scenario.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace skysim {

namespace {

struct Token {
    std::string text;
    int column = 1;
};

std::vector<Token> tokenize(std::string_view line)
{
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        if (i >= line.size() || line[i] == '#') break;
        std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        out.push_back(Token{std::string(line.substr(start, i - start)), static_cast<int>(start) + 1});
    }
    return out;
}

class LineParser {
public:
    LineParser(int line, std::vector<Token> toks) : line_(line), toks_(std::move(toks)) {}

    [[noreturn]] void fail(std::size_t tok, const std::string& msg) const
    {
        int col = tok < toks_.size() ? toks_[tok].column : (toks_.empty() ? 1 : toks_.back().column);
        throw ScenarioError(line_, col, msg);
    }

    std::size_t size() const { return toks_.size(); }
    const std::string& at(std::size_t i) const
    {
        if (i >= toks_.size()) fail(i, "'" + toks_[0].text + "' expects more arguments");
        return toks_[i].text;
    }
    void expect_count(std::size_t n) const
    {
        if (toks_.size() != n)
            fail(std::min(n, toks_.size() - 1), "'" + toks_[0].text + "' takes " + std::to_string(n - 1) + " argument(s)");
    }

    template <typename T>
    T number(std::size_t i, std::string_view text) const
    {
        T v{};
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc{} || p != text.data() + text.size())
            fail(i, "expected a number, got '" + std::string(text) + "'");
        return v;
    }
    template <typename T>
    T number(std::size_t i) const { return number<T>(i, at(i)); }

    // `key=value`; fails on a token without '='.
    std::pair<std::string, std::string> kv(std::size_t i) const
    {
        const auto& t = at(i);
        auto eq = t.find('=');
        if (eq == std::string::npos || eq == 0) fail(i, "expected key=value, got '" + t + "'");
        return {t.substr(0, eq), t.substr(eq + 1)};
    }

    int line() const { return line_; }

private:
    int line_;
    std::vector<Token> toks_;
};

std::optional<SocketAddr> parse_socket_addr(std::string_view s)
{
    auto colon = s.rfind(':');
    if (colon == std::string_view::npos || colon == 0) return std::nullopt;
    std::uint16_t port = 0;
    auto ps = s.substr(colon + 1);
    auto [p, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), port);
    if (ec != std::errc{} || p != ps.data() + ps.size() || port == 0) return std::nullopt;
    return SocketAddr{std::string(s.substr(0, colon)), port};
}

void set_timer(Scenario& s, const LineParser& lp, std::size_t i)
{
    auto [key, val] = lp.kv(i);
    auto ms = [&] { return Duration{lp.number<std::int64_t>(i, val)}; };
    auto count = [&] { return lp.number<std::size_t>(i, val); };
    auto& t = s.config.timers;
    auto& c = s.config.calls;
    if (key == "udp_wait") t.udp_wait = ms();
    else if (key == "cycle_wait") t.cycle_wait = ms();
    else if (key == "max_cycles") t.max_cycles = lp.number<int>(i, val);
    else if (key == "hc_probe_count") t.hc_probe_count = count();
    else if (key == "hc_probe_wave") t.hc_probe_wave = count();
    else if (key == "advert_wait") t.advert_wait = ms();
    else if (key == "keepalive_period") t.keepalive_period = ms();
    else if (key == "nat_refresh_period") t.nat_refresh_period = ms();
    else if (key == "round_wait") s.config.search.round_wait = ms();
    else if (key == "cache_ttl") s.config.search.cache_ttl = ms();
    else if (key == "ring_timeout") c.ring_timeout = ms();
    else if (key == "relay_keepup_period") c.relay_keepup_period = ms();
    else if (key == "hold_tcp_ping_period") c.hold_tcp_ping_period = ms();
    else if (key == "hold_pings_per_second") c.hold_pings_per_second = lp.number<std::uint32_t>(i, val);
    else lp.fail(i, "unknown timer '" + key + "'");
    if (t.hc_probe_wave == 0 || t.max_cycles <= 0 || c.hold_pings_per_second == 0)
        lp.fail(i, "timer '" + key + "' must be positive");
}

ScenarioNode parse_node(const LineParser& lp)
{
    ScenarioNode n;
    n.line = lp.line();
    n.spec.id = lp.at(1);
    bool have_addr = false;
    std::optional<std::set<std::uint16_t>> fw_ports;
    for (std::size_t i = 2; i < lp.size(); ++i) {
        if (lp.at(i) == "silent") {
            n.silent = true;
            continue;
        }
        auto [key, val] = lp.kv(i);
        if (key == "addr") {
            n.spec.addr = val;
            have_addr = true;
        } else if (key == "nat") {
            auto k = parse_nat_kind(val);
            if (!k) lp.fail(i, "unknown nat kind '" + val + "'");
            n.spec.nat.kind = *k;
        } else if (key == "ext") {
            n.spec.external_addr = val;
        } else if (key == "port") {
            n.port = lp.number<std::uint16_t>(i, val);
            if (n.port == 0) lp.fail(i, "port must be non-zero");
        } else if (key == "cpu") {
            n.capability.cpu_score = lp.number<std::uint32_t>(i, val);
            if (n.capability.cpu_score == 0) lp.fail(i, "cpu must be positive");
        } else if (key == "bw") {
            n.capability.uplink_cap = lp.number<std::uint64_t>(i, val);
        } else if (key == "up") {
            n.spec.uplink_cap = lp.number<std::uint64_t>(i, val);
            n.capability.uplink_cap = *n.spec.uplink_cap;
        } else if (key == "down") {
            n.spec.downlink_cap = lp.number<std::uint64_t>(i, val);
        } else if (key == "role") {
            auto r = parse_role(val);
            if (!r) lp.fail(i, "unknown role '" + val + "'");
            n.role = *r;
        } else if (key == "fw_ports") {
            fw_ports.emplace();
            if (val != "any") {
                std::string_view rest = val;
                while (!rest.empty()) {
                    auto comma = rest.find(',');
                    fw_ports->insert(lp.number<std::uint16_t>(i, rest.substr(0, comma)));
                    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
                }
            } else {
                fw_ports.reset();
            }
        } else if (key == "answer") {
            auto p = parse_answer_policy(val);
            if (!p) lp.fail(i, "bad answer policy '" + val + "'");
            n.answer = *p;
        } else {
            lp.fail(i, "unknown node key '" + key + "'");
        }
    }
    if (!have_addr) lp.fail(1, "node '" + n.spec.id + "' needs addr=");
    if (n.spec.nat.kind != NatKind::Public && n.spec.external_addr.empty())
        n.spec.external_addr = "ext-" + n.spec.addr;
    if (n.spec.nat.kind == NatKind::NatUdpBlockedFirewall) n.spec.nat.allowed_outbound_tcp_ports = fw_ports;
    return n;
}

// Arity and argument shape of each timeline verb.
void check_action(const LineParser& lp, const Action& a)
{
    const std::size_t n = a.args.size();
    auto need = [&](std::size_t lo, std::size_t hi) {
        if (n < lo || n > hi) lp.fail(2, "'" + a.verb + "' takes " + std::to_string(lo) +
                                             (lo == hi ? "" : "-" + std::to_string(hi)) + " argument(s)");
    };
    const std::string& v = a.verb;
    if (v == "login" || v == "logout" || v == "kill" || v == "revive" || v == "startup" || v == "answer") need(1, 1);
    else if (v == "search") need(2, 2);
    else if (v == "call") {
        need(2, 5);
        for (std::size_t i = 2; i < n; ++i) {
            if (a.args[i] == "buddy") continue;
            if (a.args[i] == "as" && i + 1 < n) {
                ++i;
                continue;
            }
            lp.fail(3 + i, "unexpected call argument '" + a.args[i] + "'");
        }
    } else if (v == "hold" || v == "hangup") need(2, 2);
    else if (v == "resume") need(1, 1);
    else if (v == "conference") need(3, 3);
    else if (v == "end_conference") need(1, 1);
    else if (v == "expect") {
        need(2, 4);
        static const std::set<std::string> subjects{"state", "sn", "nat", "call", "search", "host", "conference", "not_sn"};
        if (!subjects.count(a.args[0])) lp.fail(3, "unknown expectation '" + a.args[0] + "'");
    } else {
        lp.fail(2, "unknown action '" + v + "'");
    }
}

}  // namespace

Scenario parse_scenario(std::string_view text)
{
    Scenario s;
    std::set<NodeId> ids;
    std::vector<NodeId> peers;
    std::map<NodeId, int> node_line;
    std::set<std::string> user_names;
    std::set<std::string> seen_once;
    std::vector<std::pair<LineParser, Action>> actions;
    std::vector<std::pair<LineParser, std::vector<std::string>>> refs;  // deferred node references
    int lineno = 0;
    int login_line = 0;

    auto add_node = [&](ScenarioNode n, const LineParser& lp) {
        if (!ids.insert(n.spec.id).second) lp.fail(1, "duplicate node id '" + n.spec.id + "'");
        node_line[n.spec.id] = lp.line();
        s.nodes.push_back(std::move(n));
    };

    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++lineno;
        auto toks = tokenize(raw);
        if (toks.empty()) continue;
        LineParser lp(lineno, toks);
        const std::string& kw = toks[0].text;

        auto once = [&] {
            if (!seen_once.insert(kw).second) lp.fail(0, "'" + kw + "' given twice");
        };

        if (kw == "seed") {
            once();
            lp.expect_count(2);
            s.seed = lp.number<std::uint64_t>(1);
        } else if (kw == "latency") {
            if (lp.size() == 2) {
                s.config.link.default_latency = Duration{lp.number<std::int64_t>(1)};
            } else {
                lp.expect_count(4);
                lp.fail(1, "per-pair latency is not supported; use a single default");
            }
            if (s.config.link.default_latency <= Duration{0}) lp.fail(1, "latency must be positive");
        } else if (kw == "binding_ttl") {
            lp.expect_count(2);
            s.config.link.binding_ttl = Duration{lp.number<std::int64_t>(1)};
        } else if (kw == "strict_firewall") {
            lp.expect_count(2);
            if (lp.at(1) != "on" && lp.at(1) != "off") lp.fail(1, "expected on or off");
            s.config.strict_firewall = lp.at(1) == "on";
        } else if (kw == "until") {
            once();
            lp.expect_count(2);
            s.until = SimTime{lp.number<std::int64_t>(1)};
        } else if (kw == "node") {
            if (lp.size() < 3) lp.fail(1, "node needs an id and addr=");
            add_node(parse_node(lp), lp);
        } else if (kw == "peers") {
            once();
            if (lp.size() < 2) lp.fail(1, "peers needs a count");
            auto n = lp.number<std::size_t>(1);
            std::string prefix = "sn";
            std::uint32_t cpu = 10;
            for (std::size_t i = 2; i < lp.size(); ++i) {
                auto [k, v] = lp.kv(i);
                if (k == "prefix") prefix = v;
                else if (k == "cpu") cpu = lp.number<std::uint32_t>(i, v);
                else lp.fail(i, "unknown peers key '" + k + "'");
            }
            if (n == 0 || n > 60000) lp.fail(1, "peer count out of range");
            for (std::size_t i = 0; i < n; ++i) {
                ScenarioNode p;
                char buf[16];
                std::snprintf(buf, sizeof buf, "%03zu", i + 1);
                p.spec.id = prefix + buf;
                p.spec.addr = "10.1." + std::to_string(i / 250) + "." + std::to_string(i % 250 + 1);
                p.role = Role::SuperNode;
                p.capability.cpu_score = cpu;
                p.line = lineno;
                peers.push_back(p.spec.id);
                add_node(std::move(p), lp);
            }
        } else if (kw == "bootstrap") {
            once();
            if (lp.size() - 1 != BootstrapList::kSize) lp.fail(1, "bootstrap requires 7 entries");
            for (std::size_t i = 1; i < lp.size(); ++i) s.bootstrap.push_back(lp.at(i));
            refs.emplace_back(lp, s.bootstrap);
        } else if (kw == "hc") {
            if (lp.size() < 3) lp.fail(1, "hc needs a node and at least one entry");
            auto& list = s.host_caches[lp.at(1)];
            std::vector<std::string> r{lp.at(1)};
            for (std::size_t i = 2; i < lp.size(); ++i) {
                HcRef ref;
                if (auto a = parse_socket_addr(lp.at(i)); a && !ids.count(lp.at(i))) {
                    ref.addr = *a;
                } else {
                    ref.node = lp.at(i);
                    r.push_back(lp.at(i));
                }
                list.push_back(std::move(ref));
            }
            refs.emplace_back(lp, r);
        } else if (kw == "hc_fill") {
            lp.expect_count(3);
            auto n = lp.number<std::size_t>(2);
            if (n > peers.size()) lp.fail(2, "hc_fill wants " + std::to_string(n) + " peers, only " +
                                                 std::to_string(peers.size()) + " declared before this line");
            auto& list = s.host_caches[lp.at(1)];
            for (std::size_t i = 0; i < n; ++i) list.push_back(HcRef{peers[i], {}});
            refs.emplace_back(lp, std::vector<std::string>{lp.at(1)});
        } else if (kw == "user") {
            if (lp.size() < 4) lp.fail(1, "user needs a name and at least one 'node <id>'");
            ScenarioUser u;
            u.name = lp.at(1);
            if (!user_names.insert(u.name).second) lp.fail(1, "duplicate user '" + u.name + "'");
            for (std::size_t i = 2; i < lp.size(); ++i) {
                if (lp.at(i) == "node") {
                    u.nodes.push_back(lp.at(i + 1));
                    ++i;
                    continue;
                }
                auto [k, v] = lp.kv(i);
                if (k == "token") u.token = v;
                else lp.fail(i, "unknown user key '" + k + "'");
            }
            if (u.nodes.empty()) lp.fail(1, "user '" + u.name + "' has no node");
            refs.emplace_back(lp, u.nodes);
            s.users.push_back(std::move(u));
        } else if (kw == "login_server") {
            once();
            lp.expect_count(2);
            s.login_server = lp.at(1);
            login_line = lineno;
            refs.emplace_back(lp, std::vector<std::string>{lp.at(1)});
        } else if (kw == "version_server") {
            once();
            lp.expect_count(2);
            s.version_server = lp.at(1);
            refs.emplace_back(lp, std::vector<std::string>{lp.at(1)});
        } else if (kw == "size") {
            if (lp.size() < 2) lp.fail(1, "size needs Kind=bytes");
            for (std::size_t i = 1; i < lp.size(); ++i) {
                auto [k, v] = lp.kv(i);
                auto kind = parse_message_kind(k);
                if (!kind || *kind == MessageKind::Syn) lp.fail(i, "unknown message kind '" + k + "'");
                auto bytes = lp.number<std::uint32_t>(i, v);
                if (bytes == 0) lp.fail(i, "size must be positive");
                s.config.sizes.set(*kind, bytes);
            }
        } else if (kw == "timer") {
            if (lp.size() < 2) lp.fail(1, "timer needs key=ms");
            for (std::size_t i = 1; i < lp.size(); ++i) set_timer(s, lp, i);
        } else if (kw == "media_profile") {
            lp.expect_count(2);
            if (lp.at(1) == "calibration") s.config.codec = calibration_profile();
            else if (lp.at(1) == "default") s.config.codec = default_codec();
            else lp.fail(1, "unknown media profile '" + lp.at(1) + "'");
        } else if (kw == "relays") {
            lp.expect_count(2);
            auto n = lp.number<std::size_t>(1);
            if (n != 1 && n != 2) lp.fail(1, "relays must be 1 or 2");
            s.config.calls.relay_count = n;
        } else if (kw == "advert_targets") {
            lp.expect_count(2);
            s.config.advert_targets = lp.number<std::size_t>(1);
        } else if (kw == "at") {
            if (lp.size() < 3) lp.fail(1, "at needs a time and an action");
            Action a;
            a.at = SimTime{lp.number<std::int64_t>(1)};
            if (a.at < SimTime{0}) lp.fail(1, "time must not be negative");
            a.verb = lp.at(2);
            for (std::size_t i = 3; i < lp.size(); ++i) a.args.push_back(lp.at(i));
            a.line = lineno;
            check_action(lp, a);
            actions.emplace_back(lp, std::move(a));
        } else {
            lp.fail(0, "unknown directive '" + kw + "'");
        }
    }

    for (const auto& [lp, names] : refs)
        for (std::size_t i = 0; i < names.size(); ++i)
            if (!ids.count(names[i])) lp.fail(1, "unknown node '" + names[i] + "'");

    std::map<NodeId, const ScenarioNode*> by_id;
    for (const auto& n : s.nodes) by_id[n.spec.id] = &n;

    std::vector<NodeId> login_nodes;
    for (const auto& n : s.nodes)
        if (n.role == Role::LoginServer) login_nodes.push_back(n.spec.id);
    if (!s.login_server) {
        if (login_nodes.size() != 1) throw ScenarioError(lineno, 1, "exactly one login server is required");
        s.login_server = login_nodes.front();
    } else if (login_nodes.size() > 1 ||
               (login_nodes.size() == 1 && login_nodes.front() != *s.login_server)) {
        throw ScenarioError(login_line, 1, "exactly one login server is required");
    }
    if (s.bootstrap.empty()) throw ScenarioError(lineno, 1, "bootstrap requires 7 entries");
    for (const auto& [node, _] : s.host_caches)
        if (by_id.at(node)->role != Role::Client)
            throw ScenarioError(node_line.at(node), 1, "host cache given for non-client '" + node + "'");
    for (const auto& u : s.users)
        for (const auto& n : u.nodes)
            if (by_id.at(n)->role != Role::Client)
                throw ScenarioError(node_line.at(n), 1, "user '" + u.name + "' placed on non-client '" + n + "'");

    std::set<std::string> call_labels;
    std::size_t calls = 0;
    auto is_client = [&](const std::string& id) {
        auto it = by_id.find(id);
        return it != by_id.end() && it->second->role == Role::Client;
    };
    std::stable_sort(actions.begin(), actions.end(), [](const auto& a, const auto& b) { return a.second.at < b.second.at; });
    for (auto& [lp, a] : actions) {
        const auto& v = a.verb;
        auto client_arg = [&](std::size_t i) {
            if (!is_client(a.args[i])) lp.fail(3 + i, "'" + a.args[i] + "' is not a client node");
        };
        auto node_arg = [&](std::size_t i) {
            if (!ids.count(a.args[i])) lp.fail(3 + i, "unknown node '" + a.args[i] + "'");
        };
        auto call_arg = [&](std::size_t i) {
            if (!call_labels.count(a.args[i])) lp.fail(3 + i, "unknown call '" + a.args[i] + "'");
        };
        if (v == "login" || v == "logout" || v == "startup" || v == "answer") client_arg(0);
        else if (v == "kill" || v == "revive") node_arg(0);
        else if (v == "search") client_arg(0);
        else if (v == "call") {
            client_arg(0);
            ++calls;
            call_labels.insert("s" + std::to_string(calls));
            for (std::size_t i = 2; i + 1 < a.args.size(); ++i)
                if (a.args[i] == "as") call_labels.insert(a.args[i + 1]);
        } else if (v == "hold" || v == "hangup") {
            call_arg(0);
            client_arg(1);
        } else if (v == "resume") call_arg(0);
        else if (v == "conference") {
            for (std::size_t i = 0; i < 3; ++i) client_arg(i);
        } else if (v == "expect") {
            const auto& subj = a.args[0];
            if (subj == "state" || subj == "sn" || subj == "nat" || subj == "not_sn") {
                if (a.args.size() != 3) lp.fail(3, "expect " + subj + " takes <node> <value>");
                client_arg(1);
                if (subj == "state" && !parse_client_state(a.args[2])) lp.fail(5, "unknown state '" + a.args[2] + "'");
                if (subj == "nat" && !parse_nat_kind(a.args[2])) lp.fail(5, "unknown nat kind '" + a.args[2] + "'");
            } else if (subj == "call") {
                if (a.args.size() != 4) lp.fail(3, "expect call takes <call> state|path|failure <value>");
                call_arg(1);
                if (a.args[2] != "state" && a.args[2] != "path" && a.args[2] != "failure")
                    lp.fail(5, "unknown call property '" + a.args[2] + "'");
            } else if (subj == "search") {
                if (a.args.size() != 3) lp.fail(3, "expect search takes <n> found|miss|cached|contacted=N");
                lp.number<std::size_t>(4, a.args[1]);
            } else if (subj == "host" || subj == "conference") {
                if (a.args.size() != 3) lp.fail(3, "expect " + subj + " takes <label> <value>");
            }
        }
    }
    for (auto& [_, a] : actions) s.timeline.push_back(std::move(a));
    return s;
}

// ------------------------------------------------------------------ runner

std::unique_ptr<World> build_world(const Scenario& s, const RunOptions& opts)
{
    WorldConfig cfg = s.config;
    cfg.seed = opts.seed.value_or(s.seed);
    cfg.strict_firewall = cfg.strict_firewall || opts.strict_firewall;
    auto world = std::make_unique<World>(cfg);
    for (const auto& n : s.nodes) {
        world->add_node(n.spec, n.role, n.port, n.capability);
        if (n.answer) world->calls().set_answer_policy(n.spec.id, *n.answer);
        if (auto* c = world->find_client(n.spec.id)) c->silent = n.silent;
    }
    std::vector<SocketAddr> boot;
    for (const auto& b : s.bootstrap) boot.push_back(world->contact_address(b));
    world->set_bootstrap(BootstrapList(std::move(boot)));
    if (s.login_server) world->set_login_server(*s.login_server);
    if (s.version_server) world->set_version_server(*s.version_server);
    for (const auto& u : s.users) {
        world->directory().register_user(u.name, u.token);
        for (const auto& n : u.nodes) world->client(n).set_identity(UserIdentity{u.name, u.token, SimTime{0}});
    }
    for (const auto& [node, entries] : s.host_caches) {
        auto& hc = world->client(node).host_cache();
        for (const auto& e : entries) hc.upsert(HostCacheEntry{e.node ? world->contact_address(*e.node) : e.addr, SimTime{0}});
    }
    return world;
}

namespace {

class Runner {
public:
    Runner(const Scenario& s, const RunOptions& opts) : s_(s), world_(build_world(s, opts)) {}

    RunResult run(SimTime until)
    {
        auto& sched = world_->scheduler();
        for (const auto& a : s_.timeline) sched.schedule(a.at, [this, &a] { perform(a); });
        sched.set_after_event([this] { check_trace(); });
        sched.advance_until(until);
        check_trace();
        check_bounds();
        RunResult r;
        r.trace = format_trace(world_->net().trace());
        r.metrics = metrics_json(*world_, until);
        r.failures = std::move(failures_);
        r.ended = until;
        return r;
    }

private:
    void fail(std::string invariant, std::string detail)
    {
        failures_.push_back(AssertionFailure{std::move(invariant), world_->now(), std::move(detail)});
    }

    const CallSession* call(const std::string& label) const
    {
        auto it = aliases_.find(label);
        if (it != aliases_.end()) return world_->calls().session(it->second);
        return world_->calls().session(label);
    }

    void perform(const Action& a)
    {
        auto& w = *world_;
        const auto& v = a.verb;
        const auto& x = a.args;
        if (v == "login") w.client(x[0]).login();
        else if (v == "logout") w.client(x[0]).logout();
        else if (v == "startup") w.client(x[0]).startup_check();
        else if (v == "kill") w.kill(x[0]);
        else if (v == "revive") w.revive(x[0]);
        else if (v == "answer") w.calls().answer(x[0]);
        else if (v == "search") w.search().search(x[0], x[1], [](const SearchOutcome&) {});
        else if (v == "call") {
            bool buddy = std::find(x.begin() + 2, x.end(), "buddy") != x.end();
            auto id = w.calls().place_call(x[0], x[1], buddy);
            for (std::size_t i = 2; i + 1 < x.size(); ++i)
                if (x[i] == "as") aliases_[x[i + 1]] = id;
        } else if (v == "hold" || v == "hangup" || v == "resume") {
            const auto* c = call(x[0]);
            if (!c) return fail("call-exists", "line " + std::to_string(a.line) + ": no call '" + x[0] + "'");
            if (v == "hold") w.calls().hold(c->id, x[1]);
            else if (v == "hangup") w.calls().teardown(c->id, x[1]);
            else w.calls().resume(c->id);
        } else if (v == "conference") {
            w.conferences().start(x[0], x[1], x[2]);
        } else if (v == "end_conference") {
            w.conferences().end(x[0]);
        } else if (v == "expect") {
            expect(a);
        }
    }

    void expect(const Action& a)
    {
        auto& w = *world_;
        const auto& x = a.args;
        std::string where = "line " + std::to_string(a.line) + ": ";
        auto check = [&](const std::string& name, const std::string& actual, const std::string& wanted) {
            if (actual != wanted) fail(name, where + "expected " + wanted + ", got " + actual);
        };
        if (x[0] == "state") {
            check("expect-state", std::string(to_string(w.client(x[1]).state())), x[2]);
        } else if (x[0] == "sn") {
            check("expect-sn", w.client(x[1]).super_node().value_or("none"), x[2]);
        } else if (x[0] == "not_sn") {
            auto sn = w.client(x[1]).super_node().value_or("none");
            if (sn == x[2]) fail("expect-not-sn", where + x[1] + " is attached to " + sn);
        } else if (x[0] == "nat") {
            const auto& d = w.client(x[1]).nat();
            check("expect-nat", d ? std::string(to_string(d->detected)) : "none",
                  std::string(to_string(*parse_nat_kind(x[2]))));
        } else if (x[0] == "call") {
            const auto* c = call(x[1]);
            if (!c) return fail("expect-call", where + "no call '" + x[1] + "'");
            if (x[2] == "state") check("expect-call-state", std::string(to_string(c->state)), x[3]);
            else if (x[2] == "path") check("expect-call-path", std::string(to_string(c->path)), x[3]);
            else check("expect-call-failure", c->failure ? std::string(to_string(*c->failure)) : "none", x[3]);
        } else if (x[0] == "search") {
            std::size_t n = 0;
            std::from_chars(x[1].data(), x[1].data() + x[1].size(), n);
            const auto& outs = w.search().outcomes();
            if (n == 0 || n > outs.size())
                return fail("expect-search", where + "search " + x[1] + " has not finished");
            const auto& o = outs[n - 1];
            if (x[2] == "found" || x[2] == "miss") check("expect-search", o.found ? "found" : "miss", x[2]);
            else if (x[2] == "cached") check("expect-search", o.cached ? "cached" : "uncached", x[2]);
            else if (x[2].rfind("contacted=", 0) == 0)
                check("expect-search", "contacted=" + std::to_string(o.contacted), x[2]);
            else fail("expect-search", where + "unknown search property '" + x[2] + "'");
        } else if (x[0] == "host") {
            const auto* c = w.conferences().conference(x[1]);
            check("expect-host", c ? c->host : "none", x[2]);
        } else if (x[0] == "conference") {
            const auto* c = w.conferences().conference(x[1]);
            check("expect-conference", c ? std::string(to_string(c->state)) : "none", x[2]);
        }
    }

    // Trace invariants, checked incrementally as events are processed.
    void check_trace()
    {
        const auto& tr = world_->net().trace();
        for (; seen_ < tr.size(); ++seen_) {
            const auto& e = tr[seen_];
            if (e.type != TraceType::Delivered) continue;
            if (e.dst.transport == Transport::Udp &&
                world_->net().node(e.dst.node).nat.kind == NatKind::NatUdpBlockedFirewall)
                fail("firewall-blocks-inbound-udp", format_trace_line(e));
            if (e.kind == MessageKind::MediaFrame) {
                for (const auto* c : world_->conferences().conferences()) {
                    if (c->state != ConferenceState::Active) continue;
                    auto member = [&](const NodeId& n) {
                        return std::find(c->members.begin(), c->members.end(), n) != c->members.end();
                    };
                    bool in_call = false;
                    for (const auto* s : world_->calls().sessions())
                        if ((s->state == CallState::Active || s->state == CallState::Held) &&
                            ((s->caller == e.src.node && s->callee == e.dst.node) ||
                             (s->caller == e.dst.node && s->callee == e.src.node)))
                            in_call = true;
                    if (member(e.src.node) && member(e.dst.node) && e.src.node != c->host && e.dst.node != c->host && !in_call)
                        fail("conference-star-topology", format_trace_line(e));
                }
            }
        }
    }

    void check_bounds()
    {
        for (auto* c : world_->clients()) {
            if (c->host_cache().size() > c->host_cache().capacity())
                fail("host-cache-capacity", c->id() + " holds " + std::to_string(c->host_cache().size()));
            if (c->alternate_nodes().size() > AlternateNodeTable::kCapacity)
                fail("ant-capacity", c->id() + " holds " + std::to_string(c->alternate_nodes().size()));
        }
    }

    const Scenario& s_;
    std::unique_ptr<World> world_;
    std::map<std::string, std::uint64_t> aliases_;
    std::vector<AssertionFailure> failures_;
    std::size_t seen_ = 0;
};

}  // namespace

RunResult run(const Scenario& s, const RunOptions& opts)
{
    SimTime until{60'000};
    if (!s.timeline.empty()) until = s.timeline.back().at + Duration{60'000};
    if (s.until) until = *s.until;
    if (opts.until) until = *opts.until;
    return Runner(s, opts).run(until);
}

// ------------------------------------------------------------------ metrics

std::string metrics_json(World& world, SimTime end)
{
    using nlohmann::json;
    json doc;
    doc["ended_ms"] = end.count();

    json nodes = json::object();
    for (const auto& id : world.node_ids()) {
        const auto& c = world.net().counters(id);
        nodes[id] = {{"role", std::string(to_string(world.info(id).role))},
                     {"bytes_sent", c.bytes_sent},
                     {"bytes_received", c.bytes_received},
                     {"udp_sent", c.udp_sent},
                     {"udp_received", c.udp_received},
                     {"tcp_sent", c.tcp_sent},
                     {"tcp_received", c.tcp_received}};
    }
    doc["nodes"] = std::move(nodes);

    json logins = json::array();
    json clients = json::object();
    for (const auto* c : world.clients()) {
        for (const auto& l : c->logins())
            logins.push_back({{"node", c->id()},
                              {"ok", l.ok},
                              {"reason", l.reason},
                              {"failover", l.failover},
                              {"first_login", l.first_login},
                              {"started_ms", l.started.count()},
                              {"duration_ms", l.duration().count()},
                              {"bytes", l.bytes},
                              {"cycles", l.cycles},
                              {"super_node", l.super_node}});
        json cj = {{"state", std::string(to_string(c->state()))},
                   {"super_node", c->super_node().value_or("")},
                   {"keepalives", c->keepalives_sent()},
                   {"host_cache", c->host_cache().size()},
                   {"ant", c->alternate_nodes().size()}};
        cj["nat"] = c->nat() ? std::string(to_string(c->nat()->detected)) : "";
        clients[c->id()] = std::move(cj);
    }
    doc["logins"] = std::move(logins);
    doc["clients"] = std::move(clients);

    json searches = json::array();
    for (const auto& o : world.search().outcomes())
        searches.push_back({{"origin", o.origin},
                            {"target", o.target},
                            {"found", o.found},
                            {"locations", o.locations},
                            {"contacted", o.contacted},
                            {"rounds", o.rounds},
                            {"round_sizes", o.round_sizes},
                            {"duration_ms", o.duration.count()},
                            {"cached", o.cached},
                            {"error", o.error}});
    doc["searches"] = std::move(searches);

    json calls = json::array();
    for (const auto* s : world.calls().sessions()) {
        json streams = json::array();
        for (const auto& st : s->streams) {
            json sj = {{"from", st.from},
                       {"to", st.to},
                       {"transport", std::string(to_string(st.transport))},
                       {"sent_frames", st.sent_frames},
                       {"delivered_frames", st.delivered_frames},
                       {"sent_bytes", st.sent_bytes},
                       {"delivered_bytes", st.delivered_bytes}};
            if (s->active_at) {
                SimTime stop = s->ended_at.value_or(end);
                Duration span = std::chrono::floor<std::chrono::seconds>(stop - *s->active_at);
                if (span >= Duration{1000}) {
                    auto q = quality(st, *s->active_at, span);
                    sj["bytes_per_s"] = q.achieved_rate;
                    sj["grade"] = std::string(to_string(q.grade));
                }
            }
            streams.push_back(std::move(sj));
        }
        json cj = {{"label", s->label},
                   {"caller", s->caller},
                   {"callee_user", s->callee_user},
                   {"callee", s->callee},
                   {"path", std::string(to_string(s->path))},
                   {"relays", s->relays},
                   {"state", std::string(to_string(s->state))},
                   {"failure", s->failure ? std::string(to_string(*s->failure)) : ""},
                   {"placed_ms", s->placed_at.count()},
                   {"signaling_bytes", s->signaling_bytes},
                   {"hold_udp_pings", s->hold_udp_pings},
                   {"hold_tcp_pings", s->hold_tcp_pings},
                   {"streams", std::move(streams)}};
        if (s->active_at) cj["active_ms"] = s->active_at->count();
        calls.push_back(std::move(cj));
    }
    doc["calls"] = std::move(calls);

    json confs = json::array();
    for (const auto* c : world.conferences().conferences()) {
        json cj = {{"label", c->label},
                   {"initiator", c->initiator},
                   {"host", c->host},
                   {"state", std::string(to_string(c->state))},
                   {"failure", c->failure}};
        if (c->active_at) {
            // Skip the first second so the table reflects steady state.
            SimTime from = *c->active_at + Duration{1000};
            Duration window = std::chrono::floor<std::chrono::seconds>(end - from);
            if (window >= Duration{1000}) {
                json rates = json::object();
                for (const auto& [m, r] : world.conferences().bandwidth(c->label, from, window))
                    rates[m] = {{"up_kbps", r.up_kbps}, {"down_kbps", r.down_kbps}, {"total_kbps", r.total_kbps()}};
                cj["window_ms"] = window.count();
                cj["rates"] = std::move(rates);
            }
        }
        confs.push_back(std::move(cj));
    }
    doc["conferences"] = std::move(confs);
    return doc.dump(2) + "\n";
}

// ------------------------------------------------------------------ diff

namespace {

std::vector<std::string_view> split_lines(std::string_view t)
{
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < t.size()) {
        auto nl = t.find('\n', pos);
        if (nl == std::string_view::npos) nl = t.size();
        out.push_back(t.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return out;
}

}  // namespace

TraceDiff diff_trace(std::string_view actual, std::string_view golden)
{
    auto a = split_lines(actual);
    auto g = split_lines(golden);
    TraceDiff d;
    std::size_t n = std::min(a.size(), g.size());
    std::size_t i = 0;
    while (i < n && a[i] == g[i]) ++i;
    if (i == n && a.size() == g.size()) return d;
    d.outcome = DiffOutcome::Diverged;
    d.line = i + 1;
    d.actual_line = i < a.size() ? std::string(a[i]) : "<end of trace>";
    d.golden_line = i < g.size() ? std::string(g[i]) : "<end of trace>";
    for (std::size_t k = i >= 3 ? i - 3 : 0; k < i; ++k) d.context.emplace_back(a[k]);
    return d;
}

TraceDiff diff_trace_files(const std::string& actual_path, const std::string& golden_path)
{
    auto slurp = [](const std::string& p) -> std::optional<std::string> {
        std::ifstream in(p, std::ios::binary);
        if (!in) return std::nullopt;
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    auto golden = slurp(golden_path);
    if (!golden) {
        TraceDiff d;
        d.outcome = DiffOutcome::MissingGolden;
        d.golden_line = golden_path;
        return d;
    }
    auto actual = slurp(actual_path);
    if (!actual) throw std::runtime_error("cannot read '" + actual_path + "'");
    return diff_trace(*actual, *golden);
}

std::string TraceDiff::describe() const
{
    switch (outcome) {
    case DiffOutcome::Match: return "match\n";
    case DiffOutcome::MissingGolden: return "missing golden: " + golden_line + "\n";
    case DiffOutcome::Diverged: break;
    }
    std::string out = "first divergence at line " + std::to_string(line) + "\n";
    for (const auto& c : context) out += "  " + c + "\n";
    out += "- " + golden_line + "\n+ " + actual_line + "\n";
    return out;
}

}  // namespace skysim
