#pragma once

#include "skysim/world.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace skysim {

struct ScenarioError : std::runtime_error {
    ScenarioError(int line, int column, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line) + ":" + std::to_string(column) + ": " + msg),
          line(line), column(column), message(msg)
    {
    }
    int line;
    int column;
    std::string message;
};

struct ScenarioNode {
    NodeSpec spec;
    Role role = Role::Client;
    std::uint16_t port = 33033;
    Capability capability;
    std::optional<AnswerPolicy> answer;
    bool silent = false;
    int line = 0;
};

struct ScenarioUser {
    std::string name;
    std::string token;
    std::vector<NodeId> nodes;
};

// A host-cache entry: a node id, or a bare address for hosts that do not exist.
struct HcRef {
    std::optional<NodeId> node;
    SocketAddr addr;
};

struct Action {
    SimTime at{0};
    std::string verb;
    std::vector<std::string> args;
    int line = 0;
};

struct Scenario {
    std::uint64_t seed = 1;
    WorldConfig config;
    std::vector<ScenarioNode> nodes;
    std::vector<NodeId> bootstrap;
    std::map<NodeId, std::vector<HcRef>> host_caches;
    std::vector<ScenarioUser> users;
    std::optional<NodeId> login_server;
    std::optional<NodeId> version_server;
    std::vector<Action> timeline;  // sorted by time, then file order
    std::optional<SimTime> until;
};

// Throws ScenarioError carrying the line and column of the first problem.
Scenario parse_scenario(std::string_view text);

struct RunOptions {
    std::optional<std::uint64_t> seed;
    std::optional<SimTime> until;
    bool strict_firewall = false;
};

struct AssertionFailure {
    std::string invariant;
    SimTime at{0};
    std::string detail;
};

struct RunResult {
    std::string trace;
    std::string metrics;  // JSON
    std::vector<AssertionFailure> failures;
    SimTime ended{0};

    bool ok() const { return failures.empty(); }
};

// Builds the world described by `s` without running it. Exposed for tests.
std::unique_ptr<World> build_world(const Scenario& s, const RunOptions& opts = {});

RunResult run(const Scenario& s, const RunOptions& opts = {});

// Metrics document for a finished world.
std::string metrics_json(World& world, SimTime end);

enum class DiffOutcome : std::uint8_t { Match, Diverged, MissingGolden };

struct TraceDiff {
    DiffOutcome outcome = DiffOutcome::Match;
    std::size_t line = 0;  // 1-based first differing line
    std::string actual_line;
    std::string golden_line;
    std::vector<std::string> context;  // common lines leading up to the divergence

    std::string describe() const;
};

TraceDiff diff_trace(std::string_view actual, std::string_view golden);
TraceDiff diff_trace_files(const std::string& actual_path, const std::string& golden_path);

}  // namespace skysim
