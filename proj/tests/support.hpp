#pragma once

#include "skysim/scenario.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace skysim::testing {

inline std::string source_dir() { return SKYSIM_SOURCE_DIR; }

inline std::string read_text(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string scenario_path(const std::string& name) { return source_dir() + "/scenarios/" + name + ".scn"; }

inline Scenario load_scenario(const std::string& name) { return parse_scenario(read_text(scenario_path(name))); }

// 40 public super nodes, a login server and the bootstrap list. Append nodes,
// users and actions after it.
inline std::string base_topology(std::uint64_t seed = 1, std::size_t peers = 40)
{
    return "seed " + std::to_string(seed) + "\npeers " + std::to_string(peers) +
           "\nnode login addr=80.0.0.1 role=login port=443\n"
           "bootstrap sn001 sn002 sn003 sn004 sn005 sn006 sn007\n";
}

inline std::unique_ptr<World> world_from(const std::string& text, RunOptions opts = {})
{
    return build_world(parse_scenario(text), opts);
}

inline void run_to(World& w, std::int64_t ms) { w.scheduler().advance_until(SimTime{ms}); }

inline std::size_t count_trace(const World& w, TraceType type, MessageKind kind)
{
    std::size_t n = 0;
    for (const auto& e : w.net().trace())
        if (e.type == type && e.kind == kind) ++n;
    return n;
}

}  // namespace skysim::testing
