#include "skysim/scenario.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Overlay VoIP network simulator"};
    app.require_subcommand(1);

    std::string scenario_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> until;
    std::string trace_out;
    std::string metrics_out;
    bool strict = false;
    auto* run_cmd = app.add_subcommand("run", "Run a scenario");
    run_cmd->add_option("scenario", scenario_path, "Scenario file")->required();
    run_cmd->add_option("--seed", seed, "Override the scenario seed");
    run_cmd->add_option("--until", until, "Simulated end time in ms");
    run_cmd->add_option("--trace-out", trace_out, "Write the trace here instead of stdout");
    run_cmd->add_option("--metrics-out", metrics_out, "Write the metrics JSON here");
    run_cmd->add_flag("--strict-firewall", strict, "Firewalled nodes may only connect out to TCP 80/443");

    std::string diff_a;
    std::string diff_b;
    auto* diff_cmd = app.add_subcommand("diff-trace", "Compare a trace against a golden trace");
    diff_cmd->add_option("actual", diff_a)->required();
    diff_cmd->add_option("golden", diff_b)->required();

    std::string validate_path;
    auto* validate_cmd = app.add_subcommand("validate", "Parse and check a scenario");
    validate_cmd->add_option("scenario", validate_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*validate_cmd) {
            skysim::parse_scenario(read_file(validate_path));
            std::cout << validate_path << ": ok\n";
            return 0;
        }
        if (*diff_cmd) {
            auto d = skysim::diff_trace_files(diff_a, diff_b);
            std::cout << d.describe();
            switch (d.outcome) {
            case skysim::DiffOutcome::Match: return 0;
            case skysim::DiffOutcome::MissingGolden: return 1;
            case skysim::DiffOutcome::Diverged: return 2;
            }
        }
        auto scenario = skysim::parse_scenario(read_file(scenario_path));
        skysim::RunOptions opts;
        opts.seed = seed;
        if (until) {
            if (*until < 0) throw std::invalid_argument("--until must not be negative");
            opts.until = skysim::SimTime{*until};
        }
        opts.strict_firewall = strict;
        auto result = skysim::run(scenario, opts);
        if (trace_out.empty()) std::cout << result.trace;
        else write_file(trace_out, result.trace);
        if (!metrics_out.empty()) write_file(metrics_out, result.metrics);
        for (const auto& f : result.failures)
            std::cerr << "assertion failed: " << f.invariant << " at t=" << f.at.count() << ": " << f.detail << "\n";
        return result.ok() ? 0 : 2;
    } catch (const skysim::ScenarioError& e) {
        std::cerr << (validate_path.empty() ? scenario_path : validate_path) << ":" << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
