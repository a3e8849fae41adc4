// piezo_lab: run beam scenarios, validate the fractional kernel, analyze and
// compare run directories.
//
// Exit codes: 0 all checks passed, 1 an invariant check failed, 2 bad input.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "piezo/piezo.hpp"

namespace {

void print_outcome(const piezo::ScenarioOutcome& o) {
    std::cout << (o.passed() ? "PASS" : "FAIL") << "  " << o.output_dir.string() << '\n';
    for (const auto& f : o.failures) std::cout << "  " << f.check << ": " << f.message << '\n';
}

piezo::ScenarioConfig load(const std::string& path, const std::string& output_dir) {
    auto cfg = piezo::load_config(path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Piezoelectric beam with fractional boundary damping"};
    app.require_subcommand(1);

    std::string config, output_dir, dir_a, dir_b;
    std::optional<double> t_lo, t_hi, abs_tol, rel_tol;

    auto* run = app.add_subcommand("run", "Simulate and analyze a scenario");
    run->add_option("config", config, "Scenario JSON file")->required();
    run->add_option("-o,--output-dir", output_dir, "Override output_dir");

    auto* kernel = app.add_subcommand("validate-kernel", "Run the kernel oracle suite for a scenario's dampers");
    kernel->add_option("config", config, "Scenario JSON file")->required();
    kernel->add_option("-o,--output-dir", output_dir, "Override output_dir");

    auto* show = app.add_subcommand("show-config", "Print the fully expanded scenario");
    show->add_option("config", config, "Scenario JSON file")->required();

    auto* analyze = app.add_subcommand("analyze", "Re-check and fit the energy log of a run directory");
    analyze->add_option("run_dir", dir_a, "Run directory")->required();
    analyze->add_option("--t-lo", t_lo, "Fit window start (default: half the record)");
    analyze->add_option("--t-hi", t_hi, "Fit window end (default: end of the record)");

    auto* compare = app.add_subcommand("compare", "Diff the energy logs of two run directories");
    compare->add_option("dir_a", dir_a, "First run directory")->required();
    compare->add_option("dir_b", dir_b, "Second run directory")->required();
    compare->add_option("--abs-tol", abs_tol, "Fail if any column's max abs deviation exceeds this");
    compare->add_option("--rel-tol", rel_tol, "Fail if any column's max relative deviation exceeds this");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? piezo::kExitPass : piezo::kExitConfig;
    }

    try {
        if (*run) {
            const auto o = piezo::run_scenario(load(config, output_dir));
            print_outcome(o);
            return o.exit_code;
        }
        if (*kernel) {
            const auto o = piezo::validate_kernel_scenario(load(config, output_dir));
            print_outcome(o);
            return o.exit_code;
        }
        if (*show) {
            std::cout << piezo::serialize_config(piezo::load_config(config));
            return piezo::kExitPass;
        }
        if (*analyze) {
            const auto a = piezo::analyze_run(dir_a, t_lo, t_hi);
            std::cout << piezo::dump_json(piezo::to_json(a));
            return a.energy_increases == 0 && a.decay_error.empty() ? piezo::kExitPass : piezo::kExitInvariant;
        }
        if (*compare) {
            const auto r = piezo::compare_runs(dir_a, dir_b);
            std::cout << piezo::dump_json(piezo::to_json(r));
            for (const auto& c : r.columns) {
                if (abs_tol && c.max_abs > *abs_tol) return piezo::kExitInvariant;
                if (rel_tol && c.max_rel > *rel_tol) return piezo::kExitInvariant;
            }
            return piezo::kExitPass;
        }
    } catch (const piezo::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return piezo::kExitConfig;
    } catch (const piezo::DomainError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return piezo::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return piezo::kExitInvariant;
    }
    return piezo::kExitConfig;
}
