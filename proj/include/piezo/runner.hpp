#pragma once

// Scenario files, the simulate-then-analyze pipeline, and run-directory I/O.
//
// A scenario is a JSON document; every field has a default so "{}" is a valid
// scenario. A run directory holds
//   scenario.json   the fully expanded scenario
//   manifest.json   status, failed checks, list of outputs
//   energy.csv      t, energy, dissipations, identity residual
//   analysis.json   decay fit, Lyapunov report, resolvent sweep (when enabled)
//   resolvent.csv   lambda, norm
//   kernel.json, kernel_nodes_damper{1,2}.csv
//   snapshot_<k>.csv and final_state.csv
// All numbers are written with 17 significant digits, and nothing time- or
// host-dependent goes into the files, so identical scenarios give identical bytes.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "piezo/beam_model.hpp"
#include "piezo/frac_diffusive.hpp"
#include "piezo/stability_lab.hpp"
#include "piezo/time_integrator.hpp"

namespace piezo {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "PIEZO_OUTPUT_ROOT";

enum ExitCode : int { kExitPass = 0, kExitInvariant = 1, kExitConfig = 2 };

struct AnalysisFlags {
    bool energy_log = true;
    bool decay_fit = false;
    bool lyapunov = false;
    bool resolvent = false;
    bool kernel_validation = false;

    bool needs_simulation() const { return energy_log || decay_fit || lyapunov; }
    friend bool operator==(const AnalysisFlags&, const AnalysisFlags&) = default;
};

struct ScenarioConfig {
    BeamConfig beam;
    std::size_t n_cells = 100;
    std::size_t n_modes = kReferenceModes;
    std::optional<double> dt;
    double t_end = 10.0;
    std::size_t report_cadence = 1;
    std::vector<double> snapshot_times;
    std::string initial = "fundamental";  ///< library name or snapshot path
    AnalysisFlags analyses;
    std::optional<double> decay_t_lo;  ///< default t_end / 2
    std::optional<double> decay_t_hi;  ///< default t_end
    std::size_t resolvent_points = 40;
    /// Per-step identity residual allowed, relative to the initial energy.
    double residual_tolerance = 1e-2;
    std::string output_dir = "piezo_run";
    fs::path base_dir;  ///< directory of the scenario file; relative paths resolve against it

    double window_lo() const { return decay_t_lo.value_or(0.5 * t_end); }
    double window_hi() const { return decay_t_hi.value_or(t_end); }
    bool initial_is_library() const;
    fs::path initial_path() const;
    fs::path resolved_output_dir() const;

    friend bool operator==(const ScenarioConfig& a, const ScenarioConfig& b) {
        return a.beam == b.beam && a.n_cells == b.n_cells && a.n_modes == b.n_modes && a.dt == b.dt &&
               a.t_end == b.t_end && a.report_cadence == b.report_cadence && a.snapshot_times == b.snapshot_times &&
               a.initial == b.initial && a.analyses == b.analyses && a.decay_t_lo == b.decay_t_lo &&
               a.decay_t_hi == b.decay_t_hi && a.resolvent_points == b.resolvent_points &&
               a.residual_tolerance == b.residual_tolerance && a.output_dir == b.output_dir;
    }
};

inline bool ScenarioConfig::initial_is_library() const {
    const auto& names = initial_condition_names();
    return std::find(names.begin(), names.end(), initial) != names.end();
}

inline fs::path ScenarioConfig::initial_path() const {
    const fs::path p(initial);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

/// Relative output directories land under $PIEZO_OUTPUT_ROOT when it is set.
inline fs::path ScenarioConfig::resolved_output_dir() const {
    const fs::path p(output_dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
    return p;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

/// Collects every problem in one pass instead of stopping at the first.
class FieldReader {
public:
    explicit FieldReader(std::vector<std::string>& errors) : errors_(errors) {}

    bool object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
        if (!j.is_object()) {
            errors_.push_back(path + ": expected an object");
            return false;
        }
        const std::set<std::string> keys(allowed.begin(), allowed.end());
        for (const auto& [k, v] : j.items())
            if (!keys.count(k)) errors_.push_back(join(path, k) + ": unknown field");
        return true;
    }

    void number(const json& j, const std::string& path, const char* key, double& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_number()) {
            errors_.push_back(join(path, key) + ": expected a number");
            return;
        }
        out = v.get<double>();
    }

    void optional_number(const json& j, const std::string& path, const char* key, std::optional<double>& out) {
        if (!j.contains(key) || j.at(key).is_null()) return;
        double v = 0.0;
        number(j, path, key, v);
        if (j.at(key).is_number()) out = v;
    }

    void count(const json& j, const std::string& path, const char* key, std::size_t& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            errors_.push_back(join(path, key) + ": expected a non-negative integer");
            return;
        }
        out = v.get<std::size_t>();
    }

    void boolean(const json& j, const std::string& path, const char* key, bool& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_boolean()) {
            errors_.push_back(join(path, key) + ": expected true or false");
            return;
        }
        out = v.get<bool>();
    }

    void string(const json& j, const std::string& path, const char* key, std::string& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_string()) {
            errors_.push_back(join(path, key) + ": expected a string");
            return;
        }
        out = v.get<std::string>();
    }

    void numbers(const json& j, const std::string& path, const char* key, std::vector<double>& out) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_array()) {
            errors_.push_back(join(path, key) + ": expected an array of numbers");
            return;
        }
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) {
                errors_.push_back(join(path, key) + "[" + std::to_string(i) + "]: expected a number");
                continue;
            }
            out.push_back(v[i].get<double>());
        }
    }

    static std::string join(const std::string& path, const std::string& key) {
        return path.empty() ? key : path + "." + key;
    }

private:
    std::vector<std::string>& errors_;
};

inline void read_damper(FieldReader& r, const json& j, const std::string& path, FracParams& p) {
    if (!r.object(j, path, {"a", "eta", "gain"})) return;
    r.number(j, path, "a", p.a);
    r.number(j, path, "eta", p.eta);
    r.number(j, path, "gain", p.gain);
}

}  // namespace detail

/// Builds a scenario from parsed JSON. Throws ConfigError listing every problem.
inline ScenarioConfig scenario_from_json(const json& j, const fs::path& base_dir = {}) {
    std::vector<std::string> errors;
    detail::FieldReader r(errors);
    ScenarioConfig c;
    c.base_dir = base_dir;
    if (!r.object(j, "", {"schema_version", "preset", "beam", "grid", "time", "initial", "analyses", "decay_window",
                          "resolvent_points", "residual_tolerance", "output_dir"}))
        throw ConfigError(std::move(errors));

    if (j.contains("schema_version")) {
        std::string v;
        r.string(j, "", "schema_version", v);
        if (!v.empty() && v.substr(0, v.find('.')) != "1")
            errors.push_back("schema_version: unsupported major version '" + v + "'");
    }
    if (j.contains("preset")) {
        std::string preset;
        r.string(j, "", "preset", preset);
        if (preset == "paper-thermal") {
            c.beam = BeamConfig::paper_thermal();
        } else if (preset == "paper-nonthermal") {
            c.beam = BeamConfig::paper_nonthermal();
        } else if (!preset.empty()) {
            errors.push_back("preset: unknown preset '" + preset + "' (paper-nonthermal, paper-thermal)");
        }
    }
    if (j.contains("beam")) {
        const json& b = j.at("beam");
        if (r.object(b, "beam", {"rho", "alpha", "beta", "gamma", "mag_mu", "delta", "c_heat", "kappa", "length",
                                 "thermal", "damper1", "damper2"})) {
            r.number(b, "beam", "rho", c.beam.rho);
            r.number(b, "beam", "alpha", c.beam.alpha);
            r.number(b, "beam", "beta", c.beam.beta);
            r.number(b, "beam", "gamma", c.beam.gamma);
            r.number(b, "beam", "mag_mu", c.beam.mag_mu);
            r.number(b, "beam", "delta", c.beam.delta);
            r.number(b, "beam", "c_heat", c.beam.c_heat);
            r.number(b, "beam", "kappa", c.beam.kappa);
            r.number(b, "beam", "length", c.beam.length);
            r.boolean(b, "beam", "thermal", c.beam.thermal);
            if (b.contains("damper1")) detail::read_damper(r, b.at("damper1"), "beam.damper1", c.beam.frac1);
            if (b.contains("damper2")) detail::read_damper(r, b.at("damper2"), "beam.damper2", c.beam.frac2);
        }
    }
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        if (r.object(g, "grid", {"n_cells", "n_modes"})) {
            r.count(g, "grid", "n_cells", c.n_cells);
            r.count(g, "grid", "n_modes", c.n_modes);
        }
    }
    if (j.contains("time")) {
        const json& t = j.at("time");
        if (r.object(t, "time", {"dt", "t_end", "report_cadence", "snapshot_times"})) {
            r.optional_number(t, "time", "dt", c.dt);
            r.number(t, "time", "t_end", c.t_end);
            r.count(t, "time", "report_cadence", c.report_cadence);
            r.numbers(t, "time", "snapshot_times", c.snapshot_times);
        }
    }
    r.string(j, "", "initial", c.initial);
    if (j.contains("analyses")) {
        const json& a = j.at("analyses");
        if (r.object(a, "analyses", {"energy_log", "decay_fit", "lyapunov", "resolvent", "kernel_validation"})) {
            r.boolean(a, "analyses", "energy_log", c.analyses.energy_log);
            r.boolean(a, "analyses", "decay_fit", c.analyses.decay_fit);
            r.boolean(a, "analyses", "lyapunov", c.analyses.lyapunov);
            r.boolean(a, "analyses", "resolvent", c.analyses.resolvent);
            r.boolean(a, "analyses", "kernel_validation", c.analyses.kernel_validation);
        }
    }
    if (j.contains("decay_window")) {
        const json& w = j.at("decay_window");
        if (r.object(w, "decay_window", {"t_lo", "t_hi"})) {
            r.optional_number(w, "decay_window", "t_lo", c.decay_t_lo);
            r.optional_number(w, "decay_window", "t_hi", c.decay_t_hi);
        }
    }
    r.count(j, "", "resolvent_points", c.resolvent_points);
    r.number(j, "", "residual_tolerance", c.residual_tolerance);
    r.string(j, "", "output_dir", c.output_dir);

    // semantic checks
    for (auto& v : c.beam.violations("beam.")) errors.push_back(std::move(v));
    if (c.n_cells < 8) errors.push_back("grid.n_cells must be >= 8");
    if (c.n_modes < 2) errors.push_back("grid.n_modes must be >= 2");
    if (c.dt && !(*c.dt > 0.0)) errors.push_back("time.dt must be > 0");
    if (!(c.t_end >= 0.0) || !std::isfinite(c.t_end)) errors.push_back("time.t_end must be >= 0");
    if (c.report_cadence < 1) errors.push_back("time.report_cadence must be >= 1");
    for (double s : c.snapshot_times)
        if (!(s >= 0.0 && s <= c.t_end)) errors.push_back("time.snapshot_times: entries must lie in [0, t_end]");
    if (!c.initial_is_library()) {
        std::error_code ec;
        if (!fs::is_regular_file(c.initial_path(), ec))
            errors.push_back("initial: '" + c.initial + "' is neither a library state nor a readable snapshot file");
    }
    if (c.analyses.lyapunov) {
        if (!c.beam.thermal) errors.push_back("analyses.lyapunov requires beam.thermal = true");
        if (!(c.beam.gamma > 0.0)) errors.push_back("analyses.lyapunov requires beam.gamma > 0");
        if (c.beam.thermal && !(c.beam.delta > 0.0)) errors.push_back("analyses.lyapunov requires beam.delta > 0");
        if (!(c.beam.frac1.gain > 0.0 && c.beam.frac2.gain > 0.0))
            errors.push_back("analyses.lyapunov requires both damper gains > 0");
    }
    if (c.analyses.decay_fit) {
        if (!(c.window_lo() > 0.0)) errors.push_back("decay_window.t_lo must be > 0");
        if (!(c.window_hi() > c.window_lo())) errors.push_back("decay_window: t_hi must exceed t_lo");
        if (c.window_hi() > c.t_end) errors.push_back("decay_window.t_hi must be <= time.t_end");
    }
    if (c.analyses.resolvent && c.resolvent_points < 2) errors.push_back("resolvent_points must be >= 2");
    if (!(c.residual_tolerance > 0.0)) errors.push_back("residual_tolerance must be > 0");
    if (c.output_dir.empty()) errors.push_back("output_dir must not be empty");

    if (!errors.empty()) throw ConfigError(std::move(errors));
    return c;
}

inline ScenarioConfig parse_config(const std::string& text, const fs::path& base_dir = {},
                                   const std::string& where = "config") {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return scenario_from_json(j, base_dir);
}

inline ScenarioConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.parent_path(), path.string());
}

inline json to_json(const FracParams& p) { return {{"a", p.a}, {"eta", p.eta}, {"gain", p.gain}}; }

/// Every field written explicitly, so the result loads back to an equal scenario.
inline json to_json(const ScenarioConfig& c) {
    const BeamConfig& b = c.beam;
    json j;
    j["schema_version"] = kSchemaVersion;
    j["beam"] = {{"rho", b.rho},       {"alpha", b.alpha},     {"beta", b.beta},       {"gamma", b.gamma},
                 {"mag_mu", b.mag_mu}, {"delta", b.delta},     {"c_heat", b.c_heat},   {"kappa", b.kappa},
                 {"length", b.length}, {"thermal", b.thermal}, {"damper1", to_json(b.frac1)},
                 {"damper2", to_json(b.frac2)}};
    j["grid"] = {{"n_cells", c.n_cells}, {"n_modes", c.n_modes}};
    j["time"] = {{"dt", c.dt ? json(*c.dt) : json(nullptr)},
                 {"t_end", c.t_end},
                 {"report_cadence", c.report_cadence},
                 {"snapshot_times", c.snapshot_times}};
    j["initial"] = c.initial;
    j["analyses"] = {{"energy_log", c.analyses.energy_log},
                     {"decay_fit", c.analyses.decay_fit},
                     {"lyapunov", c.analyses.lyapunov},
                     {"resolvent", c.analyses.resolvent},
                     {"kernel_validation", c.analyses.kernel_validation}};
    j["decay_window"] = {{"t_lo", c.decay_t_lo ? json(*c.decay_t_lo) : json(nullptr)},
                         {"t_hi", c.decay_t_hi ? json(*c.decay_t_hi) : json(nullptr)}};
    j["resolvent_points"] = c.resolvent_points;
    j["residual_tolerance"] = c.residual_tolerance;
    j["output_dir"] = c.output_dir;
    return j;
}

/// JSON text with every double at 17 significant digits.
inline std::string dump_json(const json& j) {
    std::ostringstream os;
    os.precision(17);
    os << std::setw(2) << j << '\n';
    return os.str();
}

inline std::string serialize_config(const ScenarioConfig& c) { return dump_json(to_json(c)); }

// ---------------------------------------------------------------------------
// Energy log

inline void write_energy_csv(std::ostream& os, const std::vector<EnergyReport>& reports) {
    os << "# schema_version " << kSchemaVersion << '\n';
    os << "t,energy,boundary_dissipation,thermal_dissipation,identity_residual\n";
    for (const auto& r : reports)
        os << detail::fmt17(r.t) << ',' << detail::fmt17(r.energy) << ',' << detail::fmt17(r.boundary_dissipation)
           << ',' << detail::fmt17(r.thermal_dissipation) << ',' << detail::fmt17(r.identity_residual) << '\n';
}

/// Column-oriented table read back from a run CSV.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw DomainError("column '" + name + "' not found");
    }
    std::vector<double> values(std::size_t col) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r[col]);
        return out;
    }
};

/// Reads a "# schema_version" tagged CSV; rejects other major versions.
inline Table read_csv_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open '" + path.string() + "'");
    Table t;
    std::string line;
    bool saw_version = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string key, value;
            ls >> key >> value;
            if (key == "schema_version") {
                if (value.substr(0, value.find('.')) != "1")
                    throw DomainError(where + ": unsupported schema_version '" + value + "'");
                saw_version = true;
            }
            continue;
        }
        auto cells = detail::split_csv(line);
        if (t.columns.empty()) {
            t.columns = std::move(cells);
            continue;
        }
        if (cells.size() != t.columns.size()) throw DomainError(where + ": expected " + std::to_string(t.columns.size()) + " fields");
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) row.push_back(detail::parse_double(c, where));
        t.rows.push_back(std::move(row));
    }
    if (!saw_version) throw DomainError(path.string() + ": missing schema_version");
    return t;
}

inline std::vector<EnergyReport> read_energy_csv(const fs::path& path) {
    const Table t = read_csv_table(path);
    const std::size_t ct = t.column("t"), ce = t.column("energy"), cb = t.column("boundary_dissipation"),
                      cth = t.column("thermal_dissipation"), cr = t.column("identity_residual");
    std::vector<EnergyReport> out;
    for (const auto& r : t.rows) out.push_back({r[ct], r[ce], r[cb], r[cth], r[cr]});
    return out;
}

// ---------------------------------------------------------------------------
// Analysis payloads

inline json to_json(const DecayFit& f) {
    return {{"model", to_string(f.model)},
            {"rate_omega", f.rate_omega},
            {"exponent_p", f.exponent_p},
            {"fit_quality", {{"exponential", f.r2_exponential}, {"polynomial", f.r2_polynomial}}},
            {"window", {f.t_lo, f.t_hi}},
            {"samples", f.samples}};
}

inline json to_json(const LyapunovReport& r) {
    const auto& k = r.constants;
    const auto& co = r.coefficients;
    return {{"constants",
             {{"N", k.N}, {"N1", k.N1}, {"N2", k.N2}, {"N3", k.N3}, {"N4", k.N4}, {"eta1", k.eta1}, {"eta2", k.eta2},
              {"eta3", k.eta3}, {"eta4", k.eta4}, {"Cp", k.Cp}, {"M", k.M}}},
            {"lambda", std::vector<double>(std::begin(co.lambda), std::end(co.lambda))},
            {"N0", co.n0},
            {"m1", r.m1},
            {"m2", r.m2},
            {"sandwich_holds", r.sandwich_holds},
            {"steps", r.steps},
            {"derivative_fraction", r.derivative_fraction},
            {"required_fraction", r.required_fraction},
            {"passed", r.passed()}};
}

inline json to_json(const KernelValidation& v) {
    json moments = json::array(), seconds = json::array(), caputo = json::array();
    for (const auto& m : v.moments)
        moments.push_back({{"lambda", m.lam}, {"discrete", m.discrete}, {"exact", m.exact}, {"rel_error", m.rel_error()}});
    for (const auto& m : v.second_moments)
        seconds.push_back({{"lambda", m.lam}, {"discrete", m.discrete}, {"exact", m.exact}, {"rel_error", m.rel_error()}});
    for (const auto& c : v.caputo) caputo.push_back({{"signal", c.signal}, {"rel_l2", c.rel_l2}});
    return {{"params", to_json(v.params)},
            {"n_modes", v.n_modes},
            {"moments", moments},
            {"second_moments", seconds},
            {"caputo", caputo},
            {"passed", v.passed()}};
}

inline void write_kernel_nodes(std::ostream& os, const DiffusiveOperator& op) {
    os << "# schema_version " << kSchemaVersion << '\n';
    os << "k,xi,weight,mu\n";
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(op.size()); ++k)
        os << k << ',' << detail::fmt17(op.nodes[k]) << ',' << detail::fmt17(op.weights[k]) << ','
           << detail::fmt17(op.kernel_values[k]) << '\n';
}

// ---------------------------------------------------------------------------
// Pipeline

struct Failure {
    std::string check;
    std::string message;
};

struct ScenarioOutcome {
    int exit_code = kExitPass;
    fs::path output_dir;
    std::vector<Failure> failures;
    std::vector<std::string> outputs;
    json analysis = json::object();
    std::optional<RunResult> run;

    bool passed() const { return exit_code == kExitPass; }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DomainError("cannot write '" + path.string() + "'");
    out << text;
}

inline json manifest_json(const ScenarioOutcome& o, const std::string& verb) {
    json failures = json::array();
    for (const auto& f : o.failures) failures.push_back({{"check", f.check}, {"message", f.message}});
    return {{"schema_version", kSchemaVersion},
            {"verb", verb},
            {"status", o.exit_code == kExitPass ? "pass" : "fail"},
            {"exit_code", o.exit_code},
            {"failures", failures},
            {"outputs", o.outputs}};
}

inline void finish(ScenarioOutcome& o, const std::string& verb) {
    if (!o.failures.empty() && o.exit_code == kExitPass) o.exit_code = kExitInvariant;
    o.outputs.push_back("manifest.json");
    write_text(o.output_dir / "manifest.json", dump_json(manifest_json(o, verb)));
}

inline void kernel_stage(const ScenarioConfig& cfg, ScenarioOutcome& o) {
    json kernels = json::object();
    const std::pair<const char*, const FracParams*> banks[] = {{"damper1", &cfg.beam.frac1},
                                                               {"damper2", &cfg.beam.frac2}};
    for (const auto& [name, params] : banks) {
        const KernelValidation v = validate_kernel(*params, cfg.n_modes);
        kernels[name] = to_json(v);
        if (!v.passed()) o.failures.push_back({"kernel_validation", std::string(name) + " failed the oracle suite"});
        const std::string file = std::string("kernel_nodes_") + name + ".csv";
        std::ostringstream os;
        write_kernel_nodes(os, build_quadrature(*params, cfg.n_modes));
        write_text(o.output_dir / file, os.str());
        o.outputs.push_back(file);
    }
    write_text(o.output_dir / "kernel.json", dump_json(kernels));
    o.outputs.push_back("kernel.json");
    o.analysis["kernel_validation"] = kernels;
}

inline BeamState scenario_initial_state(const ScenarioConfig& cfg, const Grid& grid) {
    if (cfg.initial_is_library()) return initial_condition(cfg.initial, cfg.beam, grid, cfg.n_modes);
    BeamState s = read_snapshot(cfg.initial_path().string());
    if (static_cast<std::size_t>(s.v.size()) != grid.n_cells + 1)
        throw ConfigError("initial: snapshot has " + std::to_string(s.v.size() - 1) + " cells, grid.n_cells is " +
                          std::to_string(grid.n_cells));
    if (s.damper1.size() != cfg.n_modes || s.damper2.size() != cfg.n_modes)
        throw ConfigError("initial: snapshot damper banks do not have grid.n_modes modes");
    if (!(s.damper1.params == cfg.beam.frac1) || !(s.damper2.params == cfg.beam.frac2))
        throw ConfigError("initial: snapshot damper parameters differ from beam.damper1/damper2");
    if (s.thermal() != cfg.beam.thermal) throw ConfigError("initial: snapshot thermal flag differs from beam.thermal");
    return s;
}

inline void simulate_stage(const ScenarioConfig& cfg, ScenarioOutcome& o) {
    const Grid grid(cfg.n_cells, cfg.beam.length);
    const BeamState init = scenario_initial_state(cfg, grid);
    RunOptions opt;
    opt.dt = cfg.dt;
    opt.t_end = cfg.t_end;
    // the Lyapunov derivative check needs consecutive steps
    opt.report_cadence = cfg.analyses.lyapunov ? 1 : cfg.report_cadence;
    opt.snapshot_times = cfg.snapshot_times;

    std::vector<LyapunovSample> samples;
    std::vector<Observer> observers;
    if (cfg.analyses.lyapunov) observers.push_back(lyapunov_recorder(cfg.beam, grid, samples));
    RunResult res = run(cfg.beam, grid, init, opt, observers);

    if (!res.energy_monotone()) {
        std::ostringstream m;
        m.precision(3);
        m << res.energy_increases << " steps increased the energy (worst relative increase " << res.worst_increase
          << ")";
        o.failures.push_back({"energy_monotone", m.str()});
    }
    const double e0 = res.reports.front().energy;
    if (e0 > 0.0 && res.max_identity_residual > cfg.residual_tolerance * e0) {
        std::ostringstream m;
        m.precision(3);
        m << "max identity residual " << res.max_identity_residual << " exceeds " << cfg.residual_tolerance
          << " * E(0)";
        o.failures.push_back({"identity_residual", m.str()});
    }
    o.analysis["run"] = {{"dt", res.dt},
                         {"steps", res.steps},
                         {"energy_initial", e0},
                         {"energy_final", res.reports.back().energy},
                         {"energy_increases", res.energy_increases},
                         {"max_identity_residual", res.max_identity_residual}};

    std::ostringstream csv;
    write_energy_csv(csv, res.reports);
    write_text(o.output_dir / "energy.csv", csv.str());
    o.outputs.push_back("energy.csv");
    for (std::size_t k = 0; k < res.snapshots.size(); ++k) {
        const std::string file = "snapshot_" + std::to_string(k) + ".csv";
        write_snapshot((o.output_dir / file).string(), grid, res.snapshots[k]);
        o.outputs.push_back(file);
    }
    write_snapshot((o.output_dir / "final_state.csv").string(), grid, res.final_state);
    o.outputs.push_back("final_state.csv");

    if (cfg.analyses.decay_fit) {
        try {
            o.analysis["decay"] = to_json(fit_decay(res.reports, cfg.window_lo(), cfg.window_hi()));
        } catch (const DomainError& e) {
            o.failures.push_back({"decay_fit", e.what()});
        }
    }
    if (cfg.analyses.lyapunov) {
        const LyapunovConfig k = choose_lyapunov_constants(cfg.beam);
        const LyapunovReport rep = lyapunov_check(cfg.beam, samples, k);
        o.analysis["lyapunov"] = to_json(rep);
        if (!rep.sandwich_holds) o.failures.push_back({"lyapunov_sandwich", "L/E left (0, inf) during the run"});
        if (!(rep.derivative_fraction >= rep.required_fraction))
            o.failures.push_back({"lyapunov_derivative", "dL/dt <= -N0 E held on only " +
                                                             std::to_string(rep.derivative_fraction) + " of steps"});
    }
    o.run = std::move(res);
}

inline void resolvent_stage(const ScenarioConfig& cfg, ScenarioOutcome& o) {
    const Grid grid(cfg.n_cells, cfg.beam.length);
    const ResolventStudy st = resolvent_study(cfg.beam, grid, cfg.n_modes, cfg.resolvent_points);
    json sweep = json::array();
    std::ostringstream csv;
    csv << "# schema_version " << kSchemaVersion << '\n' << "lambda,norm\n";
    for (const auto& p : st.sweep) {
        sweep.push_back({{"lambda", p.lambda}, {"norm", p.singular ? json(nullptr) : json(p.norm)}});
        csv << fmt17(p.lambda) << ',' << (p.singular ? std::string("inf") : fmt17(p.norm)) << '\n';
    }
    write_text(o.output_dir / "resolvent.csv", csv.str());
    o.outputs.push_back("resolvent.csv");
    o.analysis["resolvent"] = sweep;
    o.analysis["resolvent_growth"] = {{"norm_at_zero", st.norm_at_zero},
                                      {"lambda_max", st.lambda_hi},
                                      {"slope", st.slope.slope},
                                      {"slope_r2", st.slope.r2},
                                      {"peaks_used", st.slope.used},
                                      {"peaks_rejected", st.slope.rejected}};
    const bool damped = cfg.beam.frac1.gain > 0.0 && cfg.beam.frac2.gain > 0.0;
    if (damped && !st.sweep_finite())
        o.failures.push_back({"resolvent_finite", "damped generator is singular at a sampled frequency"});
}

}  // namespace detail

/// Runs the enabled stages, writes every artifact, and converts failed checks into
/// exit code 1. Configuration problems surface as ConfigError (exit code 2).
inline ScenarioOutcome run_scenario(const ScenarioConfig& cfg) {
    ScenarioOutcome o;
    o.output_dir = cfg.resolved_output_dir();
    fs::create_directories(o.output_dir);
    detail::write_text(o.output_dir / "scenario.json", serialize_config(cfg));
    o.outputs.push_back("scenario.json");
    try {
        if (cfg.analyses.kernel_validation) detail::kernel_stage(cfg, o);
        if (cfg.analyses.needs_simulation()) detail::simulate_stage(cfg, o);
        if (cfg.analyses.resolvent) detail::resolvent_stage(cfg, o);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        o.failures.push_back({"exception", e.what()});
    }
    if (o.analysis.size() > 0) {
        json a = o.analysis;
        a["schema_version"] = kSchemaVersion;
        detail::write_text(o.output_dir / "analysis.json", dump_json(a));
        o.outputs.push_back("analysis.json");
    }
    detail::finish(o, "run");
    return o;
}

/// The kernel oracle suite alone, whatever the analysis flags say.
inline ScenarioOutcome validate_kernel_scenario(const ScenarioConfig& cfg) {
    ScenarioOutcome o;
    o.output_dir = cfg.resolved_output_dir();
    fs::create_directories(o.output_dir);
    detail::kernel_stage(cfg, o);
    detail::finish(o, "validate-kernel");
    return o;
}

// ---------------------------------------------------------------------------
// Post-hoc analysis and comparison of run directories

struct RunAnalysis {
    std::size_t samples = 0;
    std::size_t energy_increases = 0;
    double max_identity_residual = 0.0;
    std::optional<DecayFit> decay;
    std::string decay_error;
};

/// Re-reads energy.csv from a run directory: monotonicity and a decay fit over
/// [t_lo, t_hi] (default: second half of the record).
inline RunAnalysis analyze_run(const fs::path& dir, std::optional<double> t_lo = {}, std::optional<double> t_hi = {},
                               double monotone_tolerance = 1e-13) {
    const auto reports = read_energy_csv(dir / "energy.csv");
    RunAnalysis a;
    a.samples = reports.size();
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].energy > reports[i - 1].energy * (1.0 + monotone_tolerance) + std::numeric_limits<double>::min())
            ++a.energy_increases;
        a.max_identity_residual = std::max(a.max_identity_residual, reports[i].identity_residual);
    }
    if (reports.size() >= 2) {
        const double end = reports.back().t;
        try {
            a.decay = fit_decay(reports, t_lo.value_or(0.5 * end), t_hi.value_or(end));
        } catch (const DomainError& e) {
            a.decay_error = e.what();
        }
    }
    return a;
}

inline json to_json(const RunAnalysis& a) {
    json j = {{"schema_version", kSchemaVersion},
              {"samples", a.samples},
              {"energy_increases", a.energy_increases},
              {"max_identity_residual", a.max_identity_residual}};
    if (a.decay) j["decay"] = to_json(*a.decay);
    if (!a.decay_error.empty()) j["decay_error"] = a.decay_error;
    return j;
}

struct ColumnDiff {
    std::string column;
    double max_abs = 0.0;
    double max_rel = 0.0;  ///< relative to max |column of a| over the overlap
};

struct CompareReport {
    std::vector<ColumnDiff> columns;
    std::size_t points = 0;  ///< samples of a inside the common time range
    /// Earliest t such that energy_a < energy_b at every later compared time; empty if never.
    std::optional<double> a_below_b_from;

    const ColumnDiff& column(const std::string& name) const {
        for (const auto& c : columns)
            if (c.column == name) return c;
        throw DomainError("no column '" + name + "' in comparison");
    }
};

/// Compares the energy logs of two runs. Run b is linearly interpolated onto the times
/// of run a over their common range. Schema or column mismatch throws DomainError.
inline CompareReport compare_runs(const fs::path& dir_a, const fs::path& dir_b) {
    const Table a = read_csv_table(dir_a / "energy.csv");
    const Table b = read_csv_table(dir_b / "energy.csv");
    if (a.columns != b.columns) throw DomainError("compare: runs have different energy.csv columns");
    const std::size_t ct = a.column("t");
    const auto tb = b.values(ct);
    if (a.rows.empty() || tb.empty()) throw DomainError("compare: empty energy log");
    const double lo = std::max(a.rows.front()[ct], tb.front());
    const double hi = std::min(a.rows.back()[ct], tb.back());
    const double slack = 1e-9 * std::max(1.0, std::abs(hi));

    CompareReport rep;
    std::vector<double> scale(a.columns.size(), 0.0);
    for (std::size_t c = 0; c < a.columns.size(); ++c) rep.columns.push_back({a.columns[c], 0.0, 0.0});
    const std::size_t ce = a.column("energy");
    std::optional<double> below_from;
    for (const auto& row : a.rows) {
        const double t = row[ct];
        if (t < lo - slack || t > hi + slack) continue;
        ++rep.points;
        auto it = std::lower_bound(tb.begin(), tb.end(), t);
        std::size_t k = static_cast<std::size_t>(it - tb.begin());
        if (k >= tb.size()) k = tb.size() - 1;
        double w = 1.0;
        std::size_t k0 = k;
        if (k > 0 && tb[k] != t) {
            k0 = k - 1;
            w = (t - tb[k0]) / (tb[k] - tb[k0]);
        }
        for (std::size_t c = 0; c < a.columns.size(); ++c) {
            const double vb = (1.0 - w) * b.rows[k0][c] + w * b.rows[k][c];
            rep.columns[c].max_abs = std::max(rep.columns[c].max_abs, std::abs(row[c] - vb));
            scale[c] = std::max(scale[c], std::abs(row[c]));
            if (c == ce) {
                if (row[c] < vb) {
                    if (!below_from) below_from = t;
                } else {
                    below_from.reset();
                }
            }
        }
    }
    for (std::size_t c = 0; c < a.columns.size(); ++c)
        rep.columns[c].max_rel = scale[c] > 0.0 ? rep.columns[c].max_abs / scale[c] : rep.columns[c].max_abs;
    rep.a_below_b_from = below_from;
    return rep;
}

inline json to_json(const CompareReport& r) {
    json cols = json::array();
    for (const auto& c : r.columns) cols.push_back({{"column", c.column}, {"max_abs", c.max_abs}, {"max_rel", c.max_rel}});
    return {{"schema_version", kSchemaVersion},
            {"points", r.points},
            {"columns", cols},
            {"a_below_b_from", r.a_below_b_from ? json(*r.a_below_b_from) : json(nullptr)}};
}

}  // namespace piezo
