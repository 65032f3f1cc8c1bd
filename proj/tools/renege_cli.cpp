#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <renege/renege.hpp>

namespace fs = std::filesystem;
using namespace renege;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitUsage = 64;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> grid_dt;
    std::optional<double> horizon;
    int jobs = 1;
    std::vector<double> snapshots;
    bool plotdata = false;
};

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "scenario JSON file")->required();
    sub->add_option("--out", o.out, "output directory (default: the scenario's output_dir)");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--grid-dt", o.grid_dt, "fluid grid step");
    sub->add_option("--horizon", o.horizon, "time horizon");
    sub->add_option("--jobs", o.jobs, "parallel replications")->check(CLI::PositiveNumber);
    sub->add_option("--snapshot", o.snapshots, "snapshot times")->delimiter(',');
    sub->add_flag("--plotdata", o.plotdata, "also write whitespace-separated x/y columns");
}

ScenarioConfig load(const Options& o) {
    ScenarioConfig cfg = load_scenario(o.config);
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (o.seed) cfg.seed = *o.seed;
    if (o.grid_dt) cfg.grid_dt = *o.grid_dt;
    if (o.horizon) {
        cfg.horizon = *o.horizon;
        std::erase_if(cfg.probe_times, [&](double t) { return t > cfg.horizon; });
        std::erase_if(cfg.snapshot_times, [&](double t) { return t > cfg.horizon; });
        for (double& t : cfg.martingale_times) t = std::min(t, cfg.horizon);
    }
    if (!o.snapshots.empty()) {
        cfg.snapshot_times = o.snapshots;
        std::sort(cfg.snapshot_times.begin(), cfg.snapshot_times.end());
    }
    cfg.validate();
    fs::create_directories(cfg.output_dir);
    return cfg;
}

void write_file(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + p.string());
    f << s;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

int cmd_fluid(const Options& o) {
    const ScenarioConfig cfg = load(o);
    const FluidSolution sol = solve(cfg.fluid_inputs(), cfg.extended_horizon(), cfg.grid_dt);
    const fs::path dir(cfg.output_dir);
    std::ostringstream os;
    sol.write_csv(os);
    write_file(dir / "fluid.csv", os.str());
    if (!cfg.snapshot_times.empty())
        write_file(dir / "fluid-snapshots.json", sol.snapshots_json(cfg.snapshot_times).dump(1) + "\n");
    if (o.plotdata) {
        std::ostringstream p;
        p << "# t X Q K R\n";
        for (std::size_t k = 0; k <= sol.steps(); ++k)
            p << fmt("%.10g", sol.time(k)) << ' ' << fmt("%.10g", sol.X()[k]) << ' ' << fmt("%.10g", sol.Q()[k]) << ' '
              << fmt("%.10g", sol.K()[k]) << ' ' << fmt("%.10g", sol.R()[k]) << '\n';
        write_file(dir / "fluid-plot.dat", p.str());
    }
    std::cout << "wrote " << (dir / "fluid.csv").string() << " (" << sol.steps() + 1 << " rows)\n";
    return 0;
}

int cmd_simulate(const Options& o, std::optional<int> servers) {
    const ScenarioConfig cfg = load(o);
    const int n = servers ? *servers : cfg.n_list.front();
    if (n < 1) throw ConfigError("N must be positive");
    const std::uint64_t seed = o.seed ? *o.seed : derive_seed(cfg.seed, static_cast<std::uint64_t>(n), 0);
    Rng rng(seed);
    SimState state = build_initial_state(n, cfg.x0, cfg.nu0, cfg.eta0, cfg.service, cfg.patience, rng);
    const SimRun run = simulate(std::move(state), cfg.service, cfg.patience, cfg.arrival.source(n), cfg.horizon,
                                cfg.snapshot_times, rng);
    const fs::path dir(cfg.output_dir);
    std::ostringstream os;
    run.write_events_csv(os);
    write_file(dir / "events.csv", os.str());
    if (!cfg.snapshot_times.empty()) write_file(dir / "snapshots.json", run.snapshots_json().dump(1) + "\n");
    if (o.plotdata) {
        std::ostringstream p;
        p << "# t X/N Q/N K/N R/N\n";
        const auto steps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.grid_dt));
        for (std::size_t k = 0; k <= steps; ++k) {
            const double t = cfg.grid_dt * static_cast<double>(k);
            const Counters c = run.at(t);
            p << fmt("%.10g", t) << ' ' << fmt("%.10g", static_cast<double>(c.X) / n) << ' '
              << fmt("%.10g", static_cast<double>(c.Q) / n) << ' ' << fmt("%.10g", static_cast<double>(c.K) / n) << ' '
              << fmt("%.10g", static_cast<double>(c.R) / n) << '\n';
        }
        write_file(dir / "sim-plot.dat", p.str());
    }
    std::cout << "wrote " << (dir / "events.csv").string() << " (" << run.events.size() << " events, seed " << seed
              << ")\n";
    return 0;
}

int cmd_sweep(const Options& o) {
    const ScenarioConfig cfg = load(o);
    const ConvergenceReport rep = run_sweep(cfg, SweepOptions{resolve_jobs(o.jobs), true});
    const fs::path dir(cfg.output_dir);
    std::cout << "N        mean_err_X   mean_err_Q   mean_err_K   mean_err_R\n";
    std::ostringstream plot;
    plot << "# N mean_err_X mean_err_Q mean_err_K mean_err_R\n";
    for (const auto& row : rep.aggregates.at("per_N")) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-8d %-12.6g %-12.6g %-12.6g %-12.6g\n", row.at("N").get<int>(),
                      row.at("mean_err_X").get<double>(), row.at("mean_err_Q").get<double>(),
                      row.at("mean_err_K").get<double>(), row.at("mean_err_R").get<double>());
        std::cout << buf;
        plot << buf;
    }
    if (o.plotdata) write_file(dir / "sweep-plot.dat", plot.str());
    std::cout << "wrote " << (dir / "report.json").string() << "\n";
    return 0;
}

int cmd_diagnose(const Options& o) {
    const ScenarioConfig cfg = load(o);
    const auto rows = martingale_report(cfg, resolve_jobs(o.jobs));
    std::ostringstream csv;
    csv << "N,t,mean_D,rms_D,mean_S,rms_S,mean_R,rms_R\n";
    std::cout << "N        t        mean_D      rms_D       mean_S      rms_S       mean_R      rms_R\n";
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-8d %-8.4g %-11.4g %-11.4g %-11.4g %-11.4g %-11.4g %-11.4g\n", r.servers,
                      r.time, r.mean_d, r.rms_d, r.mean_s, r.rms_s, r.mean_r, r.rms_r);
        std::cout << buf;
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.servers, r.time, r.mean_d,
                      r.rms_d, r.mean_s, r.rms_s, r.mean_r, r.rms_r);
        csv << buf;
    }
    write_file(fs::path(cfg.output_dir) / "martingales.csv", csv.str());
    return 0;
}

int cmd_wait(const Options& o) {
    ScenarioConfig cfg = load(o);
    if (cfg.probe_times.empty()) throw ConfigError("wait needs probe_times in the scenario");
    cfg.snapshot_times.clear();
    const ConvergenceReport rep = run_sweep(cfg, SweepOptions{resolve_jobs(o.jobs), false});
    std::ostringstream csv;
    csv << "N,t,fluid,mean_simulated,mean_abs_gap\n";
    std::cout << "N        t        fluid       mean_sim    mean_|gap|\n";
    for (const auto& row : rep.aggregates.at("per_N")) {
        for (const auto& w : row.at("waits")) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%-8d %-8.4g %-11.5g %-11.5g %-11.5g\n", row.at("N").get<int>(),
                          w.at("t").get<double>(), w.at("fluid").get<double>(), w.at("mean_simulated").get<double>(),
                          w.at("mean_abs_gap").get<double>());
            std::cout << buf;
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", row.at("N").get<int>(),
                          w.at("t").get<double>(), w.at("fluid").get<double>(), w.at("mean_simulated").get<double>(),
                          w.at("mean_abs_gap").get<double>());
            csv << buf;
        }
    }
    write_file(fs::path(cfg.output_dir) / "waits.csv", csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Simulation and fluid limits of the many-server queue with reneging"};
    app.require_subcommand(1);
    Options o;
    std::optional<int> servers;
    auto* fluid = app.add_subcommand("fluid", "solve the fluid equations and export fluid.csv");
    auto* sim = app.add_subcommand("simulate", "simulate one run and export events.csv");
    auto* sweep = app.add_subcommand("sweep", "replication sweep over N with convergence report");
    auto* diag = app.add_subcommand("diagnose", "martingale diagnostics");
    auto* wait = app.add_subcommand("wait", "virtual waiting time comparison at probe times");
    for (auto* s : {fluid, sim, sweep, diag, wait}) add_common(s, o);
    sim->add_option("--servers,-N", servers, "number of servers (default: first entry of N)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*fluid) return cmd_fluid(o);
        if (*sim) return cmd_simulate(o, servers);
        if (*sweep) return cmd_sweep(o);
        if (*diag) return cmd_diagnose(o);
        if (*wait) return cmd_wait(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DomainError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::runtime_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitUsage;
}
