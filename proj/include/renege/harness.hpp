#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dists.hpp"
#include "errors.hpp"
#include "fluid.hpp"
#include "measures.hpp"
#include "rng.hpp"
#include "simulator.hpp"

namespace renege {

// Arrival input: a renewal process (interarrival law, sped up by N in the
// N-server system) or a Poisson process with piecewise-constant rate N * lambda(t).
struct ArrivalSpec {
    std::optional<DistributionModel> interarrival;
    RateSchedule schedule;

    RateSchedule fluid_rate() const {
        if (!interarrival) return schedule;
        const double m = interarrival->mean();
        if (!std::isfinite(m) || !(m > 0.0)) throw ConfigError("interarrival law needs a finite positive mean");
        return RateSchedule(1.0 / m);
    }

    std::unique_ptr<ArrivalSource> source(int servers) const {
        if (interarrival) return std::make_unique<RenewalArrivals>(*interarrival, static_cast<double>(servers));
        return std::make_unique<PoissonScheduleArrivals>(schedule.pieces(), static_cast<double>(servers));
    }

    static ArrivalSpec from_json(const nlohmann::json& j) {
        ArrivalSpec a;
        if (!j.is_object()) throw ConfigError("arrival must be an object");
        const int given = static_cast<int>(j.contains("interarrival")) + static_cast<int>(j.contains("rate")) +
                          static_cast<int>(j.contains("rate_schedule"));
        if (given != 1) throw ConfigError("arrival needs exactly one of interarrival, rate, rate_schedule");
        if (j.contains("interarrival")) {
            a.interarrival = DistributionModel::from_json(j.at("interarrival"));
            if (a.interarrival->mass_at_infinity() > 0.0)
                throw ConfigError("interarrival law cannot have mass at infinity");
        } else if (j.contains("rate")) {
            a.schedule = RateSchedule(j.at("rate").get<double>());
        } else {
            a.schedule = RateSchedule(j.at("rate_schedule").get<std::vector<std::pair<double, double>>>());
        }
        return a;
    }

    nlohmann::json to_json() const {
        if (interarrival) return {{"interarrival", interarrival->to_json()}};
        return {{"rate_schedule", schedule.to_json()}};
    }
};

struct ScenarioConfig {
    std::string name = "scenario";
    ArrivalSpec arrival;
    DistributionModel service{Exponential{1.0}};
    DistributionModel patience{Exponential{1.0}};
    double x0 = 0.0;
    PiecewiseMeasure nu0 = PiecewiseMeasure::zero();
    PiecewiseMeasure eta0 = PiecewiseMeasure::zero();
    std::vector<int> n_list{100};
    int replications = 1;
    std::uint64_t seed = 1;
    double horizon = 10.0;
    double grid_dt = 1e-3;
    std::vector<double> snapshot_times;
    std::vector<double> probe_times;
    std::vector<double> martingale_times;
    double wait_margin = 5.0;
    std::string output_dir = "out";
    bool write_runs = true;

    FluidInputs fluid_inputs() const {
        FluidInputs in;
        in.arrival = arrival.fluid_rate();
        in.x0 = x0;
        in.nu0 = nu0;
        in.eta0 = eta0;
        in.service = service;
        in.patience = patience;
        return in;
    }

    // Simulation and fluid horizon: long enough to resolve waits at the probes.
    double extended_horizon() const { return probe_times.empty() ? horizon : horizon + wait_margin; }

    void validate() const {
        if (n_list.empty()) throw ConfigError("N list must not be empty");
        for (int n : n_list)
            if (n < 1) throw ConfigError("N values must be positive");
        if (replications < 1) throw ConfigError("replications must be positive");
        if (!(horizon > 0.0) || !(grid_dt > 0.0)) throw ConfigError("horizon and grid_dt must be positive");
        const double steps = horizon / grid_dt;
        if (std::abs(steps - std::round(steps)) > 1e-6 * std::max(1.0, steps))
            throw ConfigError("grid_dt must divide the horizon");
        if (!(wait_margin >= 0.0)) throw ConfigError("wait_margin must be >= 0");
        const double margin_steps = wait_margin / grid_dt;
        if (!probe_times.empty() && std::abs(margin_steps - std::round(margin_steps)) > 1e-6 * std::max(1.0, margin_steps))
            throw ConfigError("grid_dt must divide wait_margin");
        const auto on_grid = [&](double t, const char* what) {
            if (t < 0.0 || t > horizon) throw ConfigError(std::string(what) + " must lie in [0, horizon]");
            const double r = t / grid_dt;
            if (std::abs(r - std::round(r)) > 1e-6) throw ConfigError(std::string(what) + " must be grid points");
        };
        for (double t : snapshot_times) on_grid(t, "snapshot times");
        for (double t : probe_times) on_grid(t, "probe times");
        for (double t : martingale_times)
            if (t < 0.0 || t > horizon) throw ConfigError("martingale times must lie in [0, horizon]");
        if (service.mass_at_infinity() > 0.0) throw ConfigError("service law cannot have mass at infinity");
        fluid_inputs().validate();
    }

    static ScenarioConfig from_json(const nlohmann::json& j) {
        try {
            ScenarioConfig c;
            if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
            c.name = j.value("name", c.name);
            if (!j.contains("arrival") || !j.contains("service") || !j.contains("patience"))
                throw ConfigError("scenario needs arrival, service and patience");
            c.arrival = ArrivalSpec::from_json(j.at("arrival"));
            c.service = DistributionModel::from_json(j.at("service"));
            c.patience = DistributionModel::from_json(j.at("patience"));
            if (j.contains("initial")) {
                const auto& init = j.at("initial");
                c.x0 = init.value("x0", 0.0);
                if (init.contains("nu0")) c.nu0 = PiecewiseMeasure::from_json(init.at("nu0"));
                if (init.contains("eta0")) c.eta0 = PiecewiseMeasure::from_json(init.at("eta0"));
            }
            if (j.contains("N")) c.n_list = j.at("N").get<std::vector<int>>();
            c.replications = j.value("replications", c.replications);
            c.seed = j.value("seed", c.seed);
            c.horizon = j.value("horizon", c.horizon);
            c.grid_dt = j.value("grid_dt", c.grid_dt);
            c.snapshot_times = j.value("snapshot_times", c.snapshot_times);
            c.probe_times = j.value("probe_times", c.probe_times);
            c.martingale_times = j.value("martingale_times", std::vector<double>{c.horizon});
            std::sort(c.snapshot_times.begin(), c.snapshot_times.end());
            std::sort(c.martingale_times.begin(), c.martingale_times.end());
            c.wait_margin = j.value("wait_margin", c.wait_margin);
            c.output_dir = j.value("output_dir", c.output_dir);
            c.write_runs = j.value("write_runs", c.write_runs);
            c.validate();
            return c;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("scenario: ") + e.what());
        } catch (const DomainError& e) {
            throw ConfigError(std::string("scenario: ") + e.what());
        }
    }

    nlohmann::json to_json() const {
        return {{"name", name},
                {"arrival", arrival.to_json()},
                {"service", service.to_json()},
                {"patience", patience.to_json()},
                {"initial", {{"x0", x0}, {"nu0", nu0.to_json()}, {"eta0", eta0.to_json()}}},
                {"N", n_list},
                {"replications", replications},
                {"seed", seed},
                {"horizon", horizon},
                {"grid_dt", grid_dt},
                {"snapshot_times", snapshot_times},
                {"probe_times", probe_times},
                {"martingale_times", martingale_times},
                {"wait_margin", wait_margin},
                {"output_dir", output_dir},
                {"write_runs", write_runs}};
    }
};

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return ScenarioConfig::from_json(j);
}

// Worker count: RENEGE_FLUID_JOBS overrides the requested value.
inline int resolve_jobs(int requested) {
    if (const char* env = std::getenv("RENEGE_FLUID_JOBS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
    }
    return std::max(1, requested);
}

// Runs task(i) for i in [0, count) on up to `jobs` threads. The first
// exception is rethrown after all workers stop.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) {
        pool.emplace_back([&] {
            for (;;) {
                if (stop.load()) return;
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    stop.store(true);
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

struct ReplicationRun {
    int servers;
    int rep;
    std::uint64_t seed;
    SimRun run;
};

// Builds the initial state and simulates one replication.
inline ReplicationRun simulate_replication(const ScenarioConfig& cfg, int servers, int rep, double horizon,
                                           const std::vector<double>& snapshot_times) {
    const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(servers), static_cast<std::uint64_t>(rep));
    Rng rng(seed);
    SimState state = build_initial_state(servers, cfg.x0, cfg.nu0, cfg.eta0, cfg.service, cfg.patience, rng);
    SimRun run = simulate(std::move(state), cfg.service, cfg.patience, cfg.arrival.source(servers), horizon,
                          snapshot_times, rng);
    return ReplicationRun{servers, rep, seed, std::move(run)};
}

struct WaitComparison {
    double time;
    double simulated;
    double fluid;
};

struct MartingaleValues {
    double time;
    double departures;  // (D - A_D) / N
    double potential;   // (S - A_S) / N
    double reneging;    // (R - A_R) / N
};

struct RunMetrics {
    int servers = 0;
    int rep = 0;
    std::uint64_t seed = 0;
    double err_x = 0.0, err_q = 0.0, err_k = 0.0, err_r = 0.0;
    std::vector<std::pair<double, double>> ks_eta, ks_nu;
    std::vector<WaitComparison> waits;
    std::vector<MartingaleValues> martingales;
};

inline std::vector<MartingaleValues> scaled_martingales(const SimRun& run, const DistributionModel& service,
                                                        const DistributionModel& patience,
                                                        const std::vector<double>& times) {
    const CompensatorPaths comp = compensators_at(run, service, patience, times);
    std::vector<MartingaleValues> out;
    const double n = run.servers;
    for (std::size_t i = 0; i < comp.times.size(); ++i) {
        const Counters c = run.at(comp.times[i]);
        out.push_back(MartingaleValues{comp.times[i], (static_cast<double>(c.D) - comp.departures[i]) / n,
                                       (static_cast<double>(c.S) - comp.potential_reneging[i]) / n,
                                       (static_cast<double>(c.R) - comp.reneging[i]) / n});
    }
    return out;
}

// Compares one scaled run with the fluid solution: sup over grid points
// t_k <= horizon of the gap between the right-continuous scaled path and the
// fluid path, KS distances at the snapshots, and waits at the probes.
inline RunMetrics compare_run(const ScenarioConfig& cfg, const FluidSolution& sol, const ReplicationRun& r) {
    RunMetrics m;
    m.servers = r.servers;
    m.rep = r.rep;
    m.seed = r.seed;
    const SimRun& run = r.run;
    const double n = r.servers;
    const std::size_t last = sol.index_of(cfg.horizon);
    std::size_t ev = 0;
    Counters c = run.initial;
    for (std::size_t k = 0; k <= last; ++k) {
        const double t = sol.time(k);
        while (ev < run.events.size() && run.events[ev].time <= t) c = run.events[ev++].counts;
        m.err_x = std::max(m.err_x, std::abs(static_cast<double>(c.X) / n - sol.X()[k]));
        m.err_q = std::max(m.err_q, std::abs(static_cast<double>(c.Q) / n - sol.Q()[k]));
        m.err_k = std::max(m.err_k, std::abs(static_cast<double>(c.K) / n - sol.K()[k]));
        m.err_r = std::max(m.err_r, std::abs(static_cast<double>(c.R) / n - sol.R()[k]));
    }
    for (const Snapshot& s : run.snapshots) {
        const std::size_t k = sol.index_of(s.time);
        m.ks_eta.emplace_back(s.time, ks_distance(s.eta.scaled(1.0 / n), sol.eta_bar(k)));
        m.ks_nu.emplace_back(s.time, ks_distance(s.nu.scaled(1.0 / n), sol.nu_bar(k)));
    }
    for (double t : cfg.probe_times)
        m.waits.push_back(WaitComparison{t, virtual_wait(run, t), fluid_virtual_wait(sol, t)});
    m.martingales = scaled_martingales(run, cfg.service, cfg.patience, cfg.martingale_times);
    return m;
}

struct ConvergenceReport {
    std::string scenario;
    std::vector<RunMetrics> runs;  // ordered by (N, replication)
    nlohmann::json aggregates;

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& m : runs) {
            nlohmann::json w = nlohmann::json::array();
            for (const auto& x : m.waits) w.push_back({{"t", x.time}, {"simulated", x.simulated}, {"fluid", x.fluid}});
            nlohmann::json mg = nlohmann::json::array();
            for (const auto& x : m.martingales)
                mg.push_back({{"t", x.time}, {"D", x.departures}, {"S", x.potential}, {"R", x.reneging}});
            nlohmann::json ke = nlohmann::json::array(), kn = nlohmann::json::array();
            for (const auto& [t, v] : m.ks_eta) ke.push_back({{"t", t}, {"ks", v}});
            for (const auto& [t, v] : m.ks_nu) kn.push_back({{"t", t}, {"ks", v}});
            rows.push_back({{"N", m.servers},
                            {"rep", m.rep},
                            {"seed", m.seed},
                            {"err_X", m.err_x},
                            {"err_Q", m.err_q},
                            {"err_K", m.err_k},
                            {"err_R", m.err_r},
                            {"ks_eta", ke},
                            {"ks_nu", kn},
                            {"waits", w},
                            {"martingales", mg}});
        }
        return {{"scenario", scenario}, {"runs", rows}, {"aggregates", aggregates}};
    }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double rms_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

// Least-squares slope of log(y) against log(x); null when undefined.
inline nlohmann::json log_slope(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > 0.0 && y[i] > 0.0) {
            lx.push_back(std::log(x[i]));
            ly.push_back(std::log(y[i]));
        }
    if (lx.size() < 2) return nullptr;
    const double mx = mean_of(lx), my = mean_of(ly);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    if (sxx == 0.0) return nullptr;
    return sxy / sxx;
}

}  // namespace detail

// Per-N means over replications (errors, KS distances, wait gaps) and
// martingale means and root-mean-squares; slopes of log mean error vs log N.
inline nlohmann::json aggregate(const std::vector<int>& n_list, const std::vector<RunMetrics>& runs) {
    nlohmann::json per_n = nlohmann::json::array();
    std::vector<double> ns, ex, eq, ek, er;
    for (int n : n_list) {
        std::vector<const RunMetrics*> sel;
        for (const auto& m : runs)
            if (m.servers == n) sel.push_back(&m);
        if (sel.empty()) continue;
        const auto collect = [&](auto&& get) {
            std::vector<double> v;
            for (const auto* m : sel) v.push_back(get(*m));
            return v;
        };
        nlohmann::json row = {{"N", n}, {"replications", sel.size()}};
        const double mx = detail::mean_of(collect([](const RunMetrics& m) { return m.err_x; }));
        const double mq = detail::mean_of(collect([](const RunMetrics& m) { return m.err_q; }));
        const double mk = detail::mean_of(collect([](const RunMetrics& m) { return m.err_k; }));
        const double mr = detail::mean_of(collect([](const RunMetrics& m) { return m.err_r; }));
        row["mean_err_X"] = mx;
        row["mean_err_Q"] = mq;
        row["mean_err_K"] = mk;
        row["mean_err_R"] = mr;
        ns.push_back(n);
        ex.push_back(mx);
        eq.push_back(mq);
        ek.push_back(mk);
        er.push_back(mr);

        nlohmann::json ks = nlohmann::json::array();
        for (std::size_t i = 0; i < sel.front()->ks_eta.size(); ++i) {
            ks.push_back({{"t", sel.front()->ks_eta[i].first},
                          {"eta", detail::mean_of(collect([i](const RunMetrics& m) { return m.ks_eta[i].second; }))},
                          {"nu", detail::mean_of(collect([i](const RunMetrics& m) { return m.ks_nu[i].second; }))}});
        }
        row["mean_ks"] = ks;

        nlohmann::json waits = nlohmann::json::array();
        for (std::size_t i = 0; i < sel.front()->waits.size(); ++i) {
            waits.push_back(
                {{"t", sel.front()->waits[i].time},
                 {"fluid", sel.front()->waits[i].fluid},
                 {"mean_simulated", detail::mean_of(collect([i](const RunMetrics& m) { return m.waits[i].simulated; }))},
                 {"mean_abs_gap", detail::mean_of(collect([i](const RunMetrics& m) {
                      return std::abs(m.waits[i].simulated - m.waits[i].fluid);
                  }))}});
        }
        row["waits"] = waits;

        nlohmann::json mg = nlohmann::json::array();
        for (std::size_t i = 0; i < sel.front()->martingales.size(); ++i) {
            const auto d = collect([i](const RunMetrics& m) { return m.martingales[i].departures; });
            const auto s = collect([i](const RunMetrics& m) { return m.martingales[i].potential; });
            const auto r = collect([i](const RunMetrics& m) { return m.martingales[i].reneging; });
            mg.push_back({{"t", sel.front()->martingales[i].time},
                          {"D", {{"mean", detail::mean_of(d)}, {"rms", detail::rms_of(d)}}},
                          {"S", {{"mean", detail::mean_of(s)}, {"rms", detail::rms_of(s)}}},
                          {"R", {{"mean", detail::mean_of(r)}, {"rms", detail::rms_of(r)}}}});
        }
        row["martingales"] = mg;
        per_n.push_back(row);
    }
    return {{"per_N", per_n},
            {"log_slope_err_X", detail::log_slope(ns, ex)},
            {"log_slope_err_Q", detail::log_slope(ns, eq)},
            {"log_slope_err_K", detail::log_slope(ns, ek)},
            {"log_slope_err_R", detail::log_slope(ns, er)}};
}

struct SweepOptions {
    int jobs = 1;
    bool write_files = true;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << text;
}

inline std::string run_file_stem(int servers, std::uint64_t seed) {
    return std::to_string(servers) + "-" + std::to_string(seed);
}

inline void write_run_files(const std::filesystem::path& dir, const ReplicationRun& r) {
    std::ostringstream os;
    r.run.write_events_csv(os);
    write_text(dir / ("events-" + run_file_stem(r.servers, r.seed) + ".csv"), os.str());
    write_text(dir / ("snapshots-" + run_file_stem(r.servers, r.seed) + ".json"), r.run.snapshots_json().dump(1) + "\n");
}

// Solves the fluid system once, simulates every (N, replication), and
// compares. Results are ordered by (N, replication) regardless of `jobs`.
inline ConvergenceReport run_sweep(const ScenarioConfig& cfg, const SweepOptions& opt = {},
                                   std::shared_ptr<const FluidSolution> fluid = nullptr) {
    cfg.validate();
    if (!fluid) fluid = std::make_shared<const FluidSolution>(solve(cfg.fluid_inputs(), cfg.extended_horizon(), cfg.grid_dt));
    const std::filesystem::path dir(cfg.output_dir);
    if (opt.write_files) {
        std::filesystem::create_directories(dir);
        std::ostringstream os;
        fluid->write_csv(os);
        write_text(dir / "fluid.csv", os.str());
    }

    std::vector<std::pair<int, int>> tasks;
    for (int n : cfg.n_list)
        for (int rep = 0; rep < cfg.replications; ++rep) tasks.emplace_back(n, rep);
    std::vector<std::optional<RunMetrics>> results(tasks.size());

    ConvergenceReport report;
    report.scenario = cfg.name;
    const auto flush = [&] {
        report.runs.clear();
        for (auto& r : results)
            if (r) report.runs.push_back(*r);
        report.aggregates = aggregate(cfg.n_list, report.runs);
        if (opt.write_files) write_text(dir / "report.json", report.to_json().dump(1) + "\n");
    };
    try {
        parallel_for(tasks.size(), opt.jobs, [&](std::size_t i) {
            const auto [n, rep] = tasks[i];
            const ReplicationRun r = simulate_replication(cfg, n, rep, cfg.extended_horizon(), cfg.snapshot_times);
            if (opt.write_files && cfg.write_runs) write_run_files(dir, r);
            results[i] = compare_run(cfg, *fluid, r);
        });
    } catch (...) {
        flush();
        throw;
    }
    flush();
    return report;
}

struct MartingaleRow {
    int servers;
    double time;
    double mean_d, rms_d, mean_s, rms_s, mean_r, rms_r;
};

// Scaled martingale differences at cfg.martingale_times, per N.
inline std::vector<MartingaleRow> martingale_report(const ScenarioConfig& cfg, int jobs = 1) {
    cfg.validate();
    std::vector<std::pair<int, int>> tasks;
    for (int n : cfg.n_list)
        for (int rep = 0; rep < cfg.replications; ++rep) tasks.emplace_back(n, rep);
    double end = cfg.horizon;
    for (double t : cfg.martingale_times) end = std::max(end, t);
    std::vector<std::vector<MartingaleValues>> values(tasks.size());
    parallel_for(tasks.size(), jobs, [&](std::size_t i) {
        const auto [n, rep] = tasks[i];
        const ReplicationRun r = simulate_replication(cfg, n, rep, end, {});
        values[i] = scaled_martingales(r.run, cfg.service, cfg.patience, cfg.martingale_times);
    });
    std::vector<MartingaleRow> rows;
    for (int n : cfg.n_list) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < tasks.size(); ++i)
            if (tasks[i].first == n) idx.push_back(i);
        for (std::size_t t = 0; t < cfg.martingale_times.size(); ++t) {
            std::vector<double> d, s, r;
            for (std::size_t i : idx) {
                d.push_back(values[i][t].departures);
                s.push_back(values[i][t].potential);
                r.push_back(values[i][t].reneging);
            }
            rows.push_back(MartingaleRow{n, values[idx.front()][t].time, detail::mean_of(d), detail::rms_of(d),
                                         detail::mean_of(s), detail::rms_of(s), detail::mean_of(r), detail::rms_of(r)});
        }
    }
    return rows;
}

}  // namespace renege
