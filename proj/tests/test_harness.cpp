#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <renege/harness.hpp>

using namespace renege;
namespace fs = std::filesystem;

namespace {

const fs::path kSource(RENEGE_SOURCE_DIR);

nlohmann::json base_json() {
    return nlohmann::json::parse(R"({
        "name": "small",
        "arrival": {"interarrival": {"family": "exponential", "rate": 2.0}},
        "service": {"family": "exponential", "rate": 1.0},
        "patience": {"family": "exponential", "rate": 1.0},
        "N": [5, 20],
        "replications": 3,
        "seed": 42,
        "horizon": 2.0,
        "grid_dt": 0.01,
        "snapshot_times": [1.0, 2.0],
        "probe_times": [1.0],
        "wait_margin": 2.0,
        "output_dir": "unused"
    })");
}

ScenarioConfig small_config() { return ScenarioConfig::from_json(base_json()); }

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("renege-harness-" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace

TEST(ScenarioConfig, ShippedScenariosLoad) {
    for (const char* name : {"mmn.json", "weibull_lognormal.json", "spike.json", "loaded_start.json", "empty.json"}) {
        EXPECT_NO_THROW((void)load_scenario(kSource / "scenarios" / name)) << name;
    }
    const ScenarioConfig mmn = load_scenario(kSource / "scenarios" / "mmn.json");
    EXPECT_EQ(mmn.n_list, (std::vector<int>{25, 100, 400}));
    EXPECT_EQ(mmn.replications, 20);
    EXPECT_DOUBLE_EQ(mmn.fluid_inputs().arrival.rate_at(3.0), 2.0);
}

TEST(ScenarioConfig, JsonRoundTrip) {
    const ScenarioConfig a = load_scenario(kSource / "scenarios" / "loaded_start.json");
    const ScenarioConfig b = ScenarioConfig::from_json(a.to_json());
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(ScenarioConfig, DefaultsMartingaleTimesToHorizon) {
    EXPECT_EQ(small_config().martingale_times, std::vector<double>{2.0});
    EXPECT_DOUBLE_EQ(small_config().extended_horizon(), 4.0);
}

TEST(ScenarioConfig, RejectsBadInput) {
    const auto rejects = [](auto edit) {
        nlohmann::json j = base_json();
        edit(j);
        EXPECT_THROW((void)ScenarioConfig::from_json(j), ConfigError) << j.dump();
    };
    rejects([](auto& j) { j.erase("arrival"); });
    rejects([](auto& j) { j["arrival"]["rate"] = 1.0; });
    rejects([](auto& j) { j["N"] = {0}; });
    rejects([](auto& j) { j["N"] = nlohmann::json::array(); });
    rejects([](auto& j) { j["replications"] = 0; });
    rejects([](auto& j) { j["grid_dt"] = 0.03; });
    rejects([](auto& j) { j["snapshot_times"] = {1.005}; });
    rejects([](auto& j) { j["probe_times"] = {3.0}; });
    rejects([](auto& j) { j["service"] = {{"family", "gamma"}}; });
    rejects([](auto& j) { j["service"] = {{"family", "exponential"}, {"rate", -1.0}}; });
    rejects([](auto& j) { j["service"]["mass_at_infinity"] = 0.1; });
    rejects([](auto& j) { j["N"] = "many"; });
    // 1 - <1, nu0> must equal [1 - x0]^+.
    rejects([](auto& j) { j["initial"] = {{"x0", 0.5}}; });
    rejects([](auto& j) {
        j["initial"] = {{"x0", 1.5}, {"nu0", {{"grid", {{"dx", 1.0}, {"density", {1.0}}}}}}};
    });
}

TEST(ScenarioConfig, UnreadableFiles) {
    EXPECT_THROW((void)load_scenario(kSource / "scenarios" / "missing.json"), ConfigError);
    const fs::path dir = scratch_dir("badjson");
    fs::create_directories(dir);
    std::ofstream(dir / "bad.json") << "{ not json";
    EXPECT_THROW((void)load_scenario(dir / "bad.json"), ConfigError);
}

TEST(ArrivalSpec, RenewalRateIsInverseMean) {
    nlohmann::json j = base_json();
    j["arrival"] = {{"interarrival", {{"family", "weibull"}, {"shape", 2.0}, {"scale", 1.0}}}};
    const ScenarioConfig c = ScenarioConfig::from_json(j);
    EXPECT_NEAR(c.fluid_inputs().arrival.rate_at(0.0), 1.0 / std::tgamma(1.5), 1e-14);
}

TEST(Jobs, EnvironmentOverride) {
    ::unsetenv("RENEGE_FLUID_JOBS");
    EXPECT_EQ(resolve_jobs(3), 3);
    EXPECT_EQ(resolve_jobs(0), 1);
    ::setenv("RENEGE_FLUID_JOBS", "5", 1);
    EXPECT_EQ(resolve_jobs(2), 5);
    ::setenv("RENEGE_FLUID_JOBS", "junk", 1);
    EXPECT_EQ(resolve_jobs(2), 2);
    ::unsetenv("RENEGE_FLUID_JOBS");
}

TEST(Jobs, ParallelForRunsEveryIndexAndRethrows) {
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 7) throw NoConvergence("boom");
                              }),
                 NoConvergence);
}

TEST(Sweep, ZeroArrivalsGiveZeroErrors) {
    ScenarioConfig cfg = load_scenario(kSource / "scenarios" / "empty.json");
    const ConvergenceReport rep = run_sweep(cfg, SweepOptions{1, false});
    ASSERT_EQ(rep.runs.size(), static_cast<std::size_t>(cfg.replications));
    for (const RunMetrics& m : rep.runs) {
        EXPECT_EQ(m.err_x, 0.0);
        EXPECT_EQ(m.err_q, 0.0);
        EXPECT_EQ(m.err_k, 0.0);
        EXPECT_EQ(m.err_r, 0.0);
        for (const auto& [t, v] : m.ks_eta) EXPECT_EQ(v, 0.0);
        for (const auto& [t, v] : m.ks_nu) EXPECT_EQ(v, 0.0);
        for (const auto& w : m.waits) {
            EXPECT_EQ(w.simulated, 0.0);
            EXPECT_EQ(w.fluid, 0.0);
        }
    }
}

TEST(Sweep, ZeroArrivalMartingalesAreZero) {
    const ScenarioConfig cfg = load_scenario(kSource / "scenarios" / "empty.json");
    for (const MartingaleRow& r : martingale_report(cfg)) {
        EXPECT_EQ(r.mean_d, 0.0);
        EXPECT_EQ(r.rms_d, 0.0);
        EXPECT_EQ(r.mean_s, 0.0);
        EXPECT_EQ(r.rms_s, 0.0);
        EXPECT_EQ(r.mean_r, 0.0);
        EXPECT_EQ(r.rms_r, 0.0);
    }
}

TEST(Sweep, ReportDoesNotDependOnJobs) {
    ScenarioConfig cfg = small_config();
    const std::string one = run_sweep(cfg, SweepOptions{1, false}).to_json().dump();
    const std::string three = run_sweep(cfg, SweepOptions{3, false}).to_json().dump();
    EXPECT_EQ(one, three);
}

TEST(Sweep, AggregationIsPermutationInvariant) {
    const ScenarioConfig cfg = small_config();
    const ConvergenceReport rep = run_sweep(cfg, SweepOptions{1, false});
    std::vector<RunMetrics> shuffled = rep.runs;
    std::mt19937 g(5);
    std::shuffle(shuffled.begin(), shuffled.end(), g);
    const nlohmann::json a = aggregate(cfg.n_list, rep.runs), b = aggregate(cfg.n_list, shuffled);
    for (std::size_t i = 0; i < a["per_N"].size(); ++i) {
        EXPECT_NEAR(a["per_N"][i]["mean_err_X"].get<double>(), b["per_N"][i]["mean_err_X"].get<double>(), 1e-15);
        EXPECT_NEAR(a["per_N"][i]["mean_err_R"].get<double>(), b["per_N"][i]["mean_err_R"].get<double>(), 1e-15);
        EXPECT_EQ(a["per_N"][i]["replications"], b["per_N"][i]["replications"]);
    }
}

TEST(Sweep, MetricsAreNonnegativeAndCounted) {
    const ScenarioConfig cfg = small_config();
    const ConvergenceReport rep = run_sweep(cfg, SweepOptions{1, false});
    ASSERT_EQ(rep.runs.size(), 6u);
    for (std::size_t i = 0; i < rep.runs.size(); ++i) {
        const RunMetrics& m = rep.runs[i];
        EXPECT_EQ(m.servers, cfg.n_list[i / 3]);
        EXPECT_EQ(m.rep, static_cast<int>(i % 3));
        EXPECT_EQ(m.seed, derive_seed(42, static_cast<std::uint64_t>(m.servers), static_cast<std::uint64_t>(m.rep)));
        EXPECT_GE(m.err_x, 0.0);
        EXPECT_GE(m.err_q, 0.0);
        EXPECT_GE(m.err_k, 0.0);
        EXPECT_GE(m.err_r, 0.0);
        EXPECT_EQ(m.ks_eta.size(), 2u);
        for (const auto& [t, v] : m.ks_eta) EXPECT_TRUE(v >= 0.0 && v <= 2.0);
        EXPECT_EQ(m.waits.size(), 1u);
        EXPECT_EQ(m.martingales.size(), 1u);
    }
    for (const auto& row : rep.aggregates["per_N"]) EXPECT_EQ(row["replications"].get<int>(), 3);
}

// The sup-error is taken over grid points with the right-continuous value.
TEST(Sweep, CompareRunUsesGridValues) {
    ScenarioConfig cfg = small_config();
    cfg.probe_times.clear();
    cfg.snapshot_times.clear();
    const FluidSolution sol = solve(cfg.fluid_inputs(), cfg.horizon, cfg.grid_dt);
    const ReplicationRun r = simulate_replication(cfg, 5, 0, cfg.horizon, {});
    const RunMetrics m = compare_run(cfg, sol, r);
    double expected = 0.0;
    for (std::size_t k = 0; k <= sol.steps(); ++k)
        expected = std::max(expected, std::abs(static_cast<double>(r.run.at(sol.time(k)).X) / 5.0 - sol.X()[k]));
    EXPECT_EQ(m.err_x, expected);
}

TEST(Sweep, WritesFilesWithExactScaledBalance) {
    ScenarioConfig cfg = small_config();
    const fs::path dir = scratch_dir("files");
    cfg.output_dir = dir.string();
    run_sweep(cfg, SweepOptions{2, true});
    EXPECT_TRUE(fs::exists(dir / "fluid.csv"));
    EXPECT_TRUE(fs::exists(dir / "report.json"));
    const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
    EXPECT_EQ(report["runs"].size(), 6u);
    for (int n : cfg.n_list) {
        for (int rep = 0; rep < cfg.replications; ++rep) {
            const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(rep));
            const std::string stem = std::to_string(n) + "-" + std::to_string(seed);
            ASSERT_TRUE(fs::exists(dir / ("events-" + stem + ".csv")));
            EXPECT_TRUE(fs::exists(dir / ("snapshots-" + stem + ".json")));
            std::istringstream in(slurp(dir / ("events-" + stem + ".csv")));
            std::string line;
            std::getline(in, line);
            std::getline(in, line);
            EXPECT_EQ(line, "time,kind,customer,E,K,D,R,S,Q,X,chi");
            long long x0 = -1;
            int rows = 0;
            while (std::getline(in, line)) {
                std::vector<std::string> f;
                std::stringstream ss(line);
                for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
                ASSERT_EQ(f.size(), 11u);
                const long long e = std::stoll(f[3]), d = std::stoll(f[5]), r = std::stoll(f[6]), x = std::stoll(f[9]);
                if (x0 < 0) x0 = x;
                // Scaling by 1/N preserves the exact integer balance.
                EXPECT_EQ(x, x0 + e - d - r);
                ++rows;
            }
            EXPECT_GT(rows, 1);
        }
    }
}

TEST(Sweep, FailureFlushesPartialReport) {
    ScenarioConfig cfg = small_config();
    const fs::path dir = scratch_dir("partial");
    cfg.output_dir = dir.string();
    // A probe at the horizon with no margin cannot resolve the fluid wait.
    cfg.probe_times = {2.0};
    cfg.wait_margin = 0.0;
    EXPECT_THROW(run_sweep(cfg, SweepOptions{1, true}), HorizonExceeded);
    EXPECT_TRUE(fs::exists(dir / "report.json"));
    EXPECT_TRUE(fs::exists(dir / "fluid.csv"));
}

TEST(Sweep, SameSeedReproducesReport) {
    const ScenarioConfig cfg = small_config();
    EXPECT_EQ(run_sweep(cfg, SweepOptions{1, false}).to_json().dump(),
              run_sweep(cfg, SweepOptions{1, false}).to_json().dump());
    ScenarioConfig other = cfg;
    other.seed = 43;
    EXPECT_NE(run_sweep(cfg, SweepOptions{1, false}).to_json()["runs"].dump(),
              run_sweep(other, SweepOptions{1, false}).to_json()["runs"].dump());
}

TEST(Sweep, LogSlopeOfPowerLaw) {
    const auto slope = detail::log_slope({10.0, 100.0, 1000.0}, {1.0, 0.1, 0.01});
    EXPECT_NEAR(slope.get<double>(), -1.0, 1e-12);
    EXPECT_TRUE(detail::log_slope({10.0}, {1.0}).is_null());
}
