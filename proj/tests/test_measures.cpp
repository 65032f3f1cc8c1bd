#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include <renege/measures.hpp>

using namespace renege;

namespace {

AtomMeasure two_atoms() { return AtomMeasure({{0.5, 1.0}, {1.5, 1.0}}); }

// Boundary input with a constant rate over `cells` cells of width dt.
BoundaryInput constant_input(double rate, double dt, std::size_t cells, const DistributionModel& law) {
    auto inc = std::make_shared<std::vector<double>>(cells, rate * dt);
    auto tab = std::make_shared<const CellTable>(law, dt, cells);
    return BoundaryInput{inc, cells, tab};
}

std::shared_ptr<const PiecewiseMeasure> no_initial() { return std::make_shared<const PiecewiseMeasure>(); }

}  // namespace

TEST(AtomMeasure, CdfExamples) {
    const AtomMeasure m = two_atoms();
    EXPECT_EQ(m.cdf_at(1.0), 1.0);
    EXPECT_EQ(m.cdf_at(0.4999), 0.0);
    EXPECT_EQ(m.cdf_at(0.5), 1.0);
    EXPECT_EQ(m.cdf_left(0.5), 0.0);
    EXPECT_EQ(m.cdf_at(10.0), 2.0);
}

TEST(AtomMeasure, QuantileExamples) {
    const AtomMeasure m = two_atoms();
    EXPECT_EQ(m.quantile(2.0), 1.5);
    EXPECT_EQ(m.quantile(0.0), 0.0);
    EXPECT_EQ(m.quantile(1.0), 0.5);
    EXPECT_EQ(m.quantile(1.0000001), 1.5);
    EXPECT_EQ(AtomMeasure().quantile(0.0), 0.0);
    EXPECT_THROW((void)m.quantile(2.5), MassExceeded);
}

TEST(AtomMeasure, IntegrateExamples) {
    const AtomMeasure m = two_atoms();
    EXPECT_EQ(m.integrate([](double) { return 1.0; }), 2.0);
    EXPECT_EQ(m.integrate([](double) { return 0.0; }), 0.0);
    EXPECT_EQ(m.integrate([](double x) { return x; }), 2.0);
}

TEST(AtomMeasure, TiesMergeAndValidation) {
    const AtomMeasure m({{1.0, 0.5}, {0.2, 1.0}, {1.0, 0.25}});
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m.location(0), 0.2);
    EXPECT_EQ(m.weight(1), 0.75);
    EXPECT_THROW(AtomMeasure({{-1.0, 1.0}}), DomainError);
    EXPECT_THROW(AtomMeasure({{1.0, 0.0}}), DomainError);
    EXPECT_THROW(AtomMeasure::from_sorted_unit({1.0, 0.5}), DomainError);
}

TEST(AtomMeasure, JsonRoundTrip) {
    const AtomMeasure m({{0.25, 2.0}, {1.5, 0.5}});
    const nlohmann::json j = m.to_json();
    EXPECT_EQ(j, nlohmann::json::parse(R"({"atoms":[[0.25,2.0],[1.5,0.5]]})"));
    const AtomMeasure back = AtomMeasure::from_json(j);
    EXPECT_EQ(back.to_json(), j);
}

TEST(AtomMeasure, GaloisPropertyOfQuantile) {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform() * 20);
        std::vector<std::pair<double, double>> atoms;
        for (int i = 0; i < n; ++i) {
            // Coarse locations force ties; integer weights keep sums exact.
            const double x = std::floor(rng.uniform() * 10.0) / 4.0;
            const double w = 1.0 + std::floor(rng.uniform() * 3.0);
            atoms.emplace_back(x, w);
        }
        const AtomMeasure m(atoms);
        std::vector<double> grid;
        for (int i = 0; i <= 50; ++i) grid.push_back(i * 0.0625);
        for (int k = 0; k < 50; ++k) {
            const double y = rng.uniform() * m.total_mass();
            const double q = m.quantile(y);
            for (double x : grid) EXPECT_EQ(q <= x, m.cdf_at(x) >= y) << "x=" << x << " y=" << y;
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double y = m.cdf_at(m.location(i));
            EXPECT_EQ(m.quantile(y), m.location(i));
        }
    }
}

TEST(AtomMeasure, ChangeOfVariablesIsExactForUnitAtoms) {
    Rng rng(7);
    const auto h = [](double x) { return 1.0 / (1.0 + x * x); };
    for (int trial = 0; trial < 300; ++trial) {
        const int n = static_cast<int>(rng.uniform() * 40);
        std::vector<double> xs;
        for (int i = 0; i < n; ++i) xs.push_back(std::floor(rng.uniform() * 30.0) / 8.0);
        std::sort(xs.begin(), xs.end());
        const AtomMeasure m = AtomMeasure::from_sorted_unit(xs);
        const double c = rng.uniform() * 4.0;
        EXPECT_EQ(m.integrate_upto(h, c), m.integrate_quantile(h, m.cdf_at(c)));
    }
}

TEST(AtomMeasure, ChangeOfVariablesWithRealWeights) {
    Rng rng(8);
    const auto h = [](double x) { return std::exp(-x); };
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::pair<double, double>> atoms;
        for (int i = 0; i < 15; ++i) atoms.emplace_back(rng.uniform() * 3.0, 0.1 + rng.uniform());
        const AtomMeasure m(atoms);
        const double c = rng.uniform() * 3.0;
        EXPECT_NEAR(m.integrate_upto(h, c), m.integrate_quantile(h, m.cdf_at(c)), 1e-12);
    }
}

TEST(AtomMeasure, Monotonicity) {
    const AtomMeasure m({{0.1, 1.0}, {0.7, 2.0}, {0.7, 1.0}, {2.0, 0.5}});
    double prev = 0.0;
    for (int i = 0; i <= 300; ++i) {
        const double c = m.cdf_at(i * 0.01);
        EXPECT_GE(c, prev);
        prev = c;
    }
    prev = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double q = m.quantile(m.total_mass() * i / 100.0);
        EXPECT_GE(q, prev);
        prev = q;
    }
}

TEST(PiecewiseMeasure, CdfAndJson) {
    const PiecewiseMeasure p(AtomMeasure({{0.25, 0.5}}), 0.5, {1.0, 0.0, 2.0, 0.0, 0.0});
    EXPECT_EQ(p.density().size(), 3u);
    EXPECT_DOUBLE_EQ(p.total_mass(), 0.5 + 0.5 + 1.0);
    EXPECT_DOUBLE_EQ(p.cdf_at(0.25), 0.25 + 0.5);
    EXPECT_DOUBLE_EQ(p.cdf_at(1.25), 0.5 + 0.5 + 0.5);
    EXPECT_DOUBLE_EQ(p.support_end(), 1.5);
    const auto back = PiecewiseMeasure::from_json(p.to_json());
    EXPECT_EQ(back.to_json(), p.to_json());
    EXPECT_THROW(PiecewiseMeasure(AtomMeasure(), 0.5, {-1.0}), DomainError);
    EXPECT_THROW(PiecewiseMeasure::from_json(nlohmann::json::parse(R"({"grid":{"dx":0.1}})")), ConfigError);
}

TEST(PiecewiseMeasure, SamplingFollowsTheNormalizedMeasure) {
    const PiecewiseMeasure p(AtomMeasure({{0.25, 1.0}}), 0.5, {0.0, 2.0});
    Rng rng(5);
    const auto xs = p.sample_sorted(100000, rng);
    ASSERT_TRUE(std::is_sorted(xs.begin(), xs.end()));
    const auto atoms = std::count(xs.begin(), xs.end(), 0.25);
    EXPECT_NEAR(static_cast<double>(atoms) / 1e5, 0.5, 0.01);
    for (double x : xs)
        if (x != 0.25) {
            EXPECT_GE(x, 0.5);
            EXPECT_LE(x, 1.0);
        }
}

TEST(FluidMeasure, BoundaryLayerClosedForm) {
    const DistributionModel law(Exponential{1.0});
    const FluidMeasure m(law, no_initial(), 1.0, constant_input(2.0, 1e-3, 1000, law));
    EXPECT_NEAR(m.cdf_at(1.0), 2.0 * (1.0 - std::exp(-1.0)), 1e-12);
    EXPECT_NEAR(m.cdf_at(0.3), 2.0 * (1.0 - std::exp(-0.3)), 1e-12);
    EXPECT_NEAR(m.total_mass(), 2.0 * (1.0 - std::exp(-1.0)), 1e-12);
    // Density form of the hazard integral equals theta times the mass here.
    EXPECT_NEAR(m.total_hazard_mass(), m.total_mass(), 1e-12);
    EXPECT_NEAR(m.density(0.4), 2.0 * std::exp(-0.4), 1e-12);
}

TEST(FluidMeasure, TimeZeroIsTheInitialMeasure) {
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.3, 0.4}}), 0.25, std::vector<double>{1.0, 2.0});
    const FluidMeasure m(DistributionModel(Weibull{2.0, 1.0}), init, 0.0);
    for (double x : {0.0, 0.1, 0.25, 0.3, 0.4, 0.5, 1.0}) EXPECT_NEAR(m.cdf_at(x), init->cdf_at(x), 1e-13);
}

TEST(FluidMeasure, TransportedAtomSurvives) {
    const DistributionModel law(Weibull{2.0, 1.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.5, 0.8}}));
    const FluidMeasure m(law, init, 0.7);
    const double expected = 0.8 * (1.0 - law.cdf(1.2)) / (1.0 - law.cdf(0.5));
    EXPECT_NEAR(m.total_mass(), expected, 1e-14);
    EXPECT_EQ(m.cdf_at(1.1999), 0.0);
    EXPECT_NEAR(m.cdf_at(1.2), expected, 1e-14);
    EXPECT_EQ(m.quantile(expected / 2), 1.2);
    EXPECT_NEAR(m.total_hazard_mass(), 0.8 * law.density(1.2) / (1.0 - law.cdf(0.5)), 1e-14);
}

TEST(FluidMeasure, TransportedDensityMatchesDirectQuadrature) {
    const DistributionModel law(Lognormal{0.0, 0.5});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure(), 0.25, std::vector<double>{1.0, 0.5, 2.0});
    const double t = 0.6;
    const FluidMeasure m(law, init, t);
    // Midpoint rule oracle on the transport formula.
    const auto direct = [&](double x) {
        double s = 0.0;
        const int n = 100000;
        for (std::size_t c = 0; c < 3; ++c) {
            const double lo = 0.25 * static_cast<double>(c);
            const double hi = std::min(lo + 0.25, x - t);
            if (hi <= lo) break;
            for (int i = 0; i < n; ++i) {
                const double v = lo + (i + 0.5) * (hi - lo) / n;
                s += init->density()[c] * law.survival_ratio(v, t) * (hi - lo) / n;
            }
        }
        return s;
    };
    for (double x : {0.6, 0.7, 0.85, 1.0, 1.2, 1.35, 2.0}) EXPECT_NEAR(m.cdf_at(x), direct(x), 1e-8) << x;
    EXPECT_NEAR(m.integrate([](double) { return 1.0; }), m.total_mass(), 1e-12);
}

TEST(FluidMeasure, IntegrateMatchesCdfAtEnd) {
    const DistributionModel law(Uniform{0.0, 2.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.1, 0.2}}), 0.1, std::vector<double>{1.0, 1.0, 1.0});
    const FluidMeasure m(law, init, 0.5, constant_input(1.5, 0.01, 50, law));
    EXPECT_NEAR(m.integrate([](double) { return 1.0; }), m.cdf_at(law.support_end()), 1e-9);
    EXPECT_NEAR(m.integrate([](double) { return 1.0; }), m.total_mass(), 1e-12);
}

TEST(FluidMeasure, QuantileInvertsCdf) {
    const DistributionModel law(Weibull{2.0, 1.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.2, 0.3}}), 0.1, std::vector<double>{0.5, 0.5});
    const FluidMeasure m(law, init, 1.0, constant_input(1.0, 1e-2, 100, law));
    const double total = m.total_mass();
    double prev = 0.0;
    for (int i = 1; i <= 200; ++i) {
        const double y = total * i / 200.0;
        const double q = m.quantile(y);
        EXPECT_GE(q, prev);
        prev = q;
        EXPECT_GE(m.cdf_at(q), y - 1e-12);
        if (q > 1e-9) { EXPECT_LT(m.cdf_at(q * (1 - 1e-9) - 1e-12), y + 1e-12); }
    }
    EXPECT_EQ(m.quantile(0.0), 0.0);
    EXPECT_THROW((void)m.quantile(total * 1.01), MassExceeded);
}

TEST(FluidMeasure, HazardQuantileIntegralMatchesBruteForce) {
    const DistributionModel law(Weibull{2.0, 1.0});
    const FluidMeasure m(law, no_initial(), 1.0, constant_input(1.0, 1e-3, 1000, law));
    const double q = 0.5 * m.total_mass();
    const int n = 100000;
    double brute = 0.0;
    for (int i = 0; i < n; ++i) brute += law.hazard(m.quantile((i + 0.5) * q / n)) * q / n;
    EXPECT_NEAR(m.hazard_quantile_integral(q), brute, 1e-4 * brute);
}

TEST(FluidMeasure, HazardQuantileIntegralSplitsAtoms) {
    const DistributionModel law(Exponential{3.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.5, 1.0}}));
    const FluidMeasure m(law, init, 0.0);
    EXPECT_NEAR(m.hazard_quantile_integral(0.25), 0.75, 1e-14);
    EXPECT_NEAR(m.hazard_quantile_integral(1.0), 3.0, 1e-14);
}

TEST(FluidMeasure, ToPiecewisePreservesMass) {
    const DistributionModel law(Exponential{1.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.0, 0.5}}), 0.5, std::vector<double>{1.0});
    const FluidMeasure m(law, init, 1.0, constant_input(2.0, 0.01, 100, law));
    const PiecewiseMeasure p = m.to_piecewise(0.01);
    EXPECT_NEAR(p.total_mass(), m.total_mass(), 1e-12);
    for (double x : {0.5, 1.0, 1.25, 1.5, 2.0}) EXPECT_NEAR(p.cdf_at(x), m.cdf_at(x), 1e-12);
}

TEST(FluidMeasure, RejectsInitialMassBeyondSupport) {
    const DistributionModel law(Uniform{0.0, 1.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{1.0, 1.0}}));
    EXPECT_THROW(FluidMeasure(law, init, 0.0), DomainError);
}

TEST(KsDistance, Examples) {
    const DistributionModel law(Exponential{1.0});
    auto init = std::make_shared<const PiecewiseMeasure>(AtomMeasure({{0.5, 1.0}, {1.5, 1.0}}));
    EXPECT_NEAR(ks_distance(two_atoms(), FluidMeasure(law, init, 0.0)), 0.0, 1e-9);
    EXPECT_EQ(ks_distance(AtomMeasure({{0.0, 1.0}}), FluidMeasure(law, no_initial(), 0.0)), 1.0);
}

TEST(KsDistance, EmpiricalExponentialSample) {
    const DistributionModel law(Exponential{1.0});
    const FluidMeasure truth(law, no_initial(), 20.0, constant_input(1.0, 1e-2, 2000, law));
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        std::vector<double> xs;
        for (int i = 0; i < 10000; ++i) xs.push_back(law.sample(rng).value());
        std::sort(xs.begin(), xs.end());
        const double ks = ks_distance(AtomMeasure::from_sorted_unit(xs).scaled(1e-4), truth);
        EXPECT_LE(ks, 0.03) << "seed " << seed;
    }
}

TEST(Quadrature, GaussRulesAreExactForPolynomials) {
    const auto p = [](double x) { return 1.0 + x + x * x * x * x * x - 3 * x * x * x * x * x * x * x; };
    EXPECT_NEAR(quad::gauss5(p, -1.0, 1.0), 2.0, 1e-14);
    EXPECT_NEAR(quad::gauss5([](double x) { return std::pow(x, 9); }, 0.0, 1.0), 0.1, 1e-14);
    EXPECT_NEAR(quad::gauss5_composite([](double x) { return std::exp(x); }, 0.0, 2.0, 0.05), std::exp(2.0) - 1.0, 1e-13);
    const auto [a, b] = quad::gauss_pair([](double x) { return std::pair{x * x, 1.0}; }, 0.0, 0.005, 0.05);
    EXPECT_NEAR(a, 0.005 * 0.005 * 0.005 / 3.0, 1e-20);
    EXPECT_NEAR(b, 0.005, 1e-18);
}
