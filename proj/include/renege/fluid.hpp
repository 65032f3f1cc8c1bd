#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dists.hpp"
#include "errors.hpp"
#include "measures.hpp"

namespace renege {

// Piecewise-constant arrival rate: rate_k on [start_k, start_{k+1}), the last
// piece extending to infinity.
class RateSchedule {
public:
    RateSchedule() : pieces_{{0.0, 0.0}} {}
    explicit RateSchedule(double rate) : RateSchedule(std::vector<std::pair<double, double>>{{0.0, rate}}) {}
    explicit RateSchedule(std::vector<std::pair<double, double>> pieces) : pieces_(std::move(pieces)) {
        if (pieces_.empty() || pieces_.front().first != 0.0) throw ConfigError("rate schedule must start at t = 0");
        for (std::size_t i = 0; i < pieces_.size(); ++i) {
            if (!(pieces_[i].second >= 0.0) || !std::isfinite(pieces_[i].second))
                throw ConfigError("arrival rates must be finite and >= 0");
            if (i > 0 && !(pieces_[i].first > pieces_[i - 1].first))
                throw ConfigError("rate schedule start times must increase");
        }
    }

    const std::vector<std::pair<double, double>>& pieces() const { return pieces_; }

    double rate_at(double t) const {
        auto it = std::upper_bound(pieces_.begin(), pieces_.end(), t,
                                   [](double v, const auto& p) { return v < p.first; });
        return it == pieces_.begin() ? 0.0 : std::prev(it)->second;
    }

    // Integral of the rate over [a, b].
    double integral(double a, double b) const {
        double s = 0.0;
        for (std::size_t i = 0; i < pieces_.size(); ++i) {
            const double lo = std::max(a, pieces_[i].first);
            const double hi = std::min(b, i + 1 < pieces_.size() ? pieces_[i + 1].first : b);
            if (hi > lo) s += pieces_[i].second * (hi - lo);
        }
        return s;
    }

    // The schedule seen from time t onward.
    RateSchedule shifted(double t) const {
        std::vector<std::pair<double, double>> out{{0.0, rate_at(t)}};
        for (const auto& p : pieces_)
            if (p.first > t) out.emplace_back(p.first - t, p.second);
        return RateSchedule(std::move(out));
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& [s, r] : pieces_) j.push_back({s, r});
        return j;
    }

private:
    std::vector<std::pair<double, double>> pieces_;
};

struct FluidInputs {
    RateSchedule arrival;
    double x0 = 0.0;
    PiecewiseMeasure nu0 = PiecewiseMeasure::zero();
    PiecewiseMeasure eta0 = PiecewiseMeasure::zero();
    DistributionModel service{Exponential{1.0}};
    DistributionModel patience{Exponential{1.0}};

    void validate(double tol = 1e-9) const {
        if (!(x0 >= 0.0) || !std::isfinite(x0)) throw ConfigError("x0 must be finite and >= 0");
        if (service.mass_at_infinity() > 0.0) throw ConfigError("service law cannot have mass at infinity");
        const double nu_mass = nu0.total_mass();
        if (nu_mass > 1.0 + tol) throw ConfigError("initial age measure has mass above 1");
        if (std::abs(1.0 - nu_mass - std::max(1.0 - x0, 0.0)) > tol)
            throw ConfigError("initial data violate 1 - <1, nu0> = [1 - x0]^+");
        if (std::max(x0 - 1.0, 0.0) > eta0.total_mass() + tol)
            throw ConfigError("initial queue exceeds the potential queue mass");
        if (ExtReal(nu0.support_end()) > service.support_end())
            throw ConfigError("initial age measure extends beyond the service support");
        if (ExtReal(eta0.support_end()) > patience.support_end())
            throw ConfigError("initial potential queue extends beyond the patience support");
    }
};

enum class PicardInit { Zero, Arrival };

struct SolveOptions {
    PicardInit init = PicardInit::Arrival;
    int max_iter = 50;
    double tol = 1e-10;
    // Allowed excess of the queue over the potential queue mass.
    double mass_tol = 1e-7;
    // Tolerance for the initial-data constraints.
    double input_tol = 1e-9;
};

// Integral over [0, q] of h^r(quantile(eta, y)) dy.
inline double reneging_rate(const FluidMeasure& eta, double q, double tol = 1e-9) {
    if (q <= 0.0) return 0.0;
    const double mass = eta.total_mass();
    if (q > mass + tol * std::max(1.0, mass)) throw MassExceeded("reneging_rate: queue exceeds potential queue mass");
    return eta.hazard_quantile_integral(std::min(q, mass));
}

class FluidSolution {
public:
    struct Arrays {
        std::vector<double> X, Q, K, R, S, D, E, dep_rate, ren_rate, pot_rate, eta_mass, nu_mass;
    };

    FluidSolution(std::shared_ptr<const FluidInputs> inputs, double dt, std::size_t steps,
                  std::shared_ptr<const std::vector<double>> de, std::shared_ptr<const std::vector<double>> dk,
                  std::shared_ptr<const CellTable> patience_table, std::shared_ptr<const CellTable> service_table,
                  Arrays arrays)
        : inputs_(std::move(inputs)), dt_(dt), steps_(steps), de_(std::move(de)), dk_(std::move(dk)),
          tab_r_(std::move(patience_table)), tab_s_(std::move(service_table)), a_(std::move(arrays)) {
        eta0_ = std::make_shared<const PiecewiseMeasure>(inputs_->eta0);
        nu0_ = std::make_shared<const PiecewiseMeasure>(inputs_->nu0);
    }

    const FluidInputs& inputs() const { return *inputs_; }
    double dt() const { return dt_; }
    std::size_t steps() const { return steps_; }
    double horizon() const { return dt_ * static_cast<double>(steps_); }
    double time(std::size_t k) const { return dt_ * static_cast<double>(k); }

    // Grid index of t; t must lie on the grid.
    std::size_t index_of(double t) const {
        const double r = t / dt_;
        const double k = std::round(r);
        if (std::abs(r - k) > 1e-6 || k < 0.0 || k > static_cast<double>(steps_))
            throw DomainError("time is not a grid point of the fluid solution");
        return static_cast<std::size_t>(k);
    }

    const std::vector<double>& X() const { return a_.X; }
    const std::vector<double>& Q() const { return a_.Q; }
    const std::vector<double>& K() const { return a_.K; }
    const std::vector<double>& R() const { return a_.R; }
    const std::vector<double>& S() const { return a_.S; }
    const std::vector<double>& D() const { return a_.D; }
    const std::vector<double>& E() const { return a_.E; }
    const std::vector<double>& dep_rate() const { return a_.dep_rate; }
    const std::vector<double>& ren_rate() const { return a_.ren_rate; }
    const std::vector<double>& pot_rate() const { return a_.pot_rate; }
    const std::vector<double>& eta_mass() const { return a_.eta_mass; }
    const std::vector<double>& nu_mass() const { return a_.nu_mass; }
    const std::vector<double>& arrival_increments() const { return *de_; }
    const std::vector<double>& entry_increments() const { return *dk_; }
    const CellTable& patience_table() const { return *tab_r_; }
    const CellTable& service_table() const { return *tab_s_; }

    FluidMeasure eta_bar(std::size_t k) const {
        return FluidMeasure(inputs_->patience, eta0_, time(k), BoundaryInput{de_, k, tab_r_});
    }
    FluidMeasure nu_bar(std::size_t k) const {
        return FluidMeasure(inputs_->service, nu0_, time(k), BoundaryInput{dk_, k, tab_s_});
    }

    void write_csv(std::ostream& os) const {
        os << "t,X,Q,K,R,S,dep_rate,ren_rate\n";
        char buf[512];
        for (std::size_t k = 0; k <= steps_; ++k) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", time(k), a_.X[k],
                          a_.Q[k], a_.K[k], a_.R[k], a_.S[k], a_.dep_rate[k], a_.ren_rate[k]);
            os << buf;
        }
    }

    nlohmann::json snapshots_json(const std::vector<double>& times) const {
        nlohmann::json out = nlohmann::json::array();
        for (double t : times) {
            const std::size_t k = index_of(t);
            out.push_back({{"time", time(k)}, {"eta", eta_bar(k).to_json(dt_)}, {"nu", nu_bar(k).to_json(dt_)}});
        }
        return out;
    }

private:
    std::shared_ptr<const FluidInputs> inputs_;
    double dt_;
    std::size_t steps_;
    std::shared_ptr<const std::vector<double>> de_, dk_;
    std::shared_ptr<const CellTable> tab_r_, tab_s_;
    std::shared_ptr<const PiecewiseMeasure> eta0_, nu0_;
    Arrays a_;
};

// Explicit march on t_k = k dt. Within each step a fixed-point iteration
// determines the mass entering service together with the end-of-step
// reneging rate; departure and reneging integrals use the trapezoid rule.
inline FluidSolution solve(const FluidInputs& in, double horizon, double dt, const SolveOptions& opt = {}) {
    if (!(dt > 0.0) || !(horizon > 0.0)) throw ConfigError("horizon and grid step must be positive");
    const double ratio = horizon / dt;
    const auto steps = static_cast<std::size_t>(std::llround(ratio));
    if (std::abs(ratio - static_cast<double>(steps)) > 1e-6 * std::max(1.0, ratio))
        throw ConfigError("grid step must divide the horizon");
    in.validate(opt.input_tol);

    auto inputs = std::make_shared<const FluidInputs>(in);
    auto eta0 = std::make_shared<const PiecewiseMeasure>(in.eta0);
    auto nu0 = std::make_shared<const PiecewiseMeasure>(in.nu0);
    auto de = std::make_shared<std::vector<double>>(steps);
    for (std::size_t j = 0; j < steps; ++j)
        (*de)[j] = in.arrival.integral(dt * static_cast<double>(j), dt * static_cast<double>(j + 1));
    auto dk = std::make_shared<std::vector<double>>(steps, 0.0);
    auto tab_r = std::make_shared<const CellTable>(in.patience, dt, steps);
    auto tab_s = std::make_shared<const CellTable>(in.service, dt, steps);

    FluidSolution::Arrays a;
    for (auto* v : {&a.X, &a.Q, &a.K, &a.R, &a.S, &a.D, &a.E, &a.dep_rate, &a.ren_rate, &a.pot_rate, &a.eta_mass,
                    &a.nu_mass})
        v->assign(steps + 1, 0.0);

    const double q0 = std::max(in.x0 - 1.0, 0.0);
    {
        const FluidMeasure eta(in.patience, eta0, 0.0);
        const FluidMeasure nu(in.service, nu0, 0.0);
        a.X[0] = in.x0;
        a.Q[0] = q0;
        a.eta_mass[0] = eta.total_mass();
        a.nu_mass[0] = nu.total_mass();
        a.pot_rate[0] = eta.total_hazard_mass();
        a.dep_rate[0] = nu.total_hazard_mass();
        a.ren_rate[0] = reneging_rate(eta, q0, opt.mass_tol);
    }

    const CellTable& ts = *tab_s;
    const double c_mass = ts.survivor_integral(0) / dt;
    const double c_haz = (ts.cdf_node(1) - ts.cdf_node(0)) / dt;

    for (std::size_t k = 0; k < steps; ++k) {
        const double t1 = dt * static_cast<double>(k + 1);
        const FluidMeasure eta1(in.patience, eta0, t1, BoundaryInput{de, k + 1, tab_r});
        const double eta_mass1 = eta1.total_mass();
        const double sigma1 = eta1.total_hazard_mass();

        double init_mass = 0.0, init_haz = 0.0;
        if (!nu0->is_zero()) {
            const FluidMeasure moved(in.service, nu0, t1);
            init_mass = moved.total_mass();
            init_haz = moved.total_hazard_mass();
        }
        // Earlier entries into service, now at ages in [dt, t1].
        double old_mass = 0.0, old_haz = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double r = (*dk)[j] / dt;
            if (r == 0.0) continue;
            const std::size_t i = k - j;
            old_mass += r * ts.survivor_integral(i);
            old_haz += r * (ts.cdf_node(i + 1) - ts.cdf_node(i));
        }

        const double e1 = a.E[k] + (*de)[k];
        double dk_guess = opt.init == PicardInit::Arrival ? (*de)[k] : 0.0;
        double rho1 = opt.init == PicardInit::Arrival ? a.ren_rate[k] : 0.0;
        double x1 = 0.0, q1 = 0.0, r1 = 0.0, delta1 = 0.0;
        bool converged = false;
        for (int it = 0; it < opt.max_iter; ++it) {
            delta1 = init_haz + old_haz + dk_guess * c_haz;
            r1 = a.R[k] + 0.5 * dt * (a.ren_rate[k] + rho1);
            x1 = a.X[k] + (*de)[k] - 0.5 * dt * (a.dep_rate[k] + delta1) - (r1 - a.R[k]);
            x1 = std::max(x1, 0.0);
            q1 = std::max(x1 - 1.0, 0.0);
            const double rho_new = reneging_rate(eta1, q1, opt.mass_tol);
            r1 = a.R[k] + 0.5 * dt * (a.ren_rate[k] + rho_new);
            const double k1 = q0 - q1 + e1 - r1;
            const double dk_new = k1 - a.K[k];
            const double change = std::max(std::abs(dk_new - dk_guess), 0.5 * dt * std::abs(rho_new - rho1));
            dk_guess = dk_new;
            rho1 = rho_new;
            if (change <= opt.tol) {
                converged = true;
                break;
            }
        }
        if (!converged) throw NoConvergence("fluid solve: fixed-point iteration did not converge");

        delta1 = init_haz + old_haz + dk_guess * c_haz;
        (*dk)[k] = dk_guess;
        a.E[k + 1] = e1;
        a.R[k + 1] = r1;
        a.Q[k + 1] = q1;
        a.K[k + 1] = a.K[k] + dk_guess;
        a.X[k + 1] = x1;
        a.ren_rate[k + 1] = rho1;
        a.dep_rate[k + 1] = delta1;
        a.pot_rate[k + 1] = sigma1;
        a.D[k + 1] = a.D[k] + 0.5 * dt * (a.dep_rate[k] + delta1);
        a.S[k + 1] = a.S[k] + 0.5 * dt * (a.pot_rate[k] + sigma1);
        a.eta_mass[k + 1] = eta_mass1;
        a.nu_mass[k + 1] = init_mass + old_mass + dk_guess * c_mass;
    }

    return FluidSolution(std::move(inputs), dt, steps, std::move(de), std::move(dk), std::move(tab_r),
                         std::move(tab_s), std::move(a));
}

// Sup over the grid of the residual of the renewal form
// K(t) = <1,nu_t> - <1,nu_0> + int (G(x+t)-G(x))/(1-G(x)) nu_0(dx) + int_0^t g(t-s) K(s) ds,
// with the convolution by the trapezoid rule.
inline double kbar_renewal_check(const FluidSolution& sol) {
    const auto& in = sol.inputs();
    const DistributionModel& g = in.service;
    const std::size_t m = sol.steps();
    const double dt = sol.dt();
    std::vector<double> gnode(m + 1);
    for (std::size_t i = 0; i <= m; ++i) gnode[i] = g.density(sol.time(i));

    const PiecewiseMeasure& nu0 = in.nu0;
    const auto initial_term = [&](double t) {
        const auto f = [&](double x) { return (g.cdf(x + t) - g.cdf(x)) / g.survivor(x); };
        double s = 0.0;
        const AtomMeasure& at = nu0.atoms();
        for (std::size_t i = 0; i < at.size(); ++i) s += at.weight(i) * f(at.location(i));
        for (std::size_t c = 0; c < nu0.density().size(); ++c)
            if (nu0.density()[c] != 0.0) s += nu0.density()[c] * quad::gauss5(f, nu0.cell_lo(c), nu0.cell_hi(c));
        return s;
    };

    const auto& K = sol.K();
    const double nu_start = sol.nu_mass()[0];
    double worst = 0.0;
    for (std::size_t k = 0; k <= m; ++k) {
        double conv = 0.0;
        if (k > 0) {
            conv = 0.5 * (gnode[k] * K[0] + gnode[0] * K[k]);
            for (std::size_t j = 1; j < k; ++j) conv += gnode[k - j] * K[j];
            conv *= dt;
        }
        const double rhs = sol.nu_mass()[k] - nu_start + (nu0.is_zero() ? 0.0 : initial_term(sol.time(k))) + conv;
        worst = std::max(worst, std::abs(K[k] - rhs));
    }
    return worst;
}

// Fluid virtual waiting time at grid time t: the smallest s with
// int_t^{t+s} <h^s, nu_u> du + T_t(s) >= Q(t), where T_t integrates the
// reneging rate of the fluid already present at t.
inline double fluid_virtual_wait(const FluidSolution& sol, double t) {
    const std::size_t k = sol.index_of(t);
    const double level = sol.Q()[k];
    if (level <= 0.0) return 0.0;
    const double dt = sol.dt();
    const CellTable& tr = sol.patience_table();
    const auto& de = sol.arrival_increments();
    // Hazard mass of the fluid that arrived during (t, t + j dt].
    const auto late_hazard = [&](std::size_t j) {
        double h = 0.0;
        for (std::size_t i = 0; i < j; ++i) h += de[k + j - 1 - i] / dt * (tr.cdf_node(i + 1) - tr.cdf_node(i));
        return h;
    };
    const auto rate = [&](std::size_t j) {
        return sol.dep_rate()[k + j] + std::max(0.0, sol.ren_rate()[k + j] - late_hazard(j));
    };
    double phi = 0.0;
    double prev = rate(0);
    for (std::size_t j = 1; k + j <= sol.steps(); ++j) {
        const double cur = rate(j);
        const double next = phi + 0.5 * dt * (prev + cur);
        if (next >= level) {
            const double frac = next > phi ? (level - phi) / (next - phi) : 1.0;
            return dt * (static_cast<double>(j - 1) + frac);
        }
        phi = next;
        prev = cur;
    }
    throw HorizonExceeded("fluid_virtual_wait: level not reached before the end of the grid");
}

// Re-solves from the state at grid time t and returns the sup-norm gap
// against the tail of the original solution (X, Q and the increments of K, R).
inline double shift_consistency(const FluidSolution& sol, double t, const SolveOptions& opt = {}) {
    const std::size_t k = sol.index_of(t);
    if (k == sol.steps()) return 0.0;
    FluidInputs in = sol.inputs();
    if (k > 0) {
        in.arrival = sol.inputs().arrival.shifted(t);
        in.x0 = sol.X()[k];
        in.nu0 = sol.nu_bar(k).to_piecewise(sol.dt());
        in.eta0 = sol.eta_bar(k).to_piecewise(sol.dt());
    }
    SolveOptions o = opt;
    // The state at t satisfies the constraints only up to discretization error.
    o.input_tol = std::max(o.input_tol, 10.0 * sol.dt());
    const FluidSolution tail = solve(in, sol.horizon() - sol.time(k), sol.dt(), o);
    double gap = 0.0;
    for (std::size_t j = 0; j <= tail.steps(); ++j) {
        gap = std::max(gap, std::abs(tail.X()[j] - sol.X()[k + j]));
        gap = std::max(gap, std::abs(tail.Q()[j] - sol.Q()[k + j]));
        gap = std::max(gap, std::abs(tail.K()[j] - (sol.K()[k + j] - sol.K()[k])));
        gap = std::max(gap, std::abs(tail.R()[j] - (sol.R()[k + j] - sol.R()[k])));
    }
    return gap;
}

}  // namespace renege
