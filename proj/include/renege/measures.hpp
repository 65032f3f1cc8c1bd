#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dists.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace renege {

namespace quad {

// Five-point Gauss-Legendre rule on [a, b].
template <class F>
double gauss5(F&& f, double a, double b) {
    static constexpr std::array<double, 5> x = {0.0, -0.5384693101056831, 0.5384693101056831,
                                                -0.9061798459386640, 0.9061798459386640};
    static constexpr std::array<double, 5> w = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665,
                                                0.2369268850561891, 0.2369268850561891};
    if (!(b > a)) return 0.0;
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (a + b);
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += w[i] * f(mid + half * x[i]);
    return s * half;
}

// Composite five-point rule with panels no wider than `panel`.
template <class F>
double gauss5_composite(F&& f, double a, double b, double panel) {
    if (!(b > a)) return 0.0;
    const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil((b - a) / panel)));
    const double h = (b - a) / static_cast<double>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lo = a + h * static_cast<double>(i);
        s += gauss5(f, lo, i + 1 == n ? b : lo + h);
    }
    return s;
}

// Integrates a pair-valued f over [a, b]: three-point Gauss on narrow
// intervals, composite five-point otherwise.
template <class F>
std::pair<double, double> gauss_pair(F&& f, double a, double b, double panel) {
    if (!(b > a)) return {0.0, 0.0};
    double s0 = 0.0, s1 = 0.0;
    const auto add = [&](double x, double w) {
        const auto [u, v] = f(x);
        s0 += w * u;
        s1 += w * v;
    };
    if (b - a <= 0.01) {
        const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
        constexpr double r = 0.7745966692414834;
        add(mid - half * r, 5.0 / 9.0 * half);
        add(mid, 8.0 / 9.0 * half);
        add(mid + half * r, 5.0 / 9.0 * half);
        return {s0, s1};
    }
    static constexpr std::array<double, 5> x = {0.0, -0.5384693101056831, 0.5384693101056831,
                                                -0.9061798459386640, 0.9061798459386640};
    static constexpr std::array<double, 5> w = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665,
                                                0.2369268850561891, 0.2369268850561891};
    const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil((b - a) / panel)));
    const double h = (b - a) / static_cast<double>(n);
    for (std::size_t p = 0; p < n; ++p) {
        const double lo = a + h * static_cast<double>(p);
        const double hi = p + 1 == n ? b : lo + h;
        const double half = 0.5 * (hi - lo), mid = 0.5 * (lo + hi);
        for (std::size_t i = 0; i < 5; ++i) add(mid + half * x[i], w[i] * half);
    }
    return {s0, s1};
}

}  // namespace quad

// Finite atomic measure: sorted locations with positive weights. Ties are
// merged by adding weights.
class AtomMeasure {
public:
    AtomMeasure() = default;

    explicit AtomMeasure(std::vector<std::pair<double, double>> atoms) {
        for (const auto& [x, w] : atoms) {
            if (!std::isfinite(x) || x < 0.0) throw DomainError("atom location must be finite and >= 0");
            if (!std::isfinite(w) || !(w > 0.0)) throw DomainError("atom weight must be positive and finite");
        }
        std::stable_sort(atoms.begin(), atoms.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& [x, w] : atoms) push_merged(x, w);
    }

    // Unit atoms at ascending locations.
    static AtomMeasure from_sorted_unit(const std::vector<double>& locations) {
        AtomMeasure m;
        m.loc_.reserve(locations.size());
        m.weight_.reserve(locations.size());
        m.prefix_.reserve(locations.size());
        for (double x : locations) {
            if (!m.loc_.empty() && x < m.loc_.back()) throw DomainError("from_sorted_unit: locations not sorted");
            m.push_merged(x, 1.0);
        }
        return m;
    }

    std::size_t size() const { return loc_.size(); }
    bool empty() const { return loc_.empty(); }
    double location(std::size_t i) const { return loc_[i]; }
    double weight(std::size_t i) const { return weight_[i]; }
    const std::vector<double>& locations() const { return loc_; }

    double total_mass() const { return prefix_.empty() ? 0.0 : prefix_.back(); }

    // mu[0, x]
    double cdf_at(double x) const {
        const auto it = std::upper_bound(loc_.begin(), loc_.end(), x);
        return it == loc_.begin() ? 0.0 : prefix_[static_cast<std::size_t>(it - loc_.begin()) - 1];
    }

    // mu[0, x)
    double cdf_left(double x) const {
        const auto it = std::lower_bound(loc_.begin(), loc_.end(), x);
        return it == loc_.begin() ? 0.0 : prefix_[static_cast<std::size_t>(it - loc_.begin()) - 1];
    }

    // inf{x >= 0 : mu[0, x] >= y}
    double quantile(double y) const {
        if (y <= 0.0) return 0.0;
        const double total = total_mass();
        if (y > total * (1.0 + 1e-12)) throw MassExceeded("quantile: level exceeds total mass");
        const auto it = std::lower_bound(prefix_.begin(), prefix_.end(), std::min(y, total));
        return loc_[static_cast<std::size_t>(it - prefix_.begin())];
    }

    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (std::size_t i = 0; i < loc_.size(); ++i) s += f(loc_[i]) * weight_[i];
        return s;
    }

    // Integral of f over [0, c].
    template <class F>
    double integrate_upto(F&& f, double c) const {
        double s = 0.0;
        for (std::size_t i = 0; i < loc_.size() && loc_[i] <= c; ++i) s += f(loc_[i]) * weight_[i];
        return s;
    }

    // Integral over y in [0, upper] of h(quantile(y)), summed block by block:
    // each atom contributes h(x_i) times the part of its weight below `upper`.
    template <class F>
    double integrate_quantile(F&& h, double upper) const {
        double s = 0.0;
        double below = 0.0;
        for (std::size_t i = 0; i < loc_.size() && below < upper; ++i) {
            const double take = std::min(weight_[i], upper - below);
            s += h(loc_[i]) * take;
            below += weight_[i];
        }
        if (below < upper && upper > total_mass() * (1.0 + 1e-12))
            throw MassExceeded("integrate_quantile: level exceeds total mass");
        return s;
    }

    AtomMeasure scaled(double factor) const {
        if (!(factor > 0.0)) throw DomainError("scale factor must be positive");
        AtomMeasure m;
        for (std::size_t i = 0; i < loc_.size(); ++i) m.push_merged(loc_[i], weight_[i] * factor);
        return m;
    }

    nlohmann::json to_json() const {
        nlohmann::json atoms = nlohmann::json::array();
        for (std::size_t i = 0; i < loc_.size(); ++i) atoms.push_back({loc_[i], weight_[i]});
        return {{"atoms", atoms}};
    }

    static AtomMeasure from_json(const nlohmann::json& j);

private:
    void push_merged(double x, double w) {
        if (!loc_.empty() && loc_.back() == x) {
            weight_.back() += w;
            prefix_.back() += w;
            return;
        }
        loc_.push_back(x);
        weight_.push_back(w);
        prefix_.push_back(total_mass() + w);
    }

    std::vector<double> loc_;
    std::vector<double> weight_;
    std::vector<double> prefix_;
};

namespace detail {

inline std::vector<std::pair<double, double>> parse_atoms(const nlohmann::json& j) {
    std::vector<std::pair<double, double>> atoms;
    if (!j.is_array()) throw ConfigError("'atoms' must be an array of [x, w] pairs");
    for (const auto& a : j) {
        if (!a.is_array() || a.size() != 2 || !a[0].is_number() || !a[1].is_number())
            throw ConfigError("each atom must be a numeric [x, w] pair");
        atoms.emplace_back(a[0].get<double>(), a[1].get<double>());
    }
    return atoms;
}

}  // namespace detail

inline AtomMeasure AtomMeasure::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("atoms")) throw ConfigError("atom measure needs an 'atoms' field");
    return AtomMeasure(detail::parse_atoms(j.at("atoms")));
}

// Atoms plus a piecewise-constant density on cells [i dx, (i+1) dx]. Used for
// initial conditions of both the fluid solver and the simulator.
class PiecewiseMeasure {
public:
    PiecewiseMeasure() = default;
    explicit PiecewiseMeasure(AtomMeasure atoms, double dx = 0.0, std::vector<double> density = {})
        : atoms_(std::move(atoms)), dx_(dx), density_(std::move(density)) {
        if (!density_.empty() && !(dx_ > 0.0 && std::isfinite(dx_)))
            throw DomainError("density grid needs a positive dx");
        for (double d : density_)
            if (!std::isfinite(d) || d < 0.0) throw DomainError("density values must be finite and >= 0");
        while (!density_.empty() && density_.back() == 0.0) density_.pop_back();
        cell_prefix_.reserve(density_.size() + 1);
        cell_prefix_.assign(1, 0.0);
        for (double d : density_) cell_prefix_.push_back(cell_prefix_.back() + d * dx_);
    }

    static PiecewiseMeasure zero() { return PiecewiseMeasure(); }

    static PiecewiseMeasure uniform_density(double lo, double hi, double mass, double dx) {
        if (!(hi > lo) || lo < 0.0) throw DomainError("uniform_density needs 0 <= lo < hi");
        const auto first = static_cast<std::size_t>(std::llround(lo / dx));
        const auto last = static_cast<std::size_t>(std::llround(hi / dx));
        if (std::abs(first * dx - lo) > 1e-12 || std::abs(last * dx - hi) > 1e-12)
            throw DomainError("uniform_density bounds must be multiples of dx");
        std::vector<double> d(last, 0.0);
        for (std::size_t i = first; i < last; ++i) d[i] = mass / (hi - lo);
        return PiecewiseMeasure(AtomMeasure(), dx, std::move(d));
    }

    const AtomMeasure& atoms() const { return atoms_; }
    double dx() const { return dx_; }
    const std::vector<double>& density() const { return density_; }
    double cell_lo(std::size_t i) const { return dx_ * static_cast<double>(i); }
    double cell_hi(std::size_t i) const { return dx_ * static_cast<double>(i + 1); }

    double continuous_mass() const { return cell_prefix_.back(); }
    double total_mass() const { return atoms_.total_mass() + continuous_mass(); }
    bool is_zero() const { return total_mass() == 0.0; }

    double support_end() const {
        const double a = atoms_.empty() ? 0.0 : atoms_.locations().back();
        return std::max(a, density_.empty() ? 0.0 : cell_hi(density_.size() - 1));
    }

    double cdf_at(double x) const {
        double c = atoms_.cdf_at(x);
        if (density_.empty() || x <= 0.0) return c;
        const double pos = x / dx_;
        const auto i = static_cast<std::size_t>(std::floor(pos));
        if (i >= density_.size()) return c + continuous_mass();
        return c + cell_prefix_[i] + density_[i] * (x - cell_lo(i));
    }

    // n i.i.d. locations from the normalized measure, returned sorted ascending.
    std::vector<double> sample_sorted(std::size_t n, Rng& rng) const {
        const double total = total_mass();
        if (n > 0 && !(total > 0.0)) throw ConfigError("cannot sample from a zero measure");
        std::vector<double> out;
        out.reserve(n);
        const double atom_mass = atoms_.total_mass();
        for (std::size_t k = 0; k < n; ++k) {
            const double u = rng.uniform() * total;
            if (u < atom_mass) {
                out.push_back(atoms_.quantile(u));
            } else {
                const double v = u - atom_mass;
                auto it = std::upper_bound(cell_prefix_.begin(), cell_prefix_.end(), v);
                auto i = static_cast<std::size_t>(it - cell_prefix_.begin());
                i = std::min(std::max<std::size_t>(i, 1), density_.size()) - 1;
                while (density_[i] == 0.0 && i + 1 < density_.size()) ++i;
                out.push_back(cell_lo(i) + dx_ * rng.uniform());
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = atoms_.to_json();
        if (!density_.empty()) j["grid"] = {{"dx", dx_}, {"density", density_}};
        return j;
    }

    static PiecewiseMeasure from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("measure must be an object");
        AtomMeasure atoms;
        if (j.contains("atoms")) atoms = AtomMeasure(detail::parse_atoms(j.at("atoms")));
        if (!j.contains("grid")) return PiecewiseMeasure(std::move(atoms));
        const auto& g = j.at("grid");
        if (!g.contains("dx") || !g.contains("density")) throw ConfigError("grid needs 'dx' and 'density'");
        return PiecewiseMeasure(std::move(atoms), g.at("dx").get<double>(),
                                g.at("density").get<std::vector<double>>());
    }

private:
    AtomMeasure atoms_;
    double dx_ = 0.0;
    std::vector<double> density_;
    std::vector<double> cell_prefix_{0.0};
};

// Per-cell integrals of a law on the uniform age grid x_i = i dt:
// node values of G and the integral of the survivor over each cell.
class CellTable {
public:
    CellTable(DistributionModel law, double dt, std::size_t cells) : law_(std::move(law)), dt_(dt) {
        if (!(dt > 0.0)) throw DomainError("CellTable needs dt > 0");
        cdf_.resize(cells + 1);
        surv_int_.resize(cells);
        for (std::size_t i = 0; i <= cells; ++i) cdf_[i] = law_.cdf(node(i));
        for (std::size_t i = 0; i < cells; ++i)
            surv_int_[i] = quad::gauss5([this](double x) { return law_.survivor(x); }, node(i), node(i + 1));
    }

    const DistributionModel& law() const { return law_; }
    double dt() const { return dt_; }
    std::size_t cells() const { return surv_int_.size(); }
    double node(std::size_t i) const { return dt_ * static_cast<double>(i); }
    double cdf_node(std::size_t i) const { return cdf_[i]; }
    double survivor_integral(std::size_t i) const { return surv_int_[i]; }

private:
    DistributionModel law_;
    double dt_;
    std::vector<double> cdf_;
    std::vector<double> surv_int_;
};

// Input flow entering a fluid measure at age 0: increments[j] is the mass that
// entered during [j dt, (j+1) dt]; the first `cells` entries are in effect.
struct BoundaryInput {
    std::shared_ptr<const std::vector<double>> increments;
    std::size_t cells = 0;
    std::shared_ptr<const CellTable> table;
};

// Fluid measure at time t given by the transport formula: the initial measure
// shifted by t and thinned by survival ratios, plus the boundary input with age
// density rate(t - x) (1 - G(x)) on [0, t]. Within a time cell the input rate
// is constant. Hazard integrals are evaluated in density form (g-based), so no
// hazard is evaluated near H.
class FluidMeasure {
public:
    FluidMeasure(DistributionModel law, std::shared_ptr<const PiecewiseMeasure> initial, double elapsed,
                 BoundaryInput boundary = {})
        : law_(std::move(law)), initial_(std::move(initial)), t_(elapsed), boundary_(std::move(boundary)) {
        if (!(t_ >= 0.0)) throw DomainError("FluidMeasure: elapsed time must be >= 0");
        build_boundary();
        build_transported();
    }

    const DistributionModel& law() const { return law_; }
    double elapsed() const { return t_; }

    double boundary_mass() const { return b_mass_.back(); }
    double total_mass() const { return boundary_mass() + tc_mass_.back() + ta_mass_.back(); }

    // <h, mu> in density form.
    double total_hazard_mass() const { return b_haz_.back() + tc_haz_.back() + ta_haz_.back(); }

    double cdf_at(double x) const {
        if (x < 0.0) return 0.0;
        if (x < t_) return boundary_cdf(x);
        return boundary_mass() + transported_cont_cdf(x) + transported_atom_cdf(x, true);
    }

    // mu[0, x).
    double cdf_left(double x) const {
        if (x <= 0.0) return 0.0;
        if (x <= t_) return boundary_cdf(x);
        return boundary_mass() + transported_cont_cdf(x) + transported_atom_cdf(x, false);
    }

    // Integral of h over [0, x] against this measure, in density form.
    double hazard_cdf(double x) const {
        if (x < 0.0) return 0.0;
        if (x < t_) return boundary_hazard_cdf(x);
        return b_haz_.back() + transported_cont_hazard(x) + transported_atom_hazard(x, true);
    }

    // Continuous density at x.
    double density(double x) const {
        if (x < 0.0) return 0.0;
        if (x < t_) {
            const auto i = std::min(b_cells_ - 1, static_cast<std::size_t>(x / dt()));
            return b_rate(i) * law_.survivor(x);
        }
        const std::size_t c = transported_cell_index(x);
        if (c == kNone) return 0.0;
        const double u = x - t_;
        const double su = law_.survivor(u);
        return su > 0.0 ? tc_phi_[c] * law_.survivor(x) / su : 0.0;
    }

    // inf{x >= 0 : mu[0, x] >= y}, by bisection on the continuous part.
    double quantile(double y) const {
        if (y <= 0.0) return 0.0;
        const double total = total_mass();
        if (y > total * (1.0 + 1e-12) + 1e-15) throw MassExceeded("quantile: level exceeds total mass");
        y = std::min(y, total);
        if (y <= boundary_mass() && b_cells_ > 0) {
            auto it = std::lower_bound(b_mass_.begin() + 1, b_mass_.end(), y);
            const auto i = static_cast<std::size_t>(it - b_mass_.begin()) - 1;
            return bisect([this](double x) { return boundary_cdf(x); }, y, dt() * static_cast<double>(i),
                          dt() * static_cast<double>(i + 1));
        }
        const double target = y - boundary_mass();
        // Breakpoints of the transported part: transported cell edges and atoms.
        const auto knot_mass = [this](double x) { return transported_cont_cdf(x) + transported_atom_cdf(x, true); };
        const auto it = std::lower_bound(knot_mass_.begin(), knot_mass_.end(), target);
        if (it == knot_mass_.end()) return knots_.empty() ? t_ : knots_.back();
        const auto j = static_cast<std::size_t>(it - knot_mass_.begin());
        const double right = knots_[j];
        const double left_limit = transported_cont_cdf(right) + transported_atom_cdf(right, false);
        if (left_limit < target) return right;
        const double left = j == 0 ? t_ : knots_[j - 1];
        return bisect(knot_mass, target, left, right);
    }

    // Integral over y in [0, level] of h(quantile(y)), via the change of
    // variables: the hazard mass on [0, chi) plus the used part of any atom at chi.
    double hazard_quantile_integral(double level) const {
        if (level <= 0.0) return 0.0;
        const double chi = quantile(level);
        if (chi < t_) return boundary_hazard_cdf(chi);
        double h = b_haz_.back() + transported_cont_hazard(chi) + transported_atom_hazard(chi, false);
        const auto a = atom_index(chi);
        if (a != kNone && ta_w_[a] > 0.0) {
            const double below = boundary_mass() + transported_cont_cdf(chi) + transported_atom_cdf(chi, false);
            h += ta_hw_[a] / ta_w_[a] * std::clamp(level - below, 0.0, ta_w_[a]);
        }
        return h;
    }

    double support_end() const {
        double e = t_;
        if (!knots_.empty()) e = std::max(e, knots_.back());
        return e;
    }

    // <f, mu>: five-point Gauss rule on every cell plus exact atom sums.
    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (std::size_t i = 0; i < b_cells_; ++i) {
            const double r = b_rate(i);
            if (r == 0.0) continue;
            s += r * quad::gauss5([&](double x) { return f(x) * law_.survivor(x); }, dt() * static_cast<double>(i),
                                  dt() * static_cast<double>(i + 1));
        }
        for (std::size_t c = 0; c < tc_lo_.size(); ++c) {
            s += tc_phi_[c] * quad::gauss5_composite(
                                  [&](double u) { return f(u + t_) * law_.survival_ratio(u, t_); }, tc_lo_[c],
                                  tc_hi_[c], kPanel);
        }
        for (std::size_t a = 0; a < ta_x_.size(); ++a) s += f(ta_x_[a]) * ta_w_[a];
        return s;
    }

    // Materialize as atoms plus a piecewise-constant density on cells of width dx.
    PiecewiseMeasure to_piecewise(double dx) const {
        std::vector<std::pair<double, double>> atoms;
        for (std::size_t a = 0; a < ta_x_.size(); ++a)
            if (ta_w_[a] > 0.0) atoms.emplace_back(ta_x_[a], ta_w_[a]);
        const double end = support_end();
        const auto n = static_cast<std::size_t>(std::ceil(end / dx - 1e-9));
        std::vector<double> density(n, 0.0);
        double prev = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = dx * static_cast<double>(i + 1);
            const double c = continuous_cdf(x);
            density[i] = std::max(0.0, (c - prev) / dx);
            prev = c;
        }
        return PiecewiseMeasure(AtomMeasure(std::move(atoms)), dx, std::move(density));
    }

    nlohmann::json to_json(double dx) const { return to_piecewise(dx).to_json(); }

    // Cell edges and atom locations, useful as evaluation points.
    std::vector<double> breakpoints() const {
        std::vector<double> pts;
        pts.reserve(b_cells_ + 1 + knots_.size());
        for (std::size_t i = 0; i <= b_cells_; ++i) pts.push_back(dt() * static_cast<double>(i));
        pts.insert(pts.end(), knots_.begin(), knots_.end());
        return pts;
    }

private:
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    static constexpr double kPanel = 0.05;

    double dt() const { return boundary_.table ? boundary_.table->dt() : 1.0; }

    double b_rate(std::size_t i) const {
        return (*boundary_.increments)[b_cells_ - 1 - i] / dt();
    }

    void build_boundary() {
        b_cells_ = boundary_.cells;
        b_mass_.assign(1, 0.0);
        b_haz_.assign(1, 0.0);
        if (b_cells_ == 0) return;
        if (!boundary_.increments || !boundary_.table) throw DomainError("FluidMeasure: incomplete boundary input");
        if (boundary_.increments->size() < b_cells_ || boundary_.table->cells() < b_cells_)
            throw DomainError("FluidMeasure: boundary input shorter than elapsed cells");
        if (std::abs(dt() * static_cast<double>(b_cells_) - t_) > 1e-9 * std::max(1.0, t_))
            throw DomainError("FluidMeasure: elapsed time must equal cells * dt");
        t_ = dt() * static_cast<double>(b_cells_);
        b_mass_.resize(b_cells_ + 1);
        b_haz_.resize(b_cells_ + 1);
        const CellTable& tab = *boundary_.table;
        for (std::size_t i = 0; i < b_cells_; ++i) {
            const double r = b_rate(i);
            b_mass_[i + 1] = b_mass_[i] + r * tab.survivor_integral(i);
            b_haz_[i + 1] = b_haz_[i] + r * (tab.cdf_node(i + 1) - tab.cdf_node(i));
        }
    }

    void build_transported() {
        tc_mass_.assign(1, 0.0);
        tc_haz_.assign(1, 0.0);
        ta_mass_.assign(1, 0.0);
        ta_haz_.assign(1, 0.0);
        if (!initial_) return;
        const double H = law_.support_end();
        const AtomMeasure& atoms = initial_->atoms();
        for (std::size_t a = 0; a < atoms.size(); ++a) {
            const double x0 = atoms.location(a);
            if (x0 >= H || law_.survivor(x0) <= 0.0) throw DomainError("initial atom outside [0, H)");
            const double s0 = law_.survivor(x0);
            const double w = atoms.weight(a) * law_.survival_ratio(x0, t_);
            const double hw = atoms.weight(a) * law_.density(x0 + t_) / s0;
            ta_x_.push_back(x0 + t_);
            ta_w_.push_back(w);
            ta_hw_.push_back(hw);
            ta_mass_.push_back(ta_mass_.back() + w);
            ta_haz_.push_back(ta_haz_.back() + hw);
        }
        const auto& dens = initial_->density();
        for (std::size_t i = 0; i < dens.size(); ++i) {
            if (dens[i] == 0.0) continue;
            const double lo = initial_->cell_lo(i);
            const double hi = initial_->cell_hi(i);
            if (lo >= H) throw DomainError("initial density cell outside [0, H)");
            tc_lo_.push_back(lo);
            tc_hi_.push_back(std::min(hi, H));
            tc_phi_.push_back(dens[i]);
            const auto [m, h] = cont_partial(tc_lo_.size() - 1, tc_hi_.back());
            tc_mass_.push_back(tc_mass_.back() + m);
            tc_haz_.push_back(tc_haz_.back() + h);
        }
        // Knots in position (not origin) coordinates.
        std::vector<double> edges;
        for (std::size_t c = 0; c < tc_lo_.size(); ++c) {
            edges.push_back(tc_lo_[c] + t_);
            edges.push_back(tc_hi_[c] + t_);
        }
        knots_.resize(edges.size() + ta_x_.size());
        std::merge(edges.begin(), edges.end(), ta_x_.begin(), ta_x_.end(), knots_.begin());
        knots_.erase(std::unique(knots_.begin(), knots_.end()), knots_.end());
        knot_mass_.reserve(knots_.size());
        for (double k : knots_) knot_mass_.push_back(transported_cont_cdf(k) + transported_atom_cdf(k, true));
    }

    // Mass and hazard mass of transported cell c between its origin lo and
    // origin coordinate u.
    std::pair<double, double> cont_partial(std::size_t c, double u) const {
        const bool plain = law_.mass_at_infinity() == 0.0;
        const auto [m, h] = quad::gauss_pair(
            [&](double v) -> std::pair<double, double> {
                const double s = law_.survivor(v);
                if (!(s > 0.0)) return {0.0, 0.0};
                const double ratio = plain ? std::exp(law_.log_survivor(v + t_) - law_.log_survivor(v))
                                           : law_.survivor(v + t_) / s;
                return {ratio, law_.density(v + t_) / s};
            },
            tc_lo_[c], std::min(u, tc_hi_[c]), kPanel);
        return {tc_phi_[c] * m, tc_phi_[c] * h};
    }
    double cont_partial_mass(std::size_t c, double u) const { return cont_partial(c, u).first; }
    double cont_partial_hazard(std::size_t c, double u) const { return cont_partial(c, u).second; }

    std::size_t transported_cell_index(double x) const {
        const double u = x - t_;
        auto it = std::upper_bound(tc_lo_.begin(), tc_lo_.end(), u);
        if (it == tc_lo_.begin()) return kNone;
        const auto c = static_cast<std::size_t>(it - tc_lo_.begin()) - 1;
        return u < tc_hi_[c] ? c : kNone;
    }

    double transported_cont_cdf(double x) const {
        const double u = x - t_;
        auto it = std::upper_bound(tc_lo_.begin(), tc_lo_.end(), u);
        const auto c = static_cast<std::size_t>(it - tc_lo_.begin());
        if (c == 0) return 0.0;
        if (u >= tc_hi_[c - 1]) return tc_mass_[c];
        return tc_mass_[c - 1] + cont_partial_mass(c - 1, u);
    }

    double transported_cont_hazard(double x) const {
        const double u = x - t_;
        auto it = std::upper_bound(tc_lo_.begin(), tc_lo_.end(), u);
        const auto c = static_cast<std::size_t>(it - tc_lo_.begin());
        if (c == 0) return 0.0;
        if (u >= tc_hi_[c - 1]) return tc_haz_[c];
        return tc_haz_[c - 1] + cont_partial_hazard(c - 1, u);
    }

    std::size_t atom_count_upto(double x, bool inclusive) const {
        const auto it = inclusive ? std::upper_bound(ta_x_.begin(), ta_x_.end(), x)
                                  : std::lower_bound(ta_x_.begin(), ta_x_.end(), x);
        return static_cast<std::size_t>(it - ta_x_.begin());
    }
    double transported_atom_cdf(double x, bool inclusive) const { return ta_mass_[atom_count_upto(x, inclusive)]; }
    double transported_atom_hazard(double x, bool inclusive) const {
        return ta_haz_[atom_count_upto(x, inclusive)];
    }
    std::size_t atom_index(double x) const {
        const auto it = std::lower_bound(ta_x_.begin(), ta_x_.end(), x);
        return (it != ta_x_.end() && *it == x) ? static_cast<std::size_t>(it - ta_x_.begin()) : kNone;
    }

    double continuous_cdf(double x) const {
        if (x < t_) return boundary_cdf(x);
        return boundary_mass() + transported_cont_cdf(x);
    }

    double boundary_cdf(double x) const {
        if (b_cells_ == 0 || x <= 0.0) return 0.0;
        const auto i = static_cast<std::size_t>(x / dt());
        if (i >= b_cells_) return boundary_mass();
        const double lo = dt() * static_cast<double>(i);
        const double r = b_rate(i);
        if (r == 0.0 || x == lo) return b_mass_[i];
        return b_mass_[i] + r * quad::gauss5([this](double v) { return law_.survivor(v); }, lo, x);
    }

    double boundary_hazard_cdf(double x) const {
        if (b_cells_ == 0 || x <= 0.0) return 0.0;
        const auto i = static_cast<std::size_t>(x / dt());
        if (i >= b_cells_) return b_haz_.back();
        return b_haz_[i] + b_rate(i) * (law_.cdf(x) - boundary_.table->cdf_node(i));
    }

    // Smallest x in [lo, hi] with cdf(x) >= y, to 1e-12 in mass.
    template <class Cdf>
    static double bisect(Cdf&& cdf, double y, double lo, double hi) {
        for (int it = 0; it < 200; ++it) {
            if (hi - lo <= 1e-15 * std::max(1.0, hi)) break;
            const double mid = 0.5 * (lo + hi);
            const double c = cdf(mid);
            if (c >= y) hi = mid; else lo = mid;
            if (std::abs(c - y) <= 1e-13 && c >= y) break;
        }
        return hi;
    }

    DistributionModel law_;
    std::shared_ptr<const PiecewiseMeasure> initial_;
    double t_;
    BoundaryInput boundary_;

    std::size_t b_cells_ = 0;
    std::vector<double> b_mass_, b_haz_;

    std::vector<double> tc_lo_, tc_hi_, tc_phi_, tc_mass_, tc_haz_;
    std::vector<double> ta_x_, ta_w_, ta_hw_, ta_mass_, ta_haz_;
    std::vector<double> knots_, knot_mass_;
};

// Sup over a merged grid of |F^a - F^b|, with the total-mass gap included.
inline double ks_distance(const AtomMeasure& a, const FluidMeasure& b) {
    double d = std::abs(a.total_mass() - b.total_mass());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.location(i);
        d = std::max(d, std::abs(a.cdf_at(x) - b.cdf_at(x)));
        d = std::max(d, std::abs(a.cdf_left(x) - b.cdf_left(x)));
    }
    for (double x : b.breakpoints()) d = std::max(d, std::abs(a.cdf_at(x) - b.cdf_at(x)));
    return d;
}

}  // namespace renege
