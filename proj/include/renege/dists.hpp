#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace renege {

// Nonnegative real or +infinity. A patience time of +inf is a customer who
// never reneges; it must never be confused with a large finite value.
class ExtReal {
public:
    constexpr ExtReal() = default;
    constexpr ExtReal(double v) : value_(v) {}  // NOLINT: finite values convert implicitly

    static constexpr ExtReal infinity() {
        ExtReal r;
        r.infinite_ = true;
        return r;
    }

    constexpr bool is_infinite() const { return infinite_; }
    constexpr bool is_finite() const { return !infinite_; }

    double value() const {
        if (infinite_) throw DomainError("ExtReal::value() called on +infinity");
        return value_;
    }

    friend constexpr std::partial_ordering operator<=>(const ExtReal& a, const ExtReal& b) {
        if (a.infinite_ || b.infinite_) {
            return static_cast<int>(a.infinite_) <=> static_cast<int>(b.infinite_);
        }
        return a.value_ <=> b.value_;
    }
    friend constexpr bool operator==(const ExtReal& a, const ExtReal& b) {
        return a.infinite_ == b.infinite_ && (a.infinite_ || a.value_ == b.value_);
    }
    friend constexpr ExtReal operator+(const ExtReal& a, double b) {
        return a.infinite_ ? a : ExtReal(a.value_ + b);
    }

    std::string to_string() const {
        if (infinite_) return "inf";
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", value_);
        return buf;
    }

private:
    double value_ = 0.0;
    bool infinite_ = false;
};

struct Exponential {
    double rate;
};
struct Weibull {
    double shape;
    double scale;
};
struct Lognormal {
    double mu;
    double sigma;
};
struct Hyperexponential {
    std::vector<double> weights;
    std::vector<double> rates;
};
struct Uniform {
    double a;
    double b;
};
// Pareto type I: support [scale, inf).
struct Pareto {
    double shape;
    double scale;
};

using Family = std::variant<Exponential, Weibull, Lognormal, Hyperexponential, Uniform, Pareto>;

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

inline bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

// Per-family survivor function, density, log-survivor and inverse survivor of
// the proper (non-defective) law.

inline double sf(const Exponential& d, double x) { return std::exp(-d.rate * x); }
inline double pdf(const Exponential& d, double x) { return d.rate * std::exp(-d.rate * x); }
inline double log_sf(const Exponential& d, double x) { return -d.rate * x; }
inline double isf(const Exponential& d, double s) { return -std::log(s) / d.rate; }
inline double support_end(const Exponential&) { return kInf; }
inline double mean(const Exponential& d) { return 1.0 / d.rate; }

inline double log_sf(const Weibull& d, double x) { return -std::pow(x / d.scale, d.shape); }
inline double sf(const Weibull& d, double x) { return std::exp(log_sf(d, x)); }
inline double pdf(const Weibull& d, double x) {
    if (x == 0.0) {
        if (d.shape < 1.0) return kInf;
        return d.shape == 1.0 ? 1.0 / d.scale : 0.0;
    }
    const double z = x / d.scale;
    return d.shape / d.scale * std::pow(z, d.shape - 1.0) * std::exp(-std::pow(z, d.shape));
}
inline double isf(const Weibull& d, double s) { return d.scale * std::pow(-std::log(s), 1.0 / d.shape); }
inline double support_end(const Weibull&) { return kInf; }
inline double mean(const Weibull& d) { return d.scale * std::tgamma(1.0 + 1.0 / d.shape); }

inline double lognormal_z(const Lognormal& d, double x) { return (std::log(x) - d.mu) / d.sigma; }
inline double sf(const Lognormal& d, double x) {
    if (x <= 0.0) return 1.0;
    return 0.5 * std::erfc(lognormal_z(d, x) / std::sqrt(2.0));
}
inline double pdf(const Lognormal& d, double x) {
    if (x <= 0.0) return 0.0;
    const double z = lognormal_z(d, x);
    return std::exp(-0.5 * z * z) / (x * d.sigma * std::sqrt(2.0 * M_PI));
}
inline double log_sf(const Lognormal& d, double x) {
    if (x <= 0.0) return 0.0;
    const double z = lognormal_z(d, x);
    if (z < 25.0) return std::log(0.5 * std::erfc(z / std::sqrt(2.0)));
    // Mills-ratio asymptotics once erfc underflows.
    return -0.5 * z * z - std::log(z * std::sqrt(2.0 * M_PI)) + std::log1p(-1.0 / (z * z));
}
inline double isf(const Lognormal& d, double s) {
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (0.5 * std::erfc(mid / std::sqrt(2.0)) > s) lo = mid; else hi = mid;
    }
    return std::exp(d.mu + d.sigma * 0.5 * (lo + hi));
}
inline double support_end(const Lognormal&) { return kInf; }
inline double mean(const Lognormal& d) { return std::exp(d.mu + 0.5 * d.sigma * d.sigma); }

inline double sf(const Hyperexponential& d, double x) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.rates.size(); ++i) s += d.weights[i] * std::exp(-d.rates[i] * x);
    return s;
}
inline double pdf(const Hyperexponential& d, double x) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.rates.size(); ++i) s += d.weights[i] * d.rates[i] * std::exp(-d.rates[i] * x);
    return s;
}
inline double log_sf(const Hyperexponential& d, double x) { return std::log(sf(d, x)); }
inline double isf(const Hyperexponential& d, double s) {
    const double slowest = *std::min_element(d.rates.begin(), d.rates.end());
    double lo = 0.0, hi = 1.0 / slowest;
    while (sf(d, hi) > s) hi *= 2.0;
    for (int it = 0; it < 400 && hi - lo > 1e-12 * std::max(1.0, hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        if (sf(d, mid) > s) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
}
inline double support_end(const Hyperexponential&) { return kInf; }
inline double mean(const Hyperexponential& d) {
    double m = 0.0;
    for (std::size_t i = 0; i < d.rates.size(); ++i) m += d.weights[i] / d.rates[i];
    return m;
}

inline double sf(const Uniform& d, double x) {
    if (x <= d.a) return 1.0;
    if (x >= d.b) return 0.0;
    return (d.b - x) / (d.b - d.a);
}
inline double pdf(const Uniform& d, double x) { return (x >= d.a && x < d.b) ? 1.0 / (d.b - d.a) : 0.0; }
inline double log_sf(const Uniform& d, double x) { return std::log(sf(d, x)); }
inline double isf(const Uniform& d, double s) { return d.b - s * (d.b - d.a); }
inline double support_end(const Uniform& d) { return d.b; }
inline double mean(const Uniform& d) { return 0.5 * (d.a + d.b); }

inline double sf(const Pareto& d, double x) { return x <= d.scale ? 1.0 : std::pow(d.scale / x, d.shape); }
inline double pdf(const Pareto& d, double x) {
    return x < d.scale ? 0.0 : d.shape * std::pow(d.scale, d.shape) / std::pow(x, d.shape + 1.0);
}
inline double log_sf(const Pareto& d, double x) { return x <= d.scale ? 0.0 : d.shape * std::log(d.scale / x); }
inline double isf(const Pareto& d, double s) { return d.scale * std::pow(s, -1.0 / d.shape); }
inline double support_end(const Pareto&) { return kInf; }
inline double mean(const Pareto& d) { return d.shape > 1.0 ? d.shape * d.scale / (d.shape - 1.0) : kInf; }

inline void validate(const Exponential& d) {
    if (!positive_finite(d.rate)) throw DomainError("exponential rate must be positive and finite");
}
inline void validate(const Weibull& d) {
    if (!positive_finite(d.shape) || !positive_finite(d.scale))
        throw DomainError("weibull shape and scale must be positive and finite");
}
inline void validate(const Lognormal& d) {
    if (!std::isfinite(d.mu) || !positive_finite(d.sigma))
        throw DomainError("lognormal needs finite mu and positive sigma");
}
inline void validate(const Hyperexponential& d) {
    if (d.weights.empty() || d.weights.size() != d.rates.size())
        throw DomainError("hyperexponential needs equally many weights and rates");
    double total = 0.0;
    for (std::size_t i = 0; i < d.weights.size(); ++i) {
        if (!(d.weights[i] >= 0.0) || !positive_finite(d.rates[i]))
            throw DomainError("hyperexponential weights must be >= 0 and rates > 0");
        total += d.weights[i];
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("hyperexponential weights must sum to 1");
}
inline void validate(const Uniform& d) {
    if (!std::isfinite(d.a) || !std::isfinite(d.b) || d.a < 0.0)
        throw DomainError("uniform bounds must be finite with a >= 0");
    if (!(d.b > d.a)) throw DomainError("uniform law needs b > a (laws without a density are not supported)");
}
inline void validate(const Pareto& d) {
    if (!positive_finite(d.shape) || !positive_finite(d.scale))
        throw DomainError("pareto shape and scale must be positive and finite");
}

}  // namespace detail

// Service or patience law. Immutable after construction.
//
// G is the cdf of the finite part, so G(inf) = 1 - mass_at_infinity, and the
// survivor 1 - G always carries the mass at infinity. With that convention the
// hazard g / (1 - G) is integrable on [0, H) whenever mass_at_infinity > 0.
class DistributionModel {
public:
    explicit DistributionModel(Family family, double mass_at_infinity = 0.0)
        : family_(std::move(family)), p_inf_(mass_at_infinity) {
        std::visit([](const auto& f) { detail::validate(f); }, family_);
        if (!(p_inf_ >= 0.0 && p_inf_ < 1.0)) throw DomainError("mass_at_infinity must lie in [0, 1)");
        support_end_ = std::visit([](const auto& f) { return detail::support_end(f); }, family_);
    }

    static DistributionModel from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    const Family& family() const { return family_; }
    double mass_at_infinity() const { return p_inf_; }

    // H = sup{x : g(x) > 0}.
    double support_end() const { return support_end_; }

    double cdf(double x) const {
        if (x <= 0.0) return 0.0;
        return (1.0 - p_inf_) * (1.0 - base_sf(x));
    }

    double survivor(double x) const {
        if (x <= 0.0) return 1.0;
        return p_inf_ + (1.0 - p_inf_) * base_sf(x);
    }

    double log_survivor(double x) const {
        if (x <= 0.0) return 0.0;
        if (p_inf_ == 0.0) return std::visit([x](const auto& f) { return detail::log_sf(f, x); }, family_);
        return std::log(survivor(x));
    }

    double density(double x) const {
        if (x < 0.0) return 0.0;
        return (1.0 - p_inf_) * std::visit([x](const auto& f) { return detail::pdf(f, x); }, family_);
    }

    double hazard(double x) const {
        if (x < 0.0) throw DomainError("hazard: negative argument");
        const double s = survivor(x);
        if (x >= support_end_ || s <= 0.0) throw DomainError("hazard: argument outside [0, H)");
        return density(x) / s;
    }

    // Integral of the hazard over [a, b], as a log-survivor difference.
    double cumulative_hazard(double a, double b) const {
        if (b <= a) return 0.0;
        return log_survivor(a) - log_survivor(b);
    }

    // (1 - G(x + t)) / (1 - G(x)): probability that a residual exceeds t given age x.
    double survival_ratio(double x, double t) const {
        const double s = survivor(x);
        if (s <= 0.0) throw DomainError("survival_ratio: zero survivor at age");
        if (t <= 0.0) return 1.0;
        if (p_inf_ == 0.0) return std::exp(log_survivor(x + t) - log_survivor(x));
        return survivor(x + t) / s;
    }

    double mean() const {
        if (p_inf_ > 0.0) return detail::kInf;
        return std::visit([](const auto& f) { return detail::mean(f); }, family_);
    }

    ExtReal sample(Rng& rng) const { return sample_residual(0.0, rng); }

    // Draws T with P(T > t) = survival_ratio(age, t).
    ExtReal sample_residual(double age, Rng& rng) const {
        const double s_age = survivor(age);
        if (!(s_age > 0.0)) throw DomainError("sample_residual: zero survivor at age");
        const double level = rng.uniform() * s_age;
        if (level <= p_inf_) return ExtReal::infinity();
        const double base_level = (level - p_inf_) / (1.0 - p_inf_);
        const double x = std::visit([base_level](const auto& f) { return detail::isf(f, base_level); }, family_);
        return ExtReal(std::max(0.0, x - age));
    }

private:
    double base_sf(double x) const {
        return std::visit([x](const auto& f) { return detail::sf(f, x); }, family_);
    }

    Family family_;
    double p_inf_ = 0.0;
    double support_end_ = detail::kInf;
};

namespace detail {

inline double number(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_number())
        throw ConfigError(std::string("distribution missing numeric field '") + key + "'");
    return j.at(key).get<double>();
}

inline std::vector<double> number_list(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_array())
        throw ConfigError(std::string("distribution missing array field '") + key + "'");
    return j.at(key).get<std::vector<double>>();
}

}  // namespace detail

inline DistributionModel DistributionModel::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("family") || !j.at("family").is_string())
        throw ConfigError("distribution needs a string 'family'");
    const std::string name = j.at("family").get<std::string>();
    const double p_inf = j.value("mass_at_infinity", 0.0);
    using detail::number;
    if (name == "exponential") return DistributionModel(Exponential{number(j, "rate")}, p_inf);
    if (name == "weibull") return DistributionModel(Weibull{number(j, "shape"), number(j, "scale")}, p_inf);
    if (name == "lognormal") return DistributionModel(Lognormal{number(j, "mu"), number(j, "sigma")}, p_inf);
    if (name == "hyperexponential")
        return DistributionModel(
            Hyperexponential{detail::number_list(j, "weights"), detail::number_list(j, "rates")}, p_inf);
    if (name == "uniform") return DistributionModel(Uniform{number(j, "a"), number(j, "b")}, p_inf);
    if (name == "pareto") return DistributionModel(Pareto{number(j, "shape"), number(j, "scale")}, p_inf);
    throw ConfigError("unknown distribution family '" + name + "'");
}

inline nlohmann::json DistributionModel::to_json() const {
    nlohmann::json j = std::visit(
        [](const auto& f) -> nlohmann::json {
            using T = std::decay_t<decltype(f)>;
            if constexpr (std::is_same_v<T, Exponential>) return {{"family", "exponential"}, {"rate", f.rate}};
            if constexpr (std::is_same_v<T, Weibull>)
                return {{"family", "weibull"}, {"shape", f.shape}, {"scale", f.scale}};
            if constexpr (std::is_same_v<T, Lognormal>)
                return {{"family", "lognormal"}, {"mu", f.mu}, {"sigma", f.sigma}};
            if constexpr (std::is_same_v<T, Hyperexponential>)
                return {{"family", "hyperexponential"}, {"weights", f.weights}, {"rates", f.rates}};
            if constexpr (std::is_same_v<T, Uniform>) return {{"family", "uniform"}, {"a", f.a}, {"b", f.b}};
            if constexpr (std::is_same_v<T, Pareto>)
                return {{"family", "pareto"}, {"shape", f.shape}, {"scale", f.scale}};
        },
        family_);
    j["mass_at_infinity"] = p_inf_;
    return j;
}

}  // namespace renege
