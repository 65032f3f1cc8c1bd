#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dists.hpp"
#include "errors.hpp"
#include "measures.hpp"
#include "rng.hpp"

namespace renege {

enum class EventKind { Arrival, ServiceStart, Departure, Renege, PotentialRenege };

inline std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::Arrival: return "arrival";
        case EventKind::ServiceStart: return "service_start";
        case EventKind::Departure: return "departure";
        case EventKind::Renege: return "renege";
        case EventKind::PotentialRenege: return "potential_renege";
    }
    return "?";
}

enum class CustomerStatus { Queued, InService, Departed, Reneged, PotentialOnly };

// One customer. Initial customers carry nonpositive indices and negative
// arrival times (-waiting time, or -age for those already in service).
struct CustomerRecord {
    long long index = 0;
    double arrival_time = 0.0;
    ExtReal patience = ExtReal::infinity();
    double service_req = 0.0;
    std::optional<double> service_start;
    std::optional<double> renege_time;
    std::optional<double> potential_renege_time;
    std::optional<double> departure_time;
    CustomerStatus status = CustomerStatus::Queued;
    // Whether the customer has an atom in the potential queue measure at all.
    // Initial in-service customers carry no waiting-time information.
    bool tracked_in_eta = true;
    bool in_eta = false;
    bool initial = false;
};

struct Counters {
    long long E = 0, K = 0, D = 0, R = 0, S = 0, Q = 0, X = 0;
    bool operator==(const Counters&) const = default;
};

struct EventRecord {
    double time;
    EventKind kind;
    long long customer;
    Counters counts;
    double chi;
};

struct Snapshot {
    double time;
    AtomMeasure eta;
    AtomMeasure nu;
};

// Customers present at time 0, in any order.
struct SimState {
    int servers = 1;
    std::vector<CustomerRecord> customers;
};

inline SimState empty_state(int servers) {
    if (servers < 1) throw ConfigError("number of servers must be positive");
    return SimState{servers, {}};
}

// Samples an initial configuration from the fluid initial data, with
// round(N * mass) customers per component.
inline SimState build_initial_state(int servers, double x0, const PiecewiseMeasure& nu0, const PiecewiseMeasure& eta0,
                                    const DistributionModel& service, const DistributionModel& patience, Rng& rng) {
    if (servers < 1) throw ConfigError("number of servers must be positive");
    const double n = servers;
    const double nu_mass = nu0.total_mass();
    if (!(x0 >= 0.0)) throw ConfigError("initial x0 must be >= 0");
    if (nu_mass > 1.0 + 1.0 / n) throw ConfigError("initial age measure has mass above 1");
    if (std::abs(1.0 - nu_mass - std::max(1.0 - x0, 0.0)) > 1.0 / n + 1e-12)
        throw ConfigError("initial data violate 1 - <1, nu0> = [1 - x0]^+");
    const long long total = std::llround(n * x0);
    const long long in_service = std::min<long long>(total, servers);
    const long long queued = total - in_service;
    long long eta_count = std::llround(n * eta0.total_mass());
    if (eta_count < queued) {
        if (static_cast<double>(queued - eta_count) > 1.0 + 1e-9 || eta0.total_mass() <= 0.0)
            throw ConfigError("initial potential queue mass is below the initial queue length");
        eta_count = queued;
    }

    SimState st{servers, {}};
    if (in_service > 0) {
        if (!(nu_mass > 0.0)) throw ConfigError("customers in service but the initial age measure is zero");
        for (double age : nu0.sample_sorted(static_cast<std::size_t>(in_service), rng)) {
            CustomerRecord c;
            c.initial = true;
            c.arrival_time = -age;
            c.service_start = -age;
            try {
                c.service_req = age + service.sample_residual(age, rng).value();
            } catch (const DomainError&) {
                throw ConfigError("initial age lies outside the service support");
            }
            c.status = CustomerStatus::InService;
            c.tracked_in_eta = false;
            st.customers.push_back(c);
        }
    }
    if (eta_count > 0) {
        const auto waits = eta0.sample_sorted(static_cast<std::size_t>(eta_count), rng);
        for (std::size_t i = 0; i < waits.size(); ++i) {
            CustomerRecord c;
            c.initial = true;
            c.arrival_time = -waits[i];
            try {
                c.patience = patience.sample_residual(waits[i], rng) + waits[i];
            } catch (const DomainError&) {
                throw ConfigError("initial waiting time lies outside the patience support");
            }
            // FCFS: the smallest potential waiting times are the ones still in queue.
            if (static_cast<long long>(i) < queued) {
                c.status = CustomerStatus::Queued;
                const ExtReal v = service.sample(rng);
                c.service_req = v.value();
            } else {
                c.status = CustomerStatus::PotentialOnly;
            }
            st.customers.push_back(c);
        }
    }
    return st;
}

struct ArrivalDraw {
    double time;
    std::optional<double> service;
    std::optional<ExtReal> patience;
};

class ArrivalSource {
public:
    virtual ~ArrivalSource() = default;
    // Next arrival strictly after the previous one, or nullopt if none.
    virtual std::optional<ArrivalDraw> next(Rng& rng) = 0;
};

// Renewal arrivals whose interarrival samples are divided by `speedup`.
class RenewalArrivals final : public ArrivalSource {
public:
    RenewalArrivals(DistributionModel interarrival, double speedup)
        : law_(std::move(interarrival)), speedup_(speedup) {
        if (law_.mass_at_infinity() > 0.0) throw ConfigError("interarrival law cannot have mass at infinity");
        if (!(speedup_ > 0.0)) throw ConfigError("arrival speedup must be positive");
    }
    std::optional<ArrivalDraw> next(Rng& rng) override {
        last_ += law_.sample(rng).value() / speedup_;
        return ArrivalDraw{last_, std::nullopt, std::nullopt};
    }

private:
    DistributionModel law_;
    double speedup_;
    double last_ = 0.0;
};

// Poisson arrivals with a piecewise-constant rate: rate_k on [start_k, start_{k+1}).
class PoissonScheduleArrivals final : public ArrivalSource {
public:
    PoissonScheduleArrivals(std::vector<std::pair<double, double>> pieces, double scale)
        : pieces_(std::move(pieces)), scale_(scale) {
        if (pieces_.empty() || pieces_.front().first != 0.0) throw ConfigError("rate schedule must start at t = 0");
        for (std::size_t i = 0; i < pieces_.size(); ++i) {
            if (!(pieces_[i].second >= 0.0)) throw ConfigError("rates must be >= 0");
            if (i > 0 && !(pieces_[i].first > pieces_[i - 1].first))
                throw ConfigError("rate schedule start times must increase");
        }
    }
    std::optional<ArrivalDraw> next(Rng& rng) override {
        double need = -std::log(rng.uniform());
        while (piece_ < pieces_.size()) {
            const double rate = pieces_[piece_].second * scale_;
            const double end = piece_ + 1 < pieces_.size() ? pieces_[piece_ + 1].first
                                                           : std::numeric_limits<double>::infinity();
            if (rate > 0.0 && now_ + need / rate < end) {
                now_ += need / rate;
                return ArrivalDraw{now_, std::nullopt, std::nullopt};
            }
            if (rate > 0.0) need -= rate * (end - now_);
            now_ = end;
            ++piece_;
        }
        return std::nullopt;
    }

private:
    std::vector<std::pair<double, double>> pieces_;
    double scale_;
    std::size_t piece_ = 0;
    double now_ = 0.0;
};

// Fixed arrival times, optionally with fixed service and patience times.
class ScriptedArrivals final : public ArrivalSource {
public:
    explicit ScriptedArrivals(std::vector<ArrivalDraw> draws) : draws_(std::move(draws)) {}
    std::optional<ArrivalDraw> next(Rng&) override {
        if (pos_ >= draws_.size()) return std::nullopt;
        return draws_[pos_++];
    }

private:
    std::vector<ArrivalDraw> draws_;
    std::size_t pos_ = 0;
};

// Full record of one realization.
struct SimRun {
    int servers = 1;
    double horizon = 0.0;
    std::uint64_t seed = 0;
    Counters initial;
    long long initial_eta = 0;
    long long initial_nu = 0;
    double initial_chi = 0.0;
    long long first_index = 0;
    std::vector<CustomerRecord> customers;  // ordered by index
    std::vector<EventRecord> events;
    std::vector<Snapshot> snapshots;

    const CustomerRecord& customer(long long index) const {
        return customers.at(static_cast<std::size_t>(index - first_index));
    }

    // Right-continuous value of the counting processes at t.
    Counters at(double t) const {
        const std::size_t i = events_upto(t);
        return i == 0 ? initial : events[i - 1].counts;
    }

    double chi_at(double t) const {
        const std::size_t i = events_upto(t);
        if (i == 0) return initial.Q > 0 ? initial_chi + t : 0.0;
        const EventRecord& e = events[i - 1];
        return e.counts.Q > 0 ? e.chi + (t - e.time) : 0.0;
    }

    // Number of events with time <= t.
    std::size_t events_upto(double t) const {
        const auto it = std::upper_bound(events.begin(), events.end(), t,
                                         [](double v, const EventRecord& e) { return v < e.time; });
        return static_cast<std::size_t>(it - events.begin());
    }

    void write_events_csv(std::ostream& os) const {
        char buf[512];
        std::snprintf(buf, sizeof buf, "# seed=%llu servers=%d horizon=%.17g\n",
                      static_cast<unsigned long long>(seed), servers, horizon);
        os << buf << "time,kind,customer,E,K,D,R,S,Q,X,chi\n";
        const auto row = [&](double t, std::string_view kind, long long cust, const Counters& c, double chi) {
            std::snprintf(buf, sizeof buf, "%.17g,%.*s,%lld,%lld,%lld,%lld,%lld,%lld,%lld,%lld,%.17g\n", t,
                          static_cast<int>(kind.size()), kind.data(), cust, c.E, c.K, c.D, c.R, c.S, c.Q, c.X, chi);
            os << buf;
        };
        row(0.0, "initial", 0, initial, initial_chi);
        for (const auto& e : events) row(e.time, to_string(e.kind), e.customer, e.counts, e.chi);
    }

    nlohmann::json snapshots_json() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : snapshots)
            out.push_back({{"time", s.time}, {"eta", s.eta.to_json()}, {"nu", s.nu.to_json()}});
        return {{"seed", seed}, {"servers", servers}, {"snapshots", out}};
    }
};

class Simulator;

// Read-only view of the simulator after one transition (a calendar event
// together with the service entries it triggers).
class StepView {
public:
    explicit StepView(const Simulator& sim) : sim_(sim) {}
    double time() const;
    const Counters& counts() const;
    int servers() const;
    long long initial_eta() const;
    long long initial_nu() const;
    std::size_t in_service() const;
    std::size_t eta_size() const;
    double chi() const;
    // chi(t-): head-of-line waiting time just before the transition.
    double chi_left() const;
    long long k_jump() const;
    // Potential waiting times of the potential-queue atoms, ascending. Atoms at
    // w = 0 of customers that went straight into service at this instant are
    // dropped when `drop_instant_entries` is set.
    std::vector<double> eta_waits(bool drop_instant_entries) const;
    std::vector<double> ages() const;

private:
    const Simulator& sim_;
};

using StepObserver = std::function<void(const StepView&)>;

class Simulator {
public:
    Simulator(SimState state, DistributionModel service, DistributionModel patience,
              std::unique_ptr<ArrivalSource> arrivals)
        : servers_(state.servers), service_(std::move(service)), patience_(std::move(patience)),
          arrivals_(std::move(arrivals)) {
        if (servers_ < 1) throw ConfigError("number of servers must be positive");
        if (service_.mass_at_infinity() > 0.0) throw ConfigError("service law cannot have mass at infinity");
        load(std::move(state.customers));
    }

    SimRun run(double horizon, std::vector<double> snapshot_times, Rng& rng, const StepObserver& observer = {}) {
        if (!(horizon > 0.0)) throw ConfigError("horizon must be positive");
        std::sort(snapshot_times.begin(), snapshot_times.end());
        for (double s : snapshot_times)
            if (s < 0.0 || s > horizon) throw ConfigError("snapshot times must lie in [0, horizon]");
        SimRun out;
        out.servers = servers_;
        out.horizon = horizon;
        out.seed = rng.seed();
        out.initial = counts_;
        out.initial_eta = initial_eta_;
        out.initial_nu = initial_nu_;
        out.initial_chi = chi(0.0);

        schedule_next_arrival(rng);
        std::size_t snap = 0;
        StepView view(*this);
        while (!calendar_.empty() && calendar_.top().time <= horizon) {
            const double t = calendar_.top().time;
            while (snap < snapshot_times.size() && snapshot_times[snap] < t) out.snapshots.push_back(snapshot(snapshot_times[snap++]));
            step(rng, out.events);
            if (observer) observer(view);
        }
        while (snap < snapshot_times.size()) out.snapshots.push_back(snapshot(snapshot_times[snap++]));

        out.first_index = customers_.empty() ? 1 : customers_.front().index;
        out.customers = customers_;
        return out;
    }

private:
    friend class StepView;
    using Id = std::size_t;
    static constexpr Id kNoCustomer = static_cast<Id>(-1);

    enum class Cls : int { Departure = 0, Expiry = 1, Arrival = 2 };
    struct CalEvent {
        double time;
        Cls cls;
        std::uint64_t seq;
        Id who;
        bool operator>(const CalEvent& o) const {
            if (time != o.time) return time > o.time;
            if (cls != o.cls) return cls > o.cls;
            return seq > o.seq;
        }
    };

    void load(std::vector<CustomerRecord> initial) {
        std::stable_sort(initial.begin(), initial.end(),
                         [](const auto& a, const auto& b) { return a.arrival_time < b.arrival_time; });
        long long index = 1 - static_cast<long long>(initial.size());
        std::size_t busy = 0;
        for (auto& c : initial) {
            c.index = index++;
            c.initial = true;
            const Id id = customers_.size();
            customers_.push_back(c);
            CustomerRecord& r = customers_.back();
            if (r.status == CustomerStatus::InService) {
                if (!r.service_start) throw ConfigError("initial in-service customer without a service start");
                ++busy;
                add_in_service(id);
                push(*r.service_start + r.service_req, Cls::Departure, id);
            } else if (r.status == CustomerStatus::Queued) {
                queue_.push_back(id);
                ++counts_.Q;
            } else if (r.status != CustomerStatus::PotentialOnly) {
                throw ConfigError("initial customers must be queued, in service or potential-queue only");
            }
            if (r.tracked_in_eta && r.status != CustomerStatus::InService) {
                if (!(r.patience > ExtReal(-r.arrival_time)))
                    throw ConfigError("initial potential-queue member with patience not above its waiting time");
                r.in_eta = true;
                eta_.push_back(id);
                ++eta_count_;
                if (r.patience.is_finite()) {
                    r.potential_renege_time = r.arrival_time + r.patience.value();
                    push(*r.potential_renege_time, Cls::Expiry, id);
                }
            } else {
                r.tracked_in_eta = false;
            }
        }
        if (busy > static_cast<std::size_t>(servers_)) throw ConfigError("more initial customers in service than servers");
        if (counts_.Q > 0 && busy < static_cast<std::size_t>(servers_))
            throw ConfigError("initial state has a queue while servers idle");
        counts_.X = static_cast<long long>(busy) + counts_.Q;
        initial_eta_ = eta_count_;
        initial_nu_ = static_cast<long long>(busy);
        next_index_ = 1;
    }

    void push(double time, Cls cls, Id who) { calendar_.push(CalEvent{time, cls, seq_++, who}); }

    void schedule_next_arrival(Rng& rng) {
        if (auto a = arrivals_->next(rng)) {
            pending_arrival_ = std::move(*a);
            push(pending_arrival_->time, Cls::Arrival, kNoCustomer);
        }
    }

    Id head_of_line() {
        while (!queue_.empty() && customers_[queue_.front()].status != CustomerStatus::Queued) queue_.pop_front();
        return queue_.empty() ? kNoCustomer : queue_.front();
    }

    double chi(double t) {
        const Id h = head_of_line();
        return h == kNoCustomer ? 0.0 : t - customers_[h].arrival_time;
    }

    void add_in_service(Id id) {
        slot_.resize(customers_.size(), 0);
        slot_[id] = in_service_.size();
        in_service_.push_back(id);
    }
    void remove_in_service(Id id) {
        const std::size_t s = slot_[id];
        const Id last = in_service_.back();
        in_service_[s] = last;
        slot_[last] = s;
        in_service_.pop_back();
    }

    void log(std::vector<EventRecord>& events, double t, EventKind kind, Id who) {
        events.push_back(EventRecord{t, kind, customers_[who].index, counts_, chi(t)});
    }

    void start_service(double t, Id id, std::vector<EventRecord>& events) {
        CustomerRecord& c = customers_[id];
        c.status = CustomerStatus::InService;
        c.service_start = t;
        add_in_service(id);
        ++counts_.K;
        push(t + c.service_req, Cls::Departure, id);
        log(events, t, EventKind::ServiceStart, id);
    }

    void step(Rng& rng, std::vector<EventRecord>& events) {
        const CalEvent ev = calendar_.top();
        now_ = ev.time;
        hol_before_ = head_of_line();
        k_before_ = counts_.K;
        if (ev.cls == Cls::Arrival) {
            calendar_.pop();
            handle_arrival(ev.time, rng, events);
        } else if (ev.cls == Cls::Departure) {
            calendar_.pop();
            handle_departure(ev.time, ev.who, events);
        } else {
            // All patience expiries sharing this timestamp form one transition;
            // customers still in queue are processed first.
            std::vector<CalEvent> batch;
            while (!calendar_.empty() && calendar_.top().cls == Cls::Expiry && calendar_.top().time == ev.time) {
                batch.push_back(calendar_.top());
                calendar_.pop();
            }
            std::stable_partition(batch.begin(), batch.end(), [this](const CalEvent& e) {
                return customers_[e.who].status == CustomerStatus::Queued;
            });
            for (const auto& e : batch) handle_expiry(e.time, e.who, events);
        }
    }

    void handle_arrival(double t, Rng& rng, std::vector<EventRecord>& events) {
        const ArrivalDraw draw = *pending_arrival_;
        pending_arrival_.reset();
        CustomerRecord c;
        c.index = next_index_++;
        c.arrival_time = t;
        c.service_req = draw.service ? *draw.service : service_.sample(rng).value();
        c.patience = draw.patience ? *draw.patience : patience_.sample(rng);
        if (!(c.service_req >= 0.0) || c.patience < ExtReal(0.0)) throw ConfigError("negative service or patience time");
        const Id id = customers_.size();
        customers_.push_back(c);
        CustomerRecord& r = customers_.back();
        ++counts_.E;
        ++counts_.X;
        r.in_eta = true;
        eta_.push_back(id);
        ++eta_count_;
        if (r.patience.is_finite()) {
            r.potential_renege_time = t + r.patience.value();
            push(*r.potential_renege_time, Cls::Expiry, id);
        }
        if (in_service_.size() < static_cast<std::size_t>(servers_)) {
            log(events, t, EventKind::Arrival, id);
            start_service(t, id, events);
        } else {
            r.status = CustomerStatus::Queued;
            queue_.push_back(id);
            ++counts_.Q;
            log(events, t, EventKind::Arrival, id);
        }
        schedule_next_arrival(rng);
    }

    void handle_departure(double t, Id id, std::vector<EventRecord>& events) {
        CustomerRecord& c = customers_[id];
        c.status = CustomerStatus::Departed;
        c.departure_time = t;
        remove_in_service(id);
        ++counts_.D;
        --counts_.X;
        log(events, t, EventKind::Departure, id);
        const Id h = head_of_line();
        if (h != kNoCustomer) {
            queue_.pop_front();
            --counts_.Q;
            start_service(t, h, events);
        }
    }

    void handle_expiry(double t, Id id, std::vector<EventRecord>& events) {
        CustomerRecord& c = customers_[id];
        c.in_eta = false;
        --eta_count_;
        ++counts_.S;
        ++eta_removed_;
        if (c.status == CustomerStatus::Queued) {
            c.status = CustomerStatus::Reneged;
            c.renege_time = t;
            ++counts_.R;
            --counts_.Q;
            --counts_.X;
            log(events, t, EventKind::Renege, id);
        } else {
            log(events, t, EventKind::PotentialRenege, id);
        }
        if (eta_removed_ > 64 && eta_removed_ * 2 > eta_.size()) compact_eta();
    }

    void compact_eta() {
        std::erase_if(eta_, [this](Id id) { return !customers_[id].in_eta; });
        eta_removed_ = 0;
    }

    Snapshot snapshot(double s) const {
        std::vector<double> w;
        w.reserve(eta_.size());
        for (auto it = eta_.rbegin(); it != eta_.rend(); ++it)
            if (customers_[*it].in_eta) w.push_back(s - customers_[*it].arrival_time);
        std::vector<double> a;
        a.reserve(in_service_.size());
        for (Id id : in_service_) a.push_back(s - *customers_[id].service_start);
        std::sort(a.begin(), a.end());
        return Snapshot{s, AtomMeasure::from_sorted_unit(w), AtomMeasure::from_sorted_unit(a)};
    }

    int servers_;
    DistributionModel service_;
    DistributionModel patience_;
    std::unique_ptr<ArrivalSource> arrivals_;
    std::optional<ArrivalDraw> pending_arrival_;

    std::vector<CustomerRecord> customers_;
    std::priority_queue<CalEvent, std::vector<CalEvent>, std::greater<>> calendar_;
    std::uint64_t seq_ = 0;
    std::deque<Id> queue_;              // FCFS order, lazily purged of non-queued customers
    std::vector<Id> eta_;               // potential-queue members in arrival order
    std::size_t eta_removed_ = 0;
    long long eta_count_ = 0;
    std::vector<Id> in_service_;
    std::vector<std::size_t> slot_;
    Counters counts_;
    long long initial_eta_ = 0;
    long long initial_nu_ = 0;
    long long next_index_ = 1;
    double now_ = 0.0;
    Id hol_before_ = kNoCustomer;
    long long k_before_ = 0;
};

inline double StepView::time() const { return sim_.now_; }
inline const Counters& StepView::counts() const { return sim_.counts_; }
inline int StepView::servers() const { return sim_.servers_; }
inline long long StepView::initial_eta() const { return sim_.initial_eta_; }
inline long long StepView::initial_nu() const { return sim_.initial_nu_; }
inline std::size_t StepView::in_service() const { return sim_.in_service_.size(); }
inline std::size_t StepView::eta_size() const { return static_cast<std::size_t>(sim_.eta_count_); }
inline long long StepView::k_jump() const { return sim_.counts_.K - sim_.k_before_; }

inline double StepView::chi() const {
    auto& s = const_cast<Simulator&>(sim_);
    return s.chi(sim_.now_);
}

inline double StepView::chi_left() const {
    const auto h = sim_.hol_before_;
    return h == Simulator::kNoCustomer ? 0.0 : sim_.now_ - sim_.customers_[h].arrival_time;
}

inline std::vector<double> StepView::eta_waits(bool drop_instant_entries) const {
    std::vector<double> w;
    w.reserve(sim_.eta_.size());
    const double t = sim_.now_;
    for (auto it = sim_.eta_.rbegin(); it != sim_.eta_.rend(); ++it) {
        const CustomerRecord& c = sim_.customers_[*it];
        if (!c.in_eta) continue;
        const double x = t - c.arrival_time;
        if (drop_instant_entries && x == 0.0 && c.service_start && *c.service_start == t) continue;
        w.push_back(x);
    }
    return w;
}

inline std::vector<double> StepView::ages() const {
    std::vector<double> a;
    for (auto id : sim_.in_service_) a.push_back(sim_.now_ - *sim_.customers_[id].service_start);
    std::sort(a.begin(), a.end());
    return a;
}

inline SimRun simulate(SimState state, const DistributionModel& service, const DistributionModel& patience,
                       std::unique_ptr<ArrivalSource> arrivals, double horizon, std::vector<double> snapshot_times,
                       Rng& rng, const StepObserver& observer = {}) {
    Simulator sim(std::move(state), service, patience, std::move(arrivals));
    return sim.run(horizon, std::move(snapshot_times), rng, observer);
}

// Checks the exact mass balances, nonidling and the queue/head-of-line
// identities at one transition. Returns a description of the first failure.
inline std::optional<std::string> check_invariants(const StepView& v, long long initial_x) {
    const Counters& c = v.counts();
    const long long n = v.servers();
    const auto nu = static_cast<long long>(v.in_service());
    const auto eta = static_cast<long long>(v.eta_size());
    const auto fail = [&](const char* what) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "t=%.17g: %s (E=%lld K=%lld D=%lld R=%lld S=%lld Q=%lld X=%lld nu=%lld eta=%lld)",
                      v.time(), what, c.E, c.K, c.D, c.R, c.S, c.Q, c.X, nu, eta);
        return std::optional<std::string>(buf);
    };
    if (c.X != initial_x + c.E - c.D - c.R) return fail("X = X(0) + E - D - R");
    if (v.initial_eta() + c.E != eta + c.S) return fail("<1,eta0> + E = <1,eta> + S");
    if (v.initial_nu() + c.K != nu + c.D) return fail("<1,nu0> + K = <1,nu> + D");
    if (c.X != nu + c.Q) return fail("X = <1,nu> + Q");
    if (c.Q != std::max(c.X - n, 0LL)) return fail("Q = [X - N]^+");
    if (n - nu != std::max(n - c.X, 0LL)) return fail("N - <1,nu> = [N - X]^+");

    const auto waits = v.eta_waits(true);
    if (!std::is_sorted(waits.begin(), waits.end())) return fail("potential waiting times out of order");
    const AtomMeasure eta_measure = AtomMeasure::from_sorted_unit(waits);
    const double chi = v.chi();
    if (c.Q > 0 && eta_measure.quantile(static_cast<double>(c.Q)) != chi) return fail("chi = quantile(eta, Q)");
    if (c.Q == 0 && chi != 0.0) return fail("chi = 0 when the queue is empty");
    const auto below = static_cast<long long>(std::upper_bound(waits.begin(), waits.end(), chi) - waits.begin());
    if (c.Q != below) return fail("Q = eta[0, chi]");
    return std::nullopt;
}

struct ChangeOfVariables {
    double lhs;  // integral of 1_{[0, chi(t-)]} h against eta_t
    double rhs;  // integral over [0, Q + iota] of h(quantile(eta_t, y))
    int iota;
};

// Both sides of the identity relating the hazard integral below chi(t-) to
// the quantile integral up to Q(t) + iota(t).
template <class H>
ChangeOfVariables change_of_variables(const StepView& v, H&& h) {
    const auto waits = v.eta_waits(true);
    const AtomMeasure eta = AtomMeasure::from_sorted_unit(waits);
    const double chi_left = v.chi_left();
    const int iota = (chi_left - v.chi() > 0.0 && v.k_jump() > 0) ? 1 : 0;
    ChangeOfVariables out{};
    out.iota = iota;
    out.lhs = eta.integrate_upto(h, chi_left);
    out.rhs = eta.integrate_quantile(h, static_cast<double>(v.counts().Q + iota));
    return out;
}

// Waiting time of a virtual infinitely patient customer arriving at t.
inline double virtual_wait(const SimRun& run, double t) {
    if (t < 0.0 || t > run.horizon) throw HorizonExceeded("virtual_wait: t outside the run horizon");
    const Counters now = run.at(t);
    if (now.X < run.servers) return 0.0;
    const long long level = now.Q;
    long long count = 0;
    for (std::size_t i = run.events_upto(t); i < run.events.size(); ++i) {
        const EventRecord& e = run.events[i];
        if (e.kind == EventKind::Departure) {
            ++count;
        } else if (e.kind == EventKind::Renege && e.customer <= now.E) {
            ++count;
        }
        if (count > level) return e.time - t;
    }
    throw HorizonExceeded("virtual_wait: the run ends before the virtual customer enters service");
}

struct CompensatorPaths {
    std::vector<double> times;
    std::vector<double> departures;          // A_D
    std::vector<double> potential_reneging;  // A_S
    std::vector<double> reneging;            // A_R
};

namespace detail {

// Adds f(min(tau, end)) to acc[i] for every times[i] = tau > start. f must be
// zero at start.
template <class F>
void accumulate_segment(const std::vector<double>& times, std::vector<double>& acc, std::vector<double>& tail,
                        double start, double end, F&& f) {
    if (!(end > start)) return;
    auto i = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), start) - times.begin());
    for (; i < times.size() && times[i] < end; ++i) acc[i] += f(times[i]);
    if (i < times.size()) tail[i] += f(end);
}

}  // namespace detail

// Compensators of D, S and R at the given sorted times: integrals of the
// hazard along each customer's age (service) or potential waiting time
// (patience). The reneging compensator only integrates while the customer is
// in queue, which is the change-of-variables form with iota = 0 a.e.
inline CompensatorPaths compensators_at(const SimRun& run, const DistributionModel& service,
                                        const DistributionModel& patience, std::vector<double> times) {
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    std::vector<double> ad(n, 0.0), as(n, 0.0), ar(n, 0.0), td(n, 0.0), ts(n, 0.0), tr(n, 0.0);
    constexpr double kOpen = std::numeric_limits<double>::infinity();
    for (const CustomerRecord& c : run.customers) {
        if (c.service_start) {
            const double start = *c.service_start;
            const double from = std::max(0.0, start);
            const double until = c.departure_time ? *c.departure_time : kOpen;
            detail::accumulate_segment(times, ad, td, from, until, [&](double tau) {
                return service.cumulative_hazard(from - start, tau - start);
            });
        }
        if (c.tracked_in_eta) {
            const double zeta = c.arrival_time;
            const double from = std::max(0.0, zeta);
            const double expire = c.potential_renege_time ? *c.potential_renege_time : kOpen;
            detail::accumulate_segment(times, as, ts, from, expire, [&](double tau) {
                return patience.cumulative_hazard(from - zeta, tau - zeta);
            });
            if (c.status != CustomerStatus::PotentialOnly) {
                double leave = kOpen;
                if (c.renege_time) leave = *c.renege_time;
                if (c.service_start && *c.service_start >= 0.0) leave = *c.service_start;
                detail::accumulate_segment(times, ar, tr, from, leave, [&](double tau) {
                    return patience.cumulative_hazard(from - zeta, tau - zeta);
                });
            }
        }
    }
    double cd = 0.0, cs = 0.0, cr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cd += td[i];
        cs += ts[i];
        cr += tr[i];
        ad[i] += cd;
        as[i] += cs;
        ar[i] += cr;
    }
    return CompensatorPaths{std::move(times), std::move(ad), std::move(as), std::move(ar)};
}

inline CompensatorPaths compensator_paths(const SimRun& run, const DistributionModel& service,
                                          const DistributionModel& patience, double quad_dt) {
    if (!(quad_dt > 0.0)) throw ConfigError("compensator_paths: quad_dt must be positive");
    const auto n = static_cast<std::size_t>(std::floor(run.horizon / quad_dt + 1e-9));
    std::vector<double> times(n + 1);
    for (std::size_t i = 0; i <= n; ++i) times[i] = quad_dt * static_cast<double>(i);
    return compensators_at(run, service, patience, std::move(times));
}

}  // namespace renege
