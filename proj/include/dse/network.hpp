#pragma once

#include "dse/rng.hpp"

#include <Eigen/Core>
#include <cmath>
#include <complex>
#include <map>
#include <stdexcept>
#include <vector>

namespace dse::sim {

enum class EventKind { short_circuit, line_trip, load_change, generator_trip };

inline const char* event_kind_name(EventKind k) {
    switch (k) {
        case EventKind::short_circuit: return "short_circuit";
        case EventKind::line_trip: return "line_trip";
        case EventKind::load_change: return "load_change";
        case EventKind::generator_trip: return "generator_trip";
    }
    return "?";
}

inline EventKind event_kind_from_name(const std::string& s) {
    if (s == "short_circuit") return EventKind::short_circuit;
    if (s == "line_trip") return EventKind::line_trip;
    if (s == "load_change") return EventKind::load_change;
    if (s == "generator_trip") return EventKind::generator_trip;
    throw std::invalid_argument("unknown event kind: " + s);
}

struct EventScript {
    EventKind kind = EventKind::short_circuit;
    double t_start = 1.0;
    double duration = 0.1;
    // Fault impedance (p.u.) for short circuits, active-power delta (p.u.)
    // for load changes; unused for trips.
    double magnitude = 0.0;
    int location = 0; // bus, branch, or machine index depending on kind

    bool active_at(double t) const { return t >= t_start && t < t_start + duration; }

    void validate(int n_buses, int n_branches) const {
        if (!(t_start > 0.0)) throw std::invalid_argument("event: t_start must be > 0");
        if (!(duration >= 0.0)) throw std::invalid_argument("event: duration must be >= 0");
        const int limit = (kind == EventKind::line_trip) ? n_branches : n_buses;
        if (location < 0 || location >= limit) throw std::invalid_argument("event: location out of range");
        if (kind == EventKind::short_circuit && !(magnitude > 0.0))
            throw std::invalid_argument("event: fault impedance must be > 0");
    }
};

struct Branch {
    int from = 0, to = 0;
    std::complex<double> y; // series admittance, p.u.
};

// Reduced network over the machine buses: every bus carries one machine,
// interior buses are assumed already eliminated. Loads are constant
// admittance shunts, normally produced by the equilibrium initialization.
struct NetworkModel {
    int n_machines = 0;
    std::vector<Branch> branches;
    Eigen::VectorXcd shunt_loads; // per-bus load admittance

    Eigen::MatrixXcd ybus(const std::vector<const EventScript*>& active) const {
        Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n_machines, n_machines);
        std::vector<bool> tripped_branch(branches.size(), false);
        for (const auto* ev : active)
            if (ev->kind == EventKind::line_trip) tripped_branch[static_cast<std::size_t>(ev->location)] = true;
        for (std::size_t b = 0; b < branches.size(); ++b) {
            if (tripped_branch[b]) continue;
            const auto& br = branches[b];
            y(br.from, br.from) += br.y;
            y(br.to, br.to) += br.y;
            y(br.from, br.to) -= br.y;
            y(br.to, br.from) -= br.y;
        }
        if (shunt_loads.size() == n_machines)
            for (int i = 0; i < n_machines; ++i) y(i, i) += shunt_loads[i];
        for (const auto* ev : active) {
            switch (ev->kind) {
                case EventKind::short_circuit:
                    y(ev->location, ev->location) += 1.0 / std::complex<double>(0.0, ev->magnitude);
                    break;
                case EventKind::load_change:
                    // constant-admittance load step sized for nominal voltage
                    y(ev->location, ev->location) += std::complex<double>(ev->magnitude, 0.0);
                    break;
                default:
                    break;
            }
        }
        return y;
    }
};

struct EventRanges {
    std::vector<EventKind> kinds = {EventKind::short_circuit, EventKind::line_trip, EventKind::load_change};
    double t_start = 1.0;
    double duration_min = 0.05, duration_max = 0.15;
    // Dips of roughly 15-45% at the faulted bus; deep terminal faults rail
    // the exciter stand-in, which the estimation studies do not need.
    double fault_z_min = 0.30, fault_z_max = 0.80;
    double load_delta_min = 0.05, load_delta_max = 0.30; // sign drawn separately
    bool load_change_persistent = true;
    int n_buses = 0, n_branches = 0, n_machines = 0;
};

// Event boundaries are snapped to this grid so they land on RK4 step
// boundaries for both the nominal and the halved integration step.
constexpr double kEventTimeGrid = 1.0 / 300.0;

inline double snap_to_event_grid(double t) {
    double snapped = std::round(t / kEventTimeGrid) * kEventTimeGrid;
    return snapped < kEventTimeGrid ? kEventTimeGrid : snapped;
}

inline std::vector<EventScript> generate_event_set(int count, std::uint64_t seed, const EventRanges& ranges) {
    if (count <= 0) throw std::invalid_argument("generate_event_set: count must be > 0");
    if (ranges.kinds.empty()) throw std::invalid_argument("generate_event_set: no event kinds configured");
    if (ranges.n_buses <= 0) throw std::invalid_argument("generate_event_set: empty location range");
    rng::Stream stream(seed);
    std::vector<EventScript> events;
    events.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        EventScript ev;
        ev.kind = ranges.kinds[static_cast<std::size_t>(
            stream.uniform_int(0, static_cast<std::int64_t>(ranges.kinds.size()) - 1))];
        ev.t_start = ranges.t_start;
        ev.duration = snap_to_event_grid(stream.uniform(ranges.duration_min, ranges.duration_max));
        switch (ev.kind) {
            case EventKind::short_circuit:
                ev.location = static_cast<int>(stream.uniform_int(0, ranges.n_buses - 1));
                ev.magnitude = stream.uniform(ranges.fault_z_min, ranges.fault_z_max);
                break;
            case EventKind::line_trip:
                if (ranges.n_branches <= 0) throw std::invalid_argument("generate_event_set: no branches to trip");
                ev.location = static_cast<int>(stream.uniform_int(0, ranges.n_branches - 1));
                break;
            case EventKind::load_change: {
                ev.location = static_cast<int>(stream.uniform_int(0, ranges.n_buses - 1));
                double mag = stream.uniform(ranges.load_delta_min, ranges.load_delta_max);
                ev.magnitude = stream.uniform(0.0, 1.0) < 0.5 ? -mag : mag;
                if (ranges.load_change_persistent) ev.duration = 1e9;
                break;
            }
            case EventKind::generator_trip:
                ev.location = static_cast<int>(stream.uniform_int(0, ranges.n_machines - 1));
                break;
        }
        events.push_back(ev);
    }
    return events;
}

} // namespace dse::sim
