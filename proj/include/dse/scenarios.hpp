#pragma once

#include "dse/simulate.hpp"

namespace dse::sim {

// Study machine used across the desk-scale systems.
inline MachineParams default_genrou() {
    return MachineParams{};
}

// Single machine against a stiff bus. The grid side is a classical machine
// with a very large inertia, which keeps the network model square.
inline Scenario smib_scenario() {
    Scenario sc;
    sc.name = "smib";

    MachineSpec gen;
    gen.params = default_genrou();
    gen.dispatch = {0.8, 0.2, 1.00, 0.15};

    MachineSpec inf;
    inf.params.kind = MachineKind::GENCLS;
    inf.params.H = 1e5;
    inf.params.D = 0.0;
    inf.params.Xd_p = 0.05;
    inf.params.Xd = 1.0;
    inf.params.Xq = 1.0;
    inf.params.Xq_p = 0.5;
    inf.params.Xd_pp = inf.params.Xq_pp = 0.05;
    inf.params.Ra = 0.0;
    inf.gains.avr_enabled = false;
    inf.gains.gov_enabled = false;
    inf.dispatch = {0.0, 0.0, 1.00, 0.0};

    sc.machines = {gen, inf};
    // double-circuit tie so a line trip leaves the system connected
    sc.network.n_machines = 2;
    sc.network.branches = {{0, 1, 1.0 / std::complex<double>(0.01, 0.90)},
                           {0, 1, 1.0 / std::complex<double>(0.01, 0.90)}};
    return sc;
}

// Three round-rotor machines on a triangle network with bus loads.
inline Scenario three_machine_scenario() {
    Scenario sc;
    sc.name = "three_machine";

    MachineSpec g1;
    g1.params = default_genrou();
    g1.dispatch = {0.9, 0.30, 1.02, 0.00};

    MachineSpec g2;
    g2.params = default_genrou();
    g2.params.H = 6.0;
    g2.params.D = 1.5;
    g2.dispatch = {0.6, 0.20, 1.00, -0.05};

    MachineSpec g3;
    g3.params = default_genrou();
    g3.params.H = 5.0;
    g3.params.Xd = 1.6;
    g3.dispatch = {0.5, 0.15, 1.01, -0.02};

    sc.machines = {g1, g2, g3};
    sc.network.n_machines = 3;
    sc.network.branches = {{0, 1, 1.0 / std::complex<double>(0.01, 0.40)},
                           {1, 2, 1.0 / std::complex<double>(0.01, 0.50)},
                           {0, 2, 1.0 / std::complex<double>(0.01, 0.60)}};
    return sc;
}

inline Scenario scenario_by_name(const std::string& name) {
    if (name == "smib") return smib_scenario();
    if (name == "three_machine") return three_machine_scenario();
    throw std::invalid_argument("unknown scenario: " + name);
}

inline EventRanges default_event_ranges(const Scenario& sc) {
    EventRanges r;
    r.n_buses = sc.network.n_machines;
    r.n_branches = static_cast<int>(sc.network.branches.size());
    r.n_machines = sc.n_machines();
    return r;
}

} // namespace dse::sim
