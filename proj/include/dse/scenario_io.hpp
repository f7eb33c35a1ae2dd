#pragma once

#include "dse/scenarios.hpp"

#include <json.hpp>

#include <filesystem>

namespace dse::sim {

using nlohmann::json;

inline json to_json(const MachineSpec& m) {
    const auto& p = m.params;
    json j;
    j["kind"] = p.kind == MachineKind::GENROU ? "GENROU" : "GENCLS";
    j["H"] = p.H;
    j["D"] = p.D;
    j["omega0"] = p.omega0;
    j["Xd"] = p.Xd;
    j["Xq"] = p.Xq;
    j["Xd_p"] = p.Xd_p;
    j["Xq_p"] = p.Xq_p;
    j["Xd_pp"] = p.Xd_pp;
    j["Xq_pp"] = p.Xq_pp;
    j["Td0_p"] = p.Td0_p;
    j["Tq0_p"] = p.Tq0_p;
    j["Td0_pp"] = p.Td0_pp;
    j["Tq0_pp"] = p.Tq0_pp;
    j["Ra"] = p.Ra;
    j["dispatch"] = {{"P", m.dispatch.P}, {"Q", m.dispatch.Q}, {"V", m.dispatch.V}, {"theta", m.dispatch.theta}};
    j["avr"] = m.gains.avr_enabled
                   ? json{{"gain", m.gains.avr_gain}, {"lag", m.gains.avr_lag},
                          {"efd_min", m.gains.efd_min}, {"efd_max", m.gains.efd_max}}
                   : json(nullptr);
    j["gov"] = m.gains.gov_enabled
                   ? json{{"droop", m.gains.gov_droop}, {"lag", m.gains.gov_lag},
                          {"pm_min", m.gains.pm_min}, {"pm_max", m.gains.pm_max}}
                   : json(nullptr);
    return j;
}

inline MachineSpec machine_from_json(const json& j) {
    MachineSpec m;
    auto& p = m.params;
    p.kind = j.at("kind").get<std::string>() == "GENCLS" ? MachineKind::GENCLS : MachineKind::GENROU;
    p.H = j.at("H").get<double>();
    p.D = j.at("D").get<double>();
    p.omega0 = j.value("omega0", p.omega0);
    p.Xd = j.at("Xd").get<double>();
    p.Xq = j.at("Xq").get<double>();
    p.Xd_p = j.at("Xd_p").get<double>();
    p.Xq_p = j.at("Xq_p").get<double>();
    p.Xd_pp = j.at("Xd_pp").get<double>();
    p.Xq_pp = j.at("Xq_pp").get<double>();
    p.Td0_p = j.at("Td0_p").get<double>();
    p.Tq0_p = j.at("Tq0_p").get<double>();
    p.Td0_pp = j.at("Td0_pp").get<double>();
    p.Tq0_pp = j.at("Tq0_pp").get<double>();
    p.Ra = j.value("Ra", 0.0);
    const auto& d = j.at("dispatch");
    m.dispatch = {d.at("P").get<double>(), d.at("Q").get<double>(), d.at("V").get<double>(),
                  d.at("theta").get<double>()};
    if (j.contains("avr") && !j["avr"].is_null()) {
        m.gains.avr_enabled = true;
        m.gains.avr_gain = j["avr"].value("gain", m.gains.avr_gain);
        m.gains.avr_lag = j["avr"].value("lag", m.gains.avr_lag);
        m.gains.efd_min = j["avr"].value("efd_min", m.gains.efd_min);
        m.gains.efd_max = j["avr"].value("efd_max", m.gains.efd_max);
    } else {
        m.gains.avr_enabled = false;
    }
    if (j.contains("gov") && !j["gov"].is_null()) {
        m.gains.gov_enabled = true;
        m.gains.gov_droop = j["gov"].value("droop", m.gains.gov_droop);
        m.gains.gov_lag = j["gov"].value("lag", m.gains.gov_lag);
        m.gains.pm_min = j["gov"].value("pm_min", m.gains.pm_min);
        m.gains.pm_max = j["gov"].value("pm_max", m.gains.pm_max);
    } else {
        m.gains.gov_enabled = false;
    }
    return m;
}

inline json to_json(const EventScript& ev) {
    return {{"kind", event_kind_name(ev.kind)}, {"t_start", ev.t_start}, {"duration", ev.duration},
            {"magnitude", ev.magnitude}, {"location", ev.location}};
}

inline EventScript event_from_json(const json& j) {
    EventScript ev;
    ev.kind = event_kind_from_name(j.at("kind").get<std::string>());
    ev.t_start = j.at("t_start").get<double>();
    ev.duration = j.at("duration").get<double>();
    ev.magnitude = j.value("magnitude", 0.0);
    ev.location = j.at("location").get<int>();
    return ev;
}

inline json to_json(const Scenario& sc) {
    json j;
    j["name"] = sc.name;
    j["pmu_hz"] = sc.pmu_hz;
    j["substeps"] = sc.substeps;
    j["duration"] = sc.duration;
    j["seed"] = sc.seed;
    j["machines"] = json::array();
    for (const auto& m : sc.machines) j["machines"].push_back(to_json(m));
    j["branches"] = json::array();
    for (const auto& b : sc.network.branches)
        j["branches"].push_back({{"from", b.from}, {"to", b.to}, {"r", (1.0 / b.y).real()}, {"x", (1.0 / b.y).imag()}});
    j["events"] = json::array();
    for (const auto& ev : sc.events) j["events"].push_back(to_json(ev));
    return j;
}

inline Scenario scenario_from_json(const json& j) {
    Scenario sc;
    sc.name = j.value("name", "scenario");
    sc.pmu_hz = j.value("pmu_hz", 30.0);
    sc.substeps = j.value("substeps", 100);
    sc.duration = j.value("duration", 10.0);
    sc.seed = j.value("seed", std::uint64_t{1});
    for (const auto& mj : j.at("machines")) sc.machines.push_back(machine_from_json(mj));
    sc.network.n_machines = static_cast<int>(sc.machines.size());
    for (const auto& bj : j.at("branches")) {
        Branch b;
        b.from = bj.at("from").get<int>();
        b.to = bj.at("to").get<int>();
        b.y = 1.0 / std::complex<double>(bj.value("r", 0.0), bj.at("x").get<double>());
        sc.network.branches.push_back(b);
    }
    if (j.contains("events"))
        for (const auto& ej : j["events"]) sc.events.push_back(event_from_json(ej));
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
    return scenario_from_json(json::parse(io::read_text(path)));
}

inline void save_scenario(const Scenario& sc, const std::filesystem::path& path) {
    io::write_text(path, to_json(sc).dump(2) + "\n");
}

} // namespace dse::sim
