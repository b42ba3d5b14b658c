#pragma once

#include <string>

#include "pfl/json_util.hpp"
#include "pfl/sim/market_sim.hpp"

namespace pfl::sim {

/// Field names match the SimConfig members. The regime is a nested object:
/// {"kind": "memoryless"} or {"kind": "persistent", "flip_rate": k, "bias": b}.
Json to_json(const SimConfig& cfg);

/// Missing fields take their defaults; unknown keys are rejected. The result
/// is validated.
SimConfig sim_config_from_json(const Json& doc, const std::string& where = "sim");

Json to_json(const UniverseRanges& ranges);
UniverseRanges universe_ranges_from_json(const Json& doc, const std::string& where = "universe");

}  // namespace pfl::sim
