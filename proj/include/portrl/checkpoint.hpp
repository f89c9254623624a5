#pragma once

#include <string>

#include <json.hpp>

#include "portrl/graph.hpp"

namespace portrl {

// Parameter serialization: a flat list of {name, shape, values} objects.
// nlohmann::json emits shortest-round-trip decimal doubles, so save/load
// round-trips are exact at double precision.
nlohmann::json params_to_json(const ParamSet& params);
void params_from_json(ParamSet& params, const nlohmann::json& j);

void save_json(const nlohmann::json& j, const std::string& path);
nlohmann::json load_json(const std::string& path);

}  // namespace portrl
