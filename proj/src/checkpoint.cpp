#include "portrl/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace portrl {

nlohmann::json params_to_json(const ParamSet& params) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : params) {
        nlohmann::json entry;
        entry["name"] = p.name;
        entry["shape"] = p.value.shape;
        entry["values"] = p.value.v;
        out.push_back(std::move(entry));
    }
    return out;
}

void params_from_json(ParamSet& params, const nlohmann::json& j) {
    if (!j.is_array()) throw std::invalid_argument("parameter checkpoint: expected an array");
    for (const auto& entry : j) {
        const std::string name = entry.at("name").get<std::string>();
        Param* p = params.find(name);
        if (!p) throw std::invalid_argument("parameter checkpoint: unknown parameter " + name);
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != p->value.shape)
            throw std::invalid_argument("parameter checkpoint: shape mismatch for " + name);
        p->value.v = entry.at("values").get<std::vector<double>>();
        if (p->value.v.size() != Tensor::count(shape))
            throw std::invalid_argument("parameter checkpoint: value count mismatch for " + name);
    }
}

void save_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

}  // namespace portrl
