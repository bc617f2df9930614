#pragma once

// Parameter checkpoints: a flat dotted-path -> tensor map stored as JSON with
// shape headers, e.g. {"tensors": {"actor.backbone.block0.attn.wq.w":
// {"shape": [128,128], "data": [...]}}}.

#include <fstream>

#include <json.hpp>

#include "seqctl/nn.hpp"

namespace seqctl {

inline constexpr const char* kCheckpointFormat = "seqctl-checkpoint-v1";

inline void save_checkpoint(const ParamMap& pm, const std::string& path) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : pm.items) {
        nlohmann::json entry;
        entry["shape"] = t.shape();
        entry["data"] = t.data();
        tensors[name] = std::move(entry);
    }
    j["tensors"] = std::move(tensors);
    std::ofstream out(path);
    check(out.good(), "save_checkpoint: cannot open " + path);
    out << j.dump();
    check(out.good(), "save_checkpoint: write failed for " + path);
}

// Loads values into the existing parameter tensors; names and shapes must
// match the registry exactly.
inline void load_checkpoint(ParamMap& pm, const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "load_checkpoint: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    check(j.value("format", "") == kCheckpointFormat, "load_checkpoint: unknown format in " + path);
    const auto& tensors = j.at("tensors");
    check(tensors.size() == pm.items.size(), "load_checkpoint: parameter count mismatch");
    for (auto& [name, t] : pm.items) {
        check(tensors.contains(name), "load_checkpoint: missing tensor " + name);
        const auto& entry = tensors.at(name);
        const Shape shape = entry.at("shape").get<Shape>();
        check(shape == t.shape(), "load_checkpoint: shape mismatch for " + name);
        const auto values = entry.at("data").get<std::vector<double>>();
        check(static_cast<i64>(values.size()) == t.size(),
              "load_checkpoint: data size mismatch for " + name);
        t.data() = values;
    }
}

}  // namespace seqctl
