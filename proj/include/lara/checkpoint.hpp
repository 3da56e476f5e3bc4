#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lara/tensor.hpp"

namespace lara {

// Single-file parameter checkpoint: magic "LARA1", a little-endian u64 JSON
// header length, the header (name -> shape/dtype/offset), then raw
// little-endian arrays. Writes f64; reads f32 or f64.
struct CheckpointData {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    Tensor find(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

}  // namespace lara
