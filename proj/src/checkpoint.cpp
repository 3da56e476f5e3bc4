#include "lara/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lara {

namespace {
constexpr char kMagic[5] = {'L', 'A', 'R', 'A', '1'};
}

Tensor CheckpointData::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    fail("checkpoint: tensor '" + name + "' not found");
}

bool CheckpointData::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    nlohmann::json header;
    header["version"] = 1;
    header["meta"] = data.meta;
    nlohmann::json entries = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : data.tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = "f64";
        e["offset"] = offset;
        const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * sizeof(double);
        e["nbytes"] = nbytes;
        offset += nbytes;
        entries.push_back(e);
    }
    header["tensors"] = entries;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_checkpoint: cannot open '" + path + "' for writing");
    f.write(kMagic, 5);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : data.tensors) {
        f.write(reinterpret_cast<const char*>(t.value().data()),
                static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(double))));
    }
    check(f.good(), "save_checkpoint: write failed for '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_checkpoint: cannot open '" + path + "'");
    char magic[5];
    f.read(magic, 5);
    check(f.good() && std::memcmp(magic, kMagic, 5) == 0,
          "load_checkpoint: '" + path + "' is not a LARA1 checkpoint");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    check(f.good(), "load_checkpoint: truncated header in '" + path + "'");
    nlohmann::json header = nlohmann::json::parse(hs);

    CheckpointData data;
    data.meta = header.value("meta", nlohmann::json::object());
    const std::streampos payload_start = f.tellg();
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name");
        Shape shape = e.at("shape").get<Shape>();
        const std::string dtype = e.at("dtype");
        const uint64_t offset = e.at("offset");
        const int64_t n = numel(shape);
        std::vector<double> values(static_cast<size_t>(n));
        f.seekg(payload_start + static_cast<std::streamoff>(offset));
        if (dtype == "f64") {
            f.read(reinterpret_cast<char*>(values.data()),
                   static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(double))));
        } else if (dtype == "f32") {
            std::vector<float> tmp(static_cast<size_t>(n));
            f.read(reinterpret_cast<char*>(tmp.data()),
                   static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(float))));
            for (int64_t i = 0; i < n; ++i) values[static_cast<size_t>(i)] = tmp[static_cast<size_t>(i)];
        } else {
            fail("load_checkpoint: unsupported dtype '" + dtype + "' for tensor '" + name + "'");
        }
        check(f.good(), "load_checkpoint: truncated payload for tensor '" + name + "'");
        data.tensors.emplace_back(name, Tensor::from_vector(shape, std::move(values)));
    }
    return data;
}

}  // namespace lara
