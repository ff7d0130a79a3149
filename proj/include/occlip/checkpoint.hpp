#pragma once

// Named-tensor archive: "OCCK", format version, tensor count, then per
// tensor its name, shape, dtype and raw little-endian data. A JSON sidecar
// (<archive>.json) carries the config, step and config hash.

#include "occlip/autograd.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace occlip {

struct TensorArchive {
    std::map<std::string, ag::Matrix<double>> tensors;
    nlohmann::json meta;

    void save(const std::filesystem::path& path) const;
    /// Throws Error(Io) on missing files or a corrupt archive.
    static TensorArchive load(const std::filesystem::path& path);
};

/// 64-bit FNV-1a of the compact JSON dump, hex encoded.
std::string config_hash(const nlohmann::json& config);

}  // namespace occlip
