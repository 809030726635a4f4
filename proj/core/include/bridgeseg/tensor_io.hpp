#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

// Binary tensor container. Layout:
//   bytes 0..7    magic "BSEGTNS1"
//   bytes 8..11   uint32 little-endian header length L
//   bytes 12..12+L-1  UTF-8 JSON header
//   then          raw little-endian float payload
//
// Header: {"meta": {...}, "tensors": [{"name", "shape", "dtype", "offset",
// "frozen", optional "adapter_of"}]}. Offsets are byte offsets into the
// payload. dtype is "f64" (written) or "f32" (accepted on read). The meta
// object carries checkpoint-level context such as the diffusion schedule, so
// a checkpoint alone reproduces its samples.
struct TensorEntry {
    std::string name;
    Tensor tensor;
    bool frozen = false;
    std::string adapter_of;  // name of the frozen base matrix, for LoRA pairs
};

struct TensorFile {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<TensorEntry> entries;

    void add(std::string name, Tensor t, bool frozen = false, std::string adapter_of = "");
    const TensorEntry* find(const std::string& name) const;
    const Tensor& require(const std::string& name) const;

    void save(const std::filesystem::path& path) const;
    static TensorFile load(const std::filesystem::path& path);
};

}  // namespace bridgeseg
