#include "bridgeseg/manifest.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

using nlohmann::json;

size_t DatasetManifest::total_items() const {
    size_t n = 0;
    for (const auto& [_, items] : splits) n += items.size();
    return n;
}

void DatasetManifest::append(const DatasetManifest& other) {
    if (geometry.region_h != other.geometry.region_h ||
        geometry.region_w != other.geometry.region_w ||
        geometry.patch_h != other.geometry.patch_h ||
        geometry.patch_w != other.geometry.patch_w) {
        throw std::invalid_argument("cannot merge manifests with different geometry");
    }
    for (const auto& [split, items] : other.splits) {
        auto& dst = splits[split];
        dst.insert(dst.end(), items.begin(), items.end());
    }
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    json j;
    j["geometry"] = {{"wsi_h", geometry.wsi_h},       {"wsi_w", geometry.wsi_w},
                     {"region_h", geometry.region_h}, {"region_w", geometry.region_w},
                     {"patch_h", geometry.patch_h},   {"patch_w", geometry.patch_w}};
    json jsplits = json::object();
    for (const auto& [split, items] : splits) {
        json arr = json::array();
        for (const auto& it : items) {
            json ji;
            ji["image"] = it.image;
            if (it.label >= 0) ji["label"] = it.label;
            if (!it.mask.empty()) ji["mask"] = it.mask;
            ji["row"] = it.row;
            ji["col"] = it.col;
            ji["wsi"] = it.wsi;
            arr.push_back(std::move(ji));
        }
        jsplits[split] = std::move(arr);
    }
    j["splits"] = std::move(jsplits);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("manifest not found: " + path.string());
    json j = json::parse(in);

    DatasetManifest m;
    const auto& g = j.at("geometry");
    m.geometry.wsi_h = g.at("wsi_h").get<int>();
    m.geometry.wsi_w = g.at("wsi_w").get<int>();
    m.geometry.region_h = g.at("region_h").get<int>();
    m.geometry.region_w = g.at("region_w").get<int>();
    m.geometry.patch_h = g.at("patch_h").get<int>();
    m.geometry.patch_w = g.at("patch_w").get<int>();
    for (const auto& [split, arr] : j.at("splits").items()) {
        auto& items = m.splits[split];
        for (const auto& ji : arr) {
            ManifestItem it;
            it.image = ji.at("image").get<std::string>();
            it.label = ji.value("label", -1);
            it.mask = ji.value("mask", std::string{});
            it.row = ji.at("row").get<int>();
            it.col = ji.at("col").get<int>();
            it.wsi = ji.value("wsi", std::string{});
            items.push_back(std::move(it));
        }
    }
    return m;
}

void DatasetManifest::validate(const std::filesystem::path& base_dir) const {
    for (const auto& [split, items] : splits) {
        for (const auto& it : items) {
            if (!std::filesystem::exists(base_dir / it.image)) {
                throw MissingArtifactError("manifest references missing image: " + it.image);
            }
            if (!it.mask.empty() && !std::filesystem::exists(base_dir / it.mask)) {
                throw MissingArtifactError("manifest references missing mask: " + it.mask);
            }
        }
    }
}

}  // namespace bridgeseg
