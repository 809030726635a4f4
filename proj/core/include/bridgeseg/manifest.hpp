#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace bridgeseg {

// One dataset record. Patch records carry a dominant-class label; region
// records carry a path to the one-hot mask container instead.
struct ManifestItem {
    std::string image;  // path relative to the manifest's directory
    int label = -1;     // patch records only
    std::string mask;   // region records only
    int row = 0;        // grid coordinates in the padded slide
    int col = 0;
    std::string wsi;    // id of the source slide
};

struct DatasetGeometry {
    int wsi_h = 0, wsi_w = 0;
    int region_h = 0, region_w = 0;
    int patch_h = 0, patch_w = 0;
};

// Split -> records. Splits are disjoint by construction; validate() checks
// that every referenced file exists.
struct DatasetManifest {
    DatasetGeometry geometry;
    std::map<std::string, std::vector<ManifestItem>> splits;

    size_t total_items() const;
    void append(const DatasetManifest& other);  // geometry must match

    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);
    void validate(const std::filesystem::path& base_dir) const;
};

}  // namespace bridgeseg
