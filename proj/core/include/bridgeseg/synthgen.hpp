#pragma once

#include <array>
#include <filesystem>

#include "bridgeseg/classes.hpp"
#include "bridgeseg/manifest.hpp"
#include "bridgeseg/raster.hpp"
#include "bridgeseg/tiling.hpp"

namespace bridgeseg {

// Rendering knobs for the synthetic slides. palette_family 0 is the target
// distribution; other families shift every non-background base color by a
// deterministic per-family offset and widen the speckle, giving the shifted
// source distribution used to pretrain the frozen classifier base.
struct TextureParams {
    double speckle_std = 8.0;
    double bleed = 0.10;       // color mix-in from neighboring classes
    int bleed_radius = 3;      // window half-size for the neighborhood color
    int smooth_radius = 2;     // majority-filter half-size on cell labels
    double cell_area = 9216;   // mean pixels per Voronoi cell (96 x 96)
    int palette_family = 0;
};

std::array<Rgb, kNumClasses> palette_for_family(int family);

struct SyntheticWsi {
    RgbImage image;
    LabelMap labels;
    uint64_t seed = 0;
    std::array<double, kNumClasses> target_freqs{};
    std::array<double, kNumClasses> realized_freqs{};
};

// Class mix matching the reference dataset's patch distribution.
std::array<double, kNumClasses> reference_class_freqs();

// Seeded Voronoi tissue map plus RGB rendering. Cell count scales with area;
// cell classes are drawn by remaining-area deficit so realized frequencies
// track the targets within a cell's area. Boundaries are smoothed by a
// fixed-radius majority filter. Same (seed, parameters) in, bit-identical
// rasters out.
SyntheticWsi generate_wsi(uint64_t seed, int height, int width,
                          const std::array<double, kNumClasses>& class_freqs,
                          const TextureParams& tex = {});

// Fraction of pixels whose every channel is >= 230; the tissue filter drops
// tiles at or above near_white_cutoff.
inline constexpr double kNearWhiteCutoff = 0.95;
double near_white_fraction(const RgbImage& tile);

// Cuts the slide into patch tiles, drops near-white tiles, labels each
// survivor with its dominant class and assigns train/valid/test by seeded
// hash order over grid coordinates (exact quantile split). Tile images are
// written under dir; returned paths are relative to dir.
DatasetManifest derive_patch_dataset(const SyntheticWsi& wsi, int patch_size,
                                     const std::array<double, 3>& split_fracs,
                                     const std::filesystem::path& dir,
                                     const std::string& stem);

// Cuts the slide into regions (region_size must be patch_size * 2^k, k >= 1)
// and writes one RGB image plus one-hot mask container per region, all under
// the "train" split. The record count equals the region grid size.
DatasetManifest derive_region_dataset(const SyntheticWsi& wsi, int region_size,
                                      int patch_size,
                                      const std::filesystem::path& dir,
                                      const std::string& stem);

// One-hot (C,h,w) stack from a label map.
ProbMask onehot_from_labels(const LabelMap& labels);

}  // namespace bridgeseg
