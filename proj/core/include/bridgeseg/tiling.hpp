#pragma once

#include <utility>
#include <vector>

#include "bridgeseg/classes.hpp"
#include "bridgeseg/raster.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

// Slide-to-region decomposition. The slide is padded bottom/right to exact
// multiples of the region shape, so regions cover the padded area exactly
// once in row-major order.
struct RegionGrid {
    int orig_h = 0, orig_w = 0;   // before padding
    int region_h = 0, region_w = 0;
    int pad_h = 0, pad_w = 0;
    int rows = 0, cols = 0;
    std::vector<std::pair<int, int>> coords;  // (y, x) origins, row-major

    int n() const { return rows * cols; }
    int padded_h() const { return orig_h + pad_h; }
    int padded_w() const { return orig_w + pad_w; }
};

// Region-to-patch decomposition; patches tile the region exactly.
struct PatchGrid {
    int region_h = 0, region_w = 0;
    int patch_h = 0, patch_w = 0;
    int rows = 0, cols = 0;
    std::vector<std::pair<int, int>> coords;

    int k() const { return rows * cols; }
};

// Per-pixel class-probability stack of shape (C, h, w).
//
// OneHot, Coarse and Refined masks live on the simplex (each pixel's channel
// vector sums to 1 within 1e-6). DiffusionState carries Gaussian noise and is
// unconstrained.
enum class MaskKind { OneHot, Coarse, DiffusionState, Refined };

struct ProbMask {
    Tensor values;  // (C, h, w)
    MaskKind kind = MaskKind::Coarse;

    int channels() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
};

// Throws unless every pixel of (C,h,w) `values` is non-negative and channel
// sums to 1 within tol.
void check_simplex(const Tensor& values, double tol = 1e-6);

RegionGrid make_region_grid(int h, int w, int region_h, int region_w);

// Pads bottom/right with `fill` to region multiples and crops. fill is
// per-channel: {255,255,255} for RGB slides, {BG} for label maps.
std::pair<RegionGrid, std::vector<Raster<uint8_t>>> split_into_regions(
    const Raster<uint8_t>& image, int region_h, int region_w,
    const std::vector<uint8_t>& fill);

// fill defaults: white for 3-channel rasters, BG for 1-channel label maps.
std::pair<RegionGrid, std::vector<Raster<uint8_t>>> split_into_regions(
    const Raster<uint8_t>& image, int region_h, int region_w);

// Region dims must be divisible by the patch shape; anything else signals a
// geometry misconfiguration upstream.
std::pair<PatchGrid, std::vector<Raster<uint8_t>>> split_into_patches(
    const Raster<uint8_t>& region, int patch_h, int patch_w);

// Argmax of per-class pixel counts; ties break toward the lowest class id.
int dominant_class(const LabelMap& label_patch);

// Broadcasts one probability vector per patch over its footprint, giving the
// coarse mask for the region. Each vector must be a simplex point.
ProbMask assemble_coarse_mask(const std::vector<std::vector<double>>& patch_probs,
                              const PatchGrid& grid);

// Per-pixel argmax of each refined mask placed at its region origin, padding
// stripped. Ties break toward the lowest class id.
LabelMap merge_regions(const std::vector<ProbMask>& refined, const RegionGrid& grid);

// Reassembles crops into the padded raster (inverse of split_into_regions
// before padding removal).
Raster<uint8_t> concat_regions(const std::vector<Raster<uint8_t>>& regions,
                               const RegionGrid& grid);
Raster<uint8_t> concat_patches(const std::vector<Raster<uint8_t>>& patches,
                               const PatchGrid& grid);

}  // namespace bridgeseg
