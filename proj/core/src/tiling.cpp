#include "bridgeseg/tiling.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace bridgeseg {

void check_simplex(const Tensor& values, double tol) {
    if (values.rank() != 3) throw std::invalid_argument("mask must be (C,h,w)");
    const int c = values.dim(0), h = values.dim(1), w = values.dim(2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double sum = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                double v = values.at3(ch, y, x);
                if (v < -tol) throw std::invalid_argument("negative probability in mask");
                sum += v;
            }
            if (std::abs(sum - 1.0) > tol) {
                throw std::invalid_argument("mask pixel off the simplex");
            }
        }
    }
}

RegionGrid make_region_grid(int h, int w, int region_h, int region_w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("empty image");
    if (region_h <= 0 || region_w <= 0) throw std::invalid_argument("bad region shape");
    RegionGrid g;
    g.orig_h = h;
    g.orig_w = w;
    g.region_h = region_h;
    g.region_w = region_w;
    g.rows = (h + region_h - 1) / region_h;
    g.cols = (w + region_w - 1) / region_w;
    g.pad_h = g.rows * region_h - h;
    g.pad_w = g.cols * region_w - w;
    g.coords.reserve(static_cast<size_t>(g.rows) * g.cols);
    for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) {
            g.coords.emplace_back(r * region_h, c * region_w);
        }
    }
    return g;
}

static Raster<uint8_t> pad_raster(const Raster<uint8_t>& img, int ph, int pw,
                                  const std::vector<uint8_t>& fill) {
    if (ph == 0 && pw == 0) return img;
    Raster<uint8_t> out(img.height + ph, img.width + pw, img.channels);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < out.channels; ++c) {
                out.at(y, x, c) = (y < img.height && x < img.width)
                                      ? img.at(y, x, c)
                                      : fill[static_cast<size_t>(c)];
            }
        }
    }
    return out;
}

std::pair<RegionGrid, std::vector<Raster<uint8_t>>> split_into_regions(
    const Raster<uint8_t>& image, int region_h, int region_w,
    const std::vector<uint8_t>& fill) {
    if (image.empty()) throw std::invalid_argument("empty image");
    if (static_cast<int>(fill.size()) != image.channels) {
        throw std::invalid_argument("fill size must equal channel count");
    }
    RegionGrid grid = make_region_grid(image.height, image.width, region_h, region_w);
    Raster<uint8_t> padded = pad_raster(image, grid.pad_h, grid.pad_w, fill);
    std::vector<Raster<uint8_t>> regions;
    regions.reserve(grid.coords.size());
    for (const auto& [y, x] : grid.coords) {
        regions.push_back(crop(padded, y, x, region_h, region_w));
    }
    return {std::move(grid), std::move(regions)};
}

std::pair<RegionGrid, std::vector<Raster<uint8_t>>> split_into_regions(
    const Raster<uint8_t>& image, int region_h, int region_w) {
    std::vector<uint8_t> fill;
    if (image.channels == 3) {
        fill = {255, 255, 255};
    } else {
        fill.assign(image.channels, static_cast<uint8_t>(ClassId::BG));
    }
    return split_into_regions(image, region_h, region_w, fill);
}

std::pair<PatchGrid, std::vector<Raster<uint8_t>>> split_into_patches(
    const Raster<uint8_t>& region, int patch_h, int patch_w) {
    if (region.empty()) throw std::invalid_argument("empty region");
    if (patch_h <= 0 || patch_w <= 0) throw std::invalid_argument("bad patch shape");
    if (region.height % patch_h != 0 || region.width % patch_w != 0) {
        throw std::invalid_argument("region dims not divisible by patch shape");
    }
    PatchGrid g;
    g.region_h = region.height;
    g.region_w = region.width;
    g.patch_h = patch_h;
    g.patch_w = patch_w;
    g.rows = region.height / patch_h;
    g.cols = region.width / patch_w;
    std::vector<Raster<uint8_t>> patches;
    patches.reserve(static_cast<size_t>(g.rows) * g.cols);
    for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) {
            g.coords.emplace_back(r * patch_h, c * patch_w);
            patches.push_back(crop(region, r * patch_h, c * patch_w, patch_h, patch_w));
        }
    }
    return {std::move(g), std::move(patches)};
}

int dominant_class(const LabelMap& label_patch) {
    if (label_patch.empty()) throw std::invalid_argument("empty label patch");
    if (label_patch.channels != 1) throw std::invalid_argument("label patch must be single-channel");
    std::array<int64_t, kNumClasses> counts{};
    for (uint8_t v : label_patch.data) {
        if (!is_valid_class(v)) throw std::invalid_argument("invalid class id in patch");
        counts[v]++;
    }
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c) {
        if (counts[c] > counts[best]) best = c;
    }
    return best;
}

ProbMask assemble_coarse_mask(const std::vector<std::vector<double>>& patch_probs,
                              const PatchGrid& grid) {
    if (static_cast<int>(patch_probs.size()) != grid.k()) {
        throw std::invalid_argument("need exactly one probability vector per patch");
    }
    ProbMask mask;
    mask.kind = MaskKind::Coarse;
    mask.values = Tensor::zeros({kNumClasses, grid.region_h, grid.region_w});
    for (int p = 0; p < grid.k(); ++p) {
        const auto& v = patch_probs[static_cast<size_t>(p)];
        if (static_cast<int>(v.size()) != kNumClasses) {
            throw std::invalid_argument("probability vector has wrong length");
        }
        double sum = 0.0;
        for (double q : v) {
            if (q < -1e-6) throw std::invalid_argument("negative patch probability");
            sum += q;
        }
        if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("patch probabilities off the simplex");
        const auto [y0, x0] = grid.coords[static_cast<size_t>(p)];
        for (int c = 0; c < kNumClasses; ++c) {
            for (int y = y0; y < y0 + grid.patch_h; ++y) {
                for (int x = x0; x < x0 + grid.patch_w; ++x) {
                    mask.values.at3(c, y, x) = v[static_cast<size_t>(c)];
                }
            }
        }
    }
    return mask;
}

static int argmax_pixel(const Tensor& values, int y, int x) {
    int best = 0;
    double best_v = values.at3(0, y, x);
    for (int c = 1; c < values.dim(0); ++c) {
        double v = values.at3(c, y, x);
        if (v > best_v) {
            best_v = v;
            best = c;
        }
    }
    return best;
}

LabelMap merge_regions(const std::vector<ProbMask>& refined, const RegionGrid& grid) {
    if (static_cast<int>(refined.size()) != grid.n()) {
        throw std::invalid_argument("need exactly one mask per region");
    }
    LabelMap out(grid.orig_h, grid.orig_w, 1);
    for (int i = 0; i < grid.n(); ++i) {
        const auto& m = refined[static_cast<size_t>(i)];
        if (m.height() != grid.region_h || m.width() != grid.region_w) {
            throw std::invalid_argument("refined mask shape mismatch");
        }
        const auto [y0, x0] = grid.coords[static_cast<size_t>(i)];
        for (int y = 0; y < grid.region_h; ++y) {
            int gy = y0 + y;
            if (gy >= grid.orig_h) break;
            for (int x = 0; x < grid.region_w; ++x) {
                int gx = x0 + x;
                if (gx >= grid.orig_w) continue;
                out.at(gy, gx) = static_cast<uint8_t>(argmax_pixel(m.values, y, x));
            }
        }
    }
    return out;
}

Raster<uint8_t> concat_regions(const std::vector<Raster<uint8_t>>& regions,
                               const RegionGrid& grid) {
    if (static_cast<int>(regions.size()) != grid.n() || regions.empty()) {
        throw std::invalid_argument("region count mismatch");
    }
    Raster<uint8_t> out(grid.padded_h(), grid.padded_w(), regions[0].channels);
    for (int i = 0; i < grid.n(); ++i) {
        const auto [y, x] = grid.coords[static_cast<size_t>(i)];
        paste(out, regions[static_cast<size_t>(i)], y, x);
    }
    return out;
}

Raster<uint8_t> concat_patches(const std::vector<Raster<uint8_t>>& patches,
                               const PatchGrid& grid) {
    if (static_cast<int>(patches.size()) != grid.k() || patches.empty()) {
        throw std::invalid_argument("patch count mismatch");
    }
    Raster<uint8_t> out(grid.region_h, grid.region_w, patches[0].channels);
    for (int i = 0; i < grid.k(); ++i) {
        const auto [y, x] = grid.coords[static_cast<size_t>(i)];
        paste(out, patches[static_cast<size_t>(i)], y, x);
    }
    return out;
}

}  // namespace bridgeseg
