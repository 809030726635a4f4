#include "bridgeseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "bridgeseg/parallel.hpp"
#include "bridgeseg/png_io.hpp"
#include "bridgeseg/rng.hpp"
#include "bridgeseg/tensor_io.hpp"

namespace bridgeseg {

namespace {

constexpr uint64_t kSiteStream = 1;
constexpr uint64_t kClassStream = 2;
constexpr uint64_t kSpeckleStream = 3;
constexpr uint64_t kSplitSalt = 0xa5a5f00dd00ff00dULL;

// Per-class windowed counts via one integral image per class.
struct ClassIntegrals {
    int h = 0, w = 0;
    std::vector<int32_t> sums;  // kNumClasses planes of (h+1)*(w+1)

    void build(const LabelMap& labels) {
        h = labels.height;
        w = labels.width;
        sums.assign(static_cast<size_t>(kNumClasses) * (h + 1) * (w + 1), 0);
        for (int c = 0; c < kNumClasses; ++c) {
            int32_t* plane = sums.data() + static_cast<size_t>(c) * (h + 1) * (w + 1);
            for (int y = 0; y < h; ++y) {
                int32_t row_sum = 0;
                const int32_t* prev = plane + static_cast<size_t>(y) * (w + 1);
                int32_t* cur = plane + static_cast<size_t>(y + 1) * (w + 1);
                for (int x = 0; x < w; ++x) {
                    row_sum += (labels.at(y, x) == c) ? 1 : 0;
                    cur[x + 1] = prev[x + 1] + row_sum;
                }
            }
        }
    }

    // Count of class c inside the clipped window centered at (y, x).
    int32_t count(int c, int y, int x, int radius) const {
        int y0 = std::max(0, y - radius), y1 = std::min(h - 1, y + radius);
        int x0 = std::max(0, x - radius), x1 = std::min(w - 1, x + radius);
        const int32_t* plane = sums.data() + static_cast<size_t>(c) * (h + 1) * (w + 1);
        auto at = [&](int yy, int xx) { return plane[static_cast<size_t>(yy) * (w + 1) + xx]; };
        return at(y1 + 1, x1 + 1) - at(y0, x1 + 1) - at(y1 + 1, x0) + at(y0, x0);
    }
};

}  // namespace

std::array<Rgb, kNumClasses> palette_for_family(int family) {
    std::array<Rgb, kNumClasses> pal = kBasePalette;
    if (family == 0) return pal;
    // BG stays near-white in every family so the tissue filter and padding
    // semantics hold across distributions.
    for (int c = 1; c < kNumClasses; ++c) {
        Rgb& color = pal[static_cast<size_t>(c)];
        uint8_t* ch[3] = {&color.r, &color.g, &color.b};
        for (int k = 0; k < 3; ++k) {
            int offset = static_cast<int>(hash_coords(static_cast<uint64_t>(family), c, k) % 51) - 25;
            int v = std::clamp(static_cast<int>(*ch[k]) + offset, 0, 255);
            *ch[k] = static_cast<uint8_t>(v);
        }
    }
    return pal;
}

std::array<double, kNumClasses> reference_class_freqs() {
    // Tile counts of the reference patch dataset, normalized.
    constexpr std::array<double, kNumClasses> counts = {25509, 159681, 132327, 178153,
                                                        10047, 2845,   383463};
    double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    std::array<double, kNumClasses> freqs{};
    for (int c = 0; c < kNumClasses; ++c) freqs[c] = counts[c] / total;
    return freqs;
}

SyntheticWsi generate_wsi(uint64_t seed, int height, int width,
                          const std::array<double, kNumClasses>& class_freqs,
                          const TextureParams& tex) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("wsi dimensions must be positive");
    double sum = 0.0;
    for (double f : class_freqs) {
        if (f < 0.0) throw std::invalid_argument("class frequencies must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("class frequencies must sum to 1");

    const Rng base(seed);
    const int64_t area = static_cast<int64_t>(height) * width;
    const int n_cells = std::max<int>(8, static_cast<int>(std::llround(area / tex.cell_area)));

    Rng site_rng = base.fork(kSiteStream);
    std::vector<int> site_y(n_cells), site_x(n_cells);
    for (int i = 0; i < n_cells; ++i) {
        site_y[i] = static_cast<int>(site_rng.below(height));
        site_x[i] = static_cast<int>(site_rng.below(width));
    }

    // Nearest site per pixel, ties to the lowest site index.
    std::vector<uint16_t> cell(static_cast<size_t>(area));
    parallel_blocks(height, 32, [&](int64_t y0, int64_t y1) {
        for (int64_t y = y0; y < y1; ++y) {
            for (int x = 0; x < width; ++x) {
                int64_t best = std::numeric_limits<int64_t>::max();
                int best_i = 0;
                for (int i = 0; i < n_cells; ++i) {
                    int64_t dy = y - site_y[i];
                    int64_t dx = x - site_x[i];
                    int64_t d = dy * dy + dx * dx;
                    if (d < best) {
                        best = d;
                        best_i = i;
                    }
                }
                cell[static_cast<size_t>(y) * width + x] = static_cast<uint16_t>(best_i);
            }
        }
    });

    std::vector<int64_t> cell_pixels(n_cells, 0);
    for (uint16_t ci : cell) cell_pixels[ci]++;

    // Assign cell classes in seeded random order, sampling by remaining area
    // deficit so realized frequencies track the targets within a cell's area.
    Rng class_rng = base.fork(kClassStream);
    std::vector<int> order(n_cells);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_cells - 1; i > 0; --i) {
        int j = static_cast<int>(class_rng.below(static_cast<uint64_t>(i) + 1));
        std::swap(order[i], order[j]);
    }

    std::array<double, kNumClasses> assigned{};
    std::vector<uint8_t> cell_class(n_cells, 0);
    for (int idx : order) {
        std::array<double, kNumClasses> deficit{};
        double total_pos = 0.0;
        for (int c = 0; c < kNumClasses; ++c) {
            deficit[c] = class_freqs[c] * static_cast<double>(area) - assigned[c];
            if (deficit[c] > 0.0) total_pos += deficit[c];
        }
        int chosen = 0;
        if (total_pos > 0.0) {
            double u = class_rng.uniform() * total_pos;
            double acc = 0.0;
            for (int c = 0; c < kNumClasses; ++c) {
                if (deficit[c] <= 0.0) continue;
                acc += deficit[c];
                chosen = c;
                if (u < acc) break;
            }
        } else {
            // Everything over-assigned; take the least over-assigned class.
            chosen = static_cast<int>(std::max_element(deficit.begin(), deficit.end()) -
                                      deficit.begin());
        }
        cell_class[idx] = static_cast<uint8_t>(chosen);
        assigned[chosen] += static_cast<double>(cell_pixels[idx]);
    }

    SyntheticWsi wsi;
    wsi.seed = seed;
    wsi.target_freqs = class_freqs;
    wsi.labels = LabelMap(height, width, 1);
    for (int64_t p = 0; p < area; ++p) {
        wsi.labels.data[static_cast<size_t>(p)] = cell_class[cell[static_cast<size_t>(p)]];
    }

    ClassIntegrals integrals;
    if (tex.smooth_radius > 0) {
        integrals.build(wsi.labels);
        LabelMap smoothed(height, width, 1);
        parallel_blocks(height, 32, [&](int64_t y0, int64_t y1) {
            for (int64_t y = y0; y < y1; ++y) {
                for (int x = 0; x < width; ++x) {
                    int best_c = 0;
                    int32_t best_n = -1;
                    for (int c = 0; c < kNumClasses; ++c) {
                        int32_t n = integrals.count(c, static_cast<int>(y), x, tex.smooth_radius);
                        if (n > best_n) {
                            best_n = n;
                            best_c = c;
                        }
                    }
                    smoothed.at(static_cast<int>(y), x) = static_cast<uint8_t>(best_c);
                }
            }
        });
        wsi.labels = std::move(smoothed);
    }

    std::array<int64_t, kNumClasses> label_counts{};
    for (uint8_t v : wsi.labels.data) label_counts[v]++;
    for (int c = 0; c < kNumClasses; ++c) {
        wsi.realized_freqs[c] = static_cast<double>(label_counts[c]) / static_cast<double>(area);
    }

    // Render: base color, bleed toward the window-average class color near
    // boundaries, shared-channel speckle.
    const auto palette = palette_for_family(tex.palette_family);
    integrals.build(wsi.labels);
    wsi.image = RgbImage(height, width, 3);
    const Rng speckle_base = base.fork(kSpeckleStream);
    parallel_blocks(height, 8, [&](int64_t y0, int64_t y1) {
        for (int64_t y = y0; y < y1; ++y) {
            Rng row_rng = speckle_base.fork(static_cast<uint64_t>(y));
            for (int x = 0; x < width; ++x) {
                const int lbl = wsi.labels.at(static_cast<int>(y), x);
                double avg[3] = {0, 0, 0};
                int32_t total = 0;
                for (int c = 0; c < kNumClasses; ++c) {
                    int32_t n = integrals.count(c, static_cast<int>(y), x, tex.bleed_radius);
                    total += n;
                    const Rgb& col = palette[static_cast<size_t>(c)];
                    avg[0] += static_cast<double>(n) * col.r;
                    avg[1] += static_cast<double>(n) * col.g;
                    avg[2] += static_cast<double>(n) * col.b;
                }
                const double noise = row_rng.normal() * tex.speckle_std;
                const Rgb& bc = palette[static_cast<size_t>(lbl)];
                const double base_col[3] = {static_cast<double>(bc.r), static_cast<double>(bc.g),
                                            static_cast<double>(bc.b)};
                for (int k = 0; k < 3; ++k) {
                    double v = (1.0 - tex.bleed) * base_col[k] +
                               tex.bleed * (avg[k] / static_cast<double>(total)) + noise;
                    wsi.image.at(static_cast<int>(y), x, k) =
                        static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                }
            }
        }
    });
    return wsi;
}

double near_white_fraction(const RgbImage& tile) {
    if (tile.channels != 3) throw std::invalid_argument("near_white_fraction expects RGB");
    int64_t white = 0;
    const int64_t n = static_cast<int64_t>(tile.height) * tile.width;
    for (int64_t p = 0; p < n; ++p) {
        const uint8_t* px = &tile.data[static_cast<size_t>(p) * 3];
        if (px[0] >= 230 && px[1] >= 230 && px[2] >= 230) white++;
    }
    return static_cast<double>(white) / static_cast<double>(n);
}

DatasetManifest derive_patch_dataset(const SyntheticWsi& wsi, int patch_size,
                                     const std::array<double, 3>& split_fracs,
                                     const std::filesystem::path& dir,
                                     const std::string& stem) {
    if (patch_size <= 0) throw std::invalid_argument("patch size must be positive");
    if (patch_size > wsi.image.height || patch_size > wsi.image.width) {
        throw std::invalid_argument("patch size larger than image");
    }
    double frac_sum = 0.0;
    for (double f : split_fracs) {
        if (f < 0.0) throw std::invalid_argument("split fractions must be non-negative");
        frac_sum += f;
    }
    if (std::abs(frac_sum - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");

    auto [img_grid, tiles] = split_into_regions(wsi.image, patch_size, patch_size);
    auto [lbl_grid, lbl_tiles] = split_into_regions(wsi.labels, patch_size, patch_size);
    (void)lbl_grid;

    struct Survivor {
        int index;  // into tiles
        int row, col;
        int label;
        uint64_t order_key;
    };
    std::vector<Survivor> survivors;
    for (int i = 0; i < img_grid.n(); ++i) {
        if (near_white_fraction(tiles[static_cast<size_t>(i)]) >= kNearWhiteCutoff) continue;
        int r = i / img_grid.cols;
        int c = i % img_grid.cols;
        survivors.push_back({i, r, c,
                             dominant_class(lbl_tiles[static_cast<size_t>(i)]),
                             hash_coords(mix64(wsi.seed ^ kSplitSalt),
                                         static_cast<uint64_t>(r), static_cast<uint64_t>(c))});
    }

    // Exact quantile split in seeded-hash order: counts land within rounding
    // of the requested fractions and assignment is a pure function of
    // (seed, coordinates).
    std::vector<int> by_hash(survivors.size());
    std::iota(by_hash.begin(), by_hash.end(), 0);
    std::sort(by_hash.begin(), by_hash.end(), [&](int a, int b) {
        const auto& sa = survivors[static_cast<size_t>(a)];
        const auto& sb = survivors[static_cast<size_t>(b)];
        if (sa.order_key != sb.order_key) return sa.order_key < sb.order_key;
        if (sa.row != sb.row) return sa.row < sb.row;
        return sa.col < sb.col;
    });
    const int64_t n = static_cast<int64_t>(survivors.size());
    int64_t n_train = std::llround(split_fracs[0] * static_cast<double>(n));
    int64_t n_valid = std::llround(split_fracs[1] * static_cast<double>(n));
    n_train = std::min(n_train, n);
    n_valid = std::min(n_valid, n - n_train);
    std::vector<const char*> split_of(survivors.size());
    for (int64_t rank = 0; rank < n; ++rank) {
        const char* split = rank < n_train ? "train" : (rank < n_train + n_valid ? "valid" : "test");
        split_of[static_cast<size_t>(by_hash[static_cast<size_t>(rank)])] = split;
    }

    std::filesystem::create_directories(dir / "tiles");
    parallel_blocks(static_cast<int64_t>(survivors.size()), 64, [&](int64_t b0, int64_t b1) {
        for (int64_t i = b0; i < b1; ++i) {
            const auto& s = survivors[static_cast<size_t>(i)];
            char name[128];
            std::snprintf(name, sizeof(name), "tiles/%s_r%04d_c%04d.png", stem.c_str(), s.row, s.col);
            write_png(dir / name, tiles[static_cast<size_t>(s.index)]);
        }
    });

    DatasetManifest m;
    m.geometry = {wsi.image.height, wsi.image.width, 0, 0, patch_size, patch_size};
    for (size_t i = 0; i < survivors.size(); ++i) {
        const auto& s = survivors[i];
        char name[128];
        std::snprintf(name, sizeof(name), "tiles/%s_r%04d_c%04d.png", stem.c_str(), s.row, s.col);
        m.splits[split_of[i]].push_back({name, s.label, "", s.row, s.col, stem});
    }
    return m;
}

DatasetManifest derive_region_dataset(const SyntheticWsi& wsi, int region_size,
                                      int patch_size,
                                      const std::filesystem::path& dir,
                                      const std::string& stem) {
    if (patch_size <= 0 || region_size <= patch_size || region_size % patch_size != 0) {
        throw std::invalid_argument("region size must be patch size times 2^k, k >= 1");
    }
    int q = region_size / patch_size;
    if ((q & (q - 1)) != 0) {
        throw std::invalid_argument("region size must be patch size times 2^k, k >= 1");
    }

    auto [grid, regions] = split_into_regions(wsi.image, region_size, region_size);
    auto [lbl_grid, lbl_regions] = split_into_regions(wsi.labels, region_size, region_size);
    (void)lbl_grid;

    std::filesystem::create_directories(dir / "regions");
    std::filesystem::create_directories(dir / "masks");

    DatasetManifest m;
    m.geometry = {wsi.image.height, wsi.image.width, region_size, region_size,
                  patch_size, patch_size};
    auto& items = m.splits["train"];
    items.resize(static_cast<size_t>(grid.n()));

    parallel_for(grid.n(), [&](int64_t i) {
        const int r = static_cast<int>(i) / grid.cols;
        const int c = static_cast<int>(i) % grid.cols;
        char img_name[128], mask_name[128];
        std::snprintf(img_name, sizeof(img_name), "regions/%s_r%02d_c%02d.png", stem.c_str(), r, c);
        std::snprintf(mask_name, sizeof(mask_name), "masks/%s_r%02d_c%02d.bt", stem.c_str(), r, c);
        write_png(dir / img_name, regions[static_cast<size_t>(i)]);

        ProbMask onehot = onehot_from_labels(lbl_regions[static_cast<size_t>(i)]);
        TensorFile tf;
        tf.meta = {{"wsi", stem}, {"row", r}, {"col", c}, {"kind", "onehot"}};
        tf.add("onehot", std::move(onehot.values));
        tf.save(dir / mask_name);

        items[static_cast<size_t>(i)] = {img_name, -1, mask_name, r, c, stem};
    });
    return m;
}

ProbMask onehot_from_labels(const LabelMap& labels) {
    if (labels.channels != 1) throw std::invalid_argument("label map must be single-channel");
    ProbMask mask;
    mask.kind = MaskKind::OneHot;
    mask.values = Tensor::zeros({kNumClasses, labels.height, labels.width});
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const uint8_t v = labels.at(y, x);
            if (!is_valid_class(v)) throw std::invalid_argument("invalid class id in label map");
            mask.values.at3(v, y, x) = 1.0;
        }
    }
    return mask;
}

}  // namespace bridgeseg
