#pragma once

#include <array>
#include <cstdint>

#include "bridgeseg/classes.hpp"
#include "bridgeseg/raster.hpp"

namespace bridgeseg {

// Pixel counts, rows = ground truth, cols = prediction. Additive over
// batches.
struct ConfusionMatrix {
    std::array<std::array<int64_t, kNumClasses>, kNumClasses> counts{};

    int64_t total() const;
    ConfusionMatrix& operator+=(const ConfusionMatrix& o);
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt);

// Macro convention for classes absent from both prediction and ground truth.
// PresentOnly (default) excludes them from the mean; AbsentAsPerfect counts
// a vacuously perfect 1.0 for them.
enum class AbsentClassPolicy { PresentOnly, AbsentAsPerfect };

struct SegmentationMetrics {
    std::array<double, kNumClasses> iou{};        // NaN where undefined
    std::array<double, kNumClasses> precision{};  // NaN where undefined
    std::array<double, kNumClasses> recall{};     // NaN where undefined
    double miou = 0.0;
    double mean_precision = 0.0;
    double mean_recall = 0.0;
};

SegmentationMetrics segmentation_metrics(
    const ConfusionMatrix& cm, AbsentClassPolicy policy = AbsentClassPolicy::PresentOnly);

// Necrosis rate over the tumor bed:
//   (NC + FH + HC + IF) / (VT + NC + FH + HC + IF)
// BG and NT are excluded from both sides. Throws UndefinedRateError when the
// denominator is zero; an undefined rate is not a rate of zero.
double necrosis_rate(const LabelMap& labels);
double necrosis_rate_from_counts(const std::array<int64_t, kNumClasses>& pixel_counts);

std::array<int64_t, kNumClasses> class_pixel_counts(const LabelMap& labels);

struct NecrosisReport {
    std::array<int64_t, kNumClasses> pred_counts{};
    std::array<int64_t, kNumClasses> gt_counts{};
    double r_dl = 0.0;      // rate from the predicted raster
    double r_pr = 0.0;      // reference rate from the ground truth
    double abs_diff = 0.0;  // |r_pr - r_dl|
    // Per-tissue-class absolute share differences (share of non-BG pixels);
    // BG slot unused.
    std::array<double, kNumClasses> class_share_diff{};
};

// Requires a defined ground-truth rate.
NecrosisReport tnr_report(const LabelMap& pred, const LabelMap& gt);

}  // namespace bridgeseg
