#include "bridgeseg/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (const auto& row : counts) {
        for (int64_t v : row) t += v;
    }
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
    for (int g = 0; g < kNumClasses; ++g) {
        for (int p = 0; p < kNumClasses; ++p) counts[g][p] += o.counts[g][p];
    }
    return *this;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("confusion: shape mismatch");
    if (pred.channels != 1) throw std::invalid_argument("confusion: label maps must be single-channel");
    ConfusionMatrix cm;
    for (size_t i = 0; i < gt.data.size(); ++i) {
        const uint8_t g = gt.data[i];
        const uint8_t p = pred.data[i];
        if (!is_valid_class(g) || !is_valid_class(p)) {
            throw std::invalid_argument("confusion: invalid class id");
        }
        cm.counts[g][p]++;
    }
    return cm;
}

SegmentationMetrics segmentation_metrics(const ConfusionMatrix& cm, AbsentClassPolicy policy) {
    if (cm.total() == 0) throw std::invalid_argument("segmentation_metrics: empty confusion matrix");
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();

    SegmentationMetrics out;
    double iou_sum = 0.0, prec_sum = 0.0, rec_sum = 0.0;
    int iou_n = 0, prec_n = 0, rec_n = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        const int64_t tp = cm.counts[c][c];
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < kNumClasses; ++o) {
            if (o == c) continue;
            fp += cm.counts[o][c];
            fn += cm.counts[c][o];
        }
        const int64_t uni = tp + fp + fn;

        if (uni > 0) {
            out.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
            iou_sum += out.iou[c];
            iou_n++;
        } else if (policy == AbsentClassPolicy::AbsentAsPerfect) {
            out.iou[c] = 1.0;
            iou_sum += 1.0;
            iou_n++;
        } else {
            out.iou[c] = nan;
        }
        if (tp + fp > 0) {
            out.precision[c] = static_cast<double>(tp) / static_cast<double>(tp + fp);
            prec_sum += out.precision[c];
            prec_n++;
        } else if (policy == AbsentClassPolicy::AbsentAsPerfect && uni == 0) {
            out.precision[c] = 1.0;
            prec_sum += 1.0;
            prec_n++;
        } else {
            out.precision[c] = nan;
        }
        if (tp + fn > 0) {
            out.recall[c] = static_cast<double>(tp) / static_cast<double>(tp + fn);
            rec_sum += out.recall[c];
            rec_n++;
        } else if (policy == AbsentClassPolicy::AbsentAsPerfect && uni == 0) {
            out.recall[c] = 1.0;
            rec_sum += 1.0;
            rec_n++;
        } else {
            out.recall[c] = nan;
        }
    }
    out.miou = iou_n > 0 ? iou_sum / iou_n : 0.0;
    out.mean_precision = prec_n > 0 ? prec_sum / prec_n : 0.0;
    out.mean_recall = rec_n > 0 ? rec_sum / rec_n : 0.0;
    return out;
}

std::array<int64_t, kNumClasses> class_pixel_counts(const LabelMap& labels) {
    if (labels.channels != 1) throw std::invalid_argument("label map must be single-channel");
    std::array<int64_t, kNumClasses> counts{};
    for (uint8_t v : labels.data) {
        if (!is_valid_class(v)) throw std::invalid_argument("invalid class id in label map");
        counts[v]++;
    }
    return counts;
}

double necrosis_rate_from_counts(const std::array<int64_t, kNumClasses>& p) {
    const auto nc = static_cast<double>(p[static_cast<int>(ClassId::NC)]);
    const auto fh = static_cast<double>(p[static_cast<int>(ClassId::FH)]);
    const auto hc = static_cast<double>(p[static_cast<int>(ClassId::HC)]);
    const auto if_ = static_cast<double>(p[static_cast<int>(ClassId::IF)]);
    const auto vt = static_cast<double>(p[static_cast<int>(ClassId::VT)]);
    const double numerator = nc + fh + hc + if_;
    const double denominator = vt + numerator;
    if (denominator == 0.0) {
        throw UndefinedRateError("necrosis rate undefined: no tumor-bed pixels");
    }
    return numerator / denominator;
}

double necrosis_rate(const LabelMap& labels) {
    return necrosis_rate_from_counts(class_pixel_counts(labels));
}

NecrosisReport tnr_report(const LabelMap& pred, const LabelMap& gt) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("tnr_report: shape mismatch");
    NecrosisReport rep;
    rep.pred_counts = class_pixel_counts(pred);
    rep.gt_counts = class_pixel_counts(gt);
    rep.r_pr = necrosis_rate_from_counts(rep.gt_counts);  // throws if undefined
    rep.r_dl = necrosis_rate_from_counts(rep.pred_counts);
    rep.abs_diff = std::abs(rep.r_pr - rep.r_dl);

    // Tissue-class shares over non-BG pixels.
    int64_t pred_tissue = 0, gt_tissue = 0;
    for (int c = 1; c < kNumClasses; ++c) {
        pred_tissue += rep.pred_counts[c];
        gt_tissue += rep.gt_counts[c];
    }
    for (int c = 1; c < kNumClasses; ++c) {
        const double ps = pred_tissue > 0
                              ? static_cast<double>(rep.pred_counts[c]) / static_cast<double>(pred_tissue)
                              : 0.0;
        const double gs = gt_tissue > 0
                              ? static_cast<double>(rep.gt_counts[c]) / static_cast<double>(gt_tissue)
                              : 0.0;
        rep.class_share_diff[c] = std::abs(ps - gs);
    }
    return rep;
}

}  // namespace bridgeseg
