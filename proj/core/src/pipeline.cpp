#include "bridgeseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/hash.hpp"
#include "bridgeseg/metrics.hpp"
#include "bridgeseg/parallel.hpp"
#include "bridgeseg/png_io.hpp"
#include "bridgeseg/tensor_io.hpp"

namespace bridgeseg::pipeline {

namespace {

constexpr uint64_t kSaltSource = 0x01;
constexpr uint64_t kSaltTarget = 0x02;
constexpr uint64_t kSaltEval = 0x03;
constexpr uint64_t kSaltClsInit = 0x10;
constexpr uint64_t kSaltClsPre = 0x11;
constexpr uint64_t kSaltClsFt = 0x12;
constexpr uint64_t kSaltRefInit = 0x20;
constexpr uint64_t kSaltRefTrain = 0x21;
constexpr uint64_t kSaltInfer = 0x30;

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

uint64_t fnv64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string zpad(const char* prefix, int i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
    return buf;
}

void require_file(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p)) {
        throw MissingArtifactError(what + " not found: " + p.string() +
                                   " (run the earlier pipeline stages first)");
    }
}

void write_text(Workspace& ws, const std::string& stage, const std::filesystem::path& file,
                const std::string& text) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << text;
    out.close();
    ws.record_artifact(stage, file);
}

Tensor crop3(const Tensor& t, int y0, int x0, int h, int w) {
    Tensor out({t.dim(0), h, w});
    for (int c = 0; c < t.dim(0); ++c) {
        for (int y = 0; y < h; ++y) {
            const double* src = t.ptr() + (static_cast<size_t>(c) * t.dim(1) + y0 + y) * t.dim(2) + x0;
            double* dst = out.ptr() + (static_cast<size_t>(c) * h + y) * w;
            std::copy(src, src + w, dst);
        }
    }
    return out;
}

// ---- generate -------------------------------------------------------------

void write_wsi_files(Workspace& ws, const std::string& dir, const std::string& stem,
                     const SyntheticWsi& wsi) {
    const auto img_path = ws.path(dir) / (stem + ".png");
    const auto lbl_path = ws.path(dir) / (stem + "_labels.png");
    write_png(img_path, wsi.image);
    write_png(lbl_path, wsi.labels);
    ws.record_artifact("generate", img_path);
    ws.record_artifact("generate", lbl_path);
}

void record_manifest_files(Workspace& ws, const std::string& stage,
                           const std::filesystem::path& base, const DatasetManifest& m) {
    for (const auto& [split, items] : m.splits) {
        (void)split;
        for (const auto& it : items) {
            ws.record_artifact(stage, base / it.image);
            if (!it.mask.empty()) ws.record_artifact(stage, base / it.mask);
        }
    }
}

void print_distribution_table(const DatasetManifest& m) {
    std::array<std::array<int64_t, kNumClasses>, 3> counts{};
    const std::array<const char*, 3> split_names = {"train", "valid", "test"};
    for (int s = 0; s < 3; ++s) {
        auto it = m.splits.find(split_names[static_cast<size_t>(s)]);
        if (it == m.splits.end()) continue;
        for (const auto& item : it->second) counts[static_cast<size_t>(s)][item.label]++;
    }
    std::array<int64_t, kNumClasses> total{};
    int64_t grand = 0;
    for (const auto& row : counts) {
        for (int c = 0; c < kNumClasses; ++c) {
            total[static_cast<size_t>(c)] += row[static_cast<size_t>(c)];
            grand += row[static_cast<size_t>(c)];
        }
    }
    std::printf("Class distribution of the target patch dataset:\n");
    std::printf("%-8s", "split");
    for (const auto& name : kClassNames) std::printf("%10.*s", 2, name.data());
    std::printf("\n");
    const std::array<const char*, 3> row_names = {"train", "valid", "test"};
    for (int s = 0; s < 3; ++s) {
        std::printf("%-8s", row_names[static_cast<size_t>(s)]);
        for (int c = 0; c < kNumClasses; ++c) {
            std::printf("%10lld", static_cast<long long>(counts[static_cast<size_t>(s)][c]));
        }
        std::printf("\n");
    }
    std::printf("%-8s", "total");
    for (int c = 0; c < kNumClasses; ++c) {
        std::printf("%10lld", static_cast<long long>(total[static_cast<size_t>(c)]));
    }
    std::printf("\n%-8s", "");
    for (int c = 0; c < kNumClasses; ++c) {
        const double pct = grand > 0 ? 100.0 * static_cast<double>(total[static_cast<size_t>(c)]) /
                                           static_cast<double>(grand)
                                     : 0.0;
        std::printf("%9.2f%%", pct);
    }
    std::printf("\n");
}

}  // namespace

LabelMap read_label_png(const std::filesystem::path& path) {
    Raster<uint8_t> img = read_png(path);
    if (img.channels != 1) throw std::runtime_error("expected grayscale label map: " + path.string());
    for (uint8_t v : img.data) {
        if (!is_valid_class(v)) {
            throw std::runtime_error("invalid class id in label map: " + path.string());
        }
    }
    return img;
}

RgbImage render_class_map(const LabelMap& labels) {
    RgbImage out(labels.height, labels.width, 3);
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const Rgb& c = kBasePalette[labels.at(y, x)];
            out.at(y, x, 0) = c.r;
            out.at(y, x, 1) = c.g;
            out.at(y, x, 2) = c.b;
        }
    }
    return out;
}

Tensor tensor_from_rgb(const RgbImage& img) {
    if (img.channels != 3) throw std::invalid_argument("expected RGB raster");
    Tensor out({3, img.height, img.width});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                out.at3(c, y, x) = img.at(y, x, c) / 255.0;
            }
        }
    }
    return out;
}

PatchDataset load_patch_split(const std::filesystem::path& base_dir, const DatasetManifest& m,
                              const std::string& split) {
    PatchDataset out;
    auto it = m.splits.find(split);
    if (it == m.splits.end()) return out;
    out.reserve(it->second.size());
    for (const auto& item : it->second) {
        Raster<uint8_t> tile = read_png(base_dir / item.image);
        out.push_back({patch_to_input(tile), item.label});
    }
    return out;
}

void cmd_generate(const ExperimentConfig& cfg, Workspace& ws) {
    Timer timer;
    cfg.validate();
    ws.run_start("generate", cfg.serialize());
    write_text(ws, "generate", ws.path("config.cfg"), cfg.serialize());

    ws.ensure_dir("data/source");
    ws.ensure_dir("data/target");
    ws.ensure_dir("data/eval");

    // Shifted-palette source slides for base pretraining.
    DatasetManifest source_patches;
    for (int i = 0; i < cfg.generator.source_wsis; ++i) {
        const std::string stem = zpad("src_", i);
        SyntheticWsi wsi = generate_wsi(hash_coords(cfg.seed, kSaltSource, i),
                                        cfg.geometry.train_wsi_size, cfg.geometry.train_wsi_size,
                                        cfg.generator.class_freqs, cfg.generator.texture(1));
        write_wsi_files(ws, "data/source", stem, wsi);
        DatasetManifest m = derive_patch_dataset(wsi, cfg.geometry.patch_size,
                                                 cfg.generator.patch_splits,
                                                 ws.path("data/source"), stem);
        if (i == 0) {
            source_patches = std::move(m);
        } else {
            source_patches.append(m);
        }
    }
    source_patches.save(ws.path("data/source") / "patches.json");
    ws.record_artifact("generate", ws.path("data/source") / "patches.json");
    record_manifest_files(ws, "generate", ws.path("data/source"), source_patches);

    // Target-distribution slides: patch dataset plus region dataset.
    DatasetManifest target_patches;
    DatasetManifest target_regions;
    for (int i = 0; i < cfg.generator.train_wsis; ++i) {
        const std::string stem = zpad("tgt_", i);
        SyntheticWsi wsi = generate_wsi(hash_coords(cfg.seed, kSaltTarget, i),
                                        cfg.geometry.train_wsi_size, cfg.geometry.train_wsi_size,
                                        cfg.generator.class_freqs, cfg.generator.texture(0));
        write_wsi_files(ws, "data/target", stem, wsi);
        DatasetManifest mp = derive_patch_dataset(wsi, cfg.geometry.patch_size,
                                                  cfg.generator.patch_splits,
                                                  ws.path("data/target"), stem);
        DatasetManifest mr = derive_region_dataset(wsi, cfg.geometry.region_size,
                                                   cfg.geometry.patch_size,
                                                   ws.path("data/target"), stem);
        if (i == 0) {
            target_patches = std::move(mp);
            target_regions = std::move(mr);
        } else {
            target_patches.append(mp);
            target_regions.append(mr);
        }
    }
    target_patches.save(ws.path("data/target") / "patches.json");
    target_regions.save(ws.path("data/target") / "regions.json");
    ws.record_artifact("generate", ws.path("data/target") / "patches.json");
    ws.record_artifact("generate", ws.path("data/target") / "regions.json");
    record_manifest_files(ws, "generate", ws.path("data/target"), target_patches);
    record_manifest_files(ws, "generate", ws.path("data/target"), target_regions);

    // Held-out evaluation slides.
    DatasetManifest eval_manifest;
    eval_manifest.geometry = {cfg.geometry.eval_wsi_size, cfg.geometry.eval_wsi_size,
                              cfg.geometry.region_size, cfg.geometry.region_size,
                              cfg.geometry.patch_size, cfg.geometry.patch_size};
    for (int i = 0; i < cfg.generator.eval_wsis; ++i) {
        const std::string stem = zpad("eval_", i);
        SyntheticWsi wsi = generate_wsi(hash_coords(cfg.seed, kSaltEval, i),
                                        cfg.geometry.eval_wsi_size, cfg.geometry.eval_wsi_size,
                                        cfg.generator.class_freqs, cfg.generator.texture(0));
        write_wsi_files(ws, "data/eval", stem, wsi);
        eval_manifest.splits["eval"].push_back(
            {stem + ".png", -1, stem + "_labels.png", 0, 0, stem});
    }
    eval_manifest.save(ws.path("data/eval") / "eval.json");
    ws.record_artifact("generate", ws.path("data/eval") / "eval.json");

    print_distribution_table(target_patches);
    ws.timing("generate", timer.seconds());
}

void cmd_train_classifier(const ExperimentConfig& cfg, Workspace& ws) {
    Timer timer;
    ws.run_start("train-classifier", cfg.serialize());
    require_file(ws.path("data/source") / "patches.json", "source patch manifest");
    require_file(ws.path("data/target") / "patches.json", "target patch manifest");

    DatasetManifest source = DatasetManifest::load(ws.path("data/source") / "patches.json");
    DatasetManifest target = DatasetManifest::load(ws.path("data/target") / "patches.json");
    PatchDataset src_train = load_patch_split(ws.path("data/source"), source, "train");
    PatchDataset src_valid = load_patch_split(ws.path("data/source"), source, "valid");
    PatchDataset tgt_train = load_patch_split(ws.path("data/target"), target, "train");
    PatchDataset tgt_valid = load_patch_split(ws.path("data/target"), target, "valid");
    if (src_train.empty() || tgt_train.empty()) {
        throw MissingArtifactError("patch datasets are empty; rerun generate");
    }

    ClassifierModel model = init_classifier(cfg.classifier.vit(cfg.geometry.patch_size),
                                            hash_coords(cfg.seed, kSaltClsInit, 0));
    pretrain_base(model, src_train, cfg.classifier.pretrain_epochs, cfg.classifier.pretrain_lr,
                  cfg.classifier.batch_size, hash_coords(cfg.seed, kSaltClsPre, 0),
                  [&](int epoch, double loss) {
                      ws.metric("pretrain", epoch, {{"loss", loss}});
                  });
    const double src_acc = dataset_accuracy(model, src_valid.empty() ? src_train : src_valid);
    ws.metric("pretrain", cfg.classifier.pretrain_epochs, {{"source_accuracy", src_acc}});

    ws.ensure_dir("checkpoints");
    const auto base_path = ws.path("checkpoints") / "classifier_base.bt";
    save_classifier(model, base_path);
    ws.record_artifact("train-classifier", base_path);

    inject_lora(model, cfg.classifier.lora_rank);

    Rng rng = Rng(hash_coords(cfg.seed, kSaltClsFt, 0));
    std::vector<int> order(tgt_train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.classifier.finetune_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.below(i)]);
        }
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t begin = 0; begin < order.size();
             begin += static_cast<size_t>(cfg.classifier.batch_size)) {
            const size_t end =
                std::min(order.size(), begin + static_cast<size_t>(cfg.classifier.batch_size));
            std::vector<int> labels;
            Tensor batch = make_patch_batch(tgt_train, order, begin, end, labels);
            epoch_loss += lora_train_step(model, batch, labels, cfg.classifier.eta);
            n_batches++;
        }
        const double val_acc = dataset_accuracy(model, tgt_valid.empty() ? tgt_train : tgt_valid);
        ws.metric("finetune", epoch,
                  {{"loss", epoch_loss / std::max(1, n_batches)}, {"val_accuracy", val_acc}});
    }

    const auto lora_path = ws.path("checkpoints") / "classifier_lora.bt";
    save_classifier_lora(model, lora_path, "classifier_base.bt", sha256_file_hex(base_path));
    ws.record_artifact("train-classifier", lora_path);
    ws.timing("train-classifier", timer.seconds());
}

void cmd_train_refiner(const ExperimentConfig& cfg, Workspace& ws) {
    Timer timer;
    ws.run_start("train-refiner", cfg.serialize());
    const auto lora_path = ws.path("checkpoints") / "classifier_lora.bt";
    require_file(lora_path, "fine-tuned classifier checkpoint");
    require_file(ws.path("data/target") / "regions.json", "region manifest");

    ClassifierModel classifier = load_classifier(lora_path);
    DatasetManifest regions = DatasetManifest::load(ws.path("data/target") / "regions.json");
    const auto& items = regions.splits.at("train");
    const int n = static_cast<int>(items.size());
    if (n == 0) throw MissingArtifactError("region dataset is empty; rerun generate");

    // Coarse-mask cache keyed by the classifier checkpoint content.
    const std::string cache_key = sha256_file_hex(lora_path).substr(0, 12);
    const std::string cache_rel = "cache/coarse_" + cache_key;
    ws.ensure_dir(cache_rel);
    auto cache_file = [&](int i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "region_%05d.bt", i);
        return ws.path(cache_rel) / buf;
    };
    bool all_cached = true;
    for (int i = 0; i < n; ++i) all_cached = all_cached && std::filesystem::exists(cache_file(i));
    if (!all_cached) {
        parallel_for(n, [&](int64_t i) {
            ClassifierModel local = classifier;  // model caches are per-worker
            RgbImage region = read_png(ws.path("data/target") / items[static_cast<size_t>(i)].image);
            ProbMask coarse = classify_region(local, region, cfg.geometry.patch_size);
            TensorFile tf;
            tf.meta = {{"kind", "coarse_cache"},
                       {"image", items[static_cast<size_t>(i)].image},
                       {"classifier", cache_key}};
            tf.add("coarse", std::move(coarse.values));
            tf.save(cache_file(static_cast<int>(i)));
        });
        for (int i = 0; i < n; ++i) ws.record_artifact("train-refiner", cache_file(i));
        ws.event({{"event", "coarse-cache"}, {"state", "refreshed"}, {"key", cache_key}});
    } else {
        ws.event({{"event", "coarse-cache"}, {"state", "reused"}, {"key", cache_key}});
    }

    RefinerState refiner = init_refiner(cfg.refiner.core(), hash_coords(cfg.seed, kSaltRefInit, 0));
    Rng rng(hash_coords(cfg.seed, kSaltRefTrain, 0));
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);

    const int region_size = cfg.geometry.region_size;
    const int crop = cfg.refiner.crop;
    const double lr0 = cfg.refiner.lr;
    for (int step = 0; step < cfg.refiner.train_steps; ++step) {
        // cosine decay to lr/10 settles boundary jitter from batch-1 updates
        const double progress = cfg.refiner.train_steps > 1
                                    ? static_cast<double>(step) / (cfg.refiner.train_steps - 1)
                                    : 1.0;
        refiner.opt.lr = 0.1 * lr0 + 0.45 * lr0 * (1.0 + std::cos(3.14159265358979323846 * progress));
        if (step % n == 0) {
            for (size_t i = perm.size(); i > 1; --i) {
                std::swap(perm[i - 1], perm[rng.below(i)]);
            }
        }
        const auto& item = items[static_cast<size_t>(perm[static_cast<size_t>(step % n)])];
        Tensor x0 = TensorFile::load(ws.path("data/target") / item.mask).require("onehot");
        Tensor y = TensorFile::load(cache_file(perm[static_cast<size_t>(step % n)])).require("coarse");
        Tensor o = tensor_from_rgb(read_png(ws.path("data/target") / item.image));

        if (crop > 0 && crop < region_size) {
            const int oy = static_cast<int>(rng.below(static_cast<uint64_t>(region_size - crop + 1)));
            const int ox = static_cast<int>(rng.below(static_cast<uint64_t>(region_size - crop + 1)));
            x0 = crop3(x0, oy, ox, crop, crop);
            y = crop3(y, oy, ox, crop, crop);
            o = crop3(o, oy, ox, crop, crop);
        }

        RefinerLosses losses = refiner_train_step(refiner, x0, y, o, rng);
        if (step % 25 == 0 || step + 1 == cfg.refiner.train_steps) {
            ws.metric("train-refiner", step,
                      {{"l_ref", losses.l_ref}, {"l_trans", losses.l_trans}, {"l_seg", losses.l_seg}});
        }
    }

    const auto refiner_path = ws.path("checkpoints") / "refiner.bt";
    save_refiner(refiner, refiner_path);
    ws.record_artifact("train-refiner", refiner_path);
    ws.timing("train-refiner", timer.seconds());
}

void cmd_infer(const ExperimentConfig& cfg, Workspace& ws, const std::filesystem::path& wsi_path) {
    Timer timer;
    const auto lora_path = ws.path("checkpoints") / "classifier_lora.bt";
    const auto refiner_path = ws.path("checkpoints") / "refiner.bt";
    require_file(lora_path, "fine-tuned classifier checkpoint");
    require_file(refiner_path, "refiner checkpoint");
    require_file(wsi_path, "input slide");

    ClassifierModel classifier = load_classifier(lora_path);
    RefinerState refiner = load_refiner(refiner_path);

    RgbImage img = read_png(wsi_path);
    if (img.channels != 3) throw MissingArtifactError("input slide is not RGB: " + wsi_path.string());
    auto [grid, region_images] =
        split_into_regions(img, cfg.geometry.region_size, cfg.geometry.region_size);

    const std::string stem = wsi_path.stem().string();
    std::vector<ProbMask> coarse_masks(static_cast<size_t>(grid.n()));
    std::vector<ProbMask> refined_masks(static_cast<size_t>(grid.n()));
    const Rng base_rng(hash_coords(cfg.seed, kSaltInfer, fnv64(stem)));
    const SampleMode mode = cfg.refiner.sample_mode();

    parallel_for(grid.n(), [&](int64_t i) {
        ClassifierModel local_cls = classifier;  // forward caches are per-worker
        const RgbImage& region = region_images[static_cast<size_t>(i)];
        ProbMask coarse = classify_region(local_cls, region, cfg.geometry.patch_size);
        Tensor o = tensor_from_rgb(region);
        Rng region_rng = base_rng.fork(static_cast<uint64_t>(i));
        refined_masks[static_cast<size_t>(i)] =
            sample_refined(refiner, coarse, o, cfg.refiner.n_steps, mode, region_rng);
        coarse_masks[static_cast<size_t>(i)] = std::move(coarse);
    });

    LabelMap coarse_raster = merge_regions(coarse_masks, grid);
    LabelMap refined_raster = merge_regions(refined_masks, grid);

    ws.ensure_dir("infer");
    const auto coarse_path = ws.path("infer") / (stem + "_coarse.png");
    const auto refined_path = ws.path("infer") / (stem + "_refined.png");
    write_png(coarse_path, coarse_raster);
    write_png(refined_path, refined_raster);
    ws.record_artifact("infer", coarse_path);
    ws.record_artifact("infer", refined_path);

    if (cfg.refiner.save_probmasks) {
        const std::string dir = "infer/" + stem + "_probmasks";
        ws.ensure_dir(dir);
        for (int i = 0; i < grid.n(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "region_%05d.bt", i);
            TensorFile tf;
            tf.meta = {{"kind", "probmasks"}, {"wsi", stem}, {"region", i}};
            tf.add("coarse", coarse_masks[static_cast<size_t>(i)].values);
            tf.add("refined", refined_masks[static_cast<size_t>(i)].values);
            tf.save(ws.path(dir) / buf);
            ws.record_artifact("infer", ws.path(dir) / buf);
        }
    }
    ws.timing("infer:" + stem, timer.seconds());
}

void cmd_infer_all(const ExperimentConfig& cfg, Workspace& ws) {
    require_file(ws.path("data/eval") / "eval.json", "evaluation manifest");
    DatasetManifest eval_manifest = DatasetManifest::load(ws.path("data/eval") / "eval.json");
    for (const auto& item : eval_manifest.splits.at("eval")) {
        cmd_infer(cfg, ws, ws.path("data/eval") / item.image);
    }
}

namespace {

nlohmann::json metrics_to_json(const SegmentationMetrics& m) {
    auto arr = [](const std::array<double, kNumClasses>& a) {
        nlohmann::json j = nlohmann::json::array();
        for (double v : a) {
            if (std::isnan(v)) {
                j.push_back(nullptr);
            } else {
                j.push_back(v);
            }
        }
        return j;
    };
    return {{"miou", m.miou},
            {"precision", m.mean_precision},
            {"recall", m.mean_recall},
            {"per_class_iou", arr(m.iou)},
            {"per_class_precision", arr(m.precision)},
            {"per_class_recall", arr(m.recall)}};
}

nlohmann::json tnr_to_json(const NecrosisReport& r) {
    nlohmann::json shares = nlohmann::json::array();
    for (int c = 0; c < kNumClasses; ++c) shares.push_back(r.class_share_diff[static_cast<size_t>(c)]);
    return {{"r_dl", r.r_dl}, {"r_pr", r.r_pr}, {"abs_diff", r.abs_diff},
            {"class_share_diff", shares}};
}

RgbImage side_by_side(const LabelMap& gt, const LabelMap& coarse, const LabelMap& refined) {
    const int gap = 4;
    RgbImage out(gt.height, gt.width * 3 + 2 * gap, 3);
    for (auto& v : out.data) v = 255;
    paste(out, render_class_map(gt), 0, 0);
    paste(out, render_class_map(coarse), 0, gt.width + gap);
    paste(out, render_class_map(refined), 0, 2 * (gt.width + gap));
    return out;
}

std::string csv_header() {
    return "wsi,coarse_miou,coarse_precision,coarse_recall,coarse_tnr_abs_diff,"
           "refined_miou,refined_precision,refined_recall,refined_tnr_abs_diff\n";
}

std::string csv_row(const std::string& name, const SegmentationMetrics& mc,
                    const NecrosisReport& tc, const SegmentationMetrics& mr,
                    const NecrosisReport& tr) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f\n",
                  name.c_str(), mc.miou, mc.mean_precision, mc.mean_recall, tc.abs_diff, mr.miou,
                  mr.mean_precision, mr.mean_recall, tr.abs_diff);
    return buf;
}

}  // namespace

void cmd_evaluate(const ExperimentConfig& cfg, Workspace& ws) {
    Timer timer;
    ws.run_start("evaluate", cfg.serialize());
    require_file(ws.path("data/eval") / "eval.json", "evaluation manifest");
    DatasetManifest eval_manifest = DatasetManifest::load(ws.path("data/eval") / "eval.json");
    ws.ensure_dir("eval");

    nlohmann::json summary;
    nlohmann::json per_wsi = nlohmann::json::array();
    ConfusionMatrix total_coarse, total_refined;
    double sum_c_tnr = 0, sum_r_tnr = 0;
    int n = 0;
    std::string csv = csv_header();

    for (const auto& item : eval_manifest.splits.at("eval")) {
        const std::string stem = item.wsi;
        const auto gt_path = ws.path("data/eval") / item.mask;
        const auto coarse_path = ws.path("infer") / (stem + "_coarse.png");
        const auto refined_path = ws.path("infer") / (stem + "_refined.png");
        require_file(gt_path, "ground-truth labels");
        require_file(coarse_path, "coarse inference raster");
        require_file(refined_path, "refined inference raster");

        LabelMap gt = read_label_png(gt_path);
        LabelMap coarse = read_label_png(coarse_path);
        LabelMap refined = read_label_png(refined_path);

        SegmentationMetrics mc = segmentation_metrics(confusion(coarse, gt));
        SegmentationMetrics mr = segmentation_metrics(confusion(refined, gt));
        NecrosisReport tc = tnr_report(coarse, gt);
        NecrosisReport tr = tnr_report(refined, gt);

        nlohmann::json j = {{"wsi", stem},
                            {"coarse", metrics_to_json(mc)},
                            {"refined", metrics_to_json(mr)},
                            {"tnr", {{"coarse", tnr_to_json(tc)}, {"refined", tnr_to_json(tr)}}}};
        write_text(ws, "evaluate", ws.path("eval") / (stem + ".json"), j.dump(2) + "\n");
        per_wsi.push_back(stem);
        csv += csv_row(stem, mc, tc, mr, tr);

        write_png(ws.path("eval") / (stem + "_compare.png"), side_by_side(gt, coarse, refined));
        ws.record_artifact("evaluate", ws.path("eval") / (stem + "_compare.png"));

        total_coarse += confusion(coarse, gt);
        total_refined += confusion(refined, gt);
        sum_c_tnr += tc.abs_diff;
        sum_r_tnr += tr.abs_diff;
        n++;
    }
    if (n == 0) throw MissingArtifactError("no evaluation slides listed in the manifest");

    // Slide-level tables live in the per-slide reports; the summary scores
    // the pooled confusion matrix over all held-out slides so per-class IoU
    // is not hostage to single-slide class absence.
    const double inv = 1.0 / n;
    SegmentationMetrics agg_c = segmentation_metrics(total_coarse);
    SegmentationMetrics agg_r = segmentation_metrics(total_refined);
    summary["wsis"] = per_wsi;
    summary["coarse"] = {{"miou", agg_c.miou},
                         {"precision", agg_c.mean_precision},
                         {"recall", agg_c.mean_recall},
                         {"tnr_abs_diff", sum_c_tnr * inv}};
    summary["refined"] = {{"miou", agg_r.miou},
                          {"precision", agg_r.mean_precision},
                          {"recall", agg_r.mean_recall},
                          {"tnr_abs_diff", sum_r_tnr * inv}};
    summary["delta"] = {{"miou", agg_r.miou - agg_c.miou},
                        {"tnr_abs_diff", (sum_r_tnr - sum_c_tnr) * inv}};
    write_text(ws, "evaluate", ws.path("eval") / "summary.json", summary.dump(2) + "\n");
    write_text(ws, "evaluate", ws.path("eval") / "summary.csv", csv);
    ws.timing("evaluate", timer.seconds());
}

void cmd_report(const ExperimentConfig& cfg, Workspace& ws) {
    (void)cfg;
    const auto summary_path = ws.path("eval") / "summary.json";
    require_file(summary_path, "evaluation summary");
    std::ifstream in(summary_path);
    nlohmann::json summary = nlohmann::json::parse(in);

    std::printf("Segmentation metrics (mean over %zu evaluation slides)\n",
                summary.at("wsis").size());
    std::printf("%-10s%10s%12s%10s\n", "method", "mIOU", "Precision", "Recall");
    for (const char* method : {"coarse", "refined"}) {
        const auto& m = summary.at(method);
        std::printf("%-10s%9.2f%%%11.2f%%%9.2f%%\n", method, 100.0 * m.at("miou").get<double>(),
                    100.0 * m.at("precision").get<double>(), 100.0 * m.at("recall").get<double>());
    }
    std::printf("\nNecrosis-rate estimation (mean per-class share diff and TNR abs diff)\n");
    std::printf("%-10s", "method");
    for (int c = 1; c < kNumClasses; ++c) std::printf("%8.*s", 2, kClassNames[c].data());
    std::printf("%8s\n", "TNR");

    // Per-class shares come from the per-slide reports.
    for (const char* method : {"coarse", "refined"}) {
        std::array<double, kNumClasses> shares{};
        int n = 0;
        for (const auto& stem : summary.at("wsis")) {
            std::ifstream jin(ws.path("eval") / (stem.get<std::string>() + ".json"));
            if (!jin) throw MissingArtifactError("missing per-slide report for " + stem.get<std::string>());
            nlohmann::json j = nlohmann::json::parse(jin);
            const auto& diffs = j.at("tnr").at(method).at("class_share_diff");
            for (int c = 0; c < kNumClasses; ++c) shares[static_cast<size_t>(c)] += diffs[c].get<double>();
            n++;
        }
        std::printf("%-10s", method);
        for (int c = 1; c < kNumClasses; ++c) {
            std::printf("%7.2f%%", 100.0 * shares[static_cast<size_t>(c)] / std::max(1, n));
        }
        std::printf("%7.2f%%\n",
                    100.0 * summary.at(method).at("tnr_abs_diff").get<double>());
    }

    // Combined CSV re-emitted from the summary for spreadsheet use.
    std::ifstream csv_in(ws.path("eval") / "summary.csv");
    if (csv_in) {
        std::stringstream ss;
        ss << csv_in.rdbuf();
        write_text(ws, "report", ws.path("eval") / "report.csv", ss.str());
    }
}

}  // namespace bridgeseg::pipeline
