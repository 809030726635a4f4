#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "bridgeseg/classifier.hpp"
#include "bridgeseg/refiner.hpp"
#include "bridgeseg/synthgen.hpp"

namespace bridgeseg {

struct GeometryConfig {
    int patch_size = 16;
    int k = 3;               // region = patch * 2^k
    int region_size = 128;
    int train_wsi_size = 1024;
    int eval_wsi_size = 512;

    friend bool operator==(const GeometryConfig&, const GeometryConfig&) = default;
};

struct GeneratorConfig {
    std::array<double, kNumClasses> class_freqs = reference_class_freqs();
    double speckle_std = 8.0;
    double bleed = 0.10;
    int bleed_radius = 3;
    int smooth_radius = 2;
    double cell_area = 9216.0;
    int source_wsis = 1;  // shifted-palette slides for base pretraining
    int train_wsis = 2;   // target-distribution slides
    int eval_wsis = 2;    // held-out slides
    std::array<double, 3> patch_splits = {0.8, 0.1, 0.1};

    TextureParams texture(int palette_family) const;
    friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct ClassifierSection {
    int token_size = 4;
    int embed_dim = 32;
    int layers = 2;
    int heads = 2;
    int mlp_ratio = 2;
    int lora_rank = 4;
    double eta = 1e-2;  // plain gradient-descent rate for the LoRA phase
    int pretrain_epochs = 3;
    double pretrain_lr = 1e-3;
    int finetune_epochs = 2;
    int batch_size = 64;

    TinyVitConfig vit(int patch_size) const;
    friend bool operator==(const ClassifierSection&, const ClassifierSection&) = default;
};

struct RefinerSection {
    int steps = 200;      // T
    double scale = 1.0;   // s
    double lambda = 1.0;
    int n_steps = 20;     // sampling steps
    std::string mode = "ddim";
    int train_steps = 5000;
    double lr = 3e-4;
    int base_width = 32;
    int cond_features = 16;
    int temb_dim = 32;
    int o_downsample = 1;
    int crop = 64;  // training crop side, 0 trains on full regions
    bool save_probmasks = false;

    RefinerConfig core() const;
    SampleMode sample_mode() const;
    friend bool operator==(const RefinerSection&, const RefinerSection&) = default;
};

// Declarative experiment description. Parsing is fail-fast: unknown sections
// or keys are errors, and parse(serialize(cfg)) == cfg exactly.
struct ExperimentConfig {
    uint64_t seed = 7;
    std::string workspace = "runs/default";
    GeometryConfig geometry;
    GeneratorConfig generator;
    ClassifierSection classifier;
    RefinerSection refiner;

    void validate() const;
    std::string serialize() const;
    static ExperimentConfig parse_string(const std::string& text);
    static ExperimentConfig parse_file(const std::filesystem::path& path);

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

}  // namespace bridgeseg
