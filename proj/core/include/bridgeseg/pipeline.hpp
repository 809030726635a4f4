#pragma once

#include <filesystem>

#include "bridgeseg/config.hpp"
#include "bridgeseg/workspace.hpp"

namespace bridgeseg::pipeline {

// Stage entry points behind the CLI verbs. Each throws
// MissingArtifactError / ConfigError / NumericalError; the CLI maps those to
// exit codes 3 / 2 / 4.

// Writes the shifted-distribution pretraining set, the target patch and
// region datasets, and the held-out evaluation slides; prints the class
// distribution of the target patch dataset.
void cmd_generate(const ExperimentConfig& cfg, Workspace& ws);

// Pretrains the base on the source set, freezes it, attaches LoRA adapters
// and fine-tunes on the target set. Writes base + adapter checkpoints.
void cmd_train_classifier(const ExperimentConfig& cfg, Workspace& ws);

// Trains the diffusion refiner on (ground truth, coarse mask, region) triples;
// coarse masks are produced by the fine-tuned classifier and cached by
// checkpoint hash.
void cmd_train_refiner(const ExperimentConfig& cfg, Workspace& ws);

// Runs the two-stage pipeline on one slide and writes coarse + refined label
// rasters (input dimensions, padding stripped).
void cmd_infer(const ExperimentConfig& cfg, Workspace& ws,
               const std::filesystem::path& wsi_path);
// Convenience: inference for every held-out evaluation slide.
void cmd_infer_all(const ExperimentConfig& cfg, Workspace& ws);

// Scores coarse and refined rasters against ground truth for every
// evaluation slide; emits per-slide JSON/CSV, comparison figures and a
// summary.
void cmd_evaluate(const ExperimentConfig& cfg, Workspace& ws);

// Prints the evaluation summary tables and writes a combined CSV.
void cmd_report(const ExperimentConfig& cfg, Workspace& ws);

// Shared helpers (also used by tests).
LabelMap read_label_png(const std::filesystem::path& path);
RgbImage render_class_map(const LabelMap& labels);
Tensor tensor_from_rgb(const RgbImage& img);  // (3,h,w), values in [0,1]
PatchDataset load_patch_split(const std::filesystem::path& base_dir, const DatasetManifest& m,
                              const std::string& split);

}  // namespace bridgeseg::pipeline
