#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bridgeseg/nn.hpp"
#include "bridgeseg/raster.hpp"
#include "bridgeseg/tiling.hpp"

namespace bridgeseg {

struct TinyVitConfig {
    int input_size = 16;  // square RGB input
    int token_size = 4;   // -> (input/token)^2 tokens plus one class token
    int embed_dim = 32;
    int layers = 2;
    int heads = 2;
    int mlp_ratio = 2;
    int n_classes = 7;

    int tokens() const { return (input_size / token_size) * (input_size / token_size); }
    int seq_len() const { return tokens() + 1; }
    int token_dim() const { return 3 * token_size * token_size; }
    void validate() const;
};

// Pre-LN transformer block. Attention projections are AdaptedLinear so LoRA
// pairs can be attached after the base is frozen.
struct VitBlock {
    nn::LayerNorm ln1, ln2;
    nn::AdaptedLinear q, k, v, o;
    nn::AdaptedLinear mlp1, mlp2;

    Tensor forward(const Tensor& x, int batch, int heads, int head_dim);
    Tensor backward(const Tensor& grad, int batch, int heads, int head_dim);
    nn::ParamRefs params();

    Tensor q_out_, k_out_, v_out_;  // cached projections
    Tensor attn_probs_;             // (batch*heads, T*T)
    Tensor x_after_attn_;
    Tensor mlp_pre_;                // pre-GELU activations
};

// Patch classifier F_W: tokenized tiny ViT with a linear head. The base
// (everything but the head) is trained once on the shifted source
// distribution, then frozen; fine-tuning moves only LoRA pairs and the head.
struct ClassifierModel {
    TinyVitConfig config;
    uint64_t seed = 0;
    bool base_frozen = false;
    int lora_rank = 0;

    nn::AdaptedLinear embed;  // token_dim -> embed_dim
    nn::Param cls_token;      // (embed_dim)
    nn::Param pos_embed;      // (seq_len, embed_dim)
    std::vector<VitBlock> blocks;
    nn::LayerNorm ln_final;
    nn::AdaptedLinear head;

    // batch: (B, 3*input*input), class-major pixel layout, values in [0,1].
    Tensor logits(const Tensor& batch);
    void backward_from_logits(const Tensor& grad_logits);

    nn::ParamRefs all_params();
    nn::ParamRefs base_params();       // frozen set after pretraining
    nn::ParamRefs trainable_params();  // adapters + head

    void zero_grads();
};

struct PatchSample {
    std::vector<double> pixels;  // class-major, [0,1]
    int label = 0;
};
using PatchDataset = std::vector<PatchSample>;

std::vector<double> patch_to_input(const Raster<uint8_t>& patch);

ClassifierModel init_classifier(const TinyVitConfig& config, uint64_t seed);

// Full-parameter training with cross-entropy (adaptive-moment updates), then
// the base is marked frozen. Returns final-epoch mean training loss.
using EpochCallback = std::function<void(int epoch, double mean_loss)>;
double pretrain_base(ClassifierModel& model, const PatchDataset& data, int epochs, double lr,
                     int batch_size, uint64_t seed, const EpochCallback& on_epoch = {});

// Rows [begin, end) of `indices` stacked into a training batch.
Tensor make_patch_batch(const PatchDataset& data, const std::vector<int>& indices, size_t begin,
                        size_t end, std::vector<int>& labels);

// Attaches zero-initialized adapters to every attention projection. Outputs
// are bit-identical before and after (B = 0 so BA = 0).
void inject_lora(ClassifierModel& model, int rank);

// One plain gradient-descent step on the adapters and head:
//   B <- B - eta dL/dB,  A <- A - eta dL/dA
// Frozen base parameters are untouched. Returns the batch mean cross-entropy.
double lora_train_step(ClassifierModel& model, const Tensor& patches,
                       const std::vector<int>& labels, double eta);

// Forward-only loss for the same batch shape (gradient-check oracle hook).
double classifier_loss(ClassifierModel& model, const Tensor& patches,
                       const std::vector<int>& labels);

std::array<double, kNumClasses> classify_patch(ClassifierModel& model,
                                               const Raster<uint8_t>& patch);

// Coarse mask Y for one region: split into patches, classify each, broadcast
// the softmax vectors over patch footprints.
ProbMask classify_region(ClassifierModel& model, const RgbImage& region, int patch_size);

double dataset_accuracy(ClassifierModel& model, const PatchDataset& data, int batch_size = 64);

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path);
// Adapter checkpoint: LoRA pairs + head + a reference to the base file.
void save_classifier_lora(const ClassifierModel& model, const std::filesystem::path& path,
                          const std::string& base_filename, const std::string& base_sha256);
ClassifierModel load_classifier(const std::filesystem::path& path);

}  // namespace bridgeseg
