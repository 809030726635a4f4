#include "bridgeseg/classifier.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/tensor_io.hpp"

namespace bridgeseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

Map view(Tensor& t, int row0, int col0, int rows, int cols) {
    const int stride = t.dim(1);
    return Map(t.ptr() + static_cast<size_t>(row0) * stride + col0, rows, cols,
               Eigen::OuterStride<>(stride));
}
ConstMap cview(const Tensor& t, int row0, int col0, int rows, int cols) {
    const int stride = t.dim(1);
    return ConstMap(t.ptr() + static_cast<size_t>(row0) * stride + col0, rows, cols,
                    Eigen::OuterStride<>(stride));
}

}  // namespace

void TinyVitConfig::validate() const {
    if (input_size <= 0 || token_size <= 0 || embed_dim <= 0 || layers <= 0 || heads <= 0 ||
        mlp_ratio <= 0 || n_classes <= 0) {
        throw std::invalid_argument("classifier config dims must be positive");
    }
    if (input_size % token_size != 0) {
        throw std::invalid_argument("token size must divide input size");
    }
    if (embed_dim % heads != 0) {
        throw std::invalid_argument("embed dim must be divisible by head count");
    }
}

Tensor VitBlock::forward(const Tensor& x, int batch, int heads, int head_dim) {
    const int seq = x.dim(0) / batch;
    const int d = x.dim(1);

    Tensor a = ln1.forward(x);
    q_out_ = q.forward(a);
    k_out_ = k.forward(a);
    v_out_ = v.forward(a);

    Tensor attn_out({batch * seq, d});
    attn_probs_ = Tensor({batch * heads * seq, seq});
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int s = 0; s < batch; ++s) {
        for (int h = 0; h < heads; ++h) {
            auto qm = cview(q_out_, s * seq, h * head_dim, seq, head_dim);
            auto km = cview(k_out_, s * seq, h * head_dim, seq, head_dim);
            auto vm = cview(v_out_, s * seq, h * head_dim, seq, head_dim);
            RowMat scores = (qm * km.transpose()) * scale;
            for (int i = 0; i < seq; ++i) {
                double mx = scores.row(i).maxCoeff();
                scores.row(i) = (scores.row(i).array() - mx).exp();
                scores.row(i) /= scores.row(i).sum();
            }
            view(attn_probs_, (s * heads + h) * seq, 0, seq, seq) = scores;
            view(attn_out, s * seq, h * head_dim, seq, head_dim).noalias() = scores * vm;
        }
    }

    Tensor o_out = o.forward(attn_out);
    x_after_attn_ = x + o_out;
    Tensor b = ln2.forward(x_after_attn_);
    mlp_pre_ = mlp1.forward(b);
    Tensor m = mlp2.forward(nn::gelu(mlp_pre_));
    return x_after_attn_ + m;
}

Tensor VitBlock::backward(const Tensor& grad, int batch, int heads, int head_dim) {
    const int seq = grad.dim(0) / batch;
    const int d = grad.dim(1);

    // MLP branch.
    Tensor dm = mlp2.backward(grad);
    Tensor dg = nn::gelu_backward(mlp_pre_, dm);
    Tensor db = mlp1.backward(dg);
    Tensor dx1 = grad + ln2.backward(db);

    // Attention branch.
    Tensor d_attn = o.backward(dx1);
    Tensor dq(q_out_.shape), dk(k_out_.shape), dv(v_out_.shape);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int s = 0; s < batch; ++s) {
        for (int h = 0; h < heads; ++h) {
            auto dout = cview(d_attn, s * seq, h * head_dim, seq, head_dim);
            auto probs = cview(attn_probs_, (s * heads + h) * seq, 0, seq, seq);
            auto qm = cview(q_out_, s * seq, h * head_dim, seq, head_dim);
            auto km = cview(k_out_, s * seq, h * head_dim, seq, head_dim);
            auto vm = cview(v_out_, s * seq, h * head_dim, seq, head_dim);

            RowMat dprobs = dout * vm.transpose();
            view(dv, s * seq, h * head_dim, seq, head_dim).noalias() =
                probs.transpose() * dout;
            RowMat dscores(seq, seq);
            for (int i = 0; i < seq; ++i) {
                const double dot = dprobs.row(i).dot(probs.row(i));
                dscores.row(i) =
                    (probs.row(i).array() * (dprobs.row(i).array() - dot)).matrix();
            }
            view(dq, s * seq, h * head_dim, seq, head_dim).noalias() = (dscores * km) * scale;
            view(dk, s * seq, h * head_dim, seq, head_dim).noalias() =
                (dscores.transpose() * qm) * scale;
        }
    }
    Tensor da = q.backward(dq);
    da = da + k.backward(dk);
    da = da + v.backward(dv);
    return dx1 + ln1.backward(da);
}

nn::ParamRefs VitBlock::params() {
    nn::ParamRefs out;
    for (auto* layer : {&q, &k, &v, &o, &mlp1, &mlp2}) {
        for (auto* p : layer->params()) out.push_back(p);
    }
    for (auto* p : ln1.params()) out.push_back(p);
    for (auto* p : ln2.params()) out.push_back(p);
    return out;
}

Tensor ClassifierModel::logits(const Tensor& batch) {
    const int b = batch.dim(0);
    const int in = config.input_size;
    if (batch.dim(1) != 3 * in * in) throw std::invalid_argument("classifier input shape mismatch");
    const int ts = config.token_size;
    const int grid = in / ts;
    const int n_tok = config.tokens();
    const int token_dim = config.token_dim();
    const int d = config.embed_dim;
    const int seq = config.seq_len();

    Tensor tokens({b * n_tok, token_dim});
    for (int s = 0; s < b; ++s) {
        const double* px = batch.ptr() + static_cast<size_t>(s) * 3 * in * in;
        for (int ty = 0; ty < grid; ++ty) {
            for (int tx = 0; tx < grid; ++tx) {
                double* dst = tokens.ptr() +
                              (static_cast<size_t>(s) * n_tok + ty * grid + tx) * token_dim;
                int idx = 0;
                for (int c = 0; c < 3; ++c) {
                    for (int y = 0; y < ts; ++y) {
                        for (int x = 0; x < ts; ++x) {
                            dst[idx++] = px[(static_cast<size_t>(c) * in + ty * ts + y) * in +
                                            tx * ts + x];
                        }
                    }
                }
            }
        }
    }

    Tensor emb = embed.forward(tokens);  // (b*n_tok, d)
    Tensor x({b * seq, d});
    for (int s = 0; s < b; ++s) {
        for (int i = 0; i < d; ++i) {
            x.at2(s * seq, i) = cls_token.value[i] + pos_embed.value.at2(0, i);
        }
        for (int t = 0; t < n_tok; ++t) {
            for (int i = 0; i < d; ++i) {
                x.at2(s * seq + 1 + t, i) =
                    emb.at2(s * n_tok + t, i) + pos_embed.value.at2(1 + t, i);
            }
        }
    }

    const int head_dim = d / config.heads;
    for (auto& block : blocks) x = block.forward(x, b, config.heads, head_dim);
    Tensor xf = ln_final.forward(x);

    Tensor cls_rows({b, d});
    for (int s = 0; s < b; ++s) {
        for (int i = 0; i < d; ++i) cls_rows.at2(s, i) = xf.at2(s * seq, i);
    }
    return head.forward(cls_rows);
}

void ClassifierModel::backward_from_logits(const Tensor& grad_logits) {
    const int b = grad_logits.dim(0);
    const int d = config.embed_dim;
    const int seq = config.seq_len();
    const int n_tok = config.tokens();

    Tensor dcls = head.backward(grad_logits);  // (b, d)
    Tensor dxf({b * seq, d});
    for (int s = 0; s < b; ++s) {
        for (int i = 0; i < d; ++i) dxf.at2(s * seq, i) = dcls.at2(s, i);
    }
    Tensor dx = ln_final.backward(dxf);

    const int head_dim = d / config.heads;
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
        dx = it->backward(dx, b, config.heads, head_dim);
    }

    if (!pos_embed.frozen) {
        for (int s = 0; s < b; ++s) {
            for (int t = 0; t < seq; ++t) {
                for (int i = 0; i < d; ++i) {
                    pos_embed.grad.at2(t, i) += dx.at2(s * seq + t, i);
                }
            }
        }
        for (int s = 0; s < b; ++s) {
            for (int i = 0; i < d; ++i) cls_token.grad[i] += dx.at2(s * seq, i);
        }
    }

    Tensor demb({b * n_tok, d});
    for (int s = 0; s < b; ++s) {
        for (int t = 0; t < n_tok; ++t) {
            for (int i = 0; i < d; ++i) {
                demb.at2(s * n_tok + t, i) = dx.at2(s * seq + 1 + t, i);
            }
        }
    }
    embed.backward(demb);
}

nn::ParamRefs ClassifierModel::all_params() {
    nn::ParamRefs out = base_params();
    for (auto& block : blocks) {
        for (auto* layer : {&block.q, &block.k, &block.v, &block.o}) {
            if (layer->has_adapter) {
                out.push_back(&layer->lora_b);
                out.push_back(&layer->lora_a);
            }
        }
    }
    for (auto* p : head.params()) out.push_back(p);
    return out;
}

nn::ParamRefs ClassifierModel::base_params() {
    nn::ParamRefs out;
    out.push_back(&embed.weight);
    out.push_back(&embed.bias);
    out.push_back(&cls_token);
    out.push_back(&pos_embed);
    for (auto& block : blocks) {
        for (auto* layer : {&block.q, &block.k, &block.v, &block.o, &block.mlp1, &block.mlp2}) {
            out.push_back(&layer->weight);
            out.push_back(&layer->bias);
        }
        for (auto* p : block.ln1.params()) out.push_back(p);
        for (auto* p : block.ln2.params()) out.push_back(p);
    }
    for (auto* p : ln_final.params()) out.push_back(p);
    return out;
}

nn::ParamRefs ClassifierModel::trainable_params() {
    nn::ParamRefs out;
    for (auto& block : blocks) {
        for (auto* layer : {&block.q, &block.k, &block.v, &block.o}) {
            if (layer->has_adapter) {
                out.push_back(&layer->lora_b);
                out.push_back(&layer->lora_a);
            }
        }
    }
    for (auto* p : head.params()) out.push_back(p);
    return out;
}

void ClassifierModel::zero_grads() {
    for (auto* p : all_params()) p->zero_grad();
}

std::vector<double> patch_to_input(const Raster<uint8_t>& patch) {
    if (patch.channels != 3) throw std::invalid_argument("patch must be RGB");
    const int h = patch.height, w = patch.width;
    std::vector<double> out(static_cast<size_t>(3) * h * w);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out[(static_cast<size_t>(c) * h + y) * w + x] = patch.at(y, x, c) / 255.0;
            }
        }
    }
    return out;
}

ClassifierModel init_classifier(const TinyVitConfig& config, uint64_t seed) {
    config.validate();
    ClassifierModel m;
    m.config = config;
    m.seed = seed;
    Rng rng = Rng(seed).fork(0xc1a551f1);

    m.embed = nn::AdaptedLinear("embed", config.token_dim(), config.embed_dim, rng);
    m.cls_token = nn::Param("cls_token", Tensor::randn({config.embed_dim}, rng, 0.02));
    m.pos_embed =
        nn::Param("pos_embed", Tensor::randn({config.seq_len(), config.embed_dim}, rng, 0.02));
    m.blocks.resize(static_cast<size_t>(config.layers));
    for (int l = 0; l < config.layers; ++l) {
        auto& blk = m.blocks[static_cast<size_t>(l)];
        const std::string prefix = "blocks." + std::to_string(l) + ".";
        blk.ln1 = nn::LayerNorm(prefix + "ln1", config.embed_dim);
        blk.ln2 = nn::LayerNorm(prefix + "ln2", config.embed_dim);
        blk.q = nn::AdaptedLinear(prefix + "attn.q", config.embed_dim, config.embed_dim, rng);
        blk.k = nn::AdaptedLinear(prefix + "attn.k", config.embed_dim, config.embed_dim, rng);
        blk.v = nn::AdaptedLinear(prefix + "attn.v", config.embed_dim, config.embed_dim, rng);
        blk.o = nn::AdaptedLinear(prefix + "attn.o", config.embed_dim, config.embed_dim, rng);
        blk.mlp1 = nn::AdaptedLinear(prefix + "mlp1", config.embed_dim,
                                     config.embed_dim * config.mlp_ratio, rng);
        blk.mlp2 = nn::AdaptedLinear(prefix + "mlp2", config.embed_dim * config.mlp_ratio,
                                     config.embed_dim, rng);
    }
    m.ln_final = nn::LayerNorm("ln_final", config.embed_dim);
    m.head = nn::AdaptedLinear("head", config.embed_dim, config.n_classes, rng);
    return m;
}

Tensor make_patch_batch(const PatchDataset& data, const std::vector<int>& indices, size_t begin,
                        size_t end, std::vector<int>& labels) {
    const size_t n = end - begin;
    const size_t dim = data[static_cast<size_t>(indices[begin])].pixels.size();
    Tensor batch({static_cast<int>(n), static_cast<int>(dim)});
    labels.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const auto& sample = data[static_cast<size_t>(indices[begin + i])];
        std::copy(sample.pixels.begin(), sample.pixels.end(),
                  batch.ptr() + i * dim);
        labels[i] = sample.label;
    }
    return batch;
}

double pretrain_base(ClassifierModel& model, const PatchDataset& data, int epochs, double lr,
                     int batch_size, uint64_t seed, const EpochCallback& on_epoch) {
    if (data.empty()) throw std::invalid_argument("pretrain_base: empty dataset");
    if (model.base_frozen) throw std::logic_error("pretrain_base: base already frozen");

    nn::AdamOptimizer opt;
    opt.lr = lr;
    auto params = model.all_params();

    Rng rng = Rng(seed).fork(0x9247ea17);
    std::vector<int> indices(data.size());
    std::iota(indices.begin(), indices.end(), 0);

    double epoch_loss = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (size_t i = indices.size(); i > 1; --i) {
            std::swap(indices[i - 1], indices[rng.below(i)]);
        }
        epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t begin = 0; begin < indices.size(); begin += static_cast<size_t>(batch_size)) {
            const size_t end = std::min(indices.size(), begin + static_cast<size_t>(batch_size));
            std::vector<int> labels;
            Tensor batch = make_patch_batch(data, indices, begin, end, labels);
            model.zero_grads();
            Tensor logits = model.logits(batch);
            Tensor grad;
            const double loss = nn::cross_entropy(logits, labels, &grad);
            if (!std::isfinite(loss)) throw NumericalError("pretrain_base: non-finite loss");
            model.backward_from_logits(grad);
            opt.step(params);
            epoch_loss += loss;
            n_batches++;
        }
        epoch_loss /= std::max(1, n_batches);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }

    for (auto* p : model.base_params()) p->frozen = true;
    model.base_frozen = true;
    return epoch_loss;
}

void inject_lora(ClassifierModel& model, int rank) {
    if (!model.base_frozen) throw std::logic_error("inject_lora: base must be pretrained and frozen");
    if (model.lora_rank > 0) throw std::logic_error("inject_lora: adapters already attached");
    Rng rng = Rng(model.seed).fork(0x10a0ada7);
    for (auto& block : model.blocks) {
        block.q.inject_adapter(rank, rng);
        block.k.inject_adapter(rank, rng);
        block.v.inject_adapter(rank, rng);
        block.o.inject_adapter(rank, rng);
    }
    model.lora_rank = rank;
}

double lora_train_step(ClassifierModel& model, const Tensor& patches,
                       const std::vector<int>& labels, double eta) {
    if (model.lora_rank <= 0) throw std::logic_error("lora_train_step: no adapters attached");
    if (patches.dim(0) == 0 || labels.empty()) {
        throw std::invalid_argument("lora_train_step: empty batch");
    }
    model.zero_grads();
    Tensor logits = model.logits(patches);
    Tensor grad;
    const double loss = nn::cross_entropy(logits, labels, &grad);
    if (!std::isfinite(loss)) {
        throw NumericalError("lora_train_step: non-finite loss on batch of " +
                             std::to_string(patches.dim(0)));
    }
    model.backward_from_logits(grad);
    nn::SgdOptimizer sgd{eta};
    sgd.step(model.trainable_params());
    return loss;
}

double classifier_loss(ClassifierModel& model, const Tensor& patches,
                       const std::vector<int>& labels) {
    Tensor logits = model.logits(patches);
    return nn::cross_entropy(logits, labels, nullptr);
}

std::array<double, kNumClasses> classify_patch(ClassifierModel& model,
                                               const Raster<uint8_t>& patch) {
    if (patch.height != model.config.input_size || patch.width != model.config.input_size ||
        patch.channels != 3) {
        throw std::invalid_argument("classify_patch: patch shape mismatch");
    }
    std::vector<double> pixels = patch_to_input(patch);
    Tensor batch({1, static_cast<int>(pixels.size())});
    std::copy(pixels.begin(), pixels.end(), batch.ptr());
    Tensor probs = nn::softmax_rows(model.logits(batch));
    std::array<double, kNumClasses> out{};
    for (int c = 0; c < kNumClasses; ++c) out[static_cast<size_t>(c)] = probs.at2(0, c);
    return out;
}

ProbMask classify_region(ClassifierModel& model, const RgbImage& region, int patch_size) {
    auto [grid, patches] = split_into_patches(region, patch_size, patch_size);
    const int dim = 3 * patch_size * patch_size;
    Tensor batch({grid.k(), dim});
    for (int i = 0; i < grid.k(); ++i) {
        std::vector<double> pixels = patch_to_input(patches[static_cast<size_t>(i)]);
        std::copy(pixels.begin(), pixels.end(), batch.ptr() + static_cast<size_t>(i) * dim);
    }
    Tensor probs = nn::softmax_rows(model.logits(batch));
    std::vector<std::vector<double>> vectors(static_cast<size_t>(grid.k()));
    for (int i = 0; i < grid.k(); ++i) {
        auto& v = vectors[static_cast<size_t>(i)];
        v.resize(kNumClasses);
        for (int c = 0; c < kNumClasses; ++c) v[static_cast<size_t>(c)] = probs.at2(i, c);
    }
    return assemble_coarse_mask(vectors, grid);
}

double dataset_accuracy(ClassifierModel& model, const PatchDataset& data, int batch_size) {
    if (data.empty()) return 0.0;
    std::vector<int> indices(data.size());
    std::iota(indices.begin(), indices.end(), 0);
    int64_t correct = 0;
    for (size_t begin = 0; begin < data.size(); begin += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(data.size(), begin + static_cast<size_t>(batch_size));
        std::vector<int> labels;
        Tensor batch = make_patch_batch(data, indices, begin, end, labels);
        Tensor logits = model.logits(batch);
        for (int r = 0; r < logits.dim(0); ++r) {
            int best = 0;
            for (int c = 1; c < logits.dim(1); ++c) {
                if (logits.at2(r, c) > logits.at2(r, best)) best = c;
            }
            if (best == labels[static_cast<size_t>(r)]) correct++;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

nlohmann::json config_to_json(const TinyVitConfig& c) {
    return {{"input_size", c.input_size}, {"token_size", c.token_size},
            {"embed_dim", c.embed_dim},   {"layers", c.layers},
            {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
            {"n_classes", c.n_classes}};
}

TinyVitConfig config_from_json(const nlohmann::json& j) {
    TinyVitConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.token_size = j.at("token_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    return c;
}

}  // namespace

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path) {
    TensorFile tf;
    tf.meta = {{"kind", "classifier"},
               {"config", config_to_json(model.config)},
               {"seed", model.seed},
               {"base_frozen", model.base_frozen},
               {"lora_rank", model.lora_rank}};
    auto& m = const_cast<ClassifierModel&>(model);
    for (auto* p : m.all_params()) tf.add(p->name, p->value, p->frozen, p->adapter_of);
    tf.save(path);
}

void save_classifier_lora(const ClassifierModel& model, const std::filesystem::path& path,
                          const std::string& base_filename, const std::string& base_sha256) {
    if (model.lora_rank <= 0) throw std::logic_error("no adapters to save");
    TensorFile tf;
    tf.meta = {{"kind", "classifier_lora"},
               {"config", config_to_json(model.config)},
               {"seed", model.seed},
               {"lora_rank", model.lora_rank},
               {"base_file", base_filename},
               {"base_sha256", base_sha256}};
    auto& m = const_cast<ClassifierModel&>(model);
    for (auto* p : m.trainable_params()) tf.add(p->name, p->value, p->frozen, p->adapter_of);
    tf.save(path);
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
    TensorFile tf = TensorFile::load(path);
    const std::string kind = tf.meta.value("kind", "");
    if (kind == "classifier") {
        ClassifierModel m = init_classifier(config_from_json(tf.meta.at("config")),
                                            tf.meta.at("seed").get<uint64_t>());
        if (tf.meta.value("base_frozen", false)) {
            for (auto* p : m.base_params()) p->frozen = true;
            m.base_frozen = true;
        }
        const int rank = tf.meta.value("lora_rank", 0);
        if (rank > 0) inject_lora(m, rank);
        for (auto* p : m.all_params()) {
            const Tensor& t = tf.require(p->name);
            if (t.shape != p->value.shape) {
                throw std::runtime_error("checkpoint shape mismatch for " + p->name);
            }
            p->value = t;
        }
        return m;
    }
    if (kind == "classifier_lora") {
        const auto base_path = path.parent_path() / tf.meta.at("base_file").get<std::string>();
        if (!std::filesystem::exists(base_path)) {
            throw MissingArtifactError("LoRA checkpoint references missing base: " +
                                       base_path.string());
        }
        ClassifierModel m = load_classifier(base_path);
        if (!m.base_frozen) throw std::runtime_error("LoRA base checkpoint is not frozen");
        inject_lora(m, tf.meta.at("lora_rank").get<int>());
        for (auto* p : m.trainable_params()) {
            const Tensor& t = tf.require(p->name);
            if (t.shape != p->value.shape) {
                throw std::runtime_error("checkpoint shape mismatch for " + p->name);
            }
            p->value = t;
        }
        return m;
    }
    throw std::runtime_error("not a classifier checkpoint: " + path.string());
}

}  // namespace bridgeseg
