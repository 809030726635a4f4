#include "bridgeseg/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

TextureParams GeneratorConfig::texture(int palette_family) const {
    TextureParams tex;
    tex.speckle_std = speckle_std;
    tex.bleed = bleed;
    tex.bleed_radius = bleed_radius;
    tex.smooth_radius = smooth_radius;
    tex.cell_area = cell_area;
    tex.palette_family = palette_family;
    if (palette_family != 0) tex.speckle_std = speckle_std * 1.5;  // shifted source texture
    return tex;
}

TinyVitConfig ClassifierSection::vit(int patch_size) const {
    TinyVitConfig c;
    c.input_size = patch_size;
    c.token_size = token_size;
    c.embed_dim = embed_dim;
    c.layers = layers;
    c.heads = heads;
    c.mlp_ratio = mlp_ratio;
    c.n_classes = kNumClasses;
    return c;
}

RefinerConfig RefinerSection::core() const {
    RefinerConfig c;
    c.steps = steps;
    c.scale = scale;
    c.lambda = lambda;
    c.cond_features = cond_features;
    c.base_width = base_width;
    c.temb_dim = temb_dim;
    c.o_downsample = o_downsample;
    c.lr = lr;
    return c;
}

SampleMode RefinerSection::sample_mode() const {
    if (mode == "ddim") return SampleMode::Ddim;
    if (mode == "ancestral") return SampleMode::Ancestral;
    throw ConfigError("refiner.mode must be 'ddim' or 'ancestral', got '" + mode + "'");
}

void ExperimentConfig::validate() const {
    if (geometry.patch_size <= 0 || geometry.k < 1) {
        throw ConfigError("geometry: patch_size must be positive and k >= 1");
    }
    if (geometry.region_size != geometry.patch_size * (1 << geometry.k)) {
        throw ConfigError("geometry: region_size must equal patch_size * 2^k");
    }
    if (geometry.train_wsi_size < 4 * geometry.region_size ||
        geometry.eval_wsi_size < 4 * geometry.region_size) {
        throw ConfigError("geometry: slide sides must be at least 4x the region size");
    }
    double fsum = 0.0;
    for (double f : generator.class_freqs) {
        if (f < 0.0) throw ConfigError("generator: class frequencies must be non-negative");
        fsum += f;
    }
    if (std::abs(fsum - 1.0) > 1e-9) throw ConfigError("generator: class frequencies must sum to 1");
    double ssum = 0.0;
    for (double f : generator.patch_splits) {
        if (f < 0.0) throw ConfigError("generator: split fractions must be non-negative");
        ssum += f;
    }
    if (std::abs(ssum - 1.0) > 1e-9) throw ConfigError("generator: split fractions must sum to 1");
    if (generator.source_wsis < 1 || generator.train_wsis < 1 || generator.eval_wsis < 1) {
        throw ConfigError("generator: slide counts must be at least 1");
    }

    try {
        classifier.vit(geometry.patch_size).validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("classifier: ") + e.what());
    }
    if (classifier.lora_rank < 1 || classifier.lora_rank > classifier.embed_dim) {
        throw ConfigError("classifier: lora_rank out of range");
    }
    if (classifier.eta < 0.0 || classifier.pretrain_lr <= 0.0) {
        throw ConfigError("classifier: learning rates must be non-negative");
    }
    if (classifier.pretrain_epochs < 1 || classifier.finetune_epochs < 0 ||
        classifier.batch_size < 1) {
        throw ConfigError("classifier: bad training schedule");
    }

    if (refiner.steps < 2) throw ConfigError("refiner: steps must be at least 2");
    if (refiner.scale <= 0.0) throw ConfigError("refiner: scale must be positive");
    if (refiner.lambda < 0.0) throw ConfigError("refiner: lambda must be non-negative");
    if (refiner.n_steps < 1 || refiner.n_steps > refiner.steps) {
        throw ConfigError("refiner: n_steps must be in [1, steps]");
    }
    refiner.sample_mode();
    if (refiner.o_downsample != 1 && refiner.o_downsample != 2 && refiner.o_downsample != 4) {
        throw ConfigError("refiner: o_downsample must be 1, 2 or 4");
    }
    const int pool_unit = 2 * refiner.o_downsample;
    if (geometry.region_size % pool_unit != 0) {
        throw ConfigError("refiner: region size must be divisible by 2 * o_downsample");
    }
    if (refiner.crop < 0 || refiner.crop > geometry.region_size) {
        throw ConfigError("refiner: crop must be in [0, region_size]");
    }
    if (refiner.crop > 0 && refiner.crop % pool_unit != 0) {
        throw ConfigError("refiner: crop must be divisible by 2 * o_downsample");
    }
    if (refiner.train_steps < 0 || refiner.lr <= 0.0) {
        throw ConfigError("refiner: bad training schedule");
    }
    if (refiner.base_width < 1 || refiner.cond_features < 1 || refiner.temb_dim < 2 ||
        refiner.temb_dim % 2 != 0) {
        throw ConfigError("refiner: bad network widths");
    }
    if (workspace.empty()) throw ConfigError("paths: workspace must be set");
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <size_t N>
std::string fmt_doubles(const std::array<double, N>& a) {
    std::string out;
    for (size_t i = 0; i < N; ++i) {
        if (i) out += ", ";
        out += fmt_double(a[i]);
    }
    return out;
}

struct SectionReader {
    std::string section;
    std::map<std::string, std::string>* kv;

    bool has(const std::string& key) const { return kv->count(key) > 0; }

    std::string take(const std::string& key, const std::string& fallback) {
        auto it = kv->find(key);
        if (it == kv->end()) return fallback;
        std::string v = it->second;
        kv->erase(it);
        return v;
    }
    int take_int(const std::string& key, int fallback) {
        auto it = kv->find(key);
        if (it == kv->end()) return fallback;
        try {
            size_t pos = 0;
            int v = std::stoi(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            kv->erase(it);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("[" + section + "] " + key + ": expected integer, got '" +
                              it->second + "'");
        }
    }
    uint64_t take_u64(const std::string& key, uint64_t fallback) {
        auto it = kv->find(key);
        if (it == kv->end()) return fallback;
        try {
            size_t pos = 0;
            uint64_t v = std::stoull(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            kv->erase(it);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("[" + section + "] " + key + ": expected unsigned integer");
        }
    }
    double take_double(const std::string& key, double fallback) {
        auto it = kv->find(key);
        if (it == kv->end()) return fallback;
        try {
            size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            kv->erase(it);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("[" + section + "] " + key + ": expected number, got '" +
                              it->second + "'");
        }
    }
    bool take_bool(const std::string& key, bool fallback) {
        auto it = kv->find(key);
        if (it == kv->end()) return fallback;
        std::string v = it->second;
        kv->erase(it);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("[" + section + "] " + key + ": expected true/false");
    }
    template <size_t N>
    void take_doubles(const std::string& key, std::array<double, N>& out) {
        auto it = kv->find(key);
        if (it == kv->end()) return;
        std::stringstream ss(it->second);
        std::string tok;
        size_t i = 0;
        while (std::getline(ss, tok, ',')) {
            if (i >= N) throw ConfigError("[" + section + "] " + key + ": too many values");
            try {
                out[i++] = std::stod(tok);
            } catch (const std::exception&) {
                throw ConfigError("[" + section + "] " + key + ": expected numbers");
            }
        }
        if (i != N) {
            throw ConfigError("[" + section + "] " + key + ": expected " + std::to_string(N) +
                              " comma-separated values");
        }
        kv->erase(it);
    }
};

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string ExperimentConfig::serialize() const {
    std::ostringstream out;
    out << "[experiment]\n";
    out << "seed = " << seed << "\n";
    out << "\n[geometry]\n";
    out << "patch_size = " << geometry.patch_size << "\n";
    out << "k = " << geometry.k << "\n";
    out << "region_size = " << geometry.region_size << "\n";
    out << "train_wsi_size = " << geometry.train_wsi_size << "\n";
    out << "eval_wsi_size = " << geometry.eval_wsi_size << "\n";
    out << "\n[generator]\n";
    out << "class_freqs = " << fmt_doubles(generator.class_freqs) << "\n";
    out << "speckle_std = " << fmt_double(generator.speckle_std) << "\n";
    out << "bleed = " << fmt_double(generator.bleed) << "\n";
    out << "bleed_radius = " << generator.bleed_radius << "\n";
    out << "smooth_radius = " << generator.smooth_radius << "\n";
    out << "cell_area = " << fmt_double(generator.cell_area) << "\n";
    out << "source_wsis = " << generator.source_wsis << "\n";
    out << "train_wsis = " << generator.train_wsis << "\n";
    out << "eval_wsis = " << generator.eval_wsis << "\n";
    out << "patch_splits = " << fmt_doubles(generator.patch_splits) << "\n";
    out << "\n[classifier]\n";
    out << "token_size = " << classifier.token_size << "\n";
    out << "embed_dim = " << classifier.embed_dim << "\n";
    out << "layers = " << classifier.layers << "\n";
    out << "heads = " << classifier.heads << "\n";
    out << "mlp_ratio = " << classifier.mlp_ratio << "\n";
    out << "lora_rank = " << classifier.lora_rank << "\n";
    out << "eta = " << fmt_double(classifier.eta) << "\n";
    out << "pretrain_epochs = " << classifier.pretrain_epochs << "\n";
    out << "pretrain_lr = " << fmt_double(classifier.pretrain_lr) << "\n";
    out << "finetune_epochs = " << classifier.finetune_epochs << "\n";
    out << "batch_size = " << classifier.batch_size << "\n";
    out << "\n[refiner]\n";
    out << "steps = " << refiner.steps << "\n";
    out << "scale = " << fmt_double(refiner.scale) << "\n";
    out << "lambda = " << fmt_double(refiner.lambda) << "\n";
    out << "n_steps = " << refiner.n_steps << "\n";
    out << "mode = " << refiner.mode << "\n";
    out << "train_steps = " << refiner.train_steps << "\n";
    out << "lr = " << fmt_double(refiner.lr) << "\n";
    out << "base_width = " << refiner.base_width << "\n";
    out << "cond_features = " << refiner.cond_features << "\n";
    out << "temb_dim = " << refiner.temb_dim << "\n";
    out << "o_downsample = " << refiner.o_downsample << "\n";
    out << "crop = " << refiner.crop << "\n";
    out << "save_probmasks = " << (refiner.save_probmasks ? "true" : "false") << "\n";
    out << "\n[paths]\n";
    out << "workspace = " << workspace << "\n";
    return out.str();
}

ExperimentConfig ExperimentConfig::parse_string(const std::string& text) {
    std::map<std::string, std::map<std::string, std::string>> sections;
    std::string current;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        // strip comments
        size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
            }
            current = trim(line.substr(1, line.size() - 2));
            if (current.empty()) {
                throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
            }
            sections[current];
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        if (current.empty()) {
            throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        if (!sections[current].emplace(key, value).second) {
            throw ConfigError("duplicate key '" + key + "' in [" + current + "]");
        }
    }

    static const std::array<std::string, 6> known = {"experiment", "geometry", "generator",
                                                     "classifier", "refiner",  "paths"};
    for (const auto& [name, _] : sections) {
        bool ok = false;
        for (const auto& k : known) ok = ok || k == name;
        if (!ok) throw ConfigError("unknown section [" + name + "]");
    }

    ExperimentConfig cfg;
    {
        SectionReader r{"experiment", &sections["experiment"]};
        cfg.seed = r.take_u64("seed", cfg.seed);
    }
    {
        SectionReader r{"geometry", &sections["geometry"]};
        cfg.geometry.patch_size = r.take_int("patch_size", cfg.geometry.patch_size);
        cfg.geometry.k = r.take_int("k", cfg.geometry.k);
        cfg.geometry.region_size = r.take_int("region_size", cfg.geometry.region_size);
        cfg.geometry.train_wsi_size = r.take_int("train_wsi_size", cfg.geometry.train_wsi_size);
        cfg.geometry.eval_wsi_size = r.take_int("eval_wsi_size", cfg.geometry.eval_wsi_size);
    }
    {
        SectionReader r{"generator", &sections["generator"]};
        r.take_doubles("class_freqs", cfg.generator.class_freqs);
        cfg.generator.speckle_std = r.take_double("speckle_std", cfg.generator.speckle_std);
        cfg.generator.bleed = r.take_double("bleed", cfg.generator.bleed);
        cfg.generator.bleed_radius = r.take_int("bleed_radius", cfg.generator.bleed_radius);
        cfg.generator.smooth_radius = r.take_int("smooth_radius", cfg.generator.smooth_radius);
        cfg.generator.cell_area = r.take_double("cell_area", cfg.generator.cell_area);
        cfg.generator.source_wsis = r.take_int("source_wsis", cfg.generator.source_wsis);
        cfg.generator.train_wsis = r.take_int("train_wsis", cfg.generator.train_wsis);
        cfg.generator.eval_wsis = r.take_int("eval_wsis", cfg.generator.eval_wsis);
        r.take_doubles("patch_splits", cfg.generator.patch_splits);
    }
    {
        SectionReader r{"classifier", &sections["classifier"]};
        cfg.classifier.token_size = r.take_int("token_size", cfg.classifier.token_size);
        cfg.classifier.embed_dim = r.take_int("embed_dim", cfg.classifier.embed_dim);
        cfg.classifier.layers = r.take_int("layers", cfg.classifier.layers);
        cfg.classifier.heads = r.take_int("heads", cfg.classifier.heads);
        cfg.classifier.mlp_ratio = r.take_int("mlp_ratio", cfg.classifier.mlp_ratio);
        cfg.classifier.lora_rank = r.take_int("lora_rank", cfg.classifier.lora_rank);
        cfg.classifier.eta = r.take_double("eta", cfg.classifier.eta);
        cfg.classifier.pretrain_epochs = r.take_int("pretrain_epochs", cfg.classifier.pretrain_epochs);
        cfg.classifier.pretrain_lr = r.take_double("pretrain_lr", cfg.classifier.pretrain_lr);
        cfg.classifier.finetune_epochs = r.take_int("finetune_epochs", cfg.classifier.finetune_epochs);
        cfg.classifier.batch_size = r.take_int("batch_size", cfg.classifier.batch_size);
    }
    {
        SectionReader r{"refiner", &sections["refiner"]};
        cfg.refiner.steps = r.take_int("steps", cfg.refiner.steps);
        cfg.refiner.scale = r.take_double("scale", cfg.refiner.scale);
        cfg.refiner.lambda = r.take_double("lambda", cfg.refiner.lambda);
        cfg.refiner.n_steps = r.take_int("n_steps", cfg.refiner.n_steps);
        cfg.refiner.mode = r.take("mode", cfg.refiner.mode);
        cfg.refiner.train_steps = r.take_int("train_steps", cfg.refiner.train_steps);
        cfg.refiner.lr = r.take_double("lr", cfg.refiner.lr);
        cfg.refiner.base_width = r.take_int("base_width", cfg.refiner.base_width);
        cfg.refiner.cond_features = r.take_int("cond_features", cfg.refiner.cond_features);
        cfg.refiner.temb_dim = r.take_int("temb_dim", cfg.refiner.temb_dim);
        cfg.refiner.o_downsample = r.take_int("o_downsample", cfg.refiner.o_downsample);
        cfg.refiner.crop = r.take_int("crop", cfg.refiner.crop);
        cfg.refiner.save_probmasks = r.take_bool("save_probmasks", cfg.refiner.save_probmasks);
    }
    {
        SectionReader r{"paths", &sections["paths"]};
        cfg.workspace = r.take("workspace", cfg.workspace);
    }

    for (const auto& [name, kv] : sections) {
        if (!kv.empty()) {
            throw ConfigError("unknown key '" + kv.begin()->first + "' in [" + name + "]");
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

}  // namespace bridgeseg
