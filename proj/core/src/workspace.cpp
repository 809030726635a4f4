#include "bridgeseg/workspace.hpp"

#include <stdexcept>

#include "bridgeseg/hash.hpp"
#include "bridgeseg/version.hpp"

namespace bridgeseg {

Workspace::Workspace(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
    ledger_.open(root_ / "ledger.jsonl", std::ios::app);
    if (!ledger_) throw std::runtime_error("cannot open ledger in " + root_.string());
}

void Workspace::ensure_dir(const std::string& rel) const {
    std::filesystem::create_directories(root_ / rel);
}

void Workspace::event(nlohmann::json j) {
    ledger_ << j.dump() << "\n";
    ledger_.flush();
}

void Workspace::record_artifact(const std::string& stage, const std::filesystem::path& file) {
    event({{"event", "artifact"},
           {"stage", stage},
           {"path", std::filesystem::relative(file, root_).generic_string()},
           {"sha256", sha256_file_hex(file)}});
}

void Workspace::metric(const std::string& stage, int64_t step, nlohmann::json values) {
    event({{"event", "metric"}, {"stage", stage}, {"step", step}, {"values", std::move(values)}});
}

void Workspace::timing(const std::string& stage, double seconds) {
    event({{"event", "timing"}, {"stage", stage}, {"seconds", seconds}});
}

void Workspace::run_start(const std::string& stage, const std::string& config_text) {
    event({{"event", "run-start"},
           {"stage", stage},
           {"version", kVersion},
           {"config_sha256", sha256_hex(config_text)}});
}

}  // namespace bridgeseg
