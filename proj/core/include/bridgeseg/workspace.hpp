#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

namespace bridgeseg {

// Run directory plus append-only ledger (ledger.jsonl). Every artifact the
// pipeline writes is recorded with its content hash; loss curves and timings
// are ledger events, never part of the metric outputs.
class Workspace {
public:
    explicit Workspace(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path path(const std::string& rel) const { return root_ / rel; }
    void ensure_dir(const std::string& rel) const;

    void event(nlohmann::json j);
    // Hashes the (already written) file and appends an artifact event.
    void record_artifact(const std::string& stage, const std::filesystem::path& file);
    void metric(const std::string& stage, int64_t step, nlohmann::json values);
    void timing(const std::string& stage, double seconds);
    void run_start(const std::string& stage, const std::string& config_text);

private:
    std::filesystem::path root_;
    std::ofstream ledger_;
};

}  // namespace bridgeseg
