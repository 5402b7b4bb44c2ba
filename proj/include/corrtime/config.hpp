#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "corrtime/evaluation.hpp"
#include "corrtime/simulator.hpp"

namespace corrtime {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kConfigFormat = "corrtime.config";
inline constexpr int kConfigVersion = 1;

// Everything a pipeline run depends on. Feature indices in the JSON form are
// 1-based (F1..F7); in memory they are column indices.
struct RunConfig {
    std::string output_dir;  // empty: $CORRTIME_OUTPUT_ROOT or "runs"
    std::size_t workers = 0;  // 0: all hardware threads

    BoardLayout layout = BoardLayout::standard();
    SimulationSettings simulation;
    IntervenerProfile intervener;
    std::size_t episodes = 600;
    std::uint64_t dataset_seed = 20240601;

    ExperimentSettings experiment;

    // Single-model commands (train-timing, train-spatial, infer, sweep-alpha).
    double percentile = 1.0;
    std::uint64_t split_seed = 11;

    EvaluationPlan evaluation;
    bool full_counts = false;  // 200 timing / 50 KLD splits
    std::size_t ablation_splits = 5;

    void validate() const;
    std::size_t resolved_workers() const;
    std::filesystem::path resolved_output_dir() const;
};

// Default profile: proximity to the intended goal (F6) gated by low directness (F3).
IntervenerProfile default_intervener();
// Legibility-driven profile (F5 gated by F6) used for single-signal ablations.
IntervenerProfile legibility_intervener();

RunConfig default_config();

// Throws ConfigError on malformed JSON, unknown keys, version mismatch or invalid values.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const RunConfig& config);

// Hex SHA-256 prefix (16 chars) of the canonical JSON form.
std::string config_hash(const RunConfig& config);
std::string content_hash(std::string_view bytes);

nlohmann::json layout_to_json(const BoardLayout& layout);
BoardLayout layout_from_json(const nlohmann::json& j);
nlohmann::json intervener_to_json(const IntervenerProfile& p);
IntervenerProfile intervener_from_json(const nlohmann::json& j);
nlohmann::json simulation_to_json(const SimulationSettings& s);
SimulationSettings simulation_from_json(const nlohmann::json& j);

// Writes to a sibling temporary file, then renames over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

inline constexpr std::string_view kManifestFormat = "corrtime.dataset";

// Dataset directory: episodes.jsonl plus manifest.json (layout, profile,
// settings, seeds, split map and percentile tags).
struct DatasetFiles {
    std::filesystem::path episodes;
    std::filesystem::path manifest;
    static DatasetFiles in(const std::filesystem::path& dir);
};

struct LoadedDataset {
    Dataset dataset;
    std::string config_hash;   // of the config that produced it
    std::string dataset_hash;  // of the episodes file
};

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const RunConfig& config);
LoadedDataset read_dataset(const std::filesystem::path& dir);

}  // namespace corrtime
