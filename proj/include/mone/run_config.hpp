#pragma once

// JSON run configuration shared by every CLI subcommand.
//
// {
//   "seed": 0,
//   "output_dir": "out",
//   "model":   {"dim", "experts", "heads", "layers", "patch", "image_height", "image_width",
//               "channels", "classes", "norm", "ln_eps", "router_layer"},
//   "train":   {"optimizer", "learning_rate", "momentum", "weight_decay", "grad_clip", "warmup_steps",
//               "epochs", "batch_size", "steps", "isoflops", "dense", "freeze_alpha", "clamp_alpha", "augment_shift",
//               "from_scratch"},
//   "routing": {"capacity", "capacity_mode", "sampled_capacities", "beta", "delta", "favor_large",
//               "router", "sweep_capacities"},
//   "dataset": {"source", "train_count", "test_count", "noise", "amplitude", "glyph_seed",
//               "train_images", "train_labels", "test_images", "test_labels"}
// }
//
// Every section and key is optional; unknown keys are rejected.

#include "mone/dataset.hpp"
#include "mone/model.hpp"
#include "mone/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mone {

struct DatasetConfig {
    std::string source = "synth"; ///< "synth" or "idx"
    std::size_t train_count = 5000;
    std::size_t test_count = 1000;
    PlantedPatchOptions synth;
    std::string train_images, train_labels;
    /// Optional; without them the test split is carved from the training files.
    std::string test_images, test_labels;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    ModelConfig model;
    TrainConfig train;
    bool from_scratch = false;
    std::vector<double> sweep_capacities = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    DatasetConfig dataset;

    /// Throws ConfigError on any inconsistency.
    void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// Parses "synth" or "idx:<train-images>,<train-labels>[,<test-images>,<test-labels>]".
void apply_dataset_flag(DatasetConfig& dataset, const std::string& flag);

/// Training and test splits for a run; synthetic data is seeded from `seed`.
DatasetSplit load_dataset(const DatasetConfig& dataset, const ModelConfig& model, std::uint64_t seed);

} // namespace mone
