#pragma once

// Training loops, evaluation and experiment drivers.

#include "mone/dataset.hpp"
#include "mone/flops.hpp"
#include "mone/model.hpp"
#include "mone/routing.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mone {

enum class OptimizerKind { sgd, adam };
enum class CapacityMode { fixed, sampled };

std::vector<double> default_sampled_capacities();

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 1.0;
    /// Linear warmup length, then cosine decay to zero.
    std::size_t warmup_steps = 0;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    /// Overrides epochs when nonzero.
    std::size_t steps = 0;
    std::uint64_t seed = 0;

    CapacityMode capacity_mode = CapacityMode::fixed;
    double capacity = 0.6;
    std::vector<double> sampled_capacities = default_sampled_capacities();
    /// Stretch the step count so total training MACs match full-width training.
    bool isoflops = false;
    SolverOptions solver;
    RouterKind router = RouterKind::learned;
    /// Finetune every token at full width with the router off.
    bool dense = false;
    bool freeze_alpha = false;
    /// Project each layer's alpha onto [0, 1) after every update.
    bool clamp_alpha = true;
    /// Random translation of up to this many pixels (zero fill); 0 disables.
    std::size_t augment_shift = 0;

    void validate() const;
    /// Steps before isoflops stretching.
    std::size_t base_steps(std::size_t train_size) const;
};

/// Independent RNG stream for one purpose ("init", "sampling", "router", ...).
std::mt19937_64 rng_stream(std::uint64_t seed, const std::string& purpose);

struct TrainResult {
    std::size_t steps = 0;
    std::vector<double> losses; ///< mean loss per step
    /// Forward MACs summed over every training image (transformer layers plus router).
    MacCount training_macs = 0;
    /// The same images all processed at full width without a router.
    MacCount dense_macs = 0;
};

/// Joint training of all nested granularities with equal loss weights.
TrainResult mat_joint_pretrain(ModelParams& params, const Dataset& train, const TrainConfig& config);

/// Routed (or dense) finetuning; EPR runs per image at the step's capacity.
TrainResult mone_finetune(ModelParams& params, const Dataset& train, const TrainConfig& config);

/// Step count isoflops training uses for the given configuration.
std::size_t isoflops_steps(const TrainConfig& config, const ModelConfig& model, std::size_t train_size);

struct EvalOptions {
    /// Uniform expert for every token (router off); overrides capacity.
    std::optional<std::size_t> uniform_expert;
    double capacity = 1.0;
    RouterKind router = RouterKind::learned;
    std::uint64_t seed = 0;
    SolverOptions solver;
    /// 0 reads MONE_THREADS, falling back to the hardware concurrency.
    std::size_t threads = 0;
};

struct EvalMetrics {
    double accuracy = 0.0;
    /// Transformer-layer MACs relative to full-width inference (router excluded).
    double flop_ratio = 1.0;
    /// Same, with the router's MACs included.
    double flop_ratio_with_router = 1.0;
    MacCount macs_per_image = 0;
    std::size_t count = 0;
    /// Fraction of images whose planted token went to the largest expert (NaN when unknown).
    double planted_to_largest = 0.0;
    std::vector<double> capacity;
};

EvalMetrics evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options);

/// Thread count from MONE_THREADS (at least 1).
std::size_t evaluation_threads();

struct SweepRow {
    double capacity = 0.0;
    EvalMetrics metrics;
    bool training_point = false;
};

std::vector<SweepRow> capacity_sweep(const ModelParams& params, const Dataset& data,
                                     const std::vector<double>& capacities, const EvalOptions& base,
                                     std::optional<double> training_capacity);
/// Columns: e_c,accuracy,flop_ratio,macs_per_image,training_point.
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct RouteMaps {
    AssignmentVec assignment;
    GrayImage full_mask;  ///< 1 where the token went to the largest expert, maxval 1
    GrayImage expert_map; ///< 1-based expert index per token, maxval E
};

RouteMaps route_visualize(const ModelParams& params, const ImageView& image, double capacity,
                          const SolverOptions& solver = {});

} // namespace mone
