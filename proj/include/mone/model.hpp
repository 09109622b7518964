#pragma once

// Mixture-of-nested-experts vision transformer.
//
// Each block updates token i, routed to expert j, as
//     z_i  = x_i + SA_j(x_i)
//     x'_i = z_i + (alpha·r_ij + 1)·FFN_j(z_i)
// where SA_j/FFN_j enter through the first d_j input features, exchange
// information at full width D (attention) or 4D (hidden), and leave through
// the first d_j output features, zero-padded back to D before LayerNorm.

#include "mone/autodiff.hpp"
#include "mone/kernels.hpp"
#include "mone/nested.hpp"
#include "mone/routing.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mone {

enum class NormPlacement {
    post, ///< LN applied to each branch output after padding (default)
    pre,  ///< LN applied to the branch input
};

struct ModelConfig {
    NestedSpec spec;
    std::size_t patch = 8;
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t channels = 1;
    std::size_t classes = 10;
    NormPlacement norm = NormPlacement::post;
    double ln_eps = kLayerNormEps;
    /// 1-based layer whose input feeds the router; earlier layers run at full width.
    std::size_t router_layer = 1;

    void validate() const;
    std::size_t grid_height() const { return image_height / patch; }
    std::size_t grid_width() const { return image_width / patch; }
    std::size_t tokens() const { return grid_height() * grid_width(); }
    std::size_t patch_dim() const { return patch * patch * channels; }
};

struct BlockParams {
    Tensor w_q, w_k, w_v, w_o; ///< D×D
    Tensor w_ff_in, w_ff_out;  ///< D×4D
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    Tensor alpha; ///< scalar, starts at 0
};

struct ModelParams {
    ModelConfig config;
    Tensor patch_embed; ///< (p·p·C)×D
    Tensor pos_embed;   ///< N×D
    std::vector<BlockParams> blocks;
    RouterParams router;
    Tensor head_weight; ///< D×K
    Tensor head_bias;   ///< K
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
/// Same layout with every tensor zeroed, used as a gradient buffer.
ModelParams zeros_like(const ModelParams& params);
/// Stable ordering shared by checkpoints, optimizers and gradient checks.
std::vector<NamedTensor> named_parameters(ModelParams& params);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelParams& params);

struct ImageView {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::span<const double> pixels; ///< H×W×C row-major
};

/// Non-overlapping patches flattened row-major within the patch (N×(p·p·C)).
Tensor patchify(const ImageView& image, const ModelConfig& config);

struct BlockVars {
    Var w_q, w_k, w_v, w_o, w_ff_in, w_ff_out;
    Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    Var alpha;
};

struct ModelVars {
    Var patch_embed, pos_embed;
    std::vector<BlockVars> blocks;
    Var router_weight, router_bias;
    Var head_weight, head_bias;
};

/// Registers every parameter as a tape leaf; gradients land in `grads` when given.
ModelVars bind_parameters(Tape& tape, ModelParams& params, ModelParams* grads);
/// Inference-only binding; nothing on the tape requires a gradient.
ModelVars bind_parameters(Tape& tape, const ModelParams& params);
/// Wraps leaves already listed in named_parameters() order.
ModelVars bind_parameters(std::span<const Var> leaves, const ModelConfig& config);

Var tokenize(const ImageView& image, const ModelVars& vars, const ModelConfig& config);

/// Attention branch; with `attention` set, receives the per-head N×N attention weights.
Var nested_self_attention(Var x, const DimVec& dims, const BlockVars& block, const ModelConfig& config,
                          std::vector<Tensor>* attention = nullptr);
Var nested_ffn(Var z, const DimVec& dims, const BlockVars& block, const ModelConfig& config);

/// One MoNE layer. `gain` (N×1) multiplies the FFN branch; absent means 1.
Var mone_block_forward(Var x, const DimVec& dims, std::optional<Var> gain, const BlockVars& block,
                       const ModelConfig& config);

/// Global average pool over tokens, then affine map to K logits (1×K).
Var classify(Var x, Var head_weight, Var head_bias);

enum class RouterKind { learned, random };

struct ForwardPlan {
    /// Every token runs at this expert in every layer; router and gain unused.
    std::optional<std::size_t> uniform_expert;
    /// Capacity distribution for routed passes.
    std::vector<double> capacity;
    RouterKind router = RouterKind::learned;
    std::uint64_t random_seed = 0;
    /// When set, replaces the computed assignment (the router still supplies r).
    std::optional<AssignmentVec> assignment;
};

struct ForwardResult {
    Var logits;
    AssignmentVec assignment;
    Var router_probs; ///< N×E; invalid for uniform passes
};

ForwardResult model_forward(const ImageView& image, const ModelVars& vars, const ModelConfig& config,
                            const ForwardPlan& plan);

} // namespace mone
