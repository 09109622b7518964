#include "mone/model.hpp"

#include "mone/errors.hpp"

#include <cmath>
#include <random>
#include <string>

namespace mone {

void ModelConfig::validate() const
{
    spec.validate();
    if (patch == 0 || image_height == 0 || image_width == 0 || channels == 0) {
        throw ConfigError("model: patch and image extents must be positive");
    }
    if (image_height % patch != 0 || image_width % patch != 0) {
        throw ConfigError("model: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " is not divisible by patch " + std::to_string(patch));
    }
    if (classes < 2) throw ConfigError("model: need at least two classes");
    if (router_layer < 1 || router_layer > spec.layers) {
        throw ConfigError("model: router layer must lie in [1, " + std::to_string(spec.layers) + "]");
    }
    if (!(ln_eps > 0.0)) throw ConfigError("model: layer-norm eps must be positive");
}

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng)
{
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

template <typename Params, typename F>
void visit_parameters(Params& p, F&& f)
{
    f("patch_embed", p.patch_embed);
    f("pos_embed", p.pos_embed);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        f(pre + "w_q", b.w_q);
        f(pre + "w_k", b.w_k);
        f(pre + "w_v", b.w_v);
        f(pre + "w_o", b.w_o);
        f(pre + "w_ff_in", b.w_ff_in);
        f(pre + "w_ff_out", b.w_ff_out);
        f(pre + "ln1_gamma", b.ln1_gamma);
        f(pre + "ln1_beta", b.ln1_beta);
        f(pre + "ln2_gamma", b.ln2_gamma);
        f(pre + "ln2_beta", b.ln2_beta);
        f(pre + "alpha", b.alpha);
    }
    f("router.weight", p.router.weight);
    f("router.bias", p.router.bias);
    f("head.weight", p.head_weight);
    f("head.bias", p.head_bias);
}

} // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.spec.dim;
    const std::size_t ff = config.spec.ffn_dim();
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));

    ModelParams p;
    p.config = config;
    p.patch_embed = gaussian({config.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())), rng);
    p.pos_embed = gaussian({config.tokens(), d}, 0.02, rng);
    for (std::size_t l = 0; l < config.spec.layers; ++l) {
        BlockParams b;
        b.w_q = gaussian({d, d}, in_std, rng);
        b.w_k = gaussian({d, d}, in_std, rng);
        b.w_v = gaussian({d, d}, in_std, rng);
        b.w_o = gaussian({d, d}, in_std, rng);
        b.w_ff_in = gaussian({d, ff}, in_std, rng);
        b.w_ff_out = gaussian({d, ff}, 1.0 / std::sqrt(static_cast<double>(ff)), rng);
        b.ln1_gamma = Tensor({d}, 1.0);
        b.ln1_beta = Tensor({d}, 0.0);
        b.ln2_gamma = Tensor({d}, 1.0);
        b.ln2_beta = Tensor({d}, 0.0);
        b.alpha = Tensor::scalar(0.0);
        p.blocks.push_back(std::move(b));
    }
    p.router.weight = gaussian({d, config.spec.experts}, 0.02, rng);
    p.router.bias = Tensor({config.spec.experts}, 0.0);
    p.head_weight = gaussian({d, config.classes}, 0.02, rng);
    p.head_bias = Tensor({config.classes}, 0.0);
    return p;
}

ModelParams zeros_like(const ModelParams& params)
{
    ModelParams out = params;
    visit_parameters(out, [](const std::string&, Tensor& t) { t.fill(0.0); });
    return out;
}

std::vector<NamedTensor> named_parameters(ModelParams& params)
{
    std::vector<NamedTensor> out;
    visit_parameters(params, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelParams& params)
{
    std::vector<std::pair<std::string, const Tensor*>> out;
    visit_parameters(params, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

Tensor patchify(const ImageView& image, const ModelConfig& config)
{
    if (image.height != config.image_height || image.width != config.image_width ||
        image.channels != config.channels) {
        throw ConfigError("tokenize: image shape does not match the model config");
    }
    if (image.pixels.size() != image.height * image.width * image.channels) {
        throw DimensionError("tokenize: pixel buffer size mismatch");
    }
    const std::size_t p = config.patch, c = config.channels;
    const std::size_t gw = config.grid_width();
    Tensor out({config.tokens(), config.patch_dim()});
    for (std::size_t n = 0; n < config.tokens(); ++n) {
        const std::size_t gy = n / gw, gx = n % gw;
        std::size_t k = 0;
        for (std::size_t py = 0; py < p; ++py) {
            for (std::size_t px = 0; px < p; ++px) {
                const std::size_t y = gy * p + py, x = gx * p + px;
                for (std::size_t ch = 0; ch < c; ++ch) out(n, k++) = image.pixels[(y * image.width + x) * c + ch];
            }
        }
    }
    return out;
}

ModelVars bind_parameters(Tape& tape, ModelParams& params, ModelParams* grads)
{
    std::vector<Var> leaves;
    auto ps = named_parameters(params);
    std::vector<NamedTensor> gs;
    if (grads) gs = named_parameters(*grads);
    leaves.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) leaves.push_back(tape.leaf(*ps[i].tensor, grads ? gs[i].tensor : nullptr));
    return bind_parameters(leaves, params.config);
}

ModelVars bind_parameters(Tape& tape, const ModelParams& params)
{
    std::vector<Var> leaves;
    for (const auto& [name, t] : named_parameters(params)) leaves.push_back(tape.leaf(*t, nullptr));
    return bind_parameters(leaves, params.config);
}

ModelVars bind_parameters(std::span<const Var> leaves, const ModelConfig& config)
{
    const std::size_t expected = 4 + 11 * config.spec.layers + 2;
    if (leaves.size() != expected) throw DimensionError("bind_parameters: wrong number of leaves");
    std::size_t k = 0;
    ModelVars v;
    v.patch_embed = leaves[k++];
    v.pos_embed = leaves[k++];
    for (std::size_t l = 0; l < config.spec.layers; ++l) {
        BlockVars b;
        b.w_q = leaves[k++];
        b.w_k = leaves[k++];
        b.w_v = leaves[k++];
        b.w_o = leaves[k++];
        b.w_ff_in = leaves[k++];
        b.w_ff_out = leaves[k++];
        b.ln1_gamma = leaves[k++];
        b.ln1_beta = leaves[k++];
        b.ln2_gamma = leaves[k++];
        b.ln2_beta = leaves[k++];
        b.alpha = leaves[k++];
        v.blocks.push_back(b);
    }
    v.router_weight = leaves[k++];
    v.router_bias = leaves[k++];
    v.head_weight = leaves[k++];
    v.head_bias = leaves[k++];
    return v;
}

Var tokenize(const ImageView& image, const ModelVars& vars, const ModelConfig& config)
{
    Tape& tape = vars.patch_embed.tape();
    Var patches = tape.constant(patchify(image, config));
    return add(matmul(patches, vars.patch_embed), vars.pos_embed);
}

Var nested_self_attention(Var x, const DimVec& dims, const BlockVars& block, const ModelConfig& config,
                          std::vector<Tensor>* attention)
{
    const std::size_t d = config.spec.dim;
    const std::size_t hd = config.spec.head_dim();
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool pre = config.norm == NormPlacement::pre;

    Var in = pre ? layer_norm_rows(x, block.ln1_gamma, block.ln1_beta, config.ln_eps) : x;
    Var q = sliced_in_projection(in, dims, block.w_q);
    Var k = sliced_in_projection(in, dims, block.w_k);
    Var v = sliced_in_projection(in, dims, block.w_v);

    std::vector<Var> heads;
    heads.reserve(config.spec.heads);
    if (attention) attention->clear();
    for (std::size_t h = 0; h < config.spec.heads; ++h) {
        const std::size_t b = h * hd, e = b + hd;
        Var scores = scale(matmul_nt(slice_cols(q, b, e), slice_cols(k, b, e)), scale_factor);
        Var weights = row_softmax(scores);
        if (attention) attention->push_back(weights.value());
        heads.push_back(matmul(weights, slice_cols(v, b, e)));
    }
    Var mixed = heads.size() == 1 ? heads.front() : concat_cols(heads);
    if (mixed.value().cols() != d) throw DimensionError("attention: head split does not cover D");
    Var out = sliced_out_projection_padded(mixed, dims, block.w_o);
    return pre ? out : layer_norm_rows(out, block.ln1_gamma, block.ln1_beta, config.ln_eps);
}

Var nested_ffn(Var z, const DimVec& dims, const BlockVars& block, const ModelConfig& config)
{
    const bool pre = config.norm == NormPlacement::pre;
    Var in = pre ? layer_norm_rows(z, block.ln2_gamma, block.ln2_beta, config.ln_eps) : z;
    Var hidden = gelu(sliced_in_projection(in, dims, block.w_ff_in));
    Var out = sliced_out_projection_padded(hidden, dims, block.w_ff_out);
    return pre ? out : layer_norm_rows(out, block.ln2_gamma, block.ln2_beta, config.ln_eps);
}

Var mone_block_forward(Var x, const DimVec& dims, std::optional<Var> gain, const BlockVars& block,
                       const ModelConfig& config)
{
    Var z = add(x, nested_self_attention(x, dims, block, config));
    Var f = nested_ffn(z, dims, block, config);
    if (gain) f = scale_rows(f, *gain);
    return add(z, f);
}

Var classify(Var x, Var head_weight, Var head_bias)
{
    return add_row_bias(matmul(mean_rows(x), head_weight), head_bias);
}

ForwardResult model_forward(const ImageView& image, const ModelVars& vars, const ModelConfig& config,
                            const ForwardPlan& plan)
{
    const std::size_t n = config.tokens();
    const NestedSpec& spec = config.spec;
    ForwardResult result;
    Var x = tokenize(image, vars, config);

    if (plan.uniform_expert) {
        const DimVec dims = uniform_dims(n, spec.expert_dim(*plan.uniform_expert));
        for (const auto& block : vars.blocks) x = mone_block_forward(x, dims, std::nullopt, block, config);
        result.assignment.experts.assign(n, *plan.uniform_expert);
        result.logits = classify(x, vars.head_weight, vars.head_bias);
        return result;
    }

    const DimVec full = uniform_dims(n, spec.dim);
    const std::size_t routed_from = config.router_layer - 1;
    DimVec dims;
    Var selected;
    for (std::size_t l = 0; l < vars.blocks.size(); ++l) {
        if (l < routed_from) {
            x = mone_block_forward(x, full, std::nullopt, vars.blocks[l], config);
            continue;
        }
        if (l == routed_from) {
            result.router_probs = router_forward(x, vars.router_weight, vars.router_bias);
            if (plan.assignment) {
                if (plan.assignment->size() != n) throw RoutingError("forced assignment has the wrong length");
                result.assignment = *plan.assignment;
            } else if (plan.router == RouterKind::random) {
                result.assignment = random_assign(plan.capacity, n, plan.random_seed);
            } else {
                result.assignment = epr_assign(result.router_probs.value().transposed(), plan.capacity);
            }
            dims = result.assignment.dims(spec);
            selected = gather_cols(result.router_probs, result.assignment.experts);
        }
        Var gain = affine_gain(selected, vars.blocks[l].alpha);
        x = mone_block_forward(x, dims, gain, vars.blocks[l], config);
    }
    result.logits = classify(x, vars.head_weight, vars.head_bias);
    return result;
}

} // namespace mone
