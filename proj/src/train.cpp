#include "mone/train.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>
#include <tuple>

namespace mone {

std::vector<double> default_sampled_capacities()
{
    std::vector<double> v;
    for (int k = 0; k < 9; ++k) v.push_back(0.15 + 0.1 * k);
    return v;
}

void TrainConfig::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train: weight decay must be non-negative");
    if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be non-negative");
    if (batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (epochs == 0 && steps == 0) throw ConfigError("train: need epochs or steps");
    if (capacity_mode == CapacityMode::sampled && sampled_capacities.empty()) {
        throw ConfigError("train: sampled capacity set is empty");
    }
    if (!(solver.beta > 0.0) || !(solver.delta > 0.0)) throw ConfigError("train: beta and delta must be positive");
}

std::size_t TrainConfig::base_steps(std::size_t train_size) const
{
    if (steps) return steps;
    return (epochs * train_size + batch_size - 1) / batch_size;
}

std::mt19937_64 rng_stream(std::uint64_t seed, const std::string& purpose)
{
    std::vector<std::uint32_t> words = {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    for (char ch : purpose) words.push_back(static_cast<unsigned char>(ch));
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Capacity distributions are solved once per distinct e_c.
class CapacityCache {
public:
    CapacityCache(std::size_t experts, SolverOptions opts) : experts_(experts), opts_(opts) {}

    const std::vector<double>& get(double e_c)
    {
        auto it = cache_.find(e_c);
        if (it == cache_.end()) {
            try {
                it = cache_.emplace(e_c, solve_capacity(e_c, experts_, opts_).c).first;
            } catch (const InfeasibleError& e) {
                throw ConfigError(std::string("infeasible capacity: ") + e.what());
            }
        }
        return it->second;
    }

private:
    std::size_t experts_;
    SolverOptions opts_;
    std::map<double, std::vector<double>> cache_;
};

class Optimizer {
public:
    Optimizer(const TrainConfig& config, ModelParams& params) : config_(config), params_(named_parameters(params))
    {
        for (const auto& p : params_) {
            first_.push_back(zeros_like(*p.tensor));
            if (config.optimizer == OptimizerKind::adam) second_.push_back(zeros_like(*p.tensor));
            const bool is_alpha = p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, ".alpha") == 0;
            frozen_.push_back(config.freeze_alpha && is_alpha);
            clamped_.push_back(config.clamp_alpha && is_alpha);
        }
    }

    void step(ModelParams& grads, double lr)
    {
        auto gs = named_parameters(grads);
        for (std::size_t i = 0; i < gs.size(); ++i)
            if (frozen_[i]) gs[i].tensor->fill(0.0);
        if (config_.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& g : gs)
                for (double v : g.tensor->data()) sq += v * v;
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw TrainingError("non-finite gradient");
            if (norm > config_.grad_clip) {
                for (auto& g : gs) *g.tensor *= config_.grad_clip / norm;
            }
        }
        ++t_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (frozen_[i]) continue;
            auto p = params_[i].tensor->data();
            auto g = gs[i].tensor->data();
            auto m = first_[i].data();
            if (config_.optimizer == OptimizerKind::sgd) {
                for (std::size_t k = 0; k < p.size(); ++k) {
                    const double gk = g[k] + config_.weight_decay * p[k];
                    m[k] = config_.momentum * m[k] + gk;
                    p[k] -= lr * m[k];
                }
            } else {
                auto v = second_[i].data();
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (std::size_t k = 0; k < p.size(); ++k) {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    p[k] -= lr * ((m[k] / c1) / (std::sqrt(v[k] / c2) + eps) + config_.weight_decay * p[k]);
                }
            }
            if (clamped_[i])
                for (double& v : p) v = std::clamp(v, 0.0, std::nextafter(1.0, 0.0));
        }
    }

private:
    const TrainConfig& config_;
    std::vector<NamedTensor> params_;
    std::vector<Tensor> first_, second_;
    std::vector<bool> frozen_, clamped_;
    std::size_t t_ = 0;
};

double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total)
{
    if (step < c.warmup_steps) return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    const double span = static_cast<double>(std::max<std::size_t>(1, total - c.warmup_steps));
    const double progress = static_cast<double>(step - c.warmup_steps) / span;
    return 0.5 * c.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

MacCount full_width_macs(const ModelConfig& mc)
{
    AssignmentVec a;
    a.experts.assign(mc.tokens(), mc.spec.experts - 1);
    return model_flops(a, mc.spec, false).total;
}

/// Epoch-wise reshuffled stream of training indices.
class Sampler {
public:
    Sampler(std::size_t size, std::mt19937_64& rng) : order_(size), rng_(rng)
    {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        pos_ = size;
    }

    std::size_t next()
    {
        if (pos_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64& rng_;
    std::size_t pos_;
};

std::vector<double> shifted(const ImageView& img, long dy, long dx)
{
    std::vector<double> out(img.pixels.size(), 0.0);
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width), c = static_cast<long>(img.channels);
    for (long y = 0; y < h; ++y) {
        const long sy = y - dy;
        if (sy < 0 || sy >= h) continue;
        for (long x = 0; x < w; ++x) {
            const long sx = x - dx;
            if (sx < 0 || sx >= w) continue;
            for (long k = 0; k < c; ++k) out[(y * w + x) * c + k] = img.pixels[(sy * w + sx) * c + k];
        }
    }
    return out;
}

struct StepContext {
    std::size_t step = 0;
    std::size_t image = 0;
    std::mt19937_64* router_rng = nullptr;
};

/// Builds one image's loss on the tape and returns it with the forward MACs spent.
using ImageLoss = std::function<std::pair<Var, MacCount>(Tape&, const ModelVars&, const ImageView&, std::size_t label,
                                                          const StepContext&)>;
/// Called once per step before its images, e.g. to draw the step's capacity.
using StepHook = std::function<void(std::size_t step)>;

TrainResult run_training(ModelParams& params, const Dataset& train, const TrainConfig& config, std::size_t total_steps,
                         const ImageLoss& image_loss, const StepHook& on_step)
{
    config.validate();
    train.validate();
    if (train.size() == 0) throw ConfigError("train: empty training set");
    const ModelConfig& mc = params.config;
    if (train.height != mc.image_height || train.width != mc.image_width || train.channels != mc.channels) {
        throw ConfigError("train: dataset image shape does not match the model");
    }

    auto sampling = rng_stream(config.seed, "sampling");
    auto router_rng = rng_stream(config.seed, "router");
    Sampler sampler(train.size(), sampling);
    std::uniform_int_distribution<long> shift(-static_cast<long>(config.augment_shift),
                                              static_cast<long>(config.augment_shift));

    Optimizer opt(config, params);
    ModelParams grads = zeros_like(params);
    const MacCount dense_per_image = full_width_macs(mc);

    TrainResult result;
    result.steps = total_steps;
    result.losses.reserve(total_steps);
    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
    for (std::size_t step = 0; step < total_steps; ++step) {
        if (on_step) on_step(step);
        double step_loss = 0.0;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const std::size_t idx = sampler.next();
            ImageView view = train.image(idx);
            std::vector<double> moved;
            if (config.augment_shift) {
                const long dy = shift(sampling), dx = shift(sampling);
                moved = shifted(view, dy, dx);
                view.pixels = moved;
            }
            Tape tape;
            const ModelVars vars = bind_parameters(tape, params, &grads);
            StepContext ctx{step, idx, &router_rng};
            Var loss;
            MacCount macs = 0;
            try {
                std::tie(loss, macs) = image_loss(tape, vars, view, train.labels[idx], ctx);
            } catch (const NumericError& e) {
                throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
            }
            const double value = loss.value()[0];
            if (!std::isfinite(value)) throw TrainingError("loss became non-finite at step " + std::to_string(step));
            step_loss += value;
            tape.backward(scale(loss, inv_batch));
            result.training_macs += macs;
            result.dense_macs += dense_per_image;
        }
        opt.step(grads, scheduled_lr(config, step, total_steps));
        for (auto& g : named_parameters(grads)) g.tensor->fill(0.0);
        result.losses.push_back(step_loss * inv_batch);
    }
    return result;
}

} // namespace

TrainResult mat_joint_pretrain(ModelParams& params, const Dataset& train, const TrainConfig& config)
{
    const ModelConfig& mc = params.config;
    const std::size_t experts = mc.spec.experts;
    std::vector<MacCount> per_expert(experts);
    for (std::size_t e = 0; e < experts; ++e) {
        AssignmentVec a;
        a.experts.assign(mc.tokens(), e);
        per_expert[e] = model_flops(a, mc.spec, false).total;
    }
    const MacCount macs = std::accumulate(per_expert.begin(), per_expert.end(), MacCount{0});

    auto image_loss = [&](Tape&, const ModelVars& vars, const ImageView& img, std::size_t label, const StepContext&) {
        Var total;
        for (std::size_t e = 0; e < experts; ++e) {
            ForwardPlan plan;
            plan.uniform_expert = e;
            Var ce = softmax_cross_entropy(model_forward(img, vars, mc, plan).logits, label);
            total = total.valid() ? add(total, ce) : ce;
        }
        return std::pair{total, macs};
    };
    return run_training(params, train, config, config.base_steps(train.size()), image_loss, {});
}

std::size_t isoflops_steps(const TrainConfig& config, const ModelConfig& model, std::size_t train_size)
{
    const std::size_t base = config.base_steps(train_size);
    if (!config.isoflops || config.dense) return base;
    CapacityCache cache(model.spec.experts, config.solver);
    const std::vector<double> caps =
        config.capacity_mode == CapacityMode::fixed ? std::vector<double>{config.capacity} : config.sampled_capacities;
    double mean_ratio = 0.0;
    for (double e_c : caps) {
        const auto report = predicted_flops(cache.get(e_c), model.tokens(), model.spec, true, model.router_layer);
        mean_ratio += static_cast<double>(report.total) / static_cast<double>(report.dense_total);
    }
    mean_ratio /= static_cast<double>(caps.size());
    return static_cast<std::size_t>(std::llround(static_cast<double>(base) / mean_ratio));
}

TrainResult mone_finetune(ModelParams& params, const Dataset& train, const TrainConfig& config)
{
    config.validate();
    const ModelConfig& mc = params.config;
    const std::size_t n = mc.tokens();
    CapacityCache cache(mc.spec.experts, config.solver);
    // Resolve every capacity up front so infeasible settings fail before training.
    if (!config.dense) {
        if (config.capacity_mode == CapacityMode::fixed) cache.get(config.capacity);
        else
            for (double e_c : config.sampled_capacities) cache.get(e_c);
    }

    auto capacity_rng = rng_stream(config.seed, "capacity");
    std::uniform_int_distribution<std::size_t> pick(0, config.sampled_capacities.size() - 1);
    const std::vector<double>* step_c = nullptr;
    auto on_step = [&](std::size_t) {
        if (config.dense) return;
        const double e_c = config.capacity_mode == CapacityMode::fixed ? config.capacity
                                                                        : config.sampled_capacities[pick(capacity_rng)];
        step_c = &cache.get(e_c);
    };

    const MacCount dense_macs = full_width_macs(mc);
    auto image_loss = [&](Tape&, const ModelVars& vars, const ImageView& img, std::size_t label,
                          const StepContext& ctx) {
        ForwardPlan plan;
        if (config.dense) {
            plan.uniform_expert = mc.spec.experts - 1;
            return std::pair{softmax_cross_entropy(model_forward(img, vars, mc, plan).logits, label), dense_macs};
        }
        plan.capacity = *step_c;
        plan.router = config.router;
        if (config.router == RouterKind::random) plan.random_seed = (*ctx.router_rng)();
        ForwardResult fr = model_forward(img, vars, mc, plan);
        const auto counts = fr.assignment.counts(mc.spec.experts);
        for (std::size_t j = 1; j < counts.size(); ++j) {
            if (counts[j] > static_cast<std::size_t>(std::floor((*step_c)[j] * static_cast<double>(n)))) {
                throw TrainingError("routing exceeded an expert's capacity");
            }
        }
        const MacCount macs = model_flops(fr.assignment, mc.spec, true, mc.router_layer).total;
        return std::pair{softmax_cross_entropy(fr.logits, label), macs};
    };
    return run_training(params, train, config, isoflops_steps(config, mc, train.size()), image_loss, on_step);
}

std::size_t evaluation_threads()
{
    if (const char* env = std::getenv("MONE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

EvalMetrics evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options)
{
    data.validate();
    const ModelConfig& mc = params.config;
    const std::size_t n = mc.tokens();
    EvalMetrics m;
    m.count = data.size();

    ForwardPlan base;
    if (options.uniform_expert) {
        if (*options.uniform_expert >= mc.spec.experts) throw ConfigError("eval: expert index out of range");
        base.uniform_expert = options.uniform_expert;
        AssignmentVec a;
        a.experts.assign(n, *options.uniform_expert);
        const auto report = model_flops(a, mc.spec, false);
        m.flop_ratio = m.flop_ratio_with_router = report.ratio();
        m.macs_per_image = report.total;
        m.capacity.assign(mc.spec.experts, 0.0);
        m.capacity[*options.uniform_expert] = 1.0;
    } else {
        try {
            m.capacity = solve_capacity(options.capacity, mc.spec.experts, options.solver).c;
        } catch (const InfeasibleError& e) {
            throw ConfigError(std::string("infeasible capacity: ") + e.what());
        }
        base.capacity = m.capacity;
        base.router = options.router;
        const auto layers = predicted_flops(m.capacity, n, mc.spec, false, mc.router_layer);
        const auto with_router = predicted_flops(m.capacity, n, mc.spec, true, mc.router_layer);
        m.flop_ratio = layers.ratio();
        m.flop_ratio_with_router = with_router.ratio();
        m.macs_per_image = with_router.total;
    }

    const std::size_t threads = std::clamp<std::size_t>(options.threads ? options.threads : evaluation_threads(), 1,
                                                        std::max<std::size_t>(1, data.size()));
    std::vector<char> correct(data.size(), 0), planted_full(data.size(), 0);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            Tape tape;
            const ModelVars vars = bind_parameters(tape, params);
            ForwardPlan plan = base;
            plan.random_seed = splitmix64(options.seed ^ splitmix64(i));
            const ForwardResult fr = model_forward(data.image(i), vars, mc, plan);
            const auto logits = fr.logits.value().data();
            const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            correct[i] = best == data.labels[i];
            if (!data.planted_token.empty()) {
                planted_full[i] = fr.assignment.experts[data.planted_token[i]] == mc.spec.experts - 1;
            }
        }
    };
    if (threads == 1) {
        work(0, data.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (data.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t b = t * chunk, e = std::min(data.size(), b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    const auto total = static_cast<double>(std::max<std::size_t>(1, data.size()));
    m.accuracy = static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / total;
    m.planted_to_largest = data.planted_token.empty()
                               ? std::numeric_limits<double>::quiet_NaN()
                               : static_cast<double>(std::count(planted_full.begin(), planted_full.end(), 1)) / total;
    return m;
}

std::vector<SweepRow> capacity_sweep(const ModelParams& params, const Dataset& data,
                                     const std::vector<double>& capacities, const EvalOptions& base,
                                     std::optional<double> training_capacity)
{
    std::vector<SweepRow> rows;
    for (double e_c : capacities) {
        EvalOptions opt = base;
        opt.uniform_expert.reset();
        opt.capacity = e_c;
        rows.push_back({e_c, evaluate(params, data, opt),
                        training_capacity && std::abs(*training_capacity - e_c) < 1e-9});
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows)
{
    std::ostringstream out;
    out << std::setprecision(10);
    out << "e_c,accuracy,flop_ratio,macs_per_image,training_point\n";
    for (const auto& r : rows) {
        out << r.capacity << ',' << r.metrics.accuracy << ',' << r.metrics.flop_ratio << ','
            << r.metrics.macs_per_image << ',' << (r.training_point ? 1 : 0) << '\n';
    }
    return out.str();
}

RouteMaps route_visualize(const ModelParams& params, const ImageView& image, double capacity,
                          const SolverOptions& solver)
{
    const ModelConfig& mc = params.config;
    ForwardPlan plan;
    try {
        plan.capacity = solve_capacity(capacity, mc.spec.experts, solver).c;
    } catch (const InfeasibleError& e) {
        throw ConfigError(std::string("infeasible capacity: ") + e.what());
    }
    Tape tape;
    const ModelVars vars = bind_parameters(tape, params);
    RouteMaps maps;
    maps.assignment = model_forward(image, vars, mc, plan).assignment;

    const std::size_t gh = mc.grid_height(), gw = mc.grid_width();
    const auto largest = mc.spec.experts - 1;
    maps.full_mask = {gw, gh, 1, {}};
    maps.expert_map = {gw, gh, static_cast<unsigned>(mc.spec.experts), {}};
    for (auto e : maps.assignment.experts) {
        maps.full_mask.values.push_back(e == largest ? 1 : 0);
        maps.expert_map.values.push_back(static_cast<std::uint8_t>(e + 1));
    }
    return maps;
}

} // namespace mone
