#include "mone/errors.hpp"
#include "mone/flops.hpp"
#include "mone/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace mone;

namespace {

ModelConfig tiny_model()
{
    ModelConfig cfg;
    cfg.spec = {16, 4, 2, 2};
    cfg.image_height = cfg.image_width = 16;
    cfg.patch = 4;
    cfg.classes = 4;
    return cfg;
}

Dataset tiny_data(std::size_t count, std::uint64_t seed)
{
    PlantedPatchOptions opts;
    opts.patch = 4;
    return synth_planted_patch(count, 4, 16, 16, seed, opts);
}

TrainConfig tiny_train(std::size_t steps)
{
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = 8;
    tc.seed = 3;
    return tc;
}

bool same_params(ModelParams& a, ModelParams& b)
{
    const auto x = named_parameters(a), y = named_parameters(b);
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].tensor->values() != y[i].tensor->values()) return false;
    return true;
}

} // namespace

TEST(Pretrain, SingleSmallStepDecreasesSummedLoss)
{
    const Dataset data = tiny_data(32, 1);
    ModelParams p = init_model(tiny_model(), 1);
    const auto summed_loss = [&] {
        double total = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i)
            for (std::size_t e = 0; e < 4; ++e) {
                ForwardPlan plan;
                plan.uniform_expert = e;
                Tape tape;
                total += softmax_cross_entropy(model_forward(data.image(i), bind_parameters(tape, p), p.config, plan).logits,
                                               data.labels[i])
                             .value()[0];
            }
        return total;
    };
    const double l0 = summed_loss();
    TrainConfig step = tiny_train(1);
    step.optimizer = OptimizerKind::sgd;
    step.batch_size = data.size();
    step.learning_rate = 1e-3;
    step.momentum = 0.0;
    mat_joint_pretrain(p, data, step);
    EXPECT_LT(summed_loss(), l0);
}

TEST(Pretrain, BitwiseReproducible)
{
    const Dataset data = tiny_data(64, 2);
    ModelParams a = init_model(tiny_model(), 5), b = init_model(tiny_model(), 5);
    const auto ra = mat_joint_pretrain(a, data, tiny_train(6));
    const auto rb = mat_joint_pretrain(b, data, tiny_train(6));
    EXPECT_EQ(ra.losses, rb.losses);
    EXPECT_TRUE(same_params(a, b));
    TrainConfig sampled = tiny_train(6);
    sampled.capacity_mode = CapacityMode::sampled;
    const auto fa = mone_finetune(a, data, sampled), fb = mone_finetune(b, data, sampled);
    EXPECT_EQ(fa.losses, fb.losses);
    EXPECT_TRUE(same_params(a, b));
}

TEST(Pretrain, DivergenceIsTrainingError)
{
    const Dataset data = tiny_data(32, 3);
    ModelParams p = init_model(tiny_model(), 3);
    TrainConfig tc = tiny_train(20);
    tc.optimizer = OptimizerKind::sgd;
    tc.learning_rate = 1e12;
    tc.grad_clip = 0.0;
    EXPECT_THROW(mat_joint_pretrain(p, data, tc), TrainingError);
}

TEST(Pretrain, NestedSubmodelRunsWithoutLargerWeights)
{
    const Dataset data = tiny_data(32, 4);
    ModelParams p = init_model(tiny_model(), 4);
    mat_joint_pretrain(p, data, tiny_train(4));
    EvalOptions small;
    small.uniform_expert = 0;
    const double before = evaluate(p, data, small).accuracy;
    // Scramble everything the smallest granularity never reads; its predictions must not change.
    for (auto& b : p.blocks)
        for (Tensor* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_ff_in, &b.w_ff_out})
            for (std::size_t r = 4; r < w->rows(); ++r)
                for (std::size_t c = 0; c < w->cols(); ++c) (*w)(r, c) = 1e3;
    EXPECT_EQ(evaluate(p, data, small).accuracy, before);
}

TEST(Finetune, TrainingMacsFollowEprCountsEveryStep)
{
    const Dataset data = tiny_data(64, 5);
    ModelParams p = init_model(tiny_model(), 5);
    TrainConfig tc = tiny_train(5);
    tc.capacity = 0.4;
    const auto r = mone_finetune(p, data, tc);
    const auto predicted = predicted_flops(solve_capacity(0.4, 4).c, 16, p.config.spec, true);
    EXPECT_EQ(r.training_macs, 5 * 8 * predicted.total);
    EXPECT_EQ(r.dense_macs, 5 * 8 * predicted.dense_total);
}

TEST(Finetune, IsoflopsMatchesDenseTrainingCost)
{
    const Dataset data = tiny_data(64, 6);
    for (double e_c : {0.3, 0.6}) {
        ModelParams dense = init_model(tiny_model(), 6), routed = dense;
        TrainConfig dc = tiny_train(40);
        dc.dense = true;
        const auto rd = mone_finetune(dense, data, dc);
        TrainConfig rc = tiny_train(40);
        rc.capacity = e_c;
        rc.isoflops = true;
        const auto rr = mone_finetune(routed, data, rc);
        EXPECT_GT(rr.steps, rd.steps);
        const double rel = std::abs(static_cast<double>(rr.training_macs) - static_cast<double>(rd.training_macs)) /
                           static_cast<double>(rd.training_macs);
        EXPECT_LT(rel, 0.02) << "e_c=" << e_c;
        EXPECT_EQ(isoflops_steps(rc, routed.config, data.size()), rr.steps);
    }
}

TEST(Finetune, SampledIsoflopsUsesMeanRatio)
{
    const Dataset data = tiny_data(64, 7);
    ModelParams p = init_model(tiny_model(), 7);
    TrainConfig tc = tiny_train(30);
    tc.capacity_mode = CapacityMode::sampled;
    tc.isoflops = true;
    double mean = 0.0;
    for (double e_c : tc.sampled_capacities) mean += predicted_flops(solve_capacity(e_c, 4).c, 16, p.config.spec, true).ratio();
    mean /= static_cast<double>(tc.sampled_capacities.size());
    EXPECT_EQ(isoflops_steps(tc, p.config, data.size()), static_cast<std::size_t>(std::llround(30 / mean)));
}

TEST(Finetune, FullCapacityWithFrozenAlphaMatchesDenseTrajectory)
{
    const Dataset data = tiny_data(64, 8);
    ModelParams base = init_model(tiny_model(), 8);
    mat_joint_pretrain(base, data, tiny_train(3));
    ModelParams routed = base, dense = base;
    TrainConfig rc = tiny_train(10);
    rc.capacity = 1.0;
    rc.freeze_alpha = true;
    TrainConfig dc = tiny_train(10);
    dc.dense = true;
    const auto rr = mone_finetune(routed, data, rc), rd = mone_finetune(dense, data, dc);
    ASSERT_EQ(rr.losses.size(), rd.losses.size());
    for (std::size_t i = 0; i < rr.losses.size(); ++i) EXPECT_NEAR(rr.losses[i], rd.losses[i], 1e-12);
    for (auto& b : routed.blocks) EXPECT_EQ(b.alpha[0], 0.0);
}

TEST(Finetune, SampledCapacitiesStayFinite)
{
    const Dataset data = tiny_data(64, 9);
    ModelParams p = init_model(tiny_model(), 9);
    TrainConfig tc = tiny_train(30);
    tc.capacity_mode = CapacityMode::sampled;
    const auto r = mone_finetune(p, data, tc);
    for (double l : r.losses) EXPECT_TRUE(std::isfinite(l));
    for (const auto& [name, t] : named_parameters(std::as_const(p))) EXPECT_TRUE(t->all_finite()) << name;
}

TEST(Finetune, RandomRouterTrains)
{
    const Dataset data = tiny_data(64, 10);
    ModelParams p = init_model(tiny_model(), 10);
    TrainConfig tc = tiny_train(5);
    tc.router = RouterKind::random;
    EXPECT_EQ(mone_finetune(p, data, tc).losses.size(), 5u);
}

TEST(Finetune, AlphaStaysInUnitInterval)
{
    const Dataset data = tiny_data(64, 12);
    TrainConfig tc = tiny_train(20);
    tc.learning_rate = 0.5;
    tc.capacity = 0.4;
    bool escaped = false;
    for (bool clamp : {true, false}) {
        ModelParams p = init_model(tiny_model(), 12);
        tc.clamp_alpha = clamp;
        mone_finetune(p, data, tc);
        for (const auto& b : p.blocks) {
            const bool inside = b.alpha[0] >= 0.0 && b.alpha[0] < 1.0;
            if (clamp) EXPECT_TRUE(inside) << b.alpha[0];
            escaped = escaped || !inside;
        }
    }
    EXPECT_TRUE(escaped) << "the unclamped run should leave [0, 1) at this learning rate";
}

TEST(Finetune, InfeasibleCapacityIsConfigError)
{
    const Dataset data = tiny_data(16, 11);
    ModelParams p = init_model(tiny_model(), 11);
    TrainConfig tc = tiny_train(2);
    tc.capacity = 0.05;
    EXPECT_THROW(mone_finetune(p, data, tc), ConfigError);
    tc.capacity_mode = CapacityMode::sampled;
    tc.sampled_capacities = {0.5, 0.1};
    EXPECT_THROW(mone_finetune(p, data, tc), ConfigError);
}

TEST(Evaluate, FlopRatioMatchesPredictionAndMeasurement)
{
    const Dataset data = tiny_data(20, 12);
    const ModelParams p = init_model(tiny_model(), 12);
    for (double e_c : {0.2, 0.5, 0.8}) {
        EvalOptions eo;
        eo.capacity = e_c;
        const auto m = evaluate(p, data, eo);
        const auto c = solve_capacity(e_c, 4).c;
        EXPECT_EQ(m.flop_ratio, predicted_flops(c, 16, p.config.spec, false).ratio());
        EXPECT_EQ(m.flop_ratio_with_router, predicted_flops(c, 16, p.config.spec, true).ratio());
        EXPECT_EQ(m.capacity, c);
    }
    EvalOptions full;
    EXPECT_EQ(evaluate(p, data, full).flop_ratio, 1.0);
}

TEST(Evaluate, DeterministicAcrossThreadCounts)
{
    const Dataset data = tiny_data(40, 13);
    ModelParams p = init_model(tiny_model(), 13);
    mat_joint_pretrain(p, data, tiny_train(3));
    for (RouterKind router : {RouterKind::learned, RouterKind::random}) {
        EvalOptions a;
        a.capacity = 0.4;
        a.router = router;
        a.seed = 9;
        a.threads = 1;
        EvalOptions b = a;
        b.threads = 3;
        const auto ma = evaluate(p, data, a), mb = evaluate(p, data, b);
        EXPECT_EQ(ma.accuracy, mb.accuracy);
        EXPECT_EQ(ma.planted_to_largest, mb.planted_to_largest);
    }
}

TEST(Evaluate, LaterRouterRaisesFlopRatio)
{
    const Dataset data = tiny_data(8, 14);
    double prev = 0.0;
    for (std::size_t layer : {1, 2}) {
        ModelConfig cfg = tiny_model();
        cfg.router_layer = layer;
        EvalOptions eo;
        eo.capacity = 0.4;
        const double r = evaluate(init_model(cfg, 14), data, eo).flop_ratio;
        EXPECT_GT(r, prev);
        prev = r;
    }
}

TEST(Sweep, RowsAndTrainingPoint)
{
    const Dataset data = tiny_data(20, 15);
    const ModelParams p = init_model(tiny_model(), 15);
    const std::vector<double> caps{0.2, 0.4, 0.6, 0.8};
    const auto rows = capacity_sweep(p, data, caps, {}, 0.6);
    ASSERT_EQ(rows.size(), caps.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].capacity, caps[i]);
        EXPECT_EQ(rows[i].training_point, caps[i] == 0.6);
    }
    std::istringstream csv(sweep_csv(rows));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "e_c,accuracy,flop_ratio,macs_per_image,training_point");
    std::size_t n = 0;
    while (std::getline(csv, line)) ++n;
    EXPECT_EQ(n, caps.size());
    EXPECT_EQ(sweep_csv(rows), sweep_csv(capacity_sweep(p, data, caps, {}, 0.6)));
}

TEST(RouteVisualize, ExtremeCapacitiesGiveConstantMasks)
{
    const Dataset data = tiny_data(3, 16);
    const ModelParams p = init_model(tiny_model(), 16);
    const auto full = route_visualize(p, data.image(0), 1.0);
    EXPECT_EQ(full.full_mask.width, 4u);
    EXPECT_EQ(full.full_mask.height, 4u);
    EXPECT_EQ(full.full_mask.maxval, 1u);
    for (auto v : full.full_mask.values) EXPECT_EQ(v, 1);
    for (auto v : full.expert_map.values) EXPECT_EQ(v, 4);
    const auto low = route_visualize(p, data.image(1), min_effective_capacity(4));
    for (auto v : low.full_mask.values) EXPECT_EQ(v, 0);
    for (auto v : low.expert_map.values) EXPECT_EQ(v, 1);
    EXPECT_EQ(low.expert_map.maxval, 4u);
}

TEST(TrainConfig, RejectsInvalidSettings)
{
    TrainConfig tc;
    tc.batch_size = 0;
    EXPECT_THROW(tc.validate(), ConfigError);
    tc = {};
    tc.learning_rate = -1.0;
    EXPECT_THROW(tc.validate(), ConfigError);
    tc = {};
    tc.sampled_capacities.clear();
    tc.capacity_mode = CapacityMode::sampled;
    EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(RngStreams, PurposesAreIndependent)
{
    auto a = rng_stream(1, "init"), b = rng_stream(1, "sampling"), c = rng_stream(1, "init");
    const auto x = a();
    EXPECT_NE(x, b());
    EXPECT_EQ(x, c());
}
