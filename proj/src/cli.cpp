#include "mone/cli.hpp"

#include "mone/checkpoint.hpp"
#include "mone/errors.hpp"
#include "mone/flops.hpp"
#include "mone/run_config.hpp"
#include "mone/selftest.hpp"
#include "mone/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace mone {

namespace {

namespace fs = std::filesystem;

struct Flags {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<double> ec;
    std::optional<std::size_t> experts;
    std::optional<double> beta;
    std::optional<double> delta;
    std::optional<std::size_t> router_layer;
    std::optional<std::string> router;
    bool isoflops = false;
    std::optional<std::string> dataset;
    std::string checkpoint;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> batch;
    std::optional<double> lr;
    bool sampled = false;
    bool dense = false;
    bool from_scratch = false;
    std::optional<std::size_t> expert;
    std::vector<double> capacities;
    std::size_t images = 4;
};

void add_common(CLI::App* app, Flags& f)
{
    app->add_option("--config", f.config, "JSON run configuration (flags override it)");
    app->add_option("--out", f.out, "Output directory");
    app->add_option("--seed", f.seed, "Seed for data, initialization, sampling and the random router");
    app->add_option("--ec", f.ec, "Effective capacity e_c in [2^-(E-1), 1]");
    app->add_option("--experts", f.experts, "Number of nested experts E");
    app->add_option("--beta", f.beta, "Entropy weight of the capacity solver");
    app->add_option("--delta", f.delta, "Base of the capacity solver's expert preference");
    app->add_option("--router-layer", f.router_layer, "1-based layer feeding the router");
    app->add_option("--router", f.router, "Router kind")->check(CLI::IsMember({"learned", "random"}));
    app->add_flag("--isoflops", f.isoflops, "Stretch training to the full model's training MACs");
    app->add_option("--dataset", f.dataset, "synth | idx:<images>,<labels>[,<test-images>,<test-labels>]");
}

void add_training(CLI::App* app, Flags& f)
{
    app->add_option("--epochs", f.epochs, "Training epochs");
    app->add_option("--steps", f.steps, "Training steps (overrides epochs)");
    app->add_option("--batch", f.batch, "Batch size");
    app->add_option("--lr", f.lr, "Peak learning rate");
}

RunConfig resolve(const Flags& f)
{
    RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
    if (f.out) c.output_dir = *f.out;
    if (f.seed) c.seed = *f.seed;
    if (f.ec) c.train.capacity = *f.ec;
    if (f.experts) c.model.spec.experts = *f.experts;
    if (f.beta) c.train.solver.beta = *f.beta;
    if (f.delta) c.train.solver.delta = *f.delta;
    if (f.router_layer) c.model.router_layer = *f.router_layer;
    if (f.router) c.train.router = *f.router == "random" ? RouterKind::random : RouterKind::learned;
    if (f.isoflops) c.train.isoflops = true;
    if (f.dataset) apply_dataset_flag(c.dataset, *f.dataset);
    if (f.epochs) c.train.epochs = *f.epochs;
    if (f.steps) c.train.steps = *f.steps;
    if (f.batch) c.train.batch_size = *f.batch;
    if (f.lr) c.train.learning_rate = *f.lr;
    if (f.sampled) c.train.capacity_mode = CapacityMode::sampled;
    if (f.dense) c.train.dense = true;
    if (f.from_scratch) c.from_scratch = true;
    if (!f.capacities.empty()) c.sweep_capacities = f.capacities;
    c.train.seed = c.seed;
    c.validate();
    return c;
}

fs::path prepare_output(const RunConfig& c)
{
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);
    std::ofstream snap(dir / "run_config.json", std::ios::trunc);
    snap << std::setw(2) << run_config_to_json(c) << '\n';
    if (!snap) throw ConfigError("cannot write run_config.json under " + dir.string());
    return dir;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw ConfigError("cannot write " + path.string());
}

std::string losses_csv(const TrainResult& r)
{
    std::ostringstream s;
    s << std::setprecision(10) << "step,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) s << i + 1 << ',' << r.losses[i] << '\n';
    return s.str();
}

const char* router_label(RouterKind k) { return k == RouterKind::learned ? "learned" : "random"; }

std::string eval_header() { return "router,e_c,expert,accuracy,flop_ratio,flop_ratio_with_router,macs_per_image,planted_to_largest\n"; }

std::string eval_row(const char* router, double e_c, std::optional<std::size_t> expert, const EvalMetrics& m)
{
    std::ostringstream s;
    s << std::setprecision(10) << router << ',' << e_c << ',';
    if (expert) s << *expert + 1;
    s << ',' << m.accuracy << ',' << m.flop_ratio << ',' << m.flop_ratio_with_router << ',' << m.macs_per_image << ','
      << m.planted_to_largest << '\n';
    return s.str();
}

/// Checkpoint architecture wins; routing placement may still be overridden.
ModelParams load_params(const Flags& f, const RunConfig& c, nlohmann::json* metadata = nullptr)
{
    if (f.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    Checkpoint ck = load_checkpoint(f.checkpoint);
    if (f.router_layer) {
        ck.params.config.router_layer = c.model.router_layer;
        ck.params.config.validate();
    }
    if (metadata) *metadata = ck.metadata;
    return std::move(ck.params);
}

int cmd_pretrain(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const fs::path dir = prepare_output(c);
    const DatasetSplit data = load_dataset(c.dataset, c.model, c.seed);
    ModelParams params = init_model(c.model, rng_stream(c.seed, "init")());
    const TrainResult r = mat_joint_pretrain(params, data.train, c.train);
    save_checkpoint(dir / "pretrain.ckpt", params, {{"stage", "pretrain"}, {"seed", c.seed}, {"steps", r.steps}});
    write_text(dir / "pretrain_loss.csv", losses_csv(r));
    std::string csv = eval_header();
    for (std::size_t e = 0; e < c.model.spec.experts; ++e) {
        EvalOptions opt;
        opt.uniform_expert = e;
        opt.seed = c.seed;
        csv += eval_row("none", 1.0, e, evaluate(params, data.test, opt));
    }
    write_text(dir / "pretrain_eval.csv", csv);
    out << csv;
    return 0;
}

int cmd_finetune(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const fs::path dir = prepare_output(c);
    const DatasetSplit data = load_dataset(c.dataset, c.model, c.seed);
    ModelParams params = c.from_scratch ? init_model(c.model, rng_stream(c.seed, "init")()) : load_params(f, c);
    const TrainResult r = mone_finetune(params, data.train, c.train);
    nlohmann::json meta = {{"stage", "finetune"}, {"seed", c.seed}, {"steps", r.steps}, {"dense", c.train.dense},
                           {"capacity_mode", c.train.capacity_mode == CapacityMode::fixed ? "fixed" : "sampled"}};
    if (!c.train.dense && c.train.capacity_mode == CapacityMode::fixed) meta["capacity"] = c.train.capacity;
    save_checkpoint(dir / "finetune.ckpt", params, meta);
    write_text(dir / "finetune_loss.csv", losses_csv(r));

    std::string csv = eval_header();
    EvalOptions opt;
    opt.seed = c.seed;
    opt.solver = c.train.solver;
    if (c.train.dense) {
        opt.uniform_expert = c.model.spec.experts - 1;
        csv += eval_row("none", 1.0, opt.uniform_expert, evaluate(params, data.test, opt));
    } else {
        opt.capacity = c.train.capacity_mode == CapacityMode::fixed ? c.train.capacity : 1.0;
        for (RouterKind k : {RouterKind::learned, RouterKind::random}) {
            opt.router = k;
            csv += eval_row(router_label(k), opt.capacity, std::nullopt, evaluate(params, data.test, opt));
        }
    }
    write_text(dir / "finetune_eval.csv", csv);
    std::ostringstream macs;
    macs << "training_macs,dense_macs,ratio\n"
         << r.training_macs << ',' << r.dense_macs << ','
         << std::setprecision(10) << static_cast<double>(r.training_macs) / static_cast<double>(r.dense_macs) << '\n';
    write_text(dir / "finetune_macs.csv", macs.str());
    out << csv;
    return 0;
}

int cmd_eval(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const fs::path dir = prepare_output(c);
    const ModelParams params = load_params(f, c);
    const DatasetSplit data = load_dataset(c.dataset, params.config, c.seed);
    EvalOptions opt;
    opt.seed = c.seed;
    opt.solver = c.train.solver;
    opt.router = c.train.router;
    opt.capacity = c.train.capacity;
    std::string csv = eval_header();
    if (f.expert) {
        if (*f.expert == 0 || *f.expert > params.config.spec.experts) throw ConfigError("--expert is 1-based and at most E");
        opt.uniform_expert = *f.expert - 1;
        csv += eval_row("none", 1.0, opt.uniform_expert, evaluate(params, data.test, opt));
    } else {
        csv += eval_row(router_label(opt.router), opt.capacity, std::nullopt, evaluate(params, data.test, opt));
    }
    write_text(dir / "eval.csv", csv);
    out << csv;
    return 0;
}

int cmd_sweep(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const fs::path dir = prepare_output(c);
    nlohmann::json meta;
    const ModelParams params = load_params(f, c, &meta);
    const DatasetSplit data = load_dataset(c.dataset, params.config, c.seed);
    EvalOptions opt;
    opt.seed = c.seed;
    opt.solver = c.train.solver;
    opt.router = c.train.router;
    std::optional<double> trained;
    if (meta.contains("capacity") && meta["capacity"].is_number()) trained = meta["capacity"].get<double>();
    const std::string csv = sweep_csv(capacity_sweep(params, data.test, c.sweep_capacities, opt, trained));
    write_text(dir / "sweep.csv", csv);
    out << csv;
    return 0;
}

int cmd_solve_capacity(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const CapacityDist d = solve_capacity(c.train.capacity, c.model.spec.experts, c.train.solver);
    std::ostringstream s;
    s << std::setprecision(12);
    for (std::size_t i = 0; i < d.c.size(); ++i) s << 'c' << i + 1 << ',';
    s << "e_c\n";
    for (double v : d.c) s << v << ',';
    s << d.effective_capacity << '\n';
    if (f.out) write_text(prepare_output(c) / "capacity.csv", s.str());
    out << s.str();
    return 0;
}

int cmd_flops(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const CapacityDist d = solve_capacity(c.train.capacity, c.model.spec.experts, c.train.solver);
    const std::string csv =
        predicted_flops(d.c, c.model.tokens(), c.model.spec, true, c.model.router_layer).to_csv();
    if (f.out) write_text(prepare_output(c) / "flops.csv", csv);
    out << csv;
    return 0;
}

int cmd_route_demo(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    const fs::path dir = prepare_output(c);
    const ModelParams params = load_params(f, c);
    const DatasetSplit data = load_dataset(c.dataset, params.config, c.seed);
    const std::size_t count = std::min(f.images, data.test.size());
    std::ostringstream csv;
    csv << "image,label,planted_token,planted_expert,full_tokens,mask,experts\n";
    for (std::size_t i = 0; i < count; ++i) {
        const RouteMaps maps = route_visualize(params, data.test.image(i), c.train.capacity, c.train.solver);
        const std::string mask = "route_" + std::to_string(i) + "_full.pgm";
        const std::string experts = "route_" + std::to_string(i) + "_experts.pgm";
        write_pgm(dir / mask, maps.full_mask);
        write_pgm(dir / experts, maps.expert_map);
        std::size_t full = 0;
        for (auto v : maps.full_mask.values) full += v;
        csv << i << ',' << data.test.labels[i] << ',';
        if (!data.test.planted_token.empty()) {
            csv << data.test.planted_token[i] + 1 << ',' << maps.assignment[data.test.planted_token[i]] + 1;
        } else {
            csv << ',';
        }
        csv << ',' << full << ',' << mask << ',' << experts << '\n';
    }
    write_text(dir / "route_demo.csv", csv.str());
    out << csv.str();
    return 0;
}

int cmd_selftest(const Flags& f, std::ostream& out)
{
    const RunConfig c = resolve(f);
    return report_selftest(run_selftest(c.seed), out) ? 0 : 2;
}

} // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Mixture-of-nested-experts vision transformer toolkit", "mone"};
    app.require_subcommand(1);
    Flags f;

    auto* pretrain = app.add_subcommand("pretrain", "Joint training of every nested granularity");
    add_common(pretrain, f);
    add_training(pretrain, f);

    auto* finetune = app.add_subcommand("finetune", "Routed finetuning from a nested checkpoint");
    add_common(finetune, f);
    add_training(finetune, f);
    finetune->add_option("--checkpoint", f.checkpoint, "Nested checkpoint to start from");
    finetune->add_flag("--sampled", f.sampled, "Draw e_c per step from the sampled capacity set");
    finetune->add_flag("--dense", f.dense, "Finetune every token at full width without a router");
    finetune->add_flag("--from-scratch", f.from_scratch, "Start from a fresh initialization");

    auto* eval = app.add_subcommand("eval", "Accuracy and FLOP ratio on the test split");
    add_common(eval, f);
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate")->required();
    eval->add_option("--expert", f.expert, "Run every token at this 1-based expert instead of routing");

    auto* sweep = app.add_subcommand("sweep", "Accuracy and FLOPs over a list of capacities");
    add_common(sweep, f);
    sweep->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate")->required();
    sweep->add_option("--capacities", f.capacities, "Capacities to evaluate")->delimiter(',');

    auto* solve = app.add_subcommand("solve-capacity", "Capacity distribution for --ec as CSV");
    add_common(solve, f);

    auto* flops = app.add_subcommand("flops", "Per-layer MAC report at --ec as CSV");
    add_common(flops, f);

    auto* demo = app.add_subcommand("route-demo", "PGM maps of tokens routed to each expert");
    add_common(demo, f);
    demo->add_option("--checkpoint", f.checkpoint, "Checkpoint to visualize")->required();
    demo->add_option("--images", f.images, "Number of test images to render");

    auto* self = app.add_subcommand("selftest", "Routing, solver, slicing and gradient property suites");
    add_common(self, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        err << app.help();
        return 1;
    }

    try {
        if (*pretrain) return cmd_pretrain(f, out);
        if (*finetune) return cmd_finetune(f, out);
        if (*eval) return cmd_eval(f, out);
        if (*sweep) return cmd_sweep(f, out);
        if (*solve) return cmd_solve_capacity(f, out);
        if (*flops) return cmd_flops(f, out);
        if (*demo) return cmd_route_demo(f, out);
        if (*self) return cmd_selftest(f, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const InfeasibleError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const FormatError& e) {
        err << "input error: " << e.what() << '\n';
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

int cli_main(int argc, const char* const* argv)
{
    return cli_main(argc, argv, std::cout, std::cerr);
}

} // namespace mone
