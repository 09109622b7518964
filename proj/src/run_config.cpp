#include "mone/run_config.hpp"

#include "mone/checkpoint.hpp"
#include "mone/errors.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mone {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
std::string router_name(RouterKind k) { return k == RouterKind::learned ? "learned" : "random"; }

} // namespace

void RunConfig::validate() const
{
    model.validate();
    train.validate();
    for (double e_c : sweep_capacities) {
        if (!(e_c > 0.0) || e_c > 1.0) throw ConfigError("routing.sweep_capacities entries must lie in (0, 1]");
    }
    if (dataset.source != "synth" && dataset.source != "idx") throw ConfigError("dataset.source must be 'synth' or 'idx'");
    if (dataset.source == "idx" && (dataset.train_images.empty() || dataset.train_labels.empty())) {
        throw ConfigError("dataset: idx source needs train_images and train_labels");
    }
    if (dataset.test_images.empty() != dataset.test_labels.empty()) {
        throw ConfigError("dataset: test_images and test_labels go together");
    }
    if (dataset.source == "synth" && model.channels != 1) throw ConfigError("dataset: synthetic images have one channel");
    if (dataset.train_count == 0) throw ConfigError("dataset.train_count must be positive");
}

RunConfig run_config_from_json(const json& j)
{
    reject_unknown(j, {"seed", "output_dir", "model", "train", "routing", "dataset"}, "config");
    RunConfig c;
    read(j, "seed", c.seed, "config");
    read(j, "output_dir", c.output_dir, "config");
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));

    if (j.contains("train")) {
        const json& t = j.at("train");
        const std::string w = "train";
        reject_unknown(t, {"optimizer", "learning_rate", "momentum", "weight_decay", "grad_clip", "warmup_steps",
                           "epochs", "batch_size", "steps", "isoflops", "dense", "freeze_alpha", "clamp_alpha", "augment_shift",
                           "from_scratch"},
                       w);
        std::string opt = optimizer_name(c.train.optimizer);
        read(t, "optimizer", opt, w);
        if (opt == "sgd") c.train.optimizer = OptimizerKind::sgd;
        else if (opt == "adam") c.train.optimizer = OptimizerKind::adam;
        else throw ConfigError("train.optimizer must be 'sgd' or 'adam'");
        read(t, "learning_rate", c.train.learning_rate, w);
        read(t, "momentum", c.train.momentum, w);
        read(t, "weight_decay", c.train.weight_decay, w);
        read(t, "grad_clip", c.train.grad_clip, w);
        read(t, "warmup_steps", c.train.warmup_steps, w);
        read(t, "epochs", c.train.epochs, w);
        read(t, "batch_size", c.train.batch_size, w);
        read(t, "steps", c.train.steps, w);
        read(t, "isoflops", c.train.isoflops, w);
        read(t, "dense", c.train.dense, w);
        read(t, "freeze_alpha", c.train.freeze_alpha, w);
        read(t, "clamp_alpha", c.train.clamp_alpha, w);
        read(t, "augment_shift", c.train.augment_shift, w);
        read(t, "from_scratch", c.from_scratch, w);
    }

    if (j.contains("routing")) {
        const json& r = j.at("routing");
        const std::string w = "routing";
        reject_unknown(r, {"capacity", "capacity_mode", "sampled_capacities", "beta", "delta", "favor_large", "router",
                           "sweep_capacities"},
                       w);
        read(r, "capacity", c.train.capacity, w);
        std::string mode = "fixed";
        read(r, "capacity_mode", mode, w);
        if (mode == "fixed") c.train.capacity_mode = CapacityMode::fixed;
        else if (mode == "sampled") c.train.capacity_mode = CapacityMode::sampled;
        else throw ConfigError("routing.capacity_mode must be 'fixed' or 'sampled'");
        read(r, "sampled_capacities", c.train.sampled_capacities, w);
        read(r, "beta", c.train.solver.beta, w);
        read(r, "delta", c.train.solver.delta, w);
        read(r, "favor_large", c.train.solver.favor_large, w);
        std::string router = "learned";
        read(r, "router", router, w);
        if (router == "learned") c.train.router = RouterKind::learned;
        else if (router == "random") c.train.router = RouterKind::random;
        else throw ConfigError("routing.router must be 'learned' or 'random'");
        read(r, "sweep_capacities", c.sweep_capacities, w);
    }

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        const std::string w = "dataset";
        reject_unknown(d, {"source", "train_count", "test_count", "noise", "amplitude", "glyph_seed", "train_images",
                           "train_labels", "test_images", "test_labels"},
                       w);
        read(d, "source", c.dataset.source, w);
        read(d, "train_count", c.dataset.train_count, w);
        read(d, "test_count", c.dataset.test_count, w);
        read(d, "noise", c.dataset.synth.noise, w);
        read(d, "amplitude", c.dataset.synth.amplitude, w);
        read(d, "glyph_seed", c.dataset.synth.glyph_seed, w);
        read(d, "train_images", c.dataset.train_images, w);
        read(d, "train_labels", c.dataset.train_labels, w);
        read(d, "test_images", c.dataset.test_images, w);
        read(d, "test_labels", c.dataset.test_labels, w);
    }
    c.validate();
    return c;
}

json run_config_to_json(const RunConfig& c)
{
    json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["model"] = model_config_to_json(c.model);
    const TrainConfig& t = c.train;
    j["train"] = {
        {"optimizer", optimizer_name(t.optimizer)},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip},
        {"warmup_steps", t.warmup_steps},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"steps", t.steps},
        {"isoflops", t.isoflops},
        {"dense", t.dense},
        {"freeze_alpha", t.freeze_alpha},
        {"clamp_alpha", t.clamp_alpha},
        {"augment_shift", t.augment_shift},
        {"from_scratch", c.from_scratch},
    };
    j["routing"] = {
        {"capacity", t.capacity},
        {"capacity_mode", t.capacity_mode == CapacityMode::fixed ? "fixed" : "sampled"},
        {"sampled_capacities", t.sampled_capacities},
        {"beta", t.solver.beta},
        {"delta", t.solver.delta},
        {"favor_large", t.solver.favor_large},
        {"router", router_name(t.router)},
        {"sweep_capacities", c.sweep_capacities},
    };
    j["dataset"] = {
        {"source", c.dataset.source},
        {"train_count", c.dataset.train_count},
        {"test_count", c.dataset.test_count},
        {"noise", c.dataset.synth.noise},
        {"amplitude", c.dataset.synth.amplitude},
        {"glyph_seed", c.dataset.synth.glyph_seed},
        {"train_images", c.dataset.train_images},
        {"train_labels", c.dataset.train_labels},
        {"test_images", c.dataset.test_images},
        {"test_labels", c.dataset.test_labels},
    };
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
    return run_config_from_json(j);
}

void apply_dataset_flag(DatasetConfig& dataset, const std::string& flag)
{
    if (flag == "synth") {
        dataset.source = "synth";
        return;
    }
    if (flag.rfind("idx:", 0) != 0) throw ConfigError("--dataset must be 'synth' or 'idx:<paths>'");
    std::vector<std::string> parts;
    std::stringstream ss(flag.substr(4));
    for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
    if (parts.size() != 2 && parts.size() != 4) {
        throw ConfigError("--dataset idx: expects train images,labels and optionally test images,labels");
    }
    dataset.source = "idx";
    dataset.train_images = parts[0];
    dataset.train_labels = parts[1];
    dataset.test_images = parts.size() == 4 ? parts[2] : "";
    dataset.test_labels = parts.size() == 4 ? parts[3] : "";
}

DatasetSplit load_dataset(const DatasetConfig& dataset, const ModelConfig& model, std::uint64_t seed)
{
    if (dataset.source == "synth") {
        auto rng = rng_stream(seed, "data");
        const std::uint64_t train_seed = rng(), test_seed = rng();
        PlantedPatchOptions synth = dataset.synth;
        synth.patch = model.patch;
        return {synth_planted_patch(dataset.train_count, model.classes, model.image_height, model.image_width,
                                    train_seed, synth),
                synth_planted_patch(dataset.test_count, model.classes, model.image_height, model.image_width,
                                    test_seed, synth)};
    }
    Dataset train = load_idx(dataset.train_images, dataset.train_labels);
    DatasetSplit split;
    if (!dataset.test_images.empty()) {
        split = {std::move(train), load_idx(dataset.test_images, dataset.test_labels)};
    } else {
        split = split_dataset(train, dataset.test_count, seed);
    }
    for (Dataset* d : {&split.train, &split.test}) {
        d->classes = model.classes;
        if (d->height != model.image_height || d->width != model.image_width) {
            throw ConfigError("dataset: IDX images do not match model.image_height/image_width");
        }
        d->validate();
    }
    return split;
}

} // namespace mone
