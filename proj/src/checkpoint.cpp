#include "mone/checkpoint.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace mone {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'N', 'E', 'C', 'K', 'P', 'T'};

template <typename T>
T to_little_endian(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

} // namespace

nlohmann::json model_config_to_json(const ModelConfig& c)
{
    return {
        {"dim", c.spec.dim},
        {"experts", c.spec.experts},
        {"heads", c.spec.heads},
        {"layers", c.spec.layers},
        {"patch", c.patch},
        {"image_height", c.image_height},
        {"image_width", c.image_width},
        {"channels", c.channels},
        {"classes", c.classes},
        {"norm", c.norm == NormPlacement::post ? "post" : "pre"},
        {"ln_eps", c.ln_eps},
        {"router_layer", c.router_layer},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j)
{
    const std::string where = "model";
    reject_unknown_keys(j, {"dim", "experts", "heads", "layers", "patch", "image_height", "image_width", "channels",
                            "classes", "norm", "ln_eps", "router_layer"},
                        where);
    ModelConfig c;
    read_if(j, "dim", c.spec.dim, where);
    read_if(j, "experts", c.spec.experts, where);
    read_if(j, "heads", c.spec.heads, where);
    read_if(j, "layers", c.spec.layers, where);
    read_if(j, "patch", c.patch, where);
    read_if(j, "image_height", c.image_height, where);
    read_if(j, "image_width", c.image_width, where);
    read_if(j, "channels", c.channels, where);
    read_if(j, "classes", c.classes, where);
    read_if(j, "ln_eps", c.ln_eps, where);
    read_if(j, "router_layer", c.router_layer, where);
    std::string norm = "post";
    read_if(j, "norm", norm, where);
    if (norm == "post") c.norm = NormPlacement::post;
    else if (norm == "pre") c.norm = NormPlacement::pre;
    else throw ConfigError("model.norm must be 'post' or 'pre'");
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const nlohmann::json& metadata)
{
    const auto tensors = named_parameters(params);

    nlohmann::json header;
    header["format"] = "mone-checkpoint";
    header["version"] = kCheckpointVersion;
    header["dtype"] = "f64";
    header["model"] = model_config_to_json(params.config);
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors) header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
    header["metadata"] = metadata;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = to_little_endian<std::uint64_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) {
        for (double v : t->data()) {
            const double le = to_little_endian(v);
            out.write(reinterpret_cast<const char*>(&le), sizeof le);
        }
    }
    if (!out) throw FormatError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw FormatError("not a checkpoint (bad magic): " + path.string());
    }
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) throw FormatError("truncated checkpoint header");
    len = to_little_endian(len);
    if (len > (std::uint64_t{1} << 30)) throw FormatError("checkpoint header too large");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    if (!header.contains("version")) throw FormatError("checkpoint header has no version");
    if (header.value("format", "") != "mone-checkpoint") throw FormatError("unexpected checkpoint format tag");
    if (header["version"] != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    if (header.value("dtype", "") != "f64") throw FormatError("unsupported checkpoint dtype");

    Checkpoint ck;
    try {
        ck.params = init_model(model_config_from_json(header.at("model")), 0);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint model config: ") + e.what());
    }
    ck.metadata = header.value("metadata", nlohmann::json::object());
    auto tensors = named_parameters(ck.params);
    const auto& listed = header.at("tensors");
    if (!listed.is_array() || listed.size() != tensors.size()) throw FormatError("checkpoint tensor list mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (listed[i].at("name") != tensors[i].name ||
            listed[i].at("shape").get<Shape>() != tensors[i].tensor->shape()) {
            throw FormatError("checkpoint tensor '" + tensors[i].name + "' does not match the model layout");
        }
        for (auto& v : tensors[i].tensor->data()) {
            double raw = 0.0;
            if (!in.read(reinterpret_cast<char*>(&raw), sizeof raw)) throw FormatError("truncated checkpoint payload");
            v = to_little_endian(raw);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
    return ck;
}

} // namespace mone
