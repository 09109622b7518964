#include "mone/dataset.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace mone {

ImageView Dataset::image(std::size_t i) const
{
    const std::size_t n = image_size();
    return {height, width, channels, std::span<const double>(pixels).subspan(i * n, n)};
}

void Dataset::validate() const
{
    if (pixels.size() != labels.size() * image_size()) throw ConfigError("dataset: pixel buffer size mismatch");
    for (auto l : labels) {
        if (l >= classes) throw ConfigError("dataset: label out of range");
    }
    if (!planted_token.empty() && planted_token.size() != labels.size()) {
        throw ConfigError("dataset: planted token list size mismatch");
    }
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices)
{
    Dataset out;
    out.height = data.height;
    out.width = data.width;
    out.channels = data.channels;
    out.classes = data.classes;
    const std::size_t n = data.image_size();
    out.pixels.reserve(indices.size() * n);
    for (auto i : indices) {
        auto img = data.image(i).pixels;
        out.pixels.insert(out.pixels.end(), img.begin(), img.end());
        out.labels.push_back(data.labels[i]);
        if (!data.planted_token.empty()) out.planted_token.push_back(data.planted_token[i]);
    }
    return out;
}

DatasetSplit split_dataset(const Dataset& data, std::size_t test_count, std::uint64_t seed)
{
    if (test_count >= data.size()) throw ConfigError("dataset: test split larger than the dataset");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto cut = order.end() - static_cast<std::ptrdiff_t>(test_count);
    const std::vector<std::size_t> train_idx(order.begin(), cut), test_idx(cut, order.end());
    return {subset(data, train_idx), subset(data, test_idx)};
}

std::vector<std::vector<double>> planted_glyphs(std::size_t classes, const PlantedPatchOptions& options)
{
    std::mt19937_64 rng(options.glyph_seed);
    std::bernoulli_distribution lit(0.5);
    const std::size_t area = options.patch * options.patch;
    std::vector<std::vector<double>> glyphs;
    while (glyphs.size() < classes) {
        std::vector<double> g(area);
        for (auto& v : g) v = lit(rng) ? options.amplitude : 0.0;
        // Reject near-duplicates so classes stay separable.
        bool distinct = true;
        for (const auto& other : glyphs) {
            std::size_t diff = 0;
            for (std::size_t i = 0; i < area; ++i) diff += (g[i] != other[i]);
            if (diff < area / 4) distinct = false;
        }
        if (distinct) glyphs.push_back(std::move(g));
    }
    return glyphs;
}

Dataset synth_planted_patch(std::size_t count, std::size_t classes, std::size_t height, std::size_t width,
                            std::uint64_t seed, const PlantedPatchOptions& options)
{
    if (classes < 2) throw ConfigError("planted patch: need at least two classes");
    if (options.patch == 0 || height % options.patch != 0 || width % options.patch != 0) {
        throw ConfigError("planted patch: image extents must be divisible by the patch size");
    }
    const auto glyphs = planted_glyphs(classes, options);
    const std::size_t gw = width / options.patch;
    const std::size_t grid = (height / options.patch) * gw;

    Dataset d;
    d.height = height;
    d.width = width;
    d.channels = 1;
    d.classes = classes;
    d.pixels.resize(count * height * width);
    d.labels.resize(count);
    d.planted_token.resize(count);

    std::mt19937_64 rng(seed);
    if (!(options.noise >= 0.0)) throw ConfigError("planted patch: noise must be nonnegative");
    std::normal_distribution<double> noise(0.0, options.noise > 0.0 ? options.noise : 1.0);
    std::uniform_int_distribution<std::size_t> pick_class(0, classes - 1);
    std::uniform_int_distribution<std::size_t> pick_patch(0, grid - 1);
    for (std::size_t s = 0; s < count; ++s) {
        double* img = d.pixels.data() + s * height * width;
        for (std::size_t i = 0; i < height * width; ++i) img[i] = options.noise > 0.0 ? noise(rng) : 0.0;
        const std::size_t label = pick_class(rng);
        const std::size_t token = pick_patch(rng);
        const std::size_t y0 = (token / gw) * options.patch, x0 = (token % gw) * options.patch;
        for (std::size_t py = 0; py < options.patch; ++py)
            for (std::size_t px = 0; px < options.patch; ++px)
                img[(y0 + py) * width + x0 + px] += glyphs[label][py * options.patch + px];
        d.labels[s] = label;
        d.planted_token[s] = token;
    }
    return d;
}

namespace {

std::uint32_t read_be32(std::istream& in, const char* what)
{
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("IDX: truncated ") + what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v)
{
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_bytes(std::istream& in, std::size_t n, const char* what)
{
    std::vector<unsigned char> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n))) {
        throw FormatError(std::string("IDX: truncated ") + what + " payload");
    }
    return buf;
}

} // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels)
{
    std::ifstream img(images, std::ios::binary);
    if (!img) throw FormatError("IDX: cannot open " + images.string());
    std::ifstream lab(labels, std::ios::binary);
    if (!lab) throw FormatError("IDX: cannot open " + labels.string());

    if (read_be32(img, "image header") != 0x00000803) throw FormatError("IDX: bad image magic in " + images.string());
    const std::size_t count = read_be32(img, "image header");
    const std::size_t rows = read_be32(img, "image header");
    const std::size_t cols = read_be32(img, "image header");
    if (read_be32(lab, "label header") != 0x00000801) throw FormatError("IDX: bad label magic in " + labels.string());
    const std::size_t label_count = read_be32(lab, "label header");
    if (label_count != count) throw FormatError("IDX: image and label counts differ");
    if (rows == 0 || cols == 0) throw FormatError("IDX: zero image extent");

    const auto raw_pixels = read_bytes(img, count * rows * cols, "image");
    const auto raw_labels = read_bytes(lab, count, "label");

    Dataset d;
    d.height = rows;
    d.width = cols;
    d.channels = 1;
    d.pixels.resize(raw_pixels.size());
    std::transform(raw_pixels.begin(), raw_pixels.end(), d.pixels.begin(),
                   [](unsigned char v) { return static_cast<double>(v) / 255.0; });
    d.labels.assign(raw_labels.begin(), raw_labels.end());
    d.classes = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
    d.classes = std::max<std::size_t>(d.classes, 10);
    return d;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& data)
{
    if (data.channels != 1) throw FormatError("IDX: only single-channel images are supported");
    std::ofstream img(images, std::ios::binary | std::ios::trunc);
    std::ofstream lab(labels, std::ios::binary | std::ios::trunc);
    if (!img || !lab) throw FormatError("IDX: cannot open output files");
    write_be32(img, 0x00000803);
    write_be32(img, static_cast<std::uint32_t>(data.size()));
    write_be32(img, static_cast<std::uint32_t>(data.height));
    write_be32(img, static_cast<std::uint32_t>(data.width));
    for (double v : data.pixels) {
        const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
        img.put(static_cast<char>(static_cast<unsigned char>(q)));
    }
    write_be32(lab, 0x00000801);
    write_be32(lab, static_cast<std::uint32_t>(data.size()));
    for (auto l : data.labels) {
        if (l > 255) throw FormatError("IDX: label does not fit in a byte");
        lab.put(static_cast<char>(static_cast<unsigned char>(l)));
    }
    if (!img || !lab) throw FormatError("IDX: write failed");
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image)
{
    if (image.maxval == 0 || image.maxval > 255) throw FormatError("PGM: maxval must lie in [1, 255]");
    if (image.values.size() != image.width * image.height) throw FormatError("PGM: value count mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("PGM: cannot open " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << '\n' << image.maxval << '\n';
    out.write(reinterpret_cast<const char*>(image.values.data()), static_cast<std::streamsize>(image.values.size()));
    if (!out) throw FormatError("PGM: write failed");
}

GrayImage read_pgm(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("PGM: cannot open " + path.string());
    std::string magic;
    GrayImage g;
    in >> magic >> g.width >> g.height >> g.maxval;
    if (!in || magic != "P5") throw FormatError("PGM: not a binary graymap");
    if (g.maxval == 0 || g.maxval > 255) throw FormatError("PGM: unsupported maxval");
    in.get();
    g.values.resize(g.width * g.height);
    if (!in.read(reinterpret_cast<char*>(g.values.data()), static_cast<std::streamsize>(g.values.size()))) {
        throw FormatError("PGM: truncated raster");
    }
    for (auto v : g.values) {
        if (v > g.maxval) throw FormatError("PGM: sample exceeds maxval");
    }
    return g;
}

} // namespace mone
