#pragma once

#include "mone/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mone {

struct Dataset {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::size_t classes = 0;
    std::vector<double> pixels;             ///< count×H×W×C
    std::vector<std::size_t> labels;
    std::vector<std::size_t> planted_token; ///< informative patch per image; empty when unknown

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return height * width * channels; }
    ImageView image(std::size_t i) const;
    /// Throws ConfigError if labels or buffers are inconsistent.
    void validate() const;
};

struct DatasetSplit {
    Dataset train;
    Dataset test;
};

Dataset subset(const Dataset& data, std::span<const std::size_t> indices);
/// Deterministic shuffle by seed, then the last `test_count` images form the test split.
DatasetSplit split_dataset(const Dataset& data, std::size_t test_count, std::uint64_t seed);

struct PlantedPatchOptions {
    std::size_t patch = 8;
    /// Standard deviation of the Gaussian pixel noise everywhere in the image.
    double noise = 1.0;
    /// Glyph pixels are 0 or `amplitude`; about half of each glyph is lit.
    double amplitude = 1.2;
    /// Glyph shapes depend only on this seed, so separately generated splits agree.
    std::uint64_t glyph_seed = 0x6d6f6e65;
};

/// Gaussian-noise images with a single class glyph added inside one randomly
/// chosen patch. Label = glyph identity; the patch index is recorded.
Dataset synth_planted_patch(std::size_t count, std::size_t classes, std::size_t height, std::size_t width,
                            std::uint64_t seed, const PlantedPatchOptions& options = {});

/// The K glyph templates (each patch×patch, row-major) used by synth_planted_patch.
std::vector<std::vector<double>> planted_glyphs(std::size_t classes, const PlantedPatchOptions& options);

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801);
/// pixels are scaled to [0, 1]. Throws FormatError on bad magic or truncation.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Writes pixels quantized to bytes (values clamped to [0, 1]).
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& data);

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    unsigned maxval = 255;
    std::vector<std::uint8_t> values; ///< row-major
};

/// Binary (P5) PGM with one byte per sample.
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

} // namespace mone
