#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "risclip/backbone.hpp"
#include "risclip/tensor.hpp"

namespace risclip {

// --- RLE codec -----------------------------------------------------------------
// Row-major uncompressed run lengths, alternating and starting with zeros,
// decimal counts joined by single spaces.
std::string rle_encode(const Tensor<std::uint8_t>& mask);
Tensor<std::uint8_t> rle_decode(const std::string& rle, int h, int w);

// --- dataset schema ---------------------------------------------------------------

struct SampleRecord {
    std::string image_path;  // relative to the manifest directory
    std::string expression;
    std::string mask_rle;
    int height = 0, width = 0;
    std::string sample_id;
};

// JSON-lines manifest; schema errors are reported with 1-based line numbers.
std::vector<SampleRecord> load_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path,
                    const std::vector<SampleRecord>& records);

std::vector<std::string> read_vocab_file(const std::filesystem::path& path);
void write_vocab_file(const std::filesystem::path& path, const std::vector<std::string>& words);

// --- synthetic scenes ---------------------------------------------------------------

enum class ShapeKind { circle, square, triangle };

struct SceneShape {
    ShapeKind kind;
    int color;      // palette index
    double cx, cy;  // center, pixel coordinates
    double r;       // half-extent
};

struct Scene {
    std::vector<SceneShape> shapes;
};

struct PaletteColor {
    std::string name;
    float rgb[3];
};
const std::vector<PaletteColor>& color_palette();
int palette_index(const std::string& name);

ShapeKind shape_kind_from_string(const std::string& name);
const char* shape_kind_name(ShapeKind k);

bool shape_contains(const SceneShape& s, double px, double py);
Tensor<std::uint8_t> rasterize_shape(const SceneShape& s, int image_size);

// All scene shapes a closed-template expression refers to. An expression is
// well-posed iff this returns exactly one index.
std::vector<int> match_expression(const Scene& scene, const std::string& expression);

struct SyntheticSpec {
    std::uint64_t seed = 7;
    int n_samples = 16;
    int image_size = 64;
    std::vector<std::string> shapes = {"circle", "square", "triangle"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    std::vector<std::string> relations = {"left_of", "right_of", "above", "below",
                                          "largest", "smallest"};
    int distractors_min = 1, distractors_max = 2;
    double relational_fraction = 0.5;
    double min_size_frac = 0.14, max_size_frac = 0.30;  // of image size, half-extent
    void validate() const;
};

struct GeneratedSample {
    SampleRecord record;
    Scene scene;
    int target_index;
};

struct GenerateResult {
    std::vector<GeneratedSample> samples;
    std::vector<std::string> vocabulary;  // sorted; covers every emitted expression
    int skipped = 0;
};

// Deterministic in spec.seed. Writes images/, manifest.jsonl, vocab.json and
// scenes.jsonl under out_dir.
GenerateResult generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

// The closed word list the generator can ever emit for a spec.
std::vector<std::string> synthetic_vocabulary(const SyntheticSpec& spec);

// --- augmentation ---------------------------------------------------------------

struct AugmentConfig {
    bool enabled = false;
    double rotate_deg = 10.0;
    double translate_frac = 0.1;
    double scale_min = 0.9, scale_max = 1.1;
    double intensity = 0.2;
};

// Same affine applied to image (bilinear) and mask (nearest, re-binarized);
// intensity jitter on the image only. Identity when disabled.
void augment(Tensor<float>& image, Tensor<std::uint8_t>& mask, const AugmentConfig& cfg,
             std::uint64_t seed);

// --- training-side view ---------------------------------------------------------------

struct LoadedSample {
    std::string sample_id;
    Tensor<float> image;        // (H,W,3)
    Tensor<std::uint8_t> mask;  // (H,W)
    std::string expression;
    TokenSequence tokens;
};

std::vector<LoadedSample> load_dataset(const std::filesystem::path& manifest_path,
                                       const Vocabulary& vocab, const BackboneConfig& cfg);

}  // namespace risclip
