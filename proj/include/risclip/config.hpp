#pragma once

#include <filesystem>
#include <json.hpp>

#include "risclip/data.hpp"
#include "risclip/decoder.hpp"
#include "risclip/model.hpp"
#include "risclip/training.hpp"

namespace risclip {

// One JSON document drives everything: model wiring, losses, training,
// synthetic data and paths. Unknown keys are rejected. Defaults form the toy
// configuration the test suite trains end to end.
struct RunConfig {
    std::uint64_t seed = 42;  // backbone + adaptation + decoder init
    ModelConfig model;        // includes BackboneConfig
    DecoderConfig decoder;
    LossConfig loss;
    TrainConfig train;
    SyntheticSpec synthetic;
    std::string data_manifest;          // for train / eval
    std::string vocab_path;             // empty = vocab.json beside the manifest
    std::vector<std::string> vocab_words;  // filled when training; embedded in checkpoints

    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

// Registers all parameters for a run: backbone, adaptation, logit scale and
// the decoder.
ParamStore init_run_params(const RunConfig& cfg);

Vocabulary load_vocabulary_for(const RunConfig& cfg);

}  // namespace risclip
