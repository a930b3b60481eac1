#pragma once

#include <functional>

#include "risclip/data.hpp"
#include "risclip/decoder.hpp"
#include "risclip/model.hpp"
#include "risclip/objectives.hpp"

namespace risclip {

struct TrainConfig {
    double lr_init = 5e-5;
    double weight_decay = 5e-3;
    double beta1 = 0.9, beta2 = 0.999;
    double poly_power = 0.9;
    int batch_size = 8;
    int stage1_epochs = 1;
    int stage2_epochs = 1;
    std::uint64_t seed = 0;
    double clip_grad_norm = 0.0;  // 0 disables clipping
    AugmentConfig augment;
    void validate() const;
};

// lr_init * (1 - step/total)^power
double lr_schedule(std::int64_t step, std::int64_t total, double lr_init, double power);

struct AdamWState {
    std::map<std::string, Tensor<float>> m, v;
    std::int64_t t = 0;
};

struct TrainState {
    int stage = 1;
    std::int64_t step = 0;         // within the current stage
    std::int64_t total_steps = 0;  // of the current stage
    AdamWState opt;
    double best_loss = 0;
    std::int64_t best_step = -1;
    bool has_best = false;
};

struct HistoryRecord {
    std::int64_t step;
    int stage;
    double loss;
    double lr;
};
using HistorySink = std::function<void(const HistoryRecord&)>;

// subsets of the registry, by role
std::set<std::string> stage1_trainable(const ParamStore& store);  // adapt.* + logit_scale
std::set<std::string> stage2_trainable(const ParamStore& store);  // decoder.* minus buffers
std::set<std::string> no_decay_names(const ParamStore& store);    // norm gains/biases, scalers

std::uint32_t params_checksum(const ParamStore& store, const std::string& prefix);

// Deterministic epoch shuffle (Fisher-Yates over counter-derived uniforms).
std::vector<int> epoch_order(int n, std::uint64_t seed, int stage, std::int64_t epoch);

// Stage 1: fits adapters/CFE/SKE/logit_scale to the patch-level target.
// Resumable: continues from state.step.
void train_stage1(ParamStore& params, const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::vector<LoadedSample>& data, const TrainConfig& tcfg,
                  TrainState& state, const HistorySink& history = nullptr);

// Stage 2: decoder only; everything else stays frozen.
void train_stage2(ParamStore& params, const ModelConfig& mcfg, const DecoderConfig& dcfg,
                  const LossConfig& lcfg, const std::vector<LoadedSample>& data,
                  const TrainConfig& tcfg, TrainState& state, const HistorySink& history = nullptr);

// --- evaluation -----------------------------------------------------------------

// patch level: thresholded grounding map vs downsampled ground truth
MetricsReport evaluate_patch_level(const ParamStore& params, const ModelConfig& mcfg,
                                   const std::vector<LoadedSample>& data,
                                   const std::vector<double>& thresholds = {0.5, 0.7, 0.9});

// pixel level: decoder argmax mask vs ground truth
MetricsReport evaluate_pixel_level(const ParamStore& params, const ModelConfig& mcfg,
                                   const DecoderConfig& dcfg,
                                   const std::vector<LoadedSample>& data,
                                   const std::vector<double>& thresholds = {0.5, 0.7, 0.9});

// single-sample inference helpers
Tensor<std::uint8_t> predict_mask(const ParamStore& params, const ModelConfig& mcfg,
                                  const DecoderConfig& dcfg, const TokenSequence& tokens,
                                  const Tensor<float>& image);
GroundingMap predict_grounding(const ParamStore& params, const ModelConfig& mcfg,
                               const TokenSequence& tokens, const Tensor<float>& image);

}  // namespace risclip
